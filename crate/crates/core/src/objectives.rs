//! Training losses with analytic gradients, advantage normalization, and a
//! finite-difference gradient checker.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::kernels::{argmax, log_softmax};
use crate::genmodel::{
    ar_sample_image, backward, build_sequence, forward_with_cache, sample_images, Condition, DecodeMode,
    ImageDistribution, ImageSample, ModelConfig, ModelParams, PromptKind, Sequence, SequenceInputs, TextReadout, Variant,
};
use crate::gridworld::GoalTransition;
use crate::lang::TokenId;
use crate::vision::{tokenize, TokenImage};

/// Named loss terms; a term is `None` when the objective did not compute it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Parts {
    pub inverse: Option<f64>,
    pub forward: Option<f64>,
    pub sft_text: Option<f64>,
    pub sft_image: Option<f64>,
    pub rl: Option<f64>,
}

/// Teacher-forced argmax hit counts and reward statistics gathered while
/// computing a loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stats {
    pub text_correct: usize,
    pub text_total: usize,
    pub image_correct: usize,
    pub image_total: usize,
    pub reward_sum: f64,
    pub reward_count: usize,
    pub reward_failures: usize,
}

impl Stats {
    pub fn action_acc(&self) -> Option<f64> {
        (self.text_total > 0).then(|| self.text_correct as f64 / self.text_total as f64)
    }

    pub fn image_acc(&self) -> Option<f64> {
        (self.image_total > 0).then(|| self.image_correct as f64 / self.image_total as f64)
    }

    pub fn mean_reward(&self) -> Option<f64> {
        (self.reward_count > 0).then(|| self.reward_sum / self.reward_count as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub parts: Parts,
    /// Flat gradient aligned with `ModelParams::data`.
    pub grad: Vec<f64>,
    pub stats: Stats,
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`rows × k`), and its gradient w.r.t. the logits scaled by
/// `scale`. Returns (loss, dlogits, argmax hits).
pub fn mean_nll(logits: &[f64], targets: &[u32], k: usize, scale: f64) -> (f64, Vec<f64>, usize) {
    let rows = targets.len();
    let mut loss = 0.0;
    let mut d = vec![0.0; logits.len()];
    let mut hits = 0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * k..(r + 1) * k];
        let ls = log_softmax(row);
        loss -= ls[t as usize];
        if argmax(row) == t as usize {
            hits += 1;
        }
        let g = scale / rows as f64;
        for (j, l) in ls.iter().enumerate() {
            d[r * k + j] = g * (l.exp() - if j == t as usize { 1.0 } else { 0.0 });
        }
    }
    (loss / rows as f64, d, hits)
}

fn action_tokens(t: &GoalTransition) -> &[TokenId] {
    &t.action.tokens
}

/// Teacher-forcing prefix for the AR image variant: the target shifted by one.
fn ar_prefix<'a>(cfg: &ModelConfig, target: &'a TokenImage) -> Option<&'a [u32]> {
    (cfg.variant == Variant::AR).then(|| &target.tokens[..target.len().saturating_sub(1)])
}

fn check_batch<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::EmptyBatch)
    } else {
        Ok(())
    }
}

/// Mean over the batch of `−(1/L) Σ_i log P(a_i | a_<i, x_t, x_t+1)`.
pub fn inverse_dynamics_loss(params: &ModelParams, batch: &[GoalTransition]) -> Result<LossBreakdown> {
    check_batch(batch)?;
    let cfg = &params.config;
    let b = batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut stats = Stats::default();
    let mut total = 0.0;
    for t in batch {
        let act = action_tokens(t);
        let seq = build_sequence(
            cfg,
            PromptKind::InverseDyn,
            SequenceInputs { before: Some(&t.before), after: Some(&t.after), action: Some(act), ..Default::default() },
        )?;
        let (out, cache) = forward_with_cache(params, &seq, TextReadout::Targets)?;
        let (loss, d, hits) = mean_nll(&out.text_logits, act, cfg.vocab_size, 1.0 / b);
        stats.text_correct += hits;
        stats.text_total += act.len();
        total += loss;
        backward(params, &seq, &cache, Some(&d), None, &mut grad)?;
    }
    let total = total / b;
    Ok(LossBreakdown { total, parts: Parts { inverse: Some(total), ..Parts::default() }, grad, stats })
}

/// Mean over the batch of `−(1/N) Σ_rows log P(x_t+1[row] | x_t, a_t)`.
pub fn forward_dynamics_loss(params: &ModelParams, batch: &[GoalTransition]) -> Result<LossBreakdown> {
    check_batch(batch)?;
    let cfg = &params.config;
    let b = batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut stats = Stats::default();
    let mut total = 0.0;
    for t in batch {
        let target = tokenize(&t.after);
        let seq = build_sequence(
            cfg,
            PromptKind::ForwardDyn,
            SequenceInputs {
                before: Some(&t.before),
                after: Some(&t.after),
                action: Some(action_tokens(t)),
                with_image: true,
                ar_prefix: ar_prefix(cfg, &target),
                ..Default::default()
            },
        )?;
        let (out, cache) = forward_with_cache(params, &seq, TextReadout::None)?;
        let logits = image_logits(&out.image_logits, &seq)?;
        let (loss, d, hits) = mean_nll(logits, &target.tokens, cfg.codebook_size, 1.0 / b);
        stats.image_correct += hits;
        stats.image_total += target.len();
        total += loss;
        backward(params, &seq, &cache, None, Some(&d), &mut grad)?;
    }
    let total = total / b;
    Ok(LossBreakdown { total, parts: Parts { forward: Some(total), ..Parts::default() }, grad, stats })
}

fn image_logits<'a>(logits: &'a Option<Vec<f64>>, seq: &Sequence) -> Result<&'a [f64]> {
    logits.as_deref().ok_or_else(|| Error::ShapeMismatch(format!("{:?} sequence has no image rows", seq.kind)))
}

/// Joint inverse + forward dynamics objective used in pretraining; either
/// term may be disabled.
pub fn pretrain_loss(params: &ModelParams, batch: &[GoalTransition], use_idm: bool, use_fdm: bool) -> Result<LossBreakdown> {
    check_batch(batch)?;
    if !use_idm && !use_fdm {
        return Err(Error::Config("pretraining needs at least one of the two dynamics terms".into()));
    }
    let mut acc: Option<LossBreakdown> = None;
    for (on, f) in [
        (use_idm, inverse_dynamics_loss as fn(&ModelParams, &[GoalTransition]) -> Result<LossBreakdown>),
        (use_fdm, forward_dynamics_loss),
    ] {
        if !on {
            continue;
        }
        let lb = f(params, batch)?;
        acc = Some(match acc {
            None => lb,
            Some(mut a) => {
                a.total += lb.total;
                a.parts.forward = lb.parts.forward;
                for (g, h) in a.grad.iter_mut().zip(&lb.grad) {
                    *g += h;
                }
                a.stats.image_correct += lb.stats.image_correct;
                a.stats.image_total += lb.stats.image_total;
                a
            }
        });
    }
    Ok(acc.expect("at least one term enabled"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftOptions {
    /// Weight of the image term; 0 drops image generation entirely.
    pub image_weight: f64,
    /// Divide the image term by the number of image positions.
    pub normalize_image: bool,
}

impl Default for SftOptions {
    fn default() -> Self {
        SftOptions { image_weight: 1.0, normalize_image: true }
    }
}

/// Supervised planning loss: action tokens given (g, x_t), plus next-state
/// image tokens given (g, x_t, a_t).
pub fn sft_loss(params: &ModelParams, batch: &[GoalTransition], opts: &SftOptions) -> Result<LossBreakdown> {
    plan_loss(params, batch, opts, 1.0, None).map(|(lb, _)| lb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    #[default]
    PerPrompt,
    PerBatch,
}

pub const ADVANTAGE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    /// `None` marks a sample whose reward could not be computed.
    pub rewards: Vec<Option<f64>>,
    pub normalized: Vec<f64>,
    pub advantages: Vec<f64>,
    pub groups: usize,
    pub k: usize,
}

/// `r̃ = (r − μ)/σ` over each group with population σ; a group with
/// `σ < eps` gets all-zero advantages.
pub fn normalize_advantages(rewards: &[f64], groups: usize, mode: AdvantageMode, eps: f64) -> Result<AdvantageBatch> {
    let r: Vec<Option<f64>> = rewards.iter().map(|&v| Some(v)).collect();
    normalize_partial(&r, groups, mode, eps)
}

/// Like [`normalize_advantages`], but missing rewards are left out of the
/// group statistics and receive zero advantage.
pub fn normalize_partial(rewards: &[Option<f64>], groups: usize, mode: AdvantageMode, eps: f64) -> Result<AdvantageBatch> {
    if groups == 0 || rewards.len() % groups != 0 || rewards.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} rewards in {groups} groups", rewards.len())));
    }
    let k = rewards.len() / groups;
    if mode == AdvantageMode::PerPrompt && k < 2 {
        return Err(Error::DegenerateGroup(format!("per-prompt grouping needs K ≥ 2, got {k}")));
    }
    let spans: Vec<std::ops::Range<usize>> = match mode {
        AdvantageMode::PerPrompt => (0..groups).map(|g| g * k..(g + 1) * k).collect(),
        AdvantageMode::PerBatch => vec![0..rewards.len()],
    };
    let mut adv = vec![0.0; rewards.len()];
    for span in spans {
        let vals: Vec<f64> = rewards[span.clone()].iter().flatten().copied().collect();
        if vals.len() < 2 {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if !(std >= eps) {
            continue;
        }
        for i in span {
            if let Some(v) = rewards[i] {
                adv[i] = (v - mean) / std;
            }
        }
    }
    Ok(AdvantageBatch { rewards: rewards.to_vec(), normalized: adv.clone(), advantages: adv, groups, k })
}

/// `Σ_k w_k · logP(x^k)` under one distribution, summed per row as
/// `Σ_k w_k z[x^k] − (Σ_k w_k) · lse`, so logits no sample picked only enter
/// through `Σ_k w_k`, which is zero up to rounding for centered advantages.
pub fn weighted_log_prob(dist: &ImageDistribution, images: &[&TokenImage], w: &[f64]) -> Result<f64> {
    if images.len() != w.len() || images.iter().any(|x| x.len() != dist.rows) {
        return Err(Error::ShapeMismatch("weighted log-prob operands".into()));
    }
    let wsum: f64 = w.iter().sum();
    let mut total = 0.0;
    for r in 0..dist.rows {
        let row = dist.row(r);
        let mut acc = 0.0;
        for (x, &wk) in images.iter().zip(w) {
            let t = x.tokens[r] as usize;
            if t >= dist.k {
                return Err(Error::InvalidToken { id: t as u32, size: dist.k });
            }
            acc += wk * row[t];
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += acc - wsum * lse;
    }
    Ok(total)
}

/// Adds the REINFORCE term `−coef · ∇ logP(x)` for one sample to the
/// image-logit gradient.
fn reinforce_into(dist: &ImageDistribution, image: &TokenImage, coef: f64, d: &mut [f64]) {
    if coef != 0.0 {
        let k = dist.k;
        for (r, &t) in image.tokens.iter().enumerate() {
            let ls = log_softmax(dist.row(r));
            for j in 0..k {
                let onehot = if j == t as usize { 1.0 } else { 0.0 };
                d[r * k + j] -= coef * (onehot - ls[j].exp());
            }
        }
    }
}

fn plan_sequence(cfg: &ModelConfig, t: &GoalTransition, with_image: bool, prefix: Option<&[u32]>) -> Result<Sequence> {
    build_sequence(
        cfg,
        PromptKind::Plan,
        SequenceInputs {
            task: Some(&t.task),
            before: Some(&t.before),
            after: Some(&t.after),
            action: Some(action_tokens(t)),
            with_image,
            ar_prefix: prefix,
        },
    )
}

/// `−(1/(B·K)) Σ A_k · logP(x^k | g, x_t, a_t)` for fixed samples and
/// advantages; `samples` holds K images per batch entry.
pub fn rl_loss(params: &ModelParams, batch: &[GoalTransition], samples: &[Vec<TokenImage>], adv: &AdvantageBatch) -> Result<LossBreakdown> {
    check_batch(batch)?;
    if samples.len() != batch.len() || adv.groups != batch.len() || samples.iter().any(|s| s.len() != adv.k) {
        return Err(Error::ShapeMismatch("samples, advantages and batch disagree".into()));
    }
    let cfg = &params.config;
    let bk = (batch.len() * adv.k) as f64;
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for (i, t) in batch.iter().enumerate() {
        match cfg.variant {
            Variant::OneStep => {
                let seq = plan_sequence(cfg, t, true, None)?;
                let (out, cache) = forward_with_cache(params, &seq, TextReadout::None)?;
                let dist = ImageDistribution::new(image_logits(&out.image_logits, &seq)?.to_vec(), seq.image_rows.len(), cfg.codebook_size)?;
                let mut d = vec![0.0; dist.logits.len()];
                let a = &adv.advantages[i * adv.k..(i + 1) * adv.k];
                for (x, &ak) in samples[i].iter().zip(a) {
                    reinforce_into(&dist, x, ak / bk, &mut d);
                }
                total -= weighted_log_prob(&dist, &samples[i].iter().collect::<Vec<_>>(), a)?;
                if a.iter().any(|&ak| ak != 0.0) {
                    backward(params, &seq, &cache, None, Some(&d), &mut grad)?;
                }
            }
            Variant::AR => {
                for (j, x) in samples[i].iter().enumerate() {
                    let a = adv.advantages[i * adv.k + j];
                    let (lp, _) = ar_reinforce(params, t, x, a / bk, &mut grad)?;
                    total -= a * lp;
                }
            }
        }
    }
    let total = total / bk;
    Ok(LossBreakdown { total, parts: Parts { rl: Some(total), ..Parts::default() }, grad, stats: Stats::default() })
}

/// Teacher-forced AR score of one sample, with its REINFORCE gradient.
fn ar_reinforce(params: &ModelParams, t: &GoalTransition, x: &TokenImage, coef: f64, grad: &mut [f64]) -> Result<(f64, ())> {
    let cfg = &params.config;
    let seq = plan_sequence(cfg, t, true, ar_prefix(cfg, x))?;
    let (out, cache) = forward_with_cache(params, &seq, TextReadout::None)?;
    let dist = ImageDistribution::new(image_logits(&out.image_logits, &seq)?.to_vec(), seq.image_rows.len(), cfg.codebook_size)?;
    let mut d = vec![0.0; dist.logits.len()];
    let lp = dist.log_prob(x)?;
    reinforce_into(&dist, x, coef, &mut d);
    if coef != 0.0 {
        backward(params, &seq, &cache, None, Some(&d), grad)?;
    }
    Ok((lp, ()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsftOptions {
    pub sft: SftOptions,
    pub k: usize,
    pub lambda: f64,
    /// Weight of the supervised term; 0 gives the policy-gradient-only form.
    pub sft_weight: f64,
    pub advantage_mode: AdvantageMode,
}

impl Default for RsftOptions {
    fn default() -> Self {
        RsftOptions { sft: SftOptions::default(), k: 8, lambda: 0.5, sft_weight: 1.0, advantage_mode: AdvantageMode::PerPrompt }
    }
}

/// Scores one sampled next-state image for a transition.
pub type RewardFn<'a> = dyn FnMut(&GoalTransition, &TokenImage) -> Result<f64> + 'a;

/// Everything the RL part of a step produced, kept for logging and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct RlTrace {
    pub samples: Vec<Vec<ImageSample>>,
    pub advantages: AdvantageBatch,
}

struct RlRequest<'r, 'f> {
    opts: &'r RsftOptions,
    reward: &'r mut RewardFn<'f>,
    rng: &'r mut dyn RngCore,
}

/// `total = sft_weight · L_SFT + λ · L_RL`, sampling K images per prompt
/// from the same forward pass that scores the supervised targets.
pub fn rsft_loss<R: Rng>(
    params: &ModelParams,
    batch: &[GoalTransition],
    opts: &RsftOptions,
    reward: &mut RewardFn,
    rng: &mut R,
) -> Result<(LossBreakdown, RlTrace)> {
    if !(opts.lambda >= 0.0) || opts.k == 0 {
        return Err(Error::Config("rsft needs λ ≥ 0 and K ≥ 1".into()));
    }
    if opts.sft.image_weight == 0.0 {
        return Err(Error::Config("rsft samples images, so the image head cannot be disabled".into()));
    }
    let req = RlRequest { opts, reward, rng };
    let (lb, trace) = plan_loss(params, batch, &opts.sft, opts.sft_weight, Some(req))?;
    Ok((lb, trace.expect("rl branch always records a trace")))
}

struct Prepared {
    seq: Sequence,
    cache: crate::genmodel::Cache,
    d_text: Vec<f64>,
    d_image: Option<Vec<f64>>,
    dist: Option<ImageDistribution>,
}

fn plan_loss(
    params: &ModelParams,
    batch: &[GoalTransition],
    opts: &SftOptions,
    sft_weight: f64,
    rl: Option<RlRequest>,
) -> Result<(LossBreakdown, Option<RlTrace>)> {
    check_batch(batch)?;
    let cfg = &params.config;
    let b = batch.len() as f64;
    let with_image = opts.image_weight != 0.0;
    let mut stats = Stats::default();
    let (mut text_sum, mut image_sum) = (0.0, 0.0);
    let mut prepared = Vec::with_capacity(batch.len());

    // supervised pass: one forward per prompt
    for t in batch {
        let act = action_tokens(t);
        let target = tokenize(&t.after);
        let seq = plan_sequence(cfg, t, with_image, if with_image { ar_prefix(cfg, &target) } else { None })?;
        let (out, cache) = forward_with_cache(params, &seq, TextReadout::Targets)?;
        let (tl, mut d_text, hits) = mean_nll(&out.text_logits, act, cfg.vocab_size, sft_weight / b);
        stats.text_correct += hits;
        stats.text_total += act.len();
        text_sum += tl;
        let (mut d_image, mut dist) = (None, None);
        if with_image {
            let logits = image_logits(&out.image_logits, &seq)?;
            let rows = target.len() as f64;
            // the 1/N of mean_nll is undone when the image term is a plain sum
            let norm = if opts.normalize_image { 1.0 } else { rows };
            let (il, di, ih) = mean_nll(logits, &target.tokens, cfg.codebook_size, sft_weight * opts.image_weight * norm / b);
            stats.image_correct += ih;
            stats.image_total += target.len();
            image_sum += il * norm;
            d_image = Some(di);
            dist = Some(ImageDistribution::new(logits.to_vec(), seq.image_rows.len(), cfg.codebook_size)?);
        }
        if sft_weight == 0.0 {
            d_text.iter_mut().for_each(|v| *v = 0.0);
            if let Some(di) = d_image.as_mut() {
                di.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        prepared.push(Prepared { seq, cache, d_text, d_image, dist });
    }
    let sft_text = text_sum / b;
    let sft_image = with_image.then(|| image_sum / b);
    let sft_total = sft_text + opts.image_weight * sft_image.unwrap_or(0.0);

    let mut parts = Parts { sft_text: Some(sft_text), sft_image, ..Parts::default() };
    let mut total = sft_weight * sft_total;
    let mut trace = None;
    let mut grad = vec![0.0; params.len()];

    if let Some(req) = rl {
        let k = req.opts.k;
        let bk = (batch.len() * k) as f64;
        // K samples per prompt from the distribution already computed
        let mut samples: Vec<Vec<ImageSample>> = Vec::with_capacity(batch.len());
        for (t, p) in batch.iter().zip(&prepared) {
            let s = match cfg.variant {
                Variant::OneStep => sample_images(p.dist.as_ref().expect("image head enabled"), k, &mut *req.rng),
                Variant::AR => {
                    let cond = Condition::plan(&t.task, &t.before, Some(action_tokens(t)));
                    (0..k).map(|_| ar_sample_image(params, &cond, DecodeMode::Sample, &mut *req.rng)).collect::<Result<_>>()?
                }
            };
            samples.push(s);
        }
        let mut rewards = Vec::with_capacity(batch.len() * k);
        for (t, s) in batch.iter().zip(&samples) {
            for smp in s {
                match (req.reward)(t, &smp.image) {
                    Ok(r) if r.is_finite() => {
                        stats.reward_sum += r;
                        stats.reward_count += 1;
                        rewards.push(Some(r));
                    }
                    _ => {
                        stats.reward_failures += 1;
                        rewards.push(None);
                    }
                }
            }
        }
        let adv = normalize_partial(&rewards, batch.len(), req.opts.advantage_mode, ADVANTAGE_EPS)?;
        let lambda = req.opts.lambda;
        let mut rl_sum = 0.0;
        for (i, (t, p)) in batch.iter().zip(prepared.iter_mut()).enumerate() {
            let a = &adv.advantages[i * k..(i + 1) * k];
            match cfg.variant {
                Variant::OneStep => {
                    let dist = p.dist.as_ref().expect("image head enabled");
                    let d = p.d_image.as_mut().expect("image head enabled");
                    for (smp, &ak) in samples[i].iter().zip(a) {
                        reinforce_into(dist, &smp.image, lambda * ak / bk, d);
                    }
                    let images: Vec<&TokenImage> = samples[i].iter().map(|s| &s.image).collect();
                    rl_sum -= weighted_log_prob(dist, &images, a)?;
                }
                Variant::AR => {
                    for (smp, &ak) in samples[i].iter().zip(a) {
                        rl_sum -= ak * ar_reinforce(params, t, &smp.image, lambda * ak / bk, &mut grad)?.0;
                    }
                }
            }
        }
        let rl_part = rl_sum / bk;
        parts.rl = Some(rl_part);
        total += lambda * rl_part;
        trace = Some(RlTrace { samples, advantages: adv });
    }

    for p in &prepared {
        let dt = (sft_weight != 0.0).then_some(p.d_text.as_slice());
        backward(params, &p.seq, &p.cache, dt, p.d_image.as_deref(), &mut grad)?;
    }
    Ok((LossBreakdown { total, parts, grad, stats }, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub probes: usize,
}

/// Compares the analytic gradient with central differences
/// `(f(w+h) − f(w−h)) / 2h` on `n_probes` random coordinates.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &ModelParams, n_probes: usize, h: f64, seed: u64) -> Result<FdReport>
where
    F: FnMut(&ModelParams) -> Result<LossBreakdown>,
{
    let base = loss_fn(params)?;
    let again = loss_fn(params)?;
    if base.total.to_bits() != again.total.to_bits() {
        return Err(Error::NonDeterministicLoss(base.total, again.total));
    }
    if base.grad.len() != params.len() {
        return Err(Error::ShapeMismatch("gradient length differs from parameter count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample_indices(&mut rng, params.len(), n_probes.min(params.len()));
    let mut probe = params.clone();
    let mut report = FdReport { max_rel_err: 0.0, worst_index: 0, probes: 0 };
    for i in idx.iter() {
        let w = params.data[i];
        probe.data[i] = w + h;
        let up = loss_fn(&probe)?.total;
        probe.data[i] = w - h;
        let down = loss_fn(&probe)?.total;
        probe.data[i] = w;
        let fd = (up - down) / (2.0 * h);
        let rel = (base.grad[i] - fd).abs() / (fd.abs() + 1e-8);
        if report.probes == 0 || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.probes += 1;
    }
    Ok(report)
}
