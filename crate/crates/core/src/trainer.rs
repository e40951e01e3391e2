//! Three-phase training: joint dynamics pretraining, supervised planning
//! warm-up, and reinforced fine-tuning, with a decoupled-decay Adam
//! optimizer, resumable checkpoints, and a per-step metrics stream.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::dynreward::{dynamic_reward, RewardParams};
use crate::error::{Error, Result};
use crate::genmodel::checkpoint::{flat_from_tensors, params_tensors, Container, ModelHeader};
use crate::genmodel::kernels::argmax;
use crate::genmodel::{
    ar_sample_image, build_sequence, forward, init_params, predict_image, sample_images, Condition, DecodeMode,
    ModelConfig, ModelParams, PromptKind, SequenceInputs, TextReadout, Variant,
};
use crate::gridworld::{render, GoalTransition};
use crate::objectives::{pretrain_loss, rsft_loss, sft_loss, AdvantageMode, LossBreakdown, RewardFn, RsftOptions, SftOptions};
use crate::vision::{detokenize, tokenize, FusionMode, TokenImage};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const STREAM_INIT: u64 = 0x11;
const STREAM_PRETRAIN: u64 = 0x21;
const STREAM_PLAN: u64 = 0x22;
const STREAM_SAMPLE: u64 = 0x31;
const STREAM_EVAL: u64 = 0x41;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub no_idm: bool,
    pub no_fdm: bool,
    pub no_se: bool,
    pub no_en: bool,
    pub no_gen: bool,
    pub rl_only: bool,
    pub ar_variant: bool,
}

impl Ablations {
    /// Architecture changes implied by the flags.
    pub fn apply(&self, cfg: &ModelConfig) -> Result<ModelConfig> {
        let mut out = cfg.clone();
        out.fusion = match (self.no_se, self.no_en) {
            (false, false) => cfg.fusion,
            (true, false) => FusionMode::NoSe,
            (false, true) => FusionMode::NoEn,
            (true, true) => return Err(Error::Config("no_se and no_en remove both towers".into())),
        };
        if self.ar_variant {
            out.variant = Variant::AR;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub k: usize,
    pub lambda: f64,
    pub pretrain_steps: usize,
    pub sft_steps: usize,
    pub rsft_steps: usize,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub advantage_mode: AdvantageMode,
    /// Divide the image likelihood by the number of image positions.
    pub normalize_image: bool,
    /// Test-set reward is evaluated every this many steps (and at the end).
    pub eval_every: usize,
    /// Number of test transitions scored per evaluation.
    pub eval_prompts: usize,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            k: 8,
            lambda: 0.5,
            pretrain_steps: 2000,
            sft_steps: 500,
            rsft_steps: 2000,
            warmup_frac: 0.03,
            weight_decay: 0.01,
            seed: 0,
            advantage_mode: AdvantageMode::PerPrompt,
            normalize_image: true,
            eval_every: 50,
            eval_prompts: 64,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.lr) || self.batch_size == 0 || self.k == 0 || self.eval_every == 0 {
            return Err(Error::Config("lr, batch_size, k and eval_every must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("warmup_frac must lie in [0, 1] and weight_decay must be ≥ 0".into()));
        }
        if self.ablations.no_idm && self.ablations.no_fdm {
            return Err(Error::Config("no_idm and no_fdm together leave nothing to pretrain".into()));
        }
        if self.ablations.no_se && self.ablations.no_en {
            return Err(Error::Config("no_se and no_en remove both towers".into()));
        }
        Ok(())
    }

    pub fn sft_options(&self) -> SftOptions {
        SftOptions { image_weight: if self.ablations.no_gen { 0.0 } else { 1.0 }, normalize_image: self.normalize_image }
    }

    pub fn rsft_options(&self) -> RsftOptions {
        RsftOptions {
            sft: self.sft_options(),
            k: self.k,
            lambda: self.lambda,
            sft_weight: if self.ablations.rl_only { 0.0 } else { 1.0 },
            advantage_mode: self.advantage_mode,
        }
    }

    fn steps(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pretrain => self.pretrain_steps,
            Phase::Sft => self.sft_steps,
            Phase::Rsft => self.rsft_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Sft,
    Rsft,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Sft => "sft",
            Phase::Rsft => "rsft",
        }
    }

    /// The supervised and reinforced phases share a batch stream, so a
    /// reinforced run with no RL term retraces a supervised run.
    fn batch_stream(self) -> u64 {
        match self {
            Phase::Pretrain => STREAM_PRETRAIN,
            Phase::Sft | Phase::Rsft => STREAM_PLAN,
        }
    }
}

/// Learning rate at 0-based `step`: linear warmup over
/// `ceil(warmup_frac · total)` steps, then linear decay that reaches
/// `base / (total - warm)` on the last step.
pub fn lr_at(base: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warm = (warmup_frac * total as f64).ceil() as usize;
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        base * total.saturating_sub(step) as f64 / (total - warm).max(1) as f64
    }
}

/// Adam with decoupled weight decay applied only to matrix parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        AdamW { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`, where the decay term is skipped for
    /// coordinates with `decay[i] == false`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], decay: &[bool], lr: f64, wd: f64) -> Result<()> {
        if theta.len() != grad.len() || theta.len() != self.m.len() || decay.len() != theta.len() {
            return Err(Error::ShapeMismatch("optimizer state, parameters and gradient differ in length".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            let mut upd = mh / (vh.sqrt() + ADAM_EPS);
            if decay[i] {
                upd += wd * theta[i];
            }
            theta[i] -= lr * upd;
        }
        Ok(())
    }
}

/// Per-coordinate decay mask for a parameter layout.
pub fn decay_mask(p: &ModelParams) -> Vec<bool> {
    let mut mask = vec![false; p.len()];
    for (name, r, _) in &p.layout.tensors {
        if p.layout.decays(name) {
            mask[r.clone()].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// u128 word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(r: &ChaCha8Rng) -> Self {
        RngState { seed: r.get_seed(), stream: r.get_stream(), word_pos: r.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::CorruptCheckpoint(format!("bad word position {:?}", self.word_pos)))?;
        r.set_word_pos(pos);
        Ok(r)
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub phase: Phase,
    /// Steps of `phase` already taken.
    pub step: usize,
    pub train: TrainConfig,
    pub batch_rng: ChaCha8Rng,
    pub sample_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainHeader {
    model: ModelHeader,
    train: TrainConfig,
    phase: Phase,
    step: usize,
    adam_t: u64,
    batch_rng: RngState,
    sample_rng: RngState,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let header = TrainHeader {
            model: ModelHeader::new(&self.params.config, self.train.seed),
            train: self.train.clone(),
            phase: self.phase,
            step: self.step,
            adam_t: self.optimizer.t,
            batch_rng: RngState::capture(&self.batch_rng),
            sample_rng: RngState::capture(&self.sample_rng),
        };
        let mut tensors = params_tensors(&self.params, "p.");
        let shadow = |data: &[f64]| ModelParams::from_data(&self.params.config, data.to_vec());
        tensors.extend(params_tensors(&shadow(&self.optimizer.m)?, "adam_m."));
        tensors.extend(params_tensors(&shadow(&self.optimizer.v)?, "adam_v."));
        Ok(Container { header: serde_json::to_value(header)?, tensors })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let h: TrainHeader = serde_json::from_value(c.header.clone()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let cfg = &h.model.config;
        let params = ModelParams::from_data(cfg, flat_from_tensors(c, cfg, "p.")?)?;
        let optimizer = AdamW { m: flat_from_tensors(c, cfg, "adam_m.")?, v: flat_from_tensors(c, cfg, "adam_v.")?, t: h.adam_t };
        Ok(Checkpoint {
            params,
            optimizer,
            phase: h.phase,
            step: h.step,
            train: h.train,
            batch_rng: h.batch_rng.restore()?,
            sample_rng: h.sample_rng.restore()?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Checkpoint::from_container(&Container::from_bytes(bytes)?)
    }

    /// Whether the phase recorded in this checkpoint has run to completion.
    pub fn finished(&self) -> bool {
        self.step >= self.train.steps(self.phase)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// One line of the metrics stream. Empty cells mean "not computed".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub phase: Phase,
    pub loss_total: f64,
    pub loss_sft_text: Option<f64>,
    pub loss_sft_image: Option<f64>,
    pub loss_rl: Option<f64>,
    pub mean_reward: Option<f64>,
    pub test_reward: Option<f64>,
    pub action_acc: Option<f64>,
    pub image_token_acc: Option<f64>,
    /// Model forward calls spent on this step's loss.
    pub fwd_calls: u64,
    pub loss_inverse: Option<f64>,
    pub loss_forward: Option<f64>,
    pub reward_failures: usize,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
}

/// Run-time hooks: early stop (to simulate interruption), periodic
/// checkpoints, and a per-row callback.
#[derive(Default)]
pub struct Control<'a> {
    /// Stop once the phase has taken this many steps.
    pub stop_after: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub on_checkpoint: Option<&'a mut dyn FnMut(&Checkpoint) -> Result<()>>,
    pub on_row: Option<&'a mut dyn FnMut(&MetricsRow)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Fresh model at initialization, labelled as an unstarted pretraining phase.
pub fn initial_checkpoint(cfg: &TrainConfig, model: &ModelConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let mc = cfg.ablations.apply(model)?;
    let params = init_params(&mc, derive_seed(cfg.seed, STREAM_INIT))?;
    let n = params.len();
    let (batch_rng, sample_rng) = phase_rngs(cfg.seed, Phase::Pretrain);
    Ok(Checkpoint { params, optimizer: AdamW::new(n), phase: Phase::Pretrain, step: 0, train: cfg.clone(), batch_rng, sample_rng })
}

fn phase_rngs(seed: u64, phase: Phase) -> (ChaCha8Rng, ChaCha8Rng) {
    (
        ChaCha8Rng::seed_from_u64(derive_seed(seed, phase.batch_stream())),
        ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SAMPLE)),
    )
}

/// Resumes `ckpt` if it is already in `phase`; otherwise starts `phase`
/// from its parameters with fresh optimizer and RNG state.
fn enter(ckpt: Checkpoint, cfg: &TrainConfig, phase: Phase, allowed_from: &[Phase]) -> Result<Checkpoint> {
    cfg.validate()?;
    if ckpt.phase == phase {
        return Ok(Checkpoint { train: cfg.clone(), ..ckpt });
    }
    if !allowed_from.contains(&ckpt.phase) {
        return Err(Error::Config(format!("{} cannot start from a {} checkpoint", phase.name(), ckpt.phase.name())));
    }
    if !ckpt.finished() {
        return Err(Error::Config(format!("{} checkpoint is unfinished ({} of {} steps)", ckpt.phase.name(), ckpt.step, ckpt.train.steps(ckpt.phase))));
    }
    let n = ckpt.params.len();
    let (batch_rng, sample_rng) = phase_rngs(cfg.seed, phase);
    Ok(Checkpoint { params: ckpt.params, optimizer: AdamW::new(n), phase, step: 0, train: cfg.clone(), batch_rng, sample_rng })
}

fn draw_batch<'d>(data: &'d [GoalTransition], b: usize, rng: &mut ChaCha8Rng) -> Vec<GoalTransition> {
    (0..b).map(|_| data[rng.gen_range(0..data.len())].clone()).collect()
}

fn check_finite(step: usize, lb: &LossBreakdown) -> Result<()> {
    if lb.total.is_finite() && lb.grad.iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    let bad = lb.grad.iter().filter(|g| !g.is_finite()).count();
    Err(Error::NonFiniteLoss {
        step,
        detail: format!("total={} parts={:?} non-finite gradient entries={bad} stats={:?}", lb.total, lb.parts, lb.stats),
    })
}

/// The generic step loop shared by all phases.
fn run_phase<F>(
    mut ck: Checkpoint,
    train: &[GoalTransition],
    ctl: &mut Control,
    mut eval: Option<&mut dyn FnMut(&ModelParams) -> Result<f64>>,
    mut loss: F,
) -> Result<PhaseRun>
where
    F: FnMut(&ModelParams, &[GoalTransition], &mut ChaCha8Rng) -> Result<LossBreakdown>,
{
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cfg = ck.train.clone();
    let total = cfg.steps(ck.phase);
    let decay = decay_mask(&ck.params);
    let mut rows = Vec::new();
    while ck.step < total {
        if ctl.stop_after.is_some_and(|s| ck.step >= s) {
            break;
        }
        let batch = draw_batch(train, cfg.batch_size, &mut ck.batch_rng);
        let before = ck.params.forward_calls();
        let lb = loss(&ck.params, &batch, &mut ck.sample_rng)?;
        let fwd_calls = ck.params.forward_calls() - before;
        check_finite(ck.step + 1, &lb)?;
        let lr = lr_at(cfg.lr, ck.step, total, cfg.warmup_frac);
        ck.optimizer.step(&mut ck.params.data, &lb.grad, &decay, lr, cfg.weight_decay)?;
        if !ck.params.all_finite() {
            return Err(Error::NonFiniteLoss { step: ck.step + 1, detail: format!("parameters became non-finite after update, parts={:?}", lb.parts) });
        }
        ck.step += 1;
        let test_reward = match eval.as_deref_mut() {
            Some(f) if ck.step % cfg.eval_every == 0 || ck.step == total => Some(f(&ck.params)?),
            _ => None,
        };
        let row = MetricsRow {
            step: ck.step,
            phase: ck.phase,
            loss_total: lb.total,
            loss_sft_text: lb.parts.sft_text,
            loss_sft_image: lb.parts.sft_image,
            loss_rl: lb.parts.rl,
            mean_reward: lb.stats.mean_reward(),
            test_reward,
            action_acc: lb.stats.action_acc(),
            image_token_acc: lb.stats.image_acc(),
            fwd_calls,
            loss_inverse: lb.parts.inverse,
            loss_forward: lb.parts.forward,
            reward_failures: lb.stats.reward_failures,
        };
        if let Some(f) = ctl.on_row.as_deref_mut() {
            f(&row);
        }
        rows.push(row);
        if let (Some(every), Some(f)) = (ctl.checkpoint_every, ctl.on_checkpoint.as_deref_mut()) {
            if ck.step % every == 0 {
                f(&ck)?;
            }
        }
    }
    Ok(PhaseRun { checkpoint: ck, metrics: rows })
}

/// Joint inverse + forward dynamics pretraining. Starts from `init` (a
/// fresh [`initial_checkpoint`] when `None`) or resumes a pretraining
/// checkpoint.
pub fn pretrain(cfg: &TrainConfig, model: &ModelConfig, train: &[GoalTransition], init: Option<Checkpoint>, ctl: &mut Control) -> Result<PhaseRun> {
    let ck = match init {
        Some(c) => enter(c, cfg, Phase::Pretrain, &[])?,
        None => initial_checkpoint(cfg, model)?,
    };
    let (idm, fdm) = (!cfg.ablations.no_idm, !cfg.ablations.no_fdm);
    run_phase(ck, train, ctl, None, |p, b, _| pretrain_loss(p, b, idm, fdm))
}

/// Supervised planning warm-up from a finished pretraining checkpoint.
pub fn sft_phase(cfg: &TrainConfig, ckpt: Checkpoint, train: &[GoalTransition], test: &[GoalTransition], reward: &RewardParams, ctl: &mut Control) -> Result<PhaseRun> {
    let ck = enter(ckpt, cfg, Phase::Sft, &[Phase::Pretrain])?;
    let opts = cfg.sft_options();
    let mut eval = test_evaluator(cfg, test, reward);
    run_phase(ck, train, ctl, eval.as_mut().map(|f| f as &mut dyn FnMut(&ModelParams) -> Result<f64>), |p, b, _| sft_loss(p, b, &opts))
}

/// Reinforced fine-tuning: `L_SFT + λ·L_RL` with K samples per prompt
/// scored by `reward`. Starts from a finished SFT checkpoint, or from a
/// finished pretraining checkpoint when `rl_only` is set.
pub fn rsft_phase(
    cfg: &TrainConfig,
    ckpt: Checkpoint,
    train: &[GoalTransition],
    test: &[GoalTransition],
    reward_params: &RewardParams,
    reward: &mut RewardFn,
    ctl: &mut Control,
) -> Result<PhaseRun> {
    if cfg.ablations.no_gen {
        return Err(Error::Config("reinforced fine-tuning samples images; it cannot run with no_gen".into()));
    }
    let from: &[Phase] = if cfg.ablations.rl_only { &[Phase::Pretrain, Phase::Sft] } else { &[Phase::Sft] };
    let ck = enter(ckpt, cfg, Phase::Rsft, from)?;
    let opts = cfg.rsft_options();
    let mut eval = test_evaluator(cfg, test, reward_params);
    run_phase(ck, train, ctl, eval.as_mut().map(|f| f as &mut dyn FnMut(&ModelParams) -> Result<f64>), |p, b, rng| {
        rsft_loss(p, b, &opts, reward, rng).map(|(lb, _)| lb)
    })
}

fn test_evaluator<'a>(cfg: &TrainConfig, test: &'a [GoalTransition], reward: &'a RewardParams) -> Option<impl FnMut(&ModelParams) -> Result<f64> + 'a> {
    if test.is_empty() || cfg.ablations.no_gen || cfg.eval_prompts == 0 {
        return None;
    }
    let (n, seed) = (cfg.eval_prompts, cfg.seed);
    Some(move |p: &ModelParams| test_mean_reward(p, &test[..n.min(test.len())], reward, seed))
}

/// `r(x_t, render(sample), x_t+1)` for one generated next-state image.
pub fn score_sample(t: &GoalTransition, gen: &TokenImage, p: &RewardParams) -> Result<f64> {
    let state = detokenize(gen)?;
    dynamic_reward(&render(&t.before), &render(&state), &render(&t.after), p)
}

/// Reward function for [`rsft_phase`] backed by the dynamic-region reward.
pub fn dynamic_reward_fn(p: RewardParams) -> impl FnMut(&GoalTransition, &TokenImage) -> Result<f64> {
    move |t, g| score_sample(t, g, &p)
}

/// One sampled next-state image for a transition's expert action.
pub fn sample_subgoal<R: Rng>(params: &ModelParams, t: &GoalTransition, rng: &mut R) -> Result<TokenImage> {
    let cond = Condition::plan(&t.task, &t.before, Some(&t.action.tokens));
    Ok(match params.config.variant {
        Variant::OneStep => sample_images(&predict_image(params, &cond)?, 1, rng).remove(0).image,
        Variant::AR => ar_sample_image(params, &cond, DecodeMode::Sample, rng)?.image,
    })
}

/// Mean reward of one sampled image per transition. The sampling stream is
/// re-derived from `seed` on every call, so equal parameters give equal
/// values. Failed scores are skipped; returns NaN if all fail.
pub fn test_mean_reward(params: &ModelParams, test: &[GoalTransition], p: &RewardParams, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_EVAL));
    let (mut sum, mut n) = (0.0, 0usize);
    for t in test {
        let img = sample_subgoal(params, t, &mut rng)?;
        if let Ok(r) = score_sample(t, &img, p) {
            if r.is_finite() {
                sum += r;
                n += 1;
            }
        }
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Held-out teacher-forced accuracies of the two dynamics heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsAccuracy {
    /// Inverse dynamics: fraction of action tokens predicted by argmax.
    pub action_token_acc: f64,
    /// Forward dynamics: fraction of next-state image tokens predicted by argmax.
    pub image_token_acc: f64,
}

pub fn dynamics_accuracy(params: &ModelParams, data: &[GoalTransition]) -> Result<DynamicsAccuracy> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cfg = &params.config;
    let (mut th, mut tn, mut ih, mut inn) = (0usize, 0usize, 0usize, 0usize);
    for t in data {
        let act = &t.action.tokens;
        let seq = build_sequence(
            cfg,
            PromptKind::InverseDyn,
            SequenceInputs { before: Some(&t.before), after: Some(&t.after), action: Some(act), ..Default::default() },
        )?;
        let out = forward(params, &seq, TextReadout::Targets)?;
        for (r, &a) in act.iter().enumerate() {
            th += usize::from(argmax(&out.text_logits[r * cfg.vocab_size..(r + 1) * cfg.vocab_size]) == a as usize);
        }
        tn += act.len();

        let target = tokenize(&t.after);
        let prefix = (cfg.variant == Variant::AR).then(|| &target.tokens[..target.len() - 1]);
        let seq = build_sequence(
            cfg,
            PromptKind::ForwardDyn,
            SequenceInputs {
                before: Some(&t.before),
                after: Some(&t.after),
                action: Some(act),
                with_image: true,
                ar_prefix: prefix,
                ..Default::default()
            },
        )?;
        let out = forward(params, &seq, TextReadout::None)?;
        let logits = out.image_logits.ok_or_else(|| Error::ShapeMismatch("forward-dynamics sequence has no image rows".into()))?;
        let k = cfg.codebook_size;
        for (r, &x) in target.tokens.iter().enumerate() {
            ih += usize::from(argmax(&logits[r * k..(r + 1) * k]) == x as usize);
        }
        inn += target.len();
    }
    Ok(DynamicsAccuracy { action_token_acc: th as f64 / tn as f64, image_token_acc: ih as f64 / inn as f64 })
}
