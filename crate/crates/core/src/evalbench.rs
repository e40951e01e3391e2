//! Closed-loop planning evaluation, image metrics, reward curves on the
//! test set, and the one-step vs autoregressive sampling benchmark.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::dynreward::{dynamic_reward, RewardParams};
use crate::error::{Error, Result};
use crate::genmodel::{
    ar_sample_image, decode_action, predict_image, sample_images, Condition, DecodeMode, ModelParams, Variant,
};
use crate::gridworld::{apply_action, check_success, next_oracle_action, render, GoalTransition, LanguageAction, SymbolicState, TaskSpec};
use crate::lang::{vocab, TokenId};
use crate::raster::Raster;
use crate::trainer::test_mean_reward;
use crate::vision::{detokenize, tokenize, TokenImage};

pub const DEFAULT_HORIZON: usize = 12;
pub const MIN_EPISODES: usize = 30;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// What a planner proposes for one step: a language action and, optionally,
/// a subgoal image of the state it expects to reach.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub action: LanguageAction,
    pub subgoal: Option<TokenImage>,
}

pub trait Agent {
    fn propose(&mut self, task: &TaskSpec, state: &SymbolicState, rng: &mut dyn RngCore) -> Result<Proposal>;
}

/// Greedy action decoding followed by one sampled subgoal image conditioned
/// on the decoded action.
pub struct ModelAgent<'a> {
    pub params: &'a ModelParams,
}

impl Agent for ModelAgent<'_> {
    fn propose(&mut self, task: &TaskSpec, state: &SymbolicState, rng: &mut dyn RngCore) -> Result<Proposal> {
        let cond = Condition::plan(task, state, None);
        let decoded = decode_action(self.params, &cond, DecodeMode::Greedy, rng)?;
        let action = decoded.to_language();
        let cond = Condition::plan(task, state, Some(&action.tokens));
        let subgoal = match self.params.config.variant {
            Variant::OneStep => sample_images(&predict_image(self.params, &cond)?, 1, rng).remove(0).image,
            Variant::AR => ar_sample_image(self.params, &cond, DecodeMode::Sample, rng)?.image,
        };
        Ok(Proposal { action, subgoal: Some(subgoal) })
    }
}

/// Replays the oracle and predicts the exact next state.
pub struct OracleAgent;

impl Agent for OracleAgent {
    fn propose(&mut self, task: &TaskSpec, state: &SymbolicState, _: &mut dyn RngCore) -> Result<Proposal> {
        let a = next_oracle_action(task, state)?.ok_or(Error::Unsolvable)?;
        let next = crate::gridworld::apply_parsed(state, &a)?;
        Ok(Proposal { action: a.to_language(), subgoal: Some(tokenize(&next)) })
    }
}

/// Emits uniformly random vocabulary tokens up to the action length.
pub struct RandomAgent;

impl Agent for RandomAgent {
    fn propose(&mut self, _: &TaskSpec, _: &SymbolicState, rng: &mut dyn RngCore) -> Result<Proposal> {
        let v = vocab().len() as TokenId;
        let tokens: Vec<TokenId> = (0..crate::lang::ACTION_LEN).map(|_| rng.gen_range(0..v)).collect();
        Ok(Proposal { action: LanguageAction::from_tokens(&tokens), subgoal: None })
    }
}

/// Subgoal image vs the state actually reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub token_acc: f64,
    pub ssim: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub task: String,
    pub steps: usize,
    pub success: bool,
    pub action_matches: Vec<bool>,
    pub illegal: usize,
    pub images: Vec<Option<ImageMetrics>>,
}

impl EpisodeResult {
    /// Fraction of steps whose action equalled the oracle's; 1 for an
    /// episode that needed no steps.
    pub fn language_accuracy(&self) -> f64 {
        if self.action_matches.is_empty() {
            1.0
        } else {
            self.action_matches.iter().filter(|&&m| m).count() as f64 / self.action_matches.len() as f64
        }
    }

    fn image_mean(&self, f: impl Fn(&ImageMetrics) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.images.iter().flatten().map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn image_metrics(before: &SymbolicState, gen: &TokenImage, reached: &SymbolicState, p: &RewardParams) -> Result<ImageMetrics> {
    let truth = tokenize(reached);
    let gen_raster = render(&detokenize(gen)?);
    let real = render(reached);
    Ok(ImageMetrics {
        token_acc: gen.accuracy(&truth),
        ssim: ssim(&gen_raster, &real)?,
        reward: dynamic_reward(&render(before), &gen_raster, &real, p)?,
    })
}

/// Runs one episode: propose, execute symbolically (an illegal action leaves
/// the state unchanged), stop on success or after `horizon` steps. Planner
/// errors count as illegal steps.
pub fn rollout_episode(
    agent: &mut dyn Agent,
    episode: usize,
    task: &TaskSpec,
    start: &SymbolicState,
    horizon: usize,
    reward: &RewardParams,
    rng: &mut dyn RngCore,
) -> EpisodeResult {
    let mut state = start.clone();
    let mut out = EpisodeResult {
        episode,
        task: task.instruction(),
        steps: 0,
        success: check_success(task, &state),
        action_matches: Vec::new(),
        illegal: 0,
        images: Vec::new(),
    };
    while !out.success && out.steps < horizon {
        let oracle = next_oracle_action(task, &state).ok().flatten().map(|a| a.to_language());
        let proposal = agent.propose(task, &state, rng);
        out.steps += 1;
        let Ok(proposal) = proposal else {
            out.action_matches.push(false);
            out.illegal += 1;
            out.images.push(None);
            continue;
        };
        out.action_matches.push(oracle.as_ref().is_some_and(|o| o.tokens == proposal.action.tokens));
        let next = match apply_action(&state, &proposal.action) {
            Ok(s) => s,
            Err(_) => {
                out.illegal += 1;
                state.clone()
            }
        };
        out.images.push(proposal.subgoal.as_ref().and_then(|g| image_metrics(&state, g, &next, reward).ok()));
        state = next;
        out.success = check_success(task, &state);
    }
    out
}

/// Mean with a percentile-bootstrap 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

pub fn bootstrap(values: &[f64], resamples: usize, seed: u64) -> Option<Estimate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let resamples = resamples.max(1);
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * resamples as f64).floor() as usize).min(resamples - 1)];
    Some(Estimate { mean, lo: q(0.025), hi: q(0.975), n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: Estimate,
    pub language_accuracy: Estimate,
    pub image_token_acc: Option<Estimate>,
    pub ssim: Option<Estimate>,
    pub mean_dynamic_reward: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub episodes: Vec<EpisodeResult>,
}

/// Rolls out `n_episodes` from `starts` (cycling if there are fewer) with
/// per-episode RNG streams, then summarizes in episode order.
pub fn evaluate(
    agent: &mut dyn Agent,
    starts: &[(usize, TaskSpec, SymbolicState)],
    n_episodes: usize,
    horizon: usize,
    reward: &RewardParams,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes < MIN_EPISODES {
        return Err(Error::Config(format!("evaluation needs at least {MIN_EPISODES} episodes, got {n_episodes}")));
    }
    if starts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let episodes: Vec<EpisodeResult> = (0..n_episodes)
        .map(|i| {
            let (id, task, s) = &starts[i % starts.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            rollout_episode(agent, *id, task, s, horizon, reward, &mut rng)
        })
        .collect();
    Ok(EvalReport { summary: summarize(&episodes, seed), episodes })
}

pub fn summarize(episodes: &[EpisodeResult], seed: u64) -> EvalSummary {
    let est = |v: Vec<f64>, k: u64| bootstrap(&v, BOOTSTRAP_RESAMPLES, derive_seed(seed, 0xB0 + k));
    let per = |f: &dyn Fn(&EpisodeResult) -> Option<f64>| episodes.iter().filter_map(f).collect::<Vec<f64>>();
    let zero = Estimate { mean: 0.0, lo: 0.0, hi: 0.0, n: 0 };
    EvalSummary {
        episodes: episodes.len(),
        success_rate: est(per(&|e| Some(f64::from(u8::from(e.success)))), 0).unwrap_or(zero),
        language_accuracy: est(per(&|e| Some(e.language_accuracy())), 1).unwrap_or(zero),
        image_token_acc: est(per(&|e| e.image_mean(|m| m.token_acc)), 2),
        ssim: est(per(&|e| e.image_mean(|m| m.ssim)), 3),
        mean_dynamic_reward: est(per(&|e| e.image_mean(|m| m.reward)), 4),
    }
}

pub fn write_episodes_csv<W: Write>(episodes: &[EpisodeResult], w: W) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        episode: usize,
        task: &'a str,
        steps: usize,
        success: bool,
        language_accuracy: f64,
        illegal: usize,
        image_token_acc: Option<f64>,
        ssim: Option<f64>,
        dynamic_reward: Option<f64>,
    }
    let mut out = csv::Writer::from_writer(w);
    for e in episodes {
        out.serialize(Row {
            episode: e.episode,
            task: &e.task,
            steps: e.steps,
            success: e.success,
            language_accuracy: e.language_accuracy(),
            illegal: e.illegal,
            image_token_acc: e.image_mean(|m| m.token_acc),
            ssim: e.image_mean(|m| m.ssim),
            dynamic_reward: e.image_mean(|m| m.reward),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

/// Mean local structural similarity over 8×8 grayscale windows (stride 4)
/// on the 0–255 scale.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch(format!("{}×{} vs {}×{}", a.width, a.height, b.width, b.height)));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::DimensionMismatch(format!("rasters smaller than the {SSIM_WINDOW}px window")));
    }
    let ga: Vec<f64> = a.to_gray().iter().map(|v| v * 255.0).collect();
    let gb: Vec<f64> = b.to_gray().iter().map(|v| v * 255.0).collect();
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut sum, mut count) = (0.0, 0usize);
    for y0 in (0..=a.height - SSIM_WINDOW).step_by(SSIM_STRIDE) {
        for x0 in (0..=a.width - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    sa += ga[y * a.width + x];
                    sb += gb[y * a.width + x];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (da, db) = (ga[y * a.width + x] - ma, gb[y * a.width + x] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchVariant {
    OneStep,
    AR,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub variant: BenchVariant,
    pub k: usize,
    pub n: usize,
    pub trials: usize,
    pub forward_calls: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub one_step: BenchRecord,
    pub ar: BenchRecord,
    /// AR wall-clock over one-step wall-clock.
    pub ratio: f64,
}

impl BenchReport {
    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Method | Images per trial | Forward passes | Time per trial (s) |");
        let _ = writeln!(s, "|---|---|---|---|");
        for r in [&self.one_step, &self.ar] {
            let name = match r.variant {
                BenchVariant::OneStep => "One-step (parallel queries)",
                BenchVariant::AR => "Autoregressive",
            };
            let _ = writeln!(s, "| {name} | {} | {} | {:.6} |", r.k, r.forward_calls, r.wall_seconds / r.trials as f64);
        }
        let _ = writeln!(s, "\nAR / one-step wall-clock ratio: {:.1}× (N = {} image tokens).", self.ratio, self.ar.n);
        let _ = writeln!(s, "No diffusion row: this artifact contains no diffusion model.");
        s
    }
}

fn expect_calls(expected: u64, observed: u64) -> Result<()> {
    if expected == observed {
        Ok(())
    } else {
        Err(Error::CounterMismatch { expected, observed })
    }
}

/// Draws K next-state images per trial from both variants for the same
/// context, asserting exact forward-call counts (1 vs K·N per trial).
pub fn bench_sampling(one_step: &ModelParams, ar: &ModelParams, t: &GoalTransition, k: usize, trials: usize, seed: u64) -> Result<BenchReport> {
    if one_step.config.variant != Variant::OneStep || ar.config.variant != Variant::AR {
        return Err(Error::Config("bench needs a one-step and an autoregressive model".into()));
    }
    let dims = |p: &ModelParams| {
        let c = &p.config;
        (c.d_model, c.n_layers, c.n_heads, c.d_ff, c.vocab_size, c.image_queries, c.codebook_size)
    };
    if dims(one_step) != dims(ar) {
        return Err(Error::Config("bench models differ in dimensions".into()));
    }
    if k == 0 || trials == 0 {
        return Err(Error::Config("bench needs K ≥ 1 and trials ≥ 1".into()));
    }
    let cond = Condition::plan(&t.task, &t.before, Some(&t.action.tokens));
    let n = one_step.config.image_queries;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    one_step.reset_forward_calls();
    let clock = Instant::now();
    for _ in 0..trials {
        let dist = predict_image(one_step, &cond)?;
        let s = sample_images(&dist, k, &mut rng);
        debug_assert_eq!(s.len(), k);
    }
    let os_wall = clock.elapsed().as_secs_f64();
    let os_calls = one_step.forward_calls();
    expect_calls(trials as u64, os_calls)?;

    ar.reset_forward_calls();
    let clock = Instant::now();
    for _ in 0..trials {
        for _ in 0..k {
            ar_sample_image(ar, &cond, DecodeMode::Sample, &mut rng)?;
        }
    }
    let ar_wall = clock.elapsed().as_secs_f64();
    let ar_calls = ar.forward_calls();
    expect_calls((trials * k * n) as u64, ar_calls)?;

    let rec = |variant, forward_calls, wall_seconds| BenchRecord { variant, k, n, trials, forward_calls, wall_seconds };
    Ok(BenchReport {
        one_step: rec(BenchVariant::OneStep, os_calls, os_wall),
        ar: rec(BenchVariant::AR, ar_calls, ar_wall),
        ratio: ar_wall / os_wall.max(f64::MIN_POSITIVE),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_reward: f64,
}

/// Test-set mean reward of each `(step, params)` snapshot.
pub fn reward_curve(snapshots: &[(usize, &ModelParams)], test: &[GoalTransition], p: &RewardParams, seed: u64) -> Result<Vec<CurvePoint>> {
    snapshots.iter().map(|(step, m)| Ok(CurvePoint { step: *step, mean_reward: test_mean_reward(m, test, p, seed)? })).collect()
}

/// Two curves joined on step; steps present in only one are dropped.
pub fn pair_curves(a: &[CurvePoint], b: &[CurvePoint]) -> Vec<(usize, f64, f64)> {
    a.iter().filter_map(|x| b.iter().find(|y| y.step == x.step).map(|y| (x.step, x.mean_reward, y.mean_reward))).collect()
}

pub fn write_curve_csv<W: Write>(pairs: &[(usize, f64, f64)], names: (&str, &str), w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", names.0, names.1]).map_err(|e| Error::Format(e.to_string()))?;
    for (s, a, b) in pairs {
        out.write_record([s.to_string(), a.to_string(), b.to_string()]).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}
