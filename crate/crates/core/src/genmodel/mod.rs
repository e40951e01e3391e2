//! The unified generator: a small attention model with an autoregressive
//! text head and a one-step factorized image head, plus an autoregressive
//! image baseline.

pub mod checkpoint;
pub mod kernels;
mod params;
mod sequence;
mod transformer;

use rand::Rng;

pub use params::{init_params, LayerLayout, Layout, ModelConfig, ModelParams, Variant};
pub use sequence::{
    build_sequence, ImageInput, PromptKind, Sequence, SequenceInputs, Slot, FORWARD_PROMPT, INVERSE_PROMPT, PLAN_PROMPT,
};
pub use transformer::{backward, forward, forward_with_cache, Cache, ForwardOutput, TextReadout};

use crate::error::{Error, Result};
use crate::gridworld::{LanguageAction, SymbolicState, TaskSpec};
use crate::lang::{vocab, TokenId, ACTION_LEN};
use crate::vision::TokenImage;
use kernels::{argmax, log_softmax, softmax_in_place};

/// Per-position logits of the next-state image for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDistribution {
    /// `rows × k`, row-major.
    pub logits: Vec<f64>,
    pub rows: usize,
    pub k: usize,
}

impl ImageDistribution {
    pub fn new(logits: Vec<f64>, rows: usize, k: usize) -> Result<Self> {
        if logits.len() != rows * k || k == 0 {
            return Err(Error::ShapeMismatch(format!("{} logits for {rows}×{k}", logits.len())));
        }
        Ok(ImageDistribution { logits, rows, k })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.k..(i + 1) * self.k]
    }

    pub fn probs(&self, i: usize) -> Vec<f64> {
        let mut r = self.row(i).to_vec();
        softmax_in_place(&mut r);
        r
    }

    /// `Σ_rows log softmax(row)[tokens[row]]`.
    pub fn log_prob(&self, image: &TokenImage) -> Result<f64> {
        if image.len() != self.rows {
            return Err(Error::ShapeMismatch("image length differs from distribution rows".into()));
        }
        let mut lp = 0.0;
        for (i, &t) in image.tokens.iter().enumerate() {
            if t as usize >= self.k {
                return Err(Error::InvalidToken { id: t, size: self.k });
            }
            lp += log_softmax(self.row(i))[t as usize];
        }
        Ok(lp)
    }

    pub fn greedy(&self) -> TokenImage {
        TokenImage { tokens: (0..self.rows).map(|i| argmax(self.row(i)) as u32).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: TokenImage,
    pub log_prob: f64,
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver past the last bucket
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws `k` independent images, each position from its own categorical.
/// Touches no model, so costs no forward calls.
pub fn sample_images<R: Rng + ?Sized>(dist: &ImageDistribution, k: usize, rng: &mut R) -> Vec<ImageSample> {
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..dist.rows)
        .map(|i| {
            let ls = log_softmax(dist.row(i));
            let p = ls.iter().map(|v| v.exp()).collect();
            (p, ls)
        })
        .collect();
    (0..k)
        .map(|_| {
            let mut tokens = Vec::with_capacity(dist.rows);
            let mut lp = 0.0;
            for (p, ls) in &rows {
                let t = draw(p, rng);
                lp += ls[t];
                tokens.push(t as u32);
            }
            ImageSample { image: TokenImage { tokens }, log_prob: lp }
        })
        .collect()
}

/// Context for a planning step or a forward-dynamics query.
#[derive(Debug, Clone, Copy)]
pub struct Condition<'a> {
    pub kind: PromptKind,
    pub task: Option<&'a TaskSpec>,
    pub state: &'a SymbolicState,
    pub next_state: Option<&'a SymbolicState>,
    pub action: Option<&'a [TokenId]>,
}

impl<'a> Condition<'a> {
    pub fn plan(task: &'a TaskSpec, state: &'a SymbolicState, action: Option<&'a [TokenId]>) -> Self {
        Condition { kind: PromptKind::Plan, task: Some(task), state, next_state: None, action }
    }

    pub fn forward_dyn(state: &'a SymbolicState, action: &'a [TokenId]) -> Self {
        Condition { kind: PromptKind::ForwardDyn, task: None, state, next_state: None, action: Some(action) }
    }

    pub fn inverse_dyn(state: &'a SymbolicState, next_state: &'a SymbolicState) -> Self {
        Condition { kind: PromptKind::InverseDyn, task: None, state, next_state: Some(next_state), action: None }
    }

    fn sequence(&self, cfg: &ModelConfig, action: Option<&[TokenId]>, with_image: bool, ar_prefix: Option<&[u32]>) -> Result<Sequence> {
        build_sequence(
            cfg,
            self.kind,
            SequenceInputs {
                task: self.task,
                before: Some(self.state),
                after: self.next_state,
                action,
                with_image,
                ar_prefix,
            },
        )
    }
}

/// Image distribution for a context whose action is known. One forward call.
pub fn predict_image(params: &ModelParams, cond: &Condition) -> Result<ImageDistribution> {
    if params.config.variant != Variant::OneStep {
        return Err(Error::Config("one-step image prediction needs the OneStep variant".into()));
    }
    let seq = cond.sequence(&params.config, cond.action, true, None)?;
    let out = forward(params, &seq, TextReadout::None)?;
    let logits = out.image_logits.ok_or_else(|| Error::ShapeMismatch("sequence has no image rows".into()))?;
    ImageDistribution::new(logits, seq.image_rows.len(), params.config.codebook_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedAction {
    pub tokens: Vec<TokenId>,
    /// The length cap was hit before an end-of-action token.
    pub truncated: bool,
}

impl DecodedAction {
    pub fn to_language(&self) -> LanguageAction {
        LanguageAction::from_tokens(&self.tokens)
    }
}

/// Autoregressive action decoding over the text head, one forward call per
/// emitted token, stopping at the end-of-action token or after
/// [`ACTION_LEN`] tokens.
pub fn decode_action<R: Rng + ?Sized>(params: &ModelParams, cond: &Condition, mode: DecodeMode, rng: &mut R) -> Result<DecodedAction> {
    let eoa = vocab().end_of_action();
    let mut tokens: Vec<TokenId> = Vec::with_capacity(ACTION_LEN);
    while tokens.len() < ACTION_LEN {
        let seq = match cond.kind {
            PromptKind::ForwardDyn => return Err(Error::Config("forward-dynamics prompts carry no action target".into())),
            _ => cond.sequence(&params.config, Some(&tokens), false, None)?,
        };
        let out = forward(params, &seq, TextReadout::Next)?;
        let row = &out.text_logits;
        let t = match mode {
            DecodeMode::Greedy => argmax(row),
            DecodeMode::Sample => {
                let mut p = row.clone();
                softmax_in_place(&mut p);
                draw(&p, rng)
            }
        } as TokenId;
        tokens.push(t);
        if t == eoa {
            return Ok(DecodedAction { tokens, truncated: false });
        }
    }
    Ok(DecodedAction { tokens, truncated: true })
}

/// Autoregressive image baseline: one forward call per image token.
pub fn ar_sample_image<R: Rng + ?Sized>(params: &ModelParams, cond: &Condition, mode: DecodeMode, rng: &mut R) -> Result<ImageSample> {
    if params.config.variant != Variant::AR {
        return Err(Error::Config("autoregressive image sampling needs the AR variant".into()));
    }
    let n = params.config.image_queries;
    let mut tokens: Vec<u32> = Vec::with_capacity(n);
    let mut lp = 0.0;
    while tokens.len() < n {
        let seq = cond.sequence(&params.config, cond.action, true, Some(&tokens))?;
        let out = forward(params, &seq, TextReadout::None)?;
        let logits = out.image_logits.ok_or_else(|| Error::ShapeMismatch("sequence has no image rows".into()))?;
        let k = params.config.codebook_size;
        let row = &logits[tokens.len() * k..(tokens.len() + 1) * k];
        let ls = log_softmax(row);
        let t = match mode {
            DecodeMode::Greedy => argmax(row),
            DecodeMode::Sample => draw(&ls.iter().map(|v| v.exp()).collect::<Vec<_>>(), rng),
        };
        lp += ls[t];
        tokens.push(t as u32);
    }
    Ok(ImageSample { image: TokenImage { tokens }, log_prob: lp })
}

/// Teacher-forced image distribution under either variant: for AR the
/// prefix is the target image shifted by one, so row i scores token i given
/// tokens before it. One forward call.
pub fn image_distribution_for(params: &ModelParams, cond: &Condition, target: Option<&TokenImage>) -> Result<ImageDistribution> {
    match params.config.variant {
        Variant::OneStep => predict_image(params, cond),
        Variant::AR => {
            let target = target.ok_or(Error::MissingField("target image"))?;
            let n = target.len();
            let seq = cond.sequence(&params.config, cond.action, true, Some(&target.tokens[..n.saturating_sub(1)]))?;
            let out = forward(params, &seq, TextReadout::None)?;
            let logits = out.image_logits.ok_or_else(|| Error::ShapeMismatch("sequence has no image rows".into()))?;
            ImageDistribution::new(logits, seq.image_rows.len(), params.config.codebook_size)
        }
    }
}
