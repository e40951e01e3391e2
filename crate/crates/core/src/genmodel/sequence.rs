//! Prompt templates and the slot layout fed to the model.
//!
//! Layouts (text words are single slots, `[img]` expands to the fused
//! understanding slots of one image, `[act]` is the action token sequence,
//! `[q]` the N image-query slots):
//!
//! * InverseDyn: `What is the action between <Img> [img x_t] </Img> and <Img> [img x_t+1] </Img> ? Please infer the actions that took place [act]`
//!   with every action token a text target.
//! * ForwardDyn: `What will happen if <Img> [img x_t] </Img> takes the action like [act] ? Please generate an image of the next state [q]`
//!   with the image of x_t+1 as target.
//! * Plan: `You are given the current image observation <Img> [img x_t] </Img> and the given task instruction : [g] . Please make the next step action decision and generate the next state image [act] [q]`
//!   with both action tokens and the next image as targets.
//!
//! In the autoregressive variant `[q]` is replaced by a start slot followed by
//! the already emitted image tokens.

use crate::error::{Error, Result};
use crate::gridworld::{SymbolicState, TaskSpec};
use crate::lang::{vocab, TokenId, IMAGE_HERE, IMG_CLOSE, IMG_OPEN};
use crate::vision::{semantic_encode_state, tokenize, FusionMode, TokenImage};

use super::params::{ModelConfig, Variant};

pub const INVERSE_PROMPT: &str = "What is the action between <Img> <ImageHere> </Img> and <Img> <ImageHere> </Img> ? Please infer the actions that took place";
pub const FORWARD_PROMPT: &str = "What will happen if <Img> <ImageHere> </Img> takes the action like <ActionHere> ? Please generate an image of the next state";
pub const PLAN_PROMPT: &str = "You are given the current image observation <Img> <ImageHere> </Img> and the given task instruction : <TaskHere> . Please make the next step action decision and generate the next state image";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    InverseDyn,
    ForwardDyn,
    Plan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Text(TokenId),
    Semantic { image: usize },
    Spatial { image: usize, cell: usize },
    Pooled { image: usize },
    Query(usize),
    ArStart,
    ArToken { cell: usize, token: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub tokens: TokenImage,
    /// Frozen semantic-tower output.
    pub semantic: Vec<f64>,
}

impl ImageInput {
    pub fn of_state(s: &SymbolicState) -> Self {
        ImageInput { tokens: tokenize(s), semantic: semantic_encode_state(s) }
    }
}

/// Raw inputs for [`build_sequence`]. Which fields are required depends on
/// the prompt kind.
#[derive(Debug, Clone, Copy, Default)]
pub struct SequenceInputs<'a> {
    pub task: Option<&'a TaskSpec>,
    pub before: Option<&'a SymbolicState>,
    pub after: Option<&'a SymbolicState>,
    /// Action tokens. For InverseDyn/Plan these are text targets and may be a
    /// prefix (during decoding); for ForwardDyn they are conditioning input.
    pub action: Option<&'a [TokenId]>,
    /// Append image-query slots (OneStep) or the image start slot (AR).
    pub with_image: bool,
    /// AR only: image tokens emitted so far, appended after the start slot.
    pub ar_prefix: Option<&'a [u32]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub kind: PromptKind,
    pub slots: Vec<Slot>,
    pub images: Vec<ImageInput>,
    /// (position, token): the logits at `position` are scored against `token`.
    pub text_targets: Vec<(usize, TokenId)>,
    /// Position whose logits predict the next text token.
    pub next_text_pos: usize,
    /// Positions whose final hidden states feed the image head, in cell order.
    pub image_rows: Vec<usize>,
    /// First image-query slot; queries attend to each other bidirectionally.
    pub query_start: Option<usize>,
    pub image_target: Option<TokenImage>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Text of all text slots, joined by spaces (image groups elided).
    pub fn text(&self) -> String {
        let ids: Vec<TokenId> = self
            .slots
            .iter()
            .filter_map(|s| match s {
                Slot::Text(t) => Some(*t),
                _ => None,
            })
            .collect();
        vocab().decode(&ids)
    }

    /// Whether position `t` may attend to position `s`.
    #[inline]
    pub fn attends(&self, t: usize, s: usize) -> bool {
        s <= t || self.query_start.is_some_and(|q| t >= q && s >= q)
    }
}

struct Assembler<'c> {
    cfg: &'c ModelConfig,
    seq: Sequence,
}

impl<'c> Assembler<'c> {
    fn word(&mut self, w: &str) {
        self.seq.slots.push(Slot::Text(vocab().expect(w)));
    }

    fn image(&mut self, s: &SymbolicState) {
        let image = self.seq.images.len();
        self.seq.images.push(ImageInput::of_state(s));
        match self.cfg.fusion {
            FusionMode::Full | FusionMode::NoSe => {
                if self.cfg.fusion == FusionMode::Full {
                    self.seq.slots.push(Slot::Semantic { image });
                }
                for cell in 0..self.cfg.image_queries {
                    self.seq.slots.push(Slot::Spatial { image, cell });
                }
            }
            FusionMode::NoEn => {
                self.seq.slots.push(Slot::Semantic { image });
                self.seq.slots.push(Slot::Pooled { image });
            }
        }
    }

    /// Expands a prompt template, substituting placeholders in order.
    fn template(&mut self, template: &str, images: &[&SymbolicState], mut fill: impl FnMut(&mut Self, &str)) {
        let mut next_image = 0;
        for w in template.split_whitespace() {
            if w == IMAGE_HERE {
                self.image(images[next_image]);
                next_image += 1;
            } else if w.starts_with('<') && w != IMG_OPEN && w != IMG_CLOSE {
                fill(self, w);
            } else {
                self.word(w);
            }
        }
    }

    fn target_action(&mut self, action: &[TokenId]) {
        for &t in action {
            let pos = self.seq.slots.len() - 1;
            self.seq.text_targets.push((pos, t));
            self.seq.slots.push(Slot::Text(t));
        }
    }

    fn image_tail(&mut self, inputs: &SequenceInputs) {
        match self.cfg.variant {
            Variant::OneStep => {
                let start = self.seq.slots.len();
                self.seq.query_start = Some(start);
                for i in 0..self.cfg.image_queries {
                    self.seq.slots.push(Slot::Query(i));
                }
                self.seq.image_rows = (start..start + self.cfg.image_queries).collect();
            }
            Variant::AR => {
                self.seq.image_rows.push(self.seq.slots.len());
                self.seq.slots.push(Slot::ArStart);
                for (cell, &token) in inputs.ar_prefix.unwrap_or(&[]).iter().enumerate() {
                    self.seq.image_rows.push(self.seq.slots.len());
                    self.seq.slots.push(Slot::ArToken { cell, token });
                }
            }
        }
    }
}

/// Lays out one prompt as model input slots.
pub fn build_sequence(cfg: &ModelConfig, kind: PromptKind, inputs: SequenceInputs) -> Result<Sequence> {
    let before = inputs.before.ok_or(Error::MissingField("before"))?;
    let mut a = Assembler {
        cfg,
        seq: Sequence {
            kind,
            slots: Vec::new(),
            images: Vec::new(),
            text_targets: Vec::new(),
            next_text_pos: 0,
            image_rows: Vec::new(),
            query_start: None,
            image_target: None,
        },
    };
    match kind {
        PromptKind::InverseDyn => {
            let after = inputs.after.ok_or(Error::MissingField("after"))?;
            a.template(INVERSE_PROMPT, &[before, after], |_, _| {});
            a.target_action(inputs.action.unwrap_or(&[]));
            a.seq.next_text_pos = a.seq.slots.len() - 1;
        }
        PromptKind::ForwardDyn => {
            let action = inputs.action.ok_or(Error::MissingField("action"))?;
            a.template(FORWARD_PROMPT, &[before], |asm, _| {
                asm.seq.slots.extend(action.iter().map(|&t| Slot::Text(t)));
            });
            a.seq.next_text_pos = a.seq.slots.len() - 1;
            if inputs.with_image {
                a.image_tail(&inputs);
            }
            a.seq.image_target = inputs.after.map(tokenize);
        }
        PromptKind::Plan => {
            let task = inputs.task.ok_or(Error::MissingField("task"))?;
            let instruction = task.instruction();
            a.template(PLAN_PROMPT, &[before], |asm, _| {
                for w in instruction.split_whitespace() {
                    asm.word(w);
                }
            });
            a.target_action(inputs.action.unwrap_or(&[]));
            a.seq.next_text_pos = a.seq.slots.len() - 1;
            if inputs.with_image {
                a.image_tail(&inputs);
            }
            a.seq.image_target = inputs.after.map(tokenize);
        }
    }
    let seq = a.seq;
    if seq.len() > cfg.max_seq_len {
        return Err(Error::LengthExceeded { len: seq.len(), max: cfg.max_seq_len });
    }
    Ok(seq)
}
