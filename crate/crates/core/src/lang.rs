//! Word-level text vocabulary shared by prompts, instructions and actions.
//!
//! Every piece of text the model reads or writes is a sequence of
//! whitespace-separated words drawn from a closed vocabulary. Coordinates are
//! single words of the form `(r,c)`, so an action is always nine tokens long
//! (eight words plus the end-of-action marker).

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::gridworld::{Color, GRID};

pub const PAD: &str = "<pad>";
pub const END_OF_ACTION: &str = "<eoa>";
pub const IMG_OPEN: &str = "<Img>";
pub const IMAGE_HERE: &str = "<ImageHere>";
pub const IMG_CLOSE: &str = "</Img>";
pub const ACTION_HERE: &str = "<ActionHere>";
pub const TASK_HERE: &str = "<TaskHere>";

pub const SPECIALS: [&str; 7] = [PAD, END_OF_ACTION, IMG_OPEN, IMAGE_HERE, IMG_CLOSE, ACTION_HERE, TASK_HERE];

/// Number of tokens in an encoded action, end marker included.
pub const ACTION_LEN: usize = 9;

const PROMPT_WORDS: &[&str] = &[
    "What", "is", "the", "action", "between", "and", "?", "Please", "infer", "actions", "that", "took",
    "place", "will", "happen", "if", "takes", "like", "generate", "an", "image", "of", "next", "state",
    "You", "are", "given", "current", "observation", "task", "instruction", ":", ".", "make", "step",
    "decision",
];

const INSTRUCTION_WORDS: &[&str] = &[
    "move", "all", "blocks", "to", "area", "left", "right", "top", "bottom", "stack", "in", "column",
    "put", "each", "block", "bowl", "same", "color", "at",
];

pub type TokenId = u32;

#[derive(Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn build() -> Self {
        let mut words: Vec<String> = Vec::new();
        let push = |w: String, words: &mut Vec<String>| {
            if !words.contains(&w) {
                words.push(w);
            }
        };
        for w in SPECIALS {
            push(w.to_string(), &mut words);
        }
        for w in PROMPT_WORDS.iter().chain(INSTRUCTION_WORDS) {
            push(w.to_string(), &mut words);
        }
        for c in Color::ALL {
            push(c.name().to_string(), &mut words);
        }
        for d in 0..GRID {
            push(d.to_string(), &mut words);
        }
        for r in 0..GRID {
            for c in 0..GRID {
                push(coord_word(r, c), &mut words);
            }
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    /// Id of a word that is known to be in the vocabulary.
    pub fn expect(&self, word: &str) -> TokenId {
        self.id(word).unwrap_or_else(|| panic!("word {word:?} missing from vocabulary"))
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Encodes whitespace-separated text. Returns `None` on any unknown word.
    pub fn encode(&self, text: &str) -> Option<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn end_of_action(&self) -> TokenId {
        self.expect(END_OF_ACTION)
    }
}

pub fn vocab() -> &'static Vocab {
    static VOCAB: OnceLock<Vocab> = OnceLock::new();
    VOCAB.get_or_init(Vocab::build)
}

pub fn coord_word(r: usize, c: usize) -> String {
    format!("({r},{c})")
}

pub fn parse_coord_word(word: &str) -> Option<(usize, usize)> {
    let inner = word.strip_prefix('(')?.strip_suffix(')')?;
    let (r, c) = inner.split_once(',')?;
    let (r, c) = (r.parse::<usize>().ok()?, c.parse::<usize>().ok()?);
    (r < GRID && c < GRID).then_some((r, c))
}
