//! Symbolic blocks-and-bowls world on an 8x8 grid.
//!
//! The world is fully deterministic: a state is a grid of cell contents, an
//! action moves one block between two cells, and every task family has an
//! oracle planner that emits the expert demonstrations used for training.

mod dataset;
mod render;
mod task;

pub use dataset::{sample_dataset, Dataset, GoalTransition, Split, TransitionRecord};
pub use render::{color_rgb, decode_cell, render, BACKGROUND, CELL_PX, RASTER_PX};
pub use task::{check_success, new_task, next_oracle_action, oracle_plan, Family, TaskSpec, Zone};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::{self, vocab, TokenId, ACTION_LEN};

/// Grid side length.
pub const GRID: usize = 8;
pub const CELLS: usize = GRID * GRID;
pub const NUM_COLORS: usize = 6;
/// Number of distinct cell contents (and image codebook entries).
pub const NUM_CELL_CODES: usize = 1 + 2 * NUM_COLORS + NUM_COLORS * NUM_COLORS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; NUM_COLORS] =
        [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Color> {
        Color::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn from_name(name: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Cell {
    #[default]
    Empty,
    Block(Color),
    Bowl(Color),
    BlockInBowl { block: Color, bowl: Color },
}

impl Cell {
    /// Integer code: 0 = Empty, 1..=6 Block, 7..=12 Bowl, 13..=48 BlockInBowl
    /// (13 + 6·block + bowl).
    pub fn code(self) -> u8 {
        let n = NUM_COLORS as u8;
        match self {
            Cell::Empty => 0,
            Cell::Block(c) => 1 + c as u8,
            Cell::Bowl(c) => 1 + n + c as u8,
            Cell::BlockInBowl { block, bowl } => 1 + 2 * n + n * block as u8 + bowl as u8,
        }
    }

    pub fn from_code(code: u8) -> Option<Cell> {
        let n = NUM_COLORS;
        let code = code as usize;
        Some(match code {
            0 => Cell::Empty,
            c if c <= n => Cell::Block(Color::from_index(c - 1)?),
            c if c <= 2 * n => Cell::Bowl(Color::from_index(c - 1 - n)?),
            c if c < NUM_CELL_CODES => {
                let k = c - 1 - 2 * n;
                Cell::BlockInBowl { block: Color::from_index(k / n)?, bowl: Color::from_index(k % n)? }
            }
            _ => return None,
        })
    }

    pub fn block(self) -> Option<Color> {
        match self {
            Cell::Block(c) | Cell::BlockInBowl { block: c, .. } => Some(c),
            _ => None,
        }
    }

    pub fn bowl(self) -> Option<Color> {
        match self {
            Cell::Bowl(c) | Cell::BlockInBowl { bowl: c, .. } => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }

    pub fn index(self) -> usize {
        self.row * GRID + self.col
    }

    pub fn from_index(i: usize) -> Self {
        Pos { row: i / GRID, col: i % GRID }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymbolicState {
    cells: [Cell; CELLS],
}

impl Default for SymbolicState {
    fn default() -> Self {
        SymbolicState { cells: [Cell::Empty; CELLS] }
    }
}

impl SymbolicState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, p: Pos) -> Cell {
        self.cells[p.index()]
    }

    pub fn set(&mut self, p: Pos, cell: Cell) {
        self.cells[p.index()] = cell;
    }

    pub fn cells(&self) -> &[Cell; CELLS] {
        &self.cells
    }

    pub fn codes(&self) -> Vec<u8> {
        self.cells.iter().map(|c| c.code()).collect()
    }

    pub fn from_codes(codes: &[u8]) -> Result<Self> {
        if codes.len() != CELLS {
            return Err(Error::DimensionMismatch(format!("expected {CELLS} cell codes, got {}", codes.len())));
        }
        let mut s = SymbolicState::empty();
        for (i, &code) in codes.iter().enumerate() {
            s.cells[i] = Cell::from_code(code)
                .ok_or_else(|| Error::Format(format!("cell code {code} out of range")))?;
        }
        Ok(s)
    }

    /// Positions holding a block (alone or in a bowl), row-major.
    pub fn blocks(&self) -> impl Iterator<Item = (Pos, Color)> + '_ {
        self.cells.iter().enumerate().filter_map(|(i, c)| c.block().map(|b| (Pos::from_index(i), b)))
    }

    pub fn block_counts(&self) -> [usize; NUM_COLORS] {
        let mut counts = [0; NUM_COLORS];
        for (_, c) in self.blocks() {
            counts[c.index()] += 1;
        }
        counts
    }

    pub fn bowl_counts(&self) -> [usize; NUM_COLORS] {
        let mut counts = [0; NUM_COLORS];
        for c in self.cells.iter().filter_map(|c| c.bowl()) {
            counts[c.index()] += 1;
        }
        counts
    }

    pub fn object_count(&self) -> usize {
        self.cells.iter().filter(|c| **c != Cell::Empty).count()
    }
}

/// A parsed pick-and-place step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Action {
    pub color: Color,
    pub from: Pos,
    pub to: Pos,
}

impl Action {
    pub fn text(&self) -> String {
        format!(
            "move the {} block at {} to {}",
            self.color.name(),
            lang::coord_word(self.from.row, self.from.col),
            lang::coord_word(self.to.row, self.to.col)
        )
    }

    pub fn to_language(&self) -> LanguageAction {
        let text = self.text();
        let mut tokens = vocab().encode(&text).expect("action grammar is inside the vocabulary");
        tokens.push(vocab().end_of_action());
        LanguageAction { text, tokens }
    }

    pub fn parse(text: &str) -> Result<Action> {
        let bad = || Error::IllegalAction(format!("unparseable action {text:?}"));
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            ["move", "the", color, "block", "at", from, "to", to] => {
                let color = Color::from_name(color).ok_or_else(bad)?;
                let (fr, fc) = lang::parse_coord_word(from).ok_or_else(bad)?;
                let (tr, tc) = lang::parse_coord_word(to).ok_or_else(bad)?;
                Ok(Action { color, from: Pos::new(fr, fc), to: Pos::new(tr, tc) })
            }
            _ => Err(bad()),
        }
    }
}

/// Text form of an action and its token sequence (end marker included).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LanguageAction {
    pub text: String,
    pub tokens: Vec<TokenId>,
}

impl LanguageAction {
    /// Builds an action from generated tokens. Tokens after the first end
    /// marker are ignored; the text may not parse.
    pub fn from_tokens(tokens: &[TokenId]) -> LanguageAction {
        let eoa = vocab().end_of_action();
        let body: Vec<TokenId> = tokens.iter().copied().take_while(|&t| t != eoa).collect();
        let text = vocab().decode(&body);
        let mut tokens = body;
        tokens.push(eoa);
        LanguageAction { text, tokens }
    }

    pub fn parse(&self) -> Result<Action> {
        Action::parse(&self.text)
    }

    pub fn is_well_formed(&self) -> bool {
        self.tokens.len() == ACTION_LEN && self.parse().is_ok()
    }
}

/// Executes one action. The source cell must hold a block of the named color
/// and the target must be empty or an unoccupied bowl.
pub fn apply_action(s: &SymbolicState, a: &LanguageAction) -> Result<SymbolicState> {
    let action = a.parse()?;
    apply_parsed(s, &action)
}

pub fn apply_parsed(s: &SymbolicState, a: &Action) -> Result<SymbolicState> {
    if a.from == a.to {
        return Err(Error::IllegalAction("source and target coincide".into()));
    }
    let vacated = match s.get(a.from) {
        Cell::Block(c) if c == a.color => Cell::Empty,
        Cell::BlockInBowl { block, bowl } if block == a.color => Cell::Bowl(bowl),
        other => {
            return Err(Error::IllegalAction(format!(
                "no {} block at ({},{}): found {other:?}",
                a.color.name(),
                a.from.row,
                a.from.col
            )))
        }
    };
    let placed = match s.get(a.to) {
        Cell::Empty => Cell::Block(a.color),
        Cell::Bowl(bowl) => Cell::BlockInBowl { block: a.color, bowl },
        other => {
            return Err(Error::IllegalAction(format!(
                "target ({},{}) is occupied by {other:?}",
                a.to.row, a.to.col
            )))
        }
    };
    let mut next = s.clone();
    next.set(a.from, vacated);
    next.set(a.to, placed);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(color: Color, from: (usize, usize), to: (usize, usize)) -> LanguageAction {
        Action { color, from: Pos::new(from.0, from.1), to: Pos::new(to.0, to.1) }.to_language()
    }

    #[test]
    fn cell_codes_are_a_bijection() {
        let mut seen = [false; NUM_CELL_CODES];
        for code in 0..NUM_CELL_CODES as u8 {
            let cell = Cell::from_code(code).unwrap();
            assert_eq!(cell.code(), code);
            seen[code as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(Cell::from_code(NUM_CELL_CODES as u8), None);
    }

    #[test]
    fn move_block_to_empty_cell() {
        let mut s = SymbolicState::empty();
        s.set(Pos::new(1, 1), Cell::Block(Color::Red));
        let next = apply_action(&s, &mv(Color::Red, (1, 1), (1, 2))).unwrap();
        assert_eq!(next.get(Pos::new(1, 1)), Cell::Empty);
        assert_eq!(next.get(Pos::new(1, 2)), Cell::Block(Color::Red));
        assert_eq!(next.object_count(), 1);
    }

    #[test]
    fn move_onto_bowl_and_back_out() {
        let mut s = SymbolicState::empty();
        s.set(Pos::new(0, 0), Cell::Block(Color::Blue));
        s.set(Pos::new(5, 5), Cell::Bowl(Color::Blue));
        let next = apply_action(&s, &mv(Color::Blue, (0, 0), (5, 5))).unwrap();
        assert_eq!(next.get(Pos::new(5, 5)), Cell::BlockInBowl { block: Color::Blue, bowl: Color::Blue });
        let back = apply_action(&next, &mv(Color::Blue, (5, 5), (0, 0))).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn illegal_actions() {
        let mut s = SymbolicState::empty();
        s.set(Pos::new(0, 0), Cell::Block(Color::Red));
        s.set(Pos::new(0, 1), Cell::Block(Color::Green));
        let empty_source = apply_action(&s, &mv(Color::Red, (3, 3), (4, 4)));
        assert!(matches!(empty_source, Err(Error::IllegalAction(_))));
        let wrong_color = apply_action(&s, &mv(Color::Blue, (0, 0), (4, 4)));
        assert!(matches!(wrong_color, Err(Error::IllegalAction(_))));
        let occupied = apply_action(&s, &mv(Color::Red, (0, 0), (0, 1)));
        assert!(matches!(occupied, Err(Error::IllegalAction(_))));
        let garbage = LanguageAction { text: "move it".into(), tokens: vec![] };
        assert!(matches!(apply_action(&s, &garbage), Err(Error::IllegalAction(_))));
    }

    #[test]
    fn action_text_and_tokens_agree() {
        let a = mv(Color::Orange, (7, 0), (2, 6));
        assert_eq!(a.text, "move the orange block at (7,0) to (2,6)");
        assert_eq!(a.tokens.len(), ACTION_LEN);
        assert_eq!(LanguageAction::from_tokens(&a.tokens), a);
        assert!(a.is_well_formed());
    }
}
