use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_parsed, Action, Cell, Color, Pos, SymbolicState, CELLS, GRID, NUM_COLORS};
use crate::derive_seed;
use crate::error::{Error, Result};

const MAX_GENERATION_ATTEMPTS: usize = 1000;
const MAX_PLAN_LEN: usize = 4 * CELLS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    MoveToZone,
    StackByColor,
    MatchBowls,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::MoveToZone, Family::StackByColor, Family::MatchBowls];

    pub fn name(self) -> &'static str {
        match self {
            Family::MoveToZone => "MoveToZone",
            Family::StackByColor => "StackByColor",
            Family::MatchBowls => "MatchBowls",
        }
    }

    pub fn from_name(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Zone {
    Left,
    Right,
    Top,
    Bottom,
}

impl Zone {
    pub const ALL: [Zone; 4] = [Zone::Left, Zone::Right, Zone::Top, Zone::Bottom];

    pub fn name(self) -> &'static str {
        match self {
            Zone::Left => "left",
            Zone::Right => "right",
            Zone::Top => "top",
            Zone::Bottom => "bottom",
        }
    }

    pub fn contains(self, p: Pos) -> bool {
        let half = GRID / 2;
        match self {
            Zone::Left => p.col < half,
            Zone::Right => p.col >= half,
            Zone::Top => p.row < half,
            Zone::Bottom => p.row >= half,
        }
    }
}

/// A high-level goal. The instruction text is a pure function of the variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskSpec {
    /// Every block must end up inside the zone.
    MoveToZone { zone: Zone },
    /// All blocks of `color` form a contiguous stack in `column`, starting at row 0.
    StackByColor { color: Color, column: usize },
    /// Every block sits in a bowl of its own color.
    MatchBowls,
}

impl TaskSpec {
    pub fn family(&self) -> Family {
        match self {
            TaskSpec::MoveToZone { .. } => Family::MoveToZone,
            TaskSpec::StackByColor { .. } => Family::StackByColor,
            TaskSpec::MatchBowls => Family::MatchBowls,
        }
    }

    pub fn instruction(&self) -> String {
        match self {
            TaskSpec::MoveToZone { zone } => format!("move all the blocks to the {} area", zone.name()),
            TaskSpec::StackByColor { color, column } => {
                format!("stack all the {} blocks in column {column}", color.name())
            }
            TaskSpec::MatchBowls => "put each block in the bowl of the same color".to_string(),
        }
    }

    pub fn from_instruction(text: &str) -> Result<TaskSpec> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let bad = || Error::Format(format!("unrecognised instruction {text:?}"));
        let task = match words.as_slice() {
            ["move", "all", "the", "blocks", "to", "the", zone, "area"] => TaskSpec::MoveToZone {
                zone: Zone::ALL.into_iter().find(|z| z.name() == *zone).ok_or_else(bad)?,
            },
            ["stack", "all", "the", color, "blocks", "in", "column", col] => {
                let column = col.parse::<usize>().map_err(|_| bad())?;
                if column >= GRID {
                    return Err(bad());
                }
                TaskSpec::StackByColor { color: Color::from_name(color).ok_or_else(bad)?, column }
            }
            ["put", "each", "block", "in", "the", "bowl", "of", "the", "same", "color"] => TaskSpec::MatchBowls,
            _ => return Err(bad()),
        };
        Ok(task)
    }
}

/// Samples a solvable, not-yet-solved task of the given family.
pub fn new_task(seed: u64, family: Family) -> Result<(TaskSpec, SymbolicState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, family as u64 + 1));
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let (task, state) = match family {
            Family::MoveToZone => gen_move_to_zone(&mut rng),
            Family::StackByColor => gen_stack(&mut rng),
            Family::MatchBowls => gen_match_bowls(&mut rng),
        };
        if !check_success(&task, &state) && oracle_plan(&task, &state).is_ok() {
            return Ok((task, state));
        }
    }
    Err(Error::GenerationFailed(MAX_GENERATION_ATTEMPTS))
}

fn random_cells(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pos> {
    let mut all: Vec<usize> = (0..CELLS).collect();
    all.shuffle(rng);
    all.into_iter().take(n).map(Pos::from_index).collect()
}

fn random_color(rng: &mut ChaCha8Rng) -> Color {
    Color::ALL[rng.gen_range(0..NUM_COLORS)]
}

fn gen_move_to_zone(rng: &mut ChaCha8Rng) -> (TaskSpec, SymbolicState) {
    let zone = Zone::ALL[rng.gen_range(0..Zone::ALL.len())];
    let n = rng.gen_range(2..=6);
    let mut s = SymbolicState::empty();
    for p in random_cells(rng, n) {
        s.set(p, Cell::Block(random_color(rng)));
    }
    (TaskSpec::MoveToZone { zone }, s)
}

fn gen_stack(rng: &mut ChaCha8Rng) -> (TaskSpec, SymbolicState) {
    let color = random_color(rng);
    let column = rng.gen_range(0..GRID);
    let stacked = rng.gen_range(2..=3);
    let others = rng.gen_range(0..=(6 - stacked));
    let mut s = SymbolicState::empty();
    let cells = random_cells(rng, stacked + others);
    for (i, p) in cells.into_iter().enumerate() {
        let cell = if i < stacked {
            Cell::Block(color)
        } else {
            let mut other = random_color(rng);
            while other == color {
                other = random_color(rng);
            }
            Cell::Block(other)
        };
        s.set(p, cell);
    }
    (TaskSpec::StackByColor { color, column }, s)
}

fn gen_match_bowls(rng: &mut ChaCha8Rng) -> (TaskSpec, SymbolicState) {
    let pairs = rng.gen_range(1..=3);
    let mut s = SymbolicState::empty();
    let cells = random_cells(rng, 2 * pairs);
    for k in 0..pairs {
        let color = random_color(rng);
        s.set(cells[2 * k], Cell::Block(color));
        s.set(cells[2 * k + 1], Cell::Bowl(color));
    }
    (TaskSpec::MatchBowls, s)
}

pub fn check_success(task: &TaskSpec, s: &SymbolicState) -> bool {
    match *task {
        TaskSpec::MoveToZone { zone } => s.blocks().all(|(p, _)| zone.contains(p)),
        TaskSpec::StackByColor { color, column } => {
            let n = s.block_counts()[color.index()];
            (0..n).all(|row| s.get(Pos::new(row, column)) == Cell::Block(color))
        }
        TaskSpec::MatchBowls => s.cells().iter().all(|c| match *c {
            Cell::Block(_) => false,
            Cell::BlockInBowl { block, bowl } => block == bowl,
            _ => true,
        }),
    }
}

/// The oracle's next step from `s`, or `None` when the goal already holds.
/// Misplaced objects are handled in row-major order.
pub fn next_oracle_action(task: &TaskSpec, s: &SymbolicState) -> Result<Option<Action>> {
    if check_success(task, s) {
        return Ok(None);
    }
    let action = match *task {
        TaskSpec::MoveToZone { zone } => {
            let (from, color) = s.blocks().find(|(p, _)| !zone.contains(*p)).ok_or(Error::Unsolvable)?;
            let to = (0..CELLS)
                .map(Pos::from_index)
                .find(|p| zone.contains(*p) && s.get(*p) == Cell::Empty)
                .ok_or(Error::Unsolvable)?;
            Action { color, from, to }
        }
        TaskSpec::StackByColor { color, column } => {
            let n = s.block_counts()[color.index()];
            let in_slot = |p: Pos| p.col == column && p.row < n;
            let (from, _) = s
                .blocks()
                .find(|(p, c)| *c == color && !(in_slot(*p) && s.get(*p) == Cell::Block(color)))
                .ok_or(Error::Unsolvable)?;
            let to = (0..n)
                .map(|row| Pos::new(row, column))
                .find(|p| s.get(*p) == Cell::Empty)
                .ok_or(Error::Unsolvable)?;
            Action { color, from, to }
        }
        TaskSpec::MatchBowls => {
            let (from, color) = s
                .blocks()
                .find(|(p, c)| s.get(*p) != Cell::BlockInBowl { block: *c, bowl: *c })
                .ok_or(Error::Unsolvable)?;
            let to = (0..CELLS)
                .map(Pos::from_index)
                .find(|p| s.get(*p) == Cell::Bowl(color))
                .ok_or(Error::Unsolvable)?;
            Action { color, from, to }
        }
    };
    Ok(Some(action))
}

/// Full expert plan; replaying it from `s` reaches the goal.
pub fn oracle_plan(task: &TaskSpec, s: &SymbolicState) -> Result<Vec<Action>> {
    let mut plan = Vec::new();
    let mut state = s.clone();
    while let Some(a) = next_oracle_action(task, &state)? {
        state = apply_parsed(&state, &a)?;
        plan.push(a);
        if plan.len() > MAX_PLAN_LEN {
            return Err(Error::Unsolvable);
        }
    }
    Ok(plan)
}
