use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_parsed, new_task, oracle_plan, Family, LanguageAction, SymbolicState, TaskSpec};
use crate::derive_seed;
use crate::error::{Error, Result};

/// Fraction of episodes held out for testing.
pub const TEST_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One expert step `{g, x_t, a_t, x_t+1}` tagged with its episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoalTransition {
    pub episode: usize,
    pub step: usize,
    pub task: TaskSpec,
    pub before: SymbolicState,
    pub action: LanguageAction,
    pub after: SymbolicState,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<GoalTransition>,
    pub test: Vec<GoalTransition>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First transition of every episode in `split`, i.e. the starting
    /// `(task, state)` pairs used for closed-loop evaluation.
    pub fn episode_starts(&self, split: Split) -> Vec<(usize, TaskSpec, SymbolicState)> {
        let set = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        set.iter().filter(|t| t.step == 0).map(|t| (t.episode, t.task, t.before.clone())).collect()
    }

    pub fn write_jsonl<W: Write>(&self, split: Split, mut w: W) -> Result<()> {
        let set = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        for t in set {
            serde_json::to_writer(&mut w, &TransitionRecord::from_transition(t, split))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads records into the split each one is tagged with.
    pub fn read_jsonl<R: BufRead>(r: R, into: &mut Dataset) -> Result<()> {
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TransitionRecord = serde_json::from_str(&line)?;
            let split = rec.split;
            let t = rec.into_transition()?;
            match split {
                Split::Train => into.train.push(t),
                Split::Test => into.test.push(t),
            }
        }
        Ok(())
    }
}

/// JSON-lines form of a transition. States are 64 cell codes, row-major
/// (0 empty, 1-6 block, 7-12 bowl, 13-48 block in bowl; colors ordered
/// red, green, blue, yellow, purple, orange).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub episode: usize,
    pub step: usize,
    pub family: String,
    pub instruction: String,
    pub state_before: Vec<u8>,
    pub action: String,
    pub state_after: Vec<u8>,
    pub split: Split,
}

impl TransitionRecord {
    pub fn from_transition(t: &GoalTransition, split: Split) -> Self {
        TransitionRecord {
            episode: t.episode,
            step: t.step,
            family: t.task.family().name().to_string(),
            instruction: t.task.instruction(),
            state_before: t.before.codes(),
            action: t.action.text.clone(),
            state_after: t.after.codes(),
            split,
        }
    }

    pub fn into_transition(self) -> Result<GoalTransition> {
        let task = TaskSpec::from_instruction(&self.instruction)?;
        if task.family().name() != self.family {
            return Err(Error::Format(format!("family {} does not match instruction", self.family)));
        }
        let action = super::Action::parse(&self.action)?.to_language();
        Ok(GoalTransition {
            episode: self.episode,
            step: self.step,
            task,
            before: SymbolicState::from_codes(&self.state_before)?,
            action,
            after: SymbolicState::from_codes(&self.state_after)?,
        })
    }
}

/// Rolls out oracle plans until exactly `count` transitions exist. Families
/// are used round-robin; the last episode may be cut short. Episodes are
/// assigned to splits by a seeded shuffle, 90% train and 10% test.
pub fn sample_dataset(seed: u64, count: usize, families: &[Family]) -> Result<Dataset> {
    if count == 0 || families.is_empty() {
        return Err(Error::Config("dataset needs count > 0 and at least one family".into()));
    }
    let mut episodes: Vec<Vec<GoalTransition>> = Vec::new();
    let mut total = 0;
    while total < count {
        let episode = episodes.len();
        let family = families[episode % families.len()];
        let (task, start) = new_task(derive_seed(seed, episode as u64), family)?;
        let plan = oracle_plan(&task, &start)?;
        let mut state = start;
        let mut steps = Vec::new();
        for (step, a) in plan.iter().enumerate() {
            if total == count {
                break;
            }
            let after = apply_parsed(&state, a)?;
            steps.push(GoalTransition {
                episode,
                step,
                task,
                before: state.clone(),
                action: a.to_language(),
                after: after.clone(),
            });
            state = after;
            total += 1;
        }
        episodes.push(steps);
    }

    let n = episodes.len();
    let n_test = ((n as f64) * TEST_FRACTION).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)));
    let mut is_test = vec![false; n];
    for &e in &order[..n_test] {
        is_test[e] = true;
    }
    let mut ds = Dataset::default();
    for (e, steps) in episodes.into_iter().enumerate() {
        if is_test[e] {
            ds.test.extend(steps);
        } else {
            ds.train.extend(steps);
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::apply_action;
    use std::collections::HashSet;

    #[test]
    fn replay_soundness_and_determinism() {
        let ds = sample_dataset(3, 100, &Family::ALL).unwrap();
        assert_eq!(ds.len(), 100);
        for t in ds.train.iter().chain(&ds.test) {
            assert_eq!(apply_action(&t.before, &t.action).unwrap(), t.after);
        }
        assert_eq!(ds, sample_dataset(3, 100, &Family::ALL).unwrap());
    }

    #[test]
    fn splits_partition_episodes() {
        let ds = sample_dataset(11, 400, &Family::ALL).unwrap();
        let train: HashSet<_> = ds.train.iter().map(|t| t.episode).collect();
        let test: HashSet<_> = ds.test.iter().map(|t| t.episode).collect();
        assert!(train.is_disjoint(&test));
        let n = train.len() + test.len();
        assert_eq!(test.len(), ((n as f64) * 0.1).round() as usize);
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = sample_dataset(5, 60, &Family::ALL).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(Split::Train, &mut buf).unwrap();
        ds.write_jsonl(Split::Test, &mut buf).unwrap();
        let mut back = Dataset::default();
        Dataset::read_jsonl(&buf[..], &mut back).unwrap();
        assert_eq!(back, ds);
        let first: serde_json::Value = serde_json::from_slice(buf.split(|b| *b == b'\n').next().unwrap()).unwrap();
        assert_eq!(first["state_before"].as_array().unwrap().len(), 64);
    }
}
