//! Run configuration: one TOML document, every leaf overridable from the
//! command line as `--section.key value` or `--section.key=value`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dynplan::dynreward::RewardParams;
use dynplan::genmodel::ModelConfig;
use dynplan::gridworld::Family;
use dynplan::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    #[default]
    Dynamic,
    Compress,
    Incompress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of transitions to generate.
    pub count: usize,
    pub families: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { count: 5000, families: Family::ALL.iter().map(|f| f.name().to_string()).collect() }
    }
}

impl DataConfig {
    pub fn families(&self) -> Result<Vec<Family>> {
        self.families.iter().map(|n| Family::from_name(n).ok_or_else(|| anyhow!("unknown task family {n:?}"))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory holding `train.jsonl` and `test.jsonl`.
    pub data: PathBuf,
    /// Checkpoint a training phase starts from.
    pub init: Option<PathBuf>,
    /// Steps between resumable checkpoints.
    pub checkpoint_every: usize,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data: PathBuf::from("data"), init: None, checkpoint_every: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 30, horizon: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds dataset generation and training; overrides `train.seed`.
    pub seed: u64,
    pub reward_kind: RewardKind,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reward: RewardParams,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let base = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let mut cfg: RunConfig = toml::from_str(&base).context("parsing config")?;
        if !overrides.is_empty() {
            let mut doc = toml::Value::try_from(&cfg)?;
            for (key, raw) in overrides {
                set_path(&mut doc, key, raw)?;
            }
            cfg = doc.try_into().context("applying command-line overrides")?;
        }
        cfg.train.seed = cfg.seed;
        cfg.train.validate()?;
        cfg.model.validate()?;
        cfg.reward.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Sets a dotted key that must already exist in `doc` (every field has a
/// default, so unknown keys are typos). Optional fields that are unset are
/// accepted at the last path component.
fn set_path(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, prefix) = parts.split_last().ok_or_else(|| anyhow!("empty override key"))?;
    let mut cur = doc;
    for p in prefix {
        cur = cur.get_mut(*p).ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
    }
    let table = cur.as_table_mut().ok_or_else(|| anyhow!("config key {key:?} is not inside a table"))?;
    let value = parse_value(raw, table.get(*last));
    if table.get(*last).is_none() && !OPTIONAL_KEYS.contains(&key) {
        bail!("unknown config key {key:?}");
    }
    table.insert((*last).to_string(), value);
    Ok(())
}

const OPTIONAL_KEYS: [&str; 1] = ["paths.init"];

/// Parses `raw` as a TOML literal, falling back to a bare string. Numbers
/// given for a float field are coerced to floats.
fn parse_value(raw: &str, current: Option<&toml::Value>) -> toml::Value {
    let parsed = format!("v = {raw}").parse::<toml::Table>().ok().and_then(|mut t| t.remove("v"));
    match (parsed, current) {
        (Some(toml::Value::Integer(i)), Some(toml::Value::Float(_))) => toml::Value::Float(i as f64),
        (Some(v), _) => v,
        (None, _) => toml::Value::String(raw.to_string()),
    }
}

/// Splits `--a.b value` / `--a.b=value` pairs out of argv; everything else
/// is left for the regular parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("override --{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}
