mod config;
mod plot;

use std::cell::RefCell;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dynplan::dynreward::{compressibility_reward, dynamic_reward_report, CompressSign};
use dynplan::evalbench::{bench_sampling, evaluate, write_episodes_csv, EvalSummary, ModelAgent, MIN_EPISODES};
use dynplan::genmodel::checkpoint::load_params;
use dynplan::genmodel::{init_params, ModelConfig, ModelParams, Variant};
use dynplan::gridworld::{render, sample_dataset, Dataset, GoalTransition, Split};
use dynplan::raster::Raster;
use dynplan::trainer::{
    dynamic_reward_fn, pretrain, read_metrics_csv, rsft_phase, save_checkpoint, sft_phase, write_metrics_csv, Checkpoint,
    Control, MetricsRow, Phase, PhaseRun,
};
use dynplan::vision::{detokenize, TokenImage};

use config::{extract_overrides, RewardKind, RunConfig};

/// Environment variable naming the directory that holds run directories.
const RUNS_ENV: &str = "DYNPLAN_RUNS";

#[derive(Parser, Debug)]
#[command(name = "dynplan", version, about = "Grid-world vision-language planner: data, training, evaluation, benchmarks")]
#[command(after_help = "Any config field can be overridden with --section.key VALUE, e.g. --train.lr 0.002 --model.d_model 32.")]
struct Cli {
    /// TOML run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, training and evaluation (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// Run directory name under $DYNPLAN_RUNS (default `runs`).
    #[arg(long)]
    run: String,
    /// Checkpoint to start from (overrides paths.init).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps of the phase (a resumable interruption).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate expert transitions as train/test JSONL.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Joint inverse + forward dynamics pretraining.
    Pretrain(TrainArgs),
    /// Supervised planning fine-tuning.
    Sft(TrainArgs),
    /// Reinforced supervised fine-tuning.
    Rsft {
        #[command(flatten)]
        args: TrainArgs,
        /// Weight of the policy-gradient term.
        #[arg(long)]
        lambda: Option<f64>,
        /// Drop the supervised term (policy gradient only).
        #[arg(long)]
        rl_only: bool,
    },
    /// Closed-loop evaluation on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Output directory for eval.json and episodes.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-step vs autoregressive image sampling cost.
    Bench {
        #[arg(long)]
        onestep: Option<PathBuf>,
        #[arg(long)]
        ar: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Write the markdown report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reward of a generated next state: `score X_T X_GEN X_REAL` (PPM files).
    Score { x_t: PathBuf, x_gen: PathBuf, x_real: PathBuf },
    /// Render metrics CSVs, reward curves, or eval summaries to SVG.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let (argv, overrides) = extract_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(argv);
    let mut overrides = overrides;
    push_opt(&mut overrides, "seed", cli.seed);
    match cli.cmd {
        Cmd::GenData { count, out } => {
            push_opt(&mut overrides, "data.count", count);
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            gen_data(&cfg, &out)
        }
        Cmd::Pretrain(a) => train_cmd(Phase::Pretrain, cli.config.as_deref(), overrides, a),
        Cmd::Sft(a) => train_cmd(Phase::Sft, cli.config.as_deref(), overrides, a),
        Cmd::Rsft { args, lambda, rl_only } => {
            push_opt(&mut overrides, "train.lambda", lambda);
            if rl_only {
                overrides.push(("train.ablations.rl_only".into(), "true".into()));
            }
            train_cmd(Phase::Rsft, cli.config.as_deref(), overrides, args)
        }
        Cmd::Eval { ckpt, episodes, out } => {
            push_opt(&mut overrides, "eval.episodes", episodes);
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            eval_cmd(&cfg, &ckpt, out)
        }
        Cmd::Bench { onestep, ar, k, trials, out } => {
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            bench_cmd(&cfg, onestep, ar, k, trials, out)
        }
        Cmd::Score { x_t, x_gen, x_real } => {
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            score_cmd(&cfg, &x_t, &x_gen, &x_real)
        }
        Cmd::Plot { inputs, out } => plot_cmd(&inputs, &out),
    }
}

fn push_opt<T: ToString>(ov: &mut Vec<(String, String)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        ov.push((key.to_string(), v.to_string()));
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = sample_dataset(cfg.seed, cfg.data.count, &cfg.data.families()?)?;
    fs::create_dir_all(out)?;
    for (split, name) in [(Split::Train, "train.jsonl"), (Split::Test, "test.jsonl")] {
        let mut w = BufWriter::new(File::create(out.join(name))?);
        ds.write_jsonl(split, &mut w)?;
        w.flush()?;
    }
    let episodes = |s| ds.episode_starts(s).len();
    println!(
        "train: {} transitions ({} episodes); test: {} transitions ({} episodes) -> {}",
        ds.train.len(),
        episodes(Split::Train),
        ds.test.len(),
        episodes(Split::Test),
        out.display()
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for name in ["train.jsonl", "test.jsonl"] {
        let p = dir.join(name);
        let f = File::open(&p).with_context(|| format!("opening {} (run gen-data first?)", p.display()))?;
        Dataset::read_jsonl(BufReader::new(f), &mut ds)?;
    }
    if ds.train.is_empty() {
        bail!("dataset at {} has no training transitions", dir.display());
    }
    Ok(ds)
}

fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    write_metrics_csv(rows, BufWriter::new(File::create(&tmp)?))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    save_checkpoint(ck, &tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn train_cmd(phase: Phase, config: Option<&Path>, mut overrides: Vec<(String, String)>, a: TrainArgs) -> Result<()> {
    if let Some(p) = &a.init {
        overrides.push(("paths.init".into(), format!("{:?}", p.display().to_string())));
    }
    let cfg = RunConfig::load(config, &overrides)?;
    let ds = load_dataset(&cfg.paths.data)?;
    let dir = runs_root().join(&a.run);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let metrics_path = dir.join("metrics.csv");
    let last = dir.join("last.ckpt");

    let (start, mut rows) = if a.resume {
        let ck = dynplan::trainer::load_checkpoint(&last).with_context(|| format!("loading {}", last.display()))?;
        if ck.phase != phase {
            bail!("{} holds a {} checkpoint, not {}", last.display(), ck.phase.name(), phase.name());
        }
        let rows: Vec<MetricsRow> = read_metrics_csv(File::open(&metrics_path)?)?.into_iter().filter(|r| r.step <= ck.step).collect();
        (Some(ck), rows)
    } else {
        let init = match &cfg.paths.init {
            Some(p) => Some(load_any_checkpoint(p, &cfg)?),
            None if phase == Phase::Pretrain => None,
            None => bail!("{} needs --init CHECKPOINT", phase.name()),
        };
        (init, Vec::new())
    };

    let done = RefCell::new(std::mem::take(&mut rows));
    let mut on_row = |r: &MetricsRow| {
        if r.step % 50 == 0 {
            eprintln!(
                "{} step {}: loss {:.4}{}",
                r.phase.name(),
                r.step,
                r.loss_total,
                r.test_reward.map(|v| format!(", test reward {v:.4}")).unwrap_or_default()
            );
        }
        done.borrow_mut().push(r.clone());
    };
    let mut on_ck = |c: &Checkpoint| -> dynplan::Result<()> {
        save_atomic(c, &last).map_err(|e| dynplan::Error::Format(e.to_string()))?;
        write_metrics(&metrics_path, &done.borrow()).map_err(|e| dynplan::Error::Format(e.to_string()))
    };
    let mut ctl = Control {
        stop_after: a.stop_after,
        checkpoint_every: Some(cfg.paths.checkpoint_every.max(1)),
        on_checkpoint: Some(&mut on_ck),
        on_row: Some(&mut on_row),
    };
    let t = &cfg.train;
    let run: PhaseRun = match phase {
        Phase::Pretrain => pretrain(t, &cfg.model, &ds.train, start, &mut ctl)?,
        Phase::Sft => sft_phase(t, start.expect("checked above"), &ds.train, &ds.test, &cfg.reward, &mut ctl)?,
        Phase::Rsft => {
            let start = start.expect("checked above");
            match cfg.reward_kind {
                RewardKind::Dynamic => {
                    let mut f = dynamic_reward_fn(cfg.reward);
                    rsft_phase(t, start, &ds.train, &ds.test, &cfg.reward, &mut f, &mut ctl)?
                }
                kind => {
                    let sign = if kind == RewardKind::Compress { CompressSign::Compress } else { CompressSign::Incompress };
                    let mut f = |_: &GoalTransition, g: &TokenImage| Ok(compressibility_reward(&render(&detokenize(g)?), sign));
                    rsft_phase(t, start, &ds.train, &ds.test, &cfg.reward, &mut f, &mut ctl)?
                }
            }
        }
    };
    drop(ctl);
    let rows = done.into_inner();
    write_metrics(&metrics_path, &rows)?;
    save_atomic(&run.checkpoint, &last)?;
    if run.checkpoint.finished() {
        save_atomic(&run.checkpoint, &dir.join(format!("{}.ckpt", phase.name())))?;
    }
    let tail = rows.last();
    println!(
        "{}: {} of {} steps in {}; final loss {}",
        phase.name(),
        run.checkpoint.step,
        match phase {
            Phase::Pretrain => t.pretrain_steps,
            Phase::Sft => t.sft_steps,
            Phase::Rsft => t.rsft_steps,
        },
        dir.display(),
        tail.map(|r| format!("{:.5}", r.loss_total)).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

/// A training checkpoint, or a parameters-only file wrapped as a finished
/// pretraining checkpoint.
fn load_any_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(ck) = Checkpoint::from_bytes(&bytes) {
        return Ok(ck);
    }
    let (params, _) = load_params(path)?;
    let mut ck = dynplan::trainer::initial_checkpoint(&cfg.train, &params.config)?;
    ck.optimizer = dynplan::trainer::AdamW::new(params.len());
    ck.params = params;
    ck.step = cfg.train.pretrain_steps;
    Ok(ck)
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<ModelParams> {
    Ok(load_any_checkpoint(path, cfg)?.params)
}

fn eval_cmd(cfg: &RunConfig, ckpt: &Path, out: Option<PathBuf>) -> Result<()> {
    if cfg.eval.episodes < MIN_EPISODES {
        bail!("eval needs at least {MIN_EPISODES} episodes, got {}", cfg.eval.episodes);
    }
    let params = load_model(ckpt, cfg)?;
    let ds = load_dataset(&cfg.paths.data)?;
    let starts = ds.episode_starts(Split::Test);
    let rep = evaluate(&mut ModelAgent { params: &params }, &starts, cfg.eval.episodes, cfg.eval.horizon, &cfg.reward, cfg.seed)?;
    let out = out.unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out)?;
    let json = serde_json::to_string_pretty(&rep.summary)?;
    fs::write(out.join("eval.json"), format!("{json}\n"))?;
    write_episodes_csv(&rep.episodes, BufWriter::new(File::create(out.join("episodes.csv"))?))?;
    println!("{json}");
    Ok(())
}

fn bench_cmd(cfg: &RunConfig, onestep: Option<PathBuf>, ar: Option<PathBuf>, k: usize, trials: usize, out: Option<PathBuf>) -> Result<()> {
    let fresh = |variant| init_params(&ModelConfig { variant, ..cfg.model.clone() }, cfg.seed);
    let os = match onestep {
        Some(p) => load_model(&p, cfg)?,
        None => fresh(Variant::OneStep)?,
    };
    let arm = match ar {
        Some(p) => load_model(&p, cfg)?,
        None => fresh(Variant::AR)?,
    };
    let ds = sample_dataset(cfg.seed, 20, &cfg.data.families()?)?;
    let t = ds.train.first().context("no transition to condition on")?;
    let rep = bench_sampling(&os, &arm, t, k, trials, cfg.seed)?;
    let md = rep.markdown();
    print!("{md}");
    if let Some(p) = out {
        fs::write(p, &md)?;
    }
    Ok(())
}

fn score_cmd(cfg: &RunConfig, x_t: &Path, x_gen: &Path, x_real: &Path) -> Result<()> {
    let load = |p: &Path| Raster::load_ppm(p).with_context(|| format!("reading {}", p.display()));
    let rep = dynamic_reward_report(&load(x_t)?, &load(x_gen)?, &load(x_real)?, &cfg.reward)?;
    let json = serde_json::json!({
        "r": rep.reward,
        "label_regions": rep.label_boxes.len(),
        "gen_regions": rep.gen_boxes.len(),
        "matches": rep.matches.iter().map(|m| serde_json::json!({"iou": m.iou, "mse": m.mse})).collect::<Vec<_>>(),
    });
    println!("{json}");
    Ok(())
}

fn plot_cmd(inputs: &[PathBuf], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut bars: Vec<(String, EvalSummary)> = Vec::new();
    let mut written = Vec::new();
    for input in inputs {
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
        match input.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let s: EvalSummary = serde_json::from_str(&fs::read_to_string(input)?)
                    .with_context(|| format!("{} is not an eval summary", input.display()))?;
                let label = input.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()).unwrap_or(&stem).to_string();
                bars.push((label, s));
            }
            Some("csv") => written.extend(plot_csv(input, &stem, out)?),
            _ => bail!("cannot plot {}: expected .csv or .json", input.display()),
        }
    }
    if !bars.is_empty() {
        for (name, get) in [("sr", 0usize), ("la", 1)] {
            let b: Vec<_> = bars
                .iter()
                .map(|(l, s)| {
                    let e = if get == 0 { s.success_rate } else { s.language_accuracy };
                    (l.clone(), e.mean, Some((e.lo, e.hi)))
                })
                .collect();
            let path = out.join(format!("{name}.svg"));
            fs::write(&path, plot::bar_chart(&name.to_uppercase(), &b))?;
            written.push(path);
        }
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

/// Metrics files get one chart per non-empty column; any other CSV with a
/// `step` column becomes one chart with every other column as a series.
fn plot_csv(input: &Path, stem: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let mut rd = csv_reader(input)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let records: Vec<Vec<String>> = rd.records().map(|r| r.map(|r| r.iter().map(str::to_string).collect())).collect::<std::result::Result<_, _>>()?;
    let step_col = header.iter().position(|h| h == "step").context("CSV has no step column")?;
    let is_metrics = header.iter().any(|h| h == "loss_total");
    let x_of = |i: usize, r: &Vec<String>| if is_metrics { (i + 1) as f64 } else { r[step_col].parse().unwrap_or(i as f64) };
    let series = |col: usize| -> Vec<(f64, f64)> {
        records.iter().enumerate().filter_map(|(i, r)| r[col].parse::<f64>().ok().map(|y| (x_of(i, r), y))).collect()
    };
    let cols: Vec<usize> = (0..header.len()).filter(|&c| c != step_col && header[c] != "phase").collect();
    let mut written = Vec::new();
    if is_metrics {
        for c in cols {
            let s = series(c);
            if s.is_empty() {
                continue;
            }
            let path = out.join(format!("{stem}_{}.svg", header[c]));
            fs::write(&path, plot::line_chart(&header[c], &[(header[c].clone(), s)]))?;
            written.push(path);
        }
    } else {
        let all: Vec<(String, Vec<(f64, f64)>)> = cols.iter().map(|&c| (header[c].clone(), series(c))).collect();
        let path = out.join(format!("{stem}.svg"));
        fs::write(&path, plot::line_chart(stem, &all))?;
        written.push(path);
    }
    Ok(written)
}

fn csv_reader(p: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::Reader::from_reader(File::open(p).with_context(|| format!("opening {}", p.display()))?))
}
