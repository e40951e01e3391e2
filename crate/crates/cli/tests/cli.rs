use std::path::Path;
use std::process::{Command, Output};

use dynplan::gridworld::{render, sample_dataset, Family};

const TINY: [&str; 10] = [
    "--model.d_model", "16", "--model.d_ff", "32", "--model.n_heads", "2", "--model.n_layers", "1", "--train.batch_size", "2",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynplan"))
        .current_dir(dir)
        .env("DYNPLAN_RUNS", dir.join("runs"))
        .env_remove("RUST_BACKTRACE")
        .args(args)
        .output()
        .expect("spawn dynplan")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&TINY);
    v
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn gen_data_is_deterministic_and_split() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen-data", "--count", "400", "--seed", "5", "--out", "a"]);
    ok(d.path(), &["gen-data", "--count", "400", "--seed", "5", "--out", "b"]);
    for f in ["train.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(d.path().join("a").join(f)).unwrap(), std::fs::read(d.path().join("b").join(f)).unwrap());
    }
    let (tr, te) = (lines(&d.path().join("a/train.jsonl")), lines(&d.path().join("a/test.jsonl")));
    assert_eq!(tr + te, 400);
    let share = te as f64 / 400.0;
    assert!((0.05..0.15).contains(&share), "test share {share}");
}

#[test]
fn bad_flags_and_configs_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    assert!(!run(d.path(), &["gen-data", "--bogus"]).status.success());
    assert!(!run(d.path(), &["gen-data", "--train.nope", "1"]).status.success());
    assert!(!run(d.path(), &["gen-data", "--train.lr", "-1"]).status.success());
    assert!(!run(d.path(), &["sft", "--run", "x"]).status.success());
    std::fs::write(d.path().join("c.toml"), "[model]\nwidth = 3\n").unwrap();
    assert!(!run(d.path(), &["--config", "c.toml", "gen-data"]).status.success());
}

#[test]
fn score_of_a_perfect_prediction_is_one() {
    let d = tempfile::tempdir().unwrap();
    let ds = sample_dataset(2, 50, &Family::ALL).unwrap();
    let t = ds.train.iter().find(|t| t.before != t.after).unwrap();
    render(&t.before).save_ppm(d.path().join("a.ppm")).unwrap();
    render(&t.after).save_ppm(d.path().join("b.ppm")).unwrap();
    let out = ok(d.path(), &["score", "a.ppm", "b.ppm", "b.ppm"]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!((v["r"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{out}");
    let out = ok(d.path(), &["score", "a.ppm", "a.ppm", "a.ppm"]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["r"].as_f64().unwrap(), 0.0);
    assert!(!run(d.path(), &["score", "a.ppm", "b.ppm", "missing.ppm"]).status.success());
}

#[test]
fn pipeline_trains_evaluates_and_plots() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data", "--count", "300", "--seed", "1"]);
    ok(p, &with_tiny(&["pretrain", "--run", "pre", "--train.pretrain_steps", "3"]));
    ok(p, &with_tiny(&["sft", "--run", "sft", "--init", "runs/pre/pretrain.ckpt", "--train.sft_steps", "3", "--train.eval_prompts", "4"]));
    let common = ["--train.rsft_steps", "3", "--train.sft_steps", "3", "--train.k", "2", "--train.eval_prompts", "4"];
    let mut a = with_tiny(&["rsft", "--run", "r", "--init", "runs/sft/sft.ckpt"]);
    a.extend_from_slice(&common);
    ok(p, &a);

    assert!(!run(p, &["eval", "--ckpt", "runs/r/rsft.ckpt", "--episodes", "10"]).status.success());
    ok(p, &["eval", "--ckpt", "runs/r/rsft.ckpt", "--eval.horizon", "2"]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("runs/r/eval.json")).unwrap()).unwrap();
    assert_eq!(summary["episodes"], 30);
    assert_eq!(lines(&p.join("runs/r/episodes.csv")), 31);

    let out = ok(p, &["plot", "runs/r/metrics.csv", "runs/r/eval.json", "--out", "plots"]);
    assert!(out.lines().count() >= 3);
    for l in out.lines() {
        assert!(std::fs::read_to_string(p.join(l)).unwrap().starts_with("<svg"));
    }
    assert!(p.join("plots/sr.svg").exists() && p.join("plots/metrics_loss_total.svg").exists());
}

#[test]
fn rsft_with_zero_lambda_reproduces_sft() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data", "--count", "200", "--seed", "3"]);
    ok(p, &with_tiny(&["pretrain", "--run", "pre", "--train.pretrain_steps", "2"]));
    // A zero-step SFT phase hands the pretrained weights to RSFT unchanged.
    ok(p, &with_tiny(&["sft", "--run", "s0", "--init", "runs/pre/pretrain.ckpt", "--train.sft_steps", "0"]));
    let common = ["--train.sft_steps", "4", "--train.rsft_steps", "4", "--train.eval_prompts", "4", "--train.k", "2", "--train.eval_every", "2"];
    let mut a = with_tiny(&["sft", "--run", "s", "--init", "runs/pre/pretrain.ckpt"]);
    a.extend_from_slice(&common);
    ok(p, &a);
    let mut a = with_tiny(&["rsft", "--run", "r", "--init", "runs/s0/sft.ckpt", "--lambda", "0"]);
    a.extend_from_slice(&common);
    ok(p, &a);
    let read = |run: &str| -> Vec<Vec<String>> {
        let mut rd = csv::Reader::from_path(p.join("runs").join(run).join("metrics.csv")).unwrap();
        let h: Vec<String> = rd.headers().unwrap().iter().map(str::to_string).collect();
        rd.records()
            .map(|r| {
                let r = r.unwrap();
                ["step", "loss_total", "loss_sft_text", "loss_sft_image", "test_reward", "action_acc", "image_token_acc"]
                    .iter()
                    .map(|c| r[h.iter().position(|x| x == c).unwrap()].to_string())
                    .collect()
            })
            .collect()
    };
    let (s, r) = (read("s"), read("r"));
    assert_eq!(s.len(), 4);
    assert_eq!(s, r);
}

#[test]
fn interrupted_run_resumes_to_identical_outputs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data", "--count", "200", "--seed", "4"]);
    let base = with_tiny(&["pretrain", "--train.pretrain_steps", "6", "--paths.checkpoint_every", "2"]);
    let mut a = base.clone();
    a.extend_from_slice(&["--run", "full"]);
    ok(p, &a);
    let mut a = base.clone();
    a.extend_from_slice(&["--run", "cut", "--stop-after", "3"]);
    ok(p, &a);
    assert!(!p.join("runs/cut/pretrain.ckpt").exists());
    assert_eq!(lines(&p.join("runs/cut/metrics.csv")), 4);
    let mut a = base.clone();
    a.extend_from_slice(&["--run", "cut", "--resume"]);
    ok(p, &a);
    for f in ["metrics.csv", "pretrain.ckpt"] {
        assert_eq!(std::fs::read(p.join("runs/full").join(f)).unwrap(), std::fs::read(p.join("runs/cut").join(f)).unwrap(), "{f}");
    }
}
