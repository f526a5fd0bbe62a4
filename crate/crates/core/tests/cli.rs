use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "total_steps=80",
    "step_start_rl=40",
    "fi_epochs=3",
    "baseline_pretrain_updates=3",
    "eval_interval=40",
    "eval_episodes=1",
    "d_size=8",
    "z_size=2",
    "model_hidden=8",
    "feature_size=8",
    "rl_hidden=16,16",
    "lstm_size=8",
    "seq_len=8",
    "batch_size=2",
    "burn_in_max=4",
];

fn vrmsac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrmsac"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_small(out: &Path, extra: &[&str]) -> Output {
    let cfg = configs().join("pendulum_novel.cfg");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    vrmsac(&args)
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train_small(&out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,avg_return,sem,success_rate,elbo_fi,elbo_kl,j_v,j_q,j_pi,alpha"));
    assert_eq!(lines.count(), 2);
    let stored = fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(stored.contains("seed = 3"), "{stored}");

    let ck = out.join("resume.ckpt");
    let o = vrmsac(&["eval", "--checkpoint", ck.to_str().unwrap(), "--episodes", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains(" ± "), "{}", stdout(&o));

    let pred = dir.path().join("pred");
    let o = vrmsac(&[
        "predict",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--episodes",
        "2",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ratio"));
    for name in ["open_loop_0.csv", "closed_loop_1.csv"] {
        let text = fs::read_to_string(pred.join(name)).unwrap();
        assert!(text.starts_with("step,dim,truth,prediction_mean,prediction_var\n"));
        assert!(text.lines().count() > 1);
    }
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_small(&a, &[]).status.success());
    assert!(train_small(&b, &[]).status.success());
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn resume_continues_the_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(train_small(&out, &[]).status.success());
    let o = vrmsac(&["train", "--resume", out.to_str().unwrap(), "--total-steps", "120"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let steps: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["40", "80", "120"]);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = vrmsac(&["count-params", "--config", "/nonexistent/x.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cannot read config"));

    let o = vrmsac(&["count-params", "no_such_key=1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));

    let o = vrmsac(&["eval", "--checkpoint", "/nonexistent/ck"]);
    assert!(!o.status.success());

    // an existing non-empty output directory is never overwritten
    let out = dir.path().join("busy");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep"), "x").unwrap();
    let o = train_small(&out, &[]);
    assert!(!o.status.success());
    assert_eq!(fs::read_dir(&out).unwrap().count(), 1);

    // unwritable output location
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = train_small(&blocker.join("sub"), &[]);
    assert!(!o.status.success());
}

#[test]
fn count_params_for_the_shipped_dims_config() {
    let cfg = configs().join("hopper_velonly_dims.cfg");
    let o = vrmsac(&["count-params", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let n: f64 = stdout(&o).trim().parse().unwrap();
    assert!((n - 2.8e6).abs() / 2.8e6 < 0.15, "{n}");
}

#[test]
fn every_shipped_config_parses() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let o = vrmsac(&["count-params", "--config", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}: {}", path.display(), stderr(&o));
    }
}

#[test]
fn sweep_writes_one_run_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let mut args = vec!["sweep", "--trials", "2", "--sweep-seed", "4", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["variant=novel", "total_steps=50", "eval_interval=50"]);
    let o = vrmsac(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let runs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(runs, 2);
}
