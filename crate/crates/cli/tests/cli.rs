use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--task",
    "narma10",
    "--variant",
    "standard,p-bim",
    "--seeds",
    "0..2",
    "--context-len",
    "6",
    "--d-state",
    "2",
    "--train-count",
    "16",
    "--test-count",
    "4",
    "--rollout-count",
    "2",
    "--rollout-total",
    "20",
    "--iterations",
    "4",
    "--batch-size",
    "4",
    "--log-every",
    "2",
];

fn bssm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bssm"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("BSSM_OUT")
        .output()
        .expect("binary runs")
}

fn tiny(out: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    bssm(out, &args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// The single report file `name` under `<out>/reports/<prefix>*`.
fn report(out: &Path, prefix: &str, name: &str) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].join(name)
}

#[test]
fn invalid_configurations_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&bssm(out, &["train", "--variant", "gm", "--routing", "bcoup-only"])), 2);
    assert_eq!(code(&bssm(out, &["train", "--preset", "nope"])), 2);
    assert_eq!(code(&bssm(out, &["train", "--precision", "f32"])), 2);
    assert_eq!(code(&bssm(out, &["train", "--rollout-window", "0"])), 2);

    let cfg = out.join("c.toml");
    fs::write(&cfg, "task = \"narma10\"\nbogus = 1\n").unwrap();
    assert_eq!(code(&bssm(out, &["train", "--config", cfg.to_str().unwrap()])), 2);
    fs::write(&cfg, "task = \"narma10\"\n").unwrap();
    let both = bssm(out, &["train", "--config", cfg.to_str().unwrap(), "--preset", "table3"]);
    assert_ne!(code(&both), 0);
}

#[test]
fn missing_inputs_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&tiny(out, "train", &[])), 3);
    assert_eq!(code(&bssm(out, &["train", "--config", "/nonexistent/x.toml"])), 3);
    assert_eq!(code(&tiny(out, "gen-data", &[])), 0);
    let eval = tiny(out, "eval", &[]);
    assert_eq!(code(&eval), 3, "{}", String::from_utf8_lossy(&eval.stderr));
}

#[test]
fn gen_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let first = tiny(out, "gen-data", &[]);
    assert_eq!(code(&first), 0);
    assert!(stdout(&first).contains("wrote 16/4/2 trajectories"));
    let data_dir = fs::read_dir(out.join("data")).unwrap().next().unwrap().unwrap().path();
    let before = fs::read(data_dir.join("train.bin")).unwrap();
    let second = tiny(out, "gen-data", &[]);
    assert!(stdout(&second).contains("exists, skipped"));
    assert_eq!(fs::read(data_dir.join("train.bin")).unwrap(), before);
    let forced = tiny(out, "gen-data", &["--force"]);
    assert!(stdout(&forced).contains("wrote"));
    assert_eq!(fs::read(data_dir.join("train.bin")).unwrap(), before);
}

fn pipeline(out: &Path, workers: &str) -> (String, String) {
    for cmd in ["gen-data", "train", "eval"] {
        let o = tiny(out, cmd, &["--workers", workers]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let cmp = fs::read_to_string(report(out, "eval-", "comparison.csv")).unwrap();
    let per = fs::read_to_string(report(out, "eval-", "narma10-p-bim-ds2-di8-L6.csv")).unwrap();
    (cmp, per)
}

#[test]
fn train_then_eval_is_deterministic_across_runs_and_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (cmp_a, per_a) = pipeline(a.path(), "1");
    let (cmp_b, per_b) = pipeline(b.path(), "2");
    assert_eq!(cmp_a, cmp_b);
    assert_eq!(per_a, per_b);

    let lines: Vec<&str> = cmp_a.lines().collect();
    assert!(lines[0].starts_with("task,variant,d_state,d_inner,context_len,params,mean,median,worst,sd,"));
    assert_eq!(lines.len(), 3);
    assert!(per_a.lines().any(|l| l.contains(",median,")));

    // re-running eval reuses checkpoints and results, byte for byte
    let again = tiny(a.path(), "eval", &[]);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read_to_string(report(a.path(), "eval-", "comparison.csv")).unwrap(), cmp_a);

    let summary = fs::read_to_string(report(a.path(), "train-", "train_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    let cells = a.path().join("cells").join("narma10");
    let group = cells.join("p-bim-ds2-di8-L6");
    let cell = fs::read_dir(&group).unwrap().next().unwrap().unwrap().path();
    for f in ["cell.json", "train_log.csv", "checkpoint.bin"] {
        assert!(cell.join(f).exists(), "{f}");
    }
}

#[test]
fn sliding_window_rollouts_are_stored_next_to_continuous_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    pipeline(out, "1");
    let w = tiny(out, "eval", &["--rollout-window", "6"]);
    assert_eq!(code(&w), 0, "{}", String::from_utf8_lossy(&w.stderr));
    let group = out.join("cells").join("narma10").join("standard-ds2-di8-L6");
    let cell = fs::read_dir(&group).unwrap().next().unwrap().unwrap().path();
    let evals = fs::read_dir(&cell)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("eval-"))
        .count();
    assert_eq!(evals, 2);
}

#[test]
fn sweep_produces_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("sweep.toml");
    fs::write(
        &cfg,
        "task = \"narma10\"\ncontext_len = 6\nd_state = 2\nseeds = [0]\n\n[data]\ntrain_count = 16\ntest_count = 4\nrollout_count = 2\n\n\
         [train]\niterations = 3\nbatch_size = 4\nlog_every = 3\n\n[rollout]\ntotal = 20\n\n\
         [sweep]\ncontext_lens = [6, 8]\nd_states = [2, 3]\nvariants = [\"standard\", \"p-bim\"]\n",
    )
    .unwrap();
    let o = bssm(out, &["sweep", "--config", cfg.to_str().unwrap(), "--axis", "context-len"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(report(out, "sweep-", "sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 4, "{text}");
    assert!(lines[0].contains("standard") && lines[0].contains("impr_p-bim"));
}

#[test]
fn checks_print_pass_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = bssm(dir.path(), &["scan-check", "--cases", "20"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("PASS 40 cases"));
    let o = bssm(dir.path(), &["grad-check"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 7);
}

#[test]
fn all_seeds_diverging_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let lr = ["--variant", "standard", "--lr-start", "1e8", "--lr-end", "1e8"];
    assert_eq!(code(&tiny(out, "gen-data", &lr)), 0);
    let train = tiny(out, "train", &lr);
    assert_eq!(code(&train), 4);
    assert!(String::from_utf8_lossy(&train.stderr).contains("every seed diverged"));
    let eval = tiny(out, "eval", &lr);
    assert_eq!(code(&eval), 4);
    assert!(stdout(&eval).contains("2 diverged"));
}
