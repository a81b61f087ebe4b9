use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[dataset]
n_train = 400
n_test = 200

[target]
epochs = 5

[attack]
generator_hidden = [16]
clone_hidden = [16]
"#;

fn maze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maze"))
        .args(args)
        .output()
        .expect("spawn maze")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn log_qs(run: &Path) -> Vec<u64> {
    let text = std::fs::read_to_string(run.join("log.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn one_iteration_costs_2048() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    let out = maze(&[
        "attack",
        "maze",
        "--config",
        &cfg,
        "--budget",
        "2048",
        "--B",
        "128",
        "--m",
        "10",
        "--NG",
        "1",
        "--NC",
        "5",
        "--out",
        run.to_str().unwrap(),
    ]);
    ok(&out);
    assert_eq!(log_qs(&run), vec![0, 2048]);
    let manifest = std::fs::read_to_string(run.join("manifest.toml")).unwrap();
    assert!(manifest.contains("iterations = 1"), "{manifest}");
    assert!(manifest.contains("queries = 2048"), "{manifest}");
    for f in [
        "config.toml",
        "clone.ckpt",
        "generator.ckpt",
        "target.ckpt",
        "target.toml",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
}

#[test]
fn zero_budget_exits_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&maze(&[
        "attack",
        "maze",
        "--config",
        &cfg,
        "--budget",
        "0",
        "--out",
        run.to_str().unwrap(),
    ]));
    assert_eq!(log_qs(&run), vec![0]);
    assert!(run.join("clone.ckpt").exists());
}

#[test]
fn usage_errors_are_nonzero() {
    for args in [
        &["attack", "maze", "--bogus"][..],
        &["frobnicate"][..],
        &["attack", "mazer"][..],
        &[][..],
    ] {
        let out = maze(args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(
            err.contains("Usage") || err.contains("usage") || err.contains("unknown attack"),
            "{args:?}: {err}"
        );
    }
}

#[test]
fn bad_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    std::fs::write(&p, "[attack]\nbatchsize = 3\n").unwrap();
    let out = maze(&[
        "attack",
        "maze",
        "--config",
        p.to_str().unwrap(),
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));
}

#[test]
fn sweep_writes_one_row_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let dir = tmp.path().join("sweep");
    let out = maze(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "Q",
        "--values",
        "2048,4096,6144",
        "--repeats",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    ok(&out);
    let text = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 9);
    assert!(dir.join("summary.txt").exists());

    let merged = tmp.path().join("merged.csv");
    ok(&maze(&[
        "report",
        dir.join("report.csv").to_str().unwrap(),
        "--out",
        merged.to_str().unwrap(),
    ]));
    assert_eq!(std::fs::read_to_string(merged).unwrap(), text);
}

#[test]
fn echoed_config_reproduces_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&maze(&[
        "--threads",
        "1",
        "attack",
        "maze-pd",
        "--config",
        &cfg,
        "--budget",
        "6144",
        "--seed",
        "3",
        "--out",
        a.to_str().unwrap(),
    ]));
    let echoed = a.join("config.toml");
    ok(&maze(&[
        "--threads",
        "1",
        "attack",
        "maze-pd",
        "--config",
        echoed.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]));
    for f in ["clone.ckpt", "generator.ckpt", "critic.ckpt", "log.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn saved_target_eval_and_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let target = tmp.path().join("target");
    ok(&maze(&[
        "train-target",
        "--config",
        &cfg,
        "--out",
        target.to_str().unwrap(),
    ]));
    for kind in ["noise", "jbda", "surrogate", "maze-whitebox"] {
        let run = tmp.path().join(kind);
        ok(&maze(&[
            "attack",
            kind,
            "--config",
            &cfg,
            "--budget",
            "8192",
            "--target",
            target.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ]));
        let eval = maze(&["eval", run.to_str().unwrap()]);
        ok(&eval);
        let text = String::from_utf8_lossy(&eval.stdout);
        assert!(text.contains("agreement = "), "{text}");
    }
    // The target was trained with a different dataset size.
    let other = tmp.path().join("other");
    let out = maze(&[
        "attack",
        "noise",
        "--budget",
        "128",
        "--target",
        target.to_str().unwrap(),
        "--out",
        other.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}
