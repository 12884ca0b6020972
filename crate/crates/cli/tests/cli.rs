use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
tasks = 3
blocks = 1
width = 8
tokens_per_task = 4
window = 2
language_dim = 8
epochs = 2
batch_size = 16
eval_episodes = 3
demos_per_task = 2
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tokenskill"));
    c.env_remove("TOKENSKILL_OUT");
    c
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn last_line(out: &Output) -> PathBuf {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    PathBuf::from(text.lines().last().unwrap().trim())
}

fn ledger_trainable(dir: &Path) -> usize {
    let text = fs::read_to_string(dir.join("token_ledger.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "trainable_tokens").unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse::<usize>().unwrap())
        .sum()
}

#[test]
fn run_writes_every_artifact_under_the_hash() {
    let (tmp, cfg) = setup();
    let out = run(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--mode",
            "t2s",
            "--mu",
            "0.5",
            "--seed",
            "7",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join(last_line(&out));
    assert_eq!(dir.parent().unwrap(), tmp.path().join("out"));
    for f in [
        "manifest.json",
        "success_matrix.csv",
        "metrics.csv",
        "token_ledger.csv",
        "checkpoint.json",
        "summary.txt",
        "success_curve.svg",
        "token_bars.svg",
    ] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let hash = dir.file_name().unwrap().to_str().unwrap();
    let manifest = fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains(hash));
    assert!(manifest.contains("seed = 7"));
    let matrix = fs::read_to_string(dir.join("success_matrix.csv")).unwrap();
    assert!(matrix.lines().skip(1).all(|l| l.starts_with(hash)));
}

#[test]
fn identical_runs_give_identical_tables() {
    let (tmp, cfg) = setup();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for root in [&a, &b] {
        let out = bin()
            .args(["run", "--config", cfg.to_str().unwrap(), "--seed", "3"])
            .env("TOKENSKILL_OUT", root)
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let ra = fs::read_dir(&a).unwrap().next().unwrap().unwrap().path();
    let rb = b.join(ra.file_name().unwrap());
    for f in [
        "success_matrix.csv",
        "metrics.csv",
        "token_ledger.csv",
        "checkpoint.json",
    ] {
        assert_eq!(fs::read(ra.join(f)).unwrap(), fs::read(rb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_config_fails_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["run", "--config", "absent.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn invalid_config_names_the_field() {
    let (tmp, _) = setup();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "mu = 1.5\n").unwrap();
    let out = run(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mu"));
    fs::write(&cfg, "learning_rat = 0.1\n").unwrap();
    let out = run(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["run", "--bogus"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["run", "--mode", "nope"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["run", "--order", "0,0,1"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn t2s_trains_fewer_tokens_than_independent_blocks() {
    let (tmp, cfg) = setup();
    let c = cfg.to_str().unwrap();
    let naive = run(&["run", "--config", c, "--mode", "naive-independent"], tmp.path());
    let t2s = run(&["run", "--config", c, "--mode", "t2s"], tmp.path());
    assert!(naive.status.success() && t2s.status.success());
    let naive = ledger_trainable(&tmp.path().join(last_line(&naive)));
    let t2s = ledger_trainable(&tmp.path().join(last_line(&t2s)));
    assert!(t2s < naive, "t2s {t2s} vs naive {naive}");
}

#[test]
fn report_is_idempotent_and_guards_integrity() {
    let (tmp, cfg) = setup();
    let out = run(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    let dir = tmp.path().join(last_line(&out));
    let files = ["summary.txt", "success_curve.svg", "token_bars.svg"];
    let d = dir.to_str().unwrap();
    assert!(run(&["report", d], tmp.path()).status.success());
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    let again = run(&["report", d], tmp.path());
    assert!(again.status.success());
    let second: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    assert_eq!(first, second);
    assert!(String::from_utf8_lossy(&again.stdout).contains("success matrix"));

    let metrics = dir.join("metrics.csv");
    let text = fs::read_to_string(&metrics).unwrap();
    fs::write(&metrics, text.replacen("0.", "1.", 1)).unwrap();
    let tampered = run(&["report", d], tmp.path());
    assert_eq!(tampered.status.code(), Some(1));

    fs::remove_file(dir.join("token_ledger.csv")).unwrap();
    let missing = run(&["report", d], tmp.path());
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("token_ledger.csv"));
}

#[test]
fn sweeps_need_two_settings_and_keep_nbt_at_zero() {
    let (tmp, cfg) = setup();
    let c = cfg.to_str().unwrap();
    let single = run(
        &["sweep", "--config", c, "--param", "mu", "--values", "0.5"],
        tmp.path(),
    );
    assert_eq!(single.status.code(), Some(1));

    let out = run(
        &["sweep", "--config", c, "--param", "mu", "--values", "0.0,0.5,0.9"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join(last_line(&out));
    assert!(dir.join("mu_fwt.svg").is_file());
    let table = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r.split(',').nth(5), Some("0.0"), "{r}");
    }

    let orders = run(
        &["sweep", "--config", c, "--param", "order", "--shuffles", "2"],
        tmp.path(),
    );
    assert!(orders.status.success());
}

#[test]
fn gradcheck_reports_each_component() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(&["gradcheck", "--seed", "0"], tmp.path());
    let b = run(&["gradcheck", "--seed", "0"], tmp.path());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    for name in ["pattention", "split-pattention", "tpst-block", "bc-loss"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name}");
    }
}

#[test]
fn demo_gen_writes_a_verifiable_file() {
    let (tmp, cfg) = setup();
    let file = tmp.path().join("demos.json");
    let out = run(
        &[
            "demo-gen",
            "--config",
            cfg.to_str().unwrap(),
            "--file",
            file.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(out.status.success());
    let bytes = fs::read(&file).unwrap();
    let demo = tokenskill::demofile::decode_demo_file(&bytes).unwrap();
    assert_eq!(demo.tasks.len(), 3);
    demo.verify(&tokenskill::tasksuite::SuiteSpec::with_tasks(3)).unwrap();
}
