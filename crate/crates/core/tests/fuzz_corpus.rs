//! Replays the checked-in fuzz corpus, plus deterministic mutations of it,
//! through every decoder on stable Rust.

use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenskill::config::{parse_config, parse_order};
use tokenskill::demofile::decode_demo_file;
use tokenskill::report::{
    parse_ledger_csv, parse_matrix_csv, parse_metrics_csv, parse_sweep_csv, RunManifest, RunTables,
};
use tokenskill::trainer::{decode_checkpoint, LifelongRunConfig};

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus for {target}");
    files
}

/// Each seed followed by a few byte-level mutations of it.
fn with_mutations(seeds: Vec<(String, Vec<u8>)>) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for (_, seed) in seeds {
        for _ in 0..24 {
            let mut m = seed.clone();
            match rng.random_range(0..3) {
                0 if !m.is_empty() => {
                    let i = rng.random_range(0..m.len());
                    m[i] = rng.random();
                }
                1 if !m.is_empty() => m.truncate(rng.random_range(0..m.len())),
                _ => {
                    let i = rng.random_range(0..=m.len());
                    m.insert(i, rng.random());
                }
            }
            out.push(m);
        }
        out.push(seed);
    }
    out
}

fn config_entry(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = parse_config(text) {
            let _ = file.apply(&LifelongRunConfig::default());
        }
    }
}

fn table_entry(data: &[u8]) {
    let _ = parse_metrics_csv(data);
    let _ = parse_ledger_csv(data);
    let _ = parse_sweep_csv(data);
    if let Ok(matrix) = parse_matrix_csv(data) {
        let tables = RunTables {
            matrix,
            metrics: Vec::new(),
            ledger: Vec::new(),
        };
        if tables.success_matrix().is_ok() {
            let _ = tokenskill::report::render_success_curve(&tables);
        }
    }
}

#[test]
fn config_seeds() {
    let seeds = corpus("config_parse");
    for (name, bytes) in &seeds {
        let text = std::str::from_utf8(bytes).unwrap();
        let applied = parse_config(text).and_then(|f| f.apply(&LifelongRunConfig::default()));
        assert_eq!(
            applied.is_ok(),
            !name.starts_with("bad") && !name.starts_with("unknown"),
            "{name}"
        );
    }
    with_mutations(seeds).iter().for_each(|d| config_entry(d));
}

#[test]
fn order_seeds() {
    let seeds = corpus("order_parse");
    for (name, bytes) in &seeds {
        let ok = parse_order(std::str::from_utf8(bytes).unwrap()).is_ok();
        assert_eq!(ok, name == "identity" || name == "spaced", "{name}");
    }
    for d in with_mutations(seeds) {
        if let Ok(order) = std::str::from_utf8(&d)
            .map_err(|_| ())
            .and_then(|t| parse_order(t).map_err(|_| ()))
        {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert!(sorted.iter().enumerate().all(|(i, &t)| i == t));
        }
    }
}

#[test]
fn checkpoint_seeds() {
    let seeds = corpus("checkpoint_decode");
    for (name, bytes) in &seeds {
        assert_eq!(decode_checkpoint(bytes).is_ok(), name == "tiny.json", "{name}");
    }
    with_mutations(seeds).iter().for_each(|d| {
        let _ = decode_checkpoint(d);
    });
}

#[test]
fn demo_seeds() {
    let seeds = corpus("demo_decode");
    for (name, bytes) in &seeds {
        assert_eq!(decode_demo_file(bytes).is_ok(), name == "tiny.json", "{name}");
    }
    with_mutations(seeds).iter().for_each(|d| {
        let _ = decode_demo_file(d);
    });
}

#[test]
fn table_seeds() {
    let seeds = corpus("table_parse");
    for (name, bytes) in &seeds {
        let ok = match name.as_str() {
            "success_matrix.csv" => parse_matrix_csv(bytes).is_ok(),
            "metrics.csv" => parse_metrics_csv(bytes).is_ok(),
            "token_ledger.csv" => parse_ledger_csv(bytes).is_ok(),
            "sweep.csv" => parse_sweep_csv(bytes).is_ok(),
            _ => true,
        };
        assert!(ok, "{name}");
    }
    with_mutations(seeds).iter().for_each(|d| table_entry(d));
}

#[test]
fn manifest_seeds() {
    let seeds = corpus("manifest_decode");
    for (name, bytes) in &seeds {
        assert!(RunManifest::decode(bytes).is_ok(), "{name}");
    }
    with_mutations(seeds).iter().for_each(|d| {
        let _ = RunManifest::decode(d);
    });
}
