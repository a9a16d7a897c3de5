use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fixdiff_cli::record::{format_csv, parse_csv, HEADER};

const TINY_ELASTIC: &str = "\
[run]
seeds = 1

[deterministic]
n = 30
d = 20
informative = 5
t_max = 40
aid_cg = false

[stochastic]
n = 60
d = 8
informative = 3
ks = 10, 30
";

const TINY_POISON: &str = "\
[run]
seeds = 1

[problem]
clean = 60
corrupt = 20
val = 40
p = 4
classes = 2

[stochastic]
ks = 20, 40
j_divisor = 10
j1 = 10
val_batch = 10
kinds = dec
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fixdiff"));
    c.env_remove("FIXDIFF_THREADS");
    c
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run_exp(kind: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().args(["exp", kind, "--config"]).arg(cfg).arg("--out").arg(out).args(extra).output().unwrap()
}

#[test]
fn bad_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "[run]\nseeds = many\n");
    let o = run_exp("elastic", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "typo.cfg", "[stochastic]\nkz = 10\n");
    let o = run_exp("elastic", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stochastic.kz"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_exp("poisoning", &dir.path().join("nope.cfg"), &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let o = bin().env("FIXDIFF_THREADS", "abc").args(["check", "adjoint"]).output().unwrap();
    assert_eq!(code(&o), 2);
    let o = bin().env("FIXDIFF_THREADS", "0").args(["check", "adjoint"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_suite_is_a_config_error() {
    let o = bin().args(["check", "bogus"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn passing_suites_exit_zero() {
    for suite in ["adjoint", "pwl-bound"] {
        let o = bin().env("FIXDIFF_THREADS", "2").args(["check", suite]).output().unwrap();
        let text = String::from_utf8_lossy(&o.stdout);
        assert_eq!(code(&o), 0, "{text}");
        assert!(text.lines().all(|l| l.contains("PASS")), "{text}");
    }
}

#[test]
fn injected_sign_flip_fails_oracle() {
    let o = bin().args(["check", "oracle", "--inject-aid-sign-flip"]).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn solve_prints_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "s.cfg", "[problem]\nn = 40\nd = 10\ninformative = 3\n\n[solver]\niterations = 50\n");
    let o = bin().args(["solve", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("q = ") && text.contains("support size"), "{text}");
}

#[test]
fn elastic_outputs_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "e.cfg", TINY_ELASTIC);
    let out = dir.path().join("out");
    let o = run_exp("elastic", &cfg, &out, &["--seeds", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let text = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(HEADER));
    let recs = parse_csv(&text).unwrap();
    assert_eq!(format_csv(&recs), text);

    // Stochastic rows carry t = n_ref, which depends on the seed's data, so
    // count rows per (method, seed) instead of per cell.
    let mut counts: HashMap<(String, u64), usize> = HashMap::new();
    for r in &recs {
        *counts.entry((r.method.clone(), r.seed)).or_default() += 1;
    }
    let methods: std::collections::BTreeSet<&String> = counts.keys().map(|k| &k.0).collect();
    assert!(methods.len() >= 4, "{methods:?}");
    for m in methods {
        let per_seed: Vec<usize> = (0..3).map(|s| counts.get(&(m.clone(), s)).copied().unwrap_or(0)).collect();
        assert!(per_seed[0] > 0 && per_seed.iter().all(|c| *c == per_seed[0]), "{m}: {per_seed:?}");
    }
    for f in ["deterministic.svg", "stochastic.svg"] {
        let svg = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"), "{f}");
    }
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "e.cfg", TINY_ELASTIC);
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("out{i}"));
        let o = bin()
            .env("FIXDIFF_THREADS", threads)
            .args(["exp", "elastic", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(["--seeds", "2"])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        outputs.push(std::fs::read(out.join("runs.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn poisoning_epoch_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "p.cfg", TINY_POISON);
    let out = dir.path().join("out");
    let o = run_exp("poisoning", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recs = parse_csv(&std::fs::read_to_string(out.join("runs.csv")).unwrap()).unwrap();
    assert!(!recs.is_empty());
    let (population, batch) = (80.0, 8.0);
    for r in &recs {
        if r.method == "AID-FP" {
            assert_eq!((r.epoch, r.j), (r.k as f64, 0));
        } else {
            assert_eq!(r.j, r.k.div_ceil(10), "{r:?}");
            let want = (r.k + r.j) as f64 * batch / population;
            assert!((r.epoch - want).abs() <= 1e-12, "{r:?}");
        }
        assert!(r.kref > 0 && r.tref > 0, "{r:?}");
    }
}
