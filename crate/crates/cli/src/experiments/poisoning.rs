//! Data poisoning on synthetic Gaussian blobs: NSID-Bilevel, SID and
//! BAID-FP against a BAID-FP reference, with `J = ⌈k/20⌉`.

use std::fmt::Write as _;

use anyhow::{Context, Result};
use fixdiff_core::bilevel::{baid_fp_hypergrad, nsid_bilevel, zeta_stream, StochasticUpperLevel};
use fixdiff_core::deriv_stoch::{epochs, sid_baseline, NsidConfig, SampleStreams, Sampling, ScheduleKind};
use fixdiff_core::linalg::vecops;
use fixdiff_core::problems::{build_poisoning, gen_blobs, init_gamma, ProblemSpec};
use fixdiff_core::reference::protocol_iterations;
use fixdiff_core::solver::{estimate_q_near, fixed_point_solve, observed_rate, solve_to_tolerance};
use fixdiff_core::Rng;
use rayon::prelude::*;

use super::{error_of, median_series, plot, ExpOutput, SchedSpec};
use crate::config::{Config, ConfigError};
use crate::record::{ErrorValue, RunRecord};

/// Γ and the contraction probes of seed `s` come from `Rng::new(GAMMA_SEED_BASE + s)`.
pub const GAMMA_SEED_BASE: u64 = 1000;
const SOLVE_TOL: f64 = 1e-13;
const SOLVE_MAX: usize = 100_000;
/// Keeps `k_ref` finite when the observed rate rounds to one.
const PROTOCOL_Q_MAX: f64 = 0.9999;

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonParams {
    pub data_seed: u64,
    pub clean: usize,
    pub corrupt: usize,
    pub val: usize,
    pub p: usize,
    pub classes: usize,
    pub separation: f64,
    pub scale: f64,
    pub l1: f64,
    pub l2: f64,
    pub c: f64,
    pub ks: Vec<usize>,
    /// `J = ⌈k/j_divisor⌉`.
    pub j_divisor: usize,
    pub j1: usize,
    pub val_batch: usize,
    pub schedules: Vec<SchedSpec>,
    pub sampling: Sampling,
    pub sid: bool,
}

impl Default for PoisonParams {
    fn default() -> Self {
        PoisonParams {
            data_seed: 7,
            clean: 500,
            corrupt: 150,
            val: 300,
            p: 20,
            classes: 3,
            separation: 1.0,
            scale: 1.0,
            l1: 1e-3,
            l2: 1e-2,
            c: 0.1,
            ks: vec![250, 500, 1000, 2000],
            j_divisor: 20,
            j1: 100,
            val_batch: 30,
            schedules: vec![
                SchedSpec { kind: ScheduleKind::Harmonic, b1: 4.0, b2: 4.0 },
                SchedSpec { kind: ScheduleKind::Constant, b1: 1.0, b2: 10.0 },
            ],
            sampling: Sampling::Reshuffle,
            sid: true,
        }
    }
}

impl PoisonParams {
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let d = PoisonParams::default();
        let ks = cfg.list_or("stochastic.ks", &d.ks, "positive integers")?;
        if ks.contains(&0) {
            return Err(ConfigError::new("stochastic.ks", "budgets must be at least 1"));
        }
        let classes = cfg.usize_or("problem.classes", d.classes)?;
        if classes < 2 {
            return Err(ConfigError::new("problem.classes", "need at least 2 classes"));
        }
        Ok(PoisonParams {
            data_seed: cfg.u64_or("problem.data_seed", d.data_seed)?,
            clean: cfg.positive_usize_or("problem.clean", d.clean)?,
            corrupt: cfg.positive_usize_or("problem.corrupt", d.corrupt)?,
            val: cfg.positive_usize_or("problem.val", d.val)?,
            p: cfg.positive_usize_or("problem.p", d.p)?,
            classes,
            separation: cfg.positive_f64_or("problem.separation", d.separation)?,
            scale: cfg.positive_f64_or("problem.scale", d.scale)?,
            l1: cfg.positive_f64_or("problem.l1", d.l1)?,
            l2: cfg.positive_f64_or("problem.l2", d.l2)?,
            c: cfg.positive_f64_or("problem.c", d.c)?,
            ks,
            j_divisor: cfg.positive_usize_or("stochastic.j_divisor", d.j_divisor)?,
            j1: cfg.positive_usize_or("stochastic.j1", d.j1)?,
            val_batch: cfg.positive_usize_or("stochastic.val_batch", d.val_batch)?,
            schedules: SchedSpec::read_all(cfg, "stochastic", (d.schedules[0].b1, d.schedules[0].b2), (d.schedules[1].b1, d.schedules[1].b2))?,
            sampling: super::read_sampling(cfg, "stochastic.sampling", "reshuffle")?,
            sid: cfg.bool_or("stochastic.sid", d.sid)?,
        })
    }

    pub fn j_for(&self, k: usize) -> usize {
        k.div_ceil(self.j_divisor)
    }

    pub fn build_spec(&self) -> Result<ProblemSpec> {
        let ds = gen_blobs(self.data_seed, &[self.clean, self.corrupt, self.val], self.p, self.classes, self.separation, self.scale)?;
        Ok(build_poisoning(&ds[0], &ds[1], &ds[2], self.l1, self.l2, self.c)?)
    }

    /// Γ for run seed `seed`, with the generator left ready for the
    /// contraction probes.
    pub fn gamma(&self, seed: u64) -> (Vec<f64>, Rng) {
        let mut rng = Rng::new(GAMMA_SEED_BASE + seed);
        let g = init_gamma(&mut rng, self.corrupt, self.p);
        (g, rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonRun {
    pub seed: u64,
    /// Contraction of the ISTA step formula.
    pub q: f64,
    /// `max(q, local estimate, observed solver rate)`, used for the
    /// reference budget.
    pub q_hat: f64,
    pub t_ref: usize,
    pub k_ref: usize,
    pub ref_norm: f64,
    pub records: Vec<RunRecord>,
}

impl PoisonRun {
    /// Error of `method` at budget `k`, relative to the reference norm.
    pub fn relative_error(&self, method: &str, k: usize) -> Option<ErrorValue> {
        self.records.iter().find(|r| r.method == method && r.k == k).map(|r| match r.error {
            ErrorValue::Finite(e) => ErrorValue::Finite(e / self.ref_norm),
            ErrorValue::Div => ErrorValue::Div,
        })
    }
}

/// SID with the same upper-level tokens NSID-Bilevel draws.
fn sid_bilevel(spec: &ProblemSpec, w: &[f64], lam: &[f64], j1: usize, val_pop: usize, val_batch: usize, cfg: &NsidConfig) -> fixdiff_core::Result<Vec<f64>> {
    let e: &dyn StochasticUpperLevel = &*spec.upper_stoch;
    let mut zeta = zeta_stream(cfg, val_pop, val_batch);
    let mut y = vec![0.0; w.len()];
    let mut g2 = vec![0.0; lam.len()];
    for _ in 0..j1 {
        let z = zeta.next_token();
        vecops::axpy(&mut y, 1.0 / j1 as f64, &e.grad_w(w, lam, &z));
        vecops::axpy(&mut g2, 1.0 / j1 as f64, &e.grad_lam(w, lam, &z));
    }
    let mut r = sid_baseline(spec.that.clone(), spec.g.clone(), w, lam, &y, cfg)?.value;
    vecops::axpy(&mut r, 1.0, &g2);
    Ok(r)
}

pub fn poisoning_run(p: &PoisonParams, spec: &ProblemSpec, seed: u64) -> Result<PoisonRun> {
    let phi = &*spec.phi;
    let q = spec.contraction(&spec.lam).q;
    let (lam, mut rng) = p.gamma(seed);
    let d = spec.state_dim();
    let (_, t_ref) = solve_to_tolerance(phi, &lam, &vec![0.0; d], SOLVE_TOL, SOLVE_MAX)?;
    let traj = fixed_point_solve(phi, &lam, &vec![0.0; d], t_ref, false)?;
    let w = traj.last().to_vec();
    let q_near = estimate_q_near(phi, &lam, &w, 1e-3, 20, &mut rng).q;
    // The step formula ignores Γ and the probe quotient only bounds the
    // norm from below; the solver's own decay rate catches the rest.
    let q_hat = q.max(q_near).max(observed_rate(traj.residuals()).unwrap_or(0.0).min(PROTOCOL_Q_MAX));
    let k_ref = protocol_iterations(q_hat);
    let r = baid_fp_hypergrad(&*spec.upper, phi, &w, &lam, k_ref)?;
    let rec = |method: String, k: usize, j: usize, epoch: f64, error: ErrorValue| RunRecord {
        method,
        t: t_ref,
        k,
        j,
        epoch,
        error,
        seed,
        wall_ms: None,
        q: q_hat,
        tref: t_ref,
        kref: k_ref,
    };
    let mut records = Vec::new();
    for &k in &p.ks {
        let j = p.j_for(k);
        let ep = epochs(k, j, spec.batch, spec.population);
        for s in &p.schedules {
            let cfg = NsidConfig {
                k,
                j,
                sched: s.build(q)?,
                streams: SampleStreams::new(seed, spec.batch, p.sampling),
                q_hat: Some(q),
            };
            let mut zeta = zeta_stream(&cfg, p.val, p.val_batch);
            let g = nsid_bilevel(&*spec.upper_stoch, &*spec.that, &*spec.g, &w, &lam, p.j1, &mut zeta, &cfg);
            records.push(rec(format!("NSID-{}", s.label()), k, j, ep, error_of(g, &r)));
            if p.sid {
                let g = sid_bilevel(spec, &w, &lam, p.j1, p.val, p.val_batch, &cfg);
                records.push(rec(format!("SID-{}", s.label()), k, j, ep, error_of(g, &r)));
            }
        }
        let g = baid_fp_hypergrad(&*spec.upper, phi, &w, &lam, k);
        records.push(rec("AID-FP".into(), k, 0, k as f64, error_of(g, &r)));
    }
    Ok(PoisonRun { seed, q, q_hat, t_ref, k_ref, ref_norm: vecops::norm(&r), records })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisoningConfig {
    pub seeds: u64,
    pub params: PoisonParams,
}

impl PoisoningConfig {
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let seeds = cfg.u64_or("run.seeds", 1)?;
        if seeds == 0 {
            return Err(ConfigError::new("run.seeds", "must be at least 1"));
        }
        Ok(PoisoningConfig { seeds, params: PoisonParams::from_config(cfg)? })
    }
}

pub fn run_seeds(p: &PoisonParams, seeds: &[u64]) -> Result<Vec<PoisonRun>> {
    let spec = p.build_spec()?;
    seeds
        .par_iter()
        .map(|&s| poisoning_run(p, &spec, s).with_context(|| format!("poisoning, seed {s}")))
        .collect()
}

pub fn run_poisoning(cfg: &PoisoningConfig) -> Result<ExpOutput> {
    let seeds: Vec<u64> = (0..cfg.seeds).collect();
    let runs = run_seeds(&cfg.params, &seeds)?;
    let mut out = ExpOutput::default();
    let mut summary = String::from("seed,q,q_hat,tref,kref,ref_norm\n");
    for r in &runs {
        let _ = writeln!(summary, "{},{},{},{},{},{}", r.seed, r.q, r.q_hat, r.t_ref, r.k_ref, r.ref_norm);
        out.records.extend(r.records.iter().cloned());
    }
    let mut methods = Vec::new();
    for s in &cfg.params.schedules {
        methods.push(format!("NSID-{}", s.label()));
        if cfg.params.sid {
            methods.push(format!("SID-{} (may diverge)", s.label()));
        }
    }
    methods.push("AID-FP".into());
    let relabelled: Vec<RunRecord> = out
        .records
        .iter()
        .cloned()
        .map(|mut r| {
            if r.method.starts_with("SID-") {
                r.method.push_str(" (may diverge)");
            }
            r
        })
        .collect();
    let svg = plot("data poisoning: hypergradient estimators", "epochs", median_series(&relabelled, &methods, |r| r.epoch), vec![]);
    out.files.push(("poisoning.svg".into(), svg));
    out.files.push(("poisoning_summary.csv".into(), summary));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PoisonParams {
        PoisonParams { clean: 40, corrupt: 10, val: 30, p: 4, ks: vec![20, 40], j1: 5, val_batch: 5, ..PoisonParams::default() }
    }

    #[test]
    fn gamma_within_box() {
        let p = PoisonParams::default();
        for s in 0..3 {
            let (g, _) = p.gamma(s);
            assert_eq!(g.len(), p.corrupt * p.p);
            assert!(g.iter().all(|v| (-0.1..=0.1).contains(v)));
        }
    }

    #[test]
    fn j_is_ceiling() {
        let p = PoisonParams::default();
        assert_eq!(p.j_for(2000), 100);
        assert_eq!(p.j_for(250), 13);
        assert_eq!(p.j_for(1), 1);
    }

    #[test]
    fn run_rows_and_epochs() {
        let p = tiny();
        let spec = p.build_spec().unwrap();
        let run = poisoning_run(&p, &spec, 0).unwrap();
        assert_eq!(run.records.len(), 2 * 5);
        assert!(run.q_hat >= run.q);
        for r in &run.records {
            if r.method.contains("SID") {
                assert_eq!(r.epoch, (r.k + r.j) as f64 * spec.batch as f64 / (p.clean + p.corrupt) as f64);
            }
        }
        let e = run.relative_error("AID-FP", 40).unwrap().value().unwrap();
        assert!(e.is_finite());
    }

    #[test]
    fn config_paths() {
        let c = Config::parse("[problem]\nclasses = 1\n").unwrap();
        assert_eq!(PoisoningConfig::from_config(&c).unwrap_err().path, "problem.classes");
        let c = Config::parse("[stochastic]\nkinds = dec\ndec.b1 = -1\n").unwrap();
        assert_eq!(PoisoningConfig::from_config(&c).unwrap_err().path, "stochastic.dec.b1");
        let c = Config::parse("run.seeds = 0\n").unwrap();
        assert_eq!(PoisoningConfig::from_config(&c).unwrap_err().path, "run.seeds");
    }
}
