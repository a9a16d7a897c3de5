//! Elastic net: deterministic ITD/AID sweep over `t = k` and the
//! stochastic NSID/SID sweep over `k = J`.

use std::fmt::Write as _;

use anyhow::{Context, Result};
use fixdiff_core::deriv_det::{aid_cg_vjp, aid_fp_vjp, itd_vjp, CgMode};
use fixdiff_core::deriv_stoch::{epochs, nsid, sid_baseline, NsidConfig, SampleStreams, Sampling};
use fixdiff_core::linalg::vecops;
use fixdiff_core::problems::{build_elastic_net, gen_elastic_net, ProblemSpec};
use fixdiff_core::reference::protocol_iterations;
use fixdiff_core::solver::{fixed_point_solve, support_identification, ZERO_THRESHOLD};
use rayon::prelude::*;

use super::{error_of, lambda_max, median_series, plot, ExpOutput, SchedSpec};
use crate::config::{Config, ConfigError};
use crate::record::{ErrorValue, RunRecord};

/// One synthetic elastic-net instance and its regularization.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceParams {
    pub n: usize,
    pub d: usize,
    pub informative: usize,
    pub correlated: bool,
    pub c: f64,
    /// `λ₁` as a fraction of `λ_max = ‖Xᵀy‖∞/n`.
    pub l1_frac: f64,
    pub l2: f64,
    pub data_seed: u64,
}

impl InstanceParams {
    fn read(cfg: &Config, p: &str, def: InstanceParams) -> Result<Self, ConfigError> {
        let out = InstanceParams {
            n: cfg.positive_usize_or(&format!("{p}.n"), def.n)?,
            d: cfg.positive_usize_or(&format!("{p}.d"), def.d)?,
            informative: cfg.usize_or(&format!("{p}.informative"), def.informative)?,
            correlated: cfg.bool_or(&format!("{p}.correlated"), def.correlated)?,
            c: cfg.positive_f64_or(&format!("{p}.c"), def.c)?,
            l1_frac: cfg.f64_or(&format!("{p}.l1_frac"), def.l1_frac)?,
            l2: cfg.positive_f64_or(&format!("{p}.l2"), def.l2)?,
            data_seed: cfg.u64_or(&format!("{p}.data_seed"), def.data_seed)?,
        };
        if out.informative > out.d {
            return Err(ConfigError::new(format!("{p}.informative"), format!("exceeds d = {}", out.d)));
        }
        if out.l1_frac < 0.0 {
            return Err(ConfigError::new(format!("{p}.l1_frac"), "must be nonnegative"));
        }
        Ok(out)
    }

    /// Instance for run seed `seed`; data come from `data_seed + seed`.
    pub fn build(&self, seed: u64) -> Result<Instance> {
        let (train, val, _) = gen_elastic_net(self.data_seed + seed, self.n, self.d, self.informative, self.correlated)?;
        let spec = build_elastic_net(&train, &val, self.c)?;
        let lam = vec![self.l1_frac * lambda_max(&train)?, self.l2];
        let q = spec.contraction(&lam).q;
        Ok(Instance { spec, lam, q, n_ref: protocol_iterations(q) })
    }
}

pub struct Instance {
    pub spec: ProblemSpec,
    pub lam: Vec<f64>,
    pub q: f64,
    pub n_ref: usize,
}

impl Instance {
    /// `w_{n_ref}` from zero.
    pub fn reference_state(&self) -> Result<Vec<f64>> {
        let d = self.spec.state_dim();
        Ok(fixed_point_solve(&*self.spec.phi, &self.lam, &vec![0.0; d], self.n_ref, false)?.last().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetParams {
    pub instance: InstanceParams,
    pub t_max: usize,
    pub aid_cg: bool,
}

impl DetParams {
    pub fn desk_default() -> Self {
        DetParams {
            instance: InstanceParams {
                n: 100,
                d: 100,
                informative: 30,
                correlated: false,
                c: 1.0,
                l1_frac: 0.2,
                l2: 2.0,
                data_seed: 0,
            },
            t_max: 200,
            aid_cg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub t: usize,
    pub itd: ErrorValue,
    pub aid_fp: ErrorValue,
    pub aid_cg: Option<ErrorValue>,
    /// Norm of the per-`t` reference.
    pub ref_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    pub seed: u64,
    pub q: f64,
    pub tau: Option<usize>,
    pub n_ref: usize,
    pub points: Vec<CurvePoint>,
}

/// Errors of ITD, AID-FP and AID-CG at `t = k = 1..=t_max` with
/// `y_t = ∇E(w_t)`. Each `t` has its own reference: AID-FP with `n_ref`
/// steps at `w_{n_ref}` applied to the same `y_t`.
pub fn det_curve(p: &DetParams, seed: u64) -> Result<DetCurve> {
    let inst = p.instance.build(seed)?;
    let phi = &*inst.spec.phi;
    let lam = &inst.lam;
    let w_ref = inst.reference_state()?;
    let d = inst.spec.state_dim();
    let traj = fixed_point_solve(phi, lam, &vec![0.0; d], p.t_max, true)?;
    let tau = support_identification(&traj, &w_ref, ZERO_THRESHOLD);
    let mut points = Vec::with_capacity(p.t_max);
    for t in 1..=p.t_max {
        let pre = traj.prefix(t)?;
        let w_t = pre.last();
        let y = inst.spec.upper.grad_w(w_t, lam);
        let r = aid_fp_vjp(phi, &w_ref, lam, &y, inst.n_ref)?.value;
        let itd = error_of(itd_vjp(phi, &pre, lam, &y).map(|e| e.value), &r);
        let aid_fp = error_of(aid_fp_vjp(phi, w_t, lam, &y, t).map(|e| e.value), &r);
        let aid_cg = p.aid_cg.then(|| error_of(aid_cg_vjp(phi, w_t, lam, &y, t, CgMode::NormalEquations).map(|e| e.value), &r));
        points.push(CurvePoint { t, itd, aid_fp, aid_cg, ref_norm: vecops::norm(&r) });
    }
    Ok(DetCurve { seed, q: inst.q, tau, n_ref: inst.n_ref, points })
}

impl DetCurve {
    pub fn records(&self) -> Vec<RunRecord> {
        let mut out = Vec::new();
        for pt in &self.points {
            let mut push = |method: &str, k: usize, error: ErrorValue| {
                out.push(RunRecord {
                    method: method.into(),
                    t: pt.t,
                    k,
                    j: 0,
                    epoch: pt.t as f64,
                    error,
                    seed: self.seed,
                    wall_ms: None,
                    q: self.q,
                    tref: self.n_ref,
                    kref: self.n_ref,
                });
            };
            push("ITD-R", 0, pt.itd);
            push("AID-FP", pt.t, pt.aid_fp);
            if let Some(e) = pt.aid_cg {
                push("AID-CG", pt.t, e);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochParams {
    pub instance: InstanceParams,
    pub ks: Vec<usize>,
    pub schedules: Vec<SchedSpec>,
    pub sampling: Sampling,
    pub sid: bool,
}

impl StochParams {
    pub fn desk_default() -> Self {
        StochParams {
            instance: InstanceParams {
                n: 1000,
                d: 50,
                informative: 15,
                correlated: true,
                c: 1.0,
                l1_frac: 0.1,
                l2: 0.3,
                data_seed: 0,
            },
            ks: vec![10, 100, 1000],
            schedules: vec![
                SchedSpec { kind: fixdiff_core::deriv_stoch::ScheduleKind::Harmonic, b1: 1.0, b2: 4.0 },
                SchedSpec { kind: fixdiff_core::deriv_stoch::ScheduleKind::Constant, b1: 0.5, b2: 2.0 },
            ],
            sampling: Sampling::Iid,
            sid: true,
        }
    }
}

/// NSID and SID at `k = J` for each budget, plus AID-FP with the same `k`,
/// all at `w_{n_ref}` with `y = ∇E(w_{n_ref})`.
pub fn stochastic_run(p: &StochParams, seed: u64) -> Result<Vec<RunRecord>> {
    let inst = p.instance.build(seed)?;
    let spec = &inst.spec;
    let lam = &inst.lam;
    let w = inst.reference_state()?;
    let y = spec.upper.grad_w(&w, lam);
    let r = aid_fp_vjp(&*spec.phi, &w, lam, &y, inst.n_ref)?.value;
    let rec = |method: String, k: usize, j: usize, epoch: f64, error: ErrorValue| RunRecord {
        method,
        t: inst.n_ref,
        k,
        j,
        epoch,
        error,
        seed,
        wall_ms: None,
        q: inst.q,
        tref: inst.n_ref,
        kref: inst.n_ref,
    };
    let mut out = Vec::new();
    for &k in &p.ks {
        let ep = epochs(k, k, spec.batch, spec.population);
        for s in &p.schedules {
            let cfg = NsidConfig {
                k,
                j: k,
                sched: s.build(inst.q)?,
                streams: SampleStreams::new(seed, spec.batch, p.sampling),
                q_hat: Some(inst.q),
            };
            let e = error_of(nsid(&*spec.that, &*spec.g, &w, lam, &y, &cfg).map(|e| e.value), &r);
            out.push(rec(format!("NSID-{}", s.label()), k, k, ep, e));
            if p.sid {
                let e = error_of(sid_baseline(spec.that.clone(), spec.g.clone(), &w, lam, &y, &cfg).map(|e| e.value), &r);
                out.push(rec(format!("SID-{}", s.label()), k, k, ep, e));
            }
        }
        let e = error_of(aid_fp_vjp(&*spec.phi, &w, lam, &y, k).map(|e| e.value), &r);
        out.push(rec("AID-FP".into(), k, 0, k as f64, e));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticConfig {
    pub seeds: u64,
    pub det: Option<DetParams>,
    pub stoch: Option<StochParams>,
}

impl ElasticConfig {
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let seeds = cfg.u64_or("run.seeds", 1)?;
        if seeds == 0 {
            return Err(ConfigError::new("run.seeds", "must be at least 1"));
        }
        let d0 = DetParams::desk_default();
        let det = if cfg.bool_or("deterministic.enabled", true)? {
            Some(DetParams {
                instance: InstanceParams::read(cfg, "deterministic", d0.instance)?,
                t_max: cfg.positive_usize_or("deterministic.t_max", d0.t_max)?,
                aid_cg: cfg.bool_or("deterministic.aid_cg", d0.aid_cg)?,
            })
        } else {
            None
        };
        let s0 = StochParams::desk_default();
        let stoch = if cfg.bool_or("stochastic.enabled", true)? {
            let ks = cfg.list_or("stochastic.ks", &s0.ks, "positive integers")?;
            if ks.contains(&0) {
                return Err(ConfigError::new("stochastic.ks", "budgets must be at least 1"));
            }
            Some(StochParams {
                instance: InstanceParams::read(cfg, "stochastic", s0.instance)?,
                ks,
                schedules: SchedSpec::read_all(cfg, "stochastic", (s0.schedules[0].b1, s0.schedules[0].b2), (s0.schedules[1].b1, s0.schedules[1].b2))?,
                sampling: super::read_sampling(cfg, "stochastic.sampling", "iid")?,
                sid: cfg.bool_or("stochastic.sid", s0.sid)?,
            })
        } else {
            None
        };
        if det.is_none() && stoch.is_none() {
            return Err(ConfigError::new("deterministic.enabled", "both sweeps are disabled"));
        }
        Ok(ElasticConfig { seeds, det, stoch })
    }
}

/// Runs both sweeps over seeds `0..seeds` on the current rayon pool.
pub fn run_elastic(cfg: &ElasticConfig) -> Result<ExpOutput> {
    let seeds: Vec<u64> = (0..cfg.seeds).collect();
    let mut out = ExpOutput::default();
    if let Some(det) = &cfg.det {
        let curves: Vec<DetCurve> = seeds
            .par_iter()
            .map(|&s| det_curve(det, s).with_context(|| format!("deterministic sweep, seed {s}")))
            .collect::<Result<_>>()?;
        let mut recs = Vec::new();
        let mut summary = String::from("seed,q,n_ref,tau\n");
        for c in &curves {
            recs.extend(c.records());
            let _ = writeln!(summary, "{},{},{},{}", c.seed, c.q, c.n_ref, c.tau.map_or("none".into(), |t| t.to_string()));
        }
        let mut methods = vec!["ITD-R".to_string(), "AID-FP".to_string()];
        if det.aid_cg {
            methods.push("AID-CG".into());
        }
        let taus: Vec<f64> = curves.iter().filter_map(|c| c.tau.map(|t| t as f64)).collect();
        let markers = if taus.is_empty() { vec![] } else { vec![(super::median(taus), "support identified".to_string())] };
        let svg = plot("elastic net: ITD vs AID (t = k)", "iteration t", median_series(&recs, &methods, |r| r.t as f64), markers);
        out.files.push(("deterministic.svg".into(), svg));
        out.files.push(("deterministic_summary.csv".into(), summary));
        out.records.extend(recs);
    }
    if let Some(st) = &cfg.stoch {
        let per_seed: Vec<Vec<RunRecord>> = seeds
            .par_iter()
            .map(|&s| stochastic_run(st, s).with_context(|| format!("stochastic sweep, seed {s}")))
            .collect::<Result<_>>()?;
        let recs: Vec<RunRecord> = per_seed.into_iter().flatten().collect();
        let mut methods: Vec<String> = Vec::new();
        for s in &st.schedules {
            methods.push(format!("NSID-{}", s.label()));
            if st.sid {
                methods.push(format!("SID-{}", s.label()));
            }
        }
        methods.push("AID-FP".into());
        let svg = plot("elastic net: stochastic estimators (k = J)", "epochs", median_series(&recs, &methods, |r| r.epoch), vec![]);
        out.files.push(("stochastic.svg".into(), svg));
        out.records.extend(recs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_det() -> DetParams {
        DetParams {
            instance: InstanceParams { n: 30, d: 10, informative: 3, correlated: false, c: 1.0, l1_frac: 0.2, l2: 1.0, data_seed: 0 },
            t_max: 15,
            aid_cg: true,
        }
    }

    #[test]
    fn curve_shapes() {
        let c = det_curve(&tiny_det(), 0).unwrap();
        assert_eq!(c.points.len(), 15);
        assert!(c.q > 0.0 && c.q < 1.0);
        assert_eq!(c.records().len(), 45);
        let first = c.points[0].aid_fp.value().unwrap();
        let last = c.points[14].aid_fp.value().unwrap();
        assert!(last < first);
    }

    #[test]
    fn stochastic_rows_per_cell() {
        let mut p = StochParams::desk_default();
        p.instance = InstanceParams { n: 40, d: 5, informative: 2, correlated: true, c: 1.0, l1_frac: 0.1, l2: 0.3, data_seed: 0 };
        p.ks = vec![5, 20];
        let rows = stochastic_run(&p, 3).unwrap();
        // per k: 2 schedules × (NSID, SID) + AID-FP
        assert_eq!(rows.len(), 2 * 5);
        for r in rows.iter().filter(|r| r.method.contains("SID")) {
            assert_eq!(r.j, r.k);
            let spec = p.instance.build(3).unwrap().spec;
            assert_eq!(r.epoch, epochs(r.k, r.j, spec.batch, spec.population));
        }
    }

    #[test]
    fn config_defaults_and_errors() {
        let c = Config::parse("").unwrap();
        let e = ElasticConfig::from_config(&c).unwrap();
        c.finish().unwrap();
        assert_eq!(e.det.unwrap(), DetParams::desk_default());
        assert_eq!(e.stoch.unwrap(), StochParams::desk_default());

        let c = Config::parse("[stochastic]\nks = 10, 0\n").unwrap();
        assert_eq!(ElasticConfig::from_config(&c).unwrap_err().path, "stochastic.ks");
        let c = Config::parse("[deterministic]\ninformative = 200\n").unwrap();
        assert_eq!(ElasticConfig::from_config(&c).unwrap_err().path, "deterministic.informative");
        let c = Config::parse("[stochastic]\nsampling = sometimes\n").unwrap();
        assert_eq!(ElasticConfig::from_config(&c).unwrap_err().path, "stochastic.sampling");
    }
}
