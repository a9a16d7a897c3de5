//! Property suites run by `fixdiff check` and by the acceptance target.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Result;
use fixdiff_core::deriv_det::{aid_fp_vjp, itd_vjp};
use fixdiff_core::deriv_stoch::{nsid, NsidConfig, SampleStreams, Sampling, ScheduleKind, StepSchedule};
use fixdiff_core::linalg::vecops;
use fixdiff_core::maps::{adjoint_defect, AffineMixture, IdentityMap, MapSelection, ZeroVariance};
use fixdiff_core::reference::{certify_pwl_bound, finite_diff_hypergrad, implicit_jacobian_oracle, random_smooth_instance, PwlMap, PwlReport};
use fixdiff_core::setvalued::properties::check_excess_properties;
use fixdiff_core::solver::fixed_point_solve;
use fixdiff_core::Rng;
use rayon::prelude::*;

use crate::experiments::elastic::{det_curve, stochastic_run, DetParams, InstanceParams, StochParams};
use crate::experiments::poisoning::{run_seeds, PoisonParams};
use crate::experiments::{median, SchedSpec};
use crate::record::{ErrorValue, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Oracle,
    Excess,
    PwlBound,
    Adjoint,
    Rates,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Oracle, Suite::Excess, Suite::PwlBound, Suite::Adjoint, Suite::Rates];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::Excess => "excess",
            Suite::PwlBound => "pwl-bound",
            Suite::Adjoint => "adjoint",
            Suite::Rates => "rates",
        }
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite '{s}' (expected oracle, excess, pwl-bound, adjoint or rates)"))
    }
}

/// Fault injection for mutation tests of the suites themselves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Hooks {
    /// Negates the AID-FP output inside the oracle suite.
    pub flip_aid_fp_sign: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckLine {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        CheckLine { name: name.into(), pass, detail: detail.into() }
    }

    fn within(name: &str, value: f64, limit: f64) -> Self {
        CheckLine::new(name, value <= limit, format!("{value:.3e} <= {limit:.0e}"))
    }

    fn runtime(start: Instant, limit_s: f64) -> Self {
        let s = start.elapsed().as_secs_f64();
        CheckLine::new("runtime", s <= limit_s, format!("{s:.1} s <= {limit_s} s"))
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Lines that failed to run at all are reported as failures, not errors.
fn guard(name: &str, r: Result<Vec<CheckLine>>) -> Vec<CheckLine> {
    r.unwrap_or_else(|e| vec![CheckLine::new(name, false, format!("error: {e:#}"))])
}

pub fn run_suite(suite: Suite, hooks: Hooks) -> Vec<CheckLine> {
    match suite {
        Suite::Oracle => guard("oracle", oracle(hooks)),
        Suite::Excess => excess(),
        Suite::PwlBound => guard("pwl-bound", pwl_bound()),
        Suite::Adjoint => guard("adjoint", adjoint()),
        Suite::Rates => {
            let mut out = Vec::new();
            for (name, r) in [
                ("curve-shape", curve_shape()),
                ("nsid-consistency", nsid_consistency()),
                ("nsid-rate", nsid_rate()),
                ("sid-bias", sid_bias()),
                ("finite-difference", finite_difference()),
                ("poisoning", poisoning()),
            ] {
                out.extend(guard(name, r).into_iter().map(|mut l| {
                    if !l.name.starts_with(name) {
                        l.name = format!("{name} {}", l.name);
                    }
                    l
                }));
            }
            out
        }
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    vecops::dist(a, b) / vecops::norm(a).max(vecops::norm(b)).max(f64::MIN_POSITIVE)
}

/// ITD, AID-FP and the dense implicit Jacobian agree on random smooth
/// contractions.
pub fn oracle(hooks: Hooks) -> Result<Vec<CheckLine>> {
    const T: usize = 400;
    let start = Instant::now();
    let mut rng = Rng::new(20_240_201);
    let mut worst = [0.0f64; 3];
    let instances = 100;
    for _ in 0..instances {
        let d = 1 + rng.below(10);
        let m = 1 + rng.below(5);
        let q = rng.uniform_range(0.05, 0.9);
        let map = random_smooth_instance(&mut rng, d, m, q)?;
        let lam = rng.gaussian(m);
        let oracle = implicit_jacobian_oracle(&map, &lam, T)?;
        let traj = fixed_point_solve(&map, &lam, &vec![0.0; d], T, true)?;
        for _ in 0..5 {
            let y = rng.gaussian(d);
            let itd = itd_vjp(&map, &traj, &lam, &y)?.value;
            let mut aid = aid_fp_vjp(&map, traj.last(), &lam, &y, T)?.value;
            if hooks.flip_aid_fp_sign {
                aid.iter_mut().for_each(|v| *v = -*v);
            }
            let or = oracle.matvec_t(&y);
            for (w, e) in worst.iter_mut().zip([rel(&itd, &or), rel(&aid, &or), rel(&itd, &aid)]) {
                *w = w.max(e);
            }
        }
    }
    Ok(vec![
        CheckLine::within(&format!("ITD vs oracle ({instances} instances x 5 probes)"), worst[0], 1e-8),
        CheckLine::within("AID-FP vs oracle", worst[1], 1e-8),
        CheckLine::within("ITD vs AID-FP", worst[2], 1e-8),
        CheckLine::runtime(start, 60.0),
    ])
}

pub fn excess() -> Vec<CheckLine> {
    let start = Instant::now();
    let mut rng = Rng::new(1001);
    let mut out: Vec<CheckLine> = check_excess_properties(&mut rng, 1000, 1e-9)
        .into_iter()
        .map(|r| {
            CheckLine::new(
                r.name,
                r.passed(),
                format!("{} failures in {} trials, worst lhs-rhs {:.2e}", r.failures, r.trials, r.worst_excess),
            )
        })
        .collect();
    out.push(CheckLine::runtime(start, 30.0));
    out
}

/// Exact AID-FP error and the ITD bound on hand-built piecewise-linear maps.
pub fn pwl_bound() -> Result<Vec<CheckLine>> {
    let mut e1 = vec![0.0; 5];
    e1[0] = 1.0;
    let cases: [(&str, PwlMap, Vec<f64>, Vec<f64>, usize); 2] = [
        ("scalar relu", PwlMap::scalar_relu(), vec![1.0], vec![1.0], 60),
        ("diag5 soft-threshold", PwlMap::diag5(0.8, 0.1), vec![1.0, 0.5, 0.05, -0.8, 0.02], e1, 200),
    ];
    let mut out = Vec::new();
    for (name, map, lam, y, t) in cases {
        match certify_pwl_bound(&map, &lam, &y, t, 1..=30)? {
            PwlReport::NotApplicable(why) => out.push(CheckLine::new(name, false, format!("not certified: {why}"))),
            PwlReport::Certified(c) => {
                let aid_ok = c.aid.iter().all(|r| r.pass) && c.aid_tightness() <= 1e-9;
                out.push(CheckLine::new(
                    format!("{name} AID-FP equals bound, k = 1..30"),
                    aid_ok,
                    format!("max |error - bound| {:.2e}, tau = {:?}", c.aid_tightness(), c.constants.tau),
                ));
                let worst = c.itd.iter().map(|r| r.error - r.bound).fold(f64::NEG_INFINITY, f64::max);
                out.push(CheckLine::new(
                    format!("{name} ITD within bound, t = 1..30"),
                    c.itd.iter().all(|r| r.pass),
                    format!("max error - bound {worst:.2e} (R = {:.3}, M = {:.3})", c.r, c.m),
                ));
            }
        }
    }
    Ok(out)
}

/// Maps exercised by the adjoint suite: elastic-net and poisoning steps,
/// a smooth random contraction and the piecewise-linear test maps.
fn adjoint_maps(rng: &mut Rng) -> Result<Vec<(String, Arc<dyn MapSelection>, Vec<f64>)>> {
    let el = InstanceParams { n: 30, d: 8, informative: 3, correlated: true, c: 1.0, l1_frac: 0.1, l2: 0.5, data_seed: 3 }.build(0)?;
    let pp = PoisonParams { clean: 30, corrupt: 6, val: 20, p: 4, ..PoisonParams::default() };
    let ps = pp.build_spec()?;
    let (gamma, _) = pp.gamma(0);
    let smooth: Arc<dyn MapSelection> = Arc::new(random_smooth_instance(rng, 6, 3, 0.8)?);
    let mut out: Vec<(String, Arc<dyn MapSelection>, Vec<f64>)> = vec![
        ("elastic-net T".into(), el.spec.t.clone(), el.lam.clone()),
        ("elastic-net G".into(), el.spec.g.clone(), el.lam.clone()),
        ("elastic-net phi".into(), el.spec.phi.clone(), el.lam.clone()),
        ("poisoning T".into(), ps.t.clone(), gamma.clone()),
        ("poisoning phi".into(), ps.phi.clone(), gamma),
        ("tanh contraction".into(), smooth, rng.gaussian(3)),
        ("pwl scalar".into(), Arc::new(PwlMap::scalar_relu()), vec![1.0]),
        ("pwl diag5".into(), Arc::new(PwlMap::diag5(0.8, 0.1)), rng.gaussian(5)),
    ];
    let mix: Arc<dyn MapSelection> = Arc::new(AffineMixture::scalar(&[0.2, 0.5, 0.7]).mean_map());
    out.push(("affine mixture mean".into(), mix, vec![0.3]));
    Ok(out)
}

/// `⟨v, J u̇⟩ = ⟨Jᵀv, u̇⟩` for the state and parameter blocks.
pub fn adjoint() -> Result<Vec<CheckLine>> {
    let mut rng = Rng::new(77);
    let maps = adjoint_maps(&mut rng)?;
    let mut out = Vec::new();
    for (name, map, lam) in maps {
        let (d, m) = (map.state_dim(), map.param_dim());
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let u = rng.gaussian(d);
            let v = rng.gaussian(d);
            let du = rng.gaussian(d);
            let dl = rng.gaussian(m);
            let (a, b) = adjoint_defect(&*map, &u, &lam, &v, &du, &dl);
            worst = worst.max(a).max(b);
        }
        out.push(CheckLine::within(&format!("{name} (1000 probes)"), worst, 1e-12));
    }
    Ok(out)
}

/// Least-squares slope of `ln e` against `t`.
fn log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1.ln() - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Relative errors below this are treated as the numerical floor.
pub const FLOOR: f64 = 1e-10;

pub fn shape_settings() -> [(&'static str, DetParams); 2] {
    let base = DetParams::desk_default();
    let mut weak = base.clone();
    weak.instance.l1_frac = 0.1;
    weak.instance.l2 = 1.0;
    [("aggressive", base), ("weak", weak)]
}

/// Log-linear slopes, AID-FP dominance and the post-support gap on the
/// elastic-net curves, for an aggressive and a weak `λ`.
pub fn curve_shape() -> Result<Vec<CheckLine>> {
    let mut out = Vec::new();
    for (label, mut p) in shape_settings() {
        let start = Instant::now();
        let n_ref = p.instance.build(0)?.n_ref;
        p.t_max = 3 * n_ref / 2;
        p.aid_cg = false;
        let c = det_curve(&p, 0)?;
        let relerr = |e: ErrorValue, nr: f64| e.value().map_or(f64::INFINITY, |v| v / nr);
        let itd: Vec<(f64, f64)> = c.points.iter().map(|x| (x.t as f64, relerr(x.itd, x.ref_norm))).collect();
        let aid: Vec<(f64, f64)> = c.points.iter().map(|x| (x.t as f64, relerr(x.aid_fp, x.ref_norm))).collect();
        for (m, curve) in [("ITD", &itd), ("AID-FP", &aid)] {
            let window: Vec<(f64, f64)> = curve.iter().copied().filter(|p| p.1 >= FLOOR && p.1 <= 10.0 * FLOOR).collect();
            let ratio = log_slope(&window).map(|s| s / c.q.ln());
            out.push(CheckLine::new(
                format!("{label} {m} slope"),
                ratio.is_some_and(|r| (0.7..=1.3).contains(&r)),
                format!("slope/log q = {} over {} points in the last decade (q = {:.4})", ratio.map_or("n/a".into(), |r| format!("{r:.3}")), window.len(), c.q),
            ));
        }
        let viol: Vec<usize> = itd
            .iter()
            .zip(&aid)
            .filter(|(i, a)| i.0 >= 3.0 && i.1 > FLOOR && a.1 > i.1)
            .map(|(i, _)| i.0 as usize)
            .collect();
        out.push(CheckLine::new(
            format!("{label} AID-FP <= ITD for t >= 3"),
            viol.is_empty(),
            if viol.is_empty() { "no violation above the floor".into() } else { format!("violated at t = {:?}", &viol[..viol.len().min(5)]) },
        ));
        match c.tau {
            None => out.push(CheckLine::new(format!("{label} support identification"), false, "no tau detected")),
            Some(tau) => {
                let at = tau + 20;
                let r = (at >= 1 && at <= itd.len()).then(|| itd[at - 1].1 / aid[at - 1].1);
                out.push(CheckLine::new(
                    format!("{label} ITD/AID-FP at tau+20"),
                    r.is_some_and(|r| r >= 3.0),
                    format!("tau = {tau}, ratio {}", r.map_or("n/a".into(), |r| format!("{r:.2}"))),
                ));
            }
        }
        out.push(CheckLine::runtime(start, 120.0));
    }
    Ok(out)
}

/// Zero-variance sampler, `η = 1`, `J = 1`: NSID is AID-FP.
pub fn nsid_consistency() -> Result<Vec<CheckLine>> {
    let inst = InstanceParams { n: 60, d: 12, informative: 4, correlated: true, c: 1.0, l1_frac: 0.1, l2: 0.5, data_seed: 11 }.build(0)?;
    let spec = &inst.spec;
    let zv = ZeroVariance::new(spec.t.clone(), spec.population);
    let w = inst.reference_state()?;
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    for k in [1, 5, 40] {
        let y = rng.gaussian(spec.state_dim());
        let cfg = NsidConfig { k, j: 1, sched: StepSchedule::constant(1.0)?, streams: SampleStreams::new(k as u64, 1, Sampling::Iid), q_hat: None };
        let a = nsid(&zv, &*spec.g, &w, &inst.lam, &y, &cfg)?.value;
        let b = aid_fp_vjp(&*spec.phi, &w, &inst.lam, &y, k)?.value;
        worst = worst.max(vecops::dist(&a, &b) / vecops::norm(&b).max(1.0));
    }
    Ok(vec![CheckLine::within("NSID vs AID-FP (zero variance, eta = 1, J = 1)", worst, 1e-12)])
}

fn mse_line(name: &str, m_lo: f64, m_hi: f64, k_lo: usize, k_hi: usize) -> Vec<CheckLine> {
    let drop = m_lo / m_hi;
    let kratio = (k_hi as f64 * m_hi) / (k_lo as f64 * m_lo);
    vec![
        CheckLine::new(format!("{name} MSE drop k={k_lo}->{k_hi}"), drop >= 5.0, format!("factor {drop:.2} >= 5")),
        CheckLine::new(format!("{name} k*MSE ratio"), (0.3..=3.0).contains(&kratio), format!("{kratio:.2} in [0.3, 3]")),
    ]
}

/// Median squared error over seeds 0..9 at `k = J ∈ {10², 10³}` with a
/// harmonic schedule.
pub fn nsid_rate() -> Result<Vec<CheckLine>> {
    let start = Instant::now();
    let ks = [100usize, 1000];
    let seeds: Vec<u64> = (0..10).collect();

    let that = AffineMixture::scalar(&[0.4, 0.6]);
    let id = IdentityMap { dim: 1, params: 1 };
    let sched = StepSchedule::theoretical(0.6, 0.0)?;
    let mut scalar = Vec::new();
    for &k in &ks {
        let sq: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let cfg = NsidConfig { k, j: k, sched, streams: SampleStreams::new(s, 1, Sampling::Iid), q_hat: None };
                nsid(&that, &id, &[2.0], &[1.0], &[1.0], &cfg).map(|e| (e.value[0] - 2.0).powi(2))
            })
            .collect::<fixdiff_core::Result<_>>()?;
        scalar.push(median(sq));
    }
    let mut out = mse_line("scalar model", scalar[0], scalar[1], ks[0], ks[1]);

    let mut p = StochParams::desk_default();
    p.ks = ks.to_vec();
    p.schedules.retain(|s| s.kind == ScheduleKind::Harmonic);
    p.sid = false;
    let rows: Vec<RunRecord> = seeds.par_iter().map(|&s| stochastic_run(&p, s)).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    let mse = |k: usize| median(rows.iter().filter(|r| r.method == "NSID-dec" && r.k == k).map(|r| r.error.or_inf().powi(2)).collect());
    out.extend(mse_line("elastic net", mse(ks[0]), mse(ks[1]), ks[0], ks[1]));
    out.push(CheckLine::runtime(start, 300.0));
    Ok(out)
}

/// Instance of the SID bias check: the desk instance with a larger `λ₁`.
pub fn sid_bias_params() -> StochParams {
    let mut p = StochParams::desk_default();
    p.instance.l1_frac = 0.3;
    p.instance.l2 = 0.1;
    p.ks = vec![1000];
    p
}

/// SID's terminal error is not below NSID's at equal epochs.
pub fn sid_bias() -> Result<Vec<CheckLine>> {
    let p = sid_bias_params();
    let k = *p.ks.last().expect("one budget");
    let rows: Vec<RunRecord> = (0..10u64).into_par_iter().map(|s| stochastic_run(&p, s)).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    let med = |m: &str| median(rows.iter().filter(|r| r.method == m && r.k == k).map(|r| r.error.or_inf()).collect());
    Ok(p.schedules
        .iter()
        .map(|s: &SchedSpec| {
            let (ns, si) = (med(&format!("NSID-{}", s.label())), med(&format!("SID-{}", s.label())));
            CheckLine::new(format!("SID-{0} >= NSID-{0} at k = J = {k}", s.label()), si >= ns, format!("median {si:.3e} vs {ns:.3e}"))
        })
        .collect())
}

/// BAID-FP at `t = k = 500` against central differences of `f_t`.
pub fn finite_difference() -> Result<Vec<CheckLine>> {
    const T: usize = 500;
    let ip = InstanceParams { n: 80, d: 15, informative: 5, correlated: true, c: 1.0, l1_frac: 0.1, l2: 0.5, data_seed: 21 };
    let inst = ip.build(0)?;
    let spec = &inst.spec;
    let d = spec.state_dim();
    let f = |l: &[f64]| -> fixdiff_core::Result<f64> {
        let w = fixed_point_solve(&*spec.phi, l, &vec![0.0; d], T, false)?;
        Ok(spec.upper.eval(w.last(), l))
    };
    let w_t = fixed_point_solve(&*spec.phi, &inst.lam, &vec![0.0; d], T, false)?;
    let g = fixdiff_core::bilevel::baid_fp_hypergrad(&*spec.upper, &*spec.phi, w_t.last(), &inst.lam, T)?;
    let fd = finite_diff_hypergrad(f, &inst.lam, 1e-6)?;
    let e = vecops::dist(&g, &fd) / vecops::norm(&fd).max(f64::MIN_POSITIVE);
    Ok(vec![CheckLine::new(
        "BAID-FP vs central differences",
        e <= 1e-4,
        format!("relative error {e:.3e} <= 1e-4 at lambda = [{:.4}, {:.4}]", inst.lam[0], inst.lam[1]),
    )])
}

/// NSID-Bilevel accuracy and SID failure on the desk poisoning instance.
pub fn poisoning() -> Result<Vec<CheckLine>> {
    let start = Instant::now();
    let mut p = PoisonParams::default();
    p.ks = vec![2000];
    let k = 2000;
    let runs = run_seeds(&p, &(0..10).collect::<Vec<_>>())?;
    let rel = |m: &str| -> Vec<ErrorValue> { runs.iter().filter_map(|r| r.relative_error(m, k)).collect() };
    let mut out = Vec::new();
    for s in &p.schedules {
        let ns = median(rel(&format!("NSID-{}", s.label())).iter().map(ErrorValue::or_inf).collect());
        if s.kind == ScheduleKind::Harmonic {
            out.push(CheckLine::new(
                format!("NSID-{} median relative error (k = {k}, J = {}, J1 = {})", s.label(), p.j_for(k), p.j1),
                ns <= 0.1,
                format!("{ns:.3e} <= 0.1"),
            ));
        }
        let sid = rel(&format!("SID-{}", s.label()));
        let div = sid.iter().filter(|e| **e == ErrorValue::Div).count();
        let sm = median(sid.iter().map(ErrorValue::or_inf).collect());
        out.push(CheckLine::new(
            format!("SID-{} diverges or plateaus above NSID", s.label()),
            div >= 1 || sm > ns,
            format!("{div}/10 diverged, median {sm:.3e} vs NSID {ns:.3e}"),
        ));
    }
    out.push(CheckLine::runtime(start, 300.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn slope_of_geometric_sequence() {
        let pts: Vec<(f64, f64)> = (1..20).map(|t| (t as f64, 0.7f64.powi(t))).collect();
        assert!((log_slope(&pts).unwrap() - 0.7f64.ln()).abs() < 1e-12);
        assert!(log_slope(&pts[..1]).is_none());
    }

    #[test]
    fn line_format() {
        let l = CheckLine::within("x", 1e-9, 1e-8);
        assert!(l.pass);
        assert!(l.to_string().starts_with("PASS x:"));
        assert!(!CheckLine::within("y", 1.0, 1e-8).pass);
    }

    #[test]
    fn pwl_suite_passes() {
        assert!(pwl_bound().unwrap().iter().all(|l| l.pass));
    }

    #[test]
    fn consistency_passes() {
        let lines = nsid_consistency().unwrap();
        assert!(lines.iter().all(|l| l.pass), "{lines:?}");
    }
}
