//! Deterministic derivative estimators for `w_t(λ)`: iterative
//! differentiation (reverse and forward) and approximate implicit
//! differentiation by fixed-point iteration or conjugate gradient.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{check_len, Error, Result};
use crate::linalg::{vecops, Mat};
use crate::maps::MapSelection;
use crate::solver::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    ItdReverse,
    ItdForward,
    AidFp,
    AidCg,
    Nsid,
    Sid,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::ItdReverse => "ITD-R",
            Method::ItdForward => "ITD-F",
            Method::AidFp => "AID-FP",
            Method::AidCg => "AID-CG",
            Method::Nsid => "NSID",
            Method::Sid => "SID",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ITD-R" => Method::ItdReverse,
            "ITD-F" => Method::ItdForward,
            "AID-FP" => Method::AidFp,
            "AID-CG" => Method::AidCg,
            "NSID" => Method::Nsid,
            "SID" => Method::Sid,
            _ => return Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        })
    }
}

/// One derivative estimate plus the budget that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivEstimate {
    pub value: Vec<f64>,
    pub method: Method,
    pub t: usize,
    pub k: usize,
    pub j: usize,
    pub seed: Option<u64>,
    pub wall_ms: f64,
    /// Set on outputs of the reference protocol.
    pub reference: bool,
}

impl DerivEstimate {
    pub(crate) fn new(value: Vec<f64>, method: Method, t: usize, k: usize, j: usize, start: Instant) -> Self {
        DerivEstimate {
            value,
            method,
            t,
            k,
            j,
            seed: None,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            reference: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// Reverse-mode ITD: `D_{w_t}(λ)ᵀ y` by a backward sweep over the recorded
/// trajectory.
pub fn itd_vjp(map: &dyn MapSelection, traj: &Trajectory, lam: &[f64], y: &[f64]) -> Result<DerivEstimate> {
    let start = Instant::now();
    let its = traj.iterates()?;
    check_len("cotangent", y.len(), map.state_dim())?;
    let mut alpha = y.to_vec();
    let mut g = vec![0.0; map.param_dim()];
    let t = traj.steps();
    for w in its[..t].iter().rev() {
        let (s, p) = map.vjp(w, lam, &alpha);
        vecops::axpy(&mut g, 1.0, &p);
        alpha = s;
    }
    Ok(DerivEstimate::new(g, Method::ItdReverse, t, 0, 0, start))
}

/// Forward-mode ITD: `D_{w_t}(λ) λ̇`.
pub fn itd_jvp(map: &dyn MapSelection, traj: &Trajectory, lam: &[f64], lam_dot: &[f64]) -> Result<DerivEstimate> {
    let start = Instant::now();
    let its = traj.iterates()?;
    check_len("tangent", lam_dot.len(), map.param_dim())?;
    let t = traj.steps();
    let mut wd = vec![0.0; map.state_dim()];
    for w in &its[..t] {
        wd = map.jvp(w, lam, &wd, lam_dot);
    }
    Ok(DerivEstimate::new(wd, Method::ItdForward, t, 0, 0, start))
}

/// Runs `v ← ∂₁Φ(w,λ)ᵀ v + y` for `k` steps from `v = 0`.
pub fn aid_fp_adjoint(map: &dyn MapSelection, w: &[f64], lam: &[f64], y: &[f64], k: usize) -> Vec<f64> {
    let mut v = vec![0.0; y.len()];
    for _ in 0..k {
        v = map.vjp_state(w, lam, &v);
        vecops::axpy(&mut v, 1.0, y);
    }
    v
}

/// AID-FP: `∂₂Φ(w_t,λ)ᵀ v_k` with `v_k` from [`aid_fp_adjoint`].
pub fn aid_fp_vjp(map: &dyn MapSelection, w_t: &[f64], lam: &[f64], y: &[f64], k: usize) -> Result<DerivEstimate> {
    let start = Instant::now();
    check_len("state", w_t.len(), map.state_dim())?;
    check_len("parameter", lam.len(), map.param_dim())?;
    check_len("cotangent", y.len(), map.state_dim())?;
    let value = if k == 0 {
        vec![0.0; map.param_dim()]
    } else {
        map.vjp_param(w_t, lam, &aid_fp_adjoint(map, w_t, lam, y, k))
    };
    if !vecops::all_finite(&value) {
        return Err(Error::Divergence { iteration: k });
    }
    Ok(DerivEstimate::new(value, Method::AidFp, 0, k, 0, start))
}

/// Forward AID-FP Jacobian `Σ_{j<k} A₁ʲ A₂` (d×m) at `w`, one JVP sweep per
/// parameter. `Mᵀy` equals [`aid_fp_vjp`] up to rounding.
pub fn aid_fp_jacobian(map: &dyn MapSelection, w: &[f64], lam: &[f64], k: usize) -> Mat {
    let (d, m) = (map.state_dim(), map.param_dim());
    let mut out = Mat::zeros(d, m);
    let zero = vec![0.0; d];
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        let mut col = vec![0.0; d];
        for _ in 0..k {
            col = map.jvp(w, lam, &col, &e);
        }
        if k == 0 {
            col = zero.clone();
        }
        out.set_col(j, &col);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgMode {
    /// Plain CG on `(I − ∂₁Φᵀ)v = y`; the operator must be symmetric.
    Direct,
    /// CG on `(I − ∂₁Φ)(I − ∂₁Φᵀ)v = (I − ∂₁Φ)y`.
    NormalEquations,
}

/// AID-CG: `k` conjugate-gradient iterations on the adjoint system, then
/// `∂₂Φᵀv`. Stops early once the residual is exactly zero.
pub fn aid_cg_vjp(
    map: &dyn MapSelection,
    w_t: &[f64],
    lam: &[f64],
    y: &[f64],
    k: usize,
    mode: CgMode,
) -> Result<DerivEstimate> {
    let start = Instant::now();
    check_len("state", w_t.len(), map.state_dim())?;
    check_len("cotangent", y.len(), map.state_dim())?;
    let d = map.state_dim();
    let zero_m = vec![0.0; map.param_dim()];
    // A v = v − ∂₁Φᵀ v,  Aᵀ v = v − ∂₁Φ v
    let a = |v: &[f64]| vecops::sub(v, &map.vjp_state(w_t, lam, v));
    let at = |v: &[f64]| vecops::sub(v, &map.jvp(w_t, lam, v, &zero_m));
    let op = |v: &[f64]| match mode {
        CgMode::Direct => a(v),
        CgMode::NormalEquations => at(&a(v)),
    };
    let b = match mode {
        CgMode::Direct => y.to_vec(),
        CgMode::NormalEquations => at(y),
    };
    let mut v = vec![0.0; d];
    let mut r = b;
    let mut p = r.clone();
    let mut rr = vecops::dot(&r, &r);
    for i in 1..=k {
        if rr == 0.0 {
            break;
        }
        let ap = op(&p);
        let curv = vecops::dot(&p, &ap);
        if !curv.is_finite() {
            return Err(Error::Divergence { iteration: i });
        }
        if curv <= 0.0 {
            return Err(Error::Breakdown { iteration: i });
        }
        let alpha = rr / curv;
        vecops::axpy(&mut v, alpha, &p);
        vecops::axpy(&mut r, -alpha, &ap);
        let rr_new = vecops::dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        p.iter_mut().zip(&r).for_each(|(p, r)| *p = r + beta * *p);
        if !vecops::all_finite(&v) {
            return Err(Error::Divergence { iteration: i });
        }
    }
    let value = map.vjp_param(w_t, lam, &v);
    if !vecops::all_finite(&value) {
        return Err(Error::Divergence { iteration: k });
    }
    Ok(DerivEstimate::new(value, Method::AidCg, 0, k, 0, start))
}

/// Euclidean distance between two estimates.
pub fn estimate_error(est: &DerivEstimate, reference: &DerivEstimate) -> Result<f64> {
    check_len("estimate", est.value.len(), reference.value.len())?;
    Ok(vecops::dist(&est.value, &reference.value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::solve_dense;
    use crate::maps::{AffineMap, Compose, Relu};
    use crate::rng::Rng;
    use crate::solver::fixed_point_solve;
    use std::sync::Arc;

    fn scalar() -> AffineMap {
        AffineMap::scalar(0.5)
    }

    #[test]
    fn itd_examples() {
        let phi = scalar();
        let tr = fixed_point_solve(&phi, &[1.0], &[0.0], 3, true).unwrap();
        assert_eq!(itd_vjp(&phi, &tr, &[1.0], &[1.0]).unwrap().value, vec![1.75]);
        assert_eq!(itd_jvp(&phi, &tr, &[1.0], &[1.0]).unwrap().value, vec![1.75]);
        assert_eq!(itd_jvp(&phi, &tr, &[1.0], &[0.0]).unwrap().value, vec![0.0]);
        let tr0 = fixed_point_solve(&phi, &[1.0], &[0.0], 0, true).unwrap();
        assert_eq!(itd_vjp(&phi, &tr0, &[1.0], &[1.0]).unwrap().value, vec![0.0]);
        let unrec = fixed_point_solve(&phi, &[1.0], &[0.0], 3, false).unwrap();
        assert_eq!(itd_vjp(&phi, &unrec, &[1.0], &[1.0]), Err(Error::TrajectoryNotRecorded));
    }

    #[test]
    fn itd_relu_inactive_kink() {
        let relu_phi = Compose::new(Arc::new(scalar()), Arc::new(Relu { dim: 1, params: 1 })).unwrap();
        // Φ(w, λ) = 0.5·relu(w) + λ
        let tr = fixed_point_solve(&relu_phi, &[1.0], &[1.0], 3, true).unwrap();
        let smooth = fixed_point_solve(&scalar(), &[1.0], &[1.0], 3, true).unwrap();
        assert_eq!(tr.last(), smooth.last());
        assert_eq!(
            itd_vjp(&relu_phi, &tr, &[1.0], &[1.0]).unwrap().value,
            itd_vjp(&scalar(), &smooth, &[1.0], &[1.0]).unwrap().value
        );
    }

    fn random_contraction(rng: &mut Rng, d: usize, m: usize, q: f64) -> AffineMap {
        let a = Mat::from_vec(d, d, rng.gaussian(d * d)).unwrap();
        let s = crate::linalg::spectral_norm(&a, 1e-13).unwrap();
        AffineMap::new(
            a.scale(q / s),
            Mat::from_vec(d, m, rng.gaussian(d * m)).unwrap(),
            rng.gaussian(d),
        )
        .unwrap()
    }

    #[test]
    fn itd_duality() {
        let mut rng = Rng::new(11);
        let phi = crate::maps::TanhMap::new(
            Mat::from_vec(4, 4, rng.gaussian(16)).unwrap().scale(0.2),
            Mat::from_vec(4, 3, rng.gaussian(12)).unwrap(),
            rng.gaussian(4),
        )
        .unwrap();
        let lam = rng.gaussian(3);
        let tr = fixed_point_solve(&phi, &lam, &rng.gaussian(4), 25, true).unwrap();
        for _ in 0..20 {
            let y = rng.gaussian(4);
            let ld = rng.gaussian(3);
            let lhs = vecops::dot(&y, &itd_jvp(&phi, &tr, &lam, &ld).unwrap().value);
            let rhs = vecops::dot(&itd_vjp(&phi, &tr, &lam, &y).unwrap().value, &ld);
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn aid_fp_examples() {
        let phi = scalar();
        let e = aid_fp_vjp(&phi, &[2.0], &[1.0], &[1.0], 3).unwrap();
        assert_eq!(e.value, vec![1.75]);
        assert_eq!((e.k, e.t, e.j), (3, 0, 0));
        assert_eq!(aid_fp_vjp(&phi, &[2.0], &[1.0], &[1.0], 0).unwrap().value, vec![0.0]);
        let e = aid_fp_vjp(&phi, &[2.0], &[1.0], &[1.0], 200).unwrap();
        assert!((e.value[0] - 2.0).abs() <= 1e-9);
    }

    #[test]
    fn aid_fp_residual_contracts() {
        let mut rng = Rng::new(12);
        let q = 0.7;
        let phi = random_contraction(&mut rng, 6, 2, q);
        let w = rng.gaussian(6);
        let y = rng.gaussian(6);
        let at = phi.state_matrix().transpose();
        let sys = Mat::identity(6).sub(&at).unwrap();
        let vstar = solve_dense(&sys, &y).unwrap();
        let mut prev = vecops::norm(&vstar);
        for k in 1..40 {
            let v = aid_fp_adjoint(&phi, &w, &[0.0, 0.0], &y, k);
            let e = vecops::dist(&v, &vstar);
            assert!(e <= q * prev + 1e-12);
            prev = e;
        }
    }

    #[test]
    fn aid_fp_jacobian_matches_vjp() {
        let mut rng = Rng::new(13);
        let phi = random_contraction(&mut rng, 5, 3, 0.6);
        let w = rng.gaussian(5);
        let lam = rng.gaussian(3);
        let m = aid_fp_jacobian(&phi, &w, &lam, 17);
        let y = rng.gaussian(5);
        let a = m.matvec_t(&y);
        let b = aid_fp_vjp(&phi, &w, &lam, &y, 17).unwrap().value;
        assert!(vecops::dist(&a, &b) < 1e-12);
    }

    #[test]
    fn aid_cg_examples() {
        let phi = scalar();
        let e = aid_cg_vjp(&phi, &[2.0], &[1.0], &[1.0], 1, CgMode::Direct).unwrap();
        assert!((e.value[0] - 2.0).abs() < 1e-15);
        let e = aid_cg_vjp(&phi, &[2.0], &[1.0], &[1.0], 1, CgMode::NormalEquations).unwrap();
        assert!((e.value[0] - 2.0).abs() < 1e-15);
        let e = aid_cg_vjp(&phi, &[2.0], &[1.0], &[0.0], 3, CgMode::NormalEquations).unwrap();
        assert_eq!(e.value, vec![0.0]);
    }

    #[test]
    fn aid_cg_symmetric_five() {
        let mut rng = Rng::new(14);
        let g = Mat::from_vec(5, 5, rng.gaussian(25)).unwrap();
        let s = g.add(&g.transpose()).unwrap();
        let n = crate::linalg::spectral_norm(&s, 1e-13).unwrap();
        let a = s.scale(0.8 / n);
        let phi = AffineMap::new(a.clone(), Mat::identity(5), vec![0.0; 5]).unwrap();
        let y = rng.gaussian(5);
        let w = vec![0.0; 5];
        let oracle = solve_dense(&Mat::identity(5).sub(&a).unwrap(), &y).unwrap();
        let e = aid_cg_vjp(&phi, &w, &[0.0; 5], &y, 5, CgMode::Direct).unwrap();
        assert!(vecops::dist(&e.value, &oracle) < 1e-8);
        let e = aid_cg_vjp(&phi, &w, &[0.0; 5], &y, 5, CgMode::NormalEquations).unwrap();
        assert!(vecops::dist(&e.value, &oracle) < 1e-8);
    }

    #[test]
    fn aid_cg_breakdown_on_indefinite() {
        // I − A with A = 2 has negative curvature
        let phi = AffineMap::scalar(2.0);
        let r = aid_cg_vjp(&phi, &[0.0], &[0.0], &[1.0], 2, CgMode::Direct);
        assert_eq!(r, Err(Error::Breakdown { iteration: 1 }));
    }

    #[test]
    fn error_examples() {
        let phi = scalar();
        let a = aid_fp_vjp(&phi, &[2.0], &[1.0], &[1.0], 3).unwrap();
        let r = aid_fp_vjp(&phi, &[2.0], &[1.0], &[1.0], 200).unwrap();
        assert_eq!(estimate_error(&a, &a).unwrap(), 0.0);
        assert!((estimate_error(&a, &r).unwrap() - 0.25).abs() < 1e-9);
        assert_eq!(estimate_error(&a, &r).unwrap(), estimate_error(&r, &a).unwrap());
        let mut bad = a.clone();
        bad.value.push(0.0);
        assert!(estimate_error(&bad, &r).is_err());
    }

    #[test]
    fn method_labels_round_trip() {
        for m in [Method::ItdReverse, Method::ItdForward, Method::AidFp, Method::AidCg, Method::Nsid, Method::Sid] {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
    }
}
