//! Ground truth: dense implicit Jacobians, the high-accuracy reference
//! protocol, finite differences and exact bound checks on piecewise-linear
//! maps.

use std::time::Instant;

use crate::deriv_det::{aid_fp_vjp, itd_vjp, DerivEstimate};
use crate::error::{check_len, Error, Result};
use crate::linalg::{spectral_norm, vecops, Lu, Mat};
use crate::maps::{soft_threshold, MapSelection, TanhMap};
use crate::rng::Rng;
use crate::solver::{fixed_point_solve, support_identification, ZERO_THRESHOLD};

/// Largest state or parameter dimension the dense oracle accepts.
pub const DENSE_LIMIT: usize = 200;
/// Target accuracy of the reference protocol.
pub const REFERENCE_TOL: f64 = 1e-10;
/// Cap on `t_ref` and `k_ref`.
pub const PROTOCOL_CAP: usize = 100_000;

/// Constants entering the deterministic rate bounds at one `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateConstants {
    pub q: f64,
    pub kappa: f64,
    /// `‖∂₂Φ(w(λ),λ)‖` for the reference selection.
    pub b_hat: f64,
    /// Lipschitz constant of the pieces. `Some(0)` for piecewise-linear maps.
    pub l: Option<f64>,
    pub tau: Option<usize>,
}

impl RateConstants {
    pub fn new(q: f64, b_hat: f64, l: Option<f64>, tau: Option<usize>) -> Result<Self> {
        if !(0.0..1.0).contains(&q) {
            return Err(Error::InvalidArgument(format!("contraction constant {q} not in [0, 1)")));
        }
        if !(b_hat >= 0.0) {
            return Err(Error::InvalidArgument(format!("B = {b_hat} must be nonnegative")));
        }
        Ok(RateConstants { q, kappa: 1.0 / (1.0 - q), b_hat, l, tau })
    }

    /// `B q^k / (1−q)`, the smooth part of both bounds.
    pub fn leading_term(&self, k: usize) -> f64 {
        self.b_hat * self.q.powi(k as i32) * self.kappa
    }
}

/// `t_ref = k_ref = ⌈ln(1e10)/ln(1/q)⌉`, capped at 1e5.
pub fn protocol_iterations(q: f64) -> usize {
    iterations_for(q, REFERENCE_TOL)
}

/// Smallest `n` with `q^n ≤ tol`, capped.
pub fn iterations_for(q: f64, tol: f64) -> usize {
    if q <= 0.0 {
        return 1;
    }
    if q >= 1.0 || !q.is_finite() {
        return PROTOCOL_CAP;
    }
    let n = (tol.ln() / q.ln()).ceil();
    (n.max(1.0) as usize).min(PROTOCOL_CAP)
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = 1.0;
    e
}

/// `∂₁Φ(w,λ)` materialized column by column.
pub fn state_jacobian(map: &dyn MapSelection, w: &[f64], lam: &[f64]) -> Mat {
    let (d, m) = (map.state_dim(), map.param_dim());
    let zl = vec![0.0; m];
    let mut out = Mat::zeros(d, d);
    for j in 0..d {
        out.set_col(j, &map.jvp(w, lam, &unit(d, j), &zl));
    }
    out
}

/// `∂₂Φ(w,λ)` materialized column by column.
pub fn param_jacobian(map: &dyn MapSelection, w: &[f64], lam: &[f64]) -> Mat {
    let (d, m) = (map.state_dim(), map.param_dim());
    let zw = vec![0.0; d];
    let mut out = Mat::zeros(d, m);
    for j in 0..m {
        out.set_col(j, &map.jvp(w, lam, &zw, &unit(m, j)));
    }
    out
}

fn check_dense(map: &dyn MapSelection) -> Result<()> {
    let (d, m) = (map.state_dim(), map.param_dim());
    if d > DENSE_LIMIT || m > DENSE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "dense oracle limited to {DENSE_LIMIT}x{DENSE_LIMIT}, got d={d}, m={m}"
        )));
    }
    Ok(())
}

/// `(I − A₁)⁻¹ A₂` at `w_{t_ref}` started from zero.
pub fn implicit_jacobian_oracle(map: &dyn MapSelection, lam: &[f64], t_ref: usize) -> Result<Mat> {
    check_dense(map)?;
    let d = map.state_dim();
    let traj = fixed_point_solve(map, lam, &vec![0.0; d], t_ref, false)?;
    implicit_jacobian_at(map, traj.last(), lam)
}

/// Same as [`implicit_jacobian_oracle`] at a given state.
pub fn implicit_jacobian_at(map: &dyn MapSelection, w: &[f64], lam: &[f64]) -> Result<Mat> {
    check_dense(map)?;
    let (d, m) = (map.state_dim(), map.param_dim());
    let a1 = state_jacobian(map, w, lam);
    let a2 = param_jacobian(map, w, lam);
    let lhs = Mat::identity(d).sub(&a1)?;
    let lu = Lu::factor(&lhs)?;
    let mut out = Mat::zeros(d, m);
    for j in 0..m {
        out.set_col(j, &lu.solve(&a2.col(j))?);
    }
    if !out.is_finite() {
        return Err(Error::NonFiniteMatrix);
    }
    Ok(out)
}

/// AID-FP with `k_ref` steps at `w_{t_ref}` from `w_0 = 0`.
pub fn reference_vjp(
    map: &dyn MapSelection,
    lam: &[f64],
    y: &[f64],
    t_ref: usize,
    k_ref: usize,
) -> Result<DerivEstimate> {
    let start = Instant::now();
    let traj = fixed_point_solve(map, lam, &vec![0.0; map.state_dim()], t_ref, false)?;
    let mut est = aid_fp_vjp(map, traj.last(), lam, y, k_ref)?;
    est.t = t_ref;
    est.reference = true;
    est.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(est)
}

/// Central differences of `f` at `lam`, one coordinate at a time.
pub fn finite_diff_hypergrad(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    lam: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h = {h} must be positive")));
    }
    let mut out = Vec::with_capacity(lam.len());
    let mut probe = lam.to_vec();
    for i in 0..lam.len() {
        probe[i] = lam[i] + h;
        let fp = f(&probe)?;
        probe[i] = lam[i] - h;
        let fm = f(&probe)?;
        probe[i] = lam[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite evaluation along coordinate {i}")));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Random smooth instance `A tanh(u) + B λ + c` with `‖A‖ = q`.
pub fn random_smooth_instance(rng: &mut Rng, d: usize, m: usize, q: f64) -> Result<TanhMap> {
    let raw = Mat::from_vec(d, d, rng.gaussian(d * d))?;
    let s = spectral_norm(&raw, 1e-12)?;
    let a = raw.scale(if s > 0.0 { q / s } else { 0.0 });
    let b = Mat::from_vec(d, m, rng.gaussian(d * m))?;
    let c = rng.gaussian(d);
    TanhMap::new(a, b, c)
}

// ---------------------------------------------------------------------------
// Piecewise-linear instances

/// Which kink the piecewise-linear map carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PwlKind {
    /// `Φ(w,λ) = A relu(w) + Bλ`.
    Relu,
    /// `Φ(w,λ) = S_θ(Aw + Bλ)`.
    SoftThreshold(f64),
}

/// Map assembled from affine pieces, so every piece has `L = 0`.
#[derive(Debug, Clone)]
pub struct PwlMap {
    a: Mat,
    b: Mat,
    kind: PwlKind,
}

impl PwlMap {
    pub fn new(a: Mat, b: Mat, kind: PwlKind) -> Result<Self> {
        if a.rows() != a.cols() || b.rows() != a.rows() {
            return Err(Error::Shape(format!(
                "A must be square and B must share its rows: A {:?}, B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if let PwlKind::SoftThreshold(t) = kind {
            if !(t >= 0.0) {
                return Err(Error::InvalidArgument(format!("threshold {t} must be nonnegative")));
            }
        }
        Ok(PwlMap { a, b, kind })
    }

    /// `0.5 relu(w) + λ`.
    pub fn scalar_relu() -> Self {
        PwlMap { a: Mat::scalar(0.5), b: Mat::scalar(1.0), kind: PwlKind::Relu }
    }

    /// `S_θ(Aw + λ)` in five dimensions with `A = q diag(1, 1, 0.9, 0.7, 0.5)`.
    pub fn diag5(q: f64, theta: f64) -> Self {
        let a = Mat::diag(&[q, q, 0.9 * q, 0.7 * q, 0.5 * q]);
        PwlMap { a, b: Mat::identity(5), kind: PwlKind::SoftThreshold(theta) }
    }

    /// `‖A‖`, a contraction constant valid on every piece.
    pub fn q(&self) -> Result<f64> {
        spectral_norm(&self.a, 1e-14)
    }

    fn pre(&self, u: &[f64], lam: &[f64]) -> Vec<f64> {
        let mut z = self.a.matvec(u);
        vecops::axpy(&mut z, 1.0, &self.b.matvec(lam));
        z
    }

    /// Active mask of the selection at `u`.
    fn mask(&self, u: &[f64], lam: &[f64]) -> Vec<bool> {
        match self.kind {
            PwlKind::Relu => u.iter().map(|&x| x > 0.0).collect(),
            PwlKind::SoftThreshold(t) => self.pre(u, lam).iter().map(|z| z.abs() > t).collect(),
        }
    }

    /// Radius `R` around `w` inside which no coordinate crosses a kink, and
    /// an upper bound `M` on the jump between any piece and the active one.
    pub fn piece_constants(&self, w: &[f64], lam: &[f64]) -> Result<(f64, f64)> {
        match self.kind {
            PwlKind::Relu => {
                let r = w.iter().fold(f64::INFINITY, |r, x| r.min(x.abs()));
                Ok((r, spectral_norm(&self.a, 1e-14)?))
            }
            PwlKind::SoftThreshold(t) => {
                let z = self.pre(w, lam);
                let mut r = f64::INFINITY;
                for (i, zi) in z.iter().enumerate() {
                    let row = vecops::norm(self.a.row(i));
                    if row > 0.0 {
                        r = r.min((zi.abs() - t).abs() / row);
                    }
                }
                Ok((r, spectral_norm(&self.a.hcat(&self.b)?, 1e-14)?))
            }
        }
    }
}

impl MapSelection for PwlMap {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }
    fn param_dim(&self) -> usize {
        self.b.cols()
    }
    fn eval(&self, u: &[f64], lam: &[f64]) -> Vec<f64> {
        match self.kind {
            PwlKind::Relu => {
                let r: Vec<f64> = u.iter().map(|x| x.max(0.0)).collect();
                let mut z = self.a.matvec(&r);
                vecops::axpy(&mut z, 1.0, &self.b.matvec(lam));
                z
            }
            PwlKind::SoftThreshold(t) => soft_threshold(&self.pre(u, lam), t).unwrap_or_default(),
        }
    }
    fn vjp_state(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        let mask = self.mask(u, lam);
        match self.kind {
            PwlKind::Relu => {
                let mut g = self.a.matvec_t(v);
                g.iter_mut().zip(&mask).for_each(|(gi, &on)| if !on { *gi = 0.0 });
                g
            }
            PwlKind::SoftThreshold(_) => {
                let mv: Vec<f64> = v.iter().zip(&mask).map(|(&x, &on)| if on { x } else { 0.0 }).collect();
                self.a.matvec_t(&mv)
            }
        }
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        match self.kind {
            PwlKind::Relu => self.b.matvec_t(v),
            PwlKind::SoftThreshold(_) => {
                let mask = self.mask(u, lam);
                let mv: Vec<f64> = v.iter().zip(&mask).map(|(&x, &on)| if on { x } else { 0.0 }).collect();
                self.b.matvec_t(&mv)
            }
        }
    }
    fn jvp(&self, u: &[f64], lam: &[f64], du: &[f64], dlam: &[f64]) -> Vec<f64> {
        let mask = self.mask(u, lam);
        match self.kind {
            PwlKind::Relu => {
                let md: Vec<f64> = du.iter().zip(&mask).map(|(&x, &on)| if on { x } else { 0.0 }).collect();
                let mut z = self.a.matvec(&md);
                vecops::axpy(&mut z, 1.0, &self.b.matvec(dlam));
                z
            }
            PwlKind::SoftThreshold(_) => {
                let mut z = self.a.matvec(du);
                vecops::axpy(&mut z, 1.0, &self.b.matvec(dlam));
                z.iter_mut().zip(&mask).for_each(|(zi, &on)| if !on { *zi = 0.0 });
                z
            }
        }
    }
    fn lipschitz_bound(&self, _lam: &[f64]) -> Option<f64> {
        self.q().ok()
    }
    fn name(&self) -> String {
        match self.kind {
            PwlKind::Relu => "pwl-relu".into(),
            PwlKind::SoftThreshold(_) => "pwl-soft".into(),
        }
    }
}

/// One row of a bound certification.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    /// `k` for AID-FP rows, `t` for ITD rows.
    pub iters: usize,
    pub error: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Outcome of [`certify_pwl_bound`].
#[derive(Debug, Clone, PartialEq)]
pub enum PwlReport {
    NotApplicable(String),
    Certified(PwlCertificate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwlCertificate {
    pub constants: RateConstants,
    /// First iterate within `R` of the fixed point.
    pub tau_r: usize,
    pub m: f64,
    pub r: f64,
    pub aid: Vec<BoundRow>,
    pub itd: Vec<BoundRow>,
}

impl PwlCertificate {
    pub fn passed(&self) -> bool {
        self.aid.iter().chain(&self.itd).all(|r| r.pass)
    }

    /// Largest `|error − bound|` over the AID-FP rows.
    pub fn aid_tightness(&self) -> f64 {
        self.aid.iter().fold(0.0, |a, r| a.max((r.error - r.bound).abs()))
    }
}

const CERT_SLACK: f64 = 1e-9;

/// Checks both deterministic bounds on a piecewise-linear map: AID-FP at
/// `w_t` for every `k` in `ks`, and ITD for every `t' ≤ t`. Errors are taken
/// against a reference accurate to about 1e-16.
pub fn certify_pwl_bound(
    map: &PwlMap,
    lam: &[f64],
    y: &[f64],
    t: usize,
    ks: impl IntoIterator<Item = usize>,
) -> Result<PwlReport> {
    check_len("cotangent", y.len(), map.state_dim())?;
    let q = map.q()?;
    if q >= 1.0 {
        return Err(Error::InvalidArgument(format!("map is not a contraction (q = {q})")));
    }
    let d = map.state_dim();
    let n_ref = 2 * protocol_iterations(q);
    let w_ref = fixed_point_solve(map, lam, &vec![0.0; d], n_ref, false)?.last().to_vec();
    let reference = aid_fp_vjp(map, &w_ref, lam, y, n_ref)?;

    let traj = fixed_point_solve(map, lam, &vec![0.0; d], t, true)?;
    let tau = match support_identification(&traj, &w_ref, ZERO_THRESHOLD) {
        Some(tau) => tau,
        None => return Ok(PwlReport::NotApplicable(format!("support not identified within t = {t}"))),
    };
    let (r, m) = map.piece_constants(&w_ref, lam)?;
    let deltas: Vec<f64> = traj.iterates()?.iter().map(|w| vecops::dist(w, &w_ref)).collect();
    // An iterate sitting exactly at distance R may already touch a kink.
    let far: Vec<bool> = deltas.iter().map(|&x| x >= r).collect();
    let tau_r = far.iter().position(|f| !f).unwrap_or(t + 1);
    if tau_r > t {
        return Ok(PwlReport::NotApplicable(format!("iterates never enter the linear region (R = {r:.3e})")));
    }

    let b_hat = spectral_norm(&param_jacobian(map, &w_ref, lam), 1e-14)?;
    let constants = RateConstants::new(q, b_hat, Some(0.0), Some(tau))?;
    let ny = vecops::norm(y);

    let w_t = traj.last();
    let mut aid = Vec::new();
    for k in ks {
        let est = aid_fp_vjp(map, w_t, lam, y, k)?;
        let error = vecops::dist(&est.value, &reference.value);
        let bound = ny * constants.leading_term(k);
        aid.push(BoundRow { iters: k, error, bound, pass: error <= bound + CERT_SLACK });
    }

    let mut itd = Vec::new();
    let jump = if r > 0.0 { m / r } else { f64::INFINITY };
    for s in 1..=t {
        let prefix = fixed_point_solve(map, lam, &vec![0.0; d], s, true)?;
        let est = itd_vjp(map, &prefix, lam, y)?;
        let error = vecops::dist(&est.value, &reference.value);
        let dbar = far[..s].iter().filter(|&&f| f).count() as f64 / s as f64;
        let nonsmooth = if dbar > 0.0 {
            (b_hat + 1.0) * constants.kappa * jump * dbar * deltas[0] * s as f64 * q.powi(s as i32 - 1)
        } else {
            0.0
        };
        let bound = ny * (constants.leading_term(s) + nonsmooth);
        itd.push(BoundRow { iters: s, error, bound, pass: error <= bound + CERT_SLACK });
    }

    Ok(PwlReport::Certified(PwlCertificate { constants, tau_r, m, r, aid, itd }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deriv_det::aid_fp_vjp;
    use crate::maps::AffineMap;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn protocol_constants() {
        assert_eq!(protocol_iterations(0.5), 34);
        assert_eq!(protocol_iterations(0.9), 219);
        assert_eq!(protocol_iterations(0.0), 1);
        assert_eq!(protocol_iterations(1.0 - 1e-12), PROTOCOL_CAP);
        let rc = RateConstants::new(0.75, 2.0, Some(0.0), None).unwrap();
        assert_eq!(rc.kappa, 4.0);
        assert!(RateConstants::new(1.0, 1.0, None, None).is_err());
        assert!(RateConstants::new(0.5, -1.0, None, None).is_err());
    }

    #[test]
    fn oracle_scalar_and_constant() {
        let w = implicit_jacobian_oracle(&AffineMap::scalar(0.5), &[1.0], 100).unwrap();
        assert!(close(w.get(0, 0), 2.0, 1e-14));

        // Φ(w,λ) = λ: A₁ = 0, so W = ∂₂Φ = I.
        let phi = AffineMap::new(Mat::zeros(3, 3), Mat::identity(3), vec![0.0; 3]).unwrap();
        let w = implicit_jacobian_oracle(&phi, &[1.0, 2.0, 3.0], 5).unwrap();
        assert_eq!(w, Mat::identity(3));
    }

    #[test]
    fn oracle_size_guard() {
        let big = AffineMap::new(Mat::zeros(201, 201), Mat::zeros(201, 1), vec![0.0; 201]).unwrap();
        assert!(matches!(implicit_jacobian_oracle(&big, &[0.0], 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn oracle_singular() {
        let phi = AffineMap::scalar(1.0);
        assert!(matches!(implicit_jacobian_at(&phi, &[0.0], &[1.0]), Err(Error::Singular { .. })));
    }

    #[test]
    fn oracle_matches_aid_fp_on_random_contraction() {
        let mut rng = Rng::new(8);
        let map = random_smooth_instance(&mut rng, 8, 8, 0.8).unwrap();
        let lam = rng.gaussian(8);
        let w = implicit_jacobian_oracle(&map, &lam, 300).unwrap();
        let w_t = fixed_point_solve(&map, &lam, &[0.0; 8], 300, false).unwrap().last().to_vec();
        for _ in 0..10 {
            let y = rng.gaussian(8);
            let aid = aid_fp_vjp(&map, &w_t, &lam, &y, 300).unwrap();
            assert!(vecops::dist(&w.matvec_t(&y), &aid.value) <= 1e-8);
        }
    }

    #[test]
    fn transposition_duality() {
        let mut rng = Rng::new(3);
        let map = random_smooth_instance(&mut rng, 6, 4, 0.7).unwrap();
        let lam = rng.gaussian(4);
        let w = implicit_jacobian_oracle(&map, &lam, 200).unwrap();
        for _ in 0..5 {
            let y = rng.gaussian(6);
            let ld = rng.gaussian(4);
            let lhs = vecops::dot(&y, &w.matvec(&ld));
            let rhs = vecops::dot(&w.matvec_t(&y), &ld);
            assert!(close(lhs, rhs, 1e-12 * (1.0 + lhs.abs())));
        }
    }

    #[test]
    fn three_way_agreement() {
        let mut rng = Rng::new(17);
        for trial in 0..10 {
            let d = 2 + trial % 9;
            let m = 1 + trial % 5;
            let map = random_smooth_instance(&mut rng, d, m, 0.9).unwrap();
            let lam = rng.gaussian(m);
            let oracle = implicit_jacobian_oracle(&map, &lam, 400).unwrap();
            let traj = fixed_point_solve(&map, &lam, &vec![0.0; d], 400, true).unwrap();
            let y = rng.gaussian(d);
            let itd = itd_vjp(&map, &traj, &lam, &y).unwrap().value;
            let aid = aid_fp_vjp(&map, traj.last(), &lam, &y, 400).unwrap().value;
            let or = oracle.matvec_t(&y);
            let scale = 1.0 + vecops::norm(&or);
            assert!(vecops::dist(&itd, &or) <= 1e-8 * scale);
            assert!(vecops::dist(&aid, &or) <= 1e-8 * scale);
        }
    }

    #[test]
    fn reference_examples() {
        let phi = AffineMap::scalar(0.5);
        let n = protocol_iterations(0.5);
        let r = reference_vjp(&phi, &[1.0], &[1.0], n, n).unwrap();
        assert!(r.reference);
        assert!(close(r.value[0], 2.0, 1e-9));
        // Feeding the reference's own budget again changes nothing.
        let again = reference_vjp(&phi, &[1.0], &[1.0], r.t, r.k).unwrap();
        assert!(vecops::dist(&again.value, &r.value) <= 1e-9);
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_hypergrad(|l| Ok(l[0] * l[0]), &[3.0], 1e-5).unwrap();
        assert!(close(g[0], 6.0, 1e-8));
        let g = finite_diff_hypergrad(|_| Ok(4.0), &[1.0, 2.0], 1e-3).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(finite_diff_hypergrad(|l| Ok(l[0]), &[1.0], 0.0).is_err());
        assert!(finite_diff_hypergrad(|_| Ok(f64::NAN), &[0.0], 1e-3).is_err());
    }

    #[test]
    fn pwl_maps_are_consistent() {
        let mut rng = Rng::new(5);
        for map in [PwlMap::scalar_relu(), PwlMap::diag5(0.8, 0.1)] {
            let (d, m) = (map.state_dim(), map.param_dim());
            for _ in 0..50 {
                let u = rng.gaussian(d);
                let lam = rng.gaussian(m);
                let v = rng.gaussian(d);
                let du = rng.gaussian(d);
                let dl = rng.gaussian(m);
                let lhs = vecops::dot(&v, &map.jvp(&u, &lam, &du, &dl));
                let rhs = vecops::dot(&map.vjp_state(&u, &lam, &v), &du)
                    + vecops::dot(&map.vjp_param(&u, &lam, &v), &dl);
                assert!(close(lhs, rhs, 1e-12 * (1.0 + lhs.abs())));
            }
        }
    }

    #[test]
    fn certify_affine_equality() {
        // Single piece: no kink anywhere, R is infinite.
        let map = PwlMap::new(Mat::scalar(0.5), Mat::scalar(1.0), PwlKind::SoftThreshold(0.0)).unwrap();
        let rep = certify_pwl_bound(&map, &[1.0], &[1.0], 60, 0..=30).unwrap();
        let PwlReport::Certified(c) = rep else { panic!("expected certificate") };
        assert!(c.passed());
        assert!(c.aid_tightness() <= 1e-12);
        // k = 0: error is the whole reference and the bound is B/(1−q).
        assert!(close(c.aid[0].error, 2.0, 1e-12));
        assert!(close(c.aid[0].bound, 2.0, 1e-12));
    }

    #[test]
    fn certify_relu_after_tau() {
        let rep = certify_pwl_bound(&PwlMap::scalar_relu(), &[1.0], &[1.0], 60, 1..=30).unwrap();
        let PwlReport::Certified(c) = rep else { panic!("expected certificate") };
        assert_eq!(c.constants.tau, Some(1));
        assert_eq!(c.constants.l, Some(0.0));
        assert!(c.passed());
        assert!(c.aid_tightness() <= 1e-12);
    }

    #[test]
    fn certify_diag5() {
        let map = PwlMap::diag5(0.8, 0.1);
        let lam = [1.0, 0.5, 0.05, -0.8, 0.02];
        let mut y = vec![0.0; 5];
        y[0] = 1.0;
        let rep = certify_pwl_bound(&map, &lam, &y, 200, 1..=30).unwrap();
        let PwlReport::Certified(c) = rep else { panic!("expected certificate") };
        assert!(c.passed(), "{c:?}");
        assert!(c.aid_tightness() <= 1e-9);
        assert!(c.r > 0.0 && c.m > 0.0);
    }

    #[test]
    fn certify_not_applicable() {
        let map = PwlMap::diag5(0.99, 0.1);
        let lam = [1.0, 0.5, 0.05, -0.8, 0.02];
        let rep = certify_pwl_bound(&map, &lam, &[1.0, 0.0, 0.0, 0.0, 0.0], 0, 1..=3).unwrap();
        assert!(matches!(rep, PwlReport::NotApplicable(_)));
    }
}
