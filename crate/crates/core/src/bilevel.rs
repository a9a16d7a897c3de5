//! Hypergradients of `f(λ) = E(w(λ), λ)` and a projected descent loop.
//!
//! The outer loop is plumbing only: no stationarity rate is claimed for it.

use crate::deriv_det::{aid_fp_vjp, itd_vjp};
use crate::deriv_stoch::{nsid, NsidConfig, TokenStream};
use crate::error::{check_len, Error, Result};
use crate::linalg::{vecops, Mat};
use crate::maps::{softmax_in_place, MapSelection, Sample, StochasticMapSelection};
use crate::rng::Rng;
use crate::solver::Trajectory;

/// Upper-level loss `E(w, λ)` with selected partial gradients.
pub trait UpperLevel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn eval(&self, w: &[f64], lam: &[f64]) -> f64;
    /// `∂₁E(w,λ)ᵀ`
    fn grad_w(&self, w: &[f64], lam: &[f64]) -> Vec<f64>;
    /// `∂₂E(w,λ)ᵀ`
    fn grad_lam(&self, w: &[f64], lam: &[f64]) -> Vec<f64>;
}

/// Sampled access `Ê_ζ` with `E[Ê_ζ] = E`.
pub trait StochasticUpperLevel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn population(&self) -> usize;
    fn grad_w(&self, w: &[f64], lam: &[f64], z: &Sample) -> Vec<f64>;
    fn grad_lam(&self, w: &[f64], lam: &[f64], z: &Sample) -> Vec<f64>;
}

/// Validation mean squared error `n⁻¹‖Xw − y‖²`; does not depend on `λ`.
#[derive(Debug, Clone)]
pub struct ValidationMse {
    x: Mat,
    y: Vec<f64>,
    params: usize,
}

impl ValidationMse {
    pub fn new(x: Mat, y: Vec<f64>, params: usize) -> Result<Self> {
        check_len("validation targets", y.len(), x.rows())?;
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("empty validation set".into()));
        }
        Ok(ValidationMse { x, y, params })
    }

    fn rows_grad(&self, w: &[f64], rows: impl Iterator<Item = usize>, count: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.x.cols()];
        for i in rows {
            let r = self.x.row(i);
            let res = vecops::dot(r, w) - self.y[i];
            vecops::axpy(&mut g, 2.0 * res / count as f64, r);
        }
        g
    }
}

impl UpperLevel for ValidationMse {
    fn state_dim(&self) -> usize {
        self.x.cols()
    }
    fn param_dim(&self) -> usize {
        self.params
    }
    fn eval(&self, w: &[f64], _lam: &[f64]) -> f64 {
        let r = vecops::sub(&self.x.matvec(w), &self.y);
        vecops::dot(&r, &r) / self.y.len() as f64
    }
    fn grad_w(&self, w: &[f64], _lam: &[f64]) -> Vec<f64> {
        self.rows_grad(w, 0..self.x.rows(), self.x.rows())
    }
    fn grad_lam(&self, _w: &[f64], _lam: &[f64]) -> Vec<f64> {
        vec![0.0; self.params]
    }
}

impl StochasticUpperLevel for ValidationMse {
    fn state_dim(&self) -> usize {
        self.x.cols()
    }
    fn param_dim(&self) -> usize {
        self.params
    }
    fn population(&self) -> usize {
        self.x.rows()
    }
    fn grad_w(&self, w: &[f64], _lam: &[f64], z: &Sample) -> Vec<f64> {
        self.rows_grad(w, z.iter().copied(), z.len())
    }
    fn grad_lam(&self, _w: &[f64], _lam: &[f64], _z: &Sample) -> Vec<f64> {
        vec![0.0; self.params]
    }
}

/// Validation mean cross-entropy of a linear softmax model, `W` flattened
/// row-major `p×c`; does not depend on `λ`.
#[derive(Debug, Clone)]
pub struct ValidationCrossEntropy {
    x: Mat,
    labels: Vec<usize>,
    classes: usize,
    params: usize,
}

impl ValidationCrossEntropy {
    pub fn new(x: Mat, labels: Vec<usize>, classes: usize, params: usize) -> Result<Self> {
        check_len("validation labels", labels.len(), x.rows())?;
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("empty validation set".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(ValidationCrossEntropy { x, labels, classes, params })
    }

    fn probs(&self, w: &[f64], i: usize) -> Vec<f64> {
        let c = self.classes;
        let mut z = vec![0.0; c];
        for (j, &xj) in self.x.row(i).iter().enumerate() {
            vecops::axpy(&mut z, xj, &w[j * c..(j + 1) * c]);
        }
        softmax_in_place(&mut z);
        z
    }

    fn rows_grad(&self, w: &[f64], rows: impl Iterator<Item = usize>, count: usize) -> Vec<f64> {
        let c = self.classes;
        let mut g = vec![0.0; w.len()];
        for i in rows {
            let mut s = self.probs(w, i);
            s[self.labels[i]] -= 1.0;
            for (j, &xj) in self.x.row(i).iter().enumerate() {
                vecops::axpy(&mut g[j * c..(j + 1) * c], xj / count as f64, &s);
            }
        }
        g
    }

    /// Fraction of rows whose arg-max prediction matches the label.
    pub fn accuracy(&self, w: &[f64]) -> f64 {
        let hits = (0..self.x.rows())
            .filter(|&i| {
                let p = self.probs(w, i);
                let best = (0..self.classes).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
                best == self.labels[i]
            })
            .count();
        hits as f64 / self.x.rows() as f64
    }
}

impl UpperLevel for ValidationCrossEntropy {
    fn state_dim(&self) -> usize {
        self.x.cols() * self.classes
    }
    fn param_dim(&self) -> usize {
        self.params
    }
    fn eval(&self, w: &[f64], _lam: &[f64]) -> f64 {
        crate::maps::MultinomialStep::cross_entropy(w, &self.x, &self.labels, self.classes)
    }
    fn grad_w(&self, w: &[f64], _lam: &[f64]) -> Vec<f64> {
        self.rows_grad(w, 0..self.x.rows(), self.x.rows())
    }
    fn grad_lam(&self, _w: &[f64], _lam: &[f64]) -> Vec<f64> {
        vec![0.0; self.params]
    }
}

impl StochasticUpperLevel for ValidationCrossEntropy {
    fn state_dim(&self) -> usize {
        self.x.cols() * self.classes
    }
    fn param_dim(&self) -> usize {
        self.params
    }
    fn population(&self) -> usize {
        self.x.rows()
    }
    fn grad_w(&self, w: &[f64], _lam: &[f64], z: &Sample) -> Vec<f64> {
        self.rows_grad(w, z.iter().copied(), z.len())
    }
    fn grad_lam(&self, _w: &[f64], _lam: &[f64], _z: &Sample) -> Vec<f64> {
        vec![0.0; self.params]
    }
}

fn check_upper(e_state: usize, e_param: usize, map: &dyn MapSelection) -> Result<()> {
    check_len("upper-level state", e_state, map.state_dim())?;
    check_len("upper-level parameter", e_param, map.param_dim())
}

/// BITD: ITD with `y = ∂₁E(w_t,λ)ᵀ`, plus `∂₂E(w_t,λ)ᵀ`.
pub fn bitd_hypergrad(e: &dyn UpperLevel, map: &dyn MapSelection, traj: &Trajectory, lam: &[f64]) -> Result<Vec<f64>> {
    check_upper(e.state_dim(), e.param_dim(), map)?;
    let w_t = traj.last();
    let y = e.grad_w(w_t, lam);
    let mut g = itd_vjp(map, traj, lam, &y)?.value;
    vecops::axpy(&mut g, 1.0, &e.grad_lam(w_t, lam));
    Ok(g)
}

/// BAID-FP: AID-FP with `y = ∂₁E(w_t,λ)ᵀ`, plus `∂₂E(w_t,λ)ᵀ`.
pub fn baid_fp_hypergrad(e: &dyn UpperLevel, map: &dyn MapSelection, w_t: &[f64], lam: &[f64], k: usize) -> Result<Vec<f64>> {
    check_upper(e.state_dim(), e.param_dim(), map)?;
    let y = e.grad_w(w_t, lam);
    let mut g = aid_fp_vjp(map, w_t, lam, &y, k)?.value;
    vecops::axpy(&mut g, 1.0, &e.grad_lam(w_t, lam));
    Ok(g)
}

/// Stream of upper-level tokens ζ, independent of the NSID streams.
pub fn zeta_stream(cfg: &NsidConfig, population: usize, batch: usize) -> TokenStream {
    let mut root = Rng::new(cfg.streams.seed);
    let z = root.fork(3);
    TokenStream::new(z, population, batch, cfg.streams.sampling)
}

/// NSID-Bilevel: `y = mean_ζ ∂₁Ê_ζ(w_t,λ)ᵀ` over `j1` tokens, then NSID, plus
/// the mean `∂₂Ê_ζᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn nsid_bilevel(
    e: &dyn StochasticUpperLevel,
    that: &dyn StochasticMapSelection,
    g: &dyn MapSelection,
    w_t: &[f64],
    lam: &[f64],
    j1: usize,
    zeta: &mut TokenStream,
    cfg: &NsidConfig,
) -> Result<Vec<f64>> {
    check_upper(e.state_dim(), e.param_dim(), g)?;
    if j1 == 0 {
        return Err(Error::InvalidArgument("NSID-Bilevel needs J₁ ≥ 1".into()));
    }
    let mut y = vec![0.0; e.state_dim()];
    let mut g2 = vec![0.0; e.param_dim()];
    for _ in 0..j1 {
        let z = zeta.next_token();
        vecops::axpy(&mut y, 1.0 / j1 as f64, &e.grad_w(w_t, lam, &z));
        vecops::axpy(&mut g2, 1.0 / j1 as f64, &e.grad_lam(w_t, lam, &z));
    }
    let mut r = nsid(that, g, w_t, lam, &y, cfg)?.value;
    vecops::axpy(&mut r, 1.0, &g2);
    Ok(r)
}

/// One recorded outer step.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterStep {
    pub lam: Vec<f64>,
    pub value: f64,
}

/// Projected descent `λ ← Proj(λ − α ĝ)`. `oracle` returns `(f_t(λ), ĝ)`;
/// the trace holds `steps + 1` entries starting at `λ₀`.
pub fn outer_loop(
    lam0: &[f64],
    mut oracle: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    project: impl Fn(&mut [f64]),
    steps: usize,
    alpha: f64,
) -> Result<Vec<OuterStep>> {
    let mut lam = lam0.to_vec();
    project(&mut lam);
    let mut trace = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        let (value, grad) = oracle(&lam)?;
        trace.push(OuterStep { lam: lam.clone(), value });
        if s == steps {
            break;
        }
        check_len("hypergradient", grad.len(), lam.len())?;
        vecops::axpy(&mut lam, -alpha, &grad);
        project(&mut lam);
        if !vecops::all_finite(&lam) {
            return Err(Error::Divergence { iteration: s + 1 });
        }
    }
    Ok(trace)
}

/// Projection onto the nonnegative orthant.
pub fn project_nonnegative(lam: &mut [f64]) {
    lam.iter_mut().for_each(|l| *l = l.max(0.0));
}

/// Projection onto the box `[lo, hi]^m`.
pub fn project_box(lo: f64, hi: f64) -> impl Fn(&mut [f64]) {
    move |lam: &mut [f64]| lam.iter_mut().for_each(|l| *l = l.clamp(lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deriv_stoch::{Sampling, SampleStreams, StepSchedule};
    use crate::maps::{AffineMap, IdentityMap, ZeroVariance};
    use crate::solver::fixed_point_solve;
    use std::sync::Arc;

    /// `E(w, λ) = a·w + (b/2)w² + λ²/8` on scalars.
    struct Scalar {
        a: f64,
        b: f64,
    }

    impl UpperLevel for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn eval(&self, w: &[f64], _lam: &[f64]) -> f64 {
            self.a * w[0] + 0.5 * self.b * w[0] * w[0]
        }
        fn grad_w(&self, w: &[f64], _lam: &[f64]) -> Vec<f64> {
            vec![self.a + self.b * w[0]]
        }
        fn grad_lam(&self, _w: &[f64], lam: &[f64]) -> Vec<f64> {
            vec![0.25 * lam[0]]
        }
    }

    impl StochasticUpperLevel for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn population(&self) -> usize {
            1
        }
        fn grad_w(&self, w: &[f64], lam: &[f64], _z: &Sample) -> Vec<f64> {
            UpperLevel::grad_w(self, w, lam)
        }
        fn grad_lam(&self, w: &[f64], lam: &[f64], _z: &Sample) -> Vec<f64> {
            UpperLevel::grad_lam(self, w, lam)
        }
    }

    /// `E(w, λ) = c·λ` only
    struct ParamOnly;
    impl UpperLevel for ParamOnly {
        fn state_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn eval(&self, _w: &[f64], lam: &[f64]) -> f64 {
            3.0 * lam[0]
        }
        fn grad_w(&self, _w: &[f64], _lam: &[f64]) -> Vec<f64> {
            vec![0.0]
        }
        fn grad_lam(&self, _w: &[f64], _lam: &[f64]) -> Vec<f64> {
            vec![3.0]
        }
    }

    #[test]
    fn bitd_examples() {
        let phi = AffineMap::scalar(0.5);
        let tr = fixed_point_solve(&phi, &[1.0], &[0.0], 3, true).unwrap();
        // E = w (+ λ²/8)
        let lin = Scalar { a: 1.0, b: 0.0 };
        let g = bitd_hypergrad(&lin, &phi, &tr, &[1.0]).unwrap();
        assert!((g[0] - 0.25 - 1.75).abs() < 1e-15);
        assert_eq!(bitd_hypergrad(&ParamOnly, &phi, &tr, &[1.0]).unwrap(), vec![3.0]);

        let half_sq = Scalar { a: 0.0, b: 1.0 };
        let tr = fixed_point_solve(&phi, &[1.0], &[0.0], 60, true).unwrap();
        let g = bitd_hypergrad(&half_sq, &phi, &tr, &[1.0]).unwrap();
        assert!((g[0] - 0.25 - 4.0).abs() < 1e-6);
    }

    #[test]
    fn baid_examples() {
        let phi = AffineMap::scalar(0.5);
        let half_sq = Scalar { a: 0.0, b: 1.0 };
        let tr = fixed_point_solve(&phi, &[1.0], &[0.0], 60, false).unwrap();
        let g = baid_fp_hypergrad(&half_sq, &phi, tr.last(), &[1.0], 60).unwrap();
        assert!((g[0] - 0.25 - 4.0).abs() < 1e-6);
        let g = baid_fp_hypergrad(&half_sq, &phi, tr.last(), &[1.0], 0).unwrap();
        assert_eq!(g, vec![0.25]);
    }

    #[test]
    fn nsid_bilevel_reduces_to_baid() {
        let phi: Arc<dyn MapSelection> = Arc::new(AffineMap::scalar(0.5));
        let zv = ZeroVariance::new(phi.clone(), 1);
        let id = IdentityMap { dim: 1, params: 1 };
        let e = Scalar { a: 0.3, b: 1.0 };
        let w = [1.9];
        let cfg = NsidConfig {
            k: 25,
            j: 1,
            sched: StepSchedule::constant(1.0).unwrap(),
            streams: SampleStreams::new(1, 1, Sampling::Iid),
            q_hat: None,
        };
        let mut z = zeta_stream(&cfg, 1, 1);
        let a = nsid_bilevel(&e, &zv, &id, &w, &[1.0], 1, &mut z, &cfg).unwrap();
        let b = baid_fp_hypergrad(&e, &*phi, &w, &[1.0], 25).unwrap();
        assert!((a[0] - b[0]).abs() <= 1e-12);
    }

    #[test]
    fn mse_gradient_matches_finite_difference() {
        let mut rng = Rng::new(5);
        let x = Mat::from_vec(7, 3, rng.gaussian(21)).unwrap();
        let e = ValidationMse::new(x, rng.gaussian(7), 2).unwrap();
        let w = rng.gaussian(3);
        let g = UpperLevel::grad_w(&e, &w, &[0.0, 0.0]);
        for i in 0..3 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += 1e-6;
            wm[i] -= 1e-6;
            let fd = (e.eval(&wp, &[0.0; 2]) - e.eval(&wm, &[0.0; 2])) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-5);
        }
        let all: Vec<usize> = (0..7).collect();
        let gs = StochasticUpperLevel::grad_w(&e, &w, &[0.0, 0.0], &all);
        assert!(vecops::dist(&gs, &g) < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let mut rng = Rng::new(6);
        let x = Mat::from_vec(9, 4, rng.gaussian(36)).unwrap();
        let labels = vec![0, 1, 2, 2, 1, 0, 1, 1, 2];
        let e = ValidationCrossEntropy::new(x, labels, 3, 5).unwrap();
        let w = rng.gaussian(12);
        let g = UpperLevel::grad_w(&e, &w, &[0.0; 5]);
        for i in 0..12 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += 1e-6;
            wm[i] -= 1e-6;
            let fd = (e.eval(&wp, &[0.0; 5]) - e.eval(&wm, &[0.0; 5])) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-5, "{i}: {fd} vs {}", g[i]);
        }
        assert!((0.0..=1.0).contains(&e.accuracy(&w)));
        assert!(ValidationCrossEntropy::new(Mat::zeros(1, 2), vec![3], 3, 0).is_err());
    }

    #[test]
    fn outer_loop_examples() {
        let trace = outer_loop(&[1.0, 2.0], |_| Ok((0.0, vec![0.0, 0.0])), |_| {}, 5, 0.1).unwrap();
        assert_eq!(trace.len(), 6);
        assert!(trace.iter().all(|s| s.lam == vec![1.0, 2.0]));

        // f(λ) = λ², minimizer 0
        let trace = outer_loop(&[3.0], |l| Ok((l[0] * l[0], vec![2.0 * l[0]])), |_| {}, 30, 0.1).unwrap();
        assert!(trace.windows(2).all(|w| w[1].value < w[0].value));
        assert!(trace.last().unwrap().lam[0].abs() < 1e-2);

        let trace = outer_loop(&[0.5, 0.1], |_| Ok((0.0, vec![1.0, -1.0])), project_nonnegative, 10, 0.3).unwrap();
        assert!(trace.iter().all(|s| s.lam.iter().all(|&l| l >= 0.0)));

        let r = outer_loop(&[1.0], |_| Ok((0.0, vec![f64::NAN])), |_| {}, 3, 0.1);
        assert_eq!(r, Err(Error::Divergence { iteration: 1 }));
    }
}
