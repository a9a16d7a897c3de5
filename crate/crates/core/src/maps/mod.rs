//! Parametric maps `Φ(u, λ)` together with one fixed selection of their
//! conservative derivative, exposed only through VJP/JVP products.
//!
//! Every concrete map satisfies the adjoint identities
//! `⟨v, jvp(u,λ,ẇ,0)⟩ = ⟨vjp_state(u,λ,v), ẇ⟩` and
//! `⟨v, jvp(u,λ,0,λ̇)⟩ = ⟨vjp_param(u,λ,v), λ̇⟩`, and returns bit-identical
//! outputs for bit-identical inputs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{extreme_eigs_gram, vecops, Mat};

mod steps;
pub(crate) use steps::softmax_in_place;

pub use steps::{
    grad_step_multinomial, grad_step_quadratic, LabeledBlock, LeastSquaresStep, MultinomialStep,
};

/// A map `Φ: ℝ^d × ℝ^m → ℝ^d` with a fixed derivative selection.
pub trait MapSelection: Send + Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn eval(&self, u: &[f64], lam: &[f64]) -> Vec<f64>;
    /// `∂₁Φ(u,λ)ᵀ v`
    fn vjp_state(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64>;
    /// `∂₂Φ(u,λ)ᵀ v`
    fn vjp_param(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64>;
    /// `∂₁Φ(u,λ) du + ∂₂Φ(u,λ) dlam`
    fn jvp(&self, u: &[f64], lam: &[f64], du: &[f64], dlam: &[f64]) -> Vec<f64>;

    /// Both transposed blocks at once; composite maps override this to share
    /// the inner evaluation.
    fn vjp(&self, u: &[f64], lam: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.vjp_state(u, lam, v), self.vjp_param(u, lam, v))
    }

    /// Known bound on the Lipschitz constant in `u` at this `λ`, if any. A
    /// value below one declares a contraction.
    fn lipschitz_bound(&self, _lam: &[f64]) -> Option<f64> {
        None
    }

    fn name(&self) -> String;
}

/// A sample token: row indices (repeats allowed) into the map's population.
pub type Sample = [usize];

/// Unbiased sampled access `T̂_x` to a map `T`.
pub trait StochasticMapSelection: Send + Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    /// Size of the finite population tokens index into.
    fn population(&self) -> usize;
    fn eval(&self, u: &[f64], lam: &[f64], x: &Sample) -> Vec<f64>;
    fn vjp_state(&self, u: &[f64], lam: &[f64], x: &Sample, v: &[f64]) -> Vec<f64>;
    fn vjp_param(&self, u: &[f64], lam: &[f64], x: &Sample, v: &[f64]) -> Vec<f64>;
    fn jvp(&self, u: &[f64], lam: &[f64], x: &Sample, du: &[f64], dlam: &[f64]) -> Vec<f64>;

    /// Mean of `eval` over several tokens.
    fn batch_eval(&self, u: &[f64], lam: &[f64], xs: &[Vec<usize>]) -> Vec<f64> {
        let mut acc = vec![0.0; self.state_dim()];
        for x in xs {
            vecops::axpy(&mut acc, 1.0, &self.eval(u, lam, x));
        }
        let k = xs.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }

    fn name(&self) -> String;
}

// ---------------------------------------------------------------------------
// Soft-thresholding

/// `sign(uᵢ)·max(|uᵢ| − θ, 0)` componentwise.
pub fn soft_threshold(u: &[f64], theta: f64) -> Result<Vec<f64>> {
    if !(theta >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be nonnegative, got {theta}")));
    }
    Ok(u.iter().map(|&x| soft1(x, theta)).collect())
}

#[inline]
fn soft1(x: f64, theta: f64) -> f64 {
    if x > theta {
        x - theta
    } else if x < -theta {
        x + theta
    } else {
        0.0
    }
}

/// Selected derivative of soft-thresholding applied to `v`: returns
/// `(∂_u Sᵀv, ∂_θ Sᵀv)`. At `|uᵢ| = θ` the dead-zone piece is selected.
pub fn soft_threshold_selection(u: &[f64], theta: f64, v: &[f64]) -> (Vec<f64>, f64) {
    let mut dtheta = 0.0;
    let dstate = u
        .iter()
        .zip(v)
        .map(|(&x, &vi)| {
            if x.abs() > theta {
                dtheta -= x.signum() * vi;
                vi
            } else {
                0.0
            }
        })
        .collect();
    (dstate, dtheta)
}

/// Step size rule. `Ista` recomputes `η = 2/(c(L+μ) + 2λ₂)` from the current
/// `λ₂`; the result is treated as a constant when differentiating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Fixed(f64),
    Ista { l: f64, mu: f64, c: f64, l2_index: usize },
}

impl StepRule {
    /// Builds the ISTA rule from the design matrix.
    pub fn ista(x: &Mat, c: f64, l2_index: usize) -> Result<StepRule> {
        let (l, mu) = extreme_eigs_gram(x)?;
        Ok(StepRule::Ista { l, mu, c, l2_index })
    }

    pub fn eta(&self, lam: &[f64]) -> f64 {
        match *self {
            StepRule::Fixed(eta) => eta,
            StepRule::Ista { l, mu, c, l2_index } => 2.0 / (c * (l + mu) + 2.0 * lam[l2_index]),
        }
    }

    /// Closed-form contraction factor for the ISTA rule.
    pub fn q(&self, lam: &[f64]) -> Option<f64> {
        match *self {
            StepRule::Fixed(_) => None,
            StepRule::Ista { l, mu, c, l2_index } => {
                let l2 = lam[l2_index];
                let eta = self.eta(lam);
                Some((1.0 - eta * (c * l + l2)).abs().max((1.0 - eta * (c * mu + l2)).abs()))
            }
        }
    }
}

/// Computes `(η, q)` of the ISTA rule for a design matrix and ridge weight.
pub fn ista_step_size(x: &Mat, l2: f64, c: f64) -> Result<(f64, f64)> {
    let (l, mu) = extreme_eigs_gram(x)?;
    ista_step_from_eigs(l, mu, l2, c)
}

/// `(η, q)` from precomputed extreme eigenvalues.
pub fn ista_step_from_eigs(l: f64, mu: f64, l2: f64, c: f64) -> Result<(f64, f64)> {
    if !(c > 0.0) || !(l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("need c > 0 and λ₂ ≥ 0, got c={c}, λ₂={l2}")));
    }
    let denom = c * (l + mu) + 2.0 * l2;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::InvalidArgument("degenerate step-size denominator".into()));
    }
    let rule = StepRule::Ista { l, mu, c, l2_index: 0 };
    let lam = [l2];
    Ok((rule.eta(&lam), rule.q(&lam).expect("ista rule")))
}

/// Where the soft-threshold level comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Constant `θ`, independent of `λ`.
    Fixed(f64),
    /// `θ = η(λ)·λ[index]`.
    Scaled { index: usize, step: StepRule },
}

/// `G(u, λ) = S_θ(u)` as a map.
#[derive(Debug, Clone)]
pub struct SoftThreshold {
    dim: usize,
    params: usize,
    threshold: Threshold,
}

impl SoftThreshold {
    pub fn new(dim: usize, params: usize, threshold: Threshold) -> Self {
        SoftThreshold { dim, params, threshold }
    }

    pub fn theta(&self, lam: &[f64]) -> f64 {
        match self.threshold {
            Threshold::Fixed(t) => t,
            Threshold::Scaled { index, step } => step.eta(lam) * lam[index],
        }
    }

    /// `∂θ/∂λ` as `(index, value)` when the threshold depends on `λ`.
    fn dtheta(&self, lam: &[f64]) -> Option<(usize, f64)> {
        match self.threshold {
            Threshold::Fixed(_) => None,
            Threshold::Scaled { index, step } => Some((index, step.eta(lam))),
        }
    }
}

impl MapSelection for SoftThreshold {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn param_dim(&self) -> usize {
        self.params
    }
    fn eval(&self, u: &[f64], lam: &[f64]) -> Vec<f64> {
        let theta = self.theta(lam);
        u.iter().map(|&x| soft1(x, theta)).collect()
    }
    fn vjp_state(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        soft_threshold_selection(u, self.theta(lam), v).0
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.params];
        if let Some((idx, scale)) = self.dtheta(lam) {
            out[idx] = scale * soft_threshold_selection(u, self.theta(lam), v).1;
        }
        out
    }
    fn vjp(&self, u: &[f64], lam: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (ds, dt) = soft_threshold_selection(u, self.theta(lam), v);
        let mut out = vec![0.0; self.params];
        if let Some((idx, scale)) = self.dtheta(lam) {
            out[idx] = scale * dt;
        }
        (ds, out)
    }
    fn jvp(&self, u: &[f64], lam: &[f64], du: &[f64], dlam: &[f64]) -> Vec<f64> {
        let theta = self.theta(lam);
        let dtheta = self.dtheta(lam).map_or(0.0, |(i, s)| s * dlam[i]);
        u.iter()
            .zip(du)
            .map(|(&x, &dx)| if x.abs() > theta { dx - x.signum() * dtheta } else { 0.0 })
            .collect()
    }
    fn lipschitz_bound(&self, _lam: &[f64]) -> Option<f64> {
        Some(1.0)
    }
    fn name(&self) -> String {
        "soft-threshold".into()
    }
}

// ---------------------------------------------------------------------------
// Small generic maps

/// `Φ(u, λ) = u`.
#[derive(Debug, Clone)]
pub struct IdentityMap {
    pub dim: usize,
    pub params: usize,
}

impl MapSelection for IdentityMap {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn param_dim(&self) -> usize {
        self.params
    }
    fn eval(&self, u: &[f64], _lam: &[f64]) -> Vec<f64> {
        u.to_vec()
    }
    fn vjp_state(&self, _u: &[f64], _lam: &[f64], v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
    fn vjp_param(&self, _u: &[f64], _lam: &[f64], _v: &[f64]) -> Vec<f64> {
        vec![0.0; self.params]
    }
    fn jvp(&self, _u: &[f64], _lam: &[f64], du: &[f64], _dlam: &[f64]) -> Vec<f64> {
        du.to_vec()
    }
    fn lipschitz_bound(&self, _lam: &[f64]) -> Option<f64> {
        Some(1.0)
    }
    fn name(&self) -> String {
        "identity".into()
    }
}

/// Affine map `Φ(u, λ) = A u + B λ + c`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    a: Mat,
    b: Mat,
    c: Vec<f64>,
    norm_a: f64,
}

impl AffineMap {
    pub fn new(a: Mat, b: Mat, c: Vec<f64>) -> Result<Self> {
        let d = a.rows();
        if a.cols() != d || b.rows() != d || c.len() != d {
            return Err(Error::Shape(format!(
                "affine map needs A d×d, B d×m, c ∈ ℝ^d; got A {:?}, B {:?}, |c| = {}",
                a.shape(),
                b.shape(),
                c.len()
            )));
        }
        let norm_a = crate::setvalued::op_norm(&a);
        Ok(AffineMap { a, b, c, norm_a })
    }

    /// Scalar map `w ↦ a·w + λ`.
    pub fn scalar(a: f64) -> Self {
        AffineMap::new(Mat::scalar(a), Mat::scalar(1.0), vec![0.0]).unwrap()
    }

    pub fn state_matrix(&self) -> &Mat {
        &self.a
    }

    pub fn param_matrix(&self) -> &Mat {
        &self.b
    }
}

impl MapSelection for AffineMap {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }
    fn param_dim(&self) -> usize {
        self.b.cols()
    }
    fn eval(&self, u: &[f64], lam: &[f64]) -> Vec<f64> {
        let mut out = self.a.matvec(u);
        vecops::axpy(&mut out, 1.0, &self.b.matvec(lam));
        vecops::axpy(&mut out, 1.0, &self.c);
        out
    }
    fn vjp_state(&self, _u: &[f64], _lam: &[f64], v: &[f64]) -> Vec<f64> {
        self.a.matvec_t(v)
    }
    fn vjp_param(&self, _u: &[f64], _lam: &[f64], v: &[f64]) -> Vec<f64> {
        self.b.matvec_t(v)
    }
    fn jvp(&self, _u: &[f64], _lam: &[f64], du: &[f64], dlam: &[f64]) -> Vec<f64> {
        vecops::add(&self.a.matvec(du), &self.b.matvec(dlam))
    }
    fn lipschitz_bound(&self, _lam: &[f64]) -> Option<f64> {
        Some(self.norm_a)
    }
    fn name(&self) -> String {
        "affine".into()
    }
}

/// `Φ(u, λ) = max(u, 0)` componentwise, ignoring `λ`. The kink selects 0.
#[derive(Debug, Clone)]
pub struct Relu {
    pub dim: usize,
    pub params: usize,
}

impl MapSelection for Relu {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn param_dim(&self) -> usize {
        self.params
    }
    fn eval(&self, u: &[f64], _lam: &[f64]) -> Vec<f64> {
        u.iter().map(|&x| x.max(0.0)).collect()
    }
    fn vjp_state(&self, u: &[f64], _lam: &[f64], v: &[f64]) -> Vec<f64> {
        u.iter().zip(v).map(|(&x, &vi)| if x > 0.0 { vi } else { 0.0 }).collect()
    }
    fn vjp_param(&self, _u: &[f64], _lam: &[f64], _v: &[f64]) -> Vec<f64> {
        vec![0.0; self.params]
    }
    fn jvp(&self, u: &[f64], lam: &[f64], du: &[f64], _dlam: &[f64]) -> Vec<f64> {
        self.vjp_state(u, lam, du)
    }
    fn lipschitz_bound(&self, _lam: &[f64]) -> Option<f64> {
        Some(1.0)
    }
    fn name(&self) -> String {
        "relu".into()
    }
}

/// Smooth nonlinear test map `Φ(u, λ) = A tanh(u) + B λ + c`; Lipschitz in `u`
/// with constant at most `‖A‖`.
#[derive(Debug, Clone)]
pub struct TanhMap {
    inner: AffineMap,
}

impl TanhMap {
    pub fn new(a: Mat, b: Mat, c: Vec<f64>) -> Result<Self> {
        Ok(TanhMap { inner: AffineMap::new(a, b, c)? })
    }
}

impl MapSelection for TanhMap {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn eval(&self, u: &[f64], lam: &[f64]) -> Vec<f64> {
        let t: Vec<f64> = u.iter().map(|x| x.tanh()).collect();
        self.inner.eval(&t, lam)
    }
    fn vjp_state(&self, u: &[f64], _lam: &[f64], v: &[f64]) -> Vec<f64> {
        let atv = self.inner.a.matvec_t(v);
        u.iter().zip(atv).map(|(x, g)| g * (1.0 - x.tanh().powi(2))).collect()
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        self.inner.vjp_param(u, lam, v)
    }
    fn jvp(&self, u: &[f64], _lam: &[f64], du: &[f64], dlam: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = u.iter().zip(du).map(|(x, d)| d * (1.0 - x.tanh().powi(2))).collect();
        vecops::add(&self.inner.a.matvec(&scaled), &self.inner.b.matvec(dlam))
    }
    fn lipschitz_bound(&self, _lam: &[f64]) -> Option<f64> {
        Some(self.inner.norm_a)
    }
    fn name(&self) -> String {
        "tanh-affine".into()
    }
}

// ---------------------------------------------------------------------------
// Composition and sums

/// `Φ(u, λ) = G(T(u, λ), λ)`.
#[derive(Clone)]
pub struct Compose {
    outer: Arc<dyn MapSelection>,
    inner: Arc<dyn MapSelection>,
}

impl Compose {
    pub fn new(outer: Arc<dyn MapSelection>, inner: Arc<dyn MapSelection>) -> Result<Self> {
        if outer.state_dim() != inner.state_dim() || outer.param_dim() != inner.param_dim() {
            return Err(Error::Shape(format!(
                "compose: outer ({}, {}) vs inner ({}, {})",
                outer.state_dim(),
                outer.param_dim(),
                inner.state_dim(),
                inner.param_dim()
            )));
        }
        Ok(Compose { outer, inner })
    }

    pub fn outer(&self) -> &Arc<dyn MapSelection> {
        &self.outer
    }

    pub fn inner(&self) -> &Arc<dyn MapSelection> {
        &self.inner
    }
}

/// Shared by [`Compose`] and the NSID reduction: `∂₁Tᵀ(∂₁Gᵀv)` and
/// `∂₂Tᵀ(∂₁Gᵀv) + ∂₂Gᵀv` given the already evaluated inner value `t`.
pub(crate) fn composite_vjp(
    outer: &dyn MapSelection,
    inner: &dyn MapSelection,
    u: &[f64],
    t: &[f64],
    lam: &[f64],
    v: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (gv, g2) = outer.vjp(t, lam, v);
    let (s, mut p) = inner.vjp(u, lam, &gv);
    vecops::axpy(&mut p, 1.0, &g2);
    (s, p)
}

impl MapSelection for Compose {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn eval(&self, u: &[f64], lam: &[f64]) -> Vec<f64> {
        self.outer.eval(&self.inner.eval(u, lam), lam)
    }
    fn vjp_state(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        let t = self.inner.eval(u, lam);
        let gv = self.outer.vjp_state(&t, lam, v);
        self.inner.vjp_state(u, lam, &gv)
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        let t = self.inner.eval(u, lam);
        composite_vjp(&*self.outer, &*self.inner, u, &t, lam, v).1
    }
    fn vjp(&self, u: &[f64], lam: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let t = self.inner.eval(u, lam);
        composite_vjp(&*self.outer, &*self.inner, u, &t, lam, v)
    }
    fn jvp(&self, u: &[f64], lam: &[f64], du: &[f64], dlam: &[f64]) -> Vec<f64> {
        let t = self.inner.eval(u, lam);
        let dt = self.inner.jvp(u, lam, du, dlam);
        self.outer.jvp(&t, lam, &dt, dlam)
    }
    fn lipschitz_bound(&self, lam: &[f64]) -> Option<f64> {
        Some(self.outer.lipschitz_bound(lam)? * self.inner.lipschitz_bound(lam)?)
    }
    fn name(&self) -> String {
        format!("{}∘{}", self.outer.name(), self.inner.name())
    }
}

/// Weighted finite sum `Σ wᵢ Φ⁽ⁱ⁾`; the summed selections form a valid
/// conservative derivative of the sum.
#[derive(Clone)]
pub struct SumMaps {
    terms: Vec<(f64, Arc<dyn MapSelection>)>,
}

impl SumMaps {
    pub fn new(maps: Vec<Arc<dyn MapSelection>>, weights: Vec<f64>) -> Result<Self> {
        if maps.is_empty() || maps.len() != weights.len() {
            return Err(Error::Shape(format!("{} maps with {} weights", maps.len(), weights.len())));
        }
        let (d, m) = (maps[0].state_dim(), maps[0].param_dim());
        if maps.iter().any(|f| f.state_dim() != d || f.param_dim() != m) {
            return Err(Error::Shape("sum of maps with different dimensions".into()));
        }
        Ok(SumMaps { terms: weights.into_iter().zip(maps).collect() })
    }

    fn fold(&self, f: impl Fn(&dyn MapSelection) -> Vec<f64>) -> Vec<f64> {
        let mut acc: Option<Vec<f64>> = None;
        for (w, map) in &self.terms {
            let y = f(&**map);
            match acc.as_mut() {
                None => acc = Some(vecops::scale(&y, *w)),
                Some(a) => vecops::axpy(a, *w, &y),
            }
        }
        acc.expect("nonempty")
    }
}

impl MapSelection for SumMaps {
    fn state_dim(&self) -> usize {
        self.terms[0].1.state_dim()
    }
    fn param_dim(&self) -> usize {
        self.terms[0].1.param_dim()
    }
    fn eval(&self, u: &[f64], lam: &[f64]) -> Vec<f64> {
        self.fold(|m| m.eval(u, lam))
    }
    fn vjp_state(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        self.fold(|m| m.vjp_state(u, lam, v))
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        self.fold(|m| m.vjp_param(u, lam, v))
    }
    fn jvp(&self, u: &[f64], lam: &[f64], du: &[f64], dlam: &[f64]) -> Vec<f64> {
        self.fold(|m| m.jvp(u, lam, du, dlam))
    }
    fn lipschitz_bound(&self, lam: &[f64]) -> Option<f64> {
        self.terms.iter().map(|(w, m)| m.lipschitz_bound(lam).map(|q| w.abs() * q)).sum()
    }
    fn name(&self) -> String {
        format!("sum of {} maps", self.terms.len())
    }
}

// ---------------------------------------------------------------------------
// Stochastic adapters

/// A deterministic map viewed as a sampler that ignores its token.
#[derive(Clone)]
pub struct ZeroVariance {
    map: Arc<dyn MapSelection>,
    population: usize,
}

impl ZeroVariance {
    pub fn new(map: Arc<dyn MapSelection>, population: usize) -> Self {
        ZeroVariance { map, population: population.max(1) }
    }
}

impl StochasticMapSelection for ZeroVariance {
    fn state_dim(&self) -> usize {
        self.map.state_dim()
    }
    fn param_dim(&self) -> usize {
        self.map.param_dim()
    }
    fn population(&self) -> usize {
        self.population
    }
    fn eval(&self, u: &[f64], lam: &[f64], _x: &Sample) -> Vec<f64> {
        self.map.eval(u, lam)
    }
    fn vjp_state(&self, u: &[f64], lam: &[f64], _x: &Sample, v: &[f64]) -> Vec<f64> {
        self.map.vjp_state(u, lam, v)
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], _x: &Sample, v: &[f64]) -> Vec<f64> {
        self.map.vjp_param(u, lam, v)
    }
    fn jvp(&self, u: &[f64], lam: &[f64], _x: &Sample, du: &[f64], dlam: &[f64]) -> Vec<f64> {
        self.map.jvp(u, lam, du, dlam)
    }
    fn name(&self) -> String {
        format!("zero-variance {}", self.map.name())
    }
}

/// Per-sample composite `Φ̂_x(u, λ) = G(T̂_x(u, λ), λ)`. The outer map sees
/// the noisy inner value, which biases `Φ̂` whenever `G` is nonlinear.
#[derive(Clone)]
pub struct ComposeSampled {
    outer: Arc<dyn MapSelection>,
    inner: Arc<dyn StochasticMapSelection>,
}

impl ComposeSampled {
    pub fn new(outer: Arc<dyn MapSelection>, inner: Arc<dyn StochasticMapSelection>) -> Result<Self> {
        if outer.state_dim() != inner.state_dim() || outer.param_dim() != inner.param_dim() {
            return Err(Error::Shape("compose: dimension mismatch".into()));
        }
        Ok(ComposeSampled { outer, inner })
    }
}

impl StochasticMapSelection for ComposeSampled {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn population(&self) -> usize {
        self.inner.population()
    }
    fn eval(&self, u: &[f64], lam: &[f64], x: &Sample) -> Vec<f64> {
        self.outer.eval(&self.inner.eval(u, lam, x), lam)
    }
    fn vjp_state(&self, u: &[f64], lam: &[f64], x: &Sample, v: &[f64]) -> Vec<f64> {
        let t = self.inner.eval(u, lam, x);
        let gv = self.outer.vjp_state(&t, lam, v);
        self.inner.vjp_state(u, lam, x, &gv)
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], x: &Sample, v: &[f64]) -> Vec<f64> {
        let t = self.inner.eval(u, lam, x);
        let (gv, g2) = self.outer.vjp(&t, lam, v);
        let mut p = self.inner.vjp_param(u, lam, x, &gv);
        vecops::axpy(&mut p, 1.0, &g2);
        p
    }
    fn jvp(&self, u: &[f64], lam: &[f64], x: &Sample, du: &[f64], dlam: &[f64]) -> Vec<f64> {
        let t = self.inner.eval(u, lam, x);
        let dt = self.inner.jvp(u, lam, x, du, dlam);
        self.outer.jvp(&t, lam, &dt, dlam)
    }
    fn name(&self) -> String {
        format!("{}∘{} (per sample)", self.outer.name(), self.inner.name())
    }
}

/// Finite mixture of affine maps: a token picks components by index and the
/// sample map is their average. With equal-probability tokens this is an
/// unbiased sampler of the mean map.
#[derive(Debug, Clone)]
pub struct AffineMixture {
    comps: Vec<AffineMap>,
}

impl AffineMixture {
    pub fn new(comps: Vec<AffineMap>) -> Result<Self> {
        let first = comps.first().ok_or_else(|| Error::InvalidArgument("empty mixture".into()))?;
        let (d, m) = (first.state_dim(), first.param_dim());
        if comps.iter().any(|c| c.state_dim() != d || c.param_dim() != m) {
            return Err(Error::Shape("mixture components differ in shape".into()));
        }
        Ok(AffineMixture { comps })
    }

    /// Scalar components `w ↦ aᵢ w + λ`.
    pub fn scalar(slopes: &[f64]) -> Self {
        AffineMixture::new(slopes.iter().map(|&a| AffineMap::scalar(a)).collect()).unwrap()
    }

    /// The mean map.
    pub fn mean_map(&self) -> AffineMap {
        let k = self.comps.len() as f64;
        let mut a = Mat::zeros(self.state_dim(), self.state_dim());
        let mut b = Mat::zeros(self.state_dim(), self.param_dim());
        let mut c = vec![0.0; self.state_dim()];
        for comp in &self.comps {
            a = a.add(&comp.a.scale(1.0 / k)).unwrap();
            b = b.add(&comp.b.scale(1.0 / k)).unwrap();
            vecops::axpy(&mut c, 1.0 / k, &comp.c);
        }
        AffineMap::new(a, b, c).unwrap()
    }

    fn avg(&self, x: &Sample, f: impl Fn(&AffineMap) -> Vec<f64>) -> Vec<f64> {
        let mut acc: Option<Vec<f64>> = None;
        for &i in x {
            let y = f(&self.comps[i]);
            match acc.as_mut() {
                None => acc = Some(y),
                Some(a) => vecops::axpy(a, 1.0, &y),
            }
        }
        let mut acc = acc.expect("non-empty sample");
        let k = x.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }
}

impl StochasticMapSelection for AffineMixture {
    fn state_dim(&self) -> usize {
        self.comps[0].state_dim()
    }
    fn param_dim(&self) -> usize {
        self.comps[0].param_dim()
    }
    fn population(&self) -> usize {
        self.comps.len()
    }
    fn eval(&self, u: &[f64], lam: &[f64], x: &Sample) -> Vec<f64> {
        self.avg(x, |c| c.eval(u, lam))
    }
    fn vjp_state(&self, u: &[f64], lam: &[f64], x: &Sample, v: &[f64]) -> Vec<f64> {
        self.avg(x, |c| c.vjp_state(u, lam, v))
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], x: &Sample, v: &[f64]) -> Vec<f64> {
        self.avg(x, |c| c.vjp_param(u, lam, v))
    }
    fn jvp(&self, u: &[f64], lam: &[f64], x: &Sample, du: &[f64], dlam: &[f64]) -> Vec<f64> {
        self.avg(x, |c| c.jvp(u, lam, du, dlam))
    }
    fn name(&self) -> String {
        format!("affine mixture of {}", self.comps.len())
    }
}

/// Relative defects of the two adjoint identities at one probe:
/// `|⟨v, ∂₁Φ ẇ⟩ − ⟨∂₁Φᵀv, ẇ⟩|` and the parameter analogue, each divided by
/// `max(1, |lhs|)`.
pub fn adjoint_defect(
    map: &dyn MapSelection,
    u: &[f64],
    lam: &[f64],
    v: &[f64],
    du: &[f64],
    dlam: &[f64],
) -> (f64, f64) {
    let zero_d = vec![0.0; map.state_dim()];
    let zero_m = vec![0.0; map.param_dim()];
    let lhs_s = vecops::dot(v, &map.jvp(u, lam, du, &zero_m));
    let rhs_s = vecops::dot(&map.vjp_state(u, lam, v), du);
    let lhs_p = vecops::dot(v, &map.jvp(u, lam, &zero_d, dlam));
    let rhs_p = vecops::dot(&map.vjp_param(u, lam, v), dlam);
    (
        (lhs_s - rhs_s).abs() / lhs_s.abs().max(1.0),
        (lhs_p - rhs_p).abs() / lhs_p.abs().max(1.0),
    )
}
