//! One gradient step on a row-separable loss, `T(w, λ) = w − η(∇f(w) + λ₂w)`,
//! in deterministic (full batch) and sampled (minibatch) form.
//!
//! Minibatch tokens are lists of row indices drawn uniformly from the whole
//! training population; each row's loss weight is rescaled by
//! `N/|B|` so the sampled gradient is unbiased.

use super::{MapSelection, Sample, StepRule, StochasticMapSelection};
use crate::error::{Error, Result};
use crate::linalg::{extreme_eigs_gram, vecops, Mat};

/// Gradient step on `(1/2n)‖Xw − y‖² + (λ₂/2)‖w‖²`. The parameter vector has
/// `params` entries and `λ₂` sits at `l2_index`; `∂T/∂λ₂ = −ηw` with `η`
/// frozen.
#[derive(Debug, Clone)]
pub struct LeastSquaresStep {
    x: Mat,
    y: Vec<f64>,
    gram: Mat,
    xty: Vec<f64>,
    l: f64,
    mu: f64,
    step: StepRule,
    l2_index: usize,
    params: usize,
}

impl LeastSquaresStep {
    pub fn new(x: Mat, y: Vec<f64>, step: StepRule, l2_index: usize, params: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Shape(format!("{} rows vs {} targets", x.rows(), y.len())));
        }
        if l2_index >= params {
            return Err(Error::InvalidArgument(format!("λ₂ index {l2_index} outside {params} parameters")));
        }
        let n = x.rows() as f64;
        let gram = x.gram(n);
        let xty = vecops::scale(&x.matvec_t(&y), 1.0 / n);
        let (l, mu) = extreme_eigs_gram(&x)?;
        Ok(LeastSquaresStep { x, y, gram, xty, l, mu, step, l2_index, params })
    }

    pub fn eta(&self, lam: &[f64]) -> f64 {
        self.step.eta(lam)
    }

    pub fn step_rule(&self) -> StepRule {
        self.step
    }

    /// `(L, μ)` of `n⁻¹XᵀX`.
    pub fn extreme_eigs(&self) -> (f64, f64) {
        (self.l, self.mu)
    }

    /// `n⁻¹Xᵀy`, the negative gradient of the data term at zero.
    pub fn xty(&self) -> &[f64] {
        &self.xty
    }

    pub fn design(&self) -> &Mat {
        &self.x
    }

    fn hess_apply(&self, v: &[f64], l2: f64) -> Vec<f64> {
        let mut h = self.gram.matvec(v);
        vecops::axpy(&mut h, l2, v);
        h
    }

    fn sample_hess_apply(&self, x: &Sample, v: &[f64], l2: f64) -> Vec<f64> {
        let mut h = vec![0.0; v.len()];
        let scale = 1.0 / x.len() as f64;
        for &i in x {
            let row = self.x.row(i);
            vecops::axpy(&mut h, scale * vecops::dot(row, v), row);
        }
        vecops::axpy(&mut h, l2, v);
        h
    }

    fn sample_grad(&self, x: &Sample, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        let scale = 1.0 / x.len() as f64;
        for &i in x {
            let row = self.x.row(i);
            vecops::axpy(&mut g, scale * (vecops::dot(row, w) - self.y[i]), row);
        }
        g
    }

    fn param_vjp(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.params];
        out[self.l2_index] = -self.eta(lam) * vecops::dot(u, v);
        out
    }

    fn step_from_grad(&self, u: &[f64], lam: &[f64], grad: &[f64]) -> Vec<f64> {
        let eta = self.eta(lam);
        let l2 = lam[self.l2_index];
        u.iter().zip(grad).map(|(&w, &g)| w - eta * (g + l2 * w)).collect()
    }

    fn jvp_from_hess(&self, u: &[f64], lam: &[f64], du: &[f64], dlam: &[f64], hdu: Vec<f64>) -> Vec<f64> {
        let eta = self.eta(lam);
        let dl2 = dlam[self.l2_index];
        du.iter().zip(hdu).zip(u).map(|((&d, h), &w)| d - eta * h - eta * w * dl2).collect()
    }
}

impl MapSelection for LeastSquaresStep {
    fn state_dim(&self) -> usize {
        self.x.cols()
    }
    fn param_dim(&self) -> usize {
        self.params
    }
    fn eval(&self, u: &[f64], lam: &[f64]) -> Vec<f64> {
        let g = vecops::sub(&self.gram.matvec(u), &self.xty);
        self.step_from_grad(u, lam, &g)
    }
    fn vjp_state(&self, _u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        let eta = self.eta(lam);
        let h = self.hess_apply(v, lam[self.l2_index]);
        v.iter().zip(h).map(|(vi, hi)| vi - eta * hi).collect()
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        self.param_vjp(u, lam, v)
    }
    fn jvp(&self, u: &[f64], lam: &[f64], du: &[f64], dlam: &[f64]) -> Vec<f64> {
        let h = self.hess_apply(du, lam[self.l2_index]);
        self.jvp_from_hess(u, lam, du, dlam, h)
    }
    fn lipschitz_bound(&self, lam: &[f64]) -> Option<f64> {
        let eta = self.eta(lam);
        let l2 = lam[self.l2_index];
        Some((1.0 - eta * (self.l + l2)).abs().max((1.0 - eta * (self.mu + l2)).abs()))
    }
    fn name(&self) -> String {
        "least-squares gradient step".into()
    }
}

impl StochasticMapSelection for LeastSquaresStep {
    fn state_dim(&self) -> usize {
        self.x.cols()
    }
    fn param_dim(&self) -> usize {
        self.params
    }
    fn population(&self) -> usize {
        self.x.rows()
    }
    fn eval(&self, u: &[f64], lam: &[f64], x: &Sample) -> Vec<f64> {
        let g = self.sample_grad(x, u);
        self.step_from_grad(u, lam, &g)
    }
    fn vjp_state(&self, _u: &[f64], lam: &[f64], x: &Sample, v: &[f64]) -> Vec<f64> {
        let eta = self.eta(lam);
        let h = self.sample_hess_apply(x, v, lam[self.l2_index]);
        v.iter().zip(h).map(|(vi, hi)| vi - eta * hi).collect()
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], _x: &Sample, v: &[f64]) -> Vec<f64> {
        self.param_vjp(u, lam, v)
    }
    fn jvp(&self, u: &[f64], lam: &[f64], x: &Sample, du: &[f64], dlam: &[f64]) -> Vec<f64> {
        let h = self.sample_hess_apply(x, du, lam[self.l2_index]);
        self.jvp_from_hess(u, lam, du, dlam, h)
    }
    fn name(&self) -> String {
        "least-squares minibatch step".into()
    }
}

/// A block of classification rows with its share of the objective.
#[derive(Debug, Clone)]
pub struct LabeledBlock {
    pub x: Mat,
    pub labels: Vec<usize>,
    /// Multiplies the block's mean cross-entropy.
    pub weight: f64,
}

/// Gradient step on `Σ_blocks weight·mean CE(X_b W, y_b) + (λ₂/2)‖W‖²` for
/// a linear softmax model. `W ∈ ℝ^{p×c}` is stored flattened row-major
/// (`W[j, k]` at `j*c + k`).
///
/// If `perturbed` names a block, the parameter is `λ = vec(Γ)` (row-major
/// `n′×p`) and that block's features are `X̃ + Γ`; otherwise `λ` is empty.
#[derive(Debug, Clone)]
pub struct MultinomialStep {
    blocks: Vec<LabeledBlock>,
    offsets: Vec<usize>,
    features: usize,
    classes: usize,
    eta: f64,
    l2: f64,
    perturbed: Option<usize>,
}

/// Per-row derivative quantities of the cross-entropy at logits `z`.
struct RowState {
    x: Vec<f64>,
    s: Vec<f64>,
    label: usize,
    /// `N·aᵢ/|B|` (or `aᵢ` for the full batch)
    weight: f64,
    /// local row index when the row belongs to the perturbed block
    perturbed_row: Option<usize>,
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// `J_s u = s ⊙ u − s (sᵀu)`, the softmax Jacobian (symmetric).
fn softmax_jac(s: &[f64], u: &[f64]) -> Vec<f64> {
    let su = vecops::dot(s, u);
    s.iter().zip(u).map(|(si, ui)| si * (ui - su)).collect()
}

impl MultinomialStep {
    pub fn new(
        blocks: Vec<LabeledBlock>,
        classes: usize,
        eta: f64,
        l2: f64,
        perturbed: Option<usize>,
    ) -> Result<Self> {
        let features = blocks
            .iter()
            .find(|b| b.x.rows() > 0)
            .or(blocks.first())
            .map(|b| b.x.cols())
            .ok_or_else(|| Error::InvalidArgument("no data blocks".into()))?;
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        let mut total = 0;
        for b in &blocks {
            if b.x.rows() > 0 && b.x.cols() != features {
                return Err(Error::Shape(format!("block with {} features, expected {features}", b.x.cols())));
            }
            if b.x.rows() != b.labels.len() {
                return Err(Error::Shape(format!("{} rows vs {} labels", b.x.rows(), b.labels.len())));
            }
            if let Some(&bad) = b.labels.iter().find(|&&l| l >= classes) {
                return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
            }
            offsets.push(total);
            total += b.x.rows();
        }
        offsets.push(total);
        if let Some(p) = perturbed {
            if p >= blocks.len() {
                return Err(Error::InvalidArgument(format!("perturbed block {p} does not exist")));
            }
        }
        Ok(MultinomialStep { blocks, offsets, features, classes, eta, l2, perturbed })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn blocks(&self) -> &[LabeledBlock] {
        &self.blocks
    }

    fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn locate(&self, global: usize) -> (usize, usize) {
        let b = self.offsets.partition_point(|&o| o <= global) - 1;
        (b, global - self.offsets[b])
    }

    fn row_state(&self, w: &[f64], lam: &[f64], block: usize, r: usize, weight: f64) -> RowState {
        let blk = &self.blocks[block];
        let mut x = blk.x.row(r).to_vec();
        let perturbed_row = (self.perturbed == Some(block)).then_some(r);
        if perturbed_row.is_some() {
            vecops::axpy(&mut x, 1.0, &lam[r * self.features..(r + 1) * self.features]);
        }
        let mut s = self.logits(w, &x);
        softmax_in_place(&mut s);
        RowState { x, s, label: blk.labels[r], weight, perturbed_row }
    }

    fn logits(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut z = vec![0.0; c];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                vecops::axpy(&mut z, xj, &w[j * c..(j + 1) * c]);
            }
        }
        z
    }

    /// Rows of the full batch with weights `weight_b / n_b`.
    fn full_rows(&self, w: &[f64], lam: &[f64]) -> Vec<RowState> {
        let mut out = Vec::with_capacity(self.total_rows());
        for (b, blk) in self.blocks.iter().enumerate() {
            let n = blk.x.rows();
            for r in 0..n {
                out.push(self.row_state(w, lam, b, r, blk.weight / n as f64));
            }
        }
        out
    }

    /// Rows of a minibatch with unbiased weights `N·aᵢ/|B|`.
    fn sample_rows(&self, w: &[f64], lam: &[f64], x: &Sample) -> Vec<RowState> {
        let total = self.total_rows() as f64;
        let k = x.len() as f64;
        x.iter()
            .map(|&g| {
                let (b, r) = self.locate(g);
                let blk = &self.blocks[b];
                let a = blk.weight / blk.x.rows() as f64;
                self.row_state(w, lam, b, r, total * a / k)
            })
            .collect()
    }

    fn grad(&self, rows: &[RowState]) -> Vec<f64> {
        let c = self.classes;
        let mut g = vec![0.0; self.features * c];
        let mut resid = vec![0.0; c];
        for row in rows {
            resid.copy_from_slice(&row.s);
            resid[row.label] -= 1.0;
            for (j, &xj) in row.x.iter().enumerate() {
                if xj != 0.0 {
                    vecops::axpy(&mut g[j * c..(j + 1) * c], row.weight * xj, &resid);
                }
            }
        }
        g
    }

    fn hvp(&self, rows: &[RowState], v: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut h = vec![0.0; self.features * c];
        for row in rows {
            let dz = self.logits(v, &row.x);
            let ds = softmax_jac(&row.s, &dz);
            for (j, &xj) in row.x.iter().enumerate() {
                if xj != 0.0 {
                    vecops::axpy(&mut h[j * c..(j + 1) * c], row.weight * xj, &ds);
                }
            }
        }
        h
    }

    fn eval_rows(&self, u: &[f64], rows: &[RowState]) -> Vec<f64> {
        let g = self.grad(rows);
        u.iter().zip(g).map(|(&w, gi)| w - self.eta * (gi + self.l2 * w)).collect()
    }

    fn vjp_state_rows(&self, rows: &[RowState], v: &[f64]) -> Vec<f64> {
        let h = self.hvp(rows, v);
        v.iter().zip(h).map(|(&vi, hi)| vi - self.eta * (hi + self.l2 * vi)).collect()
    }

    fn vjp_param_rows(&self, u: &[f64], rows: &[RowState], v: &[f64]) -> Vec<f64> {
        let p = self.features;
        let c = self.classes;
        let Some(pb) = self.perturbed else { return Vec::new() };
        let mut out = vec![0.0; self.blocks[pb].x.rows() * p];
        let mut resid = vec![0.0; c];
        for row in rows {
            let Some(r) = row.perturbed_row else { continue };
            resid.copy_from_slice(&row.s);
            resid[row.label] -= 1.0;
            // ∂/∂x of ⟨v, x (s − e)ᵀ⟩ = v (s − e) + W J_s (vᵀx)
            let vx = self.logits(v, &row.x);
            let js = softmax_jac(&row.s, &vx);
            let slot = &mut out[r * p..(r + 1) * p];
            for j in 0..p {
                let t1 = vecops::dot(&v[j * c..(j + 1) * c], &resid);
                let t2 = vecops::dot(&u[j * c..(j + 1) * c], &js);
                slot[j] -= self.eta * row.weight * (t1 + t2);
            }
        }
        out
    }

    fn jvp_rows(&self, u: &[f64], rows: &[RowState], du: &[f64], dlam: &[f64]) -> Vec<f64> {
        let p = self.features;
        let c = self.classes;
        let mut out = self.vjp_state_rows(rows, du);
        if self.perturbed.is_none() {
            return out;
        }
        let mut resid = vec![0.0; c];
        for row in rows {
            let Some(r) = row.perturbed_row else { continue };
            let delta = &dlam[r * p..(r + 1) * p];
            resid.copy_from_slice(&row.s);
            resid[row.label] -= 1.0;
            let dz = self.logits(u, delta);
            let ds = softmax_jac(&row.s, &dz);
            for j in 0..p {
                let slot = &mut out[j * c..(j + 1) * c];
                for k in 0..c {
                    slot[k] -= self.eta * row.weight * (delta[j] * resid[k] + row.x[j] * ds[k]);
                }
            }
        }
        out
    }

    /// Mean cross-entropy of `W` on a block of rows (no perturbation).
    pub fn cross_entropy(w: &[f64], x: &Mat, labels: &[usize], classes: usize) -> f64 {
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let mut z = vec![0.0; classes];
            for (j, &xj) in x.row(i).iter().enumerate() {
                vecops::axpy(&mut z, xj, &w[j * classes..(j + 1) * classes]);
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        total / labels.len().max(1) as f64
    }
}

impl MapSelection for MultinomialStep {
    fn state_dim(&self) -> usize {
        self.features * self.classes
    }
    fn param_dim(&self) -> usize {
        self.perturbed.map_or(0, |b| self.blocks[b].x.rows() * self.features)
    }
    fn eval(&self, u: &[f64], lam: &[f64]) -> Vec<f64> {
        self.eval_rows(u, &self.full_rows(u, lam))
    }
    fn vjp_state(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        self.vjp_state_rows(&self.full_rows(u, lam), v)
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], v: &[f64]) -> Vec<f64> {
        self.vjp_param_rows(u, &self.full_rows(u, lam), v)
    }
    fn vjp(&self, u: &[f64], lam: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rows = self.full_rows(u, lam);
        (self.vjp_state_rows(&rows, v), self.vjp_param_rows(u, &rows, v))
    }
    fn jvp(&self, u: &[f64], lam: &[f64], du: &[f64], dlam: &[f64]) -> Vec<f64> {
        self.jvp_rows(u, &self.full_rows(u, lam), du, dlam)
    }
    fn name(&self) -> String {
        "multinomial gradient step".into()
    }
}

impl StochasticMapSelection for MultinomialStep {
    fn state_dim(&self) -> usize {
        self.features * self.classes
    }
    fn param_dim(&self) -> usize {
        MapSelection::param_dim(self)
    }
    fn population(&self) -> usize {
        self.total_rows()
    }
    fn eval(&self, u: &[f64], lam: &[f64], x: &Sample) -> Vec<f64> {
        self.eval_rows(u, &self.sample_rows(u, lam, x))
    }
    fn vjp_state(&self, u: &[f64], lam: &[f64], x: &Sample, v: &[f64]) -> Vec<f64> {
        self.vjp_state_rows(&self.sample_rows(u, lam, x), v)
    }
    fn vjp_param(&self, u: &[f64], lam: &[f64], x: &Sample, v: &[f64]) -> Vec<f64> {
        self.vjp_param_rows(u, &self.sample_rows(u, lam, x), v)
    }
    fn jvp(&self, u: &[f64], lam: &[f64], x: &Sample, du: &[f64], dlam: &[f64]) -> Vec<f64> {
        self.jvp_rows(u, &self.sample_rows(u, lam, x), du, dlam)
    }
    fn name(&self) -> String {
        "multinomial minibatch step".into()
    }
}

/// Convenience constructor for the plain least-squares step with a fixed `η`
/// and `λ = (λ₁, λ₂)`.
pub fn grad_step_quadratic(x: Mat, y: Vec<f64>, eta: f64) -> Result<LeastSquaresStep> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument("η must be positive".into()));
    }
    LeastSquaresStep::new(x, y, StepRule::Fixed(eta), 1, 2)
}

/// Convenience constructor for the unperturbed softmax step on one block.
pub fn grad_step_multinomial(x: Mat, labels: Vec<usize>, classes: usize, eta: f64, l2: f64) -> Result<MultinomialStep> {
    MultinomialStep::new(vec![LabeledBlock { x, labels, weight: 1.0 }], classes, eta, l2, None)
}
