//! Stochastic implicit differentiation: step schedules, sample streams, the
//! stochastic fixed-point linear solver, NSID and the SID baseline.

use std::sync::Arc;
use std::time::Instant;

use crate::deriv_det::{DerivEstimate, Method};
use crate::error::{check_len, Error, Result};
use crate::linalg::vecops;
use crate::maps::{ComposeSampled, IdentityMap, MapSelection, StochasticMapSelection};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Harmonic,
}

/// `η_i = a₁/(a₂ + i)` (harmonic) or `η_i = a₁/a₂` (constant), `i ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    pub a1: f64,
    pub a2: f64,
}

impl StepSchedule {
    pub fn harmonic(a1: f64, a2: f64) -> Result<Self> {
        if !(a1 > 0.0 && a2 >= 0.0 && a1.is_finite() && a2.is_finite()) {
            return Err(Error::InvalidArgument(format!("harmonic schedule needs a1 > 0, a2 ≥ 0 (got {a1}, {a2})")));
        }
        Ok(StepSchedule { kind: ScheduleKind::Harmonic, a1, a2 })
    }

    pub fn constant(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("constant step must be positive, got {eta}")));
        }
        Ok(StepSchedule { kind: ScheduleKind::Constant, a1: eta, a2: 1.0 })
    }

    /// `a₁ = b₁β`, `a₂ = b₂β`.
    pub fn from_scaled(kind: ScheduleKind, b1: f64, b2: f64, beta: f64) -> Result<Self> {
        match kind {
            ScheduleKind::Harmonic => Self::harmonic(b1 * beta, b2 * beta),
            ScheduleKind::Constant => {
                let s = StepSchedule { kind, a1: b1 * beta, a2: b2 * beta };
                Self::constant(s.eta(1)).map(|_| s)
            }
        }
    }

    /// Theoretical schedule `β/(γ + i)` for a given contraction and variance proxy.
    pub fn theoretical(q: f64, sigma2: f64) -> Result<Self> {
        let (beta, gamma) = theoretical_schedule(q, sigma2)?;
        Self::harmonic(beta, gamma)
    }

    pub fn eta(&self, i: usize) -> f64 {
        match self.kind {
            ScheduleKind::Harmonic => self.a1 / (self.a2 + i as f64),
            ScheduleKind::Constant => self.a1 / self.a2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            ScheduleKind::Harmonic => "dec",
            ScheduleKind::Constant => "const",
        }
    }
}

/// `(β, γ) = (2/(1−q²), 2(1+σ̂₂)/(1−q²))`.
pub fn theoretical_schedule(q: f64, sigma2: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("contraction constant must lie in [0, 1), got {q}")));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("variance proxy must be nonnegative, got {sigma2}")));
    }
    let s = 1.0 - q * q;
    Ok((2.0 / s, 2.0 * (1.0 + sigma2) / s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Each index drawn uniformly with replacement.
    Iid,
    /// Batches cut from a fresh permutation each epoch.
    Reshuffle,
}

/// Seeds and batching for the two independent token streams ξ⁽¹⁾, ξ⁽²⁾.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStreams {
    pub seed: u64,
    pub batch: usize,
    pub sampling: Sampling,
    swapped: bool,
}

impl SampleStreams {
    pub fn new(seed: u64, batch: usize, sampling: Sampling) -> Self {
        SampleStreams { seed, batch: batch.max(1), sampling, swapped: false }
    }

    /// Batch of 10% of the population, at least one row.
    pub fn default_batch(population: usize) -> usize {
        (population / 10).max(1)
    }

    /// Same seed with the roles of the two streams exchanged.
    pub fn swapped(mut self) -> Self {
        self.swapped = !self.swapped;
        self
    }

    fn lineages(&self) -> (Rng, Rng) {
        let mut root = Rng::new(self.seed);
        let a = root.fork(1);
        let b = root.fork(2);
        if self.swapped {
            (b, a)
        } else {
            (a, b)
        }
    }

    /// `(ξ⁽¹⁾, ξ⁽²⁾)` over a population of `n` rows.
    pub fn open(&self, n: usize) -> (TokenStream, TokenStream) {
        let (a, b) = self.lineages();
        (
            TokenStream::new(a, n, self.batch, self.sampling),
            TokenStream::new(b, n, self.batch, self.sampling),
        )
    }
}

/// Infinite stream of minibatch tokens.
#[derive(Debug, Clone)]
pub struct TokenStream {
    rng: Rng,
    n: usize,
    batch: usize,
    sampling: Sampling,
    perm: Vec<usize>,
    pos: usize,
}

impl TokenStream {
    pub fn new(rng: Rng, n: usize, batch: usize, sampling: Sampling) -> Self {
        let n = n.max(1);
        TokenStream { rng, n, batch: batch.max(1), sampling, perm: Vec::new(), pos: 0 }
    }

    pub fn next_token(&mut self) -> Vec<usize> {
        match self.sampling {
            Sampling::Iid => (0..self.batch).map(|_| self.rng.below(self.n)).collect(),
            Sampling::Reshuffle => {
                let mut out = Vec::with_capacity(self.batch);
                while out.len() < self.batch {
                    if self.pos == self.perm.len() {
                        self.perm = self.rng.permutation(self.n);
                        self.pos = 0;
                    }
                    let take = (self.batch - out.len()).min(self.perm.len() - self.pos);
                    out.extend_from_slice(&self.perm[self.pos..self.pos + take]);
                    self.pos += take;
                }
                out
            }
        }
    }

    pub fn take(&mut self, count: usize) -> Vec<Vec<usize>> {
        (0..count).map(|_| self.next_token()).collect()
    }
}

/// Passes over the data used by `k + J` minibatches.
pub fn epochs(k: usize, j: usize, batch: usize, population: usize) -> f64 {
    (k + j) as f64 * batch as f64 / population as f64
}

/// Divergence threshold `10⁶‖y‖/(1−q̂)` on the linear-solve iterate.
pub fn divergence_threshold(y: &[f64], q_hat: f64) -> f64 {
    1e6 * vecops::norm(y) / (1.0 - q_hat).max(1e-12)
}

/// Stochastic fixed-point recursion for
/// `(I − ∂₁Tᵀ ∂₁G(T̄)ᵀ) v = y` with `v₀ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn stochastic_linear_solve(
    that: &dyn StochasticMapSelection,
    g: &dyn MapSelection,
    w_t: &[f64],
    lam: &[f64],
    tbar: &[f64],
    y: &[f64],
    sched: &StepSchedule,
    xi2: &mut TokenStream,
    k: usize,
    guard: Option<f64>,
) -> Result<Vec<f64>> {
    let mut v = vec![0.0; y.len()];
    for i in 1..=k {
        let x = xi2.next_token();
        let gv = g.vjp_state(tbar, lam, &v);
        let psi = that.vjp_state(w_t, lam, &x, &gv);
        let eta = sched.eta(i);
        for ((vi, p), yi) in v.iter_mut().zip(&psi).zip(y) {
            *vi = (1.0 - eta) * *vi + eta * (p + yi);
        }
        let nv = vecops::norm(&v);
        if !nv.is_finite() || guard.is_some_and(|b| nv > b) {
            return Err(Error::LinearSolveDivergence { iteration: i, step: eta });
        }
    }
    Ok(v)
}

/// Budget and options shared by NSID and SID.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NsidConfig {
    pub k: usize,
    pub j: usize,
    pub sched: StepSchedule,
    pub streams: SampleStreams,
    /// Contraction estimate for the divergence guard; `None` disables it.
    pub q_hat: Option<f64>,
}

/// NSID estimate of `D_w(λ)ᵀ y` for `w = G(E[T̂(w, λ)], λ)` at `w_t`.
pub fn nsid(
    that: &dyn StochasticMapSelection,
    g: &dyn MapSelection,
    w_t: &[f64],
    lam: &[f64],
    y: &[f64],
    cfg: &NsidConfig,
) -> Result<DerivEstimate> {
    nsid_inner(that, g, w_t, lam, y, cfg, Method::Nsid)
}

fn nsid_inner(
    that: &dyn StochasticMapSelection,
    g: &dyn MapSelection,
    w_t: &[f64],
    lam: &[f64],
    y: &[f64],
    cfg: &NsidConfig,
    method: Method,
) -> Result<DerivEstimate> {
    let start = Instant::now();
    if cfg.k == 0 || cfg.j == 0 {
        return Err(Error::InvalidArgument("NSID needs k ≥ 1 and J ≥ 1".into()));
    }
    check_len("state", w_t.len(), that.state_dim())?;
    check_len("parameter", lam.len(), that.param_dim())?;
    check_len("cotangent", y.len(), that.state_dim())?;
    if g.state_dim() != that.state_dim() || g.param_dim() != that.param_dim() {
        return Err(Error::Shape("outer and inner maps differ in shape".into()));
    }
    let (mut s1, mut s2) = cfg.streams.open(that.population());
    let xi1 = s1.take(cfg.j);
    let tbar = that.batch_eval(w_t, lam, &xi1);
    let guard = cfg.q_hat.map(|q| divergence_threshold(y, q));
    let v = stochastic_linear_solve(that, g, w_t, lam, &tbar, y, &cfg.sched, &mut s2, cfg.k, guard)?;
    let (gv, g2) = g.vjp(&tbar, lam, &v);
    let mut acc = vec![0.0; that.param_dim()];
    for x in &xi1 {
        vecops::axpy(&mut acc, 1.0, &that.vjp_param(w_t, lam, x, &gv));
    }
    let jn = xi1.len() as f64;
    acc.iter_mut().zip(&g2).for_each(|(a, b)| *a = *a / jn + b);
    if !vecops::all_finite(&acc) {
        return Err(Error::LinearSolveDivergence { iteration: cfg.k, step: cfg.sched.eta(cfg.k) });
    }
    Ok(DerivEstimate::new(acc, method, 0, cfg.k, cfg.j, start).with_seed(cfg.streams.seed))
}

/// SID: NSID with identity outer map and the per-sample composite
/// `Φ̂_x = G(T̂_x(·), ·)` as sampler.
pub fn sid_baseline(
    that: Arc<dyn StochasticMapSelection>,
    g: Arc<dyn MapSelection>,
    w_t: &[f64],
    lam: &[f64],
    y: &[f64],
    cfg: &NsidConfig,
) -> Result<DerivEstimate> {
    let id = IdentityMap { dim: that.state_dim(), params: that.param_dim() };
    let phi_hat = ComposeSampled::new(g, that)?;
    nsid_inner(&phi_hat, &id, w_t, lam, y, cfg, Method::Sid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deriv_det::aid_fp_vjp;
    use crate::maps::{AffineMixture, Compose, ZeroVariance};

    fn median(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len();
        if n % 2 == 1 {
            xs[n / 2]
        } else {
            0.5 * (xs[n / 2 - 1] + xs[n / 2])
        }
    }

    #[test]
    fn theoretical_schedule_examples() {
        let (b, g) = theoretical_schedule(0.5, 0.0).unwrap();
        assert!((b - 8.0 / 3.0).abs() < 1e-15 && (g - 8.0 / 3.0).abs() < 1e-15);
        let (b, g) = theoretical_schedule(0.0, 0.7).unwrap();
        assert_eq!((b, g), (2.0, 2.0 * 1.7));
        let (b, _) = theoretical_schedule(0.9, 0.0).unwrap();
        assert!((b - 10.526315789473685).abs() < 1e-12);
        assert!(theoretical_schedule(1.0, 0.0).is_err());
    }

    #[test]
    fn schedule_shapes() {
        let h = StepSchedule::harmonic(0.5, 2.0).unwrap();
        assert_eq!(h.eta(1), 0.5 / 3.0);
        assert!((1..100).all(|i| h.eta(i + 1) <= h.eta(i) && h.eta(i) > 0.0));
        let c = StepSchedule::constant(0.25).unwrap();
        assert!((1..10).all(|i| c.eta(i) == 0.25));
        let s = StepSchedule::from_scaled(ScheduleKind::Harmonic, 0.5, 2.0, 4.0).unwrap();
        assert_eq!((s.a1, s.a2), (2.0, 8.0));
        assert!(StepSchedule::harmonic(0.0, 1.0).is_err());
        assert!(StepSchedule::constant(-1.0).is_err());
    }

    #[test]
    fn reshuffle_covers_each_epoch() {
        let mut s = TokenStream::new(Rng::new(3), 20, 5, Sampling::Reshuffle);
        let mut seen: Vec<usize> = s.take(4).concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        let mut s = TokenStream::new(Rng::new(3), 7, 3, Sampling::Iid);
        assert!(s.take(50).iter().all(|t| t.len() == 3 && t.iter().all(|&i| i < 7)));
    }

    #[test]
    fn epoch_accounting() {
        assert_eq!(epochs(100, 100, 65, 650), 20.0);
    }

    #[test]
    fn linear_solve_zero_variance_reduction() {
        let map: Arc<dyn MapSelection> = Arc::new(crate::maps::AffineMap::scalar(0.5));
        let zv = ZeroVariance::new(map, 1);
        let id = IdentityMap { dim: 1, params: 1 };
        let mut xi = TokenStream::new(Rng::new(0), 1, 1, Sampling::Iid);
        let c = StepSchedule::constant(1.0).unwrap();
        let v = stochastic_linear_solve(&zv, &id, &[2.0], &[1.0], &[2.0], &[1.0], &c, &mut xi, 3, None).unwrap();
        assert_eq!(v, vec![1.75]);
        let v = stochastic_linear_solve(&zv, &id, &[2.0], &[1.0], &[2.0], &[1.0], &c, &mut xi, 0, None).unwrap();
        assert_eq!(v, vec![0.0]);
    }

    fn noisy_scalar_error(seed: u64, k: usize) -> f64 {
        let that = AffineMixture::scalar(&[0.4, 0.6]);
        let id = IdentityMap { dim: 1, params: 1 };
        let sched = StepSchedule::theoretical(0.6, 0.0).unwrap();
        let mut xi = TokenStream::new(Rng::new(seed), 2, 1, Sampling::Iid);
        let v = stochastic_linear_solve(&that, &id, &[0.0], &[0.0], &[0.0], &[1.0], &sched, &mut xi, k, None).unwrap();
        (v[0] - 2.0).abs()
    }

    #[test]
    fn noisy_scalar_converges() {
        let errs: Vec<f64> = (0..20).map(|s| noisy_scalar_error(s, 10_000)).collect();
        assert!(median(errs) <= 0.05);
    }

    #[test]
    fn noisy_scalar_one_over_k() {
        let scaled: Vec<f64> = [100usize, 1000, 10_000]
            .iter()
            .map(|&k| {
                let sq: Vec<f64> = (0..41).map(|s| noisy_scalar_error(100 + s, k).powi(2)).collect();
                k as f64 * median(sq)
            })
            .collect();
        let hi = scaled.iter().cloned().fold(f64::MIN, f64::max);
        let lo = scaled.iter().cloned().fold(f64::MAX, f64::min);
        assert!(hi / lo < 3.0, "{scaled:?}");
    }

    fn toy_composite() -> (Arc<dyn StochasticMapSelection>, Arc<dyn MapSelection>, Arc<dyn MapSelection>) {
        let t: Arc<dyn MapSelection> = Arc::new(
            crate::maps::AffineMap::new(
                crate::linalg::Mat::from_rows(&[vec![0.3, 0.1], vec![-0.2, 0.4]]).unwrap(),
                crate::linalg::Mat::identity(2),
                vec![0.5, -0.1],
            )
            .unwrap(),
        );
        let g: Arc<dyn MapSelection> = Arc::new(crate::maps::SoftThreshold::new(
            2,
            2,
            crate::maps::Threshold::Fixed(0.05),
        ));
        let zv: Arc<dyn StochasticMapSelection> = Arc::new(ZeroVariance::new(t.clone(), 10));
        let phi: Arc<dyn MapSelection> = Arc::new(Compose::new(g.clone(), t).unwrap());
        (zv, g, phi)
    }

    #[test]
    fn nsid_reduces_to_aid_fp() {
        let (zv, g, phi) = toy_composite();
        let lam = [0.2, 0.7];
        let w = crate::solver::fixed_point_solve(&*phi, &lam, &[0.0, 0.0], 50, false).unwrap();
        let y = [1.0, -0.5];
        let cfg = NsidConfig {
            k: 12,
            j: 1,
            sched: StepSchedule::constant(1.0).unwrap(),
            streams: SampleStreams::new(4, 1, Sampling::Iid),
            q_hat: None,
        };
        let a = nsid(&*zv, &*g, w.last(), &lam, &y, &cfg).unwrap();
        let b = aid_fp_vjp(&*phi, w.last(), &lam, &y, 12).unwrap();
        assert!(vecops::dist(&a.value, &b.value) <= 1e-12);
        let s = sid_baseline(zv.clone(), g.clone(), w.last(), &lam, &y, &cfg).unwrap();
        assert!(vecops::dist(&s.value, &a.value) <= 1e-12);
        assert_eq!(s.method, Method::Sid);

        let z = nsid(&*zv, &*g, w.last(), &lam, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(z.value, vec![0.0, 0.0]);
    }

    #[test]
    fn sid_equals_nsid_with_identity_outer() {
        let that: Arc<dyn StochasticMapSelection> = Arc::new(AffineMixture::scalar(&[0.2, 0.5, 0.7]));
        let id: Arc<dyn MapSelection> = Arc::new(IdentityMap { dim: 1, params: 1 });
        let cfg = NsidConfig {
            k: 40,
            j: 5,
            sched: StepSchedule::harmonic(2.0, 3.0).unwrap(),
            streams: SampleStreams::new(9, 2, Sampling::Iid),
            q_hat: Some(0.7),
        };
        let a = nsid(&*that, &*id, &[0.3], &[1.0], &[1.0], &cfg).unwrap();
        let b = sid_baseline(that, id, &[0.3], &[1.0], &[1.0], &cfg).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn determinism_and_stream_independence() {
        let that: Arc<dyn StochasticMapSelection> = Arc::new(AffineMixture::scalar(&[0.1, 0.5, 0.8, 0.3]));
        let id = IdentityMap { dim: 1, params: 1 };
        let cfg = NsidConfig {
            k: 30,
            j: 3,
            sched: StepSchedule::harmonic(2.0, 3.0).unwrap(),
            streams: SampleStreams::new(21, 1, Sampling::Iid),
            q_hat: None,
        };
        let a = nsid(&*that, &id, &[0.3], &[1.0], &[1.0], &cfg).unwrap();
        let b = nsid(&*that, &id, &[0.3], &[1.0], &[1.0], &cfg).unwrap();
        assert_eq!(a.value, b.value);
        let sw = NsidConfig { streams: cfg.streams.swapped(), ..cfg };
        let c = nsid(&*that, &id, &[0.3], &[1.0], &[1.0], &sw).unwrap();
        assert_ne!(a.value, c.value);
    }

    #[test]
    fn divergence_guard_trips() {
        // mean slope 1.5: the recursion blows up
        let that = AffineMixture::scalar(&[1.5]);
        let id = IdentityMap { dim: 1, params: 1 };
        let cfg = NsidConfig {
            k: 10_000,
            j: 1,
            sched: StepSchedule::constant(1.0).unwrap(),
            streams: SampleStreams::new(0, 1, Sampling::Iid),
            q_hat: Some(0.5),
        };
        let r = nsid(&that, &id, &[0.0], &[0.0], &[1.0], &cfg);
        assert!(matches!(r, Err(Error::LinearSolveDivergence { .. })));
    }
}
