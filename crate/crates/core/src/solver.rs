//! Fixed-point iteration `w_i = Φ(w_{i−1}, λ)`, contraction estimates and
//! support detection.

use crate::error::{check_len, Error, Result};
use crate::linalg::vecops;
use crate::maps::MapSelection;
use crate::rng::Rng;

pub use crate::maps::{ista_step_from_eigs, ista_step_size};

/// Threshold under which a coordinate counts as zero in support patterns.
pub const ZERO_THRESHOLD: f64 = 1e-12;

/// Iterates of one solve. When not recorded only `w_0` and `w_t` are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    iterates: Vec<Vec<f64>>,
    residuals: Vec<f64>,
    lam: Vec<f64>,
    map: String,
    steps: usize,
    recorded: bool,
}

impl Trajectory {
    /// Number of solver steps `t`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_recorded(&self) -> bool {
        self.recorded
    }

    /// `w_i`, available for every `i ≤ t` only on recorded trajectories.
    pub fn iterate(&self, i: usize) -> Option<&[f64]> {
        if self.recorded {
            self.iterates.get(i).map(Vec::as_slice)
        } else if i == 0 {
            self.iterates.first().map(Vec::as_slice)
        } else if i == self.steps {
            self.iterates.last().map(Vec::as_slice)
        } else {
            None
        }
    }

    pub fn iterates(&self) -> Result<&[Vec<f64>]> {
        if self.recorded {
            Ok(&self.iterates)
        } else {
            Err(Error::TrajectoryNotRecorded)
        }
    }

    pub fn last(&self) -> &[f64] {
        self.iterates.last().expect("trajectory holds w_0")
    }

    /// `‖w_{i+1} − w_i‖` for `i < t`.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn lam(&self) -> &[f64] {
        &self.lam
    }

    pub fn map_name(&self) -> &str {
        &self.map
    }

    /// The first `t` steps of a recorded trajectory, as if the solve had
    /// stopped there.
    pub fn prefix(&self, t: usize) -> Result<Trajectory> {
        let its = self.iterates()?;
        if t > self.steps {
            return Err(Error::InvalidArgument(format!("prefix of {t} steps from a {}-step trajectory", self.steps)));
        }
        Ok(Trajectory {
            iterates: its[..=t].to_vec(),
            residuals: self.residuals[..t].to_vec(),
            lam: self.lam.clone(),
            map: self.map.clone(),
            steps: t,
            recorded: true,
        })
    }
}

/// Runs `t` fixed-point steps from `w0`.
pub fn fixed_point_solve(
    map: &dyn MapSelection,
    lam: &[f64],
    w0: &[f64],
    t: usize,
    record: bool,
) -> Result<Trajectory> {
    check_len("initial state", w0.len(), map.state_dim())?;
    check_len("parameter", lam.len(), map.param_dim())?;
    if !vecops::all_finite(w0) {
        return Err(Error::Divergence { iteration: 0 });
    }
    let mut iterates = Vec::with_capacity(if record { t + 1 } else { 2 });
    iterates.push(w0.to_vec());
    let mut residuals = Vec::with_capacity(t);
    let mut w = w0.to_vec();
    for i in 1..=t {
        let next = map.eval(&w, lam);
        if !vecops::all_finite(&next) {
            return Err(Error::Divergence { iteration: i });
        }
        residuals.push(vecops::dist(&next, &w));
        if record {
            iterates.push(next.clone());
        }
        w = next;
    }
    if !record && t > 0 {
        iterates.push(w);
    }
    Ok(Trajectory { iterates, residuals, lam: lam.to_vec(), map: map.name(), steps: t, recorded: record })
}

/// Iterates until `‖w_{i+1} − w_i‖ ≤ tol` or `max_iter` steps; returns the
/// last iterate and the number of steps taken.
pub fn solve_to_tolerance(
    map: &dyn MapSelection,
    lam: &[f64],
    w0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    check_len("initial state", w0.len(), map.state_dim())?;
    let mut w = w0.to_vec();
    for i in 1..=max_iter {
        let next = map.eval(&w, lam);
        if !vecops::all_finite(&next) {
            return Err(Error::Divergence { iteration: i });
        }
        let r = vecops::dist(&next, &w);
        w = next;
        if r <= tol {
            return Ok((w, i));
        }
    }
    Ok((w, max_iter))
}

/// Geometric decay rate of a residual sequence, fitted between the middle
/// and the last residual above `1e-10·r₀` so the floating-point floor is
/// left out. `None` when fewer than two usable residuals remain.
pub fn observed_rate(residuals: &[f64]) -> Option<f64> {
    let r0 = *residuals.first()?;
    if !(r0 > 0.0) {
        return None;
    }
    let last = residuals.iter().rposition(|&r| r > 1e-10 * r0)?;
    let mid = last / 2;
    if last == mid || !(residuals[mid] > 0.0) {
        return None;
    }
    Some((residuals[last] / residuals[mid]).powf(1.0 / (last - mid) as f64))
}

/// Where a contraction constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ClosedForm,
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contraction {
    pub q: f64,
    pub provenance: Provenance,
}

impl Contraction {
    pub fn closed_form(q: f64) -> Self {
        Contraction { q, provenance: Provenance::ClosedForm }
    }

    pub fn heuristic(q: f64) -> Self {
        Contraction { q, provenance: Provenance::Heuristic }
    }

    pub fn kappa(&self) -> f64 {
        1.0 / (1.0 - self.q)
    }
}

/// Empirical contraction estimate around the origin; see [`estimate_q_near`].
pub fn estimate_q(map: &dyn MapSelection, lam: &[f64], probes: usize, rng: &mut Rng) -> Contraction {
    let center = vec![0.0; map.state_dim()];
    estimate_q_near(map, lam, &center, 1.0, probes, rng)
}

/// Largest realized quotient `‖∂₁Φ(u)ᵀv‖` over `probes` random draws of
/// `u ~ center + scale·N(0, I)` and unit `v`.
pub fn estimate_q_near(
    map: &dyn MapSelection,
    lam: &[f64],
    center: &[f64],
    scale: f64,
    probes: usize,
    rng: &mut Rng,
) -> Contraction {
    let d = map.state_dim();
    let draw = |rng: &mut Rng| -> Vec<f64> {
        let mut z = rng.gaussian(d);
        z.iter_mut().zip(center).for_each(|(z, c)| *z = c + scale * *z);
        z
    };
    let mut q: f64 = 0.0;
    for _ in 0..probes.max(1) {
        let u = draw(rng);
        let mut v = rng.gaussian(d);
        let nv = vecops::norm(&v);
        if nv > 0.0 {
            v.iter_mut().for_each(|x| *x /= nv);
            q = q.max(vecops::norm(&map.vjp_state(&u, lam, &v)));
        }
    }
    Contraction::heuristic(q)
}

/// `true` where `|wᵢ| > θ`.
pub fn support_pattern(w: &[f64], theta: f64) -> Vec<bool> {
    w.iter().map(|x| x.abs() > theta).collect()
}

/// Smallest `i` from which every recorded iterate has the same support as
/// `w_ref`. `None` if the last iterate still differs or the trajectory was
/// not recorded.
pub fn support_identification(traj: &Trajectory, w_ref: &[f64], theta: f64) -> Option<usize> {
    let its = traj.iterates().ok()?;
    let target = support_pattern(w_ref, theta);
    let mut tau = None;
    for (i, w) in its.iter().enumerate().rev() {
        if support_pattern(w, theta) == target {
            tau = Some(i);
        } else {
            break;
        }
    }
    tau
}
