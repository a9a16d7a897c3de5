//! Finite sets of equally-shaped matrices and the excess `gap(A, B)`.
//!
//! All set operations act on the finite generating sets; convex hulls are
//! never formed. Since `gap(A, B) ≥ gap(A, Conv B)`, every distance computed
//! here upper-bounds its hull counterpart.

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, vecops, Lu, Mat};

const NORM_TOL: f64 = 1e-13;

/// Operator norm, or the Euclidean norm for row/column vectors.
pub fn op_norm(m: &Mat) -> f64 {
    if m.rows() == 1 || m.cols() == 1 {
        return vecops::norm(m.as_slice());
    }
    spectral_norm(m, NORM_TOL).expect("finite by MatrixSet invariant")
}

/// Nonempty finite set of matrices sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSet {
    elems: Vec<Mat>,
}

impl MatrixSet {
    pub fn new(elems: Vec<Mat>) -> Result<Self> {
        let first = elems.first().ok_or_else(|| Error::InvalidArgument("empty matrix set".into()))?;
        let shape = first.shape();
        for (i, m) in elems.iter().enumerate() {
            if m.shape() != shape {
                return Err(Error::Shape(format!("element {i} has shape {:?}, expected {shape:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::NonFiniteMatrix);
            }
        }
        Ok(MatrixSet { elems })
    }

    pub fn singleton(m: Mat) -> Self {
        MatrixSet::new(vec![m]).expect("singleton")
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        MatrixSet::singleton(Mat::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.elems[0].shape()
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn elements(&self) -> &[Mat] {
        &self.elems
    }

    /// `A ∪ B`
    pub fn union(&self, other: &MatrixSet) -> Result<MatrixSet> {
        same_shape(self, other)?;
        let mut elems = self.elems.clone();
        elems.extend(other.elems.iter().cloned());
        Ok(MatrixSet { elems })
    }

    /// Elementwise inverses; fails if any element is singular.
    pub fn inverse(&self) -> Result<MatrixSet> {
        let elems = self
            .elems
            .iter()
            .map(|m| {
                let lu = Lu::factor(m)?;
                let n = m.rows();
                let mut inv = Mat::zeros(n, n);
                let mut e = vec![0.0; n];
                for j in 0..n {
                    e.iter_mut().for_each(|x| *x = 0.0);
                    e[j] = 1.0;
                    inv.set_col(j, &lu.solve(&e)?);
                }
                Ok(inv)
            })
            .collect::<Result<Vec<_>>>()?;
        MatrixSet::new(elems)
    }

    /// Column block `start..end` of every element.
    pub fn col_block(&self, start: usize, end: usize) -> MatrixSet {
        MatrixSet { elems: self.elems.iter().map(|m| m.col_block(start, end)).collect() }
    }

    /// Row block `start..end` of every element.
    pub fn row_block(&self, start: usize, end: usize) -> MatrixSet {
        MatrixSet { elems: self.elems.iter().map(|m| m.row_block(start, end)).collect() }
    }
}

fn same_shape(a: &MatrixSet, b: &MatrixSet) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("set shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Excess of `a` over `b`: `max_{x∈a} min_{y∈b} ‖x − y‖`.
pub fn gap(a: &MatrixSet, b: &MatrixSet) -> Result<f64> {
    same_shape(a, b)?;
    let mut worst: f64 = 0.0;
    for x in &a.elems {
        let mut best = f64::INFINITY;
        for y in &b.elems {
            let d = op_norm(&x.sub(y)?);
            if d < best {
                best = d;
                if best == 0.0 {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

/// `‖A‖_sup = gap(A, {0})`.
pub fn sup_norm(a: &MatrixSet) -> f64 {
    a.elems.iter().map(op_norm).fold(0.0, f64::max)
}

/// `{a + b}`
pub fn minkowski_sum(a: &MatrixSet, b: &MatrixSet) -> Result<MatrixSet> {
    same_shape(a, b)?;
    let mut elems = Vec::with_capacity(a.len() * b.len());
    for x in &a.elems {
        for y in &b.elems {
            elems.push(x.add(y)?);
        }
    }
    Ok(MatrixSet { elems })
}

/// `{c a}`
pub fn set_product(c: &MatrixSet, a: &MatrixSet) -> Result<MatrixSet> {
    if c.shape().1 != a.shape().0 {
        return Err(Error::Shape(format!("product {:?}·{:?}", c.shape(), a.shape())));
    }
    let mut elems = Vec::with_capacity(a.len() * c.len());
    for x in &c.elems {
        for y in &a.elems {
            elems.push(x.matmul(y)?);
        }
    }
    Ok(MatrixSet { elems })
}

/// `{A₁X + A₂ : [A₁|A₂] ∈ A, X ∈ X}` where `A₁` takes as many columns as `X`
/// has rows.
pub fn affine_apply(a: &MatrixSet, x: &MatrixSet) -> Result<MatrixSet> {
    let (d, p) = a.shape();
    let (p1, p2) = x.shape();
    if p1 + p2 != p {
        return Err(Error::Shape(format!("affine block {d}x{p} against X of {p1}x{p2}")));
    }
    let mut elems = Vec::with_capacity(a.len() * x.len());
    for ab in &a.elems {
        let a1 = ab.col_block(0, p1);
        let a2 = ab.col_block(p1, p);
        for xm in &x.elems {
            elems.push(a1.matmul(xm)?.add(&a2)?);
        }
    }
    Ok(MatrixSet { elems })
}


/// Randomized checks of the excess properties (triangle, sum, products,
/// inclusion, inverse, block projection, affine bounds) and of the
/// `‖(I − A₁)⁻¹‖ ≤ 1/(1 − q)` bound.
pub mod properties {
    use super::*;
    use crate::rng::Rng;

    /// Outcome of one named property over many random trials.
    #[derive(Debug, Clone)]
    pub struct PropertyReport {
        pub name: &'static str,
        pub trials: usize,
        pub failures: usize,
        /// Largest observed `lhs − rhs` (negative when every trial had slack).
        pub worst_excess: f64,
    }

    impl PropertyReport {
        pub fn passed(&self) -> bool {
            self.failures == 0
        }
    }

    struct Tracker {
        name: &'static str,
        trials: usize,
        failures: usize,
        worst: f64,
    }

    impl Tracker {
        fn new(name: &'static str) -> Self {
            Tracker { name, trials: 0, failures: 0, worst: f64::NEG_INFINITY }
        }
        fn check(&mut self, lhs: f64, rhs: f64, tol: f64) {
            self.trials += 1;
            let ex = lhs - rhs;
            self.worst = self.worst.max(ex);
            if ex > tol || !lhs.is_finite() {
                self.failures += 1;
            }
        }
        fn report(self) -> PropertyReport {
            PropertyReport { name: self.name, trials: self.trials, failures: self.failures, worst_excess: self.worst }
        }
    }

    fn rand_mat(rng: &mut Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    /// Random set with 1..=6 elements of the given shape, entries in U[−1, 1].
    pub fn rand_set(rng: &mut Rng, r: usize, c: usize) -> MatrixSet {
        let n = 1 + rng.below(6);
        MatrixSet::new((0..n).map(|_| rand_mat(rng, r, c)).collect()).unwrap()
    }

    fn rand_invertible_set(rng: &mut Rng, n: usize) -> MatrixSet {
        let k = 1 + rng.below(6);
        let elems = (0..k)
            .map(|_| {
                // I + E with ‖E‖ ≤ ‖E‖_F < 1
                let e = rand_mat(rng, n, n);
                let scale = 0.9 / e.frobenius().max(1e-12);
                Mat::identity(n).add(&e.scale(scale * rng.uniform())).unwrap()
            })
            .collect();
        MatrixSet::new(elems).unwrap()
    }

    fn dim(rng: &mut Rng) -> usize {
        1 + rng.below(5)
    }

    /// Runs every property `trials` times with tolerance `tol`.
    pub fn check_excess_properties(rng: &mut Rng, trials: usize, tol: f64) -> Vec<PropertyReport> {
        let mut tri = Tracker::new("triangle");
        let mut sum = Tracker::new("sum");
        let mut left = Tracker::new("left product");
        let mut right = Tracker::new("right product");
        let mut incl = Tracker::new("inclusion monotonicity");
        let mut inv = Tracker::new("inverse");
        let mut block = Tracker::new("block projection");
        let mut aff_sup = Tracker::new("affine sup bound");
        let mut aff_x = Tracker::new("affine gap in X");
        let mut aff_a = Tracker::new("affine gap in A");
        let mut resolvent = Tracker::new("resolvent bound");

        for _ in 0..trials {
            let (r, c) = (dim(rng), dim(rng));
            let a = rand_set(rng, r, c);
            let b = rand_set(rng, r, c);
            let cs = rand_set(rng, r, c);
            let g = |x: &MatrixSet, y: &MatrixSet| gap(x, y).unwrap();

            tri.check(g(&a, &cs), g(&a, &b) + g(&b, &cs), tol);

            let a2 = rand_set(rng, r, c);
            let b2 = rand_set(rng, r, c);
            let lhs = g(&minkowski_sum(&a, &a2).unwrap(), &minkowski_sum(&b, &b2).unwrap());
            sum.check(lhs, g(&a, &b) + g(&a2, &b2), tol);

            let k = dim(rng);
            let cl = rand_set(rng, k, r);
            let lhs = g(&set_product(&cl, &a).unwrap(), &set_product(&cl, &b).unwrap());
            left.check(lhs, sup_norm(&cl) * g(&a, &b), tol);
            let cr = rand_set(rng, c, k);
            let lhs = g(&set_product(&a, &cr).unwrap(), &set_product(&b, &cr).unwrap());
            right.check(lhs, g(&a, &b) * sup_norm(&cr), tol);

            let bigger = b.union(&rand_set(rng, r, c)).unwrap();
            incl.check(g(&a, &bigger), g(&a, &b), tol);

            let n = dim(rng);
            let ai = rand_invertible_set(rng, n);
            let bi = rand_invertible_set(rng, n);
            let (ainv, binv) = (ai.inverse().unwrap(), bi.inverse().unwrap());
            inv.check(g(&ainv, &binv), sup_norm(&ainv) * sup_norm(&binv) * g(&ai, &bi), tol);

            if c > 1 {
                let split = 1 + rng.below(c - 1);
                block.check(g(&a.col_block(0, split), &b.col_block(0, split)), g(&a, &b), tol);
                block.check(g(&a.col_block(split, c), &b.col_block(split, c)), g(&a, &b), tol);
            }
            if r > 1 {
                let split = 1 + rng.below(r - 1);
                block.check(g(&a.row_block(0, split), &b.row_block(0, split)), g(&a, &b), tol);
            }

            // affine: blocks [A₁|A₂] with A₁ ∈ ℝ^{d×p1}, X ∈ ℝ^{p1×p2}
            let (d, p1, p2) = (dim(rng), dim(rng), dim(rng));
            let ab = rand_set(rng, d, p1 + p2);
            let bb = rand_set(rng, d, p1 + p2);
            let x = rand_set(rng, p1, p2);
            let y = rand_set(rng, p1, p2);
            let ax = affine_apply(&ab, &x).unwrap();
            let (a1, a2) = (ab.col_block(0, p1), ab.col_block(p1, p1 + p2));
            aff_sup.check(sup_norm(&ax), sup_norm(&a1) * sup_norm(&x) + sup_norm(&a2), tol);
            aff_x.check(g(&ax, &affine_apply(&ab, &y).unwrap()), sup_norm(&a1) * g(&x, &y), tol);
            aff_a.check(g(&ax, &affine_apply(&bb, &x).unwrap()), (1.0 + sup_norm(&x)) * g(&ab, &bb), tol);

            // ‖(I − A₁)⁻¹‖ ≤ 1/(1 − q) for ‖A₁‖ ≤ q < 1
            let m = dim(rng);
            let raw = rand_mat(rng, m, m);
            let q = 0.95 * rng.uniform();
            let a1 = raw.scale(q / op_norm(&raw).max(1e-12));
            let res = MatrixSet::singleton(Mat::identity(m).sub(&a1).unwrap()).inverse().unwrap();
            resolvent.check(sup_norm(&res), 1.0 / (1.0 - q), tol);
        }

        [tri, sum, left, right, incl, inv, block, aff_sup, aff_x, aff_a, resolvent]
            .into_iter()
            .map(Tracker::report)
            .collect()
    }
}
