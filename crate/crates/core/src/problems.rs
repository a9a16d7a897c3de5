//! Problem builders (synthetic elastic net, multiclass data poisoning) and
//! dataset I/O.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::bilevel::{StochasticUpperLevel, UpperLevel, ValidationCrossEntropy, ValidationMse};
use crate::error::{Error, Result};
use crate::linalg::{extreme_eigs_gram, spectral_norm, vecops, Mat};
use crate::maps::{
    Compose, LabeledBlock, LeastSquaresStep, MapSelection, MultinomialStep, SoftThreshold,
    StepRule, StochasticMapSelection, Threshold,
};
use crate::rng::Rng;
use crate::solver::{Contraction, Provenance};

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Labels { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(y) => y.len(),
            Targets::Labels { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(y) => Targets::Real(idx.iter().map(|&i| y[i]).collect()),
            Targets::Labels { labels, classes } => {
                Targets::Labels { labels: idx.iter().map(|&i| labels[i]).collect(), classes: *classes }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Corruptible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Mat,
    pub targets: Targets,
    pub tag: SplitTag,
}

impl Dataset {
    pub fn new(x: Mat, targets: Targets, tag: SplitTag) -> Result<Self> {
        if x.rows() != targets.len() {
            return Err(Error::Shape(format!("{} rows vs {} targets", x.rows(), targets.len())));
        }
        if let Targets::Labels { labels, classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
            }
        }
        Ok(Dataset { x, targets, tag })
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn with_tag(mut self, tag: SplitTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn real_targets(&self) -> Result<&[f64]> {
        match &self.targets {
            Targets::Real(y) => Ok(y),
            Targets::Labels { .. } => Err(Error::InvalidArgument("dataset has class labels".into())),
        }
    }

    pub fn labels(&self) -> Result<(&[usize], usize)> {
        match &self.targets {
            Targets::Labels { labels, classes } => Ok((labels, *classes)),
            Targets::Real(_) => Err(Error::InvalidArgument("dataset has real targets".into())),
        }
    }

    /// Reads integer-valued real targets as class labels `0..c`.
    pub fn into_classification(self) -> Result<Dataset> {
        let y = match self.targets {
            Targets::Real(y) => y,
            t @ Targets::Labels { .. } => return Ok(Dataset { targets: t, ..self }),
        };
        let mut labels = Vec::with_capacity(y.len());
        for (i, v) in y.iter().enumerate() {
            if v.fract() != 0.0 || *v < 0.0 {
                return Err(Error::Parse { location: format!("row {}", i + 1), message: format!("target {v} is not a class label") });
            }
            labels.push(*v as usize);
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(self.x, Targets::Labels { labels, classes }, self.tag)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset { x: self.x.select_rows(idx), targets: self.targets.select(idx), tag: self.tag }
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Draws `n` rows `x = Aᵀz` (informative block) next to standard normal
/// non-informative coordinates.
fn gaussian_design(rng: &mut Rng, n: usize, d: usize, informative: &Option<Mat>) -> Mat {
    let mut x = Mat::from_vec(n, d, rng.gaussian(n * d)).unwrap();
    if let Some(a) = informative {
        let k = a.rows();
        for i in 0..n {
            let z = x.row(i)[..k].to_vec();
            let mixed = a.matvec_t(&z);
            x.row_mut(i)[..k].copy_from_slice(&mixed);
        }
    }
    x
}

/// Synthetic regression data: `y = Xw* + ε`, `ε ~ N(0.1, 1)`, the first
/// `n_informative` coordinates of `w*` standard normal and the rest zero.
/// With `correlated`, the informative features have covariance `A₂ᵀA₂`
/// where `A₂ = A₁/σ_max(A₁)` and `A₁` is standard normal. Validation has
/// `2n` rows.
pub fn gen_elastic_net(seed: u64, n: usize, d: usize, n_informative: usize, correlated: bool) -> Result<(Dataset, Dataset, Vec<f64>)> {
    if n_informative == 0 || n_informative > d {
        return Err(Error::InvalidArgument(format!("need 0 < informative ≤ {d}, got {n_informative}")));
    }
    let mut rng = Rng::new(seed);
    let mix = if correlated {
        let k = n_informative;
        let a1 = Mat::from_vec(k, k, rng.gaussian(k * k)).unwrap();
        let s = spectral_norm(&a1, 1e-13)?;
        Some(a1.scale(1.0 / s))
    } else {
        None
    };
    let mut w = rng.gaussian(d);
    w[n_informative..].iter_mut().for_each(|v| *v = 0.0);
    let mut draw = |rows: usize, tag: SplitTag| -> Dataset {
        let x = gaussian_design(&mut rng, rows, d, &mix);
        let mut y = x.matvec(&w);
        y.iter_mut().for_each(|v| *v += 0.1 + rng.normal());
        Dataset { x, targets: Targets::Real(y), tag }
    };
    let train = draw(n, SplitTag::Train);
    let val = draw(2 * n, SplitTag::Val);
    Ok((train, val, w))
}

/// Gaussian blobs: class centres `N(0, separation²I)`, unit-variance
/// noise, everything scaled by `scale`. Labels are uniform over classes.
pub fn gen_blobs(seed: u64, rows: &[usize], p: usize, classes: usize, separation: f64, scale: f64) -> Result<Vec<Dataset>> {
    if classes < 2 || p == 0 {
        return Err(Error::InvalidArgument("blobs need ≥ 2 classes and ≥ 1 feature".into()));
    }
    let mut rng = Rng::new(seed);
    let centres: Vec<Vec<f64>> = (0..classes).map(|_| vecops::scale(&rng.gaussian(p), separation)).collect();
    let mut out = Vec::with_capacity(rows.len());
    for &n in rows {
        let mut x = Mat::zeros(n, p);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = rng.below(classes);
            let z = rng.gaussian(p);
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = scale * (centres[c][j] + z[j]);
            }
            labels.push(c);
        }
        out.push(Dataset::new(x, Targets::Labels { labels, classes }, SplitTag::Train)?);
    }
    Ok(out)
}

/// Normal entries clamped to `[−0.1, 0.1]`.
pub fn init_gamma(rng: &mut Rng, rows: usize, p: usize) -> Vec<f64> {
    rng.gaussian(rows * p).into_iter().map(|v| v.clamp(-0.1, 0.1)).collect()
}

// ---------------------------------------------------------------------------
// Problem specs

/// Box `[lower, upper]` per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn project(&self, lam: &mut [f64]) {
        for ((l, lo), hi) in lam.iter_mut().zip(&self.lower).zip(&self.upper) {
            *l = l.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// `η = 2/(c(L+μ) + 2λ₂)` from the current `λ₂`.
    Ista(StepRule),
    Fixed { eta: f64, q: f64 },
}

/// A fixed-point problem `w = G(E[T̂(w, λ)], λ)` with its upper-level loss.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub t: Arc<dyn MapSelection>,
    pub that: Arc<dyn StochasticMapSelection>,
    pub g: Arc<dyn MapSelection>,
    pub phi: Arc<dyn MapSelection>,
    pub upper: Arc<dyn UpperLevel>,
    pub upper_stoch: Arc<dyn StochasticUpperLevel>,
    pub lam: Vec<f64>,
    pub bounds: Bounds,
    pub step: StepSize,
    pub c: f64,
    /// Training rows the minibatch tokens index into.
    pub population: usize,
    pub batch: usize,
}

impl ProblemSpec {
    pub fn state_dim(&self) -> usize {
        self.phi.state_dim()
    }

    pub fn param_dim(&self) -> usize {
        self.phi.param_dim()
    }

    pub fn eta(&self, lam: &[f64]) -> f64 {
        match self.step {
            StepSize::Ista(rule) => rule.eta(lam),
            StepSize::Fixed { eta, .. } => eta,
        }
    }

    /// Contraction constant at `λ`: closed form for the square loss; the
    /// same formula is only an estimate for the cross-entropy.
    pub fn contraction(&self, lam: &[f64]) -> Contraction {
        match self.step {
            StepSize::Ista(rule) => Contraction::closed_form(rule.q(lam).unwrap_or(1.0)),
            StepSize::Fixed { q, .. } => Contraction { q, provenance: Provenance::Heuristic },
        }
    }
}

/// Elastic net `(1/2n)‖Xw − y‖² + λ₁‖w‖₁ + (λ₂/2)‖w‖²` as ISTA with
/// `λ = (λ₁, λ₂)`, validation MSE upper level.
pub fn build_elastic_net(train: &Dataset, val: &Dataset, c: f64) -> Result<ProblemSpec> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("c must be positive, got {c}")));
    }
    if train.features() != val.features() {
        return Err(Error::Shape("train and validation feature counts differ".into()));
    }
    if train.rows() == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let d = train.features();
    let rule = StepRule::ista(&train.x, c, 1)?;
    let step = Arc::new(LeastSquaresStep::new(train.x.clone(), train.real_targets()?.to_vec(), rule, 1, 2)?);
    let g: Arc<dyn MapSelection> = Arc::new(SoftThreshold::new(d, 2, Threshold::Scaled { index: 0, step: rule }));
    let t: Arc<dyn MapSelection> = step.clone();
    let phi = Arc::new(Compose::new(g.clone(), t.clone())?);
    let mse = Arc::new(ValidationMse::new(val.x.clone(), val.real_targets()?.to_vec(), 2)?);
    Ok(ProblemSpec {
        name: "elastic-net".into(),
        t,
        that: step,
        g,
        phi,
        upper: mse.clone(),
        upper_stoch: mse,
        lam: vec![0.0, 0.0],
        bounds: Bounds { lower: vec![0.0, 0.0], upper: vec![f64::INFINITY, f64::INFINITY] },
        step: StepSize::Ista(rule),
        c,
        population: train.rows(),
        batch: (train.rows() / 10).max(1),
    })
}

/// Data poisoning: softmax regression on `ℓ(Xw,y)/2 + ℓ((X̃+Γ)w,ỹ)/2` with
/// elastic-net penalty `(λ₁, λ₂)` held fixed and `λ = vec(Γ)`; validation
/// cross-entropy upper level. `η` uses `(L, μ)` of the stacked training
/// design without `Γ`.
pub fn build_poisoning(clean: &Dataset, corruptible: &Dataset, val: &Dataset, l1: f64, l2: f64, c: f64) -> Result<ProblemSpec> {
    if !(l1 >= 0.0 && l2 >= 0.0) {
        return Err(Error::InvalidArgument("penalties must be nonnegative".into()));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("c must be positive, got {c}")));
    }
    let p = clean.features();
    if (corruptible.rows() > 0 && corruptible.features() != p) || val.features() != p {
        return Err(Error::Shape("feature counts differ between splits".into()));
    }
    let (cl, classes) = clean.labels()?;
    let (cr, classes_r) = corruptible.labels()?;
    let (vl, classes_v) = val.labels()?;
    let classes = classes.max(classes_r).max(classes_v);
    let n_prime = corruptible.rows();
    let stacked = if n_prime > 0 {
        let mut rows: Vec<Vec<f64>> = (0..clean.rows()).map(|i| clean.x.row(i).to_vec()).collect();
        rows.extend((0..n_prime).map(|i| corruptible.x.row(i).to_vec()));
        Mat::from_rows(&rows)?
    } else {
        clean.x.clone()
    };
    let (l, mu) = extreme_eigs_gram(&stacked)?;
    let (eta, q) = crate::maps::ista_step_from_eigs(l, mu, l2, c)?;
    let corrupt_weight = if n_prime > 0 { 0.5 } else { 0.0 };
    let blocks = vec![
        LabeledBlock { x: clean.x.clone(), labels: cl.to_vec(), weight: 1.0 - corrupt_weight },
        LabeledBlock { x: corruptible.x.clone(), labels: cr.to_vec(), weight: corrupt_weight },
    ];
    let step = Arc::new(MultinomialStep::new(blocks, classes, eta, l2, Some(1))?);
    let d = p * classes;
    let m = n_prime * p;
    let g: Arc<dyn MapSelection> = Arc::new(SoftThreshold::new(d, m, Threshold::Fixed(eta * l1)));
    let t: Arc<dyn MapSelection> = step.clone();
    let phi = Arc::new(Compose::new(g.clone(), t.clone())?);
    let ce = Arc::new(ValidationCrossEntropy::new(val.x.clone(), vl.to_vec(), classes, m)?);
    let population = clean.rows() + n_prime;
    Ok(ProblemSpec {
        name: "poisoning".into(),
        t,
        that: step,
        g,
        phi,
        upper: ce.clone(),
        upper_stoch: ce,
        lam: vec![0.0; m],
        bounds: Bounds { lower: vec![-0.1; m], upper: vec![0.1; m] },
        step: StepSize::Fixed { eta, q },
        c,
        population,
        batch: (population / 10).max(1),
    })
}

// ---------------------------------------------------------------------------
// I/O

fn parse_err(location: String, message: impl Into<String>) -> Error {
    Error::Parse { location, message: message.into() }
}

/// CSV with a header row; the last column is the target, the rest are
/// features. Cells must parse as floats.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| parse_err("byte 0".into(), "missing header"))?;
    let cols = header.trim_end_matches(['\n', '\r']).split(',').count();
    if cols < 2 {
        return Err(parse_err("line 1, byte 0".into(), "need at least one feature and a target"));
    }
    let mut offset = header.len();
    let mut feats = Vec::new();
    let mut y = Vec::new();
    for (ln, raw) in lines.enumerate() {
        let line = raw.trim_end_matches(['\n', '\r']);
        let row = ln + 1;
        if line.is_empty() {
            offset += raw.len();
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(parse_err(
                format!("line {}, byte {offset}", row + 1),
                format!("expected {cols} fields, found {}", cells.len()),
            ));
        }
        for (j, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("row {row}, col {}", j + 1), format!("not a number: {cell:?}")))?;
            if j + 1 == cols {
                y.push(v);
            } else {
                feats.push(v);
            }
        }
        offset += raw.len();
    }
    let x = Mat::from_vec(y.len(), cols - 1, feats)?;
    Dataset::new(x, Targets::Real(y), SplitTag::Train)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Inverse of [`parse_csv`]; class labels are written as integers.
pub fn format_csv(ds: &Dataset) -> String {
    let mut s = String::new();
    for j in 0..ds.features() {
        let _ = write!(s, "x{j},");
    }
    s.push_str("target\n");
    for i in 0..ds.rows() {
        for v in ds.x.row(i) {
            let _ = write!(s, "{v},");
        }
        match &ds.targets {
            Targets::Real(y) => {
                let _ = writeln!(s, "{}", y[i]);
            }
            Targets::Labels { labels, .. } => {
                let _ = writeln!(s, "{}", labels[i]);
            }
        }
    }
    s
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, format_csv(ds))?;
    Ok(())
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(format!("byte {at}"), "unexpected end of file"))
}

/// IDX image and label files; pixels scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    if be_u32(images, 0)? != 0x0000_0803 {
        return Err(parse_err("images byte 0".into(), "bad magic, expected 0x00000803"));
    }
    if be_u32(labels, 0)? != 0x0000_0801 {
        return Err(parse_err("labels byte 0".into(), "bad magic, expected 0x00000801"));
    }
    let n = be_u32(images, 4)? as usize;
    let r = be_u32(images, 8)? as usize;
    let c = be_u32(images, 12)? as usize;
    let nl = be_u32(labels, 4)? as usize;
    if nl != n {
        return Err(parse_err("labels byte 4".into(), format!("{nl} labels for {n} images")));
    }
    let p = r * c;
    if images.len() != 16 + n * p {
        return Err(parse_err(format!("images byte {}", images.len().min(16 + n * p)), "pixel block has the wrong length"));
    }
    if labels.len() != 8 + n {
        return Err(parse_err(format!("labels byte {}", labels.len().min(8 + n)), "label block has the wrong length"));
    }
    let x = Mat::from_vec(n, p, images[16..].iter().map(|&b| b as f64 / 255.0).collect())?;
    let labs: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let classes = labs.iter().max().map_or(0, |m| m + 1);
    Dataset::new(x, Targets::Labels { labels: labs, classes }, SplitTag::Train)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    parse_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)
}

/// Seeded shuffle, then contiguous slices with sizes from rounded
/// cumulative fractions.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::InvalidArgument(format!("fractions must be nonnegative and sum to 1, got {total}")));
    }
    let n = ds.rows();
    let perm = Rng::new(seed).permutation(n);
    let mut out = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        if end <= start {
            return Err(Error::InvalidArgument(format!("split {i} is empty")));
        }
        out.push(ds.select(&perm[start..end]));
        start = end;
    }
    Ok(out)
}
