//! Curve smoothing and functional principal component analysis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bspline::CubicBasis;
use crate::data::{check_grid, FunctionalDataset};
use crate::error::{Error, Result};

pub const DEFAULT_VAR_THRESHOLD: f64 = 0.8;
pub const DEFAULT_MIN_COMPONENT_SHARE: f64 = 0.15;

/// Candidate roughness penalties for the GCV sweep: 25 log-spaced values on [1e-6, 1e3].
pub fn gcv_penalty_grid() -> Vec<f64> {
    (0..25).map(|j| 10f64.powf(-6.0 + 9.0 * j as f64 / 24.0)).collect()
}

/// Trapezoidal quadrature weights for a strictly increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let t = grid.len();
    if t == 1 {
        return vec![1.0];
    }
    let mut w = vec![0.0; t];
    for j in 0..t - 1 {
        let h = 0.5 * (grid[j + 1] - grid[j]);
        w[j] += h;
        w[j + 1] += h;
    }
    w
}

pub fn weighted_inner(a: &[f64], b: &[f64], weights: &[f64]) -> f64 {
    a.iter().zip(b).zip(weights).map(|((x, y), w)| x * y * w).sum()
}

/// Default number of spline functions for a grid of length `t`.
pub fn default_basis_size(t: usize) -> usize {
    (t / 2).clamp(4, t.max(4))
}

/// Penalized least-squares fit shared by every curve for one penalty value.
struct SplineSystem {
    design: DMatrix<f64>,
    gram: DMatrix<f64>,
    penalty: DMatrix<f64>,
}

impl SplineSystem {
    fn new(grid: &[f64], basis_size: usize) -> Result<Self> {
        check_grid(grid)?;
        let t = grid.len();
        if basis_size < 4 {
            return Err(Error::Dimension(format!("basis_size must be >= 4, got {basis_size}")));
        }
        if basis_size > t {
            return Err(Error::Dimension(format!(
                "basis_size {basis_size} exceeds the number of time points {t}"
            )));
        }
        let (t0, t1) = (grid[0], grid[t - 1]);
        let unit: Vec<f64> = grid.iter().map(|x| (x - t0) / (t1 - t0)).collect();
        let basis = CubicBasis::new(basis_size);
        let design = basis.design(&unit);
        let gram = design.transpose() * &design;
        Ok(Self {
            design,
            gram,
            penalty: basis.second_derivative_penalty(),
        })
    }

    fn solver(&self, lambda: f64) -> Result<DMatrix<f64>> {
        let a = &self.gram + &self.penalty * lambda;
        let m = a.nrows();
        if let Some(ch) = a.clone().cholesky() {
            return Ok(ch.inverse());
        }
        a.lu()
            .try_inverse()
            .filter(|inv| inv.iter().all(|v| v.is_finite()))
            .ok_or_else(|| {
                Error::Dimension(format!("spline system of size {m} is singular at penalty {lambda}"))
            })
    }
}

/// Stacks curves as columns of a T x N matrix.
fn curve_matrix(data: &FunctionalDataset) -> DMatrix<f64> {
    let t = data.n_timepoints();
    DMatrix::from_column_slice(t, data.n_curves(), data.values())
}

/// Replaces every curve by its penalized cubic B-spline fit on the time grid.
pub fn smooth_dataset(raw: &FunctionalDataset, basis_size: usize, penalty: f64) -> Result<FunctionalDataset> {
    if !(penalty >= 0.0) || !penalty.is_finite() {
        return Err(Error::Input(format!("penalty must be finite and >= 0, got {penalty}")));
    }
    let sys = SplineSystem::new(raw.time_grid(), basis_size)?;
    let y = curve_matrix(raw);
    let coef = sys.solver(penalty)? * (sys.design.transpose() * &y);
    let fitted = &sys.design * coef;
    raw.with_values(fitted.as_slice().to_vec())
}

/// Generalized cross-validation score of each penalty, with one penalty shared by all curves.
pub fn gcv_scores(raw: &FunctionalDataset, basis_size: usize, penalties: &[f64]) -> Result<Vec<f64>> {
    let sys = SplineSystem::new(raw.time_grid(), basis_size)?;
    let y = curve_matrix(raw);
    let t = raw.n_timepoints() as f64;
    let n = raw.n_curves() as f64;
    let bty = sys.design.transpose() * &y;
    let yy: f64 = y.iter().map(|v| v * v).sum();
    penalties
        .iter()
        .map(|&lambda| {
            let inv = sys.solver(lambda)?;
            let coef = &inv * &bty;
            // RSS = y'y - 2 c'B'y + c'B'Bc, summed over curves.
            let fit_cross: f64 = coef.iter().zip(bty.iter()).map(|(c, b)| c * b).sum();
            let gc = &sys.gram * &coef;
            let fit_sq: f64 = coef.iter().zip(gc.iter()).map(|(c, g)| c * g).sum();
            let rss = (yy - 2.0 * fit_cross + fit_sq).max(0.0);
            let df = (&inv * &sys.gram).trace();
            let denom = 1.0 - df / t;
            if denom <= 0.0 {
                return Ok(f64::INFINITY);
            }
            Ok(rss / (n * t) / (denom * denom))
        })
        .collect()
}

/// Penalty minimizing GCV over [`gcv_penalty_grid`]; ties go to the smaller penalty.
pub fn select_penalty_gcv(raw: &FunctionalDataset, basis_size: usize) -> Result<f64> {
    let grid = gcv_penalty_grid();
    let scores = gcv_scores(raw, basis_size, &grid)?;
    let mut best = 0;
    for (j, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = j;
        }
    }
    if !scores[best].is_finite() {
        return Err(Error::Input("GCV is undefined for every candidate penalty".into()));
    }
    Ok(grid[best])
}

/// Mean curve, retained eigenfunctions and fPC scores of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenBasis {
    pub time_grid: Vec<f64>,
    pub weights: Vec<f64>,
    pub mean_curve: Vec<f64>,
    /// K columns, each of length T.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub var_explained: Vec<f64>,
    pub total_variance: f64,
    pub n_subjects: usize,
    pub n_channels: usize,
    /// Flat `[subject][channel][k]`.
    pub scores: Vec<f64>,
}

impl EigenBasis {
    pub fn k(&self) -> usize {
        self.eigenfunctions.len()
    }

    pub fn n_timepoints(&self) -> usize {
        self.mean_curve.len()
    }

    fn check_index(&self, u: usize, i: usize) -> Result<()> {
        if u >= self.n_subjects || i >= self.n_channels {
            return Err(Error::IndexOutOfRange(format!(
                "curve ({u}, {i}) outside {} subjects x {} channels",
                self.n_subjects, self.n_channels
            )));
        }
        Ok(())
    }

    pub fn score(&self, u: usize, i: usize, k: usize) -> f64 {
        self.scores[(u * self.n_channels + i) * self.k() + k]
    }

    pub fn curve_scores(&self, u: usize, i: usize) -> Result<&[f64]> {
        self.check_index(u, i)?;
        let k = self.k();
        let start = (u * self.n_channels + i) * k;
        Ok(&self.scores[start..start + k])
    }

    /// Mean curve plus the score-weighted eigenfunctions of curve (u, i).
    pub fn reconstruct(&self, u: usize, i: usize) -> Result<Vec<f64>> {
        let s = self.curve_scores(u, i)?;
        Ok(self.reconstruct_from(s))
    }

    pub fn reconstruct_from(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean_curve.clone();
        for (phi, &xi) in self.eigenfunctions.iter().zip(scores) {
            for (o, p) in out.iter_mut().zip(phi) {
                *o += xi * p;
            }
        }
        out
    }

    /// Scores of an arbitrary curve on the retained eigenfunctions.
    pub fn project(&self, curve: &[f64]) -> Vec<f64> {
        let centred: Vec<f64> = curve.iter().zip(&self.mean_curve).map(|(y, m)| y - m).collect();
        self.eigenfunctions
            .iter()
            .map(|phi| weighted_inner(&centred, phi, &self.weights))
            .collect()
    }
}

/// Pooled functional PCA over all (subject, channel) curves.
///
/// Eigenvalues use the N - 1 divisor. K is the shortest prefix reaching
/// `var_threshold` of the total variance, restricted to components carrying at
/// least `min_component_share` each, and never less than one.
pub fn fit_fpca(data: &FunctionalDataset, var_threshold: f64, min_component_share: f64) -> Result<EigenBasis> {
    if !(var_threshold > 0.0 && var_threshold <= 1.0) {
        return Err(Error::Config(format!("var_threshold must lie in (0, 1], got {var_threshold}")));
    }
    if !(0.0..1.0).contains(&min_component_share) {
        return Err(Error::Config(format!(
            "min_component_share must lie in [0, 1), got {min_component_share}"
        )));
    }
    let full = decompose(data)?;
    let target = var_threshold * (1.0 - 1e-12);
    let mut cumulative = 0.0;
    let mut prefix = full.var_explained.len();
    for (j, share) in full.var_explained.iter().enumerate() {
        cumulative += share;
        if cumulative >= target {
            prefix = j + 1;
            break;
        }
    }
    let k = full.var_explained[..prefix]
        .iter()
        .take_while(|&&s| s >= min_component_share)
        .count()
        .max(1);
    Ok(full.truncate(k))
}

/// Functional PCA keeping exactly `k` components.
pub fn fit_fpca_fixed(data: &FunctionalDataset, k: usize) -> Result<EigenBasis> {
    let full = decompose(data)?;
    if k == 0 || k > full.k() {
        return Err(Error::Dimension(format!("cannot retain {k} of {} components", full.k())));
    }
    Ok(full.truncate(k))
}

impl EigenBasis {
    fn truncate(mut self, k: usize) -> Self {
        let old_k = self.k();
        self.eigenfunctions.truncate(k);
        self.eigenvalues.truncate(k);
        self.var_explained.truncate(k);
        self.scores = self
            .scores
            .chunks_exact(old_k)
            .flat_map(|row| row[..k].to_vec())
            .collect();
        self
    }
}

fn decompose(data: &FunctionalDataset) -> Result<EigenBasis> {
    let n = data.n_curves();
    let t = data.n_timepoints();
    if n < 2 {
        return Err(Error::Input("fPCA needs at least two curves".into()));
    }
    let weights = trapezoid_weights(data.time_grid());
    let mut mean = vec![0.0; t];
    for c in data.curves() {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let mut z = DMatrix::zeros(n, t);
    for (r, c) in data.curves().enumerate() {
        for j in 0..t {
            z[(r, j)] = (c[j] - mean[j]) * sqrt_w[j] * scale;
        }
    }
    let total: f64 = z.iter().map(|v| v * v).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateCovariance("all curves are identical".into()));
    }

    let svd = z.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateCovariance("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let rank_tol = svd.singular_values.max() * f64::EPSILON * (n.max(t) as f64);

    let mut eigenfunctions = Vec::new();
    let mut eigenvalues = Vec::new();
    for &j in &order {
        let sv = svd.singular_values[j];
        if sv <= rank_tol {
            break;
        }
        let mut phi: Vec<f64> = (0..t).map(|c| v_t[(j, c)] / sqrt_w[c]).collect();
        fix_sign(&mut phi);
        eigenfunctions.push(phi);
        eigenvalues.push(sv * sv);
    }
    let var_explained: Vec<f64> = eigenvalues.iter().map(|l| l / total).collect();

    let k = eigenfunctions.len();
    let mut scores = Vec::with_capacity(n * k);
    let mut centred = vec![0.0; t];
    for c in data.curves() {
        for j in 0..t {
            centred[j] = c[j] - mean[j];
        }
        scores.extend(eigenfunctions.iter().map(|phi| weighted_inner(&centred, phi, &weights)));
    }

    Ok(EigenBasis {
        time_grid: data.time_grid().to_vec(),
        weights,
        mean_curve: mean,
        eigenfunctions,
        eigenvalues,
        var_explained,
        total_variance: total,
        n_subjects: data.n_subjects(),
        n_channels: data.n_channels(),
        scores,
    })
}

/// Flips `phi` so its largest-magnitude entry (first one on ties) is positive.
fn fix_sign(phi: &mut [f64]) {
    let mut best = 0;
    for (j, v) in phi.iter().enumerate() {
        if v.abs() > phi[best].abs() {
            best = j;
        }
    }
    if phi[best] < 0.0 {
        phi.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Unweighted Gram matrix of the eigenfunctions, the metric of the Gaussian likelihood.
pub fn euclidean_gram(basis: &EigenBasis) -> DMatrix<f64> {
    let k = basis.k();
    DMatrix::from_fn(k, k, |a, b| {
        DVector::from_column_slice(&basis.eigenfunctions[a])
            .dot(&DVector::from_column_slice(&basis.eigenfunctions[b]))
    })
}
