//! Model state, label algebra and log-density evaluators.
//!
//! Labels follow one numbering per dimension k: 1 is the common cluster, 2 and
//! 3 the clusters of groups A and B, and 4..=3 + J_S the subject-specific
//! clusters of a subject.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Group;
use crate::dist::{normal_logpdf, LN_2PI};
use crate::error::{Error, Result};
use crate::fpca::EigenBasis;

pub const COMMON: usize = 1;
pub const FIRST_SUBJECT_LABEL: usize = 4;

/// Sizes shared by every array of a [`ModelState`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_subjects: usize,
    pub n_channels: usize,
    pub k: usize,
    pub j_s: usize,
}

impl Dims {
    #[inline]
    pub fn curve(&self, u: usize, i: usize) -> usize {
        u * self.n_channels + i
    }

    /// Flat index into `[u][i][k]` arrays.
    #[inline]
    pub fn score(&self, u: usize, i: usize, k: usize) -> usize {
        (u * self.n_channels + i) * self.k + k
    }

    /// Flat index into `[u][k]` arrays.
    #[inline]
    pub fn subject_dim(&self, u: usize, k: usize) -> usize {
        u * self.k + k
    }

    /// Flat index into `[u][k][j]` arrays, `j0` counted from the first subject label.
    #[inline]
    pub fn subject_cluster(&self, u: usize, k: usize, j0: usize) -> usize {
        (u * self.k + k) * self.j_s + j0
    }

    /// Flat index into `[k][group][j]` stick arrays.
    #[inline]
    pub fn stick(&self, k: usize, d: usize, j0: usize) -> usize {
        (k * 2 + d) * self.j_s + j0
    }

    pub fn n_scores(&self) -> usize {
        self.n_subjects * self.n_channels * self.k
    }
}

/// One complete MCMC state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub dims: Dims,
    /// `[u][i][k]`.
    pub xi: Vec<f64>,
    pub tau: f64,
    /// `[u][k]`, values in {1, 2, 3}.
    pub g: Vec<u8>,
    /// `[u][i][k]`, values in 4..=3 + J_S.
    pub eta: Vec<u16>,
    pub mu_common: Vec<f64>,
    pub s_common: Vec<f64>,
    /// `[k][group]`.
    pub mu_group: Vec<[f64; 2]>,
    pub s_group: Vec<[f64; 2]>,
    /// `[u][k][j - 4]`.
    pub mu_subj: Vec<f64>,
    pub s_subj: Vec<f64>,
    /// `[k]`, simplex rows.
    pub omega: Vec<[f64; 3]>,
    /// `[k][group][j - 4]` raw sticks in (0, 1).
    pub p_star: Vec<f64>,
    /// `[k][group][j - 4]` renormalized weights.
    pub p: Vec<f64>,
}

/// z for one (u, i, k) from the subject-level component, the recording label and the group.
pub fn z_label(g: u8, eta: u16, group: Group) -> Result<usize> {
    match g {
        1 => Ok(COMMON),
        2 => Ok(group.code() as usize),
        3 if eta as usize >= FIRST_SUBJECT_LABEL => Ok(eta as usize),
        3 => Err(Error::InvalidState(format!("recording label {eta} below {FIRST_SUBJECT_LABEL}"))),
        other => Err(Error::InvalidState(format!("subject-level component {other} outside 1..=3"))),
    }
}

/// Full z tensor `[u][i][k]` from g `[u][k]` and eta `[u][i][k]`.
pub fn derive_z(dims: &Dims, g: &[u8], eta: &[u16], groups: &[Group]) -> Result<Vec<usize>> {
    if g.len() != dims.n_subjects * dims.k || eta.len() != dims.n_scores() || groups.len() != dims.n_subjects {
        return Err(Error::Dimension("label arrays do not match dimensions".into()));
    }
    let max_label = 3 + dims.j_s;
    let mut z = Vec::with_capacity(dims.n_scores());
    for u in 0..dims.n_subjects {
        for i in 0..dims.n_channels {
            for k in 0..dims.k {
                let e = eta[dims.score(u, i, k)];
                if (e as usize) < FIRST_SUBJECT_LABEL || e as usize > max_label {
                    return Err(Error::InvalidState(format!("recording label {e} outside 4..={max_label}")));
                }
                z.push(z_label(g[dims.subject_dim(u, k)], e, groups[u])?);
            }
        }
    }
    Ok(z)
}

/// Renormalized truncated stick-breaking weights.
pub fn sticks_to_weights(p_star: &[f64]) -> Result<Vec<f64>> {
    if p_star.is_empty() {
        return Err(Error::Dimension("no sticks".into()));
    }
    if let Some(bad) = p_star.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidState(format!("stick {bad} outside (0, 1)")));
    }
    let mut w = Vec::with_capacity(p_star.len());
    let mut log_rest = 0.0;
    for &p in p_star {
        w.push(p.ln() + log_rest);
        log_rest += (-p).ln_1p();
    }
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

/// Mass kept by the first `len` sticks before renormalization: 1 - prod(1 - p*).
pub fn stick_mass(p_star: &[f64]) -> f64 {
    let log_rest: f64 = p_star.iter().map(|p| (-p).ln_1p()).sum();
    -log_rest.exp_m1()
}

impl ModelState {
    /// (mu, s) of cluster `label` as seen from subject u in dimension k.
    #[inline]
    pub fn cluster_params(&self, u: usize, k: usize, label: usize, group: Group) -> (f64, f64) {
        match label {
            COMMON => (self.mu_common[k], self.s_common[k]),
            2 | 3 => {
                debug_assert_eq!(label, group.code() as usize);
                let d = label - 2;
                (self.mu_group[k][d], self.s_group[k][d])
            }
            j => {
                let idx = self.dims.subject_cluster(u, k, j - FIRST_SUBJECT_LABEL);
                (self.mu_subj[idx], self.s_subj[idx])
            }
        }
    }

    #[inline]
    pub fn z(&self, u: usize, i: usize, k: usize, group: Group) -> usize {
        let g = self.g[self.dims.subject_dim(u, k)];
        match g {
            1 => COMMON,
            2 => group.code() as usize,
            _ => self.eta[self.dims.score(u, i, k)] as usize,
        }
    }

    /// Renormalized stick weights of (k, group).
    pub fn weights(&self, k: usize, d: usize) -> &[f64] {
        let start = self.dims.stick(k, d, 0);
        &self.p[start..start + self.dims.j_s]
    }

    /// Checks every structural invariant of the state.
    pub fn validate(&self, groups: &[Group]) -> Result<()> {
        let d = &self.dims;
        let bad = |m: String| Err(Error::InvalidState(m));
        if self.xi.len() != d.n_scores()
            || self.eta.len() != d.n_scores()
            || self.g.len() != d.n_subjects * d.k
            || self.mu_common.len() != d.k
            || self.s_common.len() != d.k
            || self.mu_group.len() != d.k
            || self.s_group.len() != d.k
            || self.mu_subj.len() != d.n_subjects * d.k * d.j_s
            || self.s_subj.len() != self.mu_subj.len()
            || self.omega.len() != d.k
            || self.p_star.len() != d.k * 2 * d.j_s
            || self.p.len() != self.p_star.len()
        {
            return bad("array lengths do not match dimensions".into());
        }
        derive_z(d, &self.g, &self.eta, groups)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau = {} must be positive", self.tau));
        }
        let s_all = self
            .s_common
            .iter()
            .chain(self.s_group.iter().flatten())
            .chain(&self.s_subj);
        if let Some(s) = s_all.into_iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return bad(format!("cluster precision {s} must be positive"));
        }
        for row in &self.omega {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return bad(format!("omega row {row:?} is not a simplex"));
            }
        }
        for chunk in self.p.chunks_exact(d.j_s) {
            let sum: f64 = chunk.iter().sum();
            if chunk.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return bad("stick weights do not sum to one".into());
            }
        }
        Ok(())
    }
}

/// Centred curves reduced to what the Gaussian likelihood needs.
#[derive(Clone, Debug)]
pub struct SufficientStats {
    pub dims: Dims,
    pub n_timepoints: usize,
    /// `[u][i][k]`: unweighted dot product of the centred curve with phi_k.
    pub b: Vec<f64>,
    /// Per curve: squared norm of the centred curve.
    pub yy: Vec<f64>,
    /// Unweighted Gram matrix of the eigenfunctions.
    pub gram: DMatrix<f64>,
}

impl SufficientStats {
    /// `centred` holds curves `[u][i][t]`; `phi` the K eigenfunctions.
    pub fn new(centred: &[f64], n_subjects: usize, n_channels: usize, phi: &[Vec<f64>], j_s: usize) -> Result<Self> {
        let k = phi.len();
        if k == 0 {
            return Err(Error::Dimension("no eigenfunctions".into()));
        }
        let t = phi[0].len();
        if phi.iter().any(|p| p.len() != t) || centred.len() != n_subjects * n_channels * t {
            return Err(Error::Dimension("curves and eigenfunctions disagree in length".into()));
        }
        let dims = Dims {
            n_subjects,
            n_channels,
            k,
            j_s,
        };
        let mut b = Vec::with_capacity(dims.n_scores());
        let mut yy = Vec::with_capacity(n_subjects * n_channels);
        for curve in centred.chunks_exact(t) {
            yy.push(curve.iter().map(|y| y * y).sum());
            for p in phi {
                b.push(curve.iter().zip(p).map(|(y, f)| y * f).sum());
            }
        }
        let gram = DMatrix::from_fn(k, k, |a, c| phi[a].iter().zip(&phi[c]).map(|(x, y)| x * y).sum());
        Ok(Self {
            dims,
            n_timepoints: t,
            b,
            yy,
            gram,
        })
    }

    /// Statistics of `curves` (not yet centred) on the basis.
    pub fn from_basis(curves: &[f64], basis: &EigenBasis, j_s: usize) -> Result<Self> {
        let centred = centre(curves, &basis.mean_curve)?;
        Self::new(&centred, basis.n_subjects, basis.n_channels, &basis.eigenfunctions, j_s)
    }

    pub fn n_points(&self) -> f64 {
        (self.dims.n_subjects * self.dims.n_channels * self.n_timepoints) as f64
    }

    /// Residual sum of squares of one curve under scores `xi_c` (length K).
    pub fn curve_ssr(&self, curve: usize, xi_c: &[f64]) -> f64 {
        let k = self.dims.k;
        let b = &self.b[curve * k..(curve + 1) * k];
        let mut ssr = self.yy[curve];
        for a in 0..k {
            ssr -= 2.0 * xi_c[a] * b[a];
            for c in 0..k {
                ssr += xi_c[a] * self.gram[(a, c)] * xi_c[c];
            }
        }
        ssr
    }

    pub fn ssr(&self, xi: &[f64]) -> f64 {
        let k = self.dims.k;
        xi.chunks_exact(k).enumerate().map(|(c, x)| self.curve_ssr(c, x)).sum()
    }

    /// Gaussian log-likelihood for total residual sum of squares `ssr`.
    pub fn loglik_from_ssr(&self, tau: f64, ssr: f64) -> f64 {
        0.5 * self.n_points() * (tau.ln() - LN_2PI) - 0.5 * tau * ssr
    }
}

pub fn centre(curves: &[f64], mean: &[f64]) -> Result<Vec<f64>> {
    let t = mean.len();
    if t == 0 || curves.len() % t != 0 {
        return Err(Error::Dimension("curve length does not match the mean curve".into()));
    }
    Ok(curves
        .chunks_exact(t)
        .flat_map(|c| c.iter().zip(mean).map(|(y, m)| y - m))
        .collect())
}

/// Log-likelihood of the centred curves `[u][i][t]`, evaluated point by point.
pub fn loglik_data(state: &ModelState, centred: &[f64], phi: &[Vec<f64>]) -> Result<f64> {
    if !(state.tau > 0.0) {
        return Err(Error::InvalidState(format!("tau = {} must be positive", state.tau)));
    }
    let d = state.dims;
    let t = phi.first().map_or(0, |p| p.len());
    if phi.len() != d.k || centred.len() != d.n_subjects * d.n_channels * t {
        return Err(Error::Dimension("state, curves and eigenfunctions disagree".into()));
    }
    let mut total = 0.0;
    for (c, curve) in centred.chunks_exact(t).enumerate() {
        let xi = &state.xi[c * d.k..(c + 1) * d.k];
        for (j, y) in curve.iter().enumerate() {
            let fit: f64 = xi.iter().zip(phi).map(|(x, p)| x * p[j]).sum();
            total += normal_logpdf(*y, fit, state.tau);
        }
    }
    Ok(total)
}

/// Log-likelihood with the data given by the fPCA mean and uncentred curves.
pub fn loglik_data_basis(state: &ModelState, curves: &[f64], basis: &EigenBasis) -> Result<f64> {
    loglik_data(state, &centre(curves, &basis.mean_curve)?, &basis.eigenfunctions)
}

/// Sum over all scores of log N(xi; mu_z, 1/s_z).
pub fn logprior_scores(state: &ModelState, groups: &[Group]) -> Result<f64> {
    let d = state.dims;
    let mut total = 0.0;
    for u in 0..d.n_subjects {
        for i in 0..d.n_channels {
            for k in 0..d.k {
                let z = state.z(u, i, k, groups[u]);
                let (mu, s) = state.cluster_params(u, k, z, groups[u]);
                if !(s > 0.0) {
                    return Err(Error::InvalidState(format!("cluster {z} has precision {s}")));
                }
                total += normal_logpdf(state.xi[d.score(u, i, k)], mu, s);
            }
        }
    }
    Ok(total)
}
