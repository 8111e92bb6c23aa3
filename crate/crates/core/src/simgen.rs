//! Synthetic multi-subject, multi-channel datasets with planted partitions.
//!
//! Scores live in two dimensions. In the first, every subject belongs to its
//! group's cluster. In the second, regular subjects belong to their group's
//! cluster while outlier subjects split their channels between two private
//! clusters. Outlier clusters sit on the opposite side of zero from the
//! regular subjects so each group's pooled second-dimension mean is zero; the
//! group means then differ only along the first dimension and the score
//! covariance stays diagonal, which keeps the planted eigenfunctions the
//! principal axes of the data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FunctionalDataset, Group};
use crate::dist::sample_normal;
use crate::error::{Error, Result};
use crate::fpca::{trapezoid_weights, weighted_inner};
use crate::model::FIRST_SUBJECT_LABEL;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n_subjects: usize,
    pub n_channels: usize,
    pub n_timepoints: usize,
    /// Subjects 1..=n_group_a form group A, the rest group B.
    pub n_group_a: usize,
    /// `[group][dimension]` score means of regular subjects.
    pub group_means: [[f64; 2]; 2],
    pub cluster_sd: f64,
    /// 1-based ids of subjects with two recording-level clusters in dimension 2.
    pub outlier_subjects: Vec<usize>,
    /// Half-distance between the two outlier clusters of a subject.
    pub outlier_offset: f64,
    pub snr: f64,
    pub seed: u64,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self::scaled(40, 50, 150)
    }
}

impl SimDesign {
    /// Default design at another size, outliers at the first two and last two subjects.
    pub fn scaled(n_subjects: usize, n_channels: usize, n_timepoints: usize) -> Self {
        Self {
            n_subjects,
            n_channels,
            n_timepoints,
            n_group_a: n_subjects / 2,
            group_means: [[40.0, 10.0], [-40.0, -10.0]],
            cluster_sd: 5.0,
            outlier_subjects: default_outliers(n_subjects),
            outlier_offset: 15.0,
            snr: 6.0,
            seed: 1,
        }
    }

    pub fn group_of(&self, u: usize) -> Group {
        if u < self.n_group_a {
            Group::A
        } else {
            Group::B
        }
    }

    fn is_outlier(&self, u: usize) -> bool {
        self.outlier_subjects.contains(&(u + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_timepoints < 16 {
            return bad(format!("need at least 16 time points, got {}", self.n_timepoints));
        }
        if self.n_channels < 2 {
            return bad("need at least 2 channels".into());
        }
        let n_b = self.n_subjects.saturating_sub(self.n_group_a);
        if self.n_group_a < 2 || n_b < 2 {
            return bad(format!("group sizes {} and {n_b} must both be at least 2", self.n_group_a));
        }
        if let Some(u) = self.outlier_subjects.iter().find(|&&u| u == 0 || u > self.n_subjects) {
            return bad(format!("outlier subject {u} outside 1..={}", self.n_subjects));
        }
        for g in Group::ALL {
            let members = (0..self.n_subjects).filter(|&u| self.group_of(u) == g);
            if members.clone().all(|u| self.is_outlier(u)) {
                return bad(format!("group {} has no regular subject", g.code()));
            }
        }
        if !(self.snr > 0.0) {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        if !(self.cluster_sd >= 0.0) {
            return bad("cluster_sd must be nonnegative".into());
        }
        Ok(())
    }
}

pub fn default_outliers(n_subjects: usize) -> Vec<usize> {
    let mut v = vec![1, 2, n_subjects.saturating_sub(1), n_subjects];
    v.retain(|&u| u >= 1);
    v.sort_unstable();
    v.dedup();
    v
}

/// Recording-level truth for one (subject, dimension).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingTruth {
    /// 0-based subject index.
    pub subject: usize,
    /// 0-based dimension index.
    pub dim: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Per dimension, subject-level labels: group code, or 4 + u for subject-specific subjects.
    pub subject_partitions: Vec<Vec<usize>>,
    pub recording_partitions: Vec<RecordingTruth>,
    /// `[u][i][k]`.
    pub scores: Vec<f64>,
    pub eigenfunctions: Vec<Vec<f64>>,
    /// Noise-free curves `[u][i][t]`.
    #[serde(skip)]
    pub signal: Vec<f64>,
    pub noise_variance: f64,
}

/// Two curves on the grid 1..=T: a single bump and a two-lobed wave,
/// orthonormal under trapezoidal quadrature.
pub fn make_eigenfunctions(t: usize) -> Result<[Vec<f64>; 2]> {
    if t < 16 {
        return Err(Error::Config(format!("need at least 16 time points, got {t}")));
    }
    let grid = time_grid(t);
    let w = trapezoid_weights(&grid);
    let x: Vec<f64> = (0..t).map(|j| j as f64 / (t - 1) as f64).collect();
    let bump = |c: f64, s: f64, v: f64| (-0.5 * ((v - c) / s).powi(2)).exp();
    let mut f1: Vec<f64> = x.iter().map(|&v| bump(0.3, 0.12, v)).collect();
    let mut f2: Vec<f64> = x.iter().map(|&v| bump(0.45, 0.08, v) - bump(0.75, 0.08, v)).collect();
    let n1 = weighted_inner(&f1, &f1, &w).sqrt();
    f1.iter_mut().for_each(|v| *v /= n1);
    let proj = weighted_inner(&f2, &f1, &w);
    f2.iter_mut().zip(&f1).for_each(|(a, b)| *a -= proj * b);
    let n2 = weighted_inner(&f2, &f2, &w).sqrt();
    f2.iter_mut().for_each(|v| *v /= n2);
    // A second pass removes the rounding left by the first.
    let proj = weighted_inner(&f2, &f1, &w);
    f2.iter_mut().zip(&f1).for_each(|(a, b)| *a -= proj * b);
    let n2 = weighted_inner(&f2, &f2, &w).sqrt();
    f2.iter_mut().for_each(|v| *v /= n2);
    Ok([f1, f2])
}

pub fn time_grid(t: usize) -> Vec<f64> {
    (1..=t).map(|v| v as f64).collect()
}

/// Draws one dataset and its planted truth. `snr = inf` gives noise-free curves.
pub fn simulate(design: &SimDesign) -> Result<(FunctionalDataset, GroundTruth)> {
    design.validate()?;
    let (u_n, n, t) = (design.n_subjects, design.n_channels, design.n_timepoints);
    let phi = make_eigenfunctions(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let sd = design.cluster_sd;
    let var = sd * sd;

    // Outlier cluster centre per group, chosen so the group's dimension-2 mean is zero.
    let mut centre = [0.0; 2];
    for g in Group::ALL {
        let members: Vec<usize> = (0..u_n).filter(|&u| design.group_of(u) == g).collect();
        let n_out = members.iter().filter(|&&u| design.is_outlier(u)).count();
        if n_out > 0 {
            let n_reg = (members.len() - n_out) as f64;
            centre[g.index()] = -n_reg / n_out as f64 * design.group_means[g.index()][1];
        }
    }

    let half = n.div_ceil(2);
    let mut scores = vec![0.0; u_n * n * 2];
    let mut recording = Vec::new();
    for u in 0..u_n {
        let gi = design.group_of(u).index();
        let m = design.group_means[gi];
        for i in 0..n {
            let base = (u * n + i) * 2;
            scores[base] = sample_normal(&mut rng, m[0], var);
            scores[base + 1] = if design.is_outlier(u) {
                let shift = if i < half { design.outlier_offset } else { -design.outlier_offset };
                sample_normal(&mut rng, centre[gi] + shift, var)
            } else {
                sample_normal(&mut rng, m[1], var)
            };
        }
        if design.is_outlier(u) {
            recording.push(RecordingTruth {
                subject: u,
                dim: 1,
                labels: (0..n)
                    .map(|i| if i < half { FIRST_SUBJECT_LABEL } else { FIRST_SUBJECT_LABEL + 1 })
                    .collect(),
            });
        }
    }
    decorrelate(&mut scores);

    let mut signal = vec![0.0; u_n * n * t];
    for (c, curve) in signal.chunks_exact_mut(t).enumerate() {
        for (j, v) in curve.iter_mut().enumerate() {
            *v = scores[2 * c] * phi[0][j] + scores[2 * c + 1] * phi[1][j];
        }
    }
    let signal_var = {
        let m = signal.iter().sum::<f64>() / signal.len() as f64;
        signal.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / signal.len() as f64
    };
    let noise_variance = if design.snr.is_infinite() { 0.0 } else { signal_var / design.snr };
    let values: Vec<f64> = if noise_variance > 0.0 {
        signal.iter().map(|&s| sample_normal(&mut rng, s, noise_variance)).collect()
    } else {
        signal.clone()
    };

    let groups: Vec<Group> = (0..u_n).map(|u| design.group_of(u)).collect();
    let subject_partitions = vec![
        groups.iter().map(|g| g.code() as usize).collect(),
        (0..u_n)
            .map(|u| {
                if design.is_outlier(u) {
                    FIRST_SUBJECT_LABEL + u
                } else {
                    groups[u].code() as usize
                }
            })
            .collect(),
    ];
    let data = FunctionalDataset::new(values, u_n, n, time_grid(t), groups)?;
    Ok((
        data,
        GroundTruth {
            subject_partitions,
            recording_partitions: recording,
            scores,
            eigenfunctions: phi.to_vec(),
            signal,
            noise_variance,
        },
    ))
}

/// Shifts dimension-2 scores along the centred dimension-1 scores so their sample covariance is exactly zero.
fn decorrelate(scores: &mut [f64]) {
    let n = scores.len() / 2;
    let m1 = scores.iter().step_by(2).sum::<f64>() / n as f64;
    let m2 = scores.iter().skip(1).step_by(2).sum::<f64>() / n as f64;
    let mut s11 = 0.0;
    let mut s12 = 0.0;
    for c in 0..n {
        let a = scores[2 * c] - m1;
        s11 += a * a;
        s12 += a * (scores[2 * c + 1] - m2);
    }
    if s11 == 0.0 {
        return;
    }
    let beta = s12 / s11;
    for c in 0..n {
        let a = scores[2 * c] - m1;
        scores[2 * c + 1] -= beta * a;
    }
}

/// Seed of replicate `r` derived from a base seed.
pub fn replicate_seed(base: u64, replicate: usize) -> u64 {
    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(replicate as u64 + 1);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenfunctions_are_orthonormal() {
        for t in [16, 100, 150] {
            let [a, b] = make_eigenfunctions(t).unwrap();
            let w = trapezoid_weights(&time_grid(t));
            assert!(weighted_inner(&a, &b, &w).abs() < 1e-10);
            assert!((weighted_inner(&a, &a, &w) - 1.0).abs() < 1e-10);
            assert!((weighted_inner(&b, &b, &w) - 1.0).abs() < 1e-10);
        }
        assert_eq!(make_eigenfunctions(50).unwrap(), make_eigenfunctions(50).unwrap());
        assert!(make_eigenfunctions(15).is_err());
    }

    #[test]
    fn default_design_shape_and_truth() {
        let d = SimDesign::default();
        assert_eq!(d.outlier_subjects, vec![1, 2, 39, 40]);
        let (data, truth) = simulate(&d).unwrap();
        assert_eq!((data.n_subjects(), data.n_channels(), data.n_timepoints()), (40, 50, 150));
        let dim2 = &truth.subject_partitions[1];
        let specific = dim2.iter().filter(|&&l| l >= FIRST_SUBJECT_LABEL).count();
        assert_eq!(specific, 4);
        assert_eq!(truth.recording_partitions.len(), 4);
        let dim1 = &truth.subject_partitions[0];
        assert!(dim1.iter().all(|&l| l == 2 || l == 3));
    }

    #[test]
    fn infinite_snr_is_noise_free() {
        let mut d = SimDesign::scaled(6, 4, 20);
        d.outlier_subjects = vec![1, 6];
        d.snr = f64::INFINITY;
        let (data, truth) = simulate(&d).unwrap();
        assert_eq!(data.values(), truth.signal.as_slice());
    }

    #[test]
    fn invalid_designs() {
        let mut d = SimDesign::scaled(6, 4, 20);
        d.outlier_subjects = vec![7];
        assert!(simulate(&d).is_err());
        d.outlier_subjects = vec![1, 2, 3];
        assert!(simulate(&d).is_err());
        let mut d = SimDesign::scaled(3, 4, 20);
        d.outlier_subjects.clear();
        assert!(simulate(&d).is_err());
    }
}
