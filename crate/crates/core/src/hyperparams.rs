//! Fixed prior constants estimated from empirical fPC scores, plus sensitivity scenarios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Group;
use crate::error::{Error, Result};
use crate::fpca::EigenBasis;

pub const DEFAULT_BOOT_REPS: usize = 1000;
pub const DEFAULT_J_S: usize = 10;
pub const DEFAULT_DELTA: [f64; 3] = [9.0 / 20.0, 9.0 / 20.0, 2.0 / 20.0];
pub const DEFAULT_TAU_SHAPE: f64 = 0.01;
pub const DEFAULT_TAU_RATE: f64 = 0.01;

/// Prior of one cluster's parameters: mean ~ N(mean, h_inv), precision^(-1/2) ~ U(0, gamma).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPrior {
    pub mean: f64,
    pub h_inv: f64,
    pub gamma: f64,
}

impl ClusterPrior {
    pub fn precision(&self) -> f64 {
        1.0 / self.h_inv
    }

    /// Lower truncation point of the cluster precision.
    pub fn s_lower(&self) -> f64 {
        1.0 / (self.gamma * self.gamma)
    }
}

/// Empirical summaries the recipe is computed from; kept so scenarios can re-derive the priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub sd: f64,
    pub mean: f64,
    pub range: f64,
    /// Variance of bootstrap resample means.
    pub boot_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    /// gamma = sd^exponent for all three cluster families.
    pub gamma_exponent: f64,
    /// h_inv = factor x bootstrap variance for common and group clusters.
    pub h_factor: f64,
    pub boot_reps: usize,
    pub seed: u64,
    /// Per k: pooled summary, then group A and group B summaries.
    pub pooled: Vec<ScoreSummary>,
    pub by_group: Vec<[ScoreSummary; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub k: usize,
    /// Subject-specific labels per (u, k) are 4..=3 + j_s.
    pub j_s: usize,
    pub common: Vec<ClusterPrior>,
    /// `[k][group index]`.
    pub group: Vec<[ClusterPrior; 2]>,
    /// Shared by every subject of the group and every label j >= 4; `[k][group index]`.
    pub subject: Vec<[ClusterPrior; 2]>,
    pub delta: [f64; 3],
    pub alpha: Vec<f64>,
    pub tau_shape: f64,
    pub tau_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<Recipe>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Variance (n - 1 divisor) of `reps` means of size-`size` resamples drawn with replacement.
pub fn bootstrap_mean_variance<R: Rng + ?Sized>(rng: &mut R, xs: &[f64], size: usize, reps: usize) -> f64 {
    let means: Vec<f64> = (0..reps)
        .map(|_| (0..size).map(|_| xs[rng.random_range(0..xs.len())]).sum::<f64>() / size as f64)
        .collect();
    let m = mean(&means);
    means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (reps.max(2) - 1) as f64
}

fn summarize<R: Rng + ?Sized>(rng: &mut R, xs: &[f64], boot_size: usize, reps: usize) -> ScoreSummary {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ScoreSummary {
        sd: sample_sd(xs),
        mean: mean(xs),
        range: hi - lo,
        boot_var: bootstrap_mean_variance(rng, xs, boot_size, reps),
    }
}

/// Estimates every prior constant from the empirical scores of `basis`.
///
/// `groups[u]` is the group of subject u.
pub fn estimate_hyperparams(basis: &EigenBasis, groups: &[Group], boot_reps: usize, seed: u64) -> Result<HyperParams> {
    if groups.len() != basis.n_subjects {
        return Err(Error::Dimension(format!(
            "{} group labels for {} subjects",
            groups.len(),
            basis.n_subjects
        )));
    }
    if boot_reps < 2 {
        return Err(Error::Config("boot_reps must be at least 2".into()));
    }
    let k_dim = basis.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pooled = Vec::with_capacity(k_dim);
    let mut by_group = Vec::with_capacity(k_dim);
    for k in 0..k_dim {
        let mut all = Vec::new();
        let mut split: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for (u, g) in groups.iter().enumerate() {
            for i in 0..basis.n_channels {
                let x = basis.score(u, i, k);
                all.push(x);
                split[g.index()].push(x);
            }
        }
        for (gi, xs) in split.iter().enumerate() {
            if xs.len() < 2 {
                return Err(Error::Estimation(format!(
                    "group {} has {} scores in dimension {}; need at least 2",
                    Group::ALL[gi].code(),
                    xs.len(),
                    k + 1
                )));
            }
        }
        pooled.push(summarize(&mut rng, &all, all.len(), boot_reps));
        let a = summarize(&mut rng, &split[0], split[0].len().div_ceil(2), boot_reps);
        let b = summarize(&mut rng, &split[1], split[1].len().div_ceil(2), boot_reps);
        by_group.push([a, b]);
    }
    let recipe = Recipe {
        gamma_exponent: 2.0,
        h_factor: 2.0,
        boot_reps,
        seed,
        pooled,
        by_group,
    };
    let mut hp = HyperParams {
        k: k_dim,
        j_s: DEFAULT_J_S,
        common: Vec::new(),
        group: Vec::new(),
        subject: Vec::new(),
        delta: DEFAULT_DELTA,
        alpha: vec![1.0; k_dim],
        tau_shape: DEFAULT_TAU_SHAPE,
        tau_rate: DEFAULT_TAU_RATE,
        recipe: Some(recipe),
    };
    hp.rederive()?;
    Ok(hp)
}

impl HyperParams {
    /// Recomputes the cluster priors from the stored recipe.
    fn rederive(&mut self) -> Result<()> {
        let Some(r) = &self.recipe else {
            return Err(Error::Config("hyperparameters carry no recipe to re-derive from".into()));
        };
        let gamma = |sd: f64, what: &str| -> Result<f64> {
            let g = sd.powf(r.gamma_exponent);
            if g > 0.0 && g.is_finite() {
                Ok(g)
            } else {
                Err(Error::Estimation(format!("zero score variance in {what}")))
            }
        };
        let positive = |v: f64, what: &str| -> Result<f64> {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Estimation(format!("non-positive bootstrap variance in {what}")))
            }
        };
        let mut common = Vec::new();
        let mut group = Vec::new();
        let mut subject = Vec::new();
        for (k, (p, g)) in r.pooled.iter().zip(&r.by_group).enumerate() {
            let dim = format!("dimension {}", k + 1);
            common.push(ClusterPrior {
                mean: 0.0,
                h_inv: positive(r.h_factor * p.boot_var, &dim)?,
                gamma: gamma(p.sd, &dim)?,
            });
            let mut gp = [common[k]; 2];
            let mut sp = [common[k]; 2];
            for d in 0..2 {
                let what = format!("group {} of {dim}", Group::ALL[d].code());
                let s = &g[d];
                let gam = gamma(s.sd, &what)?;
                gp[d] = ClusterPrior {
                    mean: s.mean,
                    h_inv: positive(r.h_factor * s.boot_var, &what)?,
                    gamma: gam,
                };
                sp[d] = ClusterPrior {
                    mean: s.mean,
                    h_inv: positive((s.range / 2.5).powi(2), &what)?,
                    gamma: gam,
                };
            }
            group.push(gp);
            subject.push(sp);
        }
        self.common = common;
        self.group = group;
        self.subject = subject;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.j_s == 0 {
            return bad("j_s must be at least 1".into());
        }
        if self.common.len() != self.k
            || self.group.len() != self.k
            || self.subject.len() != self.k
            || self.alpha.len() != self.k
        {
            return bad(format!("per-dimension arrays must have length k = {}", self.k));
        }
        let priors = self
            .common
            .iter()
            .chain(self.group.iter().flatten())
            .chain(self.subject.iter().flatten());
        for p in priors {
            if !(p.h_inv > 0.0 && p.gamma > 0.0 && p.mean.is_finite() && p.h_inv.is_finite() && p.gamma.is_finite())
            {
                return bad(format!("cluster prior {p:?} must have finite mean and positive h_inv, gamma"));
            }
        }
        if self.delta.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return bad(format!("delta entries must be positive, got {:?}", self.delta));
        }
        if self.alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad(format!("alpha entries must be positive, got {:?}", self.alpha));
        }
        if !(self.tau_shape > 0.0 && self.tau_rate > 0.0 && self.tau_shape.is_finite() && self.tau_rate.is_finite()) {
            return bad("tau prior shape and rate must be positive".into());
        }
        Ok(())
    }

    /// Number of labels: 3 shared plus j_s subject-specific.
    pub fn n_labels(&self) -> usize {
        3 + self.j_s
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("hyperparameters serialize");
        let hash = Sha256::digest(&json);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sensitivity settings for the prior constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// gamma = sd^2.2 for every cluster family.
    S1,
    /// Factor 4 on the bootstrap variances of common and group means.
    S2,
    S3,
    S4,
    S5,
    S6,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            "S4" => Ok(Scenario::S4),
            "S5" => Ok(Scenario::S5),
            "S6" => Ok(Scenario::S6),
            other => Err(Error::Config(format!("unknown scenario `{other}` (expected S1..S6)"))),
        }
    }
}

pub fn apply_scenario(hp: &HyperParams, scenario: Scenario) -> Result<HyperParams> {
    let mut out = hp.clone();
    match scenario {
        Scenario::S1 | Scenario::S2 => {
            let recipe = out
                .recipe
                .as_mut()
                .ok_or_else(|| Error::Config(format!("{scenario:?} needs estimated hyperparameters")))?;
            if scenario == Scenario::S1 {
                recipe.gamma_exponent = 2.2;
            } else {
                recipe.h_factor = 4.0;
            }
            out.rederive()?;
        }
        Scenario::S3 => out.delta = [0.4, 0.4, 0.2],
        Scenario::S4 => out.delta = [1.0 / 3.0; 3],
        Scenario::S5 => out.alpha = vec![0.5; out.k],
        Scenario::S6 => out.alpha = vec![2.0; out.k],
    }
    Ok(out)
}

/// Patches individual constants.
///
/// Keys: `delta` (three comma-separated values), `alpha`, `tau_shape`,
/// `tau_rate`, `j_s`, and `<family>.<field>` with family `common`, `group` or
/// `subject` and field `mean`, `h_inv` or `gamma`. Per-dimension keys accept an
/// optional 1-based dimension suffix (`alpha.2`, `common.gamma.1`) and group
/// keys an optional group code after it (`group.mean.1.3`); omitted indices
/// apply to all.
pub fn apply_override(hp: &HyperParams, key: &str, value: &str) -> Result<HyperParams> {
    let mut out = hp.clone();
    let parse = |v: &str| -> Result<f64> {
        v.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("override `{key}`: `{v}` is not a number")))
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let dims = |idx: Option<&&str>| -> Result<Vec<usize>> {
        match idx {
            None => Ok((0..hp.k).collect()),
            Some(s) => {
                let k: usize = s
                    .parse()
                    .map_err(|_| Error::Config(format!("override `{key}`: bad dimension `{s}`")))?;
                if k == 0 || k > hp.k {
                    return Err(Error::Config(format!("override `{key}`: dimension {k} outside 1..={}", hp.k)));
                }
                Ok(vec![k - 1])
            }
        }
    };
    match parts.as_slice() {
        ["delta"] => {
            let vals: Vec<f64> = value.split(',').map(parse).collect::<Result<_>>()?;
            if vals.len() != 3 {
                return Err(Error::Config("delta needs three comma-separated values".into()));
            }
            out.delta = [vals[0], vals[1], vals[2]];
        }
        ["tau_shape"] => out.tau_shape = parse(value)?,
        ["tau_rate"] => out.tau_rate = parse(value)?,
        ["j_s"] => {
            out.j_s = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("j_s must be a positive integer, got `{value}`")))?
        }
        ["alpha", rest @ ..] if rest.len() <= 1 => {
            let v = parse(value)?;
            for k in dims(rest.first())? {
                out.alpha[k] = v;
            }
        }
        [family @ ("common" | "group" | "subject"), field, rest @ ..] if rest.len() <= 2 => {
            let v = parse(value)?;
            if *family == "common" && rest.len() > 1 {
                return Err(Error::Config(format!("override `{key}`: common clusters have no group")));
            }
            let groups: Vec<usize> = match rest.get(1) {
                None => vec![0, 1],
                Some(code) => {
                    let c: u8 = code
                        .parse()
                        .map_err(|_| Error::Config(format!("override `{key}`: bad group `{code}`")))?;
                    vec![Group::from_code(c).map_err(|e| Error::Config(e.to_string()))?.index()]
                }
            };
            for k in dims(rest.first())? {
                let targets: Vec<&mut ClusterPrior> = match *family {
                    "common" => vec![&mut out.common[k]],
                    "group" => out.group[k]
                        .iter_mut()
                        .enumerate()
                        .filter(|(d, _)| groups.contains(d))
                        .map(|(_, p)| p)
                        .collect(),
                    _ => out.subject[k]
                        .iter_mut()
                        .enumerate()
                        .filter(|(d, _)| groups.contains(d))
                        .map(|(_, p)| p)
                        .collect(),
                };
                for p in targets {
                    match *field {
                        "mean" => p.mean = v,
                        "h_inv" => p.h_inv = v,
                        "gamma" => p.gamma = v,
                        other => return Err(Error::Config(format!("unknown cluster prior field `{other}`"))),
                    }
                }
            }
        }
        _ => return Err(Error::Config(format!("unknown hyperparameter key `{key}`"))),
    }
    out.validate()?;
    Ok(out)
}
