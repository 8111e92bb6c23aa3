//! Convergence diagnostics: split R-hat, effective sample size, trace and density exports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RHAT_THRESHOLD: f64 = 1.1;
pub const DEFAULT_ESS_THRESHOLD: f64 = 1000.0;

/// Draws of one scalar parameter, one vector per chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainMatrix {
    pub name: String,
    pub chains: Vec<Vec<f64>>,
}

impl ChainMatrix {
    pub fn new(name: impl Into<String>, chains: Vec<Vec<f64>>) -> Result<Self> {
        let name = name.into();
        let len = chains.first().map(Vec::len).unwrap_or(0);
        if chains.is_empty() || len < 2 {
            return Err(Error::Input(format!("`{name}` needs at least one chain of two draws")));
        }
        if chains.iter().any(|c| c.len() != len) {
            return Err(Error::Dimension(format!("chains of `{name}` differ in length")));
        }
        if chains.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("`{name}` contains non-finite draws")));
        }
        Ok(Self { name, chains })
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chains[0].len()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Potential scale reduction over chains split in half; the middle draw of odd chains is dropped.
pub fn bgr_statistic(cm: &ChainMatrix) -> Result<f64> {
    let n_full = cm.n_draws();
    if n_full < 4 {
        return Err(Error::Input(format!(
            "`{}`: split R-hat needs at least 4 draws per chain, got {n_full}",
            cm.name
        )));
    }
    let half = n_full / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * cm.n_chains());
    for c in &cm.chains {
        halves.push(&c[..half]);
        halves.push(&c[n_full - half..]);
    }
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = mean(&halves.iter().map(|h| variance(h)).collect::<Vec<_>>());
    let b = n * variance(&means);
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ess {
    pub value: f64,
    /// Set when some chain is constant; its contribution is its length.
    pub degenerate: bool,
}

/// Integrated autocorrelation time by Geyer's initial positive sequence.
fn autocorrelation_time(x: &[f64]) -> Option<f64> {
    let n = x.len();
    let m = mean(x);
    let centred: Vec<f64> = x.iter().map(|v| v - m).collect();
    let c0 = centred.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return None;
    }
    let rho = |lag: usize| -> f64 {
        centred[..n - lag]
            .iter()
            .zip(&centred[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
            / c0
    };
    let mut sum_pairs = 0.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = if lag == 0 { 1.0 + rho(1) } else { rho(lag) + rho(lag + 1) };
        if pair <= 0.0 {
            break;
        }
        sum_pairs += pair;
        lag += 2;
    }
    Some((2.0 * sum_pairs - 1.0).max(1.0 / n as f64))
}

/// Effective sample size summed over chains.
pub fn effective_sample_size(cm: &ChainMatrix) -> Result<Ess> {
    if cm.n_draws() < 8 {
        return Err(Error::Input(format!(
            "`{}`: ESS needs at least 8 draws per chain, got {}",
            cm.name,
            cm.n_draws()
        )));
    }
    let mut value = 0.0;
    let mut degenerate = false;
    for c in &cm.chains {
        match autocorrelation_time(c) {
            Some(tau) => value += c.len() as f64 / tau,
            None => {
                degenerate = true;
                value += c.len() as f64;
            }
        }
    }
    Ok(Ess { value, degenerate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub chain: usize,
    pub value: f64,
}

/// Histogram and Gaussian kernel density estimate of one chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub chain: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub kde_grid: Vec<f64>,
    pub kde: Vec<f64>,
}

pub const KDE_POINTS: usize = 512;

/// Long-format trace rows (iterations numbered from 1 within each chain).
pub fn trace_rows(cm: &ChainMatrix) -> Vec<TraceRow> {
    cm.chains
        .iter()
        .enumerate()
        .flat_map(|(c, xs)| {
            xs.iter().enumerate().map(move |(t, &v)| TraceRow {
                iteration: t + 1,
                chain: c + 1,
                value: v,
            })
        })
        .collect()
}

/// Histogram with `bins` equal-width bins and a KDE on a grid padded by four bandwidths.
pub fn export_trace_density(cm: &ChainMatrix, bins: usize) -> Result<(Vec<TraceRow>, Vec<Density>)> {
    if bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    let mut densities = Vec::with_capacity(cm.n_chains());
    for (c, xs) in cm.chains.iter().enumerate() {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo_e, hi_e) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let width = (hi_e - lo_e) / bins as f64;
        let bin_edges: Vec<f64> = (0..=bins).map(|j| lo_e + j as f64 * width).collect();
        let mut counts = vec![0usize; bins];
        for &x in xs {
            let j = (((x - lo_e) / width) as usize).min(bins - 1);
            counts[j] += 1;
        }
        // Silverman's rule, floored so constant chains still get a proper kernel.
        let n = xs.len() as f64;
        let sd = variance(xs).sqrt();
        let spread = (hi_e - lo_e).abs().max(lo.abs()).max(1.0);
        let h = (1.06 * sd * n.powf(-0.2)).max(1e-3 * spread);
        let g_lo = lo - 4.0 * h;
        let g_hi = hi + 4.0 * h;
        let step = (g_hi - g_lo) / (KDE_POINTS - 1) as f64;
        let kde_grid: Vec<f64> = (0..KDE_POINTS).map(|j| g_lo + j as f64 * step).collect();
        let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
        let kde = kde_grid
            .iter()
            .map(|&g| {
                xs.iter()
                    .map(|&x| {
                        let z = (g - x) / h;
                        (-0.5 * z * z).exp()
                    })
                    .sum::<f64>()
                    * norm
            })
            .collect();
        densities.push(Density {
            chain: c + 1,
            bin_edges,
            counts,
            kde_grid,
            kde,
        });
    }
    Ok((trace_rows(cm), densities))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub parameter: String,
    pub rhat: f64,
    pub ess: f64,
    pub degenerate: bool,
    pub flagged: bool,
}

/// R-hat and ESS with a flag when either threshold is missed.
pub fn diagnose(cm: &ChainMatrix, rhat_threshold: f64, ess_threshold: f64) -> Result<ParameterDiagnostics> {
    let rhat = bgr_statistic(cm)?;
    let ess = effective_sample_size(cm)?;
    Ok(ParameterDiagnostics {
        parameter: cm.name.clone(),
        rhat,
        ess: ess.value,
        degenerate: ess.degenerate,
        flagged: !(rhat < rhat_threshold) || ess.value < ess_threshold,
    })
}

/// Names of the parameters monitored by default.
pub fn is_monitored(name: &str) -> bool {
    ["omega_", "mu_common_", "s_common_", "mu_group_", "s_group_", "tau"]
        .iter()
        .any(|p| name.starts_with(p))
}
