//! Systematic-scan Gibbs sampler, multi-chain orchestration and draw archives.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FunctionalDataset, Group};
use crate::dist::{
    log_sum_exp, normal_logpdf, sample_beta, sample_dirichlet, sample_gamma, sample_log_categorical, sample_normal,
    sample_truncated_gamma,
};
use crate::error::{Error, Result};
use crate::fpca::EigenBasis;
use crate::hyperparams::{ClusterPrior, HyperParams};
use crate::model::{
    centre, loglik_data, logprior_scores, stick_mass, sticks_to_weights, Dims, ModelState, SufficientStats, COMMON,
    FIRST_SUBJECT_LABEL,
};

/// Relative tolerance of the incremental-versus-recomputed log-joint audit.
pub const AUDIT_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    PriorDraw,
    Empirical,
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" | "prior_draw" => Ok(InitMode::PriorDraw),
            "empirical" => Ok(InitMode::Empirical),
            other => Err(Error::Config(format!("unknown init mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub init_mode: InitMode,
    /// Recompute the log-joint every this many iterations; 0 disables.
    pub audit_every: usize,
    /// Write a resumable checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Marginalize recording labels out of the subject-level update.
    pub collapsed_g: bool,
    /// When false the data term is dropped and the chain targets the prior.
    pub likelihood: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_iter: 20_000,
            burn_in: 10_000,
            thin: 1,
            n_chains: 2,
            seed: 1,
            init_mode: InitMode::Empirical,
            audit_every: 0,
            checkpoint_every: 0,
            collapsed_g: true,
            likelihood: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 || self.thin == 0 || self.n_chains == 0 {
            return Err(Error::Config("n_iter, thin and n_chains must be positive".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn_in {} must be smaller than n_iter {}",
                self.burn_in, self.n_iter
            )));
        }
        if self.n_draws() == 0 {
            return Err(Error::Config("no draws survive burn-in and thinning".into()));
        }
        Ok(())
    }

    pub fn n_draws(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    fn keeps(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in) % self.thin == 0
    }
}

/// Data and constants a chain conditions on.
#[derive(Clone, Debug)]
pub struct Problem {
    pub stats: SufficientStats,
    pub groups: Vec<Group>,
    pub hp: HyperParams,
    /// Centred curves `[u][i][t]`, used by the audit.
    pub centred: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    /// Starting scores for empirical initialization, `[u][i][k]`.
    pub empirical_scores: Vec<f64>,
}

impl Problem {
    pub fn new(
        centred: Vec<f64>,
        n_subjects: usize,
        n_channels: usize,
        phi: Vec<Vec<f64>>,
        groups: Vec<Group>,
        hp: HyperParams,
        empirical_scores: Option<Vec<f64>>,
    ) -> Result<Self> {
        hp.validate()?;
        if hp.k != phi.len() {
            return Err(Error::Dimension(format!(
                "hyperparameters cover {} dimensions but the basis has {}",
                hp.k,
                phi.len()
            )));
        }
        if groups.len() != n_subjects {
            return Err(Error::Dimension("one group label per subject required".into()));
        }
        let stats = SufficientStats::new(&centred, n_subjects, n_channels, &phi, hp.j_s)?;
        let empirical_scores = match empirical_scores {
            Some(s) if s.len() == stats.dims.n_scores() => s,
            Some(_) => return Err(Error::Dimension("empirical scores do not match dimensions".into())),
            None => least_squares_scores(&stats),
        };
        Ok(Self {
            stats,
            groups,
            hp,
            centred,
            phi,
            empirical_scores,
        })
    }

    /// Problem for a smoothed dataset and its fPCA basis.
    pub fn from_basis(data: &FunctionalDataset, basis: &EigenBasis, hp: HyperParams) -> Result<Self> {
        if data.n_subjects() != basis.n_subjects || data.n_channels() != basis.n_channels {
            return Err(Error::Dimension("dataset and basis disagree".into()));
        }
        Self::new(
            centre(data.values(), &basis.mean_curve)?,
            data.n_subjects(),
            data.n_channels(),
            basis.eigenfunctions.clone(),
            data.groups().to_vec(),
            hp,
            Some(basis.scores.clone()),
        )
    }

    pub fn dims(&self) -> Dims {
        self.stats.dims
    }
}

/// Per-curve least-squares scores under the unweighted metric.
fn least_squares_scores(stats: &SufficientStats) -> Vec<f64> {
    let k = stats.dims.k;
    let chol = stats.gram.clone().cholesky();
    stats
        .b
        .chunks_exact(k)
        .flat_map(|b| match &chol {
            Some(c) => c.solve(&nalgebra::DVector::from_column_slice(b)).iter().copied().collect::<Vec<_>>(),
            None => b.to_vec(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Conditional parameters, exposed for independent checking.

/// Mean and variance of a score given its residual dot product `r_dot`.
pub fn xi_conditional(tau: f64, phi_norm2: f64, r_dot: f64, mu: f64, s: f64) -> (f64, f64) {
    let v = 1.0 / (tau * phi_norm2 + s);
    (v * (tau * r_dot + s * mu), v)
}

/// Shape and rate of the noise precision given the residual sum of squares.
pub fn tau_conditional(shape: f64, rate: f64, n_points: f64, ssr: f64) -> (f64, f64) {
    (shape + 0.5 * n_points, rate + 0.5 * ssr)
}

pub fn omega_conditional(delta: &[f64; 3], counts: &[usize; 3]) -> [f64; 3] {
    [
        delta[0] + counts[0] as f64,
        delta[1] + counts[1] as f64,
        delta[2] + counts[2] as f64,
    ]
}

/// Beta parameters of each stick given label counts.
pub fn stick_conditional(counts: &[usize], alpha: f64) -> Vec<(f64, f64)> {
    let mut tail: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&n| {
            tail -= n;
            (1.0 + n as f64, alpha + tail as f64)
        })
        .collect()
}

/// Mean and variance of a cluster mean given m members summing to `sum`.
pub fn mu_conditional(prior: &ClusterPrior, s: f64, m: usize, sum: f64) -> (f64, f64) {
    let h = prior.precision();
    let prec = h + m as f64 * s;
    ((h * prior.mean + s * sum) / prec, 1.0 / prec)
}

/// Shape, rate and lower bound of the truncated gamma for a cluster precision.
pub fn s_conditional(prior: &ClusterPrior, m: usize, ss: f64) -> (f64, f64, f64) {
    (0.5 * (m as f64 - 1.0), 0.5 * ss, prior.s_lower())
}

/// Residual dot product, Gram diagonal and cluster parameters for score (u, i, k).
fn score_terms(p: &Problem, state: &ModelState, u: usize, i: usize, k: usize) -> (f64, f64, f64, f64) {
    let st = &p.stats;
    let d = st.dims;
    let base = d.curve(u, i) * d.k;
    let mut r_dot = st.b[base + k];
    for l in 0..d.k {
        if l != k {
            r_dot -= st.gram[(k, l)] * state.xi[base + l];
        }
    }
    let group = p.groups[u];
    let z = state.z(u, i, k, group);
    let (mu, s) = state.cluster_params(u, k, z, group);
    (r_dot, st.gram[(k, k)], mu, s)
}

/// Mean and variance of the full conditional of score (u, i, k) in `state`.
pub fn score_params(problem: &Problem, state: &ModelState, u: usize, i: usize, k: usize) -> (f64, f64) {
    let (r_dot, g_kk, mu, s) = score_terms(problem, state, u, i, k);
    xi_conditional(state.tau, g_kk, r_dot, mu, s)
}

/// Shape and rate of the full conditional of the noise precision in `state`.
pub fn tau_params(problem: &Problem, state: &ModelState) -> (f64, f64) {
    let hp = &problem.hp;
    tau_conditional(hp.tau_shape, hp.tau_rate, problem.stats.n_points(), problem.stats.ssr(&state.xi))
}

/// Dirichlet parameters of the full conditional of omega_k in `state`.
pub fn omega_params(problem: &Problem, state: &ModelState, k: usize) -> [f64; 3] {
    let d = state.dims;
    let mut counts = [0usize; 3];
    for u in 0..d.n_subjects {
        counts[state.g[d.subject_dim(u, k)] as usize - 1] += 1;
    }
    omega_conditional(&problem.hp.delta, &counts)
}

/// Recording-label counts feeding the sticks of dimension k and group index gi.
/// In collapsed mode only subjects with subject-specific allocation contribute.
pub fn stick_counts(problem: &Problem, state: &ModelState, k: usize, gi: usize, collapsed: bool) -> Vec<usize> {
    let d = state.dims;
    let mut counts = vec![0usize; d.j_s];
    for u in 0..d.n_subjects {
        if problem.groups[u].index() != gi || (collapsed && state.g[d.subject_dim(u, k)] != 3) {
            continue;
        }
        for i in 0..d.n_channels {
            counts[state.eta[d.score(u, i, k)] as usize - FIRST_SUBJECT_LABEL] += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Draw archive.

/// Recording labels of one (subject, dimension) pair whose subject-level component is 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaBlock {
    pub subject: usize,
    pub dim: usize,
    pub labels: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainArchive {
    pub chain: usize,
    pub names: Vec<String>,
    pub iterations: Vec<usize>,
    /// One row per kept draw, aligned with `names`.
    pub scalars: Vec<Vec<f64>>,
    /// One `[u][k]` row per kept draw.
    pub g: Vec<Vec<u8>>,
    pub eta: Vec<Vec<EtaBlock>>,
}

impl ChainArchive {
    fn new(chain: usize, dims: &Dims) -> Self {
        Self {
            chain,
            names: scalar_names(dims.k),
            iterations: Vec::new(),
            scalars: Vec::new(),
            g: Vec::new(),
            eta: Vec::new(),
        }
    }

    pub fn n_draws(&self) -> usize {
        self.iterations.len()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.scalars.iter().map(|row| row[j]).collect())
    }
}

pub fn scalar_names(k: usize) -> Vec<String> {
    let mut names = Vec::new();
    for d in 1..=k {
        for c in 1..=3 {
            names.push(format!("omega_{d}_{c}"));
        }
        names.push(format!("mu_common_{d}"));
        names.push(format!("s_common_{d}"));
        for grp in ["A", "B"] {
            names.push(format!("mu_group_{d}_{grp}"));
            names.push(format!("s_group_{d}_{grp}"));
        }
        for kind in ["common", "group", "subject"] {
            names.push(format!("n_{kind}_{d}"));
        }
    }
    names.push("tau".into());
    names.push("loglik".into());
    names
}

// ---------------------------------------------------------------------------
// Chain.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub chain: usize,
    pub iteration: usize,
    pub seed: u64,
    pub word_pos: String,
    pub ssr: f64,
    pub config: SamplerConfig,
    pub state: ModelState,
    pub archive: ChainArchive,
}

/// One Markov chain over [`ModelState`].
pub struct Chain<'a> {
    problem: &'a Problem,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
    state: ModelState,
    /// Residual sum of squares, maintained incrementally by the score update.
    ssr: f64,
    iteration: usize,
    archive: ChainArchive,
    buf: Vec<f64>,
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

impl<'a> Chain<'a> {
    pub fn new(problem: &'a Problem, cfg: &SamplerConfig, chain: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = chain_rng(cfg.seed, chain);
        let state = match cfg.init_mode {
            InitMode::Empirical => init_empirical(problem),
            InitMode::PriorDraw => init_prior(problem, &mut rng)?,
        };
        let ssr = problem.stats.ssr(&state.xi);
        let dims = problem.dims();
        Ok(Self {
            problem,
            cfg: cfg.clone(),
            rng,
            state,
            ssr,
            iteration: 0,
            archive: ChainArchive::new(chain, &dims),
            buf: vec![0.0; dims.n_channels * dims.j_s],
        })
    }

    pub fn from_checkpoint(problem: &'a Problem, cp: Checkpoint) -> Result<Self> {
        cp.config.validate()?;
        cp.state.validate(&problem.groups)?;
        if cp.state.dims != problem.dims() {
            return Err(Error::Dimension("checkpoint does not match the problem".into()));
        }
        let mut rng = chain_rng(cp.seed, cp.chain);
        let pos: u128 = cp
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad RNG position `{}` in checkpoint", cp.word_pos)))?;
        rng.set_word_pos(pos);
        let dims = problem.dims();
        Ok(Self {
            problem,
            cfg: cp.config,
            rng,
            state: cp.state,
            ssr: cp.ssr,
            iteration: cp.iteration,
            archive: cp.archive,
            buf: vec![0.0; dims.n_channels * dims.j_s],
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            chain: self.archive.chain,
            iteration: self.iteration,
            seed: self.cfg.seed,
            word_pos: self.rng.get_word_pos().to_string(),
            ssr: self.ssr,
            config: self.cfg.clone(),
            state: self.state.clone(),
            archive: self.archive.clone(),
        }
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn archive(&self) -> &ChainArchive {
        &self.archive
    }

    /// Replaces the data the chain conditions on (successive-conditional testing).
    pub fn set_problem(&mut self, problem: &'a Problem) {
        self.problem = problem;
        self.ssr = problem.stats.ssr(&self.state.xi);
    }

    /// Incrementally tracked log-likelihood plus score log-prior.
    pub fn incremental_log_joint(&self) -> Result<f64> {
        Ok(self.problem.stats.loglik_from_ssr(self.state.tau, self.ssr)
            + logprior_scores(&self.state, &self.problem.groups)?)
    }

    /// Log-likelihood and score log-prior evaluated point by point from scratch.
    pub fn recomputed_log_joint(&self) -> Result<f64> {
        Ok(loglik_data(&self.state, &self.problem.centred, &self.problem.phi)?
            + logprior_scores(&self.state, &self.problem.groups)?)
    }

    fn audit(&self) -> Result<()> {
        let incremental = self.incremental_log_joint()?;
        let recomputed = self.recomputed_log_joint()?;
        if (incremental - recomputed).abs() > AUDIT_TOLERANCE * recomputed.abs().max(1.0) {
            return Err(Error::Audit {
                iteration: self.iteration,
                incremental,
                recomputed,
            });
        }
        Ok(())
    }

    /// One full sweep in fixed order.
    pub fn step(&mut self) -> Result<()> {
        self.iteration += 1;
        let it = self.iteration;
        let nonfinite = |block| Error::NonFinite { iteration: it, block };
        self.update_xi();
        if !self.state.xi.iter().all(|x| x.is_finite()) || !self.ssr.is_finite() {
            return Err(nonfinite("xi"));
        }
        self.update_tau();
        if !(self.state.tau.is_finite() && self.state.tau > 0.0) {
            return Err(nonfinite("tau"));
        }
        self.update_cluster_params()?;
        let s = &self.state;
        let finite = s
            .mu_common
            .iter()
            .chain(&s.s_common)
            .chain(s.mu_group.iter().flatten())
            .chain(s.s_group.iter().flatten())
            .chain(&s.mu_subj)
            .chain(&s.s_subj)
            .all(|v| v.is_finite());
        if !finite {
            return Err(nonfinite("cluster_params"));
        }
        if self.update_g().is_none() {
            return Err(nonfinite("g"));
        }
        self.update_omega();
        if !self.state.omega.iter().flatten().all(|w| w.is_finite()) {
            return Err(nonfinite("omega"));
        }
        self.update_sticks()?;
        if !self.state.p.iter().all(|w| w.is_finite()) {
            return Err(nonfinite("sticks"));
        }
        if self.cfg.audit_every > 0 && it % self.cfg.audit_every == 0 {
            self.audit()?;
        }
        if self.cfg.keeps(it) {
            self.record();
        }
        Ok(())
    }

    /// Runs to `n_iter`, writing checkpoints into `checkpoint_dir` when configured.
    pub fn run(mut self, checkpoint_dir: Option<&Path>) -> Result<ChainArchive> {
        while self.iteration < self.cfg.n_iter {
            self.step()?;
            if let Some(dir) = checkpoint_dir {
                if self.cfg.checkpoint_every > 0 && self.iteration % self.cfg.checkpoint_every == 0 {
                    write_checkpoint(&dir.join(format!("checkpoint_{}.json", self.archive.chain + 1)), &self.checkpoint())?;
                }
            }
        }
        Ok(self.archive)
    }

    fn record(&mut self) {
        let s = &self.state;
        let d = s.dims;
        let mut row = Vec::with_capacity(self.archive.names.len());
        for k in 0..d.k {
            row.extend_from_slice(&s.omega[k]);
            row.push(s.mu_common[k]);
            row.push(s.s_common[k]);
            for g in 0..2 {
                row.push(s.mu_group[k][g]);
                row.push(s.s_group[k][g]);
            }
            let mut counts = [0usize; 3];
            for u in 0..d.n_subjects {
                counts[s.g[d.subject_dim(u, k)] as usize - 1] += 1;
            }
            row.extend(counts.iter().map(|&c| c as f64));
        }
        row.push(s.tau);
        row.push(self.problem.stats.loglik_from_ssr(s.tau, self.ssr));
        let mut blocks = Vec::new();
        for u in 0..d.n_subjects {
            for k in 0..d.k {
                if s.g[d.subject_dim(u, k)] == 3 {
                    blocks.push(EtaBlock {
                        subject: u,
                        dim: k,
                        labels: (0..d.n_channels).map(|i| s.eta[d.score(u, i, k)]).collect(),
                    });
                }
            }
        }
        self.archive.iterations.push(self.iteration);
        self.archive.scalars.push(row);
        self.archive.g.push(s.g.clone());
        self.archive.eta.push(blocks);
    }

    fn update_xi(&mut self) {
        let p = self.problem;
        let d = p.dims();
        let tau = if self.cfg.likelihood { self.state.tau } else { 0.0 };
        for u in 0..d.n_subjects {
            for i in 0..d.n_channels {
                for k in 0..d.k {
                    let (r_dot, g_kk, mu, s) = score_terms(p, &self.state, u, i, k);
                    let (m, v) = xi_conditional(tau, g_kk, r_dot, mu, s);
                    let at = d.score(u, i, k);
                    let old = self.state.xi[at];
                    let new = sample_normal(&mut self.rng, m, v);
                    self.ssr += -2.0 * (new - old) * r_dot + g_kk * (new * new - old * old);
                    self.state.xi[at] = new;
                }
            }
        }
    }

    fn update_tau(&mut self) {
        let hp = &self.problem.hp;
        self.state.tau = if self.cfg.likelihood {
            let (a, b) = tau_conditional(hp.tau_shape, hp.tau_rate, self.problem.stats.n_points(), self.ssr);
            sample_gamma(&mut self.rng, a, b)
        } else {
            sample_gamma(&mut self.rng, hp.tau_shape, hp.tau_rate).max(f64::MIN_POSITIVE)
        };
    }

    fn update_cluster_params(&mut self) -> Result<()> {
        let p = self.problem;
        let hp = &p.hp;
        let d = self.state.dims;
        // (count, sum, sum of squares) per cluster.
        let mut common = vec![(0usize, 0.0, 0.0); d.k];
        let mut group = vec![[(0usize, 0.0, 0.0); 2]; d.k];
        let mut subj = vec![(0usize, 0.0, 0.0); d.n_subjects * d.k * d.j_s];
        for u in 0..d.n_subjects {
            let gi = p.groups[u].index();
            for k in 0..d.k {
                let g = self.state.g[d.subject_dim(u, k)];
                for i in 0..d.n_channels {
                    let x = self.state.xi[d.score(u, i, k)];
                    let acc = match g {
                        1 => &mut common[k],
                        2 => &mut group[k][gi],
                        _ => {
                            let j0 = self.state.eta[d.score(u, i, k)] as usize - FIRST_SUBJECT_LABEL;
                            &mut subj[d.subject_cluster(u, k, j0)]
                        }
                    };
                    acc.0 += 1;
                    acc.1 += x;
                    acc.2 += x * x;
                }
            }
        }
        let rng = &mut self.rng;
        let s = &mut self.state;
        for k in 0..d.k {
            let (mu, sp) = draw_cluster(rng, &hp.common[k], s.s_common[k], common[k])?;
            s.mu_common[k] = mu;
            s.s_common[k] = sp;
            for gi in 0..2 {
                let (mu, sp) = draw_cluster(rng, &hp.group[k][gi], s.s_group[k][gi], group[k][gi])?;
                s.mu_group[k][gi] = mu;
                s.s_group[k][gi] = sp;
            }
        }
        for u in 0..d.n_subjects {
            let gi = p.groups[u].index();
            for k in 0..d.k {
                let prior = &hp.subject[k][gi];
                for j0 in 0..d.j_s {
                    let idx = d.subject_cluster(u, k, j0);
                    let (mu, sp) = draw_cluster(rng, prior, s.s_subj[idx], subj[idx])?;
                    s.mu_subj[idx] = mu;
                    s.s_subj[idx] = sp;
                }
            }
        }
        Ok(())
    }

    /// Returns `None` when every component weight underflows.
    fn update_g(&mut self) -> Option<()> {
        let p = self.problem;
        let d = self.state.dims;
        let j_s = d.j_s;
        let mut log_p = vec![0.0; j_s];
        let mut mu_j = vec![0.0; j_s];
        let mut s_j = vec![0.0; j_s];
        for u in 0..d.n_subjects {
            let group = p.groups[u];
            let gi = group.index();
            for k in 0..d.k {
                let st = &self.state;
                for j0 in 0..j_s {
                    log_p[j0] = st.p[d.stick(k, gi, j0)].ln();
                    let idx = d.subject_cluster(u, k, j0);
                    mu_j[j0] = st.mu_subj[idx];
                    s_j[j0] = st.s_subj[idx];
                }
                let (mc, sc) = (st.mu_common[k], st.s_common[k]);
                let (mg, sg) = (st.mu_group[k][gi], st.s_group[k][gi]);
                let mut lw = [
                    st.omega[k][0].ln(),
                    st.omega[k][1].ln(),
                    st.omega[k][2].ln(),
                ];
                for i in 0..d.n_channels {
                    let x = st.xi[d.score(u, i, k)];
                    lw[0] += normal_logpdf(x, mc, sc);
                    lw[1] += normal_logpdf(x, mg, sg);
                    let row = &mut self.buf[i * j_s..(i + 1) * j_s];
                    for j0 in 0..j_s {
                        row[j0] = log_p[j0] + normal_logpdf(x, mu_j[j0], s_j[j0]);
                    }
                    if self.cfg.collapsed_g {
                        lw[2] += log_sum_exp(row);
                    } else {
                        let e = st.eta[d.score(u, i, k)] as usize - FIRST_SUBJECT_LABEL;
                        lw[2] += normal_logpdf(x, mu_j[e], s_j[e]);
                    }
                }
                let g = sample_log_categorical(&mut self.rng, &lw)? as u8 + 1;
                self.state.g[d.subject_dim(u, k)] = g;
                for i in 0..d.n_channels {
                    let j0 = if g == 3 {
                        sample_log_categorical(&mut self.rng, &self.buf[i * j_s..(i + 1) * j_s])?
                    } else {
                        sample_log_categorical(&mut self.rng, &log_p)?
                    };
                    self.state.eta[d.score(u, i, k)] = (j0 + FIRST_SUBJECT_LABEL) as u16;
                }
            }
        }
        Some(())
    }

    fn update_omega(&mut self) {
        let d = self.state.dims;
        for k in 0..d.k {
            let post = omega_params(self.problem, &self.state, k);
            let w = sample_dirichlet(&mut self.rng, &post);
            self.state.omega[k] = [w[0], w[1], w[2]];
        }
    }

    /// Beta proposal from the untruncated conditional, corrected by an
    /// independence Metropolis-Hastings step for the renormalization.
    fn update_sticks(&mut self) -> Result<()> {
        let p = self.problem;
        let d = self.state.dims;
        for k in 0..d.k {
            for gi in 0..2 {
                let counts = stick_counts(p, &self.state, k, gi, self.cfg.collapsed_g);
                let n: usize = counts.iter().sum();
                let params = stick_conditional(&counts, p.hp.alpha[k]);
                let proposal: Vec<f64> = params.iter().map(|&(a, b)| sample_beta(&mut self.rng, a, b)).collect();
                let start = d.stick(k, gi, 0);
                let current = &self.state.p_star[start..start + d.j_s];
                let log_accept = n as f64 * (stick_mass(current).ln() - stick_mass(&proposal).ln());
                let u: f64 = self.rng.random();
                if n == 0 || u.ln() < log_accept {
                    let w = sticks_to_weights(&proposal)?;
                    self.state.p_star[start..start + d.j_s].copy_from_slice(&proposal);
                    self.state.p[start..start + d.j_s].copy_from_slice(&w);
                }
            }
        }
        Ok(())
    }
}

fn prior_cluster_draw<R: Rng + ?Sized>(rng: &mut R, prior: &ClusterPrior) -> (f64, f64) {
    let mu = sample_normal(rng, prior.mean, prior.h_inv);
    (mu, prior_precision_draw(rng, prior))
}

/// Precision whose inverse square root is uniform on (0, gamma].
fn prior_precision_draw<R: Rng + ?Sized>(rng: &mut R, prior: &ClusterPrior) -> f64 {
    let u: f64 = rng.random();
    let sd = prior.gamma * (1.0 - u);
    1.0 / (sd * sd)
}

fn draw_cluster<R: Rng + ?Sized>(
    rng: &mut R,
    prior: &ClusterPrior,
    s_current: f64,
    (m, sum, sum_sq): (usize, f64, f64),
) -> Result<(f64, f64)> {
    if m == 0 {
        return Ok(prior_cluster_draw(rng, prior));
    }
    let (mean, var) = mu_conditional(prior, s_current, m, sum);
    let mu = sample_normal(rng, mean, var);
    let ss = sum_sq - 2.0 * mu * sum + m as f64 * mu * mu;
    if !(ss > 0.0) {
        return Ok((mu, prior_precision_draw(rng, prior)));
    }
    let (shape, rate, lower) = s_conditional(prior, m, ss);
    Ok((mu, sample_truncated_gamma(rng, shape, rate, lower)?))
}

/// Components of a one-dimensional Gaussian mixture fitted by EM.
#[derive(Clone, Debug)]
struct MixtureFit {
    means: Vec<f64>,
    vars: Vec<f64>,
    /// Component of each point, components ordered by mean.
    labels: Vec<usize>,
    bic: f64,
}

fn fit_mixture_1d(x: &[f64], k: usize) -> MixtureFit {
    let n = x.len();
    let nf = n as f64;
    let total_mean = x.iter().sum::<f64>() / nf;
    let total_var = x.iter().map(|v| (v - total_mean) * (v - total_mean)).sum::<f64>() / nf;
    let floor = (1e-6 * total_var).max(1e-12);
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut means: Vec<f64> = (0..k)
        .map(|c| sorted[(((c as f64 + 0.5) / k as f64) * nf) as usize % n])
        .collect();
    let mut vars = vec![total_var.max(floor); k];
    let mut weights = vec![1.0 / k as f64; k];
    let mut resp = vec![0.0; n * k];
    let mut loglik = f64::NEG_INFINITY;
    for _ in 0..500 {
        let mut ll = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            for c in 0..k {
                row[c] = weights[c].ln() + normal_logpdf(xi, means[c], 1.0 / vars[c]);
            }
            let lse = log_sum_exp(row);
            ll += lse;
            row.iter_mut().for_each(|r| *r = (*r - lse).exp());
        }
        for c in 0..k {
            let nc: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nc <= 1e-12 {
                continue;
            }
            weights[c] = nc / nf;
            means[c] = (0..n).map(|i| resp[i * k + c] * x[i]).sum::<f64>() / nc;
            vars[c] = ((0..n).map(|i| resp[i * k + c] * (x[i] - means[c]).powi(2)).sum::<f64>() / nc).max(floor);
        }
        let done = (ll - loglik).abs() <= 1e-10 * ll.abs().max(1.0);
        loglik = ll;
        if done {
            break;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let rank: Vec<usize> = {
        let mut r = vec![0; k];
        for (pos, &c) in order.iter().enumerate() {
            r[c] = pos;
        }
        r
    };
    let labels = (0..n)
        .map(|i| {
            let row = &resp[i * k..(i + 1) * k];
            let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            rank[best]
        })
        .collect();
    MixtureFit {
        means: order.iter().map(|&c| means[c]).collect(),
        vars: order.iter().map(|&c| vars[c]).collect(),
        labels,
        bic: -2.0 * loglik + (3 * k - 1) as f64 * nf.ln(),
    }
}

/// BIC-selected mixture with at most `k_max` components, each holding at least two points.
fn select_mixture_1d(x: &[f64], k_max: usize) -> MixtureFit {
    let mut best = fit_mixture_1d(x, 1);
    for k in 2..=k_max.min(x.len() / 2) {
        let fit = fit_mixture_1d(x, k);
        let sizes_ok = (0..k).all(|c| fit.labels.iter().filter(|&&l| l == c).count() >= 2);
        if sizes_ok && fit.bic < best.bic {
            best = fit;
        }
    }
    best
}

/// Largest number of recording clusters tried when initializing from the empirical scores.
const INIT_MAX_COMPONENTS: usize = 3;

fn init_empirical(problem: &Problem) -> ModelState {
    let hp = &problem.hp;
    let d = problem.dims();
    let mid_precision = |p: &ClusterPrior| 4.0 / (p.gamma * p.gamma);
    let xi = problem.empirical_scores.clone();
    let ssr = problem.stats.ssr(&xi);
    let tau = if ssr > 0.0 { problem.stats.n_points() / ssr } else { 1.0 };
    let delta_sum: f64 = hp.delta.iter().sum();
    let mut p_star = Vec::with_capacity(d.k * 2 * d.j_s);
    let mut p = Vec::with_capacity(d.k * 2 * d.j_s);
    for k in 0..d.k {
        let row = vec![1.0 / (1.0 + hp.alpha[k]); d.j_s];
        let w = sticks_to_weights(&row).expect("prior-mean sticks lie in (0, 1)");
        for _ in 0..2 {
            p_star.extend_from_slice(&row);
            p.extend_from_slice(&w);
        }
    }
    let mut mu_subj = Vec::with_capacity(d.n_subjects * d.k * d.j_s);
    let mut s_subj = Vec::with_capacity(d.n_subjects * d.k * d.j_s);
    let mut g = vec![COMMON as u8; d.n_subjects * d.k];
    let mut eta = vec![FIRST_SUBJECT_LABEL as u16; d.n_scores()];
    for u in 0..d.n_subjects {
        let gi = problem.groups[u].index();
        for k in 0..d.k {
            let prior = &hp.subject[k][gi];
            let x: Vec<f64> = (0..d.n_channels).map(|i| xi[d.score(u, i, k)]).collect();
            let fit = select_mixture_1d(&x, INIT_MAX_COMPONENTS.min(d.j_s));
            let start = mu_subj.len();
            mu_subj.extend(std::iter::repeat_n(prior.mean, d.j_s));
            s_subj.extend(std::iter::repeat_n(mid_precision(prior), d.j_s));
            if fit.means.len() < 2 {
                continue;
            }
            g[d.subject_dim(u, k)] = 3;
            for (c, (&m, &v)) in fit.means.iter().zip(&fit.vars).enumerate() {
                mu_subj[start + c] = m;
                s_subj[start + c] = (1.0 / v).max(prior.s_lower());
            }
            for (i, &l) in fit.labels.iter().enumerate() {
                eta[d.score(u, i, k)] = (l + FIRST_SUBJECT_LABEL) as u16;
            }
        }
    }
    ModelState {
        dims: d,
        xi,
        tau,
        g,
        eta,
        mu_common: hp.common.iter().map(|c| c.mean).collect(),
        s_common: hp.common.iter().map(mid_precision).collect(),
        mu_group: hp.group.iter().map(|g| [g[0].mean, g[1].mean]).collect(),
        s_group: hp.group.iter().map(|g| [mid_precision(&g[0]), mid_precision(&g[1])]).collect(),
        mu_subj,
        s_subj,
        omega: vec![[hp.delta[0] / delta_sum, hp.delta[1] / delta_sum, hp.delta[2] / delta_sum]; d.k],
        p_star,
        p,
    }
}

/// Draws a complete state from the prior.
pub fn init_prior<R: Rng + ?Sized>(problem: &Problem, rng: &mut R) -> Result<ModelState> {
    let hp = &problem.hp;
    let d = problem.dims();
    let mut omega = Vec::with_capacity(d.k);
    let mut p_star = Vec::with_capacity(d.k * 2 * d.j_s);
    let mut p = Vec::with_capacity(d.k * 2 * d.j_s);
    for k in 0..d.k {
        let w = sample_dirichlet(rng, &hp.delta);
        omega.push([w[0], w[1], w[2]]);
        for _ in 0..2 {
            let row: Vec<f64> = (0..d.j_s).map(|_| sample_beta(rng, 1.0, hp.alpha[k])).collect();
            p.extend(sticks_to_weights(&row)?);
            p_star.extend(row);
        }
    }
    let mut mu_common = Vec::new();
    let mut s_common = Vec::new();
    let mut mu_group = Vec::new();
    let mut s_group = Vec::new();
    for k in 0..d.k {
        let (m, s) = prior_cluster_draw(rng, &hp.common[k]);
        mu_common.push(m);
        s_common.push(s);
        let (ma, sa) = prior_cluster_draw(rng, &hp.group[k][0]);
        let (mb, sb) = prior_cluster_draw(rng, &hp.group[k][1]);
        mu_group.push([ma, mb]);
        s_group.push([sa, sb]);
    }
    let mut mu_subj = Vec::new();
    let mut s_subj = Vec::new();
    for u in 0..d.n_subjects {
        let gi = problem.groups[u].index();
        for k in 0..d.k {
            for _ in 0..d.j_s {
                let (m, s) = prior_cluster_draw(rng, &hp.subject[k][gi]);
                mu_subj.push(m);
                s_subj.push(s);
            }
        }
    }
    let mut g = vec![0u8; d.n_subjects * d.k];
    let mut eta = vec![0u16; d.n_scores()];
    for u in 0..d.n_subjects {
        let gi = problem.groups[u].index();
        for k in 0..d.k {
            let lw: Vec<f64> = omega[k].iter().map(|w| w.ln()).collect();
            g[d.subject_dim(u, k)] = sample_log_categorical(rng, &lw)
                .ok_or_else(|| Error::InvalidState("omega has no positive entry".into()))? as u8
                + 1;
            let start = d.stick(k, gi, 0);
            let lp: Vec<f64> = p[start..start + d.j_s].iter().map(|w| w.ln()).collect();
            for i in 0..d.n_channels {
                let j0 = sample_log_categorical(rng, &lp)
                    .ok_or_else(|| Error::InvalidState("stick weights have no positive entry".into()))?;
                eta[d.score(u, i, k)] = (j0 + FIRST_SUBJECT_LABEL) as u16;
            }
        }
    }
    let tau = sample_gamma(rng, hp.tau_shape, hp.tau_rate).max(f64::MIN_POSITIVE);
    let mut state = ModelState {
        dims: d,
        xi: vec![0.0; d.n_scores()],
        tau,
        g,
        eta,
        mu_common,
        s_common,
        mu_group,
        s_group,
        mu_subj,
        s_subj,
        omega,
        p_star,
        p,
    };
    for u in 0..d.n_subjects {
        let group = problem.groups[u];
        for i in 0..d.n_channels {
            for k in 0..d.k {
                let z = state.z(u, i, k, group);
                let (mu, s) = state.cluster_params(u, k, z, group);
                state.xi[d.score(u, i, k)] = sample_normal(rng, mu, 1.0 / s);
            }
        }
    }
    Ok(state)
}

pub fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let json = serde_json::to_vec(cp).map_err(|e| Error::format(path, e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn run_chain(problem: &Problem, cfg: &SamplerConfig, chain: usize) -> Result<ChainArchive> {
    Chain::new(problem, cfg, chain)?.run(None)
}

/// Runs `cfg.n_chains` chains, in parallel on at most `threads` workers.
pub fn run_chains(
    problem: &Problem,
    cfg: &SamplerConfig,
    threads: Option<usize>,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<ChainArchive>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0).min(cfg.n_chains))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        (0..cfg.n_chains)
            .into_par_iter()
            .map(|c| Chain::new(problem, cfg, c)?.run(checkpoint_dir))
            .collect()
    })
}

/// Continues every chain from its checkpoint file in `dir`.
pub fn resume_chains(problem: &Problem, dir: &Path, n_chains: usize, threads: Option<usize>) -> Result<Vec<ChainArchive>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0).min(n_chains))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        (0..n_chains)
            .into_par_iter()
            .map(|c| {
                let cp = read_checkpoint(&dir.join(format!("checkpoint_{}.json", c + 1)))?;
                Chain::from_checkpoint(problem, cp)?.run(Some(dir))
            })
            .collect()
    })
}
