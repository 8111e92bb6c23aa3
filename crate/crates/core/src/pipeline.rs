//! End-to-end workflows behind the command-line tool: simulate, fit, diagnose, summarize.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FunctionalDataset, Group};
use crate::diagnostics::{self, ChainMatrix, ParameterDiagnostics};
use crate::error::{Error, Result};
use crate::fpca::{self, EigenBasis};
use crate::hyperparams::{self, HyperParams, Scenario};
use crate::io;
use crate::partitions::{self, CredibleBall, ExpectedVi, Kind, Partition};
use crate::sampler::{self, ChainArchive, Problem, SamplerConfig};
use crate::simgen::{self, GroundTruth, SimDesign};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn worker_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Serialize)]
struct SimulationMeta<'a> {
    version: &'a str,
    replicate: usize,
    base_seed: u64,
    design: &'a SimDesign,
    noise_variance: f64,
}

/// Writes `replicates` datasets under `out/replicate_NNN/`; returns their directories.
pub fn simulate_to_dir(
    design: &SimDesign,
    replicates: usize,
    out: &Path,
    force: bool,
    threads: Option<usize>,
) -> Result<Vec<PathBuf>> {
    if replicates == 0 {
        return Err(Error::Config("replicates must be positive".into()));
    }
    design.validate()?;
    io::prepare_output_dir(out, force)?;
    let pool = worker_pool(threads)?;
    pool.install(|| {
        (0..replicates)
            .into_par_iter()
            .map(|r| {
                let dir = out.join(format!("replicate_{:03}", r + 1));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let rep = SimDesign {
                    seed: simgen::replicate_seed(design.seed, r),
                    ..design.clone()
                };
                let (data, truth) = simgen::simulate(&rep)?;
                io::write_dataset(&dir.join("data.csv"), &dir.join("time_grid.csv"), &data)?;
                let signal = data.with_values(truth.signal.clone())?;
                io::write_dataset(&dir.join("signal.csv"), &dir.join("time_grid.csv"), &signal)?;
                io::write_json(&dir.join("truth.json"), &truth)?;
                io::write_json(
                    &dir.join("meta.json"),
                    &SimulationMeta {
                        version: VERSION,
                        replicate: r + 1,
                        base_seed: design.seed,
                        design: &rep,
                        noise_variance: truth.noise_variance,
                    },
                )?;
                Ok(dir)
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------
// fit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub smooth: bool,
    /// Spline basis size; `None` uses T / 2 clamped to [4, T].
    pub basis_size: Option<usize>,
    /// Roughness penalty; `None` selects it by GCV.
    pub penalty: Option<f64>,
    pub var_threshold: f64,
    pub min_component_share: f64,
    /// Retain exactly this many components instead of the variance rule.
    pub n_components: Option<usize>,
    pub boot_reps: usize,
    pub scenario: Option<Scenario>,
    pub overrides: Vec<(String, String)>,
    pub sampler: SamplerConfig,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            smooth: true,
            basis_size: None,
            penalty: None,
            var_threshold: fpca::DEFAULT_VAR_THRESHOLD,
            min_component_share: fpca::DEFAULT_MIN_COMPONENT_SHARE,
            n_components: None,
            boot_reps: hyperparams::DEFAULT_BOOT_REPS,
            scenario: None,
            overrides: Vec::new(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Smoothing, fPCA and hyperparameters: everything the sampler conditions on.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub smoothed: FunctionalDataset,
    pub basis_size: Option<usize>,
    pub penalty: Option<f64>,
    pub basis: EigenBasis,
    pub hp: HyperParams,
}

pub fn prepare(data: &FunctionalDataset, opts: &ModelOptions, hp_file: Option<&HyperParams>) -> Result<Prepared> {
    let (smoothed, basis_size, penalty) = if opts.smooth {
        let size = opts.basis_size.unwrap_or_else(|| fpca::default_basis_size(data.n_timepoints()));
        let pen = match opts.penalty {
            Some(p) => p,
            None => fpca::select_penalty_gcv(data, size)?,
        };
        (fpca::smooth_dataset(data, size, pen)?, Some(size), Some(pen))
    } else {
        (data.clone(), None, None)
    };
    let basis = match opts.n_components {
        Some(k) => fpca::fit_fpca_fixed(&smoothed, k)?,
        None => fpca::fit_fpca(&smoothed, opts.var_threshold, opts.min_component_share)?,
    };
    let mut hp = match hp_file {
        Some(hp) => {
            if hp.k != basis.k() {
                return Err(Error::Config(format!(
                    "hyperparameter file covers {} dimensions but fPCA retained {}",
                    hp.k,
                    basis.k()
                )));
            }
            hp.clone()
        }
        None => hyperparams::estimate_hyperparams(&basis, smoothed.groups(), opts.boot_reps, opts.sampler.seed)?,
    };
    if let Some(s) = opts.scenario {
        hp = hyperparams::apply_scenario(&hp, s)?;
    }
    for (key, value) in &opts.overrides {
        hp = hyperparams::apply_override(&hp, key, value)?;
    }
    hp.validate()?;
    Ok(Prepared {
        smoothed,
        basis_size,
        penalty,
        basis,
        hp,
    })
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub prepared: Prepared,
    pub archives: Vec<ChainArchive>,
}

/// Full in-memory fit.
pub fn fit_dataset(data: &FunctionalDataset, opts: &ModelOptions, threads: Option<usize>) -> Result<FitResult> {
    let prepared = prepare(data, opts, None)?;
    let problem = Problem::from_basis(&prepared.smoothed, &prepared.basis, prepared.hp.clone())?;
    let archives = sampler::run_chains(&problem, &opts.sampler, threads, None)?;
    Ok(FitResult { prepared, archives })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    pub data_file: String,
    pub data_sha256: String,
    pub grid_sha256: String,
    pub hyperparams_sha256: String,
    pub n_subjects: usize,
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub k: usize,
    pub basis_size: Option<usize>,
    pub penalty: Option<f64>,
    pub options: ModelOptions,
    pub scalar_names: Vec<String>,
    pub draws_per_chain: usize,
}

#[derive(Clone, Debug)]
pub struct FitPaths {
    pub data: PathBuf,
    pub grid: PathBuf,
    pub hyperparams: Option<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
    /// Continue from the checkpoints in `out` instead of starting fresh.
    pub resume: bool,
}

fn write_subjects(dir: &Path, data: &FunctionalDataset) -> Result<()> {
    io::write_rows(
        &dir.join("subjects.csv"),
        &["subject_id", "group_code"],
        (0..data.n_subjects()).map(|u| vec![data.subject_ids()[u].clone(), data.group_of(u).code().to_string()]),
    )?;
    io::write_rows(
        &dir.join("channels.csv"),
        &["channel_id"],
        data.channel_ids().iter().map(|c| vec![c.clone()]),
    )
}

/// Fit from files into a run directory.
pub fn fit_to_dir(paths: &FitPaths, opts: &ModelOptions, threads: Option<usize>) -> Result<RunMeta> {
    opts.sampler.validate()?;
    let data = io::read_dataset(&paths.data, &paths.grid)?;
    let hp_file: Option<HyperParams> = match &paths.hyperparams {
        Some(p) => Some(io::read_json(p)?),
        None => None,
    };
    if !paths.resume {
        io::prepare_output_dir(&paths.out, paths.force)?;
    }
    let prepared = prepare(&data, opts, hp_file.as_ref())?;
    let problem = Problem::from_basis(&prepared.smoothed, &prepared.basis, prepared.hp.clone())?;
    let out = &paths.out;
    let checkpoint_dir = (opts.sampler.checkpoint_every > 0).then(|| out.join("checkpoints"));
    if let Some(dir) = &checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let archives = if paths.resume {
        let dir = checkpoint_dir
            .as_deref()
            .ok_or_else(|| Error::Config("resuming needs a positive checkpoint interval".into()))?;
        sampler::resume_chains(&problem, dir, opts.sampler.n_chains, threads)?
    } else {
        sampler::run_chains(&problem, &opts.sampler, threads, checkpoint_dir.as_deref())?
    };

    io::write_basis(out, &prepared.basis, &prepared.smoothed)?;
    io::write_json(&out.join("hyperparams.json"), &prepared.hp)?;
    write_subjects(out, &data)?;
    for a in &archives {
        io::write_archive(&io::chain_dir(out, a.chain), a, data.n_subjects(), prepared.basis.k())?;
    }
    let meta = RunMeta {
        version: VERSION.into(),
        data_file: paths.data.display().to_string(),
        data_sha256: io::file_digest(&paths.data)?,
        grid_sha256: io::file_digest(&paths.grid)?,
        hyperparams_sha256: prepared.hp.digest(),
        n_subjects: data.n_subjects(),
        n_channels: data.n_channels(),
        n_timepoints: data.n_timepoints(),
        k: prepared.basis.k(),
        basis_size: prepared.basis_size,
        penalty: prepared.penalty,
        options: opts.clone(),
        scalar_names: sampler::scalar_names(prepared.basis.k()),
        draws_per_chain: opts.sampler.n_draws(),
    };
    io::write_json(&out.join("meta.json"), &meta)?;
    Ok(meta)
}

/// Reads the metadata, subject table and chain archives of a run directory.
pub fn load_run(run_dir: &Path) -> Result<(RunMeta, Vec<String>, Vec<Group>, Vec<String>, Vec<ChainArchive>)> {
    let meta_path = run_dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::Input(format!("{} is not a run directory (no meta.json)", run_dir.display())));
    }
    let meta: RunMeta = io::read_json(&meta_path)?;
    let subjects_path = run_dir.join("subjects.csv");
    let mut rdr = csv::Reader::from_path(&subjects_path).map_err(|e| Error::format(&subjects_path, e.to_string()))?;
    let mut ids = Vec::new();
    let mut groups = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(&subjects_path, e.to_string()))?;
        ids.push(rec[0].to_string());
        let code: u8 = rec[1]
            .parse()
            .map_err(|_| Error::format(&subjects_path, format!("bad group code `{}`", &rec[1])))?;
        groups.push(Group::from_code(code)?);
    }
    let channels_path = run_dir.join("channels.csv");
    let mut rdr = csv::Reader::from_path(&channels_path).map_err(|e| Error::format(&channels_path, e.to_string()))?;
    let channels = rdr
        .records()
        .map(|r| r.map(|rec| rec[0].to_string()).map_err(|e| Error::format(&channels_path, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let archives = (0..meta.options.sampler.n_chains)
        .map(|c| io::read_archive(&io::chain_dir(run_dir, c), c))
        .collect::<Result<Vec<_>>>()?;
    if archives.iter().all(|a| a.n_draws() == 0) {
        return Err(Error::Input(format!("{} holds no draws", run_dir.display())));
    }
    Ok((meta, ids, groups, channels, archives))
}

// ---------------------------------------------------------------------------
// diagnose

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rhat_threshold: f64,
    pub ess_threshold: f64,
    pub parameters: Vec<ParameterDiagnostics>,
    pub n_flagged: usize,
}

/// Diagnostics for every monitored scalar present in all chains.
pub fn diagnose_archives(archives: &[ChainArchive], rhat_threshold: f64, ess_threshold: f64) -> Result<DiagnosticsReport> {
    let first = archives.first().ok_or_else(|| Error::Input("no chains".into()))?;
    let mut parameters = Vec::new();
    for name in first.names.iter().filter(|n| diagnostics::is_monitored(n)) {
        let chains = archives
            .iter()
            .map(|a| a.column(name).ok_or_else(|| Error::Input(format!("chain {} lacks `{name}`", a.chain + 1))))
            .collect::<Result<Vec<_>>>()?;
        let cm = ChainMatrix::new(name.clone(), chains)?;
        parameters.push(diagnostics::diagnose(&cm, rhat_threshold, ess_threshold)?);
    }
    let n_flagged = parameters.iter().filter(|p| p.flagged).count();
    Ok(DiagnosticsReport {
        rhat_threshold,
        ess_threshold,
        parameters,
        n_flagged,
    })
}

/// Writes `diagnostics.csv`, `trace.csv` and `density.csv` into `out`.
pub fn diagnose_run(
    run_dir: &Path,
    out: &Path,
    force: bool,
    rhat_threshold: f64,
    ess_threshold: f64,
    bins: usize,
) -> Result<DiagnosticsReport> {
    let (_, _, _, _, archives) = load_run(run_dir)?;
    let report = diagnose_archives(&archives, rhat_threshold, ess_threshold)?;
    io::prepare_output_dir(out, force)?;
    io::write_rows(
        &out.join("diagnostics.csv"),
        &["parameter", "rhat", "ess", "degenerate", "flag"],
        report.parameters.iter().map(|p| {
            vec![
                p.parameter.clone(),
                p.rhat.to_string(),
                p.ess.to_string(),
                p.degenerate.to_string(),
                p.flagged.to_string(),
            ]
        }),
    )?;
    let mut trace = Vec::new();
    let mut density = Vec::new();
    for p in &report.parameters {
        let chains = archives.iter().map(|a| a.column(&p.parameter).unwrap_or_default()).collect();
        let cm = ChainMatrix::new(p.parameter.clone(), chains)?;
        let (rows, dens) = diagnostics::export_trace_density(&cm, bins)?;
        trace.extend(rows.into_iter().map(|r| {
            vec![p.parameter.clone(), r.iteration.to_string(), r.chain.to_string(), r.value.to_string()]
        }));
        for d in dens {
            for (j, c) in d.counts.iter().enumerate() {
                let mid = 0.5 * (d.bin_edges[j] + d.bin_edges[j + 1]);
                density.push(vec![
                    p.parameter.clone(),
                    d.chain.to_string(),
                    "histogram".into(),
                    mid.to_string(),
                    c.to_string(),
                ]);
            }
            for (x, y) in d.kde_grid.iter().zip(&d.kde) {
                density.push(vec![p.parameter.clone(), d.chain.to_string(), "kde".into(), x.to_string(), y.to_string()]);
            }
        }
    }
    io::write_rows(&out.join("trace.csv"), &["parameter", "iteration", "chain", "value"], trace)?;
    io::write_rows(&out.join("density.csv"), &["parameter", "chain", "kind", "x", "value"], density)?;
    io::write_json(&out.join("diagnostics.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// summarize

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthMetrics {
    pub ari: f64,
    pub vi: f64,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    /// 1-based.
    pub dim: usize,
    pub estimate: Partition,
    pub kinds: Vec<Kind>,
    pub expected_vi: f64,
    pub ball: CredibleBall,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingReport {
    /// 0-based subject and dimension.
    pub subject: usize,
    pub dim: usize,
    pub estimate: Partition,
    pub ball: CredibleBall,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification_error: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub level: f64,
    pub method: ExpectedVi,
    pub n_draws: usize,
    pub dimensions: Vec<DimensionReport>,
    pub recording: Vec<RecordingReport>,
    #[serde(skip)]
    pub similarity: Vec<partitions::SimilarityMatrix>,
}

/// Subject-level partition draws of dimension k pooled over chains.
pub fn subject_draws(archives: &[ChainArchive], groups: &[Group], k_total: usize, k: usize) -> Vec<Vec<usize>> {
    archives
        .iter()
        .flat_map(|a| a.g.iter().map(|g| partitions::subject_level_labels(g, k_total, k, groups)))
        .collect()
}

/// Channel partitions of subject u in dimension k: the model's z labels per draw.
pub fn recording_draws(
    archives: &[ChainArchive],
    groups: &[Group],
    n_channels: usize,
    k_total: usize,
    u: usize,
    k: usize,
) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in archives {
        for (g, blocks) in a.g.iter().zip(&a.eta) {
            let labels = match g[u * k_total + k] {
                1 => vec![1; n_channels],
                2 => vec![groups[u].code() as usize; n_channels],
                _ => blocks
                    .iter()
                    .find(|b| b.subject == u && b.dim == k)
                    .map(|b| b.labels.iter().map(|&l| l as usize).collect())
                    .unwrap_or_else(|| vec![0; n_channels]),
            };
            out.push(labels);
        }
    }
    out
}

/// Partition estimates, credible balls and (with truth) recovery metrics.
pub fn summarize_archives(
    archives: &[ChainArchive],
    groups: &[Group],
    n_channels: usize,
    k_total: usize,
    truth: Option<&GroundTruth>,
    level: f64,
    method: ExpectedVi,
) -> Result<SummaryReport> {
    let mut dimensions = Vec::new();
    let mut similarity = Vec::new();
    let mut recording_targets: Vec<(usize, usize)> = Vec::new();
    for k in 0..k_total {
        let draws = subject_draws(archives, groups, k_total, k);
        let est = partitions::vi_point_estimate(&draws, method)?;
        let ball = partitions::credible_ball(&draws, &est.partition, level)?;
        let truth_metrics = match truth.and_then(|t| t.subject_partitions.get(k)) {
            Some(tp) => Some(TruthMetrics {
                ari: partitions::adjusted_rand_index(tp, &est.partition.labels)?,
                vi: partitions::variation_of_information(tp, &est.partition.labels)?,
                exact: partitions::canonical(tp) == est.partition.canonical(),
            }),
            None => None,
        };
        for (u, l) in est.partition.labels.iter().enumerate() {
            if Kind::of_label(*l) == Kind::SubjectSpecific {
                recording_targets.push((u, k));
            }
        }
        similarity.push(partitions::similarity_matrix(&draws)?);
        dimensions.push(DimensionReport {
            dim: k + 1,
            kinds: est.partition.kinds(),
            estimate: est.partition,
            expected_vi: est.expected_vi,
            ball,
            truth: truth_metrics,
        });
    }
    if let Some(t) = truth {
        for r in &t.recording_partitions {
            if r.dim < k_total && !recording_targets.contains(&(r.subject, r.dim)) {
                recording_targets.push((r.subject, r.dim));
            }
        }
    }
    recording_targets.sort_unstable();
    let mut recording = Vec::new();
    for (u, k) in recording_targets {
        let draws = recording_draws(archives, groups, n_channels, k_total, u, k);
        let est = partitions::vi_point_estimate(&draws, method)?;
        let ball = partitions::credible_ball(&draws, &est.partition, level)?;
        let tr = truth.and_then(|t| t.recording_partitions.iter().find(|r| r.subject == u && r.dim == k));
        let (classification_error, ari) = match tr {
            Some(r) => (
                Some(partitions::classification_error(&r.labels, &est.partition.labels)?),
                Some(partitions::adjusted_rand_index(&r.labels, &est.partition.labels)?),
            ),
            None => (None, None),
        };
        recording.push(RecordingReport {
            subject: u,
            dim: k,
            estimate: est.partition,
            ball,
            classification_error,
            ari,
        });
    }
    Ok(SummaryReport {
        level,
        method,
        n_draws: archives.iter().map(|a| a.n_draws()).sum(),
        dimensions,
        recording,
        similarity,
    })
}

/// Writes `partition_report.json`, `table.txt` and `similarity_dim{k}.csv` into `out`.
pub fn summarize_run(
    run_dir: &Path,
    out: &Path,
    force: bool,
    truth_path: Option<&Path>,
    level: f64,
    method: ExpectedVi,
) -> Result<SummaryReport> {
    let (meta, ids, groups, channels, archives) = load_run(run_dir)?;
    let truth: Option<GroundTruth> = match truth_path {
        Some(p) => Some(io::read_json(p)?),
        None => None,
    };
    if let Some(t) = &truth {
        if t.subject_partitions.iter().any(|p| p.len() != ids.len()) {
            return Err(Error::Dimension("truth does not match the number of subjects".into()));
        }
    }
    let report = summarize_archives(&archives, &groups, meta.n_channels, meta.k, truth.as_ref(), level, method)?;
    io::prepare_output_dir(out, force)?;
    io::write_json(&out.join("partition_report.json"), &report)?;
    for (k, s) in report.similarity.iter().enumerate() {
        io::write_matrix(&out.join(format!("similarity_dim{}.csv", k + 1)), &ids, &s.values)?;
    }
    let mut text = String::new();
    for d in &report.dimensions {
        text.push_str(&partitions::format_ball_table(
            &format!("Subject-level partition, dimension {}", d.dim),
            &ids,
            &d.ball,
        ));
        if let Some(t) = &d.truth {
            text.push_str(&format!(
                "vs truth: ARI {:.4}, VI {:.4} bits, exact recovery {}\n",
                t.ari, t.vi, t.exact
            ));
        }
        text.push('\n');
    }
    for r in &report.recording {
        text.push_str(&partitions::format_ball_table(
            &format!("Recording-level partition, subject {}, dimension {}", ids[r.subject], r.dim + 1),
            &channels,
            &r.ball,
        ));
        if let Some(e) = r.classification_error {
            text.push_str(&format!("classification errors vs truth: {e}\n"));
        }
        text.push('\n');
    }
    std::fs::write(out.join("table.txt"), text).map_err(|e| Error::io(out.join("table.txt"), e))?;
    Ok(report)
}
