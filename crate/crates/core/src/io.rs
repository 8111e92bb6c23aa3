//! File formats: dataset and time-grid CSVs, basis and archive directories, JSON documents.
//!
//! Dataset CSV: header `subject_id,channel_id,group_code,v1..vT`, one row per
//! (subject, channel) curve. Time grid CSV: header `time`, one value per row.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::{FunctionalDataset, Group};
use crate::error::{Error, Result};
use crate::fpca::EigenBasis;
use crate::sampler::{ChainArchive, EtaBlock};

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn parse_f64(path: &Path, row: usize, field: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::format(path, format!("row {row}: `{field}` is not a number")))
}

pub fn read_time_grid(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv_reader(path)?;
    let mut grid = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = rec.get(0).ok_or_else(|| Error::format(path, format!("row {} is empty", r + 1)))?;
        grid.push(parse_f64(path, r + 1, field)?);
    }
    if grid.is_empty() {
        return Err(Error::format(path, "time grid is empty"));
    }
    Ok(grid)
}

pub fn write_time_grid(path: &Path, grid: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["time"]).map_err(|e| csv_error(path, e))?;
    for t in grid {
        w.write_record([t.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads curves in any row order; subjects and channels keep their first-seen order.
pub fn read_dataset(data_path: &Path, grid_path: &Path) -> Result<FunctionalDataset> {
    let grid = read_time_grid(grid_path)?;
    let t = grid.len();
    let mut rdr = csv_reader(data_path)?;
    let mut subjects: Vec<String> = Vec::new();
    let mut subject_index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<Group> = Vec::new();
    let mut channels: Vec<String> = Vec::new();
    let mut channel_index: HashMap<String, usize> = HashMap::new();
    let mut curves: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| csv_error(data_path, e))?;
        if rec.len() != 3 + t {
            return Err(Error::Dimension(format!(
                "{}: row {row} has {} values, time grid has {t}",
                data_path.display(),
                rec.len().saturating_sub(3)
            )));
        }
        let sid = rec[0].to_string();
        let cid = rec[1].to_string();
        let code: u8 = rec[2]
            .parse()
            .map_err(|_| Error::format(data_path, format!("row {row}: bad group code `{}`", &rec[2])))?;
        let group = Group::from_code(code)?;
        let u = *subject_index.entry(sid.clone()).or_insert_with(|| {
            subjects.push(sid.clone());
            groups.push(group);
            subjects.len() - 1
        });
        if groups[u] != group {
            return Err(Error::Input(format!("subject {sid} appears with two group codes")));
        }
        let i = *channel_index.entry(cid.clone()).or_insert_with(|| {
            channels.push(cid.clone());
            channels.len() - 1
        });
        let mut values = Vec::with_capacity(t);
        for field in rec.iter().skip(3) {
            if field.is_empty() || field.eq_ignore_ascii_case("na") || field.eq_ignore_ascii_case("nan") {
                return Err(Error::Input(format!("missing value for subject {sid}, channel {cid}")));
            }
            values.push(parse_f64(data_path, row, field)?);
        }
        if curves.insert((u, i), values).is_some() {
            return Err(Error::Input(format!("duplicate curve for subject {sid}, channel {cid}")));
        }
    }
    if curves.is_empty() {
        return Err(Error::format(data_path, "no curves"));
    }
    let mut flat = Vec::with_capacity(subjects.len() * channels.len() * t);
    for u in 0..subjects.len() {
        for i in 0..channels.len() {
            let c = curves.remove(&(u, i)).ok_or_else(|| {
                Error::Input(format!("subject {} lacks channel {}", subjects[u], channels[i]))
            })?;
            flat.extend(c);
        }
    }
    FunctionalDataset::with_ids(flat, grid, groups, subjects, channels)
}

pub fn write_dataset(data_path: &Path, grid_path: &Path, data: &FunctionalDataset) -> Result<()> {
    write_time_grid(grid_path, data.time_grid())?;
    let mut w = csv_writer(data_path)?;
    let mut header = vec!["subject_id".to_string(), "channel_id".into(), "group_code".into()];
    header.extend((1..=data.n_timepoints()).map(|j| format!("v{j}")));
    w.write_record(&header).map_err(|e| csv_error(data_path, e))?;
    for u in 0..data.n_subjects() {
        for i in 0..data.n_channels() {
            let mut rec = vec![
                data.subject_ids()[u].clone(),
                data.channel_ids()[i].clone(),
                data.group_of(u).code().to_string(),
            ];
            rec.extend(data.curve(u, i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_error(data_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(data_path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Creates `dir`, refusing to write into a non-empty directory unless `force`.
/// Existing files are overwritten, never deleted.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BasisHeader {
    k: usize,
    eigenvalues: Vec<f64>,
    var_explained: Vec<f64>,
    total_variance: f64,
    n_subjects: usize,
    n_channels: usize,
}

/// `basis.json` plus `mean.csv`, `eigenfunctions.csv` and `scores.csv` in `dir`.
pub fn write_basis(dir: &Path, basis: &EigenBasis, data: &FunctionalDataset) -> Result<()> {
    write_json(
        &dir.join("basis.json"),
        &BasisHeader {
            k: basis.k(),
            eigenvalues: basis.eigenvalues.clone(),
            var_explained: basis.var_explained.clone(),
            total_variance: basis.total_variance,
            n_subjects: basis.n_subjects,
            n_channels: basis.n_channels,
        },
    )?;
    let path = dir.join("mean.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["time", "mean"]).map_err(|e| csv_error(&path, e))?;
    for (t, m) in basis.time_grid.iter().zip(&basis.mean_curve) {
        w.write_record([t.to_string(), m.to_string()]).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("eigenfunctions.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["time".to_string()];
    header.extend((1..=basis.k()).map(|k| format!("phi_{k}")));
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for (j, t) in basis.time_grid.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(basis.eigenfunctions.iter().map(|phi| phi[j].to_string()));
        w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("scores.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["subject_id".to_string(), "channel_id".into()];
    header.extend((1..=basis.k()).map(|k| format!("xi_{k}")));
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for u in 0..basis.n_subjects {
        for i in 0..basis.n_channels {
            let mut rec = vec![data.subject_ids()[u].clone(), data.channel_ids()[i].clone()];
            rec.extend(basis.curve_scores(u, i)?.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn chain_dir(run_dir: &Path, chain: usize) -> PathBuf {
    run_dir.join(format!("chain_{}", chain + 1))
}

/// `draws_scalar.csv`, `labels_g.csv` and the sparse `labels_eta.csv` of one chain.
pub fn write_archive(dir: &Path, archive: &ChainArchive, n_subjects: usize, k: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("draws_scalar.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend(archive.names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for (it, row) in archive.iterations.iter().zip(&archive.scalars) {
        let mut rec = vec![it.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("labels_g.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["iteration".to_string()];
    for u in 1..=n_subjects {
        for d in 1..=k {
            header.push(format!("g_{u}_{d}"));
        }
    }
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for (it, row) in archive.iterations.iter().zip(&archive.g) {
        let mut rec = vec![it.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("labels_eta.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["iteration", "subject", "dim", "labels"]).map_err(|e| csv_error(&path, e))?;
    for (it, blocks) in archive.iterations.iter().zip(&archive.eta) {
        for b in blocks {
            let labels: Vec<String> = b.labels.iter().map(|l| l.to_string()).collect();
            w.write_record([
                it.to_string(),
                (b.subject + 1).to_string(),
                (b.dim + 1).to_string(),
                labels.join(" "),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_archive(dir: &Path, chain: usize) -> Result<ChainArchive> {
    let path = dir.join("draws_scalar.csv");
    let mut rdr = csv_reader(&path)?;
    let header = rdr.headers().map_err(|e| csv_error(&path, e))?.clone();
    if header.get(0) != Some("iteration") {
        return Err(Error::format(&path, "first column must be `iteration`"));
    }
    let names: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut iterations = Vec::new();
    let mut scalars = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&path, e))?;
        iterations.push(
            rec[0]
                .parse::<usize>()
                .map_err(|_| Error::format(&path, format!("row {}: bad iteration", r + 1)))?,
        );
        scalars.push(rec.iter().skip(1).map(|f| parse_f64(&path, r + 1, f)).collect::<Result<Vec<_>>>()?);
    }

    let path = dir.join("labels_g.csv");
    let mut rdr = csv_reader(&path)?;
    let mut g = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&path, e))?;
        let it: usize = rec[0].parse().map_err(|_| Error::format(&path, format!("row {}: bad iteration", r + 1)))?;
        if iterations.get(r) != Some(&it) {
            return Err(Error::format(&path, format!("row {} does not match draws_scalar.csv", r + 1)));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|f| match f.parse::<u8>() {
                Ok(v @ 1..=3) => Ok(v),
                _ => Err(Error::format(&path, format!("row {}: bad label `{f}`", r + 1))),
            })
            .collect::<Result<Vec<u8>>>()?;
        g.push(row);
    }
    if g.len() != iterations.len() {
        return Err(Error::format(&path, "row count differs from draws_scalar.csv"));
    }

    let path = dir.join("labels_eta.csv");
    let mut rdr = csv_reader(&path)?;
    let position: HashMap<usize, usize> = iterations.iter().enumerate().map(|(j, &it)| (it, j)).collect();
    let mut eta: Vec<Vec<EtaBlock>> = vec![Vec::new(); iterations.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&path, e))?;
        let bad = || Error::format(&path, format!("row {} is malformed", r + 1));
        let it: usize = rec[0].parse().map_err(|_| bad())?;
        let subject: usize = rec[1].parse().map_err(|_| bad())?;
        let dim: usize = rec[2].parse().map_err(|_| bad())?;
        let labels = rec[3]
            .split_whitespace()
            .map(|l| l.parse::<u16>().map_err(|_| bad()))
            .collect::<Result<Vec<u16>>>()?;
        let j = *position.get(&it).ok_or_else(bad)?;
        if subject == 0 || dim == 0 {
            return Err(bad());
        }
        eta[j].push(EtaBlock {
            subject: subject - 1,
            dim: dim - 1,
            labels,
        });
    }
    Ok(ChainArchive {
        chain,
        names,
        iterations,
        scalars,
        g,
        eta,
    })
}

/// Writes a square matrix with item names as the header row and first column.
pub fn write_matrix(path: &Path, names: &[String], values: &[f64]) -> Result<()> {
    let n = names.len();
    let mut w = csv_writer(path)?;
    let mut header = vec!["item".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for a in 0..n {
        let mut rec = vec![names[a].clone()];
        rec.extend(values[a * n..(a + 1) * n].iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes rows of already formatted fields under `header`.
pub fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
