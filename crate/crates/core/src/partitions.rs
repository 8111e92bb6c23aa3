//! Partition metrics, posterior similarity, VI point estimates and credible balls.

use std::collections::HashMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::data::Group;
use crate::error::{Error, Result};
use crate::model::FIRST_SUBJECT_LABEL;

/// Distances within this of each other count as equal.
const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Common,
    GroupA,
    GroupB,
    SubjectSpecific,
}

impl Kind {
    /// Kind of a model label (1, 2, 3 or >= 4).
    pub fn of_label(label: usize) -> Kind {
        match label {
            1 => Kind::Common,
            2 => Kind::GroupA,
            3 => Kind::GroupB,
            _ => Kind::SubjectSpecific,
        }
    }
}

/// Cluster labels over a fixed item set; only co-clustering is compared.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<usize>,
}

impl Partition {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("partition must have at least one item".into()));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Labels renumbered 0, 1, ... in order of first appearance.
    pub fn canonical(&self) -> Vec<usize> {
        canonical(&self.labels)
    }

    pub fn kinds(&self) -> Vec<Kind> {
        self.labels.iter().map(|&l| Kind::of_label(l)).collect()
    }
}

pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Subject-level partition of dimension k: common subjects share label 1, group
/// subjects their group code, subject-specific subjects a private label 4 + u.
pub fn subject_level_labels(g_row: &[u8], n_dims: usize, k: usize, groups: &[Group]) -> Vec<usize> {
    groups
        .iter()
        .enumerate()
        .map(|(u, grp)| match g_row[u * n_dims + k] {
            1 => 1,
            2 => grp.code() as usize,
            _ => FIRST_SUBJECT_LABEL + u,
        })
        .collect()
}

struct Contingency {
    n: usize,
    cells: Vec<usize>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    n_cols: usize,
}

fn contingency(p: &[usize], q: &[usize]) -> Result<Contingency> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("partitions over {} and {} items", p.len(), q.len())));
    }
    if p.is_empty() {
        return Err(Error::Input("partitions must be non-empty".into()));
    }
    let cp = canonical(p);
    let cq = canonical(q);
    let r = cp.iter().max().unwrap() + 1;
    let c = cq.iter().max().unwrap() + 1;
    let mut cells = vec![0usize; r * c];
    let mut rows = vec![0usize; r];
    let mut cols = vec![0usize; c];
    for (a, b) in cp.iter().zip(&cq) {
        cells[a * c + b] += 1;
        rows[*a] += 1;
        cols[*b] += 1;
    }
    Ok(Contingency {
        n: p.len(),
        cells,
        rows,
        cols,
        n_cols: c,
    })
}

fn choose2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Hubert-Arabie adjusted Rand index; 1 for identical partitions even when the index is undefined.
pub fn adjusted_rand_index(p: &[usize], q: &[usize]) -> Result<f64> {
    let t = contingency(p, q)?;
    let index: f64 = t.cells.iter().map(|&x| choose2(x)).sum();
    let a: f64 = t.rows.iter().map(|&x| choose2(x)).sum();
    let b: f64 = t.cols.iter().map(|&x| choose2(x)).sum();
    let total = choose2(t.n);
    let expected = if total > 0.0 { a * b / total } else { 0.0 };
    let max = 0.5 * (a + b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(if canonical(p) == canonical(q) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// Variation of information in bits.
pub fn variation_of_information(p: &[usize], q: &[usize]) -> Result<f64> {
    let t = contingency(p, q)?;
    let n = t.n as f64;
    let mut vi = 0.0;
    for (idx, &nij) in t.cells.iter().enumerate() {
        if nij == 0 {
            continue;
        }
        let (i, j) = (idx / t.n_cols, idx % t.n_cols);
        let nij = nij as f64;
        // -p_ij (log p_ij/p_i + log p_ij/p_j)
        vi -= nij / n * ((nij / t.rows[i] as f64).log2() + (nij / t.cols[j] as f64).log2());
    }
    Ok(vi.max(0.0))
}

/// Posterior co-clustering frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub n: usize,
    /// Row-major n x n.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.n + b]
    }
}

fn check_draws(draws: &[Vec<usize>]) -> Result<usize> {
    let first = draws.first().ok_or_else(|| Error::Input("no partition draws".into()))?;
    let n = first.len();
    if n == 0 {
        return Err(Error::Input("partitions must be non-empty".into()));
    }
    if draws.iter().any(|d| d.len() != n) {
        return Err(Error::Dimension("partition draws differ in size".into()));
    }
    Ok(n)
}

pub fn similarity_matrix(draws: &[Vec<usize>]) -> Result<SimilarityMatrix> {
    let n = check_draws(draws)?;
    let mut counts = vec![0usize; n * n];
    for d in draws {
        for a in 0..n {
            for b in a..n {
                if d[a] == d[b] {
                    counts[a * n + b] += 1;
                }
            }
        }
    }
    let m = draws.len() as f64;
    let mut values = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let v = counts[a * n + b] as f64 / m;
            values[a * n + b] = v;
            values[b * n + a] = v;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedVi {
    /// Jensen lower bound computed from the similarity matrix.
    #[default]
    LowerBound,
    /// Average VI to every draw.
    Exact,
}

/// Lower bound on the posterior expected VI of `candidate`, in bits.
pub fn expected_vi_lower_bound(candidate: &[usize], psm: &SimilarityMatrix) -> f64 {
    let n = psm.n;
    let mut total = 0.0;
    for a in 0..n {
        let mut same = 0.0_f64;
        let mut same_psm = 0.0_f64;
        let mut row = 0.0_f64;
        for b in 0..n {
            let s = psm.get(a, b);
            row += s;
            if candidate[a] == candidate[b] {
                same += 1.0;
                same_psm += s;
            }
        }
        total += same.log2() - 2.0 * same_psm.log2() + row.log2();
    }
    total / n as f64
}

/// Distinct partitions (canonical form) with their draw counts and first occurrence.
fn distinct(draws: &[Vec<usize>]) -> Vec<(Vec<usize>, usize, usize)> {
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut out: Vec<(Vec<usize>, usize, usize)> = Vec::new();
    for (m, d) in draws.iter().enumerate() {
        let c = canonical(d);
        match index.get(&c) {
            Some(&j) => out[j].1 += 1,
            None => {
                index.insert(c.clone(), out.len());
                out.push((c, 1, m));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub partition: Partition,
    /// Index of the first draw equal to the estimate.
    pub draw_index: usize,
    pub expected_vi: f64,
}

/// Sampled partition minimizing the posterior expected VI; ties go to fewer
/// clusters, then to the earliest draw. The returned labels are those of that draw.
pub fn vi_point_estimate(draws: &[Vec<usize>], method: ExpectedVi) -> Result<PointEstimate> {
    check_draws(draws)?;
    let uniq = distinct(draws);
    let psm = match method {
        ExpectedVi::LowerBound => Some(similarity_matrix(draws)?),
        ExpectedVi::Exact => None,
    };
    let total = draws.len() as f64;
    let mut best: Option<(f64, usize, usize)> = None;
    for (cand, _, first) in &uniq {
        let score = match &psm {
            Some(psm) => expected_vi_lower_bound(cand, psm),
            None => {
                let mut s = 0.0;
                for (other, count, _) in &uniq {
                    s += *count as f64 * variation_of_information(cand, other)?;
                }
                s / total
            }
        };
        let clusters = cand.iter().max().unwrap() + 1;
        let better = match best {
            None => true,
            Some((bs, bc, bf)) => {
                if (score - bs).abs() <= DIST_EPS {
                    clusters < bc || (clusters == bc && *first < bf)
                } else {
                    score < bs
                }
            }
        };
        if better {
            best = Some((score, clusters, *first));
        }
    }
    let (score, _, first) = best.expect("at least one draw");
    Ok(PointEstimate {
        partition: Partition::new(draws[first].clone())?,
        draw_index: first,
        expected_vi: score.max(0.0),
    })
}

/// A partition inside the credible ball with its posterior frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallMember {
    pub partition: Partition,
    pub n_clusters: usize,
    pub distance: f64,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibleBall {
    pub point_estimate: Partition,
    pub level: f64,
    pub epsilon: f64,
    /// Fraction of draws within epsilon of the estimate.
    pub mass: f64,
    /// Partitions in the ball with the fewest clusters.
    pub vertical_upper: Vec<BallMember>,
    /// Partitions in the ball with the most clusters.
    pub vertical_lower: Vec<BallMember>,
    /// Partitions in the ball farthest from the estimate.
    pub horizontal: Vec<BallMember>,
}

/// Smallest VI ball around `estimate` holding at least `level` of the draws.
pub fn credible_ball(draws: &[Vec<usize>], estimate: &Partition, level: f64) -> Result<CredibleBall> {
    let n = check_draws(draws)?;
    if estimate.len() != n {
        return Err(Error::Dimension("estimate and draws differ in size".into()));
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::Config(format!("credible level must lie in (0, 1], got {level}")));
    }
    let total = draws.len() as f64;
    let uniq = distinct(draws);
    let mut members = Vec::with_capacity(uniq.len());
    for (cand, count, first) in &uniq {
        members.push(BallMember {
            partition: Partition::new(draws[*first].clone())?,
            n_clusters: cand.iter().max().unwrap() + 1,
            distance: variation_of_information(cand, &estimate.labels)?,
            frequency: *count as f64 / total,
        });
    }
    let mut by_distance: Vec<usize> = (0..members.len()).collect();
    by_distance.sort_by(|&a, &b| members[a].distance.total_cmp(&members[b].distance));
    let mut mass = 0.0;
    let mut epsilon = 0.0;
    let mut pos = 0;
    while pos < by_distance.len() {
        let d = members[by_distance[pos]].distance;
        while pos < by_distance.len() && members[by_distance[pos]].distance <= d + DIST_EPS {
            mass += members[by_distance[pos]].frequency;
            pos += 1;
        }
        epsilon = d;
        if mass >= level - DIST_EPS {
            break;
        }
    }
    let inside: Vec<&BallMember> = members.iter().filter(|m| m.distance <= epsilon + DIST_EPS).collect();
    let pick = |key: &dyn Fn(&BallMember) -> f64| -> Vec<BallMember> {
        let best = inside.iter().map(|m| key(m)).fold(f64::NEG_INFINITY, f64::max);
        inside
            .iter()
            .filter(|m| key(m) >= best - DIST_EPS)
            .map(|m| (*m).clone())
            .collect()
    };
    Ok(CredibleBall {
        point_estimate: estimate.clone(),
        level,
        epsilon,
        mass,
        vertical_upper: pick(&|m| -(m.n_clusters as f64)),
        vertical_lower: pick(&|m| m.n_clusters as f64),
        horizontal: pick(&|m| m.distance),
    })
}

/// Fewest items that must move for `estimate` to match `truth` under the best cluster matching.
pub fn classification_error(truth: &[usize], estimate: &[usize]) -> Result<usize> {
    let t = contingency(truth, estimate)?;
    let r = t.rows.len();
    let c = t.n_cols;
    let size = r.max(c);
    let mut weights = Matrix::new(size, size, 0i64);
    for i in 0..r {
        for j in 0..c {
            weights[(i, j)] = t.cells[i * c + j] as i64;
        }
    }
    let (matched, _) = kuhn_munkres(&weights);
    Ok(t.n - matched as usize)
}

/// Plain-text summary in the layout of a point estimate followed by the three ball bounds.
pub fn format_ball_table(title: &str, item_names: &[String], ball: &CredibleBall) -> String {
    let mut out = String::new();
    out.push_str(&format!("{title}\n"));
    out.push_str(&format!(
        "credible level {:.2}, radius {:.4} bits, mass {:.1}%\n",
        ball.level,
        ball.epsilon,
        100.0 * ball.mass
    ));
    let width = item_names.iter().map(|s| s.len()).max().unwrap_or(4).max(4);
    let mut rows: Vec<(String, Vec<usize>, Option<f64>)> =
        vec![("estimate".into(), ball.point_estimate.canonical(), None)];
    for (name, set) in [
        ("upper", &ball.vertical_upper),
        ("lower", &ball.vertical_lower),
        ("horizontal", &ball.horizontal),
    ] {
        for (j, m) in set.iter().enumerate() {
            let label = if set.len() > 1 { format!("{name}#{}", j + 1) } else { name.to_string() };
            rows.push((label, m.partition.canonical(), Some(m.frequency)));
        }
    }
    out.push_str(&format!("{:<width$}", "item"));
    for (name, _, _) in &rows {
        out.push_str(&format!(" {name:>12}"));
    }
    out.push('\n');
    for (a, item) in item_names.iter().enumerate() {
        out.push_str(&format!("{item:<width$}"));
        for (_, labels, _) in &rows {
            out.push_str(&format!(" {:>12}", labels[a] + 1));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<width$}", "frequency"));
    for (_, _, f) in &rows {
        match f {
            Some(f) => out.push_str(&format!(" {:>11.1}%", 100.0 * f)),
            None => out.push_str(&format!(" {:>12}", "-")),
        }
    }
    out.push('\n');
    out
}
