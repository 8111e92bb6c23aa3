//! Multi-subject, multi-channel curve container.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Experimental group of a subject. Serialized through its numeric code
/// (2 for the first group, 3 for the second), which doubles as the label of
/// the group-specific cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Group {
    A,
    B,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::A, Group::B];

    pub fn code(self) -> u8 {
        match self {
            Group::A => 2,
            Group::B => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            2 => Ok(Group::A),
            3 => Ok(Group::B),
            other => Err(Error::Input(format!("group code must be 2 or 3, got {other}"))),
        }
    }

    /// Zero-based position, for indexing per-group arrays.
    pub fn index(self) -> usize {
        match self {
            Group::A => 0,
            Group::B => 1,
        }
    }
}

impl From<Group> for u8 {
    fn from(g: Group) -> u8 {
        g.code()
    }
}

impl TryFrom<u8> for Group {
    type Error = Error;
    fn try_from(code: u8) -> Result<Self> {
        Group::from_code(code)
    }
}

/// Curves indexed `[subject][channel][time]`, stored flat in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalDataset {
    values: Vec<f64>,
    n_subjects: usize,
    n_channels: usize,
    time_grid: Vec<f64>,
    groups: Vec<Group>,
    subject_ids: Vec<String>,
    channel_ids: Vec<String>,
}

impl FunctionalDataset {
    pub fn new(
        values: Vec<f64>,
        n_subjects: usize,
        n_channels: usize,
        time_grid: Vec<f64>,
        groups: Vec<Group>,
    ) -> Result<Self> {
        let subject_ids = (1..=n_subjects).map(|u| u.to_string()).collect();
        let channel_ids = (1..=n_channels).map(|i| i.to_string()).collect();
        Self::with_ids(values, time_grid, groups, subject_ids, channel_ids)
    }

    pub fn with_ids(
        values: Vec<f64>,
        time_grid: Vec<f64>,
        groups: Vec<Group>,
        subject_ids: Vec<String>,
        channel_ids: Vec<String>,
    ) -> Result<Self> {
        let n_subjects = groups.len();
        let n_channels = channel_ids.len();
        let t = time_grid.len();
        if subject_ids.len() != n_subjects {
            return Err(Error::Dimension(format!(
                "{} subject ids for {} subjects",
                subject_ids.len(),
                n_subjects
            )));
        }
        if n_subjects == 0 || n_channels == 0 || t == 0 {
            return Err(Error::Dimension("dataset must be non-empty".into()));
        }
        if values.len() != n_subjects * n_channels * t {
            return Err(Error::Dimension(format!(
                "expected {}x{}x{} = {} values, got {}",
                n_subjects,
                n_channels,
                t,
                n_subjects * n_channels * t,
                values.len()
            )));
        }
        check_grid(&time_grid)?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("missing or non-finite value at flat index {pos}")));
        }
        for g in Group::ALL {
            if !groups.contains(&g) {
                return Err(Error::Input(format!("no subject in group {}", g.code())));
            }
        }
        Ok(Self {
            values,
            n_subjects,
            n_channels,
            time_grid,
            groups,
            subject_ids,
            channel_ids,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_timepoints(&self) -> usize {
        self.time_grid.len()
    }

    pub fn n_curves(&self) -> usize {
        self.n_subjects * self.n_channels
    }

    pub fn time_grid(&self) -> &[f64] {
        &self.time_grid
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group_of(&self, u: usize) -> Group {
        self.groups[u]
    }

    pub fn n_group_a(&self) -> usize {
        self.groups.iter().filter(|&&g| g == Group::A).count()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn channel_ids(&self) -> &[String] {
        &self.channel_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn curve(&self, u: usize, i: usize) -> &[f64] {
        let t = self.n_timepoints();
        let start = (u * self.n_channels + i) * t;
        &self.values[start..start + t]
    }

    /// Curves in `(subject, channel)` row-major order.
    pub fn curves(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.n_timepoints())
    }

    /// Same layout and labels, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::with_ids(
            values,
            self.time_grid.clone(),
            self.groups.clone(),
            self.subject_ids.clone(),
            self.channel_ids.clone(),
        )
    }
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::Input("time grid contains non-finite values".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input("time grid must be strictly increasing".into()));
    }
    Ok(())
}
