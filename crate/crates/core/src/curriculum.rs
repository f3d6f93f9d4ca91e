//! Online curriculum: per-query difficulty from the previous epoch's
//! rollouts, permanent filtering of mastered queries and an
//! easiest-first ordering of the rest.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Mean of `1 - clamp(r, 0, 1)` over a query's rollout rewards.
pub fn difficulty(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Curriculum(
            "difficulty needs at least one rollout reward".into(),
        ));
    }
    let sum: f64 = rewards.iter().map(|r| 1.0 - r.clamp(0.0, 1.0)).sum();
    Ok(sum / rewards.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub query_id: String,
    pub difficulty: f64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub query_id: String,
    /// `None` before any rollout has been observed.
    pub difficulty: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochDataset {
    pub epoch: usize,
    pub entries: Vec<ScheduleEntry>,
    /// Records dropped below the threshold when this dataset was built,
    /// ordered by query id.
    pub dropped: Vec<DifficultyRecord>,
}

impl EpochDataset {
    pub fn retained(&self) -> usize {
        self.entries.len()
    }

    pub fn filtered(&self) -> usize {
        self.dropped.len()
    }

    /// An empty schedule means every remaining query has been mastered.
    pub fn converged(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.query_id.as_str())
    }

    /// Appends `epoch,query_id,difficulty,retained` rows.
    pub fn write_schedule_rows<W: Write>(&self, out: &mut csv::Writer<W>) -> Result<()> {
        let fmt = |d: Option<f64>| d.map(|d| d.to_string()).unwrap_or_default();
        for e in &self.entries {
            out.write_record([
                self.epoch.to_string(),
                e.query_id.clone(),
                fmt(e.difficulty),
                "true".into(),
            ])?;
        }
        for r in &self.dropped {
            out.write_record([
                self.epoch.to_string(),
                r.query_id.clone(),
                fmt(Some(r.difficulty)),
                "false".into(),
            ])?;
        }
        Ok(())
    }
}

pub const SCHEDULE_HEADER: [&str; 4] = ["epoch", "query_id", "difficulty", "retained"];

/// Drops records below `tau` and sorts the rest by (difficulty, query id).
pub fn build_epoch_dataset(
    records: &[DifficultyRecord],
    tau: f64,
    epoch: usize,
) -> Result<EpochDataset> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.epoch != first.epoch) {
            return Err(Error::Curriculum(format!(
                "records span epochs {} and {}",
                first.epoch, other.epoch
            )));
        }
    }
    let (mut kept, mut dropped): (Vec<_>, Vec<_>) =
        records.iter().cloned().partition(|r| r.difficulty >= tau);
    kept.sort_by(|a, b| {
        a.difficulty
            .total_cmp(&b.difficulty)
            .then_with(|| a.query_id.cmp(&b.query_id))
    });
    dropped.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok(EpochDataset {
        epoch,
        entries: kept
            .into_iter()
            .map(|r| ScheduleEntry {
                query_id: r.query_id,
                difficulty: Some(r.difficulty),
            })
            .collect(),
        dropped,
    })
}

/// First epoch: a seeded shuffle of every query, difficulties unknown.
pub fn bootstrap_first_epoch(queries: &[String], seed: u64) -> Result<EpochDataset> {
    if queries.is_empty() {
        return Err(Error::Config("curriculum needs at least one query".into()));
    }
    let mut ids = queries.to_vec();
    ids.shuffle(&mut rng_for(seed, "curriculum-bootstrap", &[]));
    Ok(EpochDataset {
        epoch: 1,
        entries: ids
            .into_iter()
            .map(|query_id| ScheduleEntry {
                query_id,
                difficulty: None,
            })
            .collect(),
        dropped: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub tau: f64,
    /// Schedule for the epoch about to be (or being) trained.
    pub current: EpochDataset,
    /// Difficulties computed from the most recent epoch's rollouts.
    pub records: Vec<DifficultyRecord>,
    /// Queries dropped in any earlier epoch; never rescheduled.
    pub filtered: BTreeSet<String>,
}

impl CurriculumState {
    pub fn new(queries: &[String], tau: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
        }
        Ok(CurriculumState {
            tau,
            current: bootstrap_first_epoch(queries, seed)?,
            records: Vec::new(),
            filtered: BTreeSet::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.current.epoch
    }

    /// Consumes the rewards logged while training `current` and schedules
    /// the next epoch. The log must cover exactly the scheduled queries.
    pub fn update(&mut self, epoch_log: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        let scheduled: BTreeSet<&str> = self.current.query_ids().collect();
        if let Some(unknown) = epoch_log.keys().find(|q| !scheduled.contains(q.as_str())) {
            return Err(Error::Curriculum(format!(
                "rollout log contains query `{unknown}` which was not scheduled in epoch {}",
                self.epoch()
            )));
        }
        if let Some(missing) = scheduled.iter().find(|q| !epoch_log.contains_key(**q)) {
            return Err(Error::Curriculum(format!(
                "rollout log is missing scheduled query `{missing}`"
            )));
        }
        let epoch = self.epoch();
        let records = epoch_log
            .iter()
            .map(|(q, rewards)| {
                Ok(DifficultyRecord {
                    query_id: q.clone(),
                    difficulty: difficulty(rewards)?,
                    epoch,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let next = build_epoch_dataset(&records, self.tau, epoch + 1)?;
        self.filtered
            .extend(next.dropped.iter().map(|r| r.query_id.clone()));
        self.records = records;
        self.current = next;
        Ok(())
    }
}
