//! Checkpoint selection at validation peaks of each warm-restart cycle.
//!
//! Each cycle is searched near its end, where the annealed learning rate has
//! settled the model into a minimum. A cycle whose best validation metric
//! falls short of `min_peak_ratio × global best` contributes nothing, so a
//! run whose curve shows no peak in some cycle simply skips it.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{CycleIndex, SgdrConfig};

/// One epoch of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub lr: f64,
    pub val_metric: f64,
    pub checkpoint_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    records: Vec<TraceRecord>,
}

impl TrainingTrace {
    /// Validates strictly increasing epochs, metrics in `[0, 1]` and unique
    /// checkpoint ids.
    pub fn new(records: Vec<TraceRecord>) -> Result<Self> {
        for pair in records.windows(2) {
            if pair[1].epoch <= pair[0].epoch {
                return Err(Error::invalid(format!(
                    "trace epochs not strictly increasing at epoch {}",
                    pair[1].epoch
                )));
            }
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !(r.val_metric.is_finite() && (0.0..=1.0).contains(&r.val_metric)) {
                return Err(Error::invalid(format!(
                    "val_metric {} at epoch {} outside [0, 1]",
                    r.val_metric, r.epoch
                )));
            }
            if !r.lr.is_finite() {
                return Err(Error::invalid(format!("non-finite lr at epoch {}", r.epoch)));
            }
            if let Some(id) = &r.checkpoint_id {
                if !seen.insert(id.as_str()) {
                    return Err(Error::invalid(format!("duplicate checkpoint id `{id}`")));
                }
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let records = rdr.deserialize().collect::<Result<Vec<TraceRecord>, _>>()?;
        Self::new(records)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "lr", "val_metric", "checkpoint_id"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.val_metric.to_string(),
                r.checkpoint_id.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_csv(File::open(path).map_err(Error::at(path))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.write_csv(File::create(path).map_err(Error::at(path))?)
    }
}

/// Portion of each cycle searched for peaks, counted back from the cycle end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SearchWindow {
    /// Fraction of the cycle length, rounded up, at least one epoch.
    Fraction(f64),
    Epochs(usize),
}

impl SearchWindow {
    /// Epoch range `[start, end)` searched within `cycle`.
    pub fn range(&self, cycle: &CycleIndex) -> (usize, usize) {
        let len = match *self {
            SearchWindow::Fraction(f) => (f * cycle.t_i as f64).ceil() as usize,
            SearchWindow::Epochs(n) => n,
        }
        .clamp(1, cycle.t_i);
        (cycle.cycle_end - len, cycle.cycle_end)
    }
}

/// Parses `fraction:F` or `epochs:N`.
impl std::str::FromStr for SearchWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("search window `{s}`, expected fraction:F or epochs:N"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let value = value.trim();
        match kind.trim() {
            "fraction" => Ok(Self::Fraction(value.parse().map_err(|_| bad())?)),
            "epochs" => Ok(Self::Epochs(value.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for SearchWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Fraction(x) => write!(f, "fraction:{x}"),
            Self::Epochs(n) => write!(f, "epochs:{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub per_cycle: usize,
    pub window: SearchWindow,
    pub min_peak_ratio: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            per_cycle: 3,
            window: SearchWindow::Fraction(0.5),
            min_peak_ratio: 0.9,
        }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.per_cycle == 0 {
            return Err(Error::invalid("per_cycle must be >= 1"));
        }
        match self.window {
            SearchWindow::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::invalid(format!("window fraction {f} outside (0, 1]")))
            }
            SearchWindow::Epochs(0) => return Err(Error::invalid("window must be >= 1 epoch")),
            _ => {}
        }
        if !(self.min_peak_ratio > 0.0 && self.min_peak_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "min_peak_ratio {} outside (0, 1]",
                self.min_peak_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedCheckpoint {
    pub cycle: usize,
    pub epoch: usize,
    pub checkpoint_id: String,
    pub val_metric: f64,
}

/// Ensemble membership, ordered by cycle then descending metric.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointSet {
    entries: Vec<SelectedCheckpoint>,
}

impl CheckpointSet {
    pub fn new(mut entries: Vec<SelectedCheckpoint>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.checkpoint_id.clone()) {
                return Err(Error::invalid(format!(
                    "duplicate checkpoint id `{}`",
                    e.checkpoint_id
                )));
            }
        }
        entries.sort_by(|a, b| {
            a.cycle
                .cmp(&b.cycle)
                .then(b.val_metric.total_cmp(&a.val_metric))
                .then(b.epoch.cmp(&a.epoch))
        });
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SelectedCheckpoint] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct cycles that contributed, ascending.
    pub fn cycles(&self) -> Vec<usize> {
        let mut cycles: Vec<usize> = self.entries.iter().map(|e| e.cycle).collect();
        cycles.dedup();
        cycles
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.checkpoint_id.as_str())
    }

    /// Writes the manifest CSV (`cycle,epoch,checkpoint_id,metric`). Metrics
    /// use the shortest round-trip representation so reading the manifest
    /// back reproduces the set exactly.
    pub fn write_manifest<W: Write>(&self, writer: W) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("refusing to write an empty checkpoint manifest"));
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["cycle", "epoch", "checkpoint_id", "metric"])?;
        for e in &self.entries {
            w.write_record([
                e.cycle.to_string(),
                e.epoch.to_string(),
                e.checkpoint_id.clone(),
                e.val_metric.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_manifest<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            cycle: usize,
            epoch: usize,
            checkpoint_id: String,
            metric: f64,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let entries = rdr
            .deserialize()
            .map(|row| {
                row.map(|r: Row| SelectedCheckpoint {
                    cycle: r.cycle,
                    epoch: r.epoch,
                    checkpoint_id: r.checkpoint_id,
                    val_metric: r.metric,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(entries)
    }
}

/// Writes the manifest to `path`.
pub fn export_selection(set: &CheckpointSet, path: impl AsRef<Path>) -> Result<()> {
    if set.is_empty() {
        return Err(Error::invalid("refusing to write an empty checkpoint manifest"));
    }
    let path = path.as_ref();
    set.write_manifest(File::create(path).map_err(Error::at(path))?)
}

pub fn read_selection(path: impl AsRef<Path>) -> Result<CheckpointSet> {
    let path = path.as_ref();
    CheckpointSet::read_manifest(File::open(path).map_err(Error::at(path))?)
}

/// Selects the `per_cycle` best checkpointed epochs in each qualifying
/// cycle's search window. Ties go to the later epoch.
pub fn find_cycle_peaks(
    trace: &TrainingTrace,
    cfg: &SgdrConfig,
    policy: &SelectionPolicy,
) -> Result<CheckpointSet> {
    cfg.validate()?;
    policy.validate()?;
    let records = trace.records();
    let last = records
        .last()
        .ok_or_else(|| Error::invalid("training trace is empty"))?;
    if last.epoch >= cfg.total_epochs {
        return Err(Error::invalid(format!(
            "trace epoch {} beyond the configured {} epochs",
            last.epoch, cfg.total_epochs
        )));
    }
    let first_cycle = cfg.cycles().next().expect("at least one cycle");
    if last.epoch + 1 < first_cycle.cycle_end.min(cfg.total_epochs) {
        return Err(Error::invalid(format!(
            "trace ends at epoch {} before the first cycle completes at {}",
            last.epoch, first_cycle.cycle_end
        )));
    }

    let mut per_cycle: Vec<(usize, Vec<&TraceRecord>)> = Vec::new();
    for cycle in cfg.cycles_in_run() {
        let (lo, hi) = policy.window.range(&cycle);
        let mut candidates: Vec<&TraceRecord> = records
            .iter()
            .filter(|r| r.checkpoint_id.is_some() && (lo..hi).contains(&r.epoch))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        candidates.sort_by(|a, b| {
            b.val_metric
                .total_cmp(&a.val_metric)
                .then(b.epoch.cmp(&a.epoch))
        });
        per_cycle.push((cycle.cycle, candidates));
    }

    let global_best = per_cycle
        .iter()
        .map(|(_, c)| c[0].val_metric)
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = policy.min_peak_ratio * global_best;

    let entries = per_cycle
        .into_iter()
        .filter(|(_, c)| c[0].val_metric >= threshold)
        .flat_map(|(cycle, c)| {
            c.into_iter().take(policy.per_cycle).map(move |r| SelectedCheckpoint {
                cycle,
                epoch: r.epoch,
                checkpoint_id: r.checkpoint_id.clone().expect("filtered"),
                val_metric: r.val_metric,
            })
        })
        .collect();
    CheckpointSet::new(entries)
}
