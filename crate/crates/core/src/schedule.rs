//! Cosine annealing with warm restarts.
//!
//! The learning rate restarts at `lr_max` at the start of every cycle and
//! decays along a half cosine towards `lr_min`. Epochs are integer steps and
//! the rate is evaluated at the start of each epoch.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where cycle boundaries fall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartConvention {
    /// Restarts at `t0 · eta^i` (100, 200, 400, 800 for `t0 = 100, eta = 2`).
    /// No cycle is shorter than `t0`, so `eta = 1` restarts every `t0` epochs.
    #[default]
    Geometric,
    /// Cycle `i` lasts `t0 · eta^i` epochs and restarts accumulate
    /// (100, 300, 700 for `t0 = 100, eta = 2`).
    Cumulative,
}

impl std::str::FromStr for RestartConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(Self::Geometric),
            "cumulative" => Ok(Self::Cumulative),
            other => Err(Error::invalid(format!("unknown restart convention `{other}`"))),
        }
    }
}

impl std::fmt::Display for RestartConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Geometric => "geometric",
            Self::Cumulative => "cumulative",
        })
    }
}

/// Shape of the decay inside a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnealingForm {
    /// `lr_min + (lr_max - lr_min)/2 · (1 + cos(π·t/T))`.
    #[default]
    Standard,
    /// `lr_min/2 · (1 + cos(π·t/T)) + lr_min`; ignores `lr_max`, decays from
    /// `2·lr_min` to `lr_min`. Kept for comparison experiments only.
    LiteralMinAmplitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdrConfig {
    pub t0: usize,
    pub eta: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
    #[serde(default)]
    pub convention: RestartConvention,
    #[serde(default)]
    pub form: AnnealingForm,
}

impl Default for SgdrConfig {
    fn default() -> Self {
        Self {
            t0: 100,
            eta: 2.0,
            lr_max: 0.1,
            lr_min: 1e-4,
            total_epochs: 800,
            convention: RestartConvention::Geometric,
            form: AnnealingForm::Standard,
        }
    }
}

impl SgdrConfig {
    pub fn new(t0: usize, eta: f64, lr_max: f64, lr_min: f64, total_epochs: usize) -> Result<Self> {
        let cfg = Self {
            t0,
            eta,
            lr_max,
            lr_min,
            total_epochs,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_convention(mut self, convention: RestartConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn with_form(mut self, form: AnnealingForm) -> Self {
        self.form = form;
        self
    }

    // lr_min == lr_max is accepted: a flat schedule (including all-zero)
    // is a useful control run.
    pub fn validate(&self) -> Result<()> {
        if self.t0 == 0 {
            return Err(Error::invalid("t0 must be >= 1"));
        }
        if !(self.eta.is_finite() && self.eta >= 1.0) {
            return Err(Error::invalid(format!("eta must be >= 1, got {}", self.eta)));
        }
        if !(self.lr_min.is_finite() && self.lr_max.is_finite())
            || self.lr_min < 0.0
            || self.lr_min > self.lr_max
        {
            return Err(Error::invalid(format!(
                "need 0 <= lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::invalid("total_epochs must be >= 1"));
        }
        Ok(())
    }

    /// Iterator over successive cycles, unbounded.
    pub fn cycles(&self) -> Cycles {
        Cycles {
            cfg: *self,
            next: 0,
            start: 0,
        }
    }

    /// Cycles that intersect `[0, total_epochs)`.
    pub fn cycles_in_run(&self) -> impl Iterator<Item = CycleIndex> + '_ {
        self.cycles().take_while(|c| c.cycle_start < self.total_epochs)
    }
}

/// One cycle of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleIndex {
    pub cycle: usize,
    /// Cycle length in epochs, `cycle_end - cycle_start`.
    pub t_i: usize,
    pub cycle_start: usize,
    /// Exclusive; equals the next cycle's `cycle_start`.
    pub cycle_end: usize,
}

impl CycleIndex {
    pub fn contains(&self, epoch: usize) -> bool {
        (self.cycle_start..self.cycle_end).contains(&epoch)
    }
}

pub struct Cycles {
    cfg: SgdrConfig,
    next: usize,
    start: usize,
}

impl Iterator for Cycles {
    type Item = CycleIndex;

    fn next(&mut self) -> Option<CycleIndex> {
        let i = self.next;
        let t0 = self.cfg.t0 as f64;
        let end = match self.cfg.convention {
            RestartConvention::Geometric => {
                let target = (t0 * self.cfg.eta.powi(i as i32)).round() as usize;
                target.max(self.start + self.cfg.t0)
            }
            RestartConvention::Cumulative => {
                let len = (t0 * self.cfg.eta.powi(i as i32)).round() as usize;
                self.start + len.max(1)
            }
        };
        let cycle = CycleIndex {
            cycle: i,
            t_i: end - self.start,
            cycle_start: self.start,
            cycle_end: end,
        };
        self.next += 1;
        self.start = end;
        Some(cycle)
    }
}

fn check_epoch(epoch: usize, cfg: &SgdrConfig) -> Result<()> {
    if epoch >= cfg.total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside [0, {})",
            cfg.total_epochs
        )));
    }
    Ok(())
}

/// The cycle containing `epoch`.
pub fn cycle_of(epoch: usize, cfg: &SgdrConfig) -> Result<CycleIndex> {
    check_epoch(epoch, cfg)?;
    Ok(cfg
        .cycles()
        .find(|c| c.contains(epoch))
        .expect("cycles tile the epoch axis"))
}

/// Learning rate at the start of `epoch`.
pub fn lr_at(epoch: usize, cfg: &SgdrConfig) -> Result<f64> {
    let c = cycle_of(epoch, cfg)?;
    Ok(lr_at_offset((epoch - c.cycle_start) as f64, &c, cfg))
}

/// Learning rate at a continuous offset into a cycle; `offset = t_i` gives
/// the limit at the cycle end.
pub fn lr_at_offset(offset: f64, cycle: &CycleIndex, cfg: &SgdrConfig) -> f64 {
    let cos = (PI * offset / cycle.t_i as f64).cos();
    match cfg.form {
        // Written as a decay from lr_max so the cycle start is exact.
        AnnealingForm::Standard => cfg.lr_max - 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 - cos),
        AnnealingForm::LiteralMinAmplitude => 0.5 * cfg.lr_min * (cos + 1.0) + cfg.lr_min,
    }
}

/// Cycle boundaries that fall within the run (`<= total_epochs`).
pub fn restart_epochs(cfg: &SgdrConfig) -> Vec<usize> {
    cfg.cycles()
        .map(|c| c.cycle_end)
        .take_while(|&e| e <= cfg.total_epochs)
        .collect()
}
