//! Checkpoint-ensemble fusion.
//!
//! The ensemble posterior is the uniform average of the member posteriors,
//! `p(y | x) ≈ (1/n) Σ_i p(y | x, w_i)`.

use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ProbabilityVolume};

/// Member posteriors with identical shapes.
#[derive(Debug, Clone)]
pub struct EnsembleInput {
    members: Vec<ProbabilityVolume>,
    member_ids: Vec<String>,
}

impl EnsembleInput {
    pub fn new(members: Vec<ProbabilityVolume>, member_ids: Vec<String>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("ensemble needs at least one member"))?;
        if member_ids.len() != members.len() {
            return Err(Error::invalid(format!(
                "{} member ids for {} members",
                member_ids.len(),
                members.len()
            )));
        }
        let dim = first.values().dim();
        if let Some(i) = members.iter().position(|m| m.values().dim() != dim) {
            return Err(Error::shape(format!(
                "member `{}` has shape {:?}, expected {:?}",
                member_ids[i],
                members[i].values().dim(),
                dim
            )));
        }
        Ok(Self {
            members,
            member_ids,
        })
    }

    /// Members labelled `0..n`.
    pub fn anonymous(members: Vec<ProbabilityVolume>) -> Result<Self> {
        let ids = (0..members.len()).map(|i| i.to_string()).collect();
        Self::new(members, ids)
    }

    pub fn members(&self) -> &[ProbabilityVolume] {
        &self.members
    }

    pub fn member_ids(&self) -> &[String] {
        &self.member_ids
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Per-pixel, per-class arithmetic mean over the members.
///
/// Member values are summed in sorted order at every element, so the result
/// does not depend on member order.
pub fn ensemble_mean(input: &EnsembleInput) -> Result<ProbabilityVolume> {
    let n = input.len();
    let dim = input.members[0].values().dim();
    let mut out = Array4::<f64>::zeros(dim);
    let mut buf = Vec::with_capacity(n);
    for (idx, slot) in out.indexed_iter_mut() {
        buf.clear();
        buf.extend(input.members.iter().map(|m| m.values()[idx]));
        buf.sort_by(f64::total_cmp);
        *slot = buf.iter().sum::<f64>() / n as f64;
    }
    ProbabilityVolume::new(out)
}

/// Per-pixel most probable class; ties go to the lowest class index.
pub fn argmax_labels(p: &ProbabilityVolume) -> LabelVolume {
    let values = p.values();
    let (c, d, h, w) = values.dim();
    let labels = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let mut best = 0;
        for k in 1..c {
            if values[[k, z, y, x]] > values[[best, z, y, x]] {
                best = k;
            }
        }
        best as u8
    });
    LabelVolume::new(labels, c).expect("argmax within class range")
}

/// The probability plane of one class.
pub fn class_foreground(p: &ProbabilityVolume, class: usize) -> Result<Array3<f64>> {
    p.class_plane(class)
        .map(|v| v.to_owned())
        .ok_or_else(|| {
            Error::invalid(format!(
                "class {class} out of range for {} classes",
                p.class_count()
            ))
        })
}

/// Per-pixel maximum class probability.
pub fn confidence(p: &ProbabilityVolume) -> Array3<f64> {
    p.values()
        .map_axis(Axis(0), |v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}
