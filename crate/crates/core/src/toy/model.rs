use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::format::ArrayData;
use crate::toy::scene::ToyCase;
use crate::volume::{zscore_normalize, IntensityVolume, ProbabilityVolume, VolumeShape};

/// Handcrafted per-pixel features: intensity, 3×3 mean, 3×3 variance,
/// row and column coordinates in `[-1, 1]`.
pub const FEATURE_COUNT: usize = 5;
/// Features plus a constant bias input.
pub const INPUT_COUNT: usize = FEATURE_COUNT + 1;

/// Design matrix of one image, one row per pixel in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    pub rows: Array2<f64>,
    pub shape: VolumeShape,
}

/// Features of an already normalized volume. Neighborhoods stay within a
/// slice and only count in-bounds pixels.
pub fn pixel_features(normalized: &IntensityVolume) -> PixelFeatures {
    let v = normalized.values();
    let shape = normalized.shape();
    let (d, h, w) = shape.dims();
    let coord = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let mut rows = Array2::zeros((shape.len(), INPUT_COUNT));
    let mut r = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        let q = v[[z, ny, nx]];
                        sum += q;
                        sq += q * q;
                        n += 1.0;
                    }
                }
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0);
                let mut row = rows.row_mut(r);
                row[0] = v[[z, y, x]];
                row[1] = mean;
                row[2] = var;
                row[3] = coord(y, h);
                row[4] = coord(x, w);
                row[5] = 1.0;
                r += 1;
            }
        }
    }
    PixelFeatures { rows, shape }
}

/// Z-scores the case and extracts its features.
pub fn case_features(intensity: &IntensityVolume, case_id: &str) -> Result<PixelFeatures> {
    Ok(pixel_features(&zscore_normalize(intensity, case_id)?))
}

/// Row-wise softmax of `logits`, in place.
pub(crate) fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
}

/// Linear softmax pixel classifier, weights `(class, INPUT_COUNT)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    weights: Array2<f64>,
}

impl ToyModel {
    pub fn zeros(class_count: usize) -> Self {
        Self {
            weights: Array2::zeros((class_count, INPUT_COUNT)),
        }
    }

    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        let (c, f) = weights.dim();
        if c < 2 || f != INPUT_COUNT {
            return Err(Error::shape(format!(
                "model weights must be (classes >= 2, {INPUT_COUNT}), got ({c}, {f})"
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite model weight".into()));
        }
        Ok(Self { weights })
    }

    pub fn class_count(&self) -> usize {
        self.weights.dim().0
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    /// Per-pixel posterior rows `(pixels, class)`.
    pub fn posterior(&self, features: &PixelFeatures) -> Array2<f64> {
        let mut p = features.rows.dot(&self.weights.t());
        softmax_rows(&mut p);
        p
    }

    pub fn predict_features(&self, features: &PixelFeatures) -> Result<ProbabilityVolume> {
        let p = self.posterior(features);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("posterior overflowed; weights too large".into()));
        }
        let (d, h, w) = features.shape.dims();
        let c = self.class_count();
        let volume = p
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, d, h, w))
            .map_err(|e| Error::shape(e.to_string()))?;
        ProbabilityVolume::new(volume)
    }

    /// Softmax posterior for a raw (unnormalized) intensity volume.
    pub fn predict(&self, intensity: &IntensityVolume, case_id: &str) -> Result<ProbabilityVolume> {
        self.predict_features(&case_features(intensity, case_id)?)
    }

    /// Copy with weights rounded to float32, the precision stored on disk.
    pub fn to_stored_precision(&self) -> Self {
        Self {
            weights: self.weights.mapv(|w| w as f32 as f64),
        }
    }

    pub fn to_array_data(&self) -> ArrayData {
        ArrayData::F32(self.weights.mapv(|w| w as f32).into_dyn())
    }

    pub fn from_array_data(data: ArrayData) -> Result<Self> {
        match data {
            ArrayData::F32(a) if a.ndim() == 2 => Self::from_weights(
                a.mapv(f64::from)
                    .into_dimensionality()
                    .expect("rank checked"),
            ),
            other => Err(Error::Format(format!(
                "checkpoint must be a rank-2 float32 array, got {:?} with shape {:?}",
                other.dtype(),
                other.shape()
            ))),
        }
    }
}

/// Posterior of `model` for one case.
pub fn predict(model: &ToyModel, case: &ToyCase) -> Result<ProbabilityVolume> {
    model.predict(&case.intensity, &case.id)
}

/// Checkpoints by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointStore {
    models: BTreeMap<String, ToyModel>,
}

impl CheckpointStore {
    pub fn insert(&mut self, id: impl Into<String>, model: ToyModel) {
        self.models.insert(id.into(), model);
    }

    pub fn get(&self, id: &str) -> Result<&ToyModel> {
        self.models
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no checkpoint with id `{id}`")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ToyModel)> {
        self.models.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn predict(&self, id: &str, case: &ToyCase) -> Result<ProbabilityVolume> {
        predict(self.get(id)?, case)
    }
}

/// Argmax class of each posterior row; ties go to the lower class.
pub(crate) fn rows_to_labels(p: &Array2<f64>) -> Vec<u8> {
    p.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
