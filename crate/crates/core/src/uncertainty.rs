//! Entropy maps and per-class uncertainty scores.
//!
//! The score for a class divides the total entropy of the fused posterior by
//! the number of pixels in the dilation ring around that class's thresholded
//! foreground. Large structures have long contours, so the ratio stays
//! comparable across structure sizes and across slices or volumes.

use ndarray::{Array3, Axis, Zip};
use serde::Serialize;

use crate::ensemble::class_foreground;
use crate::error::{Error, Result};
use crate::format::ArrayData;
use crate::morphology::{contour_normalizer, StructuringElement};
use crate::volume::{check_same, BinaryImage, ProbabilityVolume, VolumeShape};

/// Per-pixel Shannon entropy in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    values: Array3<f64>,
    class_count: usize,
}

impl EntropyMap {
    pub fn new(values: Array3<f64>, class_count: usize) -> Result<Self> {
        let max = (class_count as f64).log2();
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > max + 1e-9)
        {
            return Err(Error::invalid(format!(
                "entropy {v} outside [0, log2({class_count})]"
            )));
        }
        Ok(Self {
            values,
            class_count,
        })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn max_entropy(&self) -> f64 {
        (self.class_count as f64).log2()
    }

    pub fn shape(&self) -> VolumeShape {
        let (depth, height, width) = self.values.dim();
        VolumeShape {
            depth,
            height,
            width,
        }
    }

    pub fn to_array_data(&self) -> ArrayData {
        ArrayData::F32(self.values.mapv(|v| v as f32).into_dyn())
    }

    /// Binary (P5) PGM images, one per axial slice, scaled so that
    /// `log2(c)` bits maps to 255.
    pub fn to_pgm_slices(&self) -> Vec<Vec<u8>> {
        let scale = 255.0 / self.max_entropy();
        let (_, h, w) = self.values.dim();
        self.values
            .axis_iter(Axis(0))
            .map(|plane| {
                let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
                out.extend(
                    plane
                        .iter()
                        .map(|v| (v * scale).round().clamp(0.0, 255.0) as u8),
                );
                out
            })
            .collect()
    }
}

/// `H = -Σ_k p_k log2 p_k` at every pixel, with `0 · log2 0 = 0`.
pub fn pixel_entropy(p: &ProbabilityVolume) -> EntropyMap {
    let c = p.class_count();
    let max = (c as f64).log2();
    let values = p.values().map_axis(Axis(0), |probs| {
        let h: f64 = probs
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| -q * q.log2())
            .sum();
        h.clamp(0.0, max)
    });
    EntropyMap {
        values,
        class_count: c,
    }
}

/// Pixels strictly above `tau`.
pub fn threshold_binary(field: &Array3<f64>, tau: f64) -> Result<BinaryImage> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("threshold {tau} outside [0, 1]")));
    }
    BinaryImage::new(field.mapv(|v| v > tau))
}

/// Sum of entropy over the whole map, or over the pixels set in `region`.
pub fn total_entropy(h: &EntropyMap, region: Option<&BinaryImage>) -> Result<f64> {
    match region {
        None => Ok(h.values.sum()),
        Some(mask) => {
            check_same(h.shape(), mask.shape())?;
            let mut sum = 0.0;
            Zip::from(&h.values)
                .and(mask.values())
                .for_each(|&v, &m| {
                    if m {
                        sum += v;
                    }
                });
            Ok(sum)
        }
    }
}

/// Pixels whose entropy enters the numerator of the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyRegion {
    /// Every pixel of the image.
    #[default]
    WholeImage,
    /// Only the class's contour ring.
    ContourBand,
}

impl std::str::FromStr for EntropyRegion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole-image" => Ok(Self::WholeImage),
            "contour-band" => Ok(Self::ContourBand),
            other => Err(Error::invalid(format!("unknown entropy region `{other}`"))),
        }
    }
}

impl std::fmt::Display for EntropyRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::WholeImage => "whole-image",
            Self::ContourBand => "contour-band",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOptions {
    pub element: StructuringElement,
    pub region: EntropyRegion,
    pub threshold: f64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            element: StructuringElement::default(),
            region: EntropyRegion::WholeImage,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyScore {
    pub class_id: usize,
    /// Bits.
    pub h_total: f64,
    pub contour_pixels: usize,
    /// Bits per contour pixel; 0 when the contour is empty.
    pub score: f64,
    pub empty_contour: bool,
}

/// Scores one class of a fused posterior.
pub fn uncertainty_score(
    p: &ProbabilityVolume,
    class: usize,
    opts: &ScoreOptions,
) -> Result<UncertaintyScore> {
    let entropy = pixel_entropy(p);
    score_with_entropy(p, &entropy, class, opts)
}

/// As [`uncertainty_score`], reusing a precomputed entropy map of `p`.
pub fn score_with_entropy(
    p: &ProbabilityVolume,
    entropy: &EntropyMap,
    class: usize,
    opts: &ScoreOptions,
) -> Result<UncertaintyScore> {
    check_same(p.shape(), entropy.shape())?;
    let plane = class_foreground(p, class)?;
    let mask = threshold_binary(&plane, opts.threshold)?;
    let ring = contour_normalizer(&mask, &opts.element);
    let h_total = match opts.region {
        EntropyRegion::WholeImage => total_entropy(entropy, None)?,
        EntropyRegion::ContourBand => total_entropy(entropy, Some(&ring))?,
    };
    let contour_pixels = ring.count();
    let empty_contour = contour_pixels == 0;
    let score = if empty_contour {
        0.0
    } else {
        h_total / contour_pixels as f64
    };
    Ok(UncertaintyScore {
        class_id: class,
        h_total,
        contour_pixels,
        score,
        empty_contour,
    })
}
