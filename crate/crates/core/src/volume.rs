//! Array types for slices and volumes.
//!
//! Every field is stored as a volume with a leading depth axis. A 2D slice is
//! simply a volume of depth 1, so the same operations apply to per-slice and
//! per-volume processing. Probability volumes carry an extra leading class
//! axis: `(class, depth, height, width)`.

use ndarray::{concatenate, Array3, Array4, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};

/// Maximum deviation of a per-pixel class vector from unit sum.
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

/// Spatial extent of a single 2D slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct SliceShape {
    pub height: usize,
    pub width: usize,
}

impl SliceShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "slice dimensions must be >= 1, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn with_depth(self, depth: usize) -> Result<VolumeShape> {
        VolumeShape::new(depth, self.height, self.width)
    }
}

/// Spatial extent of a volume (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VolumeShape {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeShape {
    pub fn new(depth: usize, height: usize, width: usize) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "volume dimensions must be >= 1, got {depth}x{height}x{width}"
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn of<T>(a: &Array3<T>) -> Result<Self> {
        let (d, h, w) = a.dim();
        Self::new(d, h, w)
    }
}

/// Real-valued intensity field (CT values in arbitrary units).
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVolume {
    values: Array3<f64>,
}

impl IntensityVolume {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        VolumeShape::of(&values)?;
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "intensity volume has non-finite value at flat index {idx}"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_slice(values: ndarray::Array2<f64>) -> Result<Self> {
        Self::new(values.insert_axis(Axis(0)))
    }

    pub fn shape(&self) -> VolumeShape {
        let (depth, height, width) = self.values.dim();
        VolumeShape {
            depth,
            height,
            width,
        }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }
}

/// Integer class labels. Code 0 is background; for kidney CT the foreground
/// codes are 1 kidney, 2 tumor, 3 cyst.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    values: Array3<u8>,
    class_count: usize,
}

impl LabelVolume {
    pub fn new(values: Array3<u8>, class_count: usize) -> Result<Self> {
        VolumeShape::of(&values)?;
        if class_count < 2 {
            return Err(Error::invalid(format!(
                "class_count must be >= 2, got {class_count}"
            )));
        }
        if let Some(&bad) = values.iter().find(|&&v| v as usize >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            values,
            class_count,
        })
    }

    /// Builds a label volume whose class count is one past its largest code
    /// (at least 2).
    pub fn with_inferred_classes(values: Array3<u8>) -> Result<Self> {
        let max = values.iter().copied().max().unwrap_or(0) as usize;
        Self::new(values, (max + 1).max(2))
    }

    pub fn shape(&self) -> VolumeShape {
        let (depth, height, width) = self.values.dim();
        VolumeShape {
            depth,
            height,
            width,
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn values(&self) -> &Array3<u8> {
        &self.values
    }

    /// Binary mask of the pixels carrying `class`.
    pub fn mask(&self, class: usize) -> BinaryImage {
        BinaryImage {
            values: self.values.mapv(|v| v as usize == class),
        }
    }
}

/// Per-class posterior probabilities, shape `(class, depth, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    values: Array4<f64>,
}

impl ProbabilityVolume {
    /// Validates the simplex constraints: entries in `[0, 1]` and per-pixel
    /// sums within [`SIMPLEX_TOLERANCE`] of one.
    pub fn new(values: Array4<f64>) -> Result<Self> {
        let (c, d, h, w) = values.dim();
        if c < 2 {
            return Err(Error::invalid(format!(
                "probability volume needs >= 2 classes, got {c}"
            )));
        }
        VolumeShape::new(d, h, w)?;
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::invalid(format!(
                "probability {v} outside [0, 1]"
            )));
        }
        let sums = values.sum_axis(Axis(0));
        if let Some(((z, y, x), s)) = sums
            .indexed_iter()
            .find(|(_, s)| (**s - 1.0).abs() > SIMPLEX_TOLERANCE)
        {
            return Err(Error::invalid(format!(
                "class probabilities at ({z}, {y}, {x}) sum to {s}, not 1"
            )));
        }
        Ok(Self { values })
    }

    /// A single 2D slice given as `(class, height, width)`.
    pub fn from_slice(values: Array3<f64>) -> Result<Self> {
        Self::new(values.insert_axis(Axis(1)))
    }

    pub fn class_count(&self) -> usize {
        self.values.dim().0
    }

    pub fn shape(&self) -> VolumeShape {
        let (_, depth, height, width) = self.values.dim();
        VolumeShape {
            depth,
            height,
            width,
        }
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array4<f64> {
        self.values
    }

    /// View of one class plane.
    pub fn class_plane(&self, class: usize) -> Option<ArrayView3<'_, f64>> {
        (class < self.class_count()).then(|| self.values.index_axis(Axis(0), class))
    }
}

/// A {0,1} field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    values: Array3<bool>,
}

impl BinaryImage {
    pub fn new(values: Array3<bool>) -> Result<Self> {
        VolumeShape::of(&values)?;
        Ok(Self { values })
    }

    pub fn from_slice(values: ndarray::Array2<bool>) -> Result<Self> {
        Self::new(values.insert_axis(Axis(0)))
    }

    pub fn zeros(shape: VolumeShape) -> Self {
        Self {
            values: Array3::from_elem(shape.dims(), false),
        }
    }

    pub fn shape(&self) -> VolumeShape {
        let (depth, height, width) = self.values.dim();
        VolumeShape {
            depth,
            height,
            width,
        }
    }

    pub fn values(&self) -> &Array3<bool> {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryImage) -> bool {
        self.shape() == other.shape()
            && Zip::from(&self.values)
                .and(&other.values)
                .all(|&a, &b| !a || b)
    }

    /// Pixels set in `self` but not in `other`.
    pub fn and_not(&self, other: &BinaryImage) -> Result<BinaryImage> {
        check_same(self.shape(), other.shape())?;
        Ok(BinaryImage {
            values: Zip::from(&self.values)
                .and(&other.values)
                .map_collect(|&a, &b| a && !b),
        })
    }
}

pub(crate) fn check_same(a: VolumeShape, b: VolumeShape) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.depth, a.height, a.width, b.depth, b.height, b.width
        )));
    }
    Ok(())
}

/// Per-case z-score normalization using the population standard deviation
/// over every voxel of the volume.
pub fn zscore_normalize(volume: &IntensityVolume, case_id: &str) -> Result<IntensityVolume> {
    let v = volume.values();
    let (min, max) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if min == max {
        return Err(Error::Degenerate {
            case: case_id.to_string(),
            reason: "constant volume has zero standard deviation".into(),
        });
    }
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(Error::Degenerate {
            case: case_id.to_string(),
            reason: format!("standard deviation {std} is unusable"),
        });
    }
    IntensityVolume::new(v.mapv(|x| (x - mean) / std))
}

/// Splitting along the axial (depth) axis and reassembling.
pub trait Axial: Sized {
    fn depth(&self) -> usize;

    /// One depth-1 volume per axial plane, in order.
    fn slice_axial(&self) -> Vec<Self>;

    /// Inverse of [`Axial::slice_axial`]. Slices may themselves have depth > 1.
    fn stack_slices(slices: &[Self]) -> Result<Self>;
}

fn slice3<T: Clone>(a: &Array3<T>) -> Vec<Array3<T>> {
    a.axis_iter(Axis(0))
        .map(|s| s.to_owned().insert_axis(Axis(0)))
        .collect()
}

fn stack3<T: Clone>(slices: &[&Array3<T>]) -> Result<Array3<T>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty slice list"))?;
    let (_, h, w) = first.dim();
    if let Some(i) = slices.iter().position(|s| (s.dim().1, s.dim().2) != (h, w)) {
        let (_, sh, sw) = slices[i].dim();
        return Err(Error::shape(format!(
            "slice {i} is {sh}x{sw}, expected {h}x{w}"
        )));
    }
    let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("shapes checked"))
}

impl Axial for IntensityVolume {
    fn depth(&self) -> usize {
        self.values.dim().0
    }

    fn slice_axial(&self) -> Vec<Self> {
        slice3(&self.values)
            .into_iter()
            .map(|values| Self { values })
            .collect()
    }

    fn stack_slices(slices: &[Self]) -> Result<Self> {
        let refs: Vec<_> = slices.iter().map(|s| &s.values).collect();
        Ok(Self {
            values: stack3(&refs)?,
        })
    }
}

impl Axial for LabelVolume {
    fn depth(&self) -> usize {
        self.values.dim().0
    }

    fn slice_axial(&self) -> Vec<Self> {
        slice3(&self.values)
            .into_iter()
            .map(|values| Self {
                values,
                class_count: self.class_count,
            })
            .collect()
    }

    fn stack_slices(slices: &[Self]) -> Result<Self> {
        let refs: Vec<_> = slices.iter().map(|s| &s.values).collect();
        let values = stack3(&refs)?;
        let class_count = slices[0].class_count;
        if let Some(i) = slices.iter().position(|s| s.class_count != class_count) {
            return Err(Error::shape(format!(
                "slice {i} has {} classes, expected {class_count}",
                slices[i].class_count
            )));
        }
        Ok(Self {
            values,
            class_count,
        })
    }
}

impl Axial for BinaryImage {
    fn depth(&self) -> usize {
        self.values.dim().0
    }

    fn slice_axial(&self) -> Vec<Self> {
        slice3(&self.values)
            .into_iter()
            .map(|values| Self { values })
            .collect()
    }

    fn stack_slices(slices: &[Self]) -> Result<Self> {
        let refs: Vec<_> = slices.iter().map(|s| &s.values).collect();
        Ok(Self {
            values: stack3(&refs)?,
        })
    }
}

impl Axial for ProbabilityVolume {
    fn depth(&self) -> usize {
        self.values.dim().1
    }

    fn slice_axial(&self) -> Vec<Self> {
        self.values
            .axis_iter(Axis(1))
            .map(|s| Self {
                values: s.to_owned().insert_axis(Axis(1)),
            })
            .collect()
    }

    fn stack_slices(slices: &[Self]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty slice list"))?;
        let (c, _, h, w) = first.values.dim();
        if let Some(i) = slices.iter().position(|s| {
            let (sc, _, sh, sw) = s.values.dim();
            (sc, sh, sw) != (c, h, w)
        }) {
            let (sc, _, sh, sw) = slices[i].values.dim();
            return Err(Error::shape(format!(
                "slice {i} is {sc}x{sh}x{sw}, expected {c}x{h}x{w}"
            )));
        }
        let views: Vec<_> = slices.iter().map(|s| s.values.view()).collect();
        Ok(Self {
            values: concatenate(Axis(1), &views).expect("shapes checked"),
        })
    }
}
