//! Binary dilation and the contour ring used to normalize entropy sums.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::BinaryImage;

/// Odd-sided neighborhood mask `(depth, height, width)` with its center set.
///
/// A depth of 1 gives per-slice (2D) morphology on volumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    mask: Array3<bool>,
}

impl StructuringElement {
    pub fn new(mask: Array3<bool>) -> Result<Self> {
        let (d, h, w) = mask.dim();
        if d % 2 == 0 || h % 2 == 0 || w % 2 == 0 {
            return Err(Error::invalid(format!(
                "structuring element sides must be odd, got {d}x{h}x{w}"
            )));
        }
        if !mask[[d / 2, h / 2, w / 2]] {
            return Err(Error::invalid("structuring element center must be set"));
        }
        Ok(Self { mask })
    }

    /// Full `(2r+1) × (2r+1)` square applied slice by slice.
    pub fn square(radius: usize) -> Self {
        let side = 2 * radius + 1;
        Self {
            mask: Array3::from_elem((1, side, side), true),
        }
    }

    /// Full `(2r+1)³` cube.
    pub fn cube(radius: usize) -> Self {
        let side = 2 * radius + 1;
        Self {
            mask: Array3::from_elem((side, side, side), true),
        }
    }

    pub fn mask(&self) -> &Array3<bool> {
        &self.mask
    }

    /// Offsets of the set cells relative to the center.
    pub fn offsets(&self) -> Vec<[isize; 3]> {
        let (d, h, w) = self.mask.dim();
        let center = [(d / 2) as isize, (h / 2) as isize, (w / 2) as isize];
        self.mask
            .indexed_iter()
            .filter(|(_, &set)| set)
            .map(|((z, y, x), _)| {
                [
                    z as isize - center[0],
                    y as isize - center[1],
                    x as isize - center[2],
                ]
            })
            .collect()
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square(1)
    }
}

/// Parses `square:R` or `cube:R`.
impl std::str::FromStr for StructuringElement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("structuring element `{s}`, expected square:R or cube:R"));
        let (kind, radius) = s.split_once(':').ok_or_else(bad)?;
        let radius: usize = radius.trim().parse().map_err(|_| bad())?;
        match kind.trim() {
            "square" => Ok(Self::square(radius)),
            "cube" => Ok(Self::cube(radius)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for StructuringElement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (d, h, w) = self.mask.dim();
        let full = self.mask.iter().all(|&v| v);
        match (full, d) {
            (true, 1) if h == w => write!(f, "square:{}", h / 2),
            (true, _) if d == h && h == w => write!(f, "cube:{}", h / 2),
            _ => write!(f, "custom:{d}x{h}x{w}"),
        }
    }
}

/// `I ⊕ A`: every set pixel stamps the element around itself. Neighborhoods
/// running off the array edge are clipped (outside counts as background).
pub fn dilate(image: &BinaryImage, element: &StructuringElement) -> BinaryImage {
    let src = image.values();
    let (d, h, w) = src.dim();
    let offsets = element.offsets();
    let mut out = Array3::from_elem((d, h, w), false);
    for ((z, y, x), _) in src.indexed_iter().filter(|(_, &v)| v) {
        for [dz, dy, dx] in &offsets {
            let (tz, ty, tx) = (z as isize + dz, y as isize + dy, x as isize + dx);
            if tz >= 0
                && ty >= 0
                && tx >= 0
                && (tz as usize) < d
                && (ty as usize) < h
                && (tx as usize) < w
            {
                out[[tz as usize, ty as usize, tx as usize]] = true;
            }
        }
    }
    BinaryImage::new(out).expect("same shape as input")
}

/// The ring `(I ⊕ A) \ I` of pixels added by dilation.
pub fn contour_normalizer(image: &BinaryImage, element: &StructuringElement) -> BinaryImage {
    dilate(image, element)
        .and_not(image)
        .expect("dilation preserves shape")
}
