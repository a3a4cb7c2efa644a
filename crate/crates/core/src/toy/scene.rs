use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{IntensityVolume, LabelVolume, SliceShape};

/// A disk of one foreground class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub class: usize,
    /// (row, column) in pixels.
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity_mean: f64,
    pub intensity_std: f64,
}

/// Generator settings shared by every case of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub shape: SliceShape,
    pub class_count: usize,
    /// Additive Gaussian noise on every pixel.
    pub noise_std: f64,
    /// Blob radius range as fractions of the shorter image side.
    pub radius_range: (f64, f64),
    /// Intensity step between consecutive class codes.
    pub contrast: f64,
    /// Width in pixels of the partial-volume ramp at blob edges.
    pub edge_width: f64,
}

impl DatasetConfig {
    pub fn new(shape: SliceShape, class_count: usize) -> Self {
        Self {
            shape,
            class_count,
            noise_std: 0.2,
            radius_range: (0.08, 0.16),
            contrast: 1.0,
            edge_width: 1.5,
        }
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    fn radius_bounds(&self) -> Result<(f64, f64)> {
        let side = self.shape.height.min(self.shape.width) as f64;
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid(format!(
                "radius range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        let (rmin, rmax) = (lo * side, hi * side);
        if 2.0 * rmax + 2.0 > side {
            return Err(Error::invalid(format!(
                "blob radius {rmax:.1} does not fit a {}x{} image",
                self.shape.height, self.shape.width
            )));
        }
        Ok((rmin, rmax))
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.class_count > 255 {
            return Err(Error::invalid(format!(
                "class_count {} outside [2, 255]",
                self.class_count
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !(self.contrast.is_finite() && self.contrast > 0.0) {
            return Err(Error::invalid(format!("contrast {} must be > 0", self.contrast)));
        }
        if !(self.edge_width.is_finite() && self.edge_width >= 0.0) {
            return Err(Error::invalid(format!("edge_width {} must be >= 0", self.edge_width)));
        }
        self.radius_bounds().map(|_| ())
    }
}

/// Mean intensity of class `k` in units of contrast. Foreground classes
/// alternate above and below the background level 0 (+1, -1, +2, -2, ...),
/// so with three classes each foreground class is an extreme of the
/// intensity range rather than sandwiched between two others.
pub fn class_level(class: usize) -> f64 {
    match class {
        0 => 0.0,
        k if k % 2 == 1 => k.div_ceil(2) as f64,
        k => -((k / 2) as f64),
    }
}

/// Everything needed to regenerate one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub shape: SliceShape,
    pub class_count: usize,
    pub blobs: Vec<Blob>,
    pub noise_std: f64,
    pub edge_width: f64,
}

impl SyntheticScene {
    /// Draws blob geometry from `seed`. Class `required` is always present;
    /// other foreground classes appear with probability 3/4.
    pub fn random(seed: u64, cfg: &DatasetConfig, required: usize) -> Result<Self> {
        cfg.validate()?;
        let (rmin, rmax) = cfg.radius_bounds()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (cfg.shape.height as f64, cfg.shape.width as f64);
        let mut blobs: Vec<Blob> = Vec::new();
        for class in 1..cfg.class_count {
            let keep = rng.random_bool(0.75);
            if class != required && !keep {
                continue;
            }
            let radius = rng.random_range(rmin..=rmax);
            let mut center = (0.0, 0.0);
            for _ in 0..64 {
                center = (
                    rng.random_range(radius + 1.0..=h - radius - 1.0),
                    rng.random_range(radius + 1.0..=w - radius - 1.0),
                );
                let clear = blobs.iter().all(|b| {
                    let d = ((b.center.0 - center.0).powi(2) + (b.center.1 - center.1).powi(2))
                        .sqrt();
                    d > b.radius + radius + 2.0
                });
                if clear {
                    break;
                }
            }
            let jitter = rng.random_range(-0.1..=0.1);
            blobs.push(Blob {
                class,
                center,
                radius,
                intensity_mean: (class_level(class) + jitter) * cfg.contrast,
                intensity_std: 0.5 * cfg.noise_std,
            });
        }
        Ok(Self {
            seed,
            shape: cfg.shape,
            class_count: cfg.class_count,
            blobs,
            noise_std: cfg.noise_std,
            edge_width: cfg.edge_width,
        })
    }

    /// Rasterizes the scene. Later blobs overwrite earlier ones. A pixel
    /// belongs to a blob when its center lies inside the disk, while its
    /// intensity ramps linearly across `edge_width` pixels centered on the
    /// rim, mimicking partial-volume blur.
    pub fn render(&self) -> Result<(IntensityVolume, LabelVolume)> {
        let (h, w) = (self.shape.height, self.shape.width);
        // Noise stream is separate from the geometry stream.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5DEE_CE66_D1CE_4E5B);
        let noise = Normal::new(0.0, self.noise_std)
            .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
        let blob_noise: Vec<Normal<f64>> = self
            .blobs
            .iter()
            .map(|b| Normal::new(0.0, b.intensity_std))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("blob texture distribution: {e}")))?;
        let mut labels = Array3::<u8>::zeros((1, h, w));
        let mut intensity = Array3::<f64>::zeros((1, h, w));
        for y in 0..h {
            for x in 0..w {
                let mut value = 0.0;
                for (b, texture) in self.blobs.iter().zip(&blob_noise) {
                    let (dy, dx) = (y as f64 - b.center.0, x as f64 - b.center.1);
                    let dist = (dy * dy + dx * dx).sqrt();
                    if dist <= b.radius {
                        labels[[0, y, x]] = b.class as u8;
                    }
                    let cover = if self.edge_width > 0.0 {
                        ((b.radius - dist) / self.edge_width + 0.5).clamp(0.0, 1.0)
                    } else if dist <= b.radius {
                        1.0
                    } else {
                        0.0
                    };
                    if cover > 0.0 {
                        let inside = b.intensity_mean + texture.sample(&mut rng);
                        value = value * (1.0 - cover) + inside * cover;
                    }
                }
                intensity[[0, y, x]] = value + noise.sample(&mut rng);
            }
        }
        Ok((
            IntensityVolume::new(intensity)?,
            LabelVolume::new(labels, self.class_count)?,
        ))
    }
}

/// One synthetic case: scene description, image and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCase {
    pub id: String,
    pub scene: SyntheticScene,
    pub intensity: IntensityVolume,
    pub labels: LabelVolume,
}

/// `n_cases` seeded scenes with default generator settings.
pub fn generate_dataset(
    seed: u64,
    n_cases: usize,
    shape: SliceShape,
    class_count: usize,
) -> Result<Vec<ToyCase>> {
    generate_with(seed, n_cases, &DatasetConfig::new(shape, class_count), "case")
}

/// `n_cases` seeded scenes named `{prefix}_{index:03}`. Case `i` always
/// contains foreground class `1 + i mod (c - 1)`, so every class appears
/// once `n_cases >= c - 1`.
pub fn generate_with(
    seed: u64,
    n_cases: usize,
    cfg: &DatasetConfig,
    prefix: &str,
) -> Result<Vec<ToyCase>> {
    generate_varied(seed, n_cases, prefix, |_| *cfg)
}

/// Like [`generate_with`] with a generator config chosen per case index.
/// All configs must agree on shape and class count.
pub fn generate_varied(
    seed: u64,
    n_cases: usize,
    prefix: &str,
    cfg_for: impl Fn(usize) -> DatasetConfig,
) -> Result<Vec<ToyCase>> {
    if n_cases == 0 {
        return Err(Error::invalid("n_cases must be >= 1"));
    }
    let first = cfg_for(0);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n_cases)
        .map(|i| {
            let cfg = cfg_for(i);
            if (cfg.shape, cfg.class_count) != (first.shape, first.class_count) {
                return Err(Error::invalid(
                    "per-case configs must share shape and class count",
                ));
            }
            cfg.validate()?;
            let case_seed: u64 = master.random();
            let required = 1 + i % (cfg.class_count - 1);
            let scene = SyntheticScene::random(case_seed, &cfg, required)?;
            let (intensity, labels) = scene.render()?;
            Ok(ToyCase {
                id: format!("{prefix}_{i:03}"),
                scene,
                intensity,
                labels,
            })
        })
        .collect()
}
