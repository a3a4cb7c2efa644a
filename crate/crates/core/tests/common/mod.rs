//! Fixtures and brute-force reference implementations shared by the
//! integration tests and the acceptance runner. The oracles are written the
//! slow, obvious way and never call into the library code they check.

#![allow(dead_code)]

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uqseg::{BinaryImage, LabelVolume, ProbabilityVolume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize, density: f64) -> Array3<bool> {
    Array3::from_shape_fn((d, h, w), |_| rng.random_bool(density))
}

pub fn random_binary(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> BinaryImage {
    let density = rng.random_range(0.02..0.5);
    BinaryImage::new(random_mask(rng, d, h, w, density)).unwrap()
}

/// Softmax of random logits with a random temperature per pixel, so
/// confidences spread from near uniform to near one-hot.
pub fn random_posterior(rng: &mut ChaCha8Rng, c: usize, d: usize, h: usize, w: usize) -> ProbabilityVolume {
    let mut p = Array4::zeros((c, d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let scale = rng.random_range(0.0..8.0);
                let logits: Vec<f64> = (0..c).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let s: f64 = e.iter().sum();
                for k in 0..c {
                    p[[k, z, y, x]] = e[k] / s;
                }
            }
        }
    }
    ProbabilityVolume::new(p).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, c: usize, d: usize, h: usize, w: usize) -> LabelVolume {
    let v = Array3::from_shape_fn((d, h, w), |_| rng.random_range(0..c) as u8);
    LabelVolume::new(v, c).unwrap()
}

/// Gather-form dilation: a pixel is set when some set element cell, mirrored
/// through the center, lands on a set input pixel.
pub fn dilate_oracle(img: &Array3<bool>, element: &Array3<bool>) -> Array3<bool> {
    let (d, h, w) = img.dim();
    let (ed, eh, ew) = element.dim();
    let (cz, cy, cx) = ((ed / 2) as isize, (eh / 2) as isize, (ew / 2) as isize);
    let mut out = Array3::from_elem((d, h, w), false);
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut hit = false;
                for ez in 0..ed as isize {
                    for ey in 0..eh as isize {
                        for ex in 0..ew as isize {
                            if !element[[ez as usize, ey as usize, ex as usize]] {
                                continue;
                            }
                            let (sz, sy, sx) = (z - (ez - cz), y - (ey - cy), x - (ex - cx));
                            if sz < 0 || sy < 0 || sx < 0 {
                                continue;
                            }
                            if sz >= d as isize || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            if img[[sz as usize, sy as usize, sx as usize]] {
                                hit = true;
                            }
                        }
                    }
                }
                out[[z as usize, y as usize, x as usize]] = hit;
            }
        }
    }
    out
}

pub fn contour_oracle(img: &Array3<bool>, element: &Array3<bool>) -> Array3<bool> {
    let dilated = dilate_oracle(img, element);
    Array3::from_shape_fn(img.dim(), |i| dilated[i] && !img[i])
}

/// ECE in percent by direct enumeration: argmax with ties to the lower
/// class, bins `(b/n, (b+1)/n]` found by linear scan, zero in bin 0.
pub fn ece_oracle(p: &ProbabilityVolume, gt: &LabelVolume, n_bins: usize) -> f64 {
    let probs = p.values();
    let (c, d, h, w) = probs.dim();
    let mut count = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for k in 1..c {
                    if probs[[k, z, y, x]] > probs[[best, z, y, x]] {
                        best = k;
                    }
                }
                let conf = probs[[best, z, y, x]];
                let mut b = 0;
                while b + 1 < n_bins && conf > (b + 1) as f64 / n_bins as f64 {
                    b += 1;
                }
                count[b] += 1;
                conf_sum[b] += conf;
                if best as u8 == gt.values()[[z, y, x]] {
                    correct[b] += 1;
                }
            }
        }
    }
    let total: usize = count.iter().sum();
    let mut ece = 0.0;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let acc = correct[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        ece += count[b] as f64 / total as f64 * (acc - conf).abs();
    }
    100.0 * ece
}

/// Pixelwise arithmetic mean of the members, accumulated in member order.
pub fn mean_oracle(members: &[ProbabilityVolume]) -> Array4<f64> {
    let mut sum = Array4::zeros(members[0].values().dim());
    for m in members {
        sum += m.values();
    }
    sum / members.len() as f64
}

/// Spearman's rho from counted average ranks. `None` when undefined.
pub fn spearman_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let rank = |v: &[f64], i: usize| {
        let below = v.iter().filter(|&&o| o < v[i]).count() as f64;
        let equal = v.iter().filter(|&&o| o == v[i]).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let n = x.len();
    let rx: Vec<f64> = (0..n).map(|i| rank(x, i)).collect();
    let ry: Vec<f64> = (0..n).map(|i| rank(y, i)).collect();
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let cov: f64 = (0..n).map(|i| (rx[i] - mx) * (ry[i] - my)).sum();
    let vx: f64 = rx.iter().map(|r| (r - mx) * (r - mx)).sum();
    let vy: f64 = ry.iter().map(|r| (r - my) * (r - my)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}
