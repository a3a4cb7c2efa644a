use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schedule::{cycle_of, lr_at, SgdrConfig};
use crate::select::{SearchWindow, TraceRecord, TrainingTrace};
use crate::toy::model::{case_features, rows_to_labels, CheckpointStore, PixelFeatures, ToyModel};
use crate::toy::scene::ToyCase;
use crate::volume::IntensityVolume;

/// Smoothing constant added to numerator and denominator of the soft Dice.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub schedule: SgdrConfig,
    /// Epochs whose parameters are kept as checkpoints.
    pub checkpoint_window: SearchWindow,
    /// Seeds the case order and flip augmentation.
    pub seed: u64,
    pub flips: bool,
}

impl TrainConfig {
    pub fn new(schedule: SgdrConfig, seed: u64) -> Self {
        Self {
            schedule,
            checkpoint_window: SearchWindow::Fraction(0.5),
            seed,
            flips: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub trace: TrainingTrace,
    pub checkpoints: CheckpointStore,
    pub final_model: ToyModel,
}

/// Id under which the parameters after `epoch` are stored.
pub fn checkpoint_id(epoch: usize) -> String {
    format!("epoch_{epoch:04}")
}

/// Soft Dice loss averaged over all classes and its gradient with respect
/// to the logits.
///
/// `probs` holds softmax rows `(pixels, class)`; `labels` the target class of
/// each row. Per class, `D = (2 Σ p·g + s) / (Σ p + Σ g + s)` and the loss is
/// `1 - mean(D)`.
pub fn soft_dice_loss(probs: &Array2<f64>, labels: &[u8]) -> (f64, Array2<f64>) {
    let (n, c) = probs.dim();
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    for (row, &l) in probs.axis_iter(Axis(0)).zip(labels) {
        for k in 0..c {
            psum[k] += row[k];
        }
        inter[l as usize] += row[l as usize];
        gsum[l as usize] += 1.0;
    }
    let mut loss = 1.0;
    let mut num = vec![0.0; c];
    let mut den = vec![0.0; c];
    for k in 0..c {
        num[k] = 2.0 * inter[k] + DICE_SMOOTH;
        den[k] = psum[k] + gsum[k] + DICE_SMOOTH;
        loss -= num[k] / den[k] / c as f64;
    }
    let mut grad = Array2::zeros((n, c));
    let mut dp = vec![0.0; c];
    for ((row, &l), mut g) in probs.axis_iter(Axis(0)).zip(labels).zip(grad.axis_iter_mut(Axis(0))) {
        for k in 0..c {
            let target = if l as usize == k { 1.0 } else { 0.0 };
            dp[k] = -(2.0 * target * den[k] - num[k]) / (den[k] * den[k]) / c as f64;
        }
        let mix: f64 = (0..c).map(|k| row[k] * dp[k]).sum();
        for j in 0..c {
            g[j] = row[j] * (dp[j] - mix);
        }
    }
    (loss, grad)
}

/// Mean over foreground classes of the hard Dice between argmax rows and
/// labels; a class absent from both counts as 1.
pub fn mean_foreground_dice(pred: &[u8], labels: &[u8], class_count: usize) -> f64 {
    let mut total = 0.0;
    for k in 1..class_count as u8 {
        let (mut i, mut p, mut g) = (0usize, 0usize, 0usize);
        for (&a, &b) in pred.iter().zip(labels) {
            p += (a == k) as usize;
            g += (b == k) as usize;
            i += (a == k && b == k) as usize;
        }
        total += if p + g == 0 {
            1.0
        } else {
            2.0 * i as f64 / (p + g) as f64
        };
    }
    total / (class_count - 1) as f64
}

struct Sample {
    features: PixelFeatures,
    labels: Vec<u8>,
}

fn flipped(a: &Array3<f64>, vertical: bool, horizontal: bool) -> Array3<f64> {
    let v = if vertical { -1 } else { 1 };
    let h = if horizontal { -1 } else { 1 };
    a.slice(s![.., ..;v, ..;h]).to_owned()
}

fn flipped_u8(a: &Array3<u8>, vertical: bool, horizontal: bool) -> Array3<u8> {
    let v = if vertical { -1 } else { 1 };
    let h = if horizontal { -1 } else { 1 };
    a.slice(s![.., ..;v, ..;h]).to_owned()
}

fn sample(case: &ToyCase, vertical: bool, horizontal: bool) -> Result<Sample> {
    let image = IntensityVolume::new(flipped(case.intensity.values(), vertical, horizontal))?;
    let labels = flipped_u8(case.labels.values(), vertical, horizontal);
    Ok(Sample {
        features: case_features(&image, &case.id)?,
        labels: labels.iter().copied().collect(),
    })
}

/// Plain SGD on the soft Dice loss, one step per training case per epoch,
/// with the learning rate of each epoch taken from the schedule.
pub fn train(
    train_cases: &[ToyCase],
    val_cases: &[ToyCase],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.schedule.validate()?;
    let first = train_cases
        .first()
        .ok_or_else(|| Error::invalid("training needs at least one training case"))?;
    if val_cases.is_empty() {
        return Err(Error::invalid("training needs at least one validation case"));
    }
    let class_count = first.labels.class_count();
    if let Some(c) = train_cases
        .iter()
        .chain(val_cases)
        .find(|c| c.labels.class_count() != class_count)
    {
        return Err(Error::invalid(format!(
            "case `{}` has {} classes, expected {class_count}",
            c.id,
            c.labels.class_count()
        )));
    }

    let variants: &[(bool, bool)] = if cfg.flips {
        &[(false, false), (true, false), (false, true), (true, true)]
    } else {
        &[(false, false)]
    };
    let train_samples: Vec<Vec<Sample>> = train_cases
        .iter()
        .map(|c| variants.iter().map(|&(v, h)| sample(c, v, h)).collect())
        .collect::<Result<_>>()?;
    let val_samples: Vec<Sample> = val_cases
        .iter()
        .map(|c| sample(c, false, false))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ToyModel::zeros(class_count);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut records = Vec::with_capacity(cfg.schedule.total_epochs);
    let mut checkpoints = CheckpointStore::default();

    for epoch in 0..cfg.schedule.total_epochs {
        let lr = lr_at(epoch, &cfg.schedule)?;
        order.shuffle(&mut rng);
        for &i in &order {
            let variant = rng.random_range(0..train_samples[i].len());
            let s = &train_samples[i][variant];
            let probs = model.posterior(&s.features);
            let (loss, grad_logits) = soft_dice_loss(&probs, &s.labels);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} on case `{}`",
                    train_cases[i].id
                )));
            }
            let grad_w = grad_logits.t().dot(&s.features.rows);
            model.weights_mut().scaled_add(-lr, &grad_w);
            if model.weights().iter().any(|w| !w.is_finite()) {
                return Err(Error::Numeric(format!("weights diverged at epoch {epoch}")));
            }
        }

        // Validate and checkpoint at stored precision so on-disk checkpoints
        // reproduce the recorded metric exactly.
        let stored = model.to_stored_precision();
        let mut val_metric = 0.0;
        for s in &val_samples {
            let probs = stored.posterior(&s.features);
            if probs.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite validation posterior at epoch {epoch}"
                )));
            }
            val_metric += mean_foreground_dice(&rows_to_labels(&probs), &s.labels, class_count);
        }
        val_metric /= val_samples.len() as f64;

        let cycle = cycle_of(epoch, &cfg.schedule)?;
        let (lo, hi) = cfg.checkpoint_window.range(&cycle);
        let checkpoint_id = (lo..hi).contains(&epoch).then(|| {
            let id = checkpoint_id(epoch);
            checkpoints.insert(id.clone(), stored);
            id
        });
        records.push(TraceRecord {
            epoch,
            lr,
            val_metric,
            checkpoint_id,
        });
    }

    Ok(TrainOutput {
        trace: TrainingTrace::new(records)?,
        checkpoints,
        final_model: model.to_stored_precision(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::model::softmax_rows;
    use crate::toy::scene::generate_dataset;
    use crate::volume::SliceShape;

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let logits = Array2::from_shape_fn((7, 3), |(i, k)| ((i * 3 + k) as f64 * 0.71).sin());
        let labels = [0u8, 1, 2, 2, 1, 0, 1];
        let loss_of = |z: &Array2<f64>| {
            let mut p = z.clone();
            softmax_rows(&mut p);
            soft_dice_loss(&p, &labels).0
        };
        let mut p = logits.clone();
        softmax_rows(&mut p);
        let (_, grad) = soft_dice_loss(&p, &labels);
        let eps = 1e-6;
        for i in 0..7 {
            for k in 0..3 {
                let mut plus = logits.clone();
                plus[[i, k]] += eps;
                let mut minus = logits.clone();
                minus[[i, k]] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                assert!((fd - grad[[i, k]]).abs() < 1e-8, "({i},{k}): {fd} vs {}", grad[[i, k]]);
            }
        }
    }

    fn small_run(lr_max: f64, lr_min: f64) -> (Vec<ToyCase>, TrainOutput) {
        let cases = generate_dataset(11, 6, SliceShape::new(24, 24).unwrap(), 3).unwrap();
        let schedule = SgdrConfig::new(4, 2.0, lr_max, lr_min, 8).unwrap();
        let out = train(&cases[..4], &cases[4..], &TrainConfig::new(schedule, 1)).unwrap();
        (cases, out)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (_, out) = small_run(0.0, 0.0);
        assert_eq!(out.final_model, ToyModel::zeros(3));
        assert!(out.checkpoints.iter().all(|(_, m)| *m == ToyModel::zeros(3)));
    }

    #[test]
    fn trace_follows_schedule() {
        let (_, out) = small_run(0.5, 1e-3);
        let schedule = SgdrConfig::new(4, 2.0, 0.5, 1e-3, 8).unwrap();
        for r in out.trace.records() {
            assert_eq!(r.lr, lr_at(r.epoch, &schedule).unwrap());
        }
        let ids: Vec<_> = out.checkpoints.ids().collect();
        assert_eq!(ids, vec!["epoch_0002", "epoch_0003", "epoch_0006", "epoch_0007"]);
    }

    #[test]
    fn training_is_reproducible() {
        let (_, a) = small_run(0.5, 1e-3);
        let (_, b) = small_run(0.5, 1e-3);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoints, b.checkpoints);
    }

    #[test]
    fn needs_validation_cases() {
        let cases = generate_dataset(11, 2, SliceShape::new(16, 16).unwrap(), 3).unwrap();
        let schedule = SgdrConfig::new(2, 2.0, 0.1, 0.0, 4).unwrap();
        assert!(train(&cases, &[], &TrainConfig::new(schedule, 0)).is_err());
        assert!(train(&[], &cases, &TrainConfig::new(schedule, 0)).is_err());
    }
}
