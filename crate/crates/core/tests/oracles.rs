mod common;

use common::*;
use ndarray::Array3;
use rand::Rng;

use uqseg::ensemble::{ensemble_mean, EnsembleInput};
use uqseg::metrics::{dice, ece, spearman, Correlation};
use uqseg::morphology::{contour_normalizer, dilate, StructuringElement};
use uqseg::schedule::{lr_at, SgdrConfig};
use uqseg::select::{find_cycle_peaks, SearchWindow, SelectionPolicy, TraceRecord, TrainingTrace};
use uqseg::uncertainty::pixel_entropy;
use uqseg::BinaryImage;

fn random_element(rng: &mut rand_chacha::ChaCha8Rng, depth: usize) -> StructuringElement {
    let side = 2 * rng.random_range(0..3) + 1;
    let mut mask = random_mask(rng, depth, side, side, 0.5);
    mask[[depth / 2, side / 2, side / 2]] = true;
    StructuringElement::new(mask).unwrap()
}

#[test]
fn dilation_matches_gather_oracle() {
    let mut rng = rng(101);
    for i in 0..120 {
        let (d, element) = match i % 4 {
            0 => (1, StructuringElement::square(1)),
            1 => (5, StructuringElement::cube(1)),
            2 => (1, random_element(&mut rng, 1)),
            _ => (4, random_element(&mut rng, 3)),
        };
        let img = random_binary(&mut rng, d, 12, 9);
        let got = dilate(&img, &element);
        assert_eq!(got.values(), &dilate_oracle(img.values(), element.mask()), "case {i}");
        let ring = contour_normalizer(&img, &element);
        assert_eq!(ring.values(), &contour_oracle(img.values(), element.mask()), "case {i}");
    }
}

#[test]
fn asymmetric_element_is_not_mirrored_twice() {
    // A single right-hand neighbor: the set pixel stamps to its right.
    let mut mask = Array3::from_elem((1, 1, 3), false);
    mask[[0, 0, 1]] = true;
    mask[[0, 0, 2]] = true;
    let element = StructuringElement::new(mask).unwrap();
    let mut img = Array3::from_elem((1, 1, 4), false);
    img[[0, 0, 1]] = true;
    let got = dilate(&BinaryImage::new(img.clone()).unwrap(), &element);
    assert_eq!(got.values().iter().copied().collect::<Vec<_>>(), [false, true, true, false]);
    assert_eq!(got.values(), &dilate_oracle(&img, element.mask()));
}

#[test]
fn ece_matches_enumeration() {
    let mut rng = rng(202);
    for i in 0..40 {
        let c = rng.random_range(2..5);
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let p = random_posterior(&mut rng, c, 1, h, w);
        let gt = random_labels(&mut rng, c, 1, h, w);
        let bins = [1, 2, 10, 15, 20][i % 5];
        let got = ece(&p, &gt, bins).unwrap().ece;
        let want = ece_oracle(&p, &gt, bins);
        assert!((got - want).abs() < 1e-9, "case {i}: {got} vs {want}");
    }
}

#[test]
fn ensemble_matches_pixel_mean() {
    let mut rng = rng(303);
    for m in 1..6 {
        let members: Vec<_> = (0..m).map(|_| random_posterior(&mut rng, 3, 2, 7, 5)).collect();
        let fused = ensemble_mean(&EnsembleInput::anonymous(members.clone()).unwrap()).unwrap();
        let want = mean_oracle(&members);
        for (a, b) in fused.values().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn entropy_matches_definition() {
    let mut rng = rng(404);
    let p = random_posterior(&mut rng, 4, 2, 6, 6);
    let h = pixel_entropy(&p);
    for ((z, y, x), &got) in h.values().indexed_iter() {
        let want: f64 = (0..4)
            .map(|k| p.values()[[k, z, y, x]])
            .filter(|&q| q > 0.0)
            .map(|q| -q * q.log2())
            .sum();
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn dice_matches_counting() {
    let mut rng = rng(505);
    for _ in 0..20 {
        let pred = random_labels(&mut rng, 3, 1, 10, 10);
        let gt = random_labels(&mut rng, 3, 1, 10, 10);
        for k in 1..3u8 {
            let pairs: Vec<_> = pred.values().iter().zip(gt.values()).collect();
            let a = pairs.iter().filter(|(p, _)| **p == k).count();
            let b = pairs.iter().filter(|(_, g)| **g == k).count();
            let both = pairs.iter().filter(|(p, g)| **p == k && **g == k).count();
            let want = if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 };
            assert_eq!(dice(&pred, &gt, k as usize).unwrap().dice, want);
        }
    }
}

#[test]
fn spearman_matches_counted_ranks() {
    let mut rng = rng(606);
    for n in 3..30 {
        // coarse values force ties
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
        match (spearman(&x, &y).unwrap(), spearman_oracle(&x, &y)) {
            (Correlation::Value(a), Some(b)) => assert!((a - b).abs() < 1e-12, "n={n}"),
            (Correlation::Undefined, None) => {}
            (got, want) => panic!("n={n}: {got:?} vs {want:?}"),
        }
    }
}

#[test]
fn spearman_without_ties_matches_closed_form() {
    let x = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0];
    let y = [2.0, 7.0, 1.0, 8.0, 2.5, 0.5, 9.0, 3.0];
    let rank = |v: &[f64], i: usize| v.iter().filter(|&&o| o < v[i]).count() as f64;
    let n = x.len() as f64;
    let d2: f64 = (0..x.len()).map(|i| (rank(&x, i) - rank(&y, i)).powi(2)).sum();
    let want = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    let got = spearman(&x, &y).unwrap().value().unwrap();
    assert!((got - want).abs() < 1e-12);
}

/// Restarts at `t0 · 2^i`. Per cycle: window records sorted by (metric,
/// epoch) descending; cycles whose best clears `ratio` of the overall best
/// contribute their first `k`.
fn selection_oracle(
    records: &[TraceRecord],
    cfg: &SgdrConfig,
    window: f64,
    k: usize,
    ratio: f64,
) -> Vec<usize> {
    let mut per_cycle = Vec::new();
    let mut start = 0;
    let mut end = cfg.t0;
    while start < cfg.total_epochs {
        let t = end - start;
        let len = ((window * t as f64).ceil() as usize).clamp(1, t);
        let mut c: Vec<(f64, usize)> = records
            .iter()
            .filter(|r| r.checkpoint_id.is_some() && r.epoch >= end - len && r.epoch < end)
            .map(|r| (r.val_metric, r.epoch))
            .collect();
        c.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if !c.is_empty() {
            per_cycle.push(c);
        }
        start = end;
        end *= 2;
    }
    let best = per_cycle.iter().map(|c| c[0].0).fold(f64::MIN, f64::max);
    per_cycle
        .into_iter()
        .filter(|c| c[0].0 >= ratio * best)
        .flat_map(|c| c.into_iter().take(k).map(|(_, e)| e))
        .collect()
}

#[test]
fn selection_matches_sort_oracle() {
    let mut rng = rng(707);
    for i in 0..50 {
        let t0 = rng.random_range(2..9);
        let cycles = rng.random_range(1..5);
        let total = t0 << (cycles - 1);
        let cfg = SgdrConfig::new(t0, 2.0, 0.1, 1e-4, total).unwrap();
        let records: Vec<TraceRecord> = (0..total)
            .map(|e| TraceRecord {
                epoch: e,
                lr: lr_at(e, &cfg).unwrap(),
                // coarse metrics make ties common
                val_metric: rng.random_range(1..20) as f64 / 20.0,
                checkpoint_id: rng.random_bool(0.8).then(|| format!("e{e}")),
            })
            .collect();
        let trace = TrainingTrace::new(records.clone()).unwrap();
        let policy = SelectionPolicy {
            per_cycle: rng.random_range(1..5),
            window: SearchWindow::Fraction([0.25, 0.5, 1.0][i % 3]),
            min_peak_ratio: [0.5, 0.9, 1.0][i % 3],
        };
        let SearchWindow::Fraction(f) = policy.window else { unreachable!() };
        let want = selection_oracle(&records, &cfg, f, policy.per_cycle, policy.min_peak_ratio);
        match find_cycle_peaks(&trace, &cfg, &policy) {
            Ok(set) => {
                let got: Vec<usize> = set.entries().iter().map(|e| e.epoch).collect();
                assert_eq!(got, want, "case {i}");
            }
            Err(_) => assert!(want.is_empty(), "case {i}"),
        }
    }
}
