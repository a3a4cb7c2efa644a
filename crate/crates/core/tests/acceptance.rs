//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if
//! any fails. Run with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array4;
use rand::Rng;

use uqseg::ensemble::{argmax_labels, ensemble_mean, EnsembleInput};
use uqseg::metrics::{dice, ece, Correlation};
use uqseg::morphology::{contour_normalizer, dilate, StructuringElement};
use uqseg::pipeline::{run_pipeline, PipelineConfig};
use uqseg::schedule::{cycle_of, lr_at, restart_epochs, SgdrConfig};
use uqseg::select::{find_cycle_peaks, SelectionPolicy, TraceRecord, TrainingTrace};
use uqseg::toy::{predict, ToyExperiment};
use uqseg::uncertainty::{pixel_entropy, uncertainty_score, ScoreOptions};
use uqseg::{Axial, LabelVolume, ProbabilityVolume};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn entropy_units() -> Check {
    for c in [2usize, 3, 4] {
        let p = ProbabilityVolume::new(Array4::from_elem((c, 1, 2, 2), 1.0 / c as f64)).map_err(err)?;
        let want = (c as f64).log2();
        for &h in pixel_entropy(&p).values() {
            ensure((h - want).abs() <= 1e-12, format!("uniform c={c}: {h} vs {want}"))?;
        }
        let mut one_hot = Array4::zeros((c, 1, 1, c));
        for k in 0..c {
            one_hot[[k, 0, 0, k]] = 1.0;
        }
        let h = pixel_entropy(&ProbabilityVolume::new(one_hot).map_err(err)?);
        ensure(h.values().iter().all(|&v| v.abs() <= 1e-12), format!("one-hot c={c} not 0"))?;
    }
    let half = Array4::from_shape_vec((4, 1, 1, 1), vec![0.5, 0.5, 0.0, 0.0]).unwrap();
    let h = pixel_entropy(&ProbabilityVolume::new(half).map_err(err)?).values()[[0, 0, 0]];
    ensure((h - 1.0).abs() <= 1e-12, format!("[0.5,0.5,0,0] gave {h}"))?;
    Ok("uniform = log2 c, one-hot = 0, half/half = 1".into())
}

fn morphology_oracle() -> Check {
    let mut rng = common::rng(2);
    let square = StructuringElement::square(1);
    for i in 0..200 {
        let img = common::random_binary(&mut rng, 1, 16, 16);
        ensure(
            dilate(&img, &square).values() == common::dilate_oracle(img.values(), square.mask()),
            format!("2D dilation {i}"),
        )?;
        ensure(
            contour_normalizer(&img, &square).values()
                == common::contour_oracle(img.values(), square.mask()),
            format!("2D contour {i}"),
        )?;
    }
    for i in 0..50 {
        let img = common::random_binary(&mut rng, 8, 8, 8);
        for element in [StructuringElement::cube(1), StructuringElement::square(1)] {
            ensure(
                dilate(&img, &element).values() == common::dilate_oracle(img.values(), element.mask()),
                format!("3D dilation {i} with {element}"),
            )?;
            ensure(
                contour_normalizer(&img, &element).values()
                    == common::contour_oracle(img.values(), element.mask()),
                format!("3D contour {i} with {element}"),
            )?;
        }
    }
    Ok("200 images 16x16, 50 volumes 8x8x8, exact".into())
}

fn scheduler_fidelity() -> Check {
    let cfg = SgdrConfig::new(100, 2.0, 0.1, 1e-4, 800).map_err(err)?;
    let restarts = restart_epochs(&cfg);
    ensure(restarts == [100, 200, 400, 800], format!("restarts {restarts:?}"))?;
    let mut start = 0;
    for end in restarts {
        let lr = lr_at(start, &cfg).map_err(err)?;
        ensure(lr == 0.1, format!("lr at cycle start {start} is {lr}"))?;
        let mid = start + (end - start) / 2;
        let lr = lr_at(mid, &cfg).map_err(err)?;
        ensure((lr - 0.05005).abs() <= 1e-12, format!("lr at midpoint {mid} is {lr}"))?;
        ensure(cycle_of(mid, &cfg).map_err(err)?.cycle_start == start, "cycle lookup")?;
        start = end;
    }
    Ok("restarts [100, 200, 400, 800], starts 0.1, midpoints 0.05005".into())
}

fn ece_oracle() -> Check {
    let mut rng = common::rng(4);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let c = rng.random_range(2..6);
        let (h, w) = (rng.random_range(1..33), rng.random_range(1..33));
        let p = common::random_posterior(&mut rng, c, 1, h, w);
        let gt = common::random_labels(&mut rng, c, 1, h, w);
        let bins = rng.random_range(1..21);
        let got = ece(&p, &gt, bins).map_err(err)?.ece;
        let want = common::ece_oracle(&p, &gt, bins);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-9, format!("fixture {i}: {got} vs {want}"))?;
    }

    // Calibrated: in each bin the accuracy equals the mean confidence.
    // Bin (0.7, 0.8]: 4 pixels at 0.75, 3 right. Bin (0.5, 0.6]: 5 at 0.6,
    // 3 right. Bin (0.9, 1.0]: 2 at 1.0, both right.
    let pixels: Vec<(f64, bool)> = [(0.75, 4, 3), (0.6, 5, 3), (1.0, 2, 2)]
        .iter()
        .flat_map(|&(conf, n, right)| (0..n).map(move |i| (conf, i < right)))
        .collect();
    let (p, gt) = two_class_fixture(&pixels)?;
    let calibrated = ece(&p, &gt, 10).map_err(err)?.ece;
    ensure(calibrated < 1e-12, format!("calibrated fixture gave {calibrated}"))?;

    // One bin, confidence 0.9, accuracy 0.7.
    let pixels: Vec<(f64, bool)> = (0..10).map(|i| (0.9, i < 7)).collect();
    let (p, gt) = two_class_fixture(&pixels)?;
    let single = ece(&p, &gt, 1).map_err(err)?.ece;
    ensure(single == 20.0, format!("single-bin fixture gave {single}"))?;
    Ok(format!("100 fixtures, max deviation {worst:.1e}; calibrated {calibrated:.1e}; single bin {single}"))
}

/// Two-class posterior whose argmax is class 1 with the given confidence;
/// the label is 1 when `right`, else 0.
fn two_class_fixture(pixels: &[(f64, bool)]) -> Result<(ProbabilityVolume, LabelVolume), String> {
    let n = pixels.len();
    let mut p = Array4::zeros((2, 1, 1, n));
    let mut labels = ndarray::Array3::zeros((1, 1, n));
    for (i, &(conf, right)) in pixels.iter().enumerate() {
        p[[1, 0, 0, i]] = conf;
        p[[0, 0, 0, i]] = 1.0 - conf;
        labels[[0, 0, i]] = right as u8;
    }
    Ok((
        ProbabilityVolume::new(p).map_err(err)?,
        LabelVolume::new(labels, 2).map_err(err)?,
    ))
}

fn checkpoint_selection() -> Check {
    let cfg = SgdrConfig::new(10, 2.0, 0.1, 1e-4, 80).map_err(err)?;
    let maxima = [0.80, 0.60, 0.83, 0.85];
    let mut rng = common::rng(5);
    let mut records = Vec::new();
    for e in 0..80 {
        let c = cycle_of(e, &cfg).map_err(err)?;
        // rising toward the cycle peak with a little jitter below it
        let frac = (e - c.cycle_start + 1) as f64 / c.t_i as f64;
        let metric = if e + 1 == c.cycle_end {
            maxima[c.cycle]
        } else {
            maxima[c.cycle] * frac * rng.random_range(0.9..0.999)
        };
        records.push(TraceRecord {
            epoch: e,
            lr: lr_at(e, &cfg).map_err(err)?,
            val_metric: metric,
            checkpoint_id: Some(format!("epoch_{e:04}")),
        });
    }
    let trace = TrainingTrace::new(records.clone()).map_err(err)?;
    let policy = SelectionPolicy::default();
    let set = find_cycle_peaks(&trace, &cfg, &policy).map_err(err)?;
    ensure(set.cycles() == [0, 2, 3], format!("cycles {:?}", set.cycles()))?;

    // sort oracle: per selected cycle, the window's epochs by metric
    let mut want = Vec::new();
    for c in [0usize, 2, 3] {
        let cycle = cfg.cycles().nth(c).unwrap();
        let lo = cycle.cycle_end - cycle.t_i / 2;
        let mut window: Vec<&TraceRecord> =
            records[lo..cycle.cycle_end].iter().collect();
        window.sort_by(|a, b| b.val_metric.partial_cmp(&a.val_metric).unwrap());
        want.extend(window.iter().take(3).map(|r| r.epoch));
    }
    let got: Vec<usize> = set.entries().iter().map(|e| e.epoch).collect();
    ensure(got == want, format!("epochs {got:?}, oracle {want:?}"))?;
    Ok(format!("cycles {{0,2,3}} selected, cycle 1 skipped, epochs {got:?}"))
}

fn normalization_property() -> Check {
    let mut rng = common::rng(6);
    let opts = ScoreOptions::default();
    for trial in 0..5 {
        let slice = common::random_posterior(&mut rng, 3, 1, 16, 16);
        for k in [2usize, 4, 8] {
            let volume = ProbabilityVolume::stack_slices(&vec![slice.clone(); k]).map_err(err)?;
            for class in 1..3 {
                let one = uncertainty_score(&slice, class, &opts).map_err(err)?;
                let many = uncertainty_score(&volume, class, &opts).map_err(err)?;
                let kf = k as f64;
                ensure(
                    (many.h_total - kf * one.h_total).abs() <= 1e-9 * many.h_total.max(1.0),
                    format!("trial {trial} k={k}: h_total {} vs {}", many.h_total, kf * one.h_total),
                )?;
                ensure(
                    many.contour_pixels == k * one.contour_pixels,
                    format!("trial {trial} k={k}: contour {} vs {}", many.contour_pixels, k * one.contour_pixels),
                )?;
                ensure(
                    (many.score - one.score).abs() <= 1e-9,
                    format!("trial {trial} k={k}: score {} vs {}", many.score, one.score),
                )?;
            }
        }
    }
    Ok("k in {2, 4, 8}: h_total and contour scale by k, score unchanged".into())
}

fn read_tree(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                files.insert(rel, fs::read(&path).map_err(err)?);
            }
        }
    }
    Ok(files)
}

/// Outcome of the seeded toy run, shared by criteria 7 and 8.
struct ToyOutcome {
    elapsed: Duration,
    band_ratio: f64,
    ensemble_dice: f64,
    best_single_dice: f64,
    best_single_id: String,
    identical: bool,
    spearman: Correlation,
    scored_rows: usize,
}

fn mean_fg_dice(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64, String> {
    let c = gt.class_count();
    let mut total = 0.0;
    for k in 1..c {
        total += dice(pred, gt, k).map_err(err)?.dice;
    }
    Ok(total / (c - 1) as f64)
}

fn toy_run() -> Result<ToyOutcome, String> {
    let start = Instant::now();
    let exp = ToyExperiment::default();
    let run = exp.run().map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path().join("toy");
    exp.write(&run, &root).map_err(err)?;
    let mut cfg = PipelineConfig::load(root.join("pipeline.cfg")).map_err(err)?;
    let first = run_pipeline(&cfg).map_err(err)?;
    let first_tree = read_tree(&cfg.out)?;
    cfg.out = root.join("report_again");
    run_pipeline(&cfg).map_err(err)?;
    let identical = read_tree(&cfg.out)? == first_tree;
    let elapsed = start.elapsed();

    let ids: Vec<String> = first.checkpoints.ids().map(String::from).collect();
    let (mut band, mut band_n, mut interior, mut interior_n) = (0.0, 0usize, 0.0, 0usize);
    let mut ensemble_dice = 0.0;
    let mut single = vec![0.0; ids.len()];
    for case in &run.test {
        let members = ids
            .iter()
            .map(|id| run.output.checkpoints.predict(id, case))
            .collect::<uqseg::Result<Vec<_>>>()
            .map_err(err)?;
        let fused = ensemble_mean(&EnsembleInput::new(members.clone(), ids.clone()).map_err(err)?)
            .map_err(err)?;
        ensemble_dice += mean_fg_dice(&argmax_labels(&fused), &case.labels)?;
        for (s, m) in single.iter_mut().zip(&members) {
            *s += mean_fg_dice(&argmax_labels(m), &case.labels)?;
        }

        // boundary band: ground-truth pixels with a differently labelled
        // 8-neighbor; interior: everything else
        let h = pixel_entropy(&fused);
        let labels = case.labels.values();
        let (_, rows, cols) = labels.dim();
        for ((z, y, x), &hv) in h.values().indexed_iter() {
            let l = labels[[z, y, x]];
            let mut edge = false;
            for ny in y.saturating_sub(1)..(y + 2).min(rows) {
                for nx in x.saturating_sub(1)..(x + 2).min(cols) {
                    edge |= labels[[z, ny, nx]] != l;
                }
            }
            if edge {
                band += hv;
                band_n += 1;
            } else {
                interior += hv;
                interior_n += 1;
            }
        }
    }
    let n = run.test.len() as f64;
    let (best_idx, best) = single
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, s)| (i, s / n))
        .ok_or("no checkpoints selected")?;

    // sanity: predictions written to disk come from the same checkpoints
    let probe = predict(run.output.checkpoints.get(&ids[0]).map_err(err)?, &run.test[0]).map_err(err)?;
    let on_disk = uqseg::format::read_array(
        root.join("predictions").join(&run.test[0].id).join(format!("{}.uqsg", ids[0])),
    )
    .map_err(err)?;
    ensure(
        ProbabilityVolume::from_array_data(on_disk).map_err(err)?.to_array_data() == probe.to_array_data(),
        "written predictions differ from in-memory ones",
    )?;

    Ok(ToyOutcome {
        elapsed,
        band_ratio: (band / band_n as f64) / (interior / interior_n as f64),
        ensemble_dice: ensemble_dice / n,
        best_single_dice: best,
        best_single_id: ids[best_idx].clone(),
        identical,
        spearman: first.table.spearman,
        scored_rows: first.table.scored_rows().count(),
    })
}

fn end_to_end(toy: &Result<ToyOutcome, String>) -> Check {
    let t = toy.as_ref().map_err(Clone::clone)?;
    ensure(t.elapsed < Duration::from_secs(60), format!("took {:?}", t.elapsed))?;
    ensure(t.band_ratio >= 2.0, format!("band/interior entropy ratio {:.3}", t.band_ratio))?;
    ensure(
        t.ensemble_dice >= t.best_single_dice - 0.02,
        format!("ensemble Dice {:.4} vs best single {:.4}", t.ensemble_dice, t.best_single_dice),
    )?;
    ensure(t.identical, "pipeline outputs differ between runs")?;
    Ok(format!(
        "{:.2?}; band/interior entropy {:.1}x; ensemble Dice {:.4} vs best single {:.4} ({}); reruns byte-identical",
        t.elapsed, t.band_ratio, t.ensemble_dice, t.best_single_dice, t.best_single_id
    ))
}

fn uncertainty_dice_direction(toy: &Result<ToyOutcome, String>) -> Check {
    let t = toy.as_ref().map_err(Clone::clone)?;
    match t.spearman {
        Correlation::Value(rho) if rho < 0.0 => Ok(format!(
            "Spearman {rho:.3} over {} scored case/class rows (test + degraded)",
            t.scored_rows
        )),
        other => Err(format!("Spearman {other:?}")),
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let outcome = f();
        let t = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {n} {name} ({t:.2?}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name} ({t:.2?}): {detail}");
            }
        }
    };
    report(1, "entropy-units", &mut entropy_units);
    report(2, "morphology-oracle", &mut morphology_oracle);
    report(3, "scheduler-fidelity", &mut scheduler_fidelity);
    report(4, "ece-oracle", &mut ece_oracle);
    report(5, "checkpoint-selection", &mut checkpoint_selection);
    report(6, "normalization-property", &mut normalization_property);
    let toy = toy_run();
    report(7, "toy-end-to-end", &mut || end_to_end(&toy));
    report(8, "uncertainty-dice-direction", &mut || uncertainty_dice_direction(&toy));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
