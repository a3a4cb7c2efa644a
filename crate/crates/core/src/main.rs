use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use uqseg::ensemble::argmax_labels;
use uqseg::format::{read_array, write_array, ArrayData, FORMAT_VERSION};
use uqseg::metrics::{dice, ece_scoped, table_from_rows, CalibrationScope};
use uqseg::morphology::StructuringElement;
use uqseg::numfmt::sig9;
use uqseg::pipeline::{fuse_members, run_pipeline, write_pgm_slices, PipelineConfig};
use uqseg::report::{
    read_cases, write_dice, write_reliability, write_scores, FractionThresholds, Summary,
};
use uqseg::schedule::{cycle_of, lr_at, RestartConvention, SgdrConfig};
use uqseg::select::{
    export_selection, find_cycle_peaks, read_selection, SearchWindow, SelectionPolicy,
    TrainingTrace,
};
use uqseg::toy::{generate_with, write_cases, DatasetConfig, ToyExperiment};
use uqseg::uncertainty::{pixel_entropy, score_with_entropy, EntropyRegion, ScoreOptions};
use uqseg::{Error, LabelVolume, ProbabilityVolume, Result, SliceShape};

#[derive(Parser)]
#[command(name = "uqseg", version, about = "Checkpoint-ensemble uncertainty for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learning rate per epoch as CSV `epoch,cycle,lr`.
    LrSchedule {
        #[arg(long, default_value_t = 100)]
        t0: usize,
        #[arg(long, default_value_t = 2.0)]
        eta: f64,
        #[arg(long, default_value_t = 0.1)]
        lr_max: f64,
        #[arg(long, default_value_t = 1e-4)]
        lr_min: f64,
        #[arg(long, default_value_t = 800)]
        epochs: usize,
        #[arg(long, default_value_t = RestartConvention::Geometric)]
        convention: RestartConvention,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Picks checkpoints at per-cycle validation peaks and writes a manifest.
    SelectCheckpoints {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 100)]
        t0: usize,
        #[arg(long, default_value_t = 2.0)]
        eta: f64,
        /// Run length; defaults to one past the last trace epoch.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 3)]
        per_cycle: usize,
        #[arg(long, default_value_t = 0.9)]
        min_peak_ratio: f64,
        /// `fraction:F` of each cycle or the last `epochs:N`.
        #[arg(long, default_value_t = SearchWindow::Fraction(0.5))]
        window: SearchWindow,
        #[arg(long, default_value_t = RestartConvention::Geometric)]
        convention: RestartConvention,
        #[arg(long)]
        out: PathBuf,
    },
    /// Averages the member posteriors named in a manifest.
    Fuse {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<checkpoint_id>.uqsg` files.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-pixel entropy (bits) of a posterior.
    Entropy {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write 8-bit PGM slices into this directory.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Contour-normalized uncertainty score per class.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated classes; all foreground classes when absent.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long, default_value_t = EntropyRegion::WholeImage)]
        region: EntropyRegion,
        #[arg(long, default_value_t = StructuringElement::square(1))]
        element: StructuringElement,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class Dice of a label map (or the argmax of a posterior).
    Dice {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expected calibration error; prints the percentage and writes the
    /// reliability table.
    Ece {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 15)]
        bins: usize,
        #[arg(long, default_value_t = CalibrationScope::AllPixels)]
        scope: CalibrationScope,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary table from a `cases.csv`.
    Report {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        score_max: f64,
        #[arg(long, default_value_t = 0.8)]
        dice_min: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a synthetic dataset.
    ToyGen {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        cases: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        contrast: f64,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Trains the toy model and writes trace, checkpoints, predictions and
    /// a pipeline config.
    ToyTrain {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Training cases.
        #[arg(long, default_value_t = 16)]
        cases: usize,
        #[arg(long, default_value_t = 4)]
        val_cases: usize,
        #[arg(long, default_value_t = 4)]
        test_cases: usize,
        /// Low-contrast test cases added to the evaluation set.
        #[arg(long, default_value_t = 4)]
        degraded_cases: usize,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 20)]
        t0: usize,
        #[arg(long, default_value_t = 2.0)]
        eta: f64,
        #[arg(long, default_value_t = 5.0)]
        lr_max: f64,
        #[arg(long, default_value_t = 1e-4)]
        lr_min: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Runs every stage from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Version, array format version and default parameters.
    Info {
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::LrSchedule {
            t0,
            eta,
            lr_max,
            lr_min,
            epochs,
            convention,
            out,
        } => {
            let cfg = SgdrConfig::new(t0, eta, lr_max, lr_min, epochs)?.with_convention(convention);
            with_output(out.as_deref(), |w| {
                let mut csv = csv::Writer::from_writer(w);
                csv.write_record(["epoch", "cycle", "lr"])?;
                for epoch in 0..epochs {
                    let cycle = cycle_of(epoch, &cfg)?.cycle;
                    let lr = lr_at(epoch, &cfg)?;
                    csv.write_record([epoch.to_string(), cycle.to_string(), sig9(lr)])?;
                }
                csv.flush()?;
                Ok(())
            })
        }
        Command::SelectCheckpoints {
            trace,
            t0,
            eta,
            epochs,
            per_cycle,
            min_peak_ratio,
            window,
            convention,
            out,
        } => {
            let trace = TrainingTrace::load(&trace)?;
            let epochs = match epochs {
                Some(n) => n,
                None => {
                    trace
                        .records()
                        .last()
                        .ok_or_else(|| Error::Invalid("training trace is empty".into()))?
                        .epoch
                        + 1
                }
            };
            let defaults = SgdrConfig::default();
            let cfg = SgdrConfig::new(t0, eta, defaults.lr_max, defaults.lr_min, epochs)?
                .with_convention(convention);
            let policy = SelectionPolicy {
                per_cycle,
                window,
                min_peak_ratio,
            };
            let set = find_cycle_peaks(&trace, &cfg, &policy)?;
            export_selection(&set, &out)?;
            eprintln!(
                "selected {} checkpoints from cycles {:?}",
                set.len(),
                set.cycles()
            );
            Ok(())
        }
        Command::Fuse {
            manifest,
            inputs,
            out,
        } => {
            let set = read_selection(&manifest)?;
            let ids: Vec<String> = set.ids().map(String::from).collect();
            let fused = fuse_members(&inputs, &ids)?;
            write_array(&out, &fused.to_array_data())
        }
        Command::Entropy { input, out, png } => {
            let p = read_posterior(&input)?;
            let h = pixel_entropy(&p);
            write_array(&out, &h.to_array_data())?;
            if let Some(dir) = png {
                fs::create_dir_all(&dir).map_err(Error::at(&dir))?;
                let stem = out
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("entropy");
                write_pgm_slices(&h, &dir, stem)?;
            }
            Ok(())
        }
        Command::Score {
            input,
            classes,
            region,
            element,
            threshold,
            out,
        } => {
            let p = read_posterior(&input)?;
            let h = pixel_entropy(&p);
            let opts = ScoreOptions {
                element,
                region,
                threshold,
            };
            let classes = or_foreground(classes, p.class_count());
            let scores = classes
                .iter()
                .map(|&k| score_with_entropy(&p, &h, k, &opts))
                .collect::<Result<Vec<_>>>()?;
            with_output(out.as_deref(), |w| write_scores(&scores, w))
        }
        Command::Dice {
            pred,
            gt,
            classes,
            out,
        } => {
            let pred = read_prediction_labels(&pred)?;
            let gt = read_labels(&gt, None)?;
            let c = pred.class_count().max(gt.class_count());
            let pred = LabelVolume::new(pred.values().clone(), c)?;
            let gt = LabelVolume::new(gt.values().clone(), c)?;
            let results = or_foreground(classes, c)
                .iter()
                .map(|&k| dice(&pred, &gt, k))
                .collect::<Result<Vec<_>>>()?;
            with_output(out.as_deref(), |w| write_dice(&results, w))
        }
        Command::Ece {
            pred,
            gt,
            bins,
            scope,
            out,
        } => {
            let p = read_posterior(&pred)?;
            let gt = read_labels(&gt, Some(p.class_count()))?;
            let report = ece_scoped(&p, &gt, bins, scope)?;
            if let Some(path) = &out {
                with_output(Some(path), |w| write_reliability(&report, w))?;
            }
            println!("ece_percent,{}", sig9(report.ece));
            Ok(())
        }
        Command::Report {
            cases,
            score_max,
            dice_min,
            out,
        } => {
            let rows = read_cases(File::open(&cases).map_err(Error::at(&cases))?)?;
            let table = table_from_rows(rows)?;
            let mut summary = Summary::default();
            summary.extend_with_table(
                &table,
                FractionThresholds {
                    score_max,
                    dice_min,
                },
            );
            with_output(out.as_deref(), |w| summary.write(w))
        }
        Command::ToyGen {
            seed,
            cases,
            size,
            classes,
            noise,
            contrast,
            outdir,
        } => {
            let cfg = DatasetConfig {
                contrast,
                ..DatasetConfig::new(SliceShape::new(size, size)?, classes).with_noise(noise)
            };
            let generated = generate_with(seed, cases, &cfg, "case")?;
            write_cases(&generated, &outdir)?;
            let scenes: Vec<_> = generated.iter().map(|c| (&c.id, &c.scene)).collect();
            let path = outdir.join("scenes.json");
            let text = serde_json::to_string_pretty(&scenes)
                .map_err(|e| Error::Invalid(e.to_string()))?;
            fs::write(&path, text + "\n").map_err(Error::at(&path))
        }
        Command::ToyTrain {
            seed,
            cases,
            val_cases,
            test_cases,
            degraded_cases,
            epochs,
            t0,
            eta,
            lr_max,
            lr_min,
            size,
            classes,
            noise,
            outdir,
        } => {
            let exp = ToyExperiment {
                seed,
                train_cases: cases,
                val_cases,
                test_cases,
                degraded_cases,
                dataset: DatasetConfig::new(SliceShape::new(size, size)?, classes).with_noise(noise),
                schedule: SgdrConfig::new(t0, eta, lr_max, lr_min, epochs)?,
                ..ToyExperiment::default()
            };
            let run = exp.run()?;
            exp.write(&run, &outdir)?;
            let last = run.output.trace.records().last().expect("non-empty trace");
            eprintln!(
                "trained {epochs} epochs, final validation Dice {}, {} checkpoints stored in {}",
                sig9(last.val_metric),
                run.output.checkpoints.len(),
                outdir.display()
            );
            Ok(())
        }
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let output = run_pipeline(&cfg)?;
            output.summary.write(io::stdout().lock())
        }
        Command::Info { json } => {
            let info = Info::current();
            if json {
                let text =
                    serde_json::to_string_pretty(&info).map_err(|e| Error::Invalid(e.to_string()))?;
                println!("{text}");
            } else {
                info.print_text();
            }
            Ok(())
        }
    }
}

/// Runs `f` on the output file, or on stdout when no path is given.
fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut file = File::create(p).map_err(Error::at(p))?;
            f(&mut file)
        }
        None => f(&mut io::stdout().lock()),
    }
}

fn or_foreground(classes: Vec<usize>, class_count: usize) -> Vec<usize> {
    if classes.is_empty() {
        (1..class_count).collect()
    } else {
        classes
    }
}

fn read_posterior(path: &Path) -> Result<ProbabilityVolume> {
    ProbabilityVolume::from_array_data(read_array(path)?).map_err(|e| in_file(path, e))
}

fn read_labels(path: &Path, class_count: Option<usize>) -> Result<LabelVolume> {
    LabelVolume::from_array_data(read_array(path)?, class_count).map_err(|e| in_file(path, e))
}

/// Labels, or the argmax of a float32 posterior.
fn read_prediction_labels(path: &Path) -> Result<LabelVolume> {
    match read_array(path)? {
        data @ ArrayData::F32(_) => ProbabilityVolume::from_array_data(data)
            .map(|p| argmax_labels(&p))
            .map_err(|e| in_file(path, e)),
        data => LabelVolume::from_array_data(data, None).map_err(|e| in_file(path, e)),
    }
}

/// Names the file in a content error while keeping its exit code.
fn in_file(path: &Path, e: Error) -> Error {
    let msg = format!("{}: {e}", path.display());
    match e {
        Error::Numeric(_) => Error::Numeric(msg),
        Error::Shape(_) => Error::Shape(msg),
        Error::Format(_) => Error::Format(msg),
        _ => Error::Invalid(msg),
    }
}

#[derive(Serialize)]
struct Info {
    version: &'static str,
    array_format_version: u16,
    schedule: SgdrConfig,
    selection: SelectionPolicy,
    ece_bins: usize,
    calibration_scope: String,
    entropy_region: String,
    structuring_element: String,
    foreground_threshold: f64,
    fraction_score_max: f64,
    fraction_dice_min: f64,
}

impl Info {
    fn current() -> Self {
        let score = ScoreOptions::default();
        let fraction = FractionThresholds::default();
        Self {
            version: env!("CARGO_PKG_VERSION"),
            array_format_version: FORMAT_VERSION,
            schedule: SgdrConfig::default(),
            selection: SelectionPolicy::default(),
            ece_bins: 15,
            calibration_scope: CalibrationScope::default().to_string(),
            entropy_region: score.region.to_string(),
            structuring_element: score.element.to_string(),
            foreground_threshold: score.threshold,
            fraction_score_max: fraction.score_max,
            fraction_dice_min: fraction.dice_min,
        }
    }

    fn print_text(&self) {
        let s = &self.schedule;
        let p = &self.selection;
        println!("uqseg {}", self.version);
        println!("array format version {}", self.array_format_version);
        println!("defaults:");
        println!("  t0 = {}", s.t0);
        println!("  eta = {}", s.eta);
        println!("  lr_max = {}", s.lr_max);
        println!("  lr_min = {}", s.lr_min);
        println!("  epochs = {}", s.total_epochs);
        println!("  convention = {}", s.convention);
        println!("  per_cycle = {}", p.per_cycle);
        println!("  min_peak_ratio = {}", p.min_peak_ratio);
        println!("  window = {}", p.window);
        println!("  bins = {}", self.ece_bins);
        println!("  calibration = {}", self.calibration_scope);
        println!("  region = {}", self.entropy_region);
        println!("  element = {}", self.structuring_element);
        println!("  threshold = {}", self.foreground_threshold);
        println!("  score_max = {}", self.fraction_score_max);
        println!("  dice_min = {}", self.fraction_dice_min);
    }
}
