//! File-based orchestration of the full pipeline.
//!
//! Inputs are laid out as
//!
//! ```text
//! <predictions>/<case>/<checkpoint_id>.uqsg   member posteriors, float32 (c, [d,] h, w)
//! <ground_truth>/<case>.uqsg                   labels, uint8 or int32
//! ```
//!
//! and a run writes `manifest.csv`, `fused/`, `entropy/`, `cases.csv`,
//! `reliability.csv` and `summary.csv` under the output directory. Outputs
//! are assembled in a staging directory next to it and only moved into
//! place once every stage has succeeded.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ensemble::{argmax_labels, ensemble_mean, EnsembleInput};
use crate::error::{Error, Result};
use crate::format::{read_array, write_array};
use crate::metrics::{dice, table_from_rows, CalibrationScope, EceAccumulator, UncertaintyDiceTable};
use crate::numfmt::sig9;
use crate::report::{write_cases, write_reliability, CaseScore, FractionThresholds, Summary};
use crate::schedule::SgdrConfig;
use crate::select::{
    export_selection, find_cycle_peaks, read_selection, CheckpointSet, SelectionPolicy, TrainingTrace,
};
use crate::uncertainty::{pixel_entropy, score_with_entropy, EntropyMap, ScoreOptions};
use crate::volume::{LabelVolume, ProbabilityVolume};

pub const STAGE_CONFIG: &str = "config";
pub const STAGE_SELECT: &str = "select-checkpoints";
pub const STAGE_FUSE: &str = "fuse";
pub const STAGE_ENTROPY: &str = "entropy";
pub const STAGE_SCORE: &str = "score";
pub const STAGE_METRICS: &str = "dice/ece";
pub const STAGE_REPORT: &str = "report";

fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    })
}

/// Where the checkpoint set comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionSource {
    /// Select from a training trace with the configured schedule and policy.
    Trace(PathBuf),
    /// Use a manifest written by an earlier selection.
    Manifest(PathBuf),
}

/// Everything a run needs. Serialized as flat `key = value` lines; see
/// [`PipelineConfig::parse`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub selection: SelectionSource,
    pub predictions: PathBuf,
    pub ground_truth: PathBuf,
    pub out: PathBuf,
    pub schedule: SgdrConfig,
    pub policy: SelectionPolicy,
    /// Class count; inferred from the member posteriors when absent.
    pub classes: Option<usize>,
    pub bins: usize,
    pub calibration: CalibrationScope,
    pub score: ScoreOptions,
    pub fraction: FractionThresholds,
}

const KEYS: &[&str] = &[
    "trace",
    "manifest",
    "predictions",
    "ground_truth",
    "out",
    "t0",
    "eta",
    "lr_max",
    "lr_min",
    "epochs",
    "convention",
    "per_cycle",
    "min_peak_ratio",
    "window",
    "classes",
    "bins",
    "calibration",
    "region",
    "threshold",
    "element",
    "score_max",
    "dice_min",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("config key `{key}`: cannot parse `{value}`")))
}

impl PipelineConfig {
    /// Config with default parameters for the given locations.
    pub fn new(
        selection: SelectionSource,
        predictions: impl Into<PathBuf>,
        ground_truth: impl Into<PathBuf>,
        out: impl Into<PathBuf>,
        schedule: SgdrConfig,
    ) -> Self {
        Self {
            selection,
            predictions: predictions.into(),
            ground_truth: ground_truth.into(),
            out: out.into(),
            schedule,
            policy: SelectionPolicy::default(),
            classes: None,
            bins: 15,
            calibration: CalibrationScope::AllPixels,
            score: ScoreOptions::default(),
            fraction: FractionThresholds::default(),
        }
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped,
    /// unknown or repeated keys are errors, and relative paths are resolved
    /// against `base`. Required keys: `predictions`, `ground_truth`, `out`
    /// and exactly one of `trace` or `manifest`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut seen: Vec<(&str, &str)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key = value", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::invalid(format!(
                    "config line {}: unknown key `{key}`",
                    n + 1
                )));
            }
            if seen.iter().any(|(k, _)| *k == key) {
                return Err(Error::invalid(format!(
                    "config line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
            seen.push((key, value));
        }
        let get = |key: &str| seen.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let path = |key: &str| -> Result<Option<PathBuf>> {
            match get(key) {
                None => Ok(None),
                Some("") => Err(Error::invalid(format!("config key `{key}` is empty"))),
                Some(v) => Ok(Some(base.join(v))),
            }
        };
        let required = |key: &str| -> Result<PathBuf> {
            path(key)?.ok_or_else(|| Error::invalid(format!("config key `{key}` is required")))
        };

        let selection = match (path("trace")?, path("manifest")?) {
            (Some(t), None) => SelectionSource::Trace(t),
            (None, Some(m)) => SelectionSource::Manifest(m),
            _ => {
                return Err(Error::invalid(
                    "config needs exactly one of `trace` or `manifest`",
                ))
            }
        };
        let mut cfg = Self::new(
            selection,
            required("predictions")?,
            required("ground_truth")?,
            required("out")?,
            SgdrConfig::default(),
        );

        let s = &mut cfg.schedule;
        macro_rules! set {
            ($key:literal, $target:expr) => {
                if let Some(v) = get($key) {
                    $target = parse_value($key, v)?;
                }
            };
        }
        set!("t0", s.t0);
        set!("eta", s.eta);
        set!("lr_max", s.lr_max);
        set!("lr_min", s.lr_min);
        set!("epochs", s.total_epochs);
        set!("convention", s.convention);
        set!("per_cycle", cfg.policy.per_cycle);
        set!("min_peak_ratio", cfg.policy.min_peak_ratio);
        set!("window", cfg.policy.window);
        set!("bins", cfg.bins);
        set!("calibration", cfg.calibration);
        set!("region", cfg.score.region);
        set!("threshold", cfg.score.threshold);
        set!("element", cfg.score.element);
        set!("score_max", cfg.fraction.score_max);
        set!("dice_min", cfg.fraction.dice_min);
        if let Some(v) = get("classes") {
            cfg.classes = Some(parse_value("classes", v)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file; relative paths resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::at(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Checks every parameter; no file is touched.
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.policy.validate()?;
        if self.bins == 0 {
            return Err(Error::invalid("bins must be >= 1"));
        }
        if let Some(c) = self.classes {
            if !(2..=255).contains(&c) {
                return Err(Error::invalid(format!("classes {c} outside [2, 255]")));
            }
        }
        if !(self.score.threshold > 0.0 && self.score.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "threshold {} must lie in (0, 1)",
                self.score.threshold
            )));
        }
        if !self.fraction.score_max.is_finite() || !(0.0..=1.0).contains(&self.fraction.dice_min) {
            return Err(Error::invalid("score_max must be finite and dice_min in [0, 1]"));
        }
        Ok(())
    }

    /// Renders the config in the format accepted by [`PipelineConfig::parse`].
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        };
        match &self.selection {
            SelectionSource::Trace(p) => line("trace", &p.display()),
            SelectionSource::Manifest(p) => line("manifest", &p.display()),
        }
        line("predictions", &self.predictions.display());
        line("ground_truth", &self.ground_truth.display());
        line("out", &self.out.display());
        let s = &self.schedule;
        line("t0", &s.t0);
        line("eta", &s.eta);
        line("lr_max", &s.lr_max);
        line("lr_min", &s.lr_min);
        line("epochs", &s.total_epochs);
        line("convention", &s.convention);
        line("per_cycle", &self.policy.per_cycle);
        line("min_peak_ratio", &self.policy.min_peak_ratio);
        line("window", &self.policy.window);
        if let Some(c) = self.classes {
            line("classes", &c);
        }
        line("bins", &self.bins);
        line("calibration", &self.calibration);
        line("region", &self.score.region);
        line("threshold", &self.score.threshold);
        line("element", &self.score.element);
        line("score_max", &self.fraction.score_max);
        line("dice_min", &self.fraction.dice_min);
        out
    }
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub checkpoints: CheckpointSet,
    pub cases: Vec<String>,
    pub table: UncertaintyDiceTable,
    pub ece: f64,
    pub summary: Summary,
}

/// Case directories under `predictions`, sorted by name.
pub fn discover_cases(predictions: &Path) -> Result<Vec<String>> {
    let mut cases = Vec::new();
    for entry in fs::read_dir(predictions)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().into_string().map_err(|n| {
                Error::invalid(format!("case directory name {n:?} is not UTF-8"))
            })?;
            cases.push(name);
        }
    }
    cases.sort();
    if cases.is_empty() {
        return Err(Error::invalid(format!(
            "no case directories under {}",
            predictions.display()
        )));
    }
    Ok(cases)
}

/// Loads `<dir>/<id>.uqsg` for every id and averages them.
pub fn fuse_members(dir: &Path, ids: &[String]) -> Result<ProbabilityVolume> {
    let members = ids
        .iter()
        .map(|id| {
            let path = dir.join(format!("{id}.uqsg"));
            let data = read_array(&path)?;
            ProbabilityVolume::from_array_data(data)
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    ensemble_mean(&EnsembleInput::new(members, ids.to_vec())?)
}

fn staging_dir(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::invalid(format!("output path {} has no name", out.display())))?;
    let mut staged = name.to_os_string();
    staged.push(".partial");
    Ok(out.with_file_name(staged))
}

/// Refuses to replace a non-empty directory that is not a previous run.
fn check_replaceable(out: &Path) -> Result<()> {
    if !out.exists() {
        return Ok(());
    }
    if !out.is_dir() {
        return Err(Error::invalid(format!("output {} is not a directory", out.display())));
    }
    let empty = fs::read_dir(out)?.next().is_none();
    if !empty && !out.join("summary.csv").exists() {
        return Err(Error::invalid(format!(
            "output directory {} is not empty and holds no previous run",
            out.display()
        )));
    }
    Ok(())
}

/// Runs select, fuse, entropy, score, Dice/ECE and report. On failure the
/// error names the stage and nothing is left behind; on success any
/// previous run in the output directory is replaced.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    in_stage(STAGE_CONFIG, cfg.validate())?;
    in_stage(STAGE_CONFIG, check_replaceable(&cfg.out))?;
    let staging = in_stage(STAGE_CONFIG, staging_dir(&cfg.out))?;
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let result = run_stages(cfg, &staging);
    match result {
        Ok(output) => {
            if cfg.out.exists() {
                fs::remove_dir_all(&cfg.out)?;
            }
            fs::rename(&staging, &cfg.out)?;
            Ok(output)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn run_stages(cfg: &PipelineConfig, dir: &Path) -> Result<PipelineOutput> {
    let checkpoints = in_stage(STAGE_SELECT, select(cfg))?;
    in_stage(STAGE_SELECT, export_selection(&checkpoints, dir.join("manifest.csv")))?;
    let ids: Vec<String> = checkpoints.ids().map(String::from).collect();
    let cases = in_stage(STAGE_FUSE, discover_cases(&cfg.predictions))?;

    fs::create_dir_all(dir.join("fused"))?;
    fs::create_dir_all(dir.join("entropy"))?;
    let mut acc = in_stage(STAGE_METRICS, EceAccumulator::new(cfg.bins))?;
    let mut rows = Vec::new();
    let mut class_count = cfg.classes;
    for case in &cases {
        let fused = in_stage(STAGE_FUSE, fuse_members(&cfg.predictions.join(case), &ids))?;
        let c = *class_count.get_or_insert(fused.class_count());
        if fused.class_count() != c {
            return Err(Error::Stage {
                stage: STAGE_FUSE,
                source: Box::new(Error::shape(format!(
                    "case `{case}` has {} classes, expected {c}",
                    fused.class_count()
                ))),
            });
        }
        in_stage(
            STAGE_FUSE,
            write_array(dir.join("fused").join(format!("{case}.uqsg")), &fused.to_array_data()),
        )?;

        let entropy = pixel_entropy(&fused);
        in_stage(STAGE_ENTROPY, write_entropy(dir, case, &entropy))?;

        let gt = in_stage(STAGE_METRICS, load_ground_truth(&cfg.ground_truth, case, c))?;
        let pred = argmax_labels(&fused);
        in_stage(STAGE_METRICS, acc.add_case(&fused, &gt, cfg.calibration))?;
        for class in 1..c {
            let score = in_stage(
                STAGE_SCORE,
                score_with_entropy(&fused, &entropy, class, &cfg.score),
            )?;
            let d = in_stage(STAGE_METRICS, dice(&pred, &gt, class))?;
            rows.push(CaseScore {
                case_id: case.clone(),
                score,
                dice: d.dice,
            });
        }
    }

    let calibration = acc.report();
    let table = in_stage(
        STAGE_REPORT,
        table_from_rows(rows.iter().map(CaseScore::row).collect()),
    )?;
    let mut summary = Summary::default();
    summary.push("cases", cases.len().to_string());
    summary.push("checkpoints", checkpoints.len().to_string());
    summary.push(
        "selected_cycles",
        checkpoints
            .cycles()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";"),
    );
    summary.push("classes", class_count.unwrap_or_default().to_string());
    summary.push("entropy_region", cfg.score.region.to_string());
    summary.push("structuring_element", cfg.score.element.to_string());
    summary.push("calibration_scope", cfg.calibration.to_string());
    summary.push("ece_bins", cfg.bins.to_string());
    summary.push("ece_pixels", calibration.total.to_string());
    summary.push("ece_percent", sig9(calibration.ece));
    summary.extend_with_table(&table, cfg.fraction);

    in_stage(STAGE_REPORT, write_csv_file(dir.join("cases.csv"), |w| write_cases(&rows, w)))?;
    in_stage(
        STAGE_REPORT,
        write_csv_file(dir.join("reliability.csv"), |w| write_reliability(&calibration, w)),
    )?;
    in_stage(STAGE_REPORT, write_csv_file(dir.join("summary.csv"), |w| summary.write(w)))?;

    Ok(PipelineOutput {
        checkpoints,
        cases,
        table,
        ece: calibration.ece,
        summary,
    })
}

fn select(cfg: &PipelineConfig) -> Result<CheckpointSet> {
    match &cfg.selection {
        SelectionSource::Trace(path) => {
            let trace = TrainingTrace::load(path)?;
            find_cycle_peaks(&trace, &cfg.schedule, &cfg.policy)
        }
        SelectionSource::Manifest(path) => read_selection(path),
    }
}

fn load_ground_truth(dir: &Path, case: &str, classes: usize) -> Result<LabelVolume> {
    let path = dir.join(format!("{case}.uqsg"));
    let data = read_array(&path)?;
    LabelVolume::from_array_data(data, Some(classes))
}

/// Writes the entropy array and its PGM slices under `<dir>/entropy`.
fn write_entropy(dir: &Path, case: &str, entropy: &EntropyMap) -> Result<()> {
    let base = dir.join("entropy");
    write_array(base.join(format!("{case}.uqsg")), &entropy.to_array_data())?;
    write_pgm_slices(entropy, &base, case)?;
    Ok(())
}

/// Writes one PGM per slice: `<stem>.pgm` for a single slice,
/// `<stem>_sNNN.pgm` otherwise. Returns the written paths.
pub fn write_pgm_slices(entropy: &EntropyMap, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let slices = entropy.to_pgm_slices();
    let single = slices.len() == 1;
    let mut written = Vec::with_capacity(slices.len());
    for (i, pgm) in slices.into_iter().enumerate() {
        let path = if single {
            dir.join(format!("{stem}.pgm"))
        } else {
            dir.join(format!("{stem}_s{i:03}.pgm"))
        };
        fs::write(&path, pgm).map_err(Error::at(&path))?;
        written.push(path);
    }
    Ok(written)
}

fn write_csv_file(path: PathBuf, f: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    let mut file = fs::File::create(&path).map_err(Error::at(&path))?;
    f(&mut file)
}
