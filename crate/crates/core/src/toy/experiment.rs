use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::write_array;
use crate::schedule::SgdrConfig;
use crate::select::SearchWindow;
use crate::toy::model::predict;
use crate::toy::scene::{generate_varied, DatasetConfig, ToyCase};
use crate::toy::train::{train, TrainConfig, TrainOutput};
use crate::volume::SliceShape;

/// Contrast of the degraded cases, cycled by case index. Lower contrast
/// blurs the evidence for every class without changing the geometry.
pub const DEGRADED_CONTRAST: [f64; 2] = [0.6, 0.4];

/// A seeded end-to-end toy run: dataset sizes, generator settings and the
/// training schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyExperiment {
    pub seed: u64,
    pub train_cases: usize,
    pub val_cases: usize,
    pub test_cases: usize,
    /// Extra test cases rendered at reduced contrast.
    pub degraded_cases: usize,
    pub dataset: DatasetConfig,
    pub schedule: SgdrConfig,
    pub checkpoint_window: SearchWindow,
}

impl Default for ToyExperiment {
    /// Seed 7, 16/4/4 cases plus 4 degraded ones, 64×64 with three
    /// classes, two cycles of 20 epochs.
    fn default() -> Self {
        let shape = SliceShape {
            height: 64,
            width: 64,
        };
        Self {
            seed: 7,
            train_cases: 16,
            val_cases: 4,
            test_cases: 4,
            degraded_cases: 4,
            dataset: DatasetConfig::new(shape, 3),
            schedule: SgdrConfig::new(20, 2.0, 5.0, 1e-4, 40).expect("valid defaults"),
            checkpoint_window: SearchWindow::Fraction(0.5),
        }
    }
}

/// Cases and trained checkpoints of one run.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub train: Vec<ToyCase>,
    pub val: Vec<ToyCase>,
    pub test: Vec<ToyCase>,
    pub degraded: Vec<ToyCase>,
    pub output: TrainOutput,
}

impl ToyRun {
    /// Test cases followed by degraded cases.
    pub fn evaluation_cases(&self) -> impl Iterator<Item = &ToyCase> {
        self.test.iter().chain(&self.degraded)
    }
}

impl ToyExperiment {
    /// Train, validation and test splits (ids `case_NNN`, consecutive) and
    /// the degraded cases (ids `degraded_NNN`).
    #[allow(clippy::type_complexity)]
    pub fn datasets(&self) -> Result<(Vec<ToyCase>, Vec<ToyCase>, Vec<ToyCase>, Vec<ToyCase>)> {
        if self.train_cases == 0 || self.val_cases == 0 || self.test_cases == 0 {
            return Err(Error::invalid(
                "train, validation and test splits each need at least one case",
            ));
        }
        let n = self.train_cases + self.val_cases + self.test_cases;
        let mut cases = generate_varied(self.seed, n, "case", |_| self.dataset)?;
        let test = cases.split_off(self.train_cases + self.val_cases);
        let val = cases.split_off(self.train_cases);
        let degraded = if self.degraded_cases == 0 {
            Vec::new()
        } else {
            generate_varied(
                self.seed ^ 0x00DE_6EAD,
                self.degraded_cases,
                "degraded",
                |i| DatasetConfig {
                    contrast: self.dataset.contrast * DEGRADED_CONTRAST[i % DEGRADED_CONTRAST.len()],
                    ..self.dataset
                },
            )?
        };
        Ok((cases, val, test, degraded))
    }

    pub fn run(&self) -> Result<ToyRun> {
        let (train_set, val, test, degraded) = self.datasets()?;
        let cfg = TrainConfig {
            checkpoint_window: self.checkpoint_window,
            ..TrainConfig::new(self.schedule, self.seed)
        };
        let output = train(&train_set, &val, &cfg)?;
        Ok(ToyRun {
            train: train_set,
            val,
            test,
            degraded,
            output,
        })
    }

    /// Pipeline config text for a run directory written by [`Self::write`].
    pub fn pipeline_config(&self) -> String {
        let s = &self.schedule;
        format!(
            "# written by toy-train; paths are relative to this file\n\
             trace = trace.csv\n\
             predictions = predictions\n\
             ground_truth = ground_truth\n\
             out = report\n\
             t0 = {}\n\
             eta = {}\n\
             lr_max = {}\n\
             lr_min = {}\n\
             epochs = {}\n\
             convention = {}\n\
             window = {}\n\
             classes = {}\n",
            s.t0,
            s.eta,
            s.lr_max,
            s.lr_min,
            s.total_epochs,
            s.convention,
            self.checkpoint_window,
            self.dataset.class_count,
        )
    }

    /// Writes a run directory:
    ///
    /// - `trace.csv`
    /// - `checkpoints/<id>.uqsg`: float32 weights `(class, 6)`
    /// - `predictions/<case>/<id>.uqsg`: every stored checkpoint applied to
    ///   every test and degraded case
    /// - `images/<case>.uqsg`, `ground_truth/<case>.uqsg`
    /// - `pipeline.cfg` for the `run` subcommand
    pub fn write(&self, run: &ToyRun, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        run.output.trace.save(dir.join("trace.csv"))?;
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)?;
        for (id, model) in run.output.checkpoints.iter() {
            write_array(ckpt_dir.join(format!("{id}.uqsg")), &model.to_array_data())?;
        }
        write_cases(run.evaluation_cases(), dir)?;
        for case in run.evaluation_cases() {
            let case_dir = dir.join("predictions").join(&case.id);
            fs::create_dir_all(&case_dir)?;
            for (id, model) in run.output.checkpoints.iter() {
                let p = predict(model, case)?;
                write_array(case_dir.join(format!("{id}.uqsg")), &p.to_array_data())?;
            }
        }
        fs::write(dir.join("pipeline.cfg"), self.pipeline_config())?;
        Ok(())
    }
}

/// Writes generated cases as `images/<case>.uqsg` and
/// `ground_truth/<case>.uqsg` under `dir`.
pub fn write_cases<'a>(cases: impl IntoIterator<Item = &'a ToyCase>, dir: &Path) -> Result<()> {
    for sub in ["images", "ground_truth"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for case in cases {
        write_array(
            dir.join("images").join(format!("{}.uqsg", case.id)),
            &case.intensity.to_array_data(),
        )?;
        write_array(
            dir.join("ground_truth").join(format!("{}.uqsg", case.id)),
            &case.labels.to_array_data(),
        )?;
    }
    Ok(())
}
