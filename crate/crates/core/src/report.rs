//! CSV tables written by the CLI and the pipeline.
//!
//! Every table has a fixed column order and prints reals with nine
//! significant digits, so identical inputs give byte-identical files.

use std::io::{Read, Write};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::metrics::{CalibrationReport, CaseRow, Correlation, DiceResult, UncertaintyDiceTable};
use crate::numfmt::sig9;
use crate::uncertainty::UncertaintyScore;

/// Threshold pair of the low-score / high-Dice fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionThresholds {
    pub score_max: f64,
    pub dice_min: f64,
}

impl Default for FractionThresholds {
    fn default() -> Self {
        Self {
            score_max: 0.5,
            dice_min: 0.8,
        }
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// `class,h_total,contour_pixels,score,empty_contour_flag`.
pub fn write_scores<W: Write>(scores: &[UncertaintyScore], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["class", "h_total", "contour_pixels", "score", "empty_contour_flag"])?;
    for s in scores {
        w.write_record([
            s.class_id.to_string(),
            sig9(s.h_total),
            s.contour_pixels.to_string(),
            sig9(s.score),
            flag(s.empty_contour).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `class,intersection,pred_size,gt_size,dice`.
pub fn write_dice<W: Write>(results: &[DiceResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["class", "intersection", "pred_size", "gt_size", "dice"])?;
    for d in results {
        w.write_record([
            d.class_id.to_string(),
            d.intersection.to_string(),
            d.pred_size.to_string(),
            d.gt_size.to_string(),
            sig9(d.dice),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reliability table `bin,lower,upper,count,mean_confidence,accuracy`.
/// Empty bins leave the last two fields blank.
pub fn write_reliability<W: Write>(report: &CalibrationReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bin", "lower", "upper", "count", "mean_confidence", "accuracy"])?;
    for (i, b) in report.bins.iter().enumerate() {
        w.write_record([
            i.to_string(),
            sig9(b.lower),
            sig9(b.upper),
            b.count.to_string(),
            b.mean_confidence().map(sig9).unwrap_or_default(),
            b.accuracy().map(sig9).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of `cases.csv`: a case, a class, its score and its Dice.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseScore {
    pub case_id: String,
    pub score: UncertaintyScore,
    pub dice: f64,
}

impl CaseScore {
    pub fn row(&self) -> CaseRow {
        CaseRow {
            case_id: self.case_id.clone(),
            class_id: self.score.class_id,
            score: self.score.score,
            dice: self.dice,
            empty_contour: self.score.empty_contour,
        }
    }
}

/// `case_id,class,h_total,contour_pixels,score,empty_contour_flag,dice`.
pub fn write_cases<W: Write>(cases: &[CaseScore], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "case_id",
        "class",
        "h_total",
        "contour_pixels",
        "score",
        "empty_contour_flag",
        "dice",
    ])?;
    for c in cases {
        w.write_record([
            c.case_id.clone(),
            c.score.class_id.to_string(),
            sig9(c.score.h_total),
            c.score.contour_pixels.to_string(),
            sig9(c.score.score),
            flag(c.score.empty_contour).to_string(),
            sig9(c.dice),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct CaseRecord {
    case_id: String,
    class: usize,
    score: f64,
    dice: f64,
    empty_contour_flag: u8,
}

/// Reads the columns of `cases.csv` that the report needs; other columns
/// are ignored.
pub fn read_cases<R: Read>(reader: R) -> Result<Vec<CaseRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for (line, record) in r.deserialize::<CaseRecord>().enumerate() {
        let rec = record?;
        if !rec.score.is_finite() || rec.score < 0.0 {
            return Err(Error::invalid(format!(
                "row {}: score {} must be finite and >= 0",
                line + 1,
                rec.score
            )));
        }
        if !(0.0..=1.0).contains(&rec.dice) {
            return Err(Error::invalid(format!(
                "row {}: dice {} outside [0, 1]",
                line + 1,
                rec.dice
            )));
        }
        if rec.empty_contour_flag > 1 {
            return Err(Error::invalid(format!(
                "row {}: empty_contour_flag must be 0 or 1",
                line + 1
            )));
        }
        rows.push(CaseRow {
            case_id: rec.case_id,
            class_id: rec.class,
            score: rec.score,
            dice: rec.dice,
            empty_contour: rec.empty_contour_flag == 1,
        });
    }
    Ok(rows)
}

/// Ordered `metric,value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, metric: impl Into<String>, value: impl Into<String>) {
        self.entries.push((metric.into(), value.into()));
    }

    pub fn push_real(&mut self, metric: impl Into<String>, value: Option<f64>) {
        self.push(metric, value.map(sig9).unwrap_or_default());
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, metric: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(m, _)| m == metric)
            .map(|(_, v)| v.as_str())
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["metric", "value"])?;
        for (m, v) in &self.entries {
            w.write_record([m, v])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Appends the rows derived from an uncertainty-versus-Dice table:
    /// row counts, mean score and Dice over scored rows, the Spearman
    /// correlation and its status, and the low-score / high-Dice fraction.
    pub fn extend_with_table(&mut self, table: &UncertaintyDiceTable, t: FractionThresholds) {
        let scored: Vec<_> = table.scored_rows().collect();
        let mean = |f: fn(&CaseRow) -> f64| {
            (!scored.is_empty())
                .then(|| scored.iter().map(|r| f(r)).sum::<f64>() / scored.len() as f64)
        };
        self.push("rows", table.rows.len().to_string());
        self.push("scored_rows", scored.len().to_string());
        self.push("empty_contour_rows", (table.rows.len() - scored.len()).to_string());
        self.push_real("mean_score", mean(|r| r.score));
        self.push_real("mean_dice", mean(|r| r.dice));
        self.push_real("spearman", table.spearman.value());
        self.push(
            "spearman_status",
            match table.spearman {
                Correlation::Value(_) => "value",
                Correlation::TooFewCases => "too-few-cases",
                Correlation::Undefined => "undefined",
            },
        );
        self.push_real("fraction_score_max", Some(t.score_max));
        self.push_real("fraction_dice_min", Some(t.dice_min));
        self.push_real(
            "high_dice_fraction",
            table.high_dice_fraction(t.score_max, t.dice_min),
        );
    }
}
