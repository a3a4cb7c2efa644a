//! Segmentation and calibration metrics.

use ndarray::Zip;
use serde::Serialize;

use crate::ensemble::argmax_labels;
use crate::error::{Error, Result};
use crate::uncertainty::{EntropyMap, UncertaintyScore};
use crate::volume::{check_same, BinaryImage, LabelVolume, ProbabilityVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiceResult {
    pub class_id: usize,
    pub intersection: usize,
    pub pred_size: usize,
    pub gt_size: usize,
    pub dice: f64,
}

/// `2|P ∩ G| / (|P| + |G|)` for one class; 1 when both masks are empty.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, class: usize) -> Result<DiceResult> {
    check_same(pred.shape(), gt.shape())?;
    let k = class as u8;
    let (mut intersection, mut pred_size, mut gt_size) = (0, 0, 0);
    Zip::from(pred.values()).and(gt.values()).for_each(|&p, &g| {
        let (p, g) = (p == k, g == k);
        pred_size += p as usize;
        gt_size += g as usize;
        intersection += (p && g) as usize;
    });
    let dice = if pred_size + gt_size == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (pred_size + gt_size) as f64
    };
    Ok(DiceResult {
        class_id: class,
        intersection,
        pred_size,
        gt_size,
        dice,
    })
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.comp += other.comp;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// One equal-width confidence bin `(lower, upper]`; the first bin also
/// takes confidence 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub correct: usize,
    confidence_sum: CompensatedSum,
}

impl ReliabilityBin {
    pub fn confidence_sum(&self) -> f64 {
        self.confidence_sum.value()
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        (self.count > 0).then(|| self.confidence_sum() / self.count as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

/// Index of the right-inclusive bin holding `conf`; a confidence exactly on
/// an interior edge belongs to the lower bin.
pub fn bin_index(conf: f64, n_bins: usize) -> usize {
    let n = n_bins as f64;
    let edge = |j: usize| j as f64 / n;
    let mut idx = ((conf * n).ceil() as isize - 1).clamp(0, n_bins as isize - 1) as usize;
    while idx > 0 && conf <= edge(idx) {
        idx -= 1;
    }
    while idx + 1 < n_bins && conf > edge(idx + 1) {
        idx += 1;
    }
    idx
}

/// Which pixels enter the calibration statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationScope {
    #[default]
    AllPixels,
    /// Pixels that are foreground in the ground truth or the prediction.
    Foreground,
}

impl std::str::FromStr for CalibrationScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-pixels" => Ok(Self::AllPixels),
            "foreground" => Ok(Self::Foreground),
            other => Err(Error::invalid(format!("unknown calibration scope `{other}`"))),
        }
    }
}

impl std::fmt::Display for CalibrationScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AllPixels => "all-pixels",
            Self::Foreground => "foreground",
        })
    }
}

/// Reliability bins that can be filled case by case and merged.
#[derive(Debug, Clone, PartialEq)]
pub struct EceAccumulator {
    bins: Vec<ReliabilityBin>,
}

impl EceAccumulator {
    pub fn new(n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::invalid("n_bins must be >= 1"));
        }
        let n = n_bins as f64;
        Ok(Self {
            bins: (0..n_bins)
                .map(|b| ReliabilityBin {
                    lower: b as f64 / n,
                    upper: (b + 1) as f64 / n,
                    count: 0,
                    correct: 0,
                    confidence_sum: CompensatedSum::default(),
                })
                .collect(),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    /// Adds one pixel's confidence and correctness.
    pub fn push(&mut self, confidence: f64, correct: bool) {
        let idx = bin_index(confidence, self.bins.len());
        let b = &mut self.bins[idx];
        b.count += 1;
        b.correct += correct as usize;
        b.confidence_sum.add(confidence);
    }

    /// Adds every scored pixel of one case. Confidence is the maximum class
    /// probability, correctness is argmax agreement with `gt`.
    pub fn add_case(
        &mut self,
        p: &ProbabilityVolume,
        gt: &LabelVolume,
        scope: CalibrationScope,
    ) -> Result<()> {
        check_same(p.shape(), gt.shape())?;
        let pred = argmax_labels(p);
        let probs = p.values();
        for ((z, y, x), &g) in gt.values().indexed_iter() {
            let label = pred.values()[[z, y, x]];
            if scope == CalibrationScope::Foreground && g == 0 && label == 0 {
                continue;
            }
            let conf = probs[[label as usize, z, y, x]];
            self.push(conf, label == g);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &EceAccumulator) -> Result<()> {
        if other.bins.len() != self.bins.len() {
            return Err(Error::invalid(format!(
                "cannot merge {} bins into {}",
                other.bins.len(),
                self.bins.len()
            )));
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.count += b.count;
            a.correct += b.correct;
            a.confidence_sum.merge(&b.confidence_sum);
        }
        Ok(())
    }

    pub fn report(&self) -> CalibrationReport {
        let total: usize = self.bins.iter().map(|b| b.count).sum();
        // Σ_b (n_b/N)·|acc_b − conf_b| = Σ_b |correct_b − Σconf_b| / N
        let gap: f64 = self
            .bins
            .iter()
            .map(|b| (b.correct as f64 - b.confidence_sum()).abs())
            .sum();
        let ece = if total == 0 {
            0.0
        } else {
            100.0 * gap / total as f64
        };
        CalibrationReport {
            bins: self.bins.clone(),
            ece,
            total,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<ReliabilityBin>,
    /// Percent.
    pub ece: f64,
    pub total: usize,
}

/// Expected calibration error over all pixels of one posterior.
pub fn ece(p: &ProbabilityVolume, gt: &LabelVolume, n_bins: usize) -> Result<CalibrationReport> {
    ece_scoped(p, gt, n_bins, CalibrationScope::AllPixels)
}

pub fn ece_scoped(
    p: &ProbabilityVolume,
    gt: &LabelVolume,
    n_bins: usize,
    scope: CalibrationScope,
) -> Result<CalibrationReport> {
    let mut acc = EceAccumulator::new(n_bins)?;
    acc.add_case(p, gt, scope)?;
    Ok(acc.report())
}

/// Mean entropy over the map or over the pixels set in `region`.
pub fn average_entropy(h: &EntropyMap, region: Option<&BinaryImage>) -> Result<f64> {
    match region {
        None => Ok(h.values().mean().expect("non-empty map")),
        Some(mask) => {
            check_same(h.shape(), mask.shape())?;
            let n = mask.count();
            if n == 0 {
                return Err(Error::invalid("average entropy over an empty region"));
            }
            let sum = crate::uncertainty::total_entropy(h, Some(mask))?;
            Ok(sum / n as f64)
        }
    }
}

/// Outcome of a rank correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", content = "value", rename_all = "kebab-case")]
pub enum Correlation {
    Value(f64),
    /// Fewer than three pairs.
    TooFewCases,
    /// One side has constant ranks.
    Undefined,
}

impl Correlation {
    pub fn value(&self) -> Option<f64> {
        match self {
            Correlation::Value(v) => Some(*v),
            _ => None,
        }
    }
}

/// Fractional ranks (1-based), averaging over ties.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Ok(Correlation::TooFewCases);
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation::Undefined);
    }
    Ok(Correlation::Value((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// One row of the uncertainty-versus-Dice table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseRow {
    pub case_id: String,
    pub class_id: usize,
    pub score: f64,
    pub dice: f64,
    pub empty_contour: bool,
}

/// Per-case rows plus the rank correlation between score and Dice. Rows
/// flagged with an empty contour carry no usable score and are left out of
/// the correlation and the threshold fraction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyDiceTable {
    pub rows: Vec<CaseRow>,
    pub spearman: Correlation,
}

impl UncertaintyDiceTable {
    /// Rows that enter the statistics.
    pub fn scored_rows(&self) -> impl Iterator<Item = &CaseRow> {
        self.rows.iter().filter(|r| !r.empty_contour)
    }

    /// Fraction of scored rows with Dice above `dice_min` among those scoring
    /// below `score_max`; `None` when no row scores below it.
    pub fn high_dice_fraction(&self, score_max: f64, dice_min: f64) -> Option<f64> {
        let low: Vec<_> = self.scored_rows().filter(|r| r.score < score_max).collect();
        (!low.is_empty())
            .then(|| low.iter().filter(|r| r.dice > dice_min).count() as f64 / low.len() as f64)
    }
}

/// Builds the table and the Spearman correlation between score and Dice.
pub fn uncertainty_dice_table(
    cases: &[(String, UncertaintyScore, DiceResult)],
) -> Result<UncertaintyDiceTable> {
    let rows: Vec<CaseRow> = cases
        .iter()
        .map(|(id, s, d)| CaseRow {
            case_id: id.clone(),
            class_id: s.class_id,
            score: s.score,
            dice: d.dice,
            empty_contour: s.empty_contour,
        })
        .collect();
    table_from_rows(rows)
}

pub fn table_from_rows(rows: Vec<CaseRow>) -> Result<UncertaintyDiceTable> {
    let (scores, dices): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| !r.empty_contour)
        .map(|r| (r.score, r.dice))
        .unzip();
    let spearman = spearman(&scores, &dices)?;
    Ok(UncertaintyDiceTable { rows, spearman })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3, Array4};

    fn labels(v: Array3<u8>) -> LabelVolume {
        LabelVolume::new(v, 4).unwrap()
    }

    #[test]
    fn dice_fixtures() {
        let gt = labels(array![[[1, 1], [0, 0]]]);
        assert_eq!(dice(&gt, &gt, 1).unwrap().dice, 1.0);
        let disjoint = labels(array![[[0, 0], [1, 1]]]);
        assert_eq!(dice(&disjoint, &gt, 1).unwrap().dice, 0.0);
        let half = labels(array![[[1, 0], [1, 0]]]);
        let d = dice(&half, &gt, 1).unwrap();
        assert_eq!((d.intersection, d.pred_size, d.gt_size), (1, 2, 2));
        assert_eq!(d.dice, 0.5);
        assert_eq!(dice(&gt, &gt, 3).unwrap().dice, 1.0);
        let other = labels(Array3::zeros((1, 3, 3)));
        assert!(dice(&gt, &other, 1).is_err());
    }

    #[test]
    fn bin_edges_go_low() {
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.30000001, 10), 3);
        assert_eq!(bin_index(0.5, 10), 4);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.05, 10), 0);
        assert_eq!(bin_index(0.7, 1), 0);
    }

    #[test]
    fn perfect_confidence_has_zero_ece() {
        let mut v = Array4::zeros((2, 1, 2, 2));
        v.slice_mut(ndarray::s![1, .., .., ..]).fill(1.0);
        let p = ProbabilityVolume::new(v).unwrap();
        let gt = LabelVolume::new(Array3::from_elem((1, 2, 2), 1), 2).unwrap();
        assert_eq!(ece(&p, &gt, 10).unwrap().ece, 0.0);
    }

    #[test]
    fn single_bin_gap_is_twenty_percent() {
        let mut v = Array4::zeros((2, 1, 1, 10));
        v.slice_mut(ndarray::s![0, .., .., ..]).fill(0.9);
        v.slice_mut(ndarray::s![1, .., .., ..]).fill(0.1);
        let p = ProbabilityVolume::new(v).unwrap();
        let gt = LabelVolume::new(
            Array3::from_shape_fn((1, 1, 10), |(_, _, x)| (x >= 7) as u8),
            2,
        )
        .unwrap();
        let r = ece(&p, &gt, 1).unwrap();
        assert_eq!(r.ece, 20.0);
        assert_eq!(r.total, 10);
    }

    #[test]
    fn foreground_scope_skips_agreeing_background() {
        let v = Array4::from_shape_fn((2, 1, 1, 4), |(k, _, _, x)| {
            let fg = if x < 2 { 0.8 } else { 0.3 };
            if k == 1 { fg } else { 1.0 - fg }
        });
        let p = ProbabilityVolume::new(v).unwrap();
        let gt = LabelVolume::new(array![[[1, 0, 0, 0]]], 2).unwrap();
        let all = ece_scoped(&p, &gt, 10, CalibrationScope::AllPixels).unwrap();
        let fg = ece_scoped(&p, &gt, 10, CalibrationScope::Foreground).unwrap();
        assert_eq!((all.total, fg.total), (4, 2));
    }

    #[test]
    fn spearman_edge_cases() {
        let x = [0.1, 0.2, 0.3, 0.4];
        let y = [0.9, 0.8, 0.5, 0.1];
        assert_eq!(spearman(&x, &y).unwrap(), Correlation::Value(-1.0));
        assert_eq!(spearman(&[1.0; 4], &y).unwrap(), Correlation::Undefined);
        assert_eq!(spearman(&x[..2], &y[..2]).unwrap(), Correlation::TooFewCases);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn empty_contour_rows_are_not_scored() {
        let row = |score: f64, dice: f64, empty_contour: bool| CaseRow {
            case_id: "c".into(),
            class_id: 1,
            score,
            dice,
            empty_contour,
        };
        let table = table_from_rows(vec![
            row(0.2, 0.9, false),
            row(0.4, 0.7, false),
            row(0.0, 0.0, true),
            row(0.6, 0.5, false),
        ])
        .unwrap();
        assert_eq!(table.spearman, Correlation::Value(-1.0));
        assert_eq!(table.scored_rows().count(), 3);
        assert_eq!(table.high_dice_fraction(0.5, 0.8), Some(0.5));
        assert_eq!(table.high_dice_fraction(0.1, 0.8), None);
    }

    #[test]
    fn average_entropy_needs_region() {
        let p = ProbabilityVolume::new(Array4::from_elem((4, 1, 2, 2), 0.25)).unwrap();
        let h = crate::uncertainty::pixel_entropy(&p);
        assert_eq!(average_entropy(&h, None).unwrap(), 2.0);
        let empty = BinaryImage::zeros(h.shape());
        assert!(average_entropy(&h, Some(&empty)).is_err());
    }
}
