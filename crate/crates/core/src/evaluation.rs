//! Confusion matrix and mean IoU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C x C` counts, rows are ground truth and columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// How classes that never occur enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Average over classes with a nonzero IoU denominator.
    #[default]
    PresentClasses,
    /// Divide by `C`, counting absent classes as zero.
    AllClasses,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion", &[truth.len()], &[pred.len()]));
        }
        for &l in truth.iter().chain(pred) {
            if l >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.classes,
                });
            }
        }
        for (t, p) in truth.iter().zip(pred) {
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion merge", &[self.classes], &[other.classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU, `None` where the denominator is zero.
    pub fn iou(&self) -> Vec<Option<f64>> {
        self.ratios()
            .into_iter()
            .map(|(tp, denom)| (denom > 0).then(|| tp as f64 / denom as f64))
            .collect()
    }

    /// `(tp, tp + fp + fn)` per class.
    pub fn ratios(&self) -> Vec<(u64, u64)> {
        (0..self.classes)
            .map(|i| {
                let tp = self.get(i, i);
                let row: u64 = (0..self.classes).map(|j| self.get(i, j)).sum();
                let col: u64 = (0..self.classes).map(|k| self.get(k, i)).sum();
                (tp, row + col - tp)
            })
            .collect()
    }

    /// Mean IoU; an empty matrix is an error.
    ///
    /// The mean is accumulated as an exact fraction and divided once, so
    /// small cases such as `(2/3 + 1/2) / 2` give the correctly rounded
    /// `7/12`. Very large counts fall back to floating-point summation.
    pub fn miou(&self, mode: MeanMode) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::EmptyMatrix);
        }
        let present: Vec<(u64, u64)> = self.ratios().into_iter().filter(|(_, d)| *d > 0).collect();
        let divisor = match mode {
            MeanMode::PresentClasses => present.len(),
            MeanMode::AllClasses => self.classes,
        } as u64;
        if let Some((num, den)) = exact_mean(&present, divisor) {
            return Ok(num as f64 / den as f64);
        }
        let sum: f64 = present.iter().map(|(t, d)| *t as f64 / *d as f64).sum();
        Ok(sum / divisor as f64)
    }

    /// `class_id,name,iou` rows followed by a `miou,<value>` line.
    pub fn csv(&self, names: &[String], mode: MeanMode) -> Result<String> {
        let miou = self.miou(mode)?;
        let mut out = String::from("class_id,name,iou\n");
        for (i, v) in self.iou().iter().enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("");
            match v {
                Some(v) => writeln!(out, "{i},{name},{v}").unwrap(),
                None => writeln!(out, "{i},{name},nan").unwrap(),
            }
        }
        writeln!(out, "miou,{miou}").unwrap();
        Ok(out)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `sum(t / d) / divisor` as a reduced fraction, `None` on overflow or when
/// either part is not exactly representable as `f64`.
fn exact_mean(ratios: &[(u64, u64)], divisor: u64) -> Option<(u128, u128)> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(t, d) in ratios {
        let (t, d) = (t as u128, d as u128);
        let g = gcd(den, d);
        let lcm = (den / g).checked_mul(d)?;
        num = num.checked_mul(lcm / den)?.checked_add(t.checked_mul(lcm / d)?)?;
        den = lcm;
        let r = gcd(num, den).max(1);
        (num, den) = (num / r, den / r);
    }
    den = den.checked_mul(divisor as u128)?;
    let r = gcd(num, den).max(1);
    (num, den) = (num / r, den / r);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then_some((num, den))
}

/// Confusion matrix of one prediction set.
pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(classes);
    m.accumulate(truth, pred)?;
    Ok(m)
}
