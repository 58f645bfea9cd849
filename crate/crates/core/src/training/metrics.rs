use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::Label;
use crate::error::{Error, Result};

/// `(1 + b^2) P R / (b^2 P + R)`, or 0 when the denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

pub fn f05(precision: f64, recall: f64) -> f64 {
    f_beta(precision, recall, 0.5)
}

/// Binary confusion counts with caries as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Confusion {
    pub fn add(&mut self, actual: usize, predicted: usize) {
        match (actual, predicted) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (1, _) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

/// One evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRecord {
    pub label: Label,
    pub region: u8,
    /// Predicted binary class.
    pub predicted: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f05: f64,
    /// `None` when the test set has no sample of that severity.
    pub recall_mild: Option<f64>,
    pub recall_severe: Option<f64>,
    /// Accuracy for jaw regions 1 to 6; `None` for empty regions.
    pub region_accuracy: BTreeMap<u8, Option<f64>>,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_records(records: &[PredictionRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("evaluation needs at least one sample".into()));
        }
        let mut c = Confusion::default();
        let mut severity: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
        let mut regions: BTreeMap<u8, (usize, usize)> = (1..=6).map(|r| (r, (0, 0))).collect();
        let mut loss = 0.0;
        for r in records {
            let actual = r.label.class();
            c.add(actual, r.predicted);
            loss += r.loss;
            let hit = usize::from(actual == r.predicted);
            let s = severity.entry(r.label).or_default();
            s.0 += hit;
            s.1 += 1;
            let g = regions
                .get_mut(&r.region)
                .ok_or_else(|| Error::Data(format!("jaw region {} is not in 1..=6", r.region)))?;
            g.0 += hit;
            g.1 += 1;
        }
        let rate = |v: Option<&(usize, usize)>| v.filter(|s| s.1 > 0).map(|s| ratio(s.0, s.1));
        let (precision, recall) = (c.precision(), c.recall());
        Ok(Self {
            n: records.len(),
            accuracy: c.accuracy(),
            loss: loss / records.len() as f64,
            precision,
            recall,
            f05: f05(precision, recall),
            recall_mild: rate(severity.get(&Label::Mild)),
            recall_severe: rate(severity.get(&Label::Severe)),
            region_accuracy: regions.iter().map(|(k, v)| (*k, rate(Some(v)))).collect(),
            confusion: c,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(label: Label, predicted: usize) -> PredictionRecord {
        PredictionRecord {
            label,
            region: 1,
            predicted,
            loss: 0.0,
        }
    }

    #[test]
    fn perfect_classifier() {
        let r: Vec<_> = [Label::Healthy, Label::Mild, Label::Severe]
            .iter()
            .map(|&l| rec(l, l.class()))
            .collect();
        let e = EvalReport::from_records(&r).unwrap();
        assert_eq!((e.accuracy, e.precision, e.recall, e.f05), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_negative_on_balanced_set() {
        let r: Vec<_> = (0..10)
            .map(|i| rec(if i % 2 == 0 { Label::Healthy } else { Label::Severe }, 0))
            .collect();
        let e = EvalReport::from_records(&r).unwrap();
        assert_eq!((e.accuracy, e.recall, e.precision, e.f05), (0.5, 0.0, 0.0, 0.0));
        assert_eq!(e.region_accuracy[&2], None);
        assert_eq!(e.recall_mild, None);
    }

    #[test]
    fn empty_is_data_error() {
        assert!(matches!(EvalReport::from_records(&[]), Err(Error::Data(_))));
    }

    #[test]
    fn per_severity_recall() {
        let r = [
            rec(Label::Mild, 0),
            rec(Label::Mild, 1),
            rec(Label::Severe, 1),
            rec(Label::Healthy, 0),
        ];
        let e = EvalReport::from_records(&r).unwrap();
        assert_eq!(e.recall_mild, Some(0.5));
        assert_eq!(e.recall_severe, Some(1.0));
    }
}
