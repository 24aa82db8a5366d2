//! Confusion matrices and weighted / unweighted accuracy.
//!
//! WA is plain accuracy. UA is macro-averaged recall: the mean over classes
//! of `counts[c][c] / row_sum(c)`. Classes with no examples are left out of
//! the UA average and reported in [`Ua::excluded`].

use serde::Serialize;

use crate::error::{Error, Result};

/// Rows are true classes, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: Vec<Vec<u64>>) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.into_iter().flatten().collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::InvalidArgument(format!(
                "class pair ({truth}, {pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("cannot merge confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Recall per class; `None` for classes without examples.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let n = self.row_sum(c);
                (n > 0).then(|| self.get(c, c) as f64 / n as f64)
            })
            .collect()
    }
}

/// Tallies `(label, pred)` pairs into a `classes × classes` matrix.
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&p, &y) in preds.iter().zip(labels) {
        m.add(y, p)?;
    }
    Ok(m)
}

/// Weighted accuracy in percent.
pub fn wa(m: &ConfusionMatrix) -> Result<f64> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Empty("no scored examples".into()));
    }
    Ok(100.0 * m.trace() as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ua {
    pub percent: f64,
    /// Classes with no examples, left out of the average.
    pub excluded: Vec<usize>,
}

/// Unweighted accuracy (macro recall) in percent.
pub fn ua(m: &ConfusionMatrix) -> Result<Ua> {
    let recalls = m.per_class_recall();
    let excluded: Vec<usize> = (0..recalls.len()).filter(|&c| recalls[c].is_none()).collect();
    let present: Vec<f64> = recalls.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::Empty("no scored examples".into()));
    }
    if !excluded.is_empty() {
        log::warn!("UA: classes {excluded:?} have no examples and are excluded from the average");
    }
    Ok(Ua {
        percent: 100.0 * present.iter().sum::<f64>() / present.len() as f64,
        excluded,
    })
}

/// JSON-ready summary of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub wa: f64,
    pub ua: f64,
    pub ua_excluded_classes: Vec<usize>,
    pub confusion: Vec<Vec<u64>>,
    pub per_class_recall: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn from_confusion(m: &ConfusionMatrix) -> Result<Self> {
        let u = ua(m)?;
        Ok(Self {
            wa: wa(m)?,
            ua: u.percent,
            ua_excluded_classes: u.excluded,
            confusion: m.rows(),
            per_class_recall: m.per_class_recall(),
        })
    }
}

/// Two-decimal percentage, as printed in reports.
pub fn fmt_pct(v: f64) -> String {
    format!("{v:.2}")
}
