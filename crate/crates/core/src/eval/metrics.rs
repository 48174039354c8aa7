use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: u64,
    pub predicted: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ConfusionMatrix {
    pub fn new(class_names: &[String]) -> Self {
        let c = class_names.len();
        ConfusionMatrix { class_names: class_names.to_vec(), counts: vec![vec![0; c]; c] }
    }

    /// Builds a matrix from explicit counts; rows are true classes.
    pub fn from_counts(class_names: &[String], counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = class_names.len();
        if counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::input(format!("count matrix must be {c}x{c}")));
        }
        Ok(ConfusionMatrix { class_names: class_names.to_vec(), counts })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    /// Samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Samples predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_names != self.class_names {
            return Err(Error::input("cannot add confusion matrices over different classes"));
        }
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Precision, recall and F1 per class. An undefined ratio (zero
    /// denominator) counts as 0.
    pub fn per_class(&self) -> Vec<ClassMetrics> {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        (0..self.num_classes())
            .map(|c| {
                let tp = self.true_positives(c);
                let (support, predicted) = (self.support(c), self.predicted(c));
                let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
                let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
                ClassMetrics { support, predicted, precision, recall, f1 }
            })
            .collect()
    }

    fn non_empty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::input("metrics need at least one evaluated sample")),
            n => Ok(n),
        }
    }

    /// Overall fraction correct.
    pub fn war(&self) -> Result<f64> {
        let n = self.non_empty()?;
        Ok((0..self.num_classes()).map(|c| self.true_positives(c)).sum::<u64>() as f64 / n as f64)
    }

    /// Mean recall over the classes that occur.
    pub fn uar(&self) -> Result<f64> {
        self.non_empty()?;
        let recalls: Vec<f64> = (0..self.num_classes())
            .filter(|&c| self.support(c) > 0)
            .map(|c| self.true_positives(c) as f64 / self.support(c) as f64)
            .collect();
        Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.war()
    }

    /// Mean of per-class F1 over all classes.
    pub fn macro_f1(&self) -> Result<f64> {
        self.non_empty()?;
        let per = self.per_class();
        Ok(per.iter().map(|m| m.f1).sum::<f64>() / per.len() as f64)
    }
}

/// Tallies `(actual, predicted)` pairs into a `num_classes`-square matrix.
pub fn confusion(predicted: &[usize], actual: &[usize], class_names: &[String]) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::input(format!("{} predictions for {} labels", predicted.len(), actual.len())));
    }
    let c = class_names.len();
    let mut cm = ConfusionMatrix::new(class_names);
    for (i, (&p, &a)) in predicted.iter().zip(actual).enumerate() {
        if p >= c || a >= c {
            return Err(Error::input(format!("sample {i}: class index out of range for {c} classes")));
        }
        cm.counts[a][p] += 1;
    }
    Ok(cm)
}

pub fn war(cm: &ConfusionMatrix) -> Result<f64> {
    cm.war()
}

pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    cm.uar()
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.macro_f1()
}
