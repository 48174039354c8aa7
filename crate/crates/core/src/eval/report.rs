use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{confusion, ClassMetrics, ConfusionMatrix, Fold};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub war: f64,
    pub uar: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl Metrics {
    pub fn of(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Metrics {
            war: cm.war()?,
            uar: cm.uar()?,
            accuracy: cm.accuracy()?,
            macro_f1: cm.macro_f1()?,
            per_class: cm.per_class(),
        })
    }
}

/// Test-set predictions of one fold, in the fold's test order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPredictions {
    pub tag: String,
    pub actual: Vec<usize>,
    pub predicted: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub tag: String,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: String,
    pub class_names: Vec<String>,
    pub samples: u64,
    /// Predictions of every fold pooled into one matrix.
    pub pooled: ConfusionMatrix,
    pub metrics: Metrics,
    pub folds: Vec<FoldReport>,
    pub notes: Vec<String>,
}

/// Pools per-fold predictions into one report. Every fold must have exactly
/// one prediction set covering its test samples; fold reports follow the
/// order of `folds`.
pub fn aggregate(
    protocol: &str,
    class_names: &[String],
    folds: &[Fold],
    predictions: &[FoldPredictions],
) -> Result<Report> {
    let mut by_tag: BTreeMap<&str, &FoldPredictions> = BTreeMap::new();
    for p in predictions {
        if !folds.iter().any(|f| f.tag == p.tag) {
            return Err(Error::input(format!("predictions for unknown fold `{}`", p.tag)));
        }
        if by_tag.insert(&p.tag, p).is_some() {
            return Err(Error::input(format!("fold `{}` has more than one prediction set", p.tag)));
        }
    }
    let mut pooled = ConfusionMatrix::new(class_names);
    let mut reports = Vec::with_capacity(folds.len());
    for f in folds {
        let p = by_tag.get(f.tag.as_str()).ok_or_else(|| Error::MissingFold(f.tag.clone()))?;
        if p.predicted.len() != f.test.len() {
            return Err(Error::input(format!(
                "fold `{}` has {} predictions for {} test samples",
                f.tag,
                p.predicted.len(),
                f.test.len()
            )));
        }
        let cm = confusion(&p.predicted, &p.actual, class_names)?;
        pooled.add(&cm)?;
        reports.push(FoldReport { tag: f.tag.clone(), metrics: Metrics::of(&cm)?, confusion: cm });
    }
    Ok(Report {
        protocol: protocol.to_string(),
        class_names: class_names.to_vec(),
        samples: pooled.total(),
        metrics: Metrics::of(&pooled)?,
        pooled,
        folds: reports,
        notes: vec![],
    })
}

fn push_matrix(out: &mut String, names: &[String], rows: impl Iterator<Item = Vec<String>>) {
    let _ = writeln!(out, "\t{}", names.join("\t"));
    for (name, row) in names.iter().zip(rows) {
        let _ = writeln!(out, "{name}\t{}", row.join("\t"));
    }
}

impl Report {
    /// `key: value` metrics followed by tab-separated per-class, confusion
    /// and per-fold sections.
    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut out = String::new();
        let _ = writeln!(out, "protocol: {}", self.protocol);
        let _ = writeln!(out, "classes: {}", self.class_names.join(", "));
        let _ = writeln!(out, "samples: {}", self.samples);
        let _ = writeln!(out, "folds: {}", self.folds.len());
        let _ = writeln!(out, "war: {}", m.war);
        let _ = writeln!(out, "uar: {}", m.uar);
        let _ = writeln!(out, "accuracy: {}", m.accuracy);
        let _ = writeln!(out, "macro_f1: {}", m.macro_f1);
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out.push_str("\n[per-class]\nclass\tsupport\tpredicted\tprecision\trecall\tf1\n");
        for (name, c) in self.class_names.iter().zip(&m.per_class) {
            let _ = writeln!(out, "{name}\t{}\t{}\t{}\t{}\t{}", c.support, c.predicted, c.precision, c.recall, c.f1);
        }
        out.push_str("\n[confusion] rows: true class, columns: predicted class\n");
        push_matrix(
            &mut out,
            &self.class_names,
            self.pooled.counts.iter().map(|r| r.iter().map(u64::to_string).collect()),
        );
        out.push_str("\n[folds]\ntag\tsamples\twar\tuar\tmacro_f1\n");
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                f.tag,
                f.confusion.total(),
                f.metrics.war,
                f.metrics.uar,
                f.metrics.macro_f1
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Pooled matrix as row percentages with two decimals.
    pub fn percentage_table(&self) -> String {
        percentage_table(&self.pooled)
    }
}

/// Row-normalised percentages; rows without samples print `-`.
pub fn percentage_table(cm: &ConfusionMatrix) -> String {
    let mut out = String::new();
    push_matrix(
        &mut out,
        &cm.class_names,
        cm.counts.iter().map(|row| {
            let n: u64 = row.iter().sum();
            row.iter()
                .map(|&v| if n == 0 { "-".to_string() } else { format!("{:.2}", 100.0 * v as f64 / n as f64) })
                .collect()
        }),
    );
    out
}
