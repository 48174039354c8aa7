use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Manifest;
use crate::error::{Error, Result};

/// One train/test split over manifest indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// Held-out subject or database.
    pub tag: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Folds plus notes about samples that were left out.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Folds {
    pub folds: Vec<Fold>,
    pub warnings: Vec<String>,
}

/// Train on one database and test on the other, both ways round.
/// Samples from any other database are excluded with a warning.
pub fn folds_hde(manifest: &Manifest, db_a: &str, db_b: &str) -> Result<Folds> {
    if db_a == db_b {
        return Err(Error::input(format!("holdout evaluation needs two different databases, got `{db_a}` twice")));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut others: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        match s.database.as_str() {
            d if d == db_a => a.push(i),
            d if d == db_b => b.push(i),
            d => *others.entry(d).or_default() += 1,
        }
    }
    for (db, idx) in [(db_a, &a), (db_b, &b)] {
        if idx.is_empty() {
            return Err(Error::MissingDatabase(db.to_string()));
        }
    }
    let warnings = others
        .into_iter()
        .map(|(db, n)| format!("excluded {n} sample(s) from database `{db}`"))
        .collect();
    Ok(Folds {
        folds: vec![
            Fold { tag: db_b.to_string(), train: a.clone(), test: b.clone() },
            Fold { tag: db_a.to_string(), train: b, test: a },
        ],
        warnings,
    })
}

/// One fold per subject, in lexicographic subject order.
pub fn folds_loso(manifest: &Manifest) -> Result<Folds> {
    if let Some(i) = manifest.samples.iter().position(|s| s.subject.is_empty()) {
        return Err(Error::input(format!("sample {i} has no subject id")));
    }
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        by_subject.entry(&s.subject).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(Error::input(format!(
            "leave-one-subject-out needs at least two subjects, found {}",
            by_subject.len()
        )));
    }
    let folds = by_subject
        .iter()
        .map(|(subject, test)| Fold {
            tag: subject.to_string(),
            train: manifest.samples.iter().enumerate().filter(|(_, s)| s.subject != *subject).map(|(i, _)| i).collect(),
            test: test.clone(),
        })
        .collect();
    Ok(Folds { folds, warnings: vec![] })
}
