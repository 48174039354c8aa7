use std::collections::{BTreeMap, BTreeSet};

use super::{Manifest, Sample};
use crate::error::{Error, Result};

/// Target classes shared by the cross-database protocols.
pub const FIVE_EMOTIONS: [&str; 5] = ["happiness", "surprise", "anger", "disgust", "sadness"];

/// Raw label → target class (or `None` to drop the sample).
/// Raw labels are matched case-insensitively.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub classes: Vec<String>,
    mapping: BTreeMap<String, Option<usize>>,
}

impl LabelMap {
    pub fn new(classes: &[&str]) -> Self {
        LabelMap { classes: classes.iter().map(|c| c.to_string()).collect(), mapping: BTreeMap::new() }
    }

    pub fn map(mut self, raw: &str, class: &str) -> Result<Self> {
        let idx = self
            .classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::config(format!("`{class}` is not a target class")))?;
        self.mapping.insert(raw.to_lowercase(), Some(idx));
        Ok(self)
    }

    pub fn drop(mut self, raw: &str) -> Self {
        self.mapping.insert(raw.to_lowercase(), None);
        self
    }

    /// Five emotion classes; `fear` and `others` are dropped.
    pub fn five_emotions() -> Self {
        let mut m = LabelMap::new(&FIVE_EMOTIONS);
        for (i, c) in FIVE_EMOTIONS.iter().enumerate() {
            m.mapping.insert(c.to_string(), Some(i));
        }
        m.drop("fear").drop("others")
    }

    /// Keeps every listed class unchanged.
    pub fn identity(classes: &[&str]) -> Self {
        let mut m = LabelMap::new(classes);
        for (i, c) in classes.iter().enumerate() {
            m.mapping.insert(c.to_lowercase(), Some(i));
        }
        m
    }

    pub fn lookup(&self, raw: &str) -> Option<Option<usize>> {
        self.mapping.get(&raw.to_lowercase()).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regrouped {
    pub manifest: Manifest,
    /// Kept samples per target class.
    pub counts: Vec<usize>,
    pub dropped: usize,
}

/// Relabels every sample through `map`, removing dropped ones.
pub fn regroup(manifest: &Manifest, map: &LabelMap) -> Result<Regrouped> {
    let unmapped: BTreeSet<String> =
        manifest.samples.iter().filter(|s| map.lookup(&s.label).is_none()).map(|s| s.label.clone()).collect();
    if !unmapped.is_empty() {
        return Err(Error::UnmappedLabels(unmapped.into_iter().collect()));
    }
    let mut counts = vec![0; map.classes.len()];
    let mut samples = Vec::with_capacity(manifest.len());
    for s in &manifest.samples {
        if let Some(Some(idx)) = map.lookup(&s.label) {
            counts[idx] += 1;
            samples.push(Sample { label: map.classes[idx].clone(), ..s.clone() });
        }
    }
    let dropped = manifest.len() - samples.len();
    let mut notes = manifest.notes.clone();
    notes.push(format!("regrouped into {:?}; {dropped} dropped", map.classes));
    Ok(Regrouped { manifest: Manifest { samples, class_names: map.classes.clone(), notes }, counts, dropped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApexStrategy {
    /// Use the annotated apex frame.
    Labeled,
    /// Use frame `floor(clip_len / 2)`.
    Middle,
}

pub fn apex_index(sample: &Sample, strategy: ApexStrategy) -> Result<usize> {
    match strategy {
        ApexStrategy::Labeled => {
            sample.apex.ok_or_else(|| Error::input("labeled apex strategy needs an apex index"))
        }
        ApexStrategy::Middle => match sample.clip_len {
            Some(n) if n > 0 => Ok(n / 2),
            _ => Err(Error::input("middle apex strategy needs a positive clip_len")),
        },
    }
}
