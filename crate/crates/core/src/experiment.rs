//! End-to-end protocol runs: optional plain pre-training, then per fold an
//! attention upgrade and fine-tuning, then pooled evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::data::{derive_seed, image_to_tensor, Manifest, Quadrant};
use crate::error::{Error, Result};
use crate::eval::{aggregate, folds_hde, folds_loso, FoldPredictions, Folds, Report};
use crate::model::{LoadMode, Model, NetworkSpec};
use crate::tensor::Tensor;
use crate::training::{predict_images, transfer_pipeline, Stage, StageInit, StagePreset, TrainLog};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Train on one database, test on the other, and the reverse.
    Hde { db_a: String, db_b: String },
    /// Leave-one-subject-out over two pooled databases.
    Cde,
    /// Leave-one-subject-out within one database.
    Loso,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Hde { .. } => "hde",
            Protocol::Cde => "cde",
            Protocol::Loso => "loso",
        }
    }

    pub fn folds(&self, manifest: &Manifest) -> Result<Folds> {
        match self {
            Protocol::Hde { db_a, db_b } => folds_hde(manifest, db_a, db_b),
            Protocol::Cde | Protocol::Loso => folds_loso(manifest),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretraining<'a> {
    pub train: &'a Manifest,
    pub preset: StagePreset,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig<'a> {
    /// Attention network used for fine-tuning; pre-training uses its plain form.
    pub spec: NetworkSpec,
    pub pretrain: Option<Pretraining<'a>>,
    /// Starting checkpoint of the plain network instead of pre-training here.
    pub init_checkpoint: Option<PathBuf>,
    pub finetune: StagePreset,
    pub seed: u64,
}

/// Localisation of the last block's attention map on one test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationRecord {
    pub fold: String,
    pub index: usize,
    pub correct: bool,
    /// `None` when the map is zero everywhere.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub report: Report,
    pub pretrain_log: Option<TrainLog>,
    pub fold_logs: Vec<(String, TrainLog)>,
    pub localization: Vec<LocalizationRecord>,
}

impl ExperimentOutput {
    /// Fraction of correctly classified samples whose score exceeds 1.
    pub fn localized_fraction(&self) -> Option<f64> {
        let correct: Vec<&LocalizationRecord> = self.localization.iter().filter(|r| r.correct).collect();
        if correct.is_empty() {
            return None;
        }
        Some(correct.iter().filter(|r| r.score.is_some_and(|s| s > 1.0)).count() as f64 / correct.len() as f64)
    }
}

/// Mean `|M|` inside `quadrant` divided by mean `|M|` outside it, for a
/// single-channel map `[1, 1, H, W]` or `[H, W]`.
pub fn localization_score(map: &Tensor, quadrant: Quadrant) -> Result<Option<f64>> {
    let (h, w) = match *map.shape() {
        [1, 1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::input(format!("expected one single-channel map, got {:?}", map.shape()))),
    };
    if h < 2 || w < 2 {
        return Err(Error::input("map needs at least 2x2 pixels to have an outside region"));
    }
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let v = map.data()[y * w + x].abs();
            if quadrant.contains(x, y, w, h) {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
    }
    let (inside, outside) = (inside / n_in as f64, outside / n_out as f64);
    Ok(match (inside > 0.0, outside > 0.0) {
        (_, true) => Some(inside / outside),
        (true, false) => Some(f64::INFINITY),
        (false, false) => None,
    })
}

fn dir_name(tag: &str) -> String {
    tag.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn localize(model: &Model, images: &[RgbImage], manifest: &Manifest, fold: &str, test: &[usize],
            predicted: &[usize], actual: &[usize]) -> Result<Vec<LocalizationRecord>> {
    let mut out = Vec::new();
    for (k, &i) in test.iter().enumerate() {
        let Some(q) = manifest.samples[i].signal_quadrant else { continue };
        let readout = model.readout(&image_to_tensor(&images[k]))?;
        let score = match readout.maps.last() {
            Some(map) => localization_score(map, q)?,
            None => None,
        };
        out.push(LocalizationRecord { fold: fold.to_string(), index: i, correct: predicted[k] == actual[k], score });
    }
    Ok(out)
}

/// Runs `protocol` on `manifest` and writes checkpoints, logs and reports
/// under `out_dir`:
///
/// ```text
/// pretrain/stage0-pretrain.{ckpt,log.tsv}
/// folds/<tag>/stage0-finetune.{ckpt,log.tsv}
/// report.txt  report.json  confusion_pct.tsv  [localization.tsv]
/// ```
pub fn run_experiment(
    protocol: &Protocol,
    manifest: &Manifest,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentOutput> {
    if !cfg.spec.attention {
        return Err(Error::config("fine-tuning network must have attention units"));
    }
    if cfg.pretrain.is_some() && cfg.init_checkpoint.is_some() {
        return Err(Error::config("choose either pre-training or an initial checkpoint, not both"));
    }
    if manifest.class_names.len() != cfg.spec.num_classes {
        return Err(Error::config(format!(
            "manifest has {} classes, network has {}",
            manifest.class_names.len(),
            cfg.spec.num_classes
        )));
    }
    let folds = protocol.folds(manifest)?;
    fs::create_dir_all(out_dir)?;

    let mut pretrain_log = None;
    let plain_checkpoint = match (&cfg.pretrain, &cfg.init_checkpoint) {
        (Some(p), _) => {
            let stage = Stage {
                name: "pretrain".into(),
                init: StageInit::Fresh,
                spec: cfg.spec.plain(),
                train: p.train,
                val: None,
                preset: p.preset.clone(),
                seed: derive_seed(&[cfg.seed, 1]),
            };
            let out = transfer_pipeline(&[stage], &out_dir.join("pretrain"))?;
            pretrain_log = out.logs.into_iter().next();
            out.checkpoints.into_iter().next()
        }
        (None, Some(path)) => Some(path.clone()),
        (None, None) => None,
    };
    let init = match &plain_checkpoint {
        Some(path) => StageInit::Checkpoint(path.clone(), LoadMode::Upgrade),
        None => StageInit::Fresh,
    };

    let labels = manifest.labels()?;
    let mut predictions = Vec::with_capacity(folds.folds.len());
    let mut fold_logs = Vec::with_capacity(folds.folds.len());
    let mut localization = Vec::new();
    for (k, fold) in folds.folds.iter().enumerate() {
        let train = manifest.subset(&fold.train);
        let test = manifest.subset(&fold.test);
        let stage = Stage {
            name: "finetune".into(),
            init: init.clone(),
            spec: cfg.spec.clone(),
            train: &train,
            val: Some(&test),
            preset: cfg.finetune.clone(),
            seed: derive_seed(&[cfg.seed, 2, k as u64]),
        };
        let out = transfer_pipeline(&[stage], &out_dir.join("folds").join(dir_name(&fold.tag)))?;
        let images = test.load_images()?;
        let predicted = predict_images(&out.model, &images)?;
        let actual: Vec<usize> = fold.test.iter().map(|&i| labels[i]).collect();
        localization.extend(localize(&out.model, &images, manifest, &fold.tag, &fold.test, &predicted, &actual)?);
        fold_logs.push((fold.tag.clone(), out.logs.into_iter().next().expect("one stage")));
        predictions.push(FoldPredictions { tag: fold.tag.clone(), actual, predicted });
    }

    let mut report = aggregate(protocol.name(), &manifest.class_names, &folds.folds, &predictions)?;
    report.notes = folds.warnings.clone();
    let mut output = ExperimentOutput { report, pretrain_log, fold_logs, localization };
    if let Some(frac) = output.localized_fraction() {
        output.report.notes.push(format!("localization score above 1 for {frac} of correctly classified samples"));
    }
    write_outputs(&output, out_dir)?;
    Ok(output)
}

fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::write(dir.join("report.txt"), out.report.to_text())?;
    fs::write(dir.join("report.json"), out.report.to_json())?;
    fs::write(dir.join("confusion_pct.tsv"), out.report.percentage_table())?;
    if !out.localization.is_empty() {
        let mut text = String::from("fold\tindex\tcorrect\tscore\n");
        for r in &out.localization {
            let score = r.score.map_or_else(|| "-".into(), |s| s.to_string());
            text.push_str(&format!("{}\t{}\t{}\t{score}\n", r.fold, r.index, r.correct));
        }
        fs::write(dir.join("localization.tsv"), text)?;
    }
    Ok(())
}
