use std::fmt::Write as _;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{clip_grad_norm, sgd_step, OptimState, StagePreset};
use crate::data::{augment, balance_indices, derive_seed, image_to_tensor, Manifest};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Tape, Tensor};

const EVAL_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Per-epoch history of one stage. `initial_val_accuracy` is measured
/// before the first update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub stage: String,
    pub initial_val_accuracy: Option<f64>,
    pub epochs: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

impl TrainLog {
    /// Tab-separated table; the `init` row holds the pre-training validation
    /// accuracy. Floats use the shortest exact representation.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tlr\ttrain_loss\tval_accuracy\n");
        let _ = writeln!(out, "init\t-\t-\t{}", opt(self.initial_val_accuracy));
        for r in &self.epochs {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.epoch, r.lr, r.train_loss, opt(r.val_accuracy));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.train_loss)
    }
}

/// Mean cross-entropy of `model` on a batch, without updating anything.
pub fn batch_loss(model: &Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let fwd = model.forward_on(&mut tape, &bound, xv)?;
    let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// One SGD update on a batch; returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    state: &mut OptimState,
    x: &Tensor,
    labels: &[usize],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let fwd = model.forward_on(&mut tape, &bound, xv)?;
    let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    let mut grads: Vec<Tensor> = bound.iter().map(|&v| grads.get(v)).collect();
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    sgd_step(&mut model.params_mut(), &grads, state, lr, momentum, weight_decay)?;
    Ok(value)
}

/// Predicted class of every image, evaluated in fixed-size chunks.
pub fn predict_images(model: &Model, images: &[RgbImage]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let items: Vec<Tensor> = chunk.iter().map(image_to_tensor).collect();
        out.extend(model.predict(&Tensor::stack(&items)?)?);
    }
    Ok(out)
}

fn accuracy(model: &Model, images: &[RgbImage], labels: &[usize]) -> Result<f64> {
    let pred = predict_images(model, images)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

fn checked_labels(manifest: &Manifest, model: &Model, role: &str) -> Result<Vec<usize>> {
    let classes = model.spec().num_classes;
    if manifest.class_names.len() != classes {
        return Err(Error::config(format!(
            "{role} set has {} classes, model has {classes}",
            manifest.class_names.len()
        )));
    }
    manifest.labels()
}

/// Trains `model` for `preset.epochs` epochs and returns the final model.
///
/// Epoch `e` visits the (optionally class-balanced) training list in an
/// order drawn from `(seed, e)`; the sample at position `i` is augmented
/// with draws from `(seed, e, i)`.
pub fn run_stage(
    mut model: Model,
    train: &Manifest,
    val: Option<&Manifest>,
    preset: &StagePreset,
    seed: u64,
) -> Result<(Model, TrainLog)> {
    preset.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let labels = checked_labels(train, &model, "training")?;
    let order = if preset.resample {
        balance_indices(&labels, model.spec().num_classes)?
    } else {
        (0..labels.len()).collect()
    };
    if preset.batch_size > order.len() {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} training samples",
            preset.batch_size,
            order.len()
        )));
    }
    let images = train.load_images()?;
    let val_data = match val {
        Some(v) if !v.is_empty() => Some((v.load_images()?, checked_labels(v, &model, "validation")?)),
        _ => None,
    };
    let validate = |m: &Model| -> Result<Option<f64>> {
        val_data.as_ref().map(|(imgs, labels)| accuracy(m, imgs, labels)).transpose()
    };

    let schedule = preset.schedule();
    let mut log = TrainLog { stage: preset.name.clone(), initial_val_accuracy: validate(&model)?, epochs: vec![] };
    let mut state = OptimState::zeros_like(model.params().into_iter().map(|(_, t)| t));
    for epoch in 0..preset.epochs {
        let lr = schedule.lr_at(epoch);
        let mut visit = order.clone();
        visit.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64])));
        let mut total = 0.0;
        for (b, batch) in visit.chunks(preset.batch_size).enumerate() {
            let mut items = Vec::with_capacity(batch.len());
            for (j, &idx) in batch.iter().enumerate() {
                let pos = (b * preset.batch_size + j) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, pos]));
                items.push(image_to_tensor(&augment(&images[idx], &preset.augment, &mut rng)?));
            }
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = Tensor::stack(&items)?;
            let loss = train_step(&mut model, &mut state, &x, &y, lr, preset.momentum, preset.weight_decay, preset.grad_clip)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            total += loss * batch.len() as f64;
        }
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: total / visit.len() as f64,
            val_accuracy: validate(&model)?,
        });
    }
    Ok((model, log))
}
