//! Optimisation: step learning-rate schedules, SGD with momentum and
//! coupled weight decay, per-protocol presets, single-stage training and the
//! staged transfer pipeline.

mod pipeline;
mod stage;

pub use pipeline::{transfer_pipeline, PipelineOutput, Stage, StageInit};
pub use stage::{batch_loss, predict_images, run_stage, train_step, EpochRecord, TrainLog};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multiplies the learning rate by `factor` every `step_epochs` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr0: f64,
    pub step_epochs: usize,
    pub factor: f64,
}

impl Schedule {
    pub fn new(lr0: f64, step_epochs: usize) -> Result<Self> {
        let s = Schedule { lr0, step_epochs, factor: 0.1 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("initial learning rate must be positive, got {}", self.lr0)));
        }
        if self.step_epochs == 0 {
            return Err(Error::config("schedule step must be at least one epoch"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::config(format!("schedule factor must lie in (0, 1), got {}", self.factor)));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`: `lr0 * factor^floor(epoch / step)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.factor.powi((epoch / self.step_epochs) as i32)
    }
}

pub fn lr_at(schedule: &Schedule, epoch: usize) -> f64 {
    schedule.lr_at(epoch)
}

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePreset {
    pub name: String,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_epochs: usize,
    pub augment: AugmentConfig,
    /// Oversample every class to the largest class before training.
    pub resample: bool,
    pub epochs: usize,
    /// Global L2 bound on the gradient of each step; `None` leaves it unclipped.
    pub grad_clip: Option<f64>,
}

pub const PRESET_NAMES: [&str; 4] = ["pretrain", "hde", "cde", "loso"];

/// Epoch count used when a preset is built without one.
pub const DEFAULT_EPOCHS: usize = 30;

impl StagePreset {
    /// Macro-expression pre-training: batch 50, lr 0.01 dropping every 20 epochs.
    pub fn pretrain() -> Self {
        StagePreset {
            name: "pretrain".into(),
            batch_size: 50,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            step_epochs: 20,
            augment: AugmentConfig::pretrain(),
            resample: false,
            epochs: DEFAULT_EPOCHS,
            grad_clip: None,
        }
    }

    pub fn hde() -> Self {
        StagePreset {
            name: "hde".into(),
            batch_size: 10,
            lr0: 1e-4,
            weight_decay: 3e-2,
            step_epochs: 10,
            augment: AugmentConfig::hde(),
            resample: true,
            ..Self::pretrain()
        }
    }

    pub fn cde() -> Self {
        StagePreset {
            name: "cde".into(),
            batch_size: 8,
            lr0: 1e-3,
            weight_decay: 5e-6,
            step_epochs: 10,
            augment: AugmentConfig::cde((224, 224)),
            resample: true,
            ..Self::pretrain()
        }
    }

    pub fn loso() -> Self {
        StagePreset {
            name: "loso".into(),
            batch_size: 10,
            lr0: 1e-3,
            weight_decay: 5e-4,
            step_epochs: 10,
            augment: AugmentConfig::loso((224, 224)),
            resample: true,
            ..Self::pretrain()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pretrain" => Ok(Self::pretrain()),
            "hde" => Ok(Self::hde()),
            "cde" => Ok(Self::cde()),
            "loso" => Ok(Self::loso()),
            other => Err(Error::config(format!("unknown preset `{other}`, expected one of {PRESET_NAMES:?}"))),
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    /// Rescales corner cropping to square inputs of `size` pixels, keeping
    /// the output at `size`.
    pub fn for_input(mut self, size: u32) -> Self {
        if let Some(c) = &mut self.augment.corner_crop {
            *c = crate::data::CornerCrop::scaled(size);
        }
        self
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { lr0: self.lr0, step_epochs: self.step_epochs, factor: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("gradient clip must be positive, got {c}")));
            }
        }
        self.augment.validate()
    }
}

/// Velocity buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Tensor>,
}

impl OptimState {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        OptimState {
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape()).expect("parameter shape is valid")).collect(),
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm` and returns
/// the norm before rescaling. Non-finite norms are left for [`sgd_step`] to
/// reject.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// One heavy-ball step with coupled L2 decay:
/// `g' = g + wd * p`, `v = momentum * v + g'`, `p -= lr * v`.
///
/// Nothing is modified when any gradient is non-finite.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::input(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::input(format!(
                "parameter {i}: shape {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i} is {} at element {j}", g.data()[j])));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_step(p: &mut Tensor, g: f64, state: &mut OptimState, lr: f64, m: f64, wd: f64) {
        let grad = Tensor::full(p.shape(), g).unwrap();
        sgd_step(&mut [p], &[grad], state, lr, m, wd).unwrap();
    }

    #[test]
    fn schedule_boundaries() {
        let s = StagePreset::pretrain().schedule();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(19), 0.01);
        assert!((s.lr_at(20) - 0.001).abs() < 1e-18);
        let loso = StagePreset::loso().schedule();
        assert!((loso.lr_at(25) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn preset_table() {
        let rows = [
            (StagePreset::pretrain(), 50, 0.01, 0.0, 20),
            (StagePreset::hde(), 10, 1e-4, 3e-2, 10),
            (StagePreset::cde(), 8, 1e-3, 5e-6, 10),
            (StagePreset::loso(), 10, 1e-3, 5e-4, 10),
        ];
        for (p, batch, lr, wd, step) in rows {
            assert_eq!((p.batch_size, p.lr0, p.weight_decay, p.step_epochs, p.momentum), (batch, lr, wd, step, 0.9));
            p.validate().unwrap();
            assert_eq!(StagePreset::by_name(&p.name).unwrap(), p);
        }
        assert!(StagePreset::by_name("imagenet").is_err());
    }

    #[test]
    fn invalid_schedules() {
        assert!(Schedule::new(0.0, 10).is_err());
        assert!(Schedule::new(0.1, 0).is_err());
        assert!(Schedule { lr0: 0.1, step_epochs: 1, factor: 1.0 }.validate().is_err());
    }

    #[test]
    fn hand_iterated_momentum() {
        let mut p = Tensor::scalar(1.0);
        let mut state = OptimState::zeros_like([&p]);
        scalar_step(&mut p, 1.0, &mut state, 0.1, 0.9, 0.0);
        assert_eq!(p.data()[0], 0.9);
        assert_eq!(state.velocity[0].data()[0], 1.0);
        scalar_step(&mut p, 1.0, &mut state, 0.1, 0.9, 0.0);
        assert_eq!(state.velocity[0].data()[0], 1.9);
        assert!((p.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn pure_decay_and_fixed_point() {
        let mut p = Tensor::scalar(1.0);
        let mut state = OptimState::zeros_like([&p]);
        scalar_step(&mut p, 0.0, &mut state, 1.0, 0.0, 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-15);

        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut state = OptimState::zeros_like([&p]);
        scalar_step(&mut p, 0.0, &mut state, 0.5, 0.9, 0.0);
        assert_eq!(p.data(), [1.0, -2.0, 3.0]);
        assert_eq!(state.velocity[0].data(), [0.0; 3]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let mut state = OptimState::zeros_like([&a, &b]);
        let grads = [Tensor::scalar(1.0), Tensor::scalar(f64::NAN)];
        let err = sgd_step(&mut [&mut a, &mut b], &grads, &mut state, 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("parameter 1")));
        assert_eq!((a.data()[0], b.data()[0]), (1.0, 2.0));
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        // joint norm of (3, 4) and (12) is 13
        let mut g = vec![Tensor::new(&[2], vec![3.0, 4.0]).unwrap(), Tensor::scalar(12.0)];
        assert_eq!(clip_grad_norm(&mut g, 26.0), 13.0);
        assert_eq!(g[0].data(), [3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.3), 13.0);
        assert!((g[0].data()[0] - 0.3).abs() < 1e-15 && (g[1].data()[0] - 1.2).abs() < 1e-15);
        let mut bad = vec![Tensor::scalar(f64::NAN)];
        assert!(clip_grad_norm(&mut bad, 1.0).is_nan());
        assert!(StagePreset { grad_clip: Some(0.0), ..StagePreset::loso() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn lr_is_stepwise_non_increasing(lr0 in 1e-6f64..1.0, step in 1usize..30, epoch in 0usize..200) {
            let s = Schedule::new(lr0, step).unwrap();
            prop_assert!(s.lr_at(epoch + 1) <= s.lr_at(epoch));
            prop_assert_eq!(s.lr_at(epoch), s.lr_at(epoch / step * step));
        }

        #[test]
        fn zero_lr_keeps_params(vals in prop::collection::vec(-5.0f64..5.0, 1..8), g in -3.0f64..3.0,
                                m in 0.0f64..0.99, wd in 0.0f64..0.1) {
            let mut p = Tensor::new(&[vals.len()], vals.clone()).unwrap();
            let mut state = OptimState::zeros_like([&p]);
            scalar_step(&mut p, g, &mut state, 0.0, m, wd);
            prop_assert_eq!(p.data(), &vals[..]);
        }
    }
}
