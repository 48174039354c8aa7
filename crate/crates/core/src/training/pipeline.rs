use std::fs;
use std::path::{Path, PathBuf};

use super::{run_stage, StagePreset, TrainLog};
use crate::data::{derive_seed, Manifest};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, LoadMode, Model, NetworkSpec};

/// Where a stage's starting weights come from.
#[derive(Clone, Debug, PartialEq)]
pub enum StageInit {
    /// Random initialisation from the stage seed.
    Fresh,
    /// The checkpoint saved by the previous stage.
    Previous(LoadMode),
    /// A user-supplied checkpoint.
    Checkpoint(PathBuf, LoadMode),
}

#[derive(Clone, Debug)]
pub struct Stage<'a> {
    pub name: String,
    pub init: StageInit,
    pub spec: NetworkSpec,
    pub train: &'a Manifest,
    pub val: Option<&'a Manifest>,
    pub preset: StagePreset,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub model: Model,
    pub logs: Vec<TrainLog>,
    /// Checkpoint written after each stage.
    pub checkpoints: Vec<PathBuf>,
}

fn stage_error(stage: usize, name: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| {
        if e.is_validation() {
            Error::Stage { stage, message: format!("{name}: {e}") }
        } else {
            e
        }
    }
}

fn check_plan(stages: &[Stage]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::config("pipeline has no stages"));
    }
    let mut upgrades = 0;
    for (i, s) in stages.iter().enumerate() {
        let fail = |m: String| Err(Error::Stage { stage: i, message: format!("{}: {m}", s.name) });
        let mode = match &s.init {
            StageInit::Fresh => None,
            StageInit::Previous(_) if i == 0 => return fail("the first stage has no previous checkpoint".into()),
            StageInit::Previous(m) | StageInit::Checkpoint(_, m) => Some(*m),
        };
        if mode == Some(LoadMode::Upgrade) {
            upgrades += 1;
            if upgrades > 1 {
                return fail("attention units may be injected only once".into());
            }
        }
        if s.name.is_empty() || s.name.contains(['/', '\\']) {
            return fail("stage names must be non-empty and free of path separators".into());
        }
        if let Err(e) = s.spec.validate().and_then(|_| s.preset.validate()) {
            return fail(e.to_string());
        }
    }
    Ok(())
}

/// Runs the stages in order, saving `stage<i>-<name>.ckpt` and
/// `stage<i>-<name>.log.tsv` under `out_dir` after each one.
pub fn transfer_pipeline(stages: &[Stage], out_dir: &Path) -> Result<PipelineOutput> {
    check_plan(stages)?;
    fs::create_dir_all(out_dir)?;
    let mut logs = Vec::with_capacity(stages.len());
    let mut checkpoints: Vec<PathBuf> = Vec::with_capacity(stages.len());
    let mut model = None;
    for (i, s) in stages.iter().enumerate() {
        let wrap = stage_error(i, &s.name);
        let start = match &s.init {
            StageInit::Fresh => Model::build(&s.spec, derive_seed(&[s.seed, 0x1417]))?,
            StageInit::Previous(mode) => load_checkpoint(&checkpoints[i - 1], &s.spec, *mode).map_err(&wrap)?,
            StageInit::Checkpoint(path, mode) => load_checkpoint(path, &s.spec, *mode).map_err(&wrap)?,
        };
        let (trained, log) = run_stage(start, s.train, s.val, &s.preset, s.seed).map_err(&wrap)?;
        let stem = format!("stage{i}-{}", s.name);
        let ckpt = out_dir.join(format!("{stem}.ckpt"));
        save_checkpoint(&trained, &ckpt)?;
        fs::write(out_dir.join(format!("{stem}.log.tsv")), log.to_tsv())?;
        checkpoints.push(ckpt);
        logs.push(log);
        model = Some(trained);
    }
    Ok(PipelineOutput { model: model.expect("at least one stage ran"), logs, checkpoints })
}
