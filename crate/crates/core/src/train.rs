//! Multi-stage training loop over mixed speech/text batches.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, mix_batch, PreparedSample, ShotPools, Shot, TrainingStage};
use crate::error::{Error, Result};
use crate::flow::{train_step, Adam, AdamConfig, StepStats};
use crate::model::checkpoint::Checkpoint;
use crate::model::{DiTModel, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: TrainingStage,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub stages: Vec<StagePlan>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            stages: curriculum_plan([200, 200, 200, 200], 0.8).expect("valid default curriculum"),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Parameter("at least one training stage is required".into()));
        }
        self.optimizer.validate()?;
        self.stages.iter().try_for_each(|s| s.stage.validate())
    }
}

/// Stage plans for the halving curriculum: a text-only stage 0 followed by
/// one stage per shot category, each mixing at `st2v_ratio`.
pub fn curriculum_plan(steps: [u64; 4], st2v_ratio: f64) -> Result<Vec<StagePlan>> {
    (0..4)
        .filter(|&k| steps[k] > 0)
        .map(|k| {
            Ok(StagePlan {
                stage: TrainingStage::curriculum(k, &Shot::ALL, st2v_ratio)?,
                steps: steps[k],
            })
        })
        .collect()
}

/// Model, optimizer and position in the schedule.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DiTModel,
    pub opt: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: ModelConfig, optimizer: AdamConfig) -> Result<Self> {
        optimizer.validate()?;
        let model = DiTModel::new(config)?;
        let opt = Adam::new(optimizer, model.params());
        Ok(Self { model, opt, step: 0 })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let params = self.model.params();
        let mut tensors: Vec<_> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.extend(self.opt.to_tensors(params));
        Checkpoint {
            config: self.model.config().clone(),
            step: self.step,
            tensors,
            extra,
        }
    }

    /// Restores parameters and, when present, optimizer moments.
    pub fn from_checkpoint(ck: &Checkpoint, optimizer: AdamConfig) -> Result<Self> {
        let mut state = Self::new(ck.config.clone(), optimizer)?;
        let params = state.model.params_mut();
        for i in 0..params.len() {
            let name = params.name(i).to_string();
            let t = ck
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != params.get(i).shape() {
                return Err(Error::Format(format!("parameter {name} has shape {:?}", t.shape())));
            }
            *params.get_mut(i) = t.clone();
        }
        if ck.get("adam.step").is_some() {
            state.opt = Adam::from_tensors(optimizer, state.model.params(), |n| ck.get(n).cloned())?;
        }
        state.step = ck.step;
        Ok(state)
    }
}

/// Rng for global step `step`, so a resumed run draws what an uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(data::sample_seed(seed, step as usize))
}

/// Runs the remaining steps of `cfg` from `state.step`. `on_step` sees every
/// step's statistics with its stage index; `on_stage_end` runs after each
/// completed stage.
pub fn run_training(
    state: &mut TrainState,
    cfg: &TrainConfig,
    st2v: &ShotPools,
    t2v: &[Arc<PreparedSample>],
    mut on_step: impl FnMut(u64, usize, &StepStats) -> Result<()>,
    mut on_stage_end: impl FnMut(usize, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let mut end = 0;
    for (k, plan) in cfg.stages.iter().enumerate() {
        let start = end;
        end += plan.steps;
        if state.step >= end {
            continue;
        }
        for step in state.step.max(start)..end {
            let mut rng = step_rng(cfg.seed, step);
            let batch = mix_batch(&mut rng, st2v, t2v, &plan.stage, cfg.batch_size)?;
            let stats = train_step(&mut state.model, &batch, &mut state.opt, &mut rng)?;
            state.step = step + 1;
            on_step(step, k, &stats)?;
        }
        on_stage_end(k, state)?;
    }
    Ok(())
}
