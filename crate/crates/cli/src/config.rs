use std::path::{Path, PathBuf};

use mocha_core::data::{Shot, SyntheticSample};
use mocha_core::flow::SamplerConfig;
use mocha_core::model::ModelConfig;
use mocha_core::train::TrainConfig;
use mocha_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Everything `train` needs; parsed from JSON with defaults for absent fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    /// Dataset written by `gen-data`.
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    pub out: Option<PathBuf>,
    /// Require the schedule to open with a text-only stage.
    pub curriculum: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            data: None,
            out: None,
            curriculum: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.sampler.n_steps == 0 {
            return Err(Error::Parameter("sampler.n_steps must be positive".into()));
        }
        if self.curriculum && self.train.stages[0].stage.st2v_ratio != 0.0 {
            return Err(Error::Parameter(
                "curriculum mode needs a first stage with st2v_ratio 0".into(),
            ));
        }
        Ok(())
    }

    /// Dataset and output paths, both required before training starts.
    pub fn paths(&self) -> Result<(&Path, &Path)> {
        let data = self
            .data
            .as_deref()
            .ok_or_else(|| Error::Parameter("no dataset path (set \"data\" or pass --data)".into()))?;
        if !data.is_file() {
            return Err(Error::Data(format!("dataset {} does not exist", data.display())));
        }
        let out = self
            .out
            .as_deref()
            .ok_or_else(|| Error::Parameter("no output directory (set \"out\" or pass --out)".into()))?;
        Ok((data, out))
    }

    /// Checks that the dataset matches the model grid and covers every
    /// category a stage draws speech samples from.
    pub fn check_dataset(&self, samples: &[SyntheticSample]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let m = &self.model;
        for (i, s) in samples.iter().enumerate() {
            let grid = (s.video.num_frames(), s.video.height(), s.video.width());
            if grid != (m.frames, m.height, m.width) {
                return Err(Error::Shape(format!(
                    "record {i} has grid {grid:?}, model expects {:?}",
                    (m.frames, m.height, m.width)
                )));
            }
        }
        for plan in &self.train.stages {
            if plan.stage.st2v_ratio == 0.0 {
                continue;
            }
            for (shot, &w) in &plan.stage.category_weights {
                if w > 0.0 && !samples.iter().any(|s| s.spec.speech && s.shot() == *shot) {
                    return Err(Error::Data(format!(
                        "stage {} weights category {shot} but the dataset has no speech samples of it",
                        plan.stage.stage_id
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// `dir/name.config.json` beside an output file `dir/name.ext`.
pub fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.config.json"))
}

/// Effective `gen-data` settings echoed beside the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataEcho {
    pub n: usize,
    pub seed: u64,
    pub shot: Option<Shot>,
    pub clips: Option<usize>,
    pub characters: Option<usize>,
    pub data: mocha_core::data::DataConfig,
}
