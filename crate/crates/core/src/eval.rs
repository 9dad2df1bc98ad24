//! Lip-sync proxies on the synthetic mouth channel and the ablation driver.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{unpatchify, RawVideo, VideoLatent};
use crate::data::{self, mouth_trace, DataConfig, PreparedSample, SyntheticSample};
use crate::error::{Error, Result};
use crate::flow::{self, fm_loss, AdamConfig, FlowSample, SamplerConfig, VelocityModel};
use crate::model::{AudioSource, Condition, DiTModel, ModelConfig};
use crate::tensor::{Graph, Tensor};
use crate::train::{curriculum_plan, run_training, TrainConfig, TrainState};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Zero-mean, unit population variance copy of `xs`.
pub fn z_normalize(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.len() < 2 {
        return Err(Error::DegenerateTrace(format!("{} samples", xs.len())));
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    if !(var > 1e-24) {
        return Err(Error::DegenerateTrace(format!("variance {var:e}")));
    }
    let sd = var.sqrt();
    Ok(xs.iter().map(|x| (x - m) / sd).collect())
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("traces of length {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Pearson correlation of two traces.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let (za, zb) = (z_normalize(a)?, z_normalize(b)?);
    let c = za.iter().zip(&zb).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64;
    Ok(c.clamp(-1.0, 1.0))
}

/// RMSE between z-normalized traces; equals `sqrt(2(1 − c))`.
pub fn normalized_rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let (za, zb) = (z_normalize(a)?, z_normalize(b)?);
    Ok((za.iter().zip(&zb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt())
}

fn generated_trace(generated: &RawVideo, sample: &SyntheticSample) -> Result<Vec<f64>> {
    let want = sample.video.frames.shape();
    if generated.frames.shape() != want {
        return Err(Error::Shape(format!(
            "generated video {:?} does not match the sample grid {want:?}",
            generated.frames.shape()
        )));
    }
    Ok(mouth_trace(generated, sample.spec.shot, sample.spec.n_characters))
}

/// Correlation of the generated mouth trace with the sample's speech envelope.
pub fn sync_c_proxy(generated: &RawVideo, sample: &SyntheticSample) -> Result<f64> {
    pearson(&generated_trace(generated, sample)?, sample.sync_signal.data())
}

pub fn sync_d_proxy(generated: &RawVideo, sample: &SyntheticSample) -> Result<f64> {
    normalized_rmse(&generated_trace(generated, sample)?, sample.sync_signal.data())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSync {
    pub clip: usize,
    /// `None` when either trace is constant over the clip.
    pub sync_c: Option<f64>,
    pub sync_d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub sync_c_proxy: f64,
    pub sync_d_proxy: f64,
    pub n_frames: usize,
    pub per_clip: Vec<ClipSync>,
}

pub fn sync_report(generated: &RawVideo, sample: &SyntheticSample) -> Result<SyncReport> {
    let g = generated_trace(generated, sample)?;
    let s = sample.sync_signal.data();
    let per_clip = sample
        .clip_bounds()
        .into_iter()
        .enumerate()
        .map(|(clip, (a, b))| ClipSync {
            clip: clip + 1,
            sync_c: pearson(&g[a..b], &s[a..b]).ok(),
            sync_d: normalized_rmse(&g[a..b], &s[a..b]).ok(),
        })
        .collect();
    Ok(SyncReport {
        sync_c_proxy: pearson(&g, s)?,
        sync_d_proxy: normalized_rmse(&g, s)?,
        n_frames: s.len(),
        per_clip,
    })
}

/// Decodes a model-space latent back to frames.
pub fn decode(latent: &Tensor, r: usize, p: usize, frame_rate: f64) -> Result<RawVideo> {
    unpatchify(&VideoLatent::new(latent.clone(), r, p)?, frame_rate)
}

/// Mean flow-matching loss over a fixed grid of times and noise draws.
pub fn eval_loss<M: VelocityModel + ?Sized>(
    model: &M,
    samples: &[Arc<PreparedSample>],
    with_audio: bool,
    times: &[f64],
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(data::sample_seed(seed, i));
        let cond = s.condition(with_audio);
        for &t in times {
            let fs = FlowSample::at(&s.x1, Tensor::randn(s.x1.shape(), &mut rng), t)?;
            let mut g = Graph::new();
            let xt = g.constant(fs.xt.clone());
            let pred = model.predict(&mut g, xt, &cond, t)?;
            total += fm_loss(g.value(pred), &fs.v_target)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Evaluation("no samples to evaluate".into()));
    }
    Ok(total / n as f64)
}

pub const EVAL_TIMES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Samples a video for `s` and scores it against the ground truth.
pub fn sample_and_score(
    model: &DiTModel,
    s: &SyntheticSample,
    prepared: &PreparedSample,
    sampler: &SamplerConfig,
) -> Result<SyncReport> {
    let c = model.config();
    let latent = flow::sample(model, &prepared.condition(true), sampler)?;
    let video = decode(&latent, c.r, c.p, s.video.frame_rate)?;
    sync_report(&video, s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Dense audio attention.
    NoWindow,
    /// Speech samples only, no text-only stage.
    NoJoint,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoWindow => "no_window",
            Variant::NoJoint => "no_joint",
        })
    }
}

/// A direction check over variant medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Assertion {
    /// `median sync_c(a) ≥ median sync_c(b) + margin`.
    SyncCGreater { a: Variant, b: Variant, margin: f64 },
    /// `median sync_d(a) < median sync_d(b)`.
    SyncDLess { a: Variant, b: Variant },
    /// `median held-out text-only loss(a) < that of b`.
    T2vLossLess { a: Variant, b: Variant },
    /// Every seed of `a` sampled finite output without audio.
    NoAudioFinite { a: Variant },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub data: DataConfig,
    pub n_samples: usize,
    pub data_seed: u64,
    /// Fraction of samples, taken from the end in seed order, held out.
    pub holdout: f64,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    /// Steps for curriculum stages 0 to 3.
    pub stage_steps: [u64; 4],
    pub st2v_ratio: f64,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Held-out samples scored for sync.
    pub n_eval: usize,
    pub sampler_steps: usize,
    pub assertions: Vec<Assertion>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let data = DataConfig {
            frames: 32,
            height: 8,
            width: 8,
            ..DataConfig::default()
        };
        Self {
            data,
            n_samples: 2000,
            data_seed: 7,
            holdout: 0.2,
            model: ModelConfig {
                d_model: 32,
                n_heads: 4,
                n_blocks: 2,
                r: 4,
                p: 4,
                frames: data.frames,
                height: data.height,
                width: data.width,
                audio_dim: 16,
                vocab: 128,
                ..ModelConfig::default()
            },
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            batch_size: 8,
            stage_steps: [600, 800, 800, 800],
            st2v_ratio: 0.8,
            seeds: vec![1, 2, 3, 4, 5],
            variants: vec![Variant::Full, Variant::NoWindow, Variant::NoJoint],
            n_eval: 24,
            sampler_steps: 10,
            assertions: vec![
                Assertion::SyncCGreater {
                    a: Variant::Full,
                    b: Variant::NoWindow,
                    margin: 0.05,
                },
                Assertion::SyncDLess {
                    a: Variant::Full,
                    b: Variant::NoWindow,
                },
                Assertion::T2vLossLess {
                    a: Variant::Full,
                    b: Variant::NoJoint,
                },
                Assertion::NoAudioFinite { a: Variant::Full },
            ],
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        let m = &self.model;
        if (m.frames, m.height, m.width) != (self.data.frames, self.data.height, self.data.width) {
            return Err(Error::Parameter("model and data frame grids differ".into()));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Parameter(format!("holdout {} outside (0, 1)", self.holdout)));
        }
        if self.seeds.is_empty() || self.variants.is_empty() || self.batch_size == 0 || self.sampler_steps == 0 {
            return Err(Error::Parameter("seeds, variants, batch_size and sampler_steps must be non-empty".into()));
        }
        let held = self.n_samples - self.split_index();
        if self.split_index() == 0 || held == 0 || self.n_eval == 0 || self.n_eval > held {
            return Err(Error::Parameter(format!(
                "{} samples with holdout {} leave no room for {} evaluation samples",
                self.n_samples, self.holdout, self.n_eval
            )));
        }
        Ok(())
    }

    /// Index of the first held-out sample.
    pub fn split_index(&self) -> usize {
        ((self.n_samples as f64) * (1.0 - self.holdout)).round() as usize
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> Result<(ModelConfig, TrainConfig)> {
        let mut model = ModelConfig {
            seed,
            ..self.model.clone()
        };
        let stages = match variant {
            Variant::Full => curriculum_plan(self.stage_steps, self.st2v_ratio)?,
            Variant::NoWindow => {
                model.windowed_audio = false;
                curriculum_plan(self.stage_steps, self.st2v_ratio)?
            }
            Variant::NoJoint => {
                let s = self.stage_steps;
                curriculum_plan([0, s[0] + s[1], s[2], s[3]], 1.0)?
            }
        };
        let train = TrainConfig {
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
            stages,
        };
        Ok((model, train))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub sync_c: f64,
    pub sync_d: f64,
    pub t2v_loss: f64,
    pub st2v_loss: f64,
    pub final_train_loss: f64,
    pub no_audio_finite: bool,
    /// Set when training or evaluation failed; the numbers are then NaN.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub per_seed: Vec<SeedResult>,
    pub median_sync_c: f64,
    pub median_sync_d: f64,
    pub median_t2v_loss: f64,
    pub median_st2v_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub assertion: Assertion,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub variants: BTreeMap<Variant, VariantReport>,
    pub checks: Vec<CheckResult>,
}

impl AblationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Median ignoring NaN entries; NaN when none remain.
pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Generated corpus with its train/held-out split.
pub struct AblationData {
    pub samples: Vec<SyntheticSample>,
    pub prepared: Vec<Arc<PreparedSample>>,
    pub split: usize,
    pub hash: String,
}

impl AblationData {
    pub fn generate(cfg: &AblationConfig) -> Result<Self> {
        cfg.validate()?;
        let samples = data::gen_corpus(cfg.n_samples, cfg.data_seed, &cfg.data, data::corpus_spec)?;
        Self::from_samples(cfg, samples)
    }

    pub fn from_samples(cfg: &AblationConfig, samples: Vec<SyntheticSample>) -> Result<Self> {
        let mut bytes = Vec::new();
        data::write_dataset_to(&samples, &mut bytes)?;
        let m = &cfg.model;
        let prepared = samples
            .iter()
            .map(|s| data::prepare(s, m.r, m.p, m.audio_dim, m.vocab).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            split: cfg.split_index().min(samples.len()),
            samples,
            prepared,
            hash: sha256_hex(&bytes),
        })
    }

    pub fn train(&self) -> &[Arc<PreparedSample>] {
        &self.prepared[..self.split]
    }

    pub fn held_out(&self) -> &[Arc<PreparedSample>] {
        &self.prepared[self.split..]
    }
}

/// Trains and evaluates one variant at one seed.
pub fn run_variant(
    cfg: &AblationConfig,
    data: &AblationData,
    variant: Variant,
    seed: u64,
    mut progress: impl FnMut(u64, f64),
) -> SeedResult {
    let failed = |e: Error| SeedResult {
        seed,
        sync_c: f64::NAN,
        sync_d: f64::NAN,
        t2v_loss: f64::NAN,
        st2v_loss: f64::NAN,
        final_train_loss: f64::NAN,
        no_audio_finite: false,
        failure: Some(format!("{}: {e}", e.code())),
    };
    let mut run = || -> Result<SeedResult> {
        let (model_cfg, train_cfg) = cfg.train_config(variant, seed)?;
        let mut state = TrainState::new(model_cfg, train_cfg.optimizer)?;
        let train = data.train();
        let pools = data::pools_by_shot(train);
        let mut last = f64::NAN;
        run_training(
            &mut state,
            &train_cfg,
            &pools,
            train,
            |step, _, s| {
                last = s.loss;
                progress(step, s.loss);
                Ok(())
            },
            |_, _| Ok(()),
        )?;
        let model = &state.model;
        let held = data.held_out();
        let t2v_loss = eval_loss(model, held, false, &EVAL_TIMES, cfg.data_seed)?;
        let st2v_loss = eval_loss(model, held, true, &EVAL_TIMES, cfg.data_seed)?;
        let (mut cs, mut ds) = (Vec::new(), Vec::new());
        let mut no_audio_finite = true;
        for i in 0..cfg.n_eval {
            let idx = data.split + i;
            let sampler = SamplerConfig {
                n_steps: cfg.sampler_steps,
                seed: data::sample_seed(cfg.data_seed ^ 0xe7a1, i),
            };
            let r = sample_and_score(model, &data.samples[idx], &data.prepared[idx], &sampler)?;
            cs.push(r.sync_c_proxy);
            ds.push(r.sync_d_proxy);
            if i < 4 {
                let cond = Condition {
                    audio: AudioSource::Zero,
                    ..data.prepared[idx].condition(false)
                };
                no_audio_finite &= flow::sample(model, &cond, &sampler).is_ok_and(|x| x.is_finite());
            }
        }
        Ok(SeedResult {
            seed,
            sync_c: mean(&cs),
            sync_d: mean(&ds),
            t2v_loss,
            st2v_loss,
            final_train_loss: last,
            no_audio_finite,
            failure: None,
        })
    };
    run().unwrap_or_else(failed)
}

fn check(a: &Assertion, variants: &BTreeMap<Variant, VariantReport>) -> CheckResult {
    let get = |v: &Variant| variants.get(v);
    let (passed, detail) = match a {
        Assertion::SyncCGreater { a: x, b: y, margin } => match (get(x), get(y)) {
            (Some(p), Some(q)) => (
                p.median_sync_c >= q.median_sync_c + margin,
                format!("sync_c {x} {:.4} vs {y} {:.4} (margin {margin})", p.median_sync_c, q.median_sync_c),
            ),
            _ => (false, "variant missing from the run".into()),
        },
        Assertion::SyncDLess { a: x, b: y } => match (get(x), get(y)) {
            (Some(p), Some(q)) => (
                p.median_sync_d < q.median_sync_d,
                format!("sync_d {x} {:.4} vs {y} {:.4}", p.median_sync_d, q.median_sync_d),
            ),
            _ => (false, "variant missing from the run".into()),
        },
        Assertion::T2vLossLess { a: x, b: y } => match (get(x), get(y)) {
            (Some(p), Some(q)) => (
                p.median_t2v_loss < q.median_t2v_loss,
                format!("t2v loss {x} {:.5} vs {y} {:.5}", p.median_t2v_loss, q.median_t2v_loss),
            ),
            _ => (false, "variant missing from the run".into()),
        },
        Assertion::NoAudioFinite { a: x } => match get(x) {
            Some(p) => (
                p.per_seed.iter().all(|s| s.no_audio_finite),
                format!("{x}: {} of {} seeds finite", p.per_seed.iter().filter(|s| s.no_audio_finite).count(), p.per_seed.len()),
            ),
            None => (false, "variant missing from the run".into()),
        },
    };
    CheckResult {
        assertion: a.clone(),
        passed,
        detail,
    }
}

/// Trains every variant at every seed on one shared dataset and evaluates
/// the configured direction checks on the medians.
pub fn run_ablation(cfg: &AblationConfig, mut progress: impl FnMut(Variant, u64, u64, f64)) -> Result<AblationReport> {
    let data = AblationData::generate(cfg)?;
    run_ablation_on(cfg, &data, &mut progress)
}

pub fn run_ablation_on(
    cfg: &AblationConfig,
    data: &AblationData,
    mut progress: impl FnMut(Variant, u64, u64, f64),
) -> Result<AblationReport> {
    cfg.validate()?;
    let mut variants = BTreeMap::new();
    for &v in &cfg.variants {
        let per_seed: Vec<SeedResult> = cfg
            .seeds
            .iter()
            .map(|&seed| run_variant(cfg, data, v, seed, |step, loss| progress(v, seed, step, loss)))
            .collect();
        let col = |f: fn(&SeedResult) -> f64| median(&per_seed.iter().map(f).collect::<Vec<_>>());
        variants.insert(
            v,
            VariantReport {
                median_sync_c: col(|s| s.sync_c),
                median_sync_d: col(|s| s.sync_d),
                median_t2v_loss: col(|s| s.t2v_loss),
                median_st2v_loss: col(|s| s.st2v_loss),
                per_seed,
            },
        );
    }
    let checks = cfg.assertions.iter().map(|a| check(a, &variants)).collect();
    Ok(AblationReport {
        config_hash: sha256_hex(&serde_json::to_vec(cfg)?),
        dataset_hash: data.hash.clone(),
        seeds: cfg.seeds.clone(),
        variants,
        checks,
    })
}
