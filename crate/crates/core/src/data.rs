//! Synthetic talking-character samples with a known lip-sync channel, the
//! dataset file format, the shot curriculum and the speech/text batch mixer.
//!
//! Every sample has a mouth block per character whose pixel value on frame
//! `f` is the RMS of the waveform over that frame while the character
//! speaks, and zero otherwise. The mouth trace of a perfect generator
//! therefore correlates with the speech envelope at exactly 1.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{self, frame_span, RawVideo};
use crate::error::{Error, Result};
use crate::flow::TrainExample;
use crate::model::{AudioSource, Condition};
use crate::prompts::{self, Character, StructuredPrompt};
use crate::tensor::Tensor;

/// Shot framing, ordered from the strongest to the weakest speech cue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shot {
    CloseUp,
    MediumCloseUp,
    MediumShot,
}

impl Shot {
    pub const ALL: [Shot; 3] = [Shot::CloseUp, Shot::MediumCloseUp, Shot::MediumShot];

    /// Side of the square mouth block for a frame whose shorter side is `side`.
    pub fn mouth_side(self, side: usize) -> usize {
        let div = match self {
            Shot::CloseUp => 2,
            Shot::MediumCloseUp => 4,
            Shot::MediumShot => 8,
        };
        (side / div).max(1)
    }
}

impl fmt::Display for Shot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shot::CloseUp => "close-up",
            Shot::MediumCloseUp => "medium-close-up",
            Shot::MediumShot => "medium-shot",
        })
    }
}

impl std::str::FromStr for Shot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "close-up" | "closeup" => Ok(Shot::CloseUp),
            "medium-close-up" => Ok(Shot::MediumCloseUp),
            "medium-shot" | "medium" => Ok(Shot::MediumShot),
            other => Err(Error::Parameter(format!(
                "unknown shot {other:?} (expected close-up, medium-close-up or medium-shot)"
            ))),
        }
    }
}

/// What to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub shot: Shot,
    pub n_characters: usize,
    pub clip_count: usize,
    /// `false` produces a sample in which nobody speaks.
    #[serde(default = "yes")]
    pub speech: bool,
}

fn yes() -> bool {
    true
}

impl SampleSpec {
    pub fn new(shot: Shot, n_characters: usize, clip_count: usize) -> Self {
        Self {
            shot,
            n_characters,
            clip_count,
            speech: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_characters) {
            return Err(Error::Parameter(format!(
                "n_characters must be 1 or 2, got {}",
                self.n_characters
            )));
        }
        if !(1..=4).contains(&self.clip_count) {
            return Err(Error::Parameter(format!("clip_count must be 1..=4, got {}", self.clip_count)));
        }
        Ok(())
    }
}

/// Frame grid and audio rate of generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub frame_rate: f64,
    pub sample_rate: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            height: 16,
            width: 16,
            frame_rate: 25.0,
            sample_rate: 2500,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Parameter("frames must be positive".into()));
        }
        if self.height < 8 || self.width < 8 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "frame size {}×{} must be even and at least 8×8",
                self.height, self.width
            )));
        }
        if !(self.frame_rate > 0.0) || self.sample_rate == 0 {
            return Err(Error::Parameter("rates must be positive".into()));
        }
        if self.num_samples() < self.frames {
            return Err(Error::InsufficientSamples {
                samples: self.num_samples(),
                frames: self.frames,
            });
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.frames as f64 * f64::from(self.sample_rate) / self.frame_rate).round() as usize
    }

    /// Top-left corner and side of character `k`'s mouth block.
    pub fn mouth_block(&self, shot: Shot, k: usize) -> (usize, usize, usize) {
        let (qh, qw) = (self.height / 2, self.width / 2);
        let m = shot.mouth_side(self.height.min(self.width)).min(qh).min(qw);
        (qh + (qh - m) / 2, k * qw + (qw - m) / 2, m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub seed: u64,
    pub spec: SampleSpec,
    pub waveform: Tensor,
    pub sample_rate: u32,
    pub video: RawVideo,
    pub prompt: StructuredPrompt,
    /// Per frame: 0 for silence, else the 1-based speaking character.
    pub speaker_track: Vec<usize>,
    /// Ground-truth mouth openness per frame.
    pub sync_signal: Tensor,
    /// Scene index per clip.
    pub scenes: Vec<usize>,
}

impl SyntheticSample {
    pub fn shot(&self) -> Shot {
        self.spec.shot
    }

    pub fn prompt_text(&self) -> String {
        prompts::render_prompt(&self.prompt).expect("generated prompts are valid")
    }

    /// First and one-past-last frame of each clip.
    pub fn clip_bounds(&self) -> Vec<(usize, usize)> {
        clip_bounds(self.video.num_frames(), self.spec.clip_count)
    }
}

pub fn clip_bounds(frames: usize, clips: usize) -> Vec<(usize, usize)> {
    (0..clips).map(|c| (c * frames / clips, (c + 1) * frames / clips)).collect()
}

const DESCRIPTIONS: [&str; 6] = [
    "A young woman with curly red hair wearing a green sweater",
    "An old man with a grey beard in a dark wool coat",
    "A tall woman with short black hair in a yellow raincoat",
    "A boy with freckles wearing a blue baseball cap",
    "A middle-aged man with glasses and a striped shirt",
    "A girl with long braids in a purple hoodie",
];

const DESCRIPTION_TINTS: [[f64; 3]; 6] = [
    [0.85, 0.35, 0.30],
    [0.45, 0.45, 0.50],
    [0.90, 0.80, 0.25],
    [0.30, 0.45, 0.85],
    [0.55, 0.70, 0.40],
    [0.60, 0.35, 0.75],
];

const SCENES: [&str; 4] = [
    "in a sunlit kitchen",
    "on a busy city street",
    "in a quiet library",
    "at a beach at sunset",
];

const SCENE_COLORS: [[f64; 3]; 4] = [
    [0.80, 0.70, 0.50],
    [0.45, 0.45, 0.55],
    [0.55, 0.40, 0.30],
    [0.90, 0.55, 0.35],
];

const MANNERS: [&str; 4] = ["calmly", "excitedly", "softly", "with a smile"];

fn raised_cosine(x: f64, center: f64, width: f64) -> f64 {
    let u = (x - center) / width;
    if u.abs() >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

/// Generates one sample; identical `(seed, spec, cfg)` give identical output.
pub fn gen_sample(seed: u64, spec: SampleSpec, cfg: &DataConfig) -> Result<SyntheticSample> {
    spec.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.frames;
    let n_samples = cfg.num_samples();
    let sr = f64::from(cfg.sample_rate);

    let mut desc_ids: Vec<usize> = Vec::with_capacity(spec.n_characters);
    while desc_ids.len() < spec.n_characters {
        let d = rng.random_range(0..DESCRIPTIONS.len());
        if !desc_ids.contains(&d) {
            desc_ids.push(d);
        }
    }
    let bounds = clip_bounds(t, spec.clip_count);
    let scenes: Vec<usize> = (0..spec.clip_count).map(|_| rng.random_range(0..SCENES.len())).collect();
    let first = rng.random_range(0..spec.n_characters);

    let mut speaker_track = vec![0usize; t];
    let mut clips = Vec::with_capacity(spec.clip_count);
    for (c, &(a, b)) in bounds.iter().enumerate() {
        let speaker = (first + c) % spec.n_characters;
        let tag = format!("Person{}", speaker + 1);
        let scene = SCENES[scenes[c]];
        let manner = MANNERS[rng.random_range(0..MANNERS.len())];
        let len = b - a;
        let pad = (len / 4).min(2);
        let lo = a + rng.random_range(0..=pad);
        let hi = b - rng.random_range(0..=pad);
        let text = if spec.speech && hi > lo {
            speaker_track[lo..hi].fill(speaker + 1);
            if spec.n_characters == 2 {
                let other = format!("Person{}", 2 - speaker);
                format!("{tag} talks {manner} to {other} {scene} while {other} listens")
            } else {
                format!("{tag} talks {manner} {scene} and {tag} looks at the camera")
            }
        } else {
            format!("{tag} stays silent {scene}")
        };
        clips.push(text);
    }
    let prompt = StructuredPrompt {
        clip_count: spec.clip_count,
        characters: desc_ids
            .iter()
            .enumerate()
            .map(|(k, &d)| Character {
                tag: format!("Person{}", k + 1),
                description: DESCRIPTIONS[d].to_string(),
            })
            .collect(),
        clips,
    };
    prompts::validate(&prompt).map_err(|v| Error::Data(format!("generated an invalid prompt: {v:?}")))?;

    // speech envelope: a floor plus smooth bumps, gated to the speaking frames
    let mut waveform = vec![0.0; n_samples];
    let n_bumps = (t / 3).max(1);
    let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            (
                rng.random_range(0.0..t as f64),
                rng.random_range(1.5..4.0),
                rng.random_range(0.3..0.85),
            )
        })
        .collect();
    let f0 = rng.random_range(150.0..400.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for (f, &spk) in speaker_track.iter().enumerate() {
        if spk == 0 {
            continue;
        }
        let (s0, s1) = frame_span(f, n_samples, t);
        for (s, w) in waveform.iter_mut().enumerate().take(s1).skip(s0) {
            let pos = s as f64 * t as f64 / n_samples as f64;
            let env = (0.15 + bumps.iter().map(|&(c, wd, a)| a * raised_cosine(pos, c, wd)).sum::<f64>()).min(1.0);
            *w = env * (std::f64::consts::TAU * f0 * s as f64 / sr + phase).sin();
        }
    }
    let sync: Vec<f64> = (0..t)
        .map(|f| {
            if speaker_track[f] == 0 {
                0.0
            } else {
                let (s0, s1) = frame_span(f, n_samples, t);
                conditioning::rms(&waveform[s0..s1])
            }
        })
        .collect();

    let (h, w) = (cfg.height, cfg.width);
    let mut pixels = vec![0.0; t * h * w * 3];
    for (c, &(a, b)) in bounds.iter().enumerate() {
        let base = SCENE_COLORS[scenes[c]];
        let mut frame = vec![0.0; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let quadrant = (y >= h / 2).then(|| x * 2 / w);
                let color = match quadrant.and_then(|k| desc_ids.get(k)) {
                    Some(&d) => DESCRIPTION_TINTS[d],
                    None => base,
                };
                let shade = if (y + x + scenes[c]).is_multiple_of(2) { 1.0 } else { 0.8 };
                for ch in 0..3 {
                    frame[(y * w + x) * 3 + ch] = color[ch] * shade;
                }
            }
        }
        for f in a..b {
            let dst = &mut pixels[f * h * w * 3..(f + 1) * h * w * 3];
            dst.copy_from_slice(&frame);
            for k in 0..spec.n_characters {
                let value = if speaker_track[f] == k + 1 { sync[f] } else { 0.0 };
                let (y0, x0, m) = cfg.mouth_block(spec.shot, k);
                for y in y0..y0 + m {
                    for x in x0..x0 + m {
                        dst[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(value);
                    }
                }
            }
        }
    }
    let video = RawVideo::new(Tensor::new(vec![t, h, w, 3], pixels)?, cfg.frame_rate)?;
    Ok(SyntheticSample {
        seed,
        spec,
        waveform: Tensor::new(vec![n_samples], waveform)?,
        sample_rate: cfg.sample_rate,
        video,
        prompt,
        speaker_track,
        sync_signal: Tensor::new(vec![t], sync)?,
        scenes,
    })
}

/// Per-frame mouth trace of `video`: the sum over the sample's characters
/// of the mean value inside each mouth block.
pub fn mouth_trace(video: &RawVideo, shot: Shot, n_characters: usize) -> Vec<f64> {
    let cfg = DataConfig {
        frames: video.num_frames(),
        height: video.height(),
        width: video.width(),
        ..DataConfig::default()
    };
    (0..video.num_frames())
        .map(|f| {
            (0..n_characters)
                .map(|k| {
                    let (y0, x0, m) = cfg.mouth_block(shot, k);
                    let mut s = 0.0;
                    for y in y0..y0 + m {
                        for x in x0..x0 + m {
                            for ch in 0..3 {
                                s += video.pixel(f, y, x, ch);
                            }
                        }
                    }
                    s / (3 * m * m) as f64
                })
                .sum()
        })
        .collect()
}

/// Default spec for the `i`-th sample of a mixed corpus.
pub fn corpus_spec(i: usize) -> SampleSpec {
    SampleSpec::new(Shot::ALL[i % 3], 1 + (i / 3) % 2, 1 + (i / 6) % 2)
}

/// `n` samples with per-sample seeds derived from `seed`, in seed order.
pub fn gen_corpus(
    n: usize,
    seed: u64,
    cfg: &DataConfig,
    spec_of: impl Fn(usize) -> SampleSpec,
) -> Result<Vec<SyntheticSample>> {
    (0..n)
        .map(|i| gen_sample(sample_seed(seed, i), spec_of(i), cfg))
        .collect()
}

pub fn sample_seed(seed: u64, i: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const DATASET_MAGIC: &[u8; 8] = b"MOCHADS1";

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    seed: u64,
    spec: SampleSpec,
    sample_rate: u32,
    frame_rate: f64,
    prompt: String,
    speaker_track: Vec<usize>,
    scenes: Vec<usize>,
}

fn encode_record(s: &SyntheticSample) -> Result<Vec<u8>> {
    let meta = RecordMeta {
        seed: s.seed,
        spec: s.spec,
        sample_rate: s.sample_rate,
        frame_rate: s.video.frame_rate,
        prompt: s.prompt_text(),
        speaker_track: s.speaker_track.clone(),
        scenes: s.scenes.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut body = Vec::new();
    body.extend_from_slice(&(json.len() as u32).to_le_bytes());
    body.extend_from_slice(&json);
    for t in [&s.waveform, &s.video.frames, &s.sync_signal] {
        body.extend_from_slice(&(t.serialized_len() as u64).to_le_bytes());
        t.write_to(&mut body)?;
    }
    Ok(body)
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("record body ends early".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn decode_record(mut body: &[u8]) -> Result<SyntheticSample> {
    let len = u32::from_le_bytes(take(&mut body, 4)?.try_into().expect("4 bytes")) as usize;
    let meta: RecordMeta = serde_json::from_slice(take(&mut body, len)?)?;
    let mut tensors = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = u64::from_le_bytes(take(&mut body, 8)?.try_into().expect("8 bytes")) as usize;
        tensors.push(Tensor::from_bytes(take(&mut body, n)?)?);
    }
    if !body.is_empty() {
        return Err(Error::Format("trailing bytes in record body".into()));
    }
    let sync = tensors.pop().expect("three tensors");
    let frames = tensors.pop().expect("three tensors");
    let waveform = tensors.pop().expect("three tensors");
    Ok(SyntheticSample {
        seed: meta.seed,
        spec: meta.spec,
        waveform,
        sample_rate: meta.sample_rate,
        video: RawVideo::new(frames, meta.frame_rate)?,
        prompt: prompts::parse_prompt(&meta.prompt)?,
        speaker_track: meta.speaker_track,
        sync_signal: sync,
        scenes: meta.scenes,
    })
}

/// `MOCHADS1`, `u32` record count, then per record a `u64` body length,
/// the body and a `u32` CRC-32 of the body.
pub fn write_dataset_to<W: Write>(samples: &[SyntheticSample], w: &mut W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    let count = u32::try_from(samples.len()).map_err(|_| Error::Parameter("too many records".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for s in samples {
        let body = encode_record(s)?;
        w.write_all(&(body.len() as u64).to_le_bytes())?;
        w.write_all(&body)?;
        w.write_all(&crc32fast::hash(&body).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset_from<R: Read>(r: &mut R) -> Result<Vec<SyntheticSample>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for record in 0..count {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8);
        if len > 1 << 32 {
            return Err(Error::Format(format!("record {record} claims {len} bytes")));
        }
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body)?;
        r.read_exact(&mut b4)?;
        let stored = u32::from_le_bytes(b4);
        let computed = crc32fast::hash(&body);
        if stored != computed {
            return Err(Error::Checksum {
                record,
                stored,
                computed,
            });
        }
        out.push(decode_record(&body)?);
    }
    Ok(out)
}

pub fn write_dataset(samples: &[SyntheticSample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(samples, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SyntheticSample>> {
    read_dataset_from(&mut BufReader::new(File::open(path)?))
}

/// Normalized curriculum weights at stage `stage_id ≥ 1`: the category
/// introduced at stage `j` gets raw weight `0.5^(stage_id − j)`.
pub fn stage_weights(stage_id: usize, categories: &[Shot]) -> Result<Vec<(Shot, f64)>> {
    if stage_id == 0 || stage_id > categories.len() {
        return Err(Error::Parameter(format!(
            "stage {stage_id} outside 1..={} for the given categories",
            categories.len()
        )));
    }
    let raw: Vec<f64> = (1..=stage_id).map(|j| 0.5f64.powi((stage_id - j) as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(categories[..stage_id].iter().zip(raw).map(|(&c, w)| (c, w / total)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStage {
    pub stage_id: usize,
    pub category_weights: BTreeMap<Shot, f64>,
    pub st2v_ratio: f64,
}

impl TrainingStage {
    /// Stage `k` of the halving curriculum over `categories`. Stage 0 is
    /// text-only.
    pub fn curriculum(k: usize, categories: &[Shot], st2v_ratio: f64) -> Result<Self> {
        if k == 0 {
            return Ok(Self {
                stage_id: 0,
                category_weights: BTreeMap::new(),
                st2v_ratio: 0.0,
            });
        }
        let s = Self {
            stage_id: k,
            category_weights: stage_weights(k, categories)?.into_iter().collect(),
            st2v_ratio,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.st2v_ratio) {
            return Err(Error::Parameter(format!("st2v_ratio {} outside [0, 1]", self.st2v_ratio)));
        }
        if self.stage_id == 0 && self.st2v_ratio != 0.0 {
            return Err(Error::Parameter("stage 0 is text-only and needs st2v_ratio 0".into()));
        }
        if self.category_weights.values().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Parameter("category weights must be finite and nonnegative".into()));
        }
        if self.st2v_ratio > 0.0 && self.category_weights.values().sum::<f64>() <= 0.0 {
            return Err(Error::Parameter(format!(
                "stage {} draws speech samples but has no category weight",
                self.stage_id
            )));
        }
        Ok(())
    }
}

/// A training sample in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub x1: Tensor,
    pub text_ids: Vec<usize>,
    pub audio: Tensor,
    pub shot: Shot,
}

impl PreparedSample {
    pub fn condition(&self, with_audio: bool) -> Condition {
        Condition {
            text_ids: self.text_ids.clone(),
            audio: if with_audio {
                AudioSource::Features(self.audio.clone())
            } else {
                AudioSource::Zero
            },
        }
    }

    pub fn example(&self, with_audio: bool) -> TrainExample {
        TrainExample {
            x1: self.x1.clone(),
            cond: self.condition(with_audio),
        }
    }
}

/// Latent, token ids and audio features of `s`.
pub fn prepare(s: &SyntheticSample, r: usize, p: usize, audio_dim: usize, vocab: usize) -> Result<PreparedSample> {
    let latent = conditioning::patchify_video(&s.video, r, p)?;
    let audio = conditioning::extract_audio_features(
        &s.waveform,
        s.sample_rate,
        s.video.num_frames(),
        audio_dim,
    )?;
    Ok(PreparedSample {
        x1: latent.data,
        text_ids: conditioning::tokenize(&s.prompt_text(), vocab),
        audio,
        shot: s.spec.shot,
    })
}

/// Speech samples grouped by shot.
pub type ShotPools = BTreeMap<Shot, Vec<Arc<PreparedSample>>>;

pub fn pools_by_shot(samples: &[Arc<PreparedSample>]) -> ShotPools {
    let mut pools = ShotPools::new();
    for s in samples {
        pools.entry(s.shot).or_default().push(Arc::clone(s));
    }
    pools
}

/// One mixed batch: each element is a speech sample with probability
/// `st2v_ratio`, drawn across shots by the stage weights, and otherwise a
/// text-only sample with zeroed audio.
pub fn mix_batch<R: Rng + ?Sized>(
    rng: &mut R,
    st2v: &ShotPools,
    t2v: &[Arc<PreparedSample>],
    stage: &TrainingStage,
    batch_size: usize,
) -> Result<Vec<TrainExample>> {
    stage.validate()?;
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let weighted: Vec<(Shot, f64)> = stage
        .category_weights
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(&s, &w)| (s, w))
        .collect();
    if stage.st2v_ratio > 0.0 {
        for (shot, _) in &weighted {
            if st2v.get(shot).is_none_or(Vec::is_empty) {
                return Err(Error::Data(format!("no speech samples for category {shot}")));
            }
        }
    }
    if stage.st2v_ratio < 1.0 && t2v.is_empty() {
        return Err(Error::Data("no text-only samples for the text-to-video share".into()));
    }
    let total: f64 = weighted.iter().map(|(_, w)| w).sum();
    (0..batch_size)
        .map(|_| {
            let speech = rng.random::<f64>() < stage.st2v_ratio;
            if speech {
                let mut u = rng.random::<f64>() * total;
                let mut shot = weighted.last().expect("checked non-empty").0;
                for &(s, w) in &weighted {
                    if u < w {
                        shot = s;
                        break;
                    }
                    u -= w;
                }
                let pool = &st2v[&shot];
                Ok(pool[rng.random_range(0..pool.len())].example(true))
            } else {
                Ok(t2v[rng.random_range(0..t2v.len())].example(false))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig {
            height: 8,
            width: 8,
            ..DataConfig::default()
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = SampleSpec::new(Shot::MediumCloseUp, 2, 3);
        assert_eq!(gen_sample(9, spec, &cfg()).unwrap(), gen_sample(9, spec, &cfg()).unwrap());
        assert_ne!(gen_sample(9, spec, &cfg()).unwrap(), gen_sample(10, spec, &cfg()).unwrap());
    }

    #[test]
    fn silent_spec_has_zero_sync_and_constant_mouth() {
        let spec = SampleSpec {
            speech: false,
            ..SampleSpec::new(Shot::CloseUp, 2, 2)
        };
        let s = gen_sample(1, spec, &cfg()).unwrap();
        assert!(s.sync_signal.data().iter().all(|&v| v == 0.0));
        assert!(s.waveform.data().iter().all(|&v| v == 0.0));
        let trace = mouth_trace(&s.video, spec.shot, 2);
        assert!(trace.iter().all(|&v| v == trace[0]));
    }

    #[test]
    fn sync_signal_is_frame_rms_while_speaking() {
        let s = gen_sample(4, SampleSpec::new(Shot::CloseUp, 2, 2), &cfg()).unwrap();
        let n = s.waveform.len();
        for f in 0..32 {
            let (a, b) = frame_span(f, n, 32);
            let expect = if s.speaker_track[f] > 0 {
                conditioning::rms(&s.waveform.data()[a..b])
            } else {
                0.0
            };
            assert_eq!(s.sync_signal.data()[f], expect);
        }
        assert!(s.speaker_track.contains(&1) && s.speaker_track.contains(&2));
    }

    #[test]
    fn mouth_trace_reproduces_sync_signal() {
        for (i, shot) in Shot::ALL.into_iter().enumerate() {
            let s = gen_sample(i as u64, SampleSpec::new(shot, 1 + i % 2, 1 + i), &cfg()).unwrap();
            let trace = mouth_trace(&s.video, shot, s.spec.n_characters);
            for (a, b) in trace.iter().zip(s.sync_signal.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        for spec in [
            SampleSpec::new(Shot::CloseUp, 3, 1),
            SampleSpec::new(Shot::CloseUp, 0, 1),
            SampleSpec::new(Shot::CloseUp, 1, 5),
        ] {
            assert!(matches!(gen_sample(0, spec, &cfg()), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn wider_shots_have_smaller_mouths() {
        let c = DataConfig::default();
        let sides: Vec<_> = Shot::ALL.iter().map(|&s| c.mouth_block(s, 0).2).collect();
        assert!(sides[0] > sides[1] && sides[1] > sides[2]);
    }

    #[test]
    fn dataset_round_trip() {
        let samples = gen_corpus(3, 5, &cfg(), corpus_spec).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&samples, &mut buf).unwrap();
        assert_eq!(read_dataset_from(&mut buf.as_slice()).unwrap(), samples);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let mut buf = Vec::new();
        write_dataset_to(&[], &mut buf).unwrap();
        assert_eq!(buf.len(), 12);
        assert!(read_dataset_from(&mut buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let samples = gen_corpus(2, 6, &cfg(), corpus_spec).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&samples, &mut buf).unwrap();
        let mid = buf.len() - 100;
        buf[mid] ^= 0x01;
        let err = read_dataset_from(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Checksum { record: 1, .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let err = read_dataset_from(&mut &b"NOTADATA\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let samples = gen_corpus(1, 7, &cfg(), corpus_spec).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&samples, &mut buf).unwrap();
        buf.truncate(buf.len() - 10);
        assert!(matches!(read_dataset_from(&mut buf.as_slice()).unwrap_err(), Error::Io(_)));
    }

    #[test]
    fn halving_rule() {
        assert_eq!(stage_weights(1, &[Shot::CloseUp]).unwrap(), vec![(Shot::CloseUp, 1.0)]);
        let w = stage_weights(2, &Shot::ALL[..2]).unwrap();
        assert_eq!(w[0].1, 1.0 / 3.0);
        assert_eq!(w[1].1, 2.0 / 3.0);
        let w = stage_weights(3, &Shot::ALL).unwrap();
        assert_eq!(w.iter().map(|x| x.1).collect::<Vec<_>>(), vec![1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]);
        assert!(stage_weights(4, &Shot::ALL).is_err());
        assert!(stage_weights(0, &Shot::ALL).is_err());
    }

    fn pools() -> (ShotPools, Vec<Arc<PreparedSample>>) {
        let samples = gen_corpus(6, 1, &cfg(), corpus_spec).unwrap();
        let prepared: Vec<_> = samples
            .iter()
            .map(|s| Arc::new(prepare(s, 4, 4, 8, 64).unwrap()))
            .collect();
        (pools_by_shot(&prepared), prepared)
    }

    #[test]
    fn mix_boundaries() {
        let (st2v, t2v) = pools();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all_speech = TrainingStage::curriculum(3, &Shot::ALL, 1.0).unwrap();
        for ex in mix_batch(&mut rng, &st2v, &t2v, &all_speech, 64).unwrap() {
            match ex.cond.audio {
                AudioSource::Features(f) => assert!(f.data().iter().any(|&v| v != 0.0)),
                AudioSource::Zero => panic!("text-only element at ratio 1"),
            }
        }
        let text_only = TrainingStage::curriculum(0, &Shot::ALL, 0.8).unwrap();
        for ex in mix_batch(&mut rng, &st2v, &t2v, &text_only, 64).unwrap() {
            assert_eq!(ex.cond.audio, AudioSource::Zero);
        }
    }

    #[test]
    fn missing_category_names_it() {
        let (mut st2v, t2v) = pools();
        st2v.remove(&Shot::MediumShot);
        let stage = TrainingStage::curriculum(3, &Shot::ALL, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = mix_batch(&mut rng, &st2v, &t2v, &stage, 4).unwrap_err();
        assert!(err.to_string().contains("medium-shot"), "{err}");
    }

    #[test]
    fn stage_zero_requires_zero_ratio() {
        let s = TrainingStage {
            stage_id: 0,
            category_weights: BTreeMap::new(),
            st2v_ratio: 0.5,
        };
        assert!(s.validate().is_err());
    }
}
