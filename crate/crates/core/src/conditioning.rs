//! Deterministic stand-ins for the video codec, the speech encoder and the
//! text encoder. They keep the shapes and the video/audio rate relationship
//! of the real encoders: one audio token per video frame, `r` frames per
//! latent frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ops, Graph, Tensor, Var};

/// Longest text condition accepted, in tokens.
pub const MAX_TEXT_TOKENS: usize = 256;

const BAND_SEED: u64 = 0x5eed_ba4d;

/// RGB frames `T×H×W×3` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVideo {
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl RawVideo {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self> {
        match frames.shape() {
            [_, _, _, 3] => {}
            s => return Err(Error::Shape(format!("video must be T×H×W×3, got {s:?}"))),
        }
        if !(frame_rate > 0.0) {
            return Err(Error::Parameter(format!("frame rate must be positive, got {frame_rate}")));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    #[inline]
    pub fn pixel(&self, f: usize, y: usize, x: usize, ch: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.frames.data()[((f * h + y) * w + x) * 3 + ch]
    }
}

/// Latent `τ×h×w×c_lat` produced by [`patchify_video`].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent {
    pub data: Tensor,
    /// Video frames per latent frame.
    pub r: usize,
    /// Spatial patch size.
    pub p: usize,
}

impl VideoLatent {
    pub fn new(data: Tensor, r: usize, p: usize) -> Result<Self> {
        match data.shape() {
            [_, _, _, c] if r > 0 && p > 0 && *c == 3 * r * p * p => Ok(Self { data, r, p }),
            s => Err(Error::Shape(format!(
                "latent must be τ×h×w×(3·r·p²) with r={r}, p={p}; got {s:?}"
            ))),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    /// Number of video frames this latent stands for (`τ·r`).
    pub fn video_frames(&self) -> usize {
        self.frames() * self.r
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    /// Tokens per latent frame (`h·w`).
    pub fn tokens_per_frame(&self) -> usize {
        self.data.shape()[1] * self.data.shape()[2]
    }
}

/// Projected audio condition, one `d_model` token per video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioCond {
    pub tokens: Tensor,
    /// Set for the all-zero stand-in used on text-only samples.
    pub is_zero_speech: bool,
}

impl AudioCond {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Embedded text condition `L×d_model`, `1 ≤ L ≤ 256`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCond {
    pub tokens: Tensor,
}

fn divisibility(what: &str, n: usize, by_name: &str, by: usize) -> Result<()> {
    if by == 0 || !n.is_multiple_of(by) {
        return Err(Error::Shape(format!("{what} = {n} is not divisible by {by_name} = {by}")));
    }
    Ok(())
}

/// Lossless space-time patchification. Latent channel index is
/// `((dt·p + dy)·p + dx)·3 + rgb`.
pub fn patchify_video(v: &RawVideo, r: usize, p: usize) -> Result<VideoLatent> {
    let (t, hh, ww) = (v.num_frames(), v.height(), v.width());
    divisibility("T", t, "r", r)?;
    divisibility("H", hh, "p", p)?;
    divisibility("W", ww, "p", p)?;
    let (tau, h, w, c) = (t / r, hh / p, ww / p, 3 * r * p * p);
    let src = v.frames.data();
    let mut out = vec![0.0; tau * h * w * c];
    for f in 0..t {
        let (i, dt) = (f / r, f % r);
        for y in 0..hh {
            let (py, dy) = (y / p, y % p);
            for x in 0..ww {
                let (px, dx) = (x / p, x % p);
                let base = (((i * h + py) * w + px) * c) + ((dt * p + dy) * p + dx) * 3;
                let s = ((f * hh + y) * ww + x) * 3;
                out[base..base + 3].copy_from_slice(&src[s..s + 3]);
            }
        }
    }
    VideoLatent::new(Tensor::new(vec![tau, h, w, c], out)?, r, p)
}

/// Exact inverse of [`patchify_video`].
pub fn unpatchify(l: &VideoLatent, frame_rate: f64) -> Result<RawVideo> {
    let (r, p) = (l.r, l.p);
    let [tau, h, w, c] = *l.data.shape() else {
        return Err(Error::Shape(format!("latent must be rank 4, got {:?}", l.data.shape())));
    };
    if c != 3 * r * p * p {
        return Err(Error::Shape(format!("latent channels {c} != 3·r·p² with r={r}, p={p}")));
    }
    let (t, hh, ww) = (tau * r, h * p, w * p);
    let src = l.data.data();
    let mut out = vec![0.0; t * hh * ww * 3];
    for f in 0..t {
        let (i, dt) = (f / r, f % r);
        for y in 0..hh {
            let (py, dy) = (y / p, y % p);
            for x in 0..ww {
                let (px, dx) = (x / p, x % p);
                let base = (((i * h + py) * w + px) * c) + ((dt * p + dy) * p + dx) * 3;
                let d = ((f * hh + y) * ww + x) * 3;
                out[d..d + 3].copy_from_slice(&src[base..base + 3]);
            }
        }
    }
    RawVideo::new(Tensor::new(vec![t, hh, ww, 3], out)?, frame_rate)
}

/// Sample range `[start, end)` covered by video frame `i` of `frames`.
pub fn frame_span(i: usize, samples: usize, frames: usize) -> (usize, usize) {
    (i * samples / frames, (i + 1) * samples / frames)
}

pub fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64).sqrt()
}

fn zero_crossing_rate(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let crossings = xs.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    crossings as f64 / (xs.len() - 1) as f64
}

/// Per-frame features `[RMS, zero-crossing rate, c_a − 2 projection bands]`.
///
/// Bands are dot products with fixed Gaussian vectors drawn from a constant
/// seed, scaled by `1/√len`, so every column is 1-homogeneous in amplitude
/// except the zero-crossing rate, which is scale invariant.
pub fn extract_audio_features(
    waveform: &Tensor,
    sample_rate: u32,
    frames: usize,
    feature_dim: usize,
) -> Result<Tensor> {
    if waveform.rank() != 1 {
        return Err(Error::Shape(format!("waveform must be 1-D, got {:?}", waveform.shape())));
    }
    if sample_rate == 0 {
        return Err(Error::Parameter("sample rate must be positive".into()));
    }
    if feature_dim < 2 {
        return Err(Error::Parameter(format!("feature dim {feature_dim} < 2")));
    }
    if frames == 0 {
        return Err(Error::Parameter("need at least one frame".into()));
    }
    let s = waveform.len();
    if s < frames {
        return Err(Error::InsufficientSamples { samples: s, frames });
    }
    let max_len = s.div_ceil(frames);
    let bands = feature_dim - 2;
    let mut rng = ChaCha8Rng::seed_from_u64(BAND_SEED);
    let proj: Vec<f64> = (0..bands * max_len)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let x = waveform.data();
    let mut out = Vec::with_capacity(frames * feature_dim);
    for i in 0..frames {
        let (a, b) = frame_span(i, s, frames);
        let seg = &x[a..b];
        out.push(rms(seg));
        out.push(zero_crossing_rate(seg));
        let norm = 1.0 / (seg.len() as f64).sqrt();
        for band in 0..bands {
            let w = &proj[band * max_len..band * max_len + seg.len()];
            out.push(ops::dot(seg, w) * norm);
        }
    }
    Tensor::new(vec![frames, feature_dim], out)
}

pub(crate) fn project_audio_graph(g: &mut Graph, features: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(features, w)?;
    g.add_row(y, b)
}

/// The single-layer audio projection `features · W + b`.
pub fn project_audio(features: &Tensor, w: &Tensor, b: &Tensor) -> Result<AudioCond> {
    let mut g = Graph::new();
    let (f, wv, bv) = (
        g.constant(features.clone()),
        g.constant(w.clone()),
        g.constant(b.clone()),
    );
    let out = project_audio_graph(&mut g, f, wv, bv)?;
    Ok(AudioCond {
        tokens: g.value(out).clone(),
        is_zero_speech: false,
    })
}

/// All-zero audio block standing in for speech on text-only samples.
pub fn zero_speech(frames: usize, d_model: usize) -> Result<AudioCond> {
    if frames == 0 || d_model == 0 {
        return Err(Error::Parameter("zero speech needs T ≥ 1 and d_model ≥ 1".into()));
    }
    Ok(AudioCond {
        tokens: Tensor::zeros(&[frames, d_model]),
        is_zero_speech: true,
    })
}

/// Fixed sinusoidal position table `len×dim`.
pub fn positional_table(len: usize, dim: usize) -> Tensor {
    let data = (0..len).flat_map(|i| ops::sinusoidal(i as f64, dim)).collect();
    Tensor::new(vec![len, dim], data).expect("positive dims")
}

pub(crate) fn embed_text_graph(g: &mut Graph, ids: &[usize], table: Var) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Parameter("text condition needs at least one token".into()));
    }
    if ids.len() > MAX_TEXT_TOKENS {
        return Err(Error::PromptTooLong {
            len: ids.len(),
            limit: MAX_TEXT_TOKENS,
        });
    }
    let rows = g.gather(table, ids)?;
    let d = g.shape(table)[1];
    let pos = g.constant(positional_table(ids.len(), d));
    g.add(rows, pos)
}

/// Table lookup plus fixed sinusoidal positions.
pub fn embed_text(token_ids: &[usize], table: &Tensor) -> Result<TextCond> {
    let mut g = Graph::new();
    let t = g.constant(table.clone());
    let out = embed_text_graph(&mut g, token_ids, t)?;
    Ok(TextCond {
        tokens: g.value(out).clone(),
    })
}

/// Whitespace tokenizer hashing lower-cased words into `vocab` ids (FNV-1a).
pub fn tokenize(text: &str, vocab: usize) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in w.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            (h % vocab as u64) as usize
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_video(t: usize, h: usize, w: usize, seed: u64) -> RawVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * h * w * 3).map(|_| rng.random::<f64>()).collect();
        RawVideo::new(Tensor::new(vec![t, h, w, 3], data).unwrap(), 25.0).unwrap()
    }

    #[test]
    fn patchify_shape_arithmetic() {
        let l = patchify_video(&random_video(8, 4, 4, 0), 4, 2).unwrap();
        assert_eq!(l.data.shape(), &[2, 2, 2, 48]);
        assert_eq!(l.video_frames(), 8);
    }

    #[test]
    fn unit_ratio_is_identity() {
        let v = random_video(3, 2, 5, 1);
        let l = patchify_video(&v, 1, 1).unwrap();
        assert_eq!(l.data.shape(), &[3, 2, 5, 3]);
        assert_eq!(l.data.data(), v.frames.data());
    }

    #[test]
    fn patchify_divisibility_errors_name_the_numbers() {
        let v = random_video(6, 4, 4, 2);
        let msg = patchify_video(&v, 4, 2).unwrap_err().to_string();
        assert!(msg.contains("T = 6") && msg.contains("r = 4"), "{msg}");
        let msg = patchify_video(&random_video(4, 3, 4, 2), 4, 2).unwrap_err().to_string();
        assert!(msg.contains("H = 3"), "{msg}");
    }

    #[test]
    fn unpatchify_rejects_malformed_latent() {
        let bad = VideoLatent {
            data: Tensor::zeros(&[2, 2, 2, 10]),
            r: 4,
            p: 2,
        };
        assert!(matches!(unpatchify(&bad, 25.0), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn patchify_round_trip_is_bit_exact(
            r in 1usize..4, p in 1usize..4, tau in 1usize..4, h in 1usize..3, w in 1usize..3, seed in any::<u64>()
        ) {
            let v = random_video(tau * r, h * p, w * p, seed);
            let l = patchify_video(&v, r, p).unwrap();
            prop_assert_eq!(l.data.shape(), &[tau, h, w, 3 * r * p * p][..]);
            let back = unpatchify(&l, v.frame_rate).unwrap();
            prop_assert_eq!(back, v);
        }
    }

    #[test]
    fn silent_waveform_has_zero_rms() {
        let f = extract_audio_features(&Tensor::zeros(&[400]), 2500, 4, 16).unwrap();
        for row in f.data().chunks(16) {
            assert_eq!(row[0], 0.0);
        }
    }

    #[test]
    fn square_wave_has_unit_rms() {
        let wave: Vec<f64> = (0..800).map(|i| if (i / 5) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let f = extract_audio_features(&Tensor::from_vec(wave), 2500, 8, 16).unwrap();
        for row in f.data().chunks(16) {
            assert!((row[0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn doubling_amplitude_doubles_rms_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wave = Tensor::randn(&[1000], &mut rng);
        let mut loud = wave.clone();
        loud.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let a = extract_audio_features(&wave, 2500, 10, 16).unwrap();
        let b = extract_audio_features(&loud, 2500, 10, 16).unwrap();
        for (ra, rb) in a.data().chunks(16).zip(b.data().chunks(16)) {
            assert!((rb[0] - 2.0 * ra[0]).abs() < 1e-12);
            assert_eq!(rb[1], ra[1]);
            for k in 2..16 {
                assert!((rb[k] - 2.0 * ra[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        let r = extract_audio_features(&Tensor::zeros(&[3]), 2500, 4, 16);
        assert!(matches!(r, Err(Error::InsufficientSamples { samples: 3, frames: 4 })));
    }

    #[test]
    fn identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = Tensor::randn(&[5, 4], &mut rng);
        let eye = Tensor::from_rows(&(0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect::<Vec<_>>());
        let cond = project_audio(&feats, &eye, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(cond.tokens, feats);
    }

    #[test]
    fn zero_features_give_bias_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&[4, 6], &mut rng);
        let b = Tensor::randn(&[6], &mut rng);
        let cond = project_audio(&Tensor::zeros(&[3, 4]), &w, &b).unwrap();
        for row in cond.tokens.data().chunks(6) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn projection_mismatch_is_dimension_error() {
        let r = project_audio(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[5, 6]), &Tensor::zeros(&[6]));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn projection_weight_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = Tensor::randn(&[6, 4], &mut rng);
        let b = Tensor::randn(&[3], &mut rng);
        let target = Tensor::randn(&[6, 3], &mut rng);
        let w = Tensor::randn(&[4, 3], &mut rng);
        let err = crate::tensor::grad_check(
            |g, wv| {
                let f = g.constant(feats.clone());
                let bv = g.constant(b.clone());
                let y = project_audio_graph(g, f, wv, bv)?;
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn zero_speech_block() {
        let z = zero_speech(4, 8).unwrap();
        assert_eq!(z.tokens.shape(), &[4, 8]);
        assert_eq!(z.tokens.sum(), 0.0);
        assert!(z.is_zero_speech);
    }

    #[test]
    fn text_embedding_properties() {
        let table = Tensor::zeros(&[4, 6]);
        let one = embed_text(&[0], &table).unwrap();
        assert_eq!(one.tokens.data(), positional_table(1, 6).data());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = Tensor::randn(&[10, 6], &mut rng);
        let a = embed_text(&[1, 2, 3], &table).unwrap();
        assert_eq!(a, embed_text(&[1, 2, 3], &table).unwrap());
        let swapped = embed_text(&[2, 1, 3], &table).unwrap();
        assert_ne!(a, swapped);
    }

    #[test]
    fn text_embedding_errors() {
        let table = Tensor::zeros(&[4, 6]);
        assert!(matches!(embed_text(&[4], &table), Err(Error::Vocabulary { id: 4, vocab: 4 })));
        let long = vec![0; 257];
        assert!(matches!(embed_text(&long, &table), Err(Error::PromptTooLong { len: 257, .. })));
    }

    #[test]
    fn tokenizer_is_stable_and_case_insensitive() {
        let a = tokenize("Person1 waves.", 64);
        assert_eq!(a, tokenize("  person1   WAVES ", 64));
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|&id| id < 64));
    }
}
