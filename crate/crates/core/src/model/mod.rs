//! The diffusion transformer. Each block runs self-attention over latent
//! tokens, then cross-attention to the text tokens, then windowed
//! cross-attention to the audio tokens, then an MLP; all pre-norm with
//! residuals, with the time embedding added to the block input as a shift.
//! The output head adds a time-gated copy of the input latent, so the
//! transformer itself only has to carry the conditional part of the
//! velocity.

mod attention;
pub mod checkpoint;
mod params;
pub mod window;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{self, AudioCond, TextCond, VideoLatent};
use crate::error::{Error, Result};
use crate::tensor::{ops, Graph, KeySpan, Tensor, Var};

pub use attention::{cross_attention, masked_attention_reference, AttnMask, AttnWeights};
pub use params::ParamStore;
pub use window::{build_window_mask, window_bounds, WindowMask, WindowMode};

use attention::{attend, linear, AttnVars};

const LN_EPS: f64 = 1e-5;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Video frames per latent frame.
    pub r: usize,
    /// Spatial patch size.
    pub p: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub window_mode: WindowMode,
    /// `false` lets every latent token attend to every audio token.
    #[serde(default = "default_true")]
    pub windowed_audio: bool,
    pub seed: u64,
    /// Video frames `T` (one audio token each).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Audio feature width before projection.
    pub audio_dim: usize,
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            r: 4,
            p: 2,
            mlp_ratio: 2,
            window_mode: WindowMode::Prose,
            windowed_audio: true,
            seed: 0,
            frames: 32,
            height: 16,
            width: 16,
            audio_dim: 16,
            vocab: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model {} must be even", self.d_model));
        }
        if self.n_blocks == 0 || self.r == 0 || self.p == 0 || self.mlp_ratio == 0 {
            return bad("n_blocks, r, p and mlp_ratio must be ≥ 1".into());
        }
        if self.frames == 0 || !self.frames.is_multiple_of(self.r) {
            return Err(Error::Shape(format!("T = {} is not divisible by r = {}", self.frames, self.r)));
        }
        if !self.height.is_multiple_of(self.p) || !self.width.is_multiple_of(self.p) || self.height == 0 || self.width == 0 {
            return Err(Error::Shape(format!(
                "H×W = {}×{} not divisible by p = {}",
                self.height, self.width, self.p
            )));
        }
        if self.audio_dim < 2 || self.vocab == 0 {
            return bad("audio_dim must be ≥ 2 and vocab ≥ 1".into());
        }
        Ok(())
    }

    pub fn latent_frames(&self) -> usize {
        self.frames / self.r
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.p) * (self.width / self.p)
    }

    pub fn seq_len(&self) -> usize {
        self.latent_frames() * self.tokens_per_frame()
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.r * self.p * self.p
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [
            self.latent_frames(),
            self.height / self.p,
            self.width / self.p,
            self.latent_channels(),
        ]
    }
}

/// Audio input for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioSource {
    /// Raw per-frame features `T×c_a`, projected by the model.
    Features(Tensor),
    /// Zero-vector speech dropout.
    Zero,
}

/// Conditions for one sample: text token ids plus audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub text_ids: Vec<usize>,
    pub audio: AudioSource,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone)]
struct BlockIds {
    shift_w: usize,
    shift_b: usize,
    norms: [(usize, usize); 4],
    self_attn: AttnIds,
    text_attn: AttnIds,
    audio_attn: AttnIds,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    in_w: usize,
    in_b: usize,
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    text_table: usize,
    audio_w: usize,
    audio_b: usize,
    blocks: Vec<BlockIds>,
    out_norm: (usize, usize),
    out_w: usize,
    out_b: usize,
    skip_w: usize,
    skip_b: usize,
}

/// Graph handles of one block's parameters.
struct BlockVars {
    shift_w: Var,
    shift_b: Var,
    norms: [(Var, Var); 4],
    self_attn: AttnVars,
    text_attn: AttnVars,
    audio_attn: AttnVars,
    mlp_w1: Var,
    mlp_b1: Var,
    mlp_w2: Var,
    mlp_b2: Var,
}

#[derive(Debug, Clone)]
pub struct DiTModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    positions: Tensor,
    audio_spans: Option<Arc<[KeySpan]>>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let t = Tensor::randn_scaled(&[rows, cols], 1.0 / (rows as f64).sqrt(), &mut self.rng);
        self.store.add(name, t)
    }

    fn bias(&mut self, name: String, n: usize) -> usize {
        self.store.add(name, Tensor::zeros(&[n]))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.weight(format!("{prefix}.wq"), d, d),
            bq: self.bias(format!("{prefix}.bq"), d),
            wk: self.weight(format!("{prefix}.wk"), d, d),
            bk: self.bias(format!("{prefix}.bk"), d),
            wv: self.weight(format!("{prefix}.wv"), d, d),
            bv: self.bias(format!("{prefix}.bv"), d),
            wo: self.weight(format!("{prefix}.wo"), d, d),
            bo: self.bias(format!("{prefix}.bo"), d),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.store.add(format!("{prefix}.gamma"), Tensor::ones(&[d])),
            self.store.add(format!("{prefix}.beta"), Tensor::zeros(&[d])),
        )
    }
}

/// Fixed per-token position code: half the channels encode the latent
/// frame index, half the spatial index.
fn token_positions(cfg: &ModelConfig) -> Tensor {
    let d = cfg.d_model;
    let half = d / 2;
    let per_frame = cfg.tokens_per_frame();
    let mut data = Vec::with_capacity(cfg.seq_len() * d);
    for s in 0..cfg.seq_len() {
        data.extend(ops::sinusoidal((s / per_frame) as f64, half));
        data.extend(ops::sinusoidal((s % per_frame) as f64, d - half));
    }
    Tensor::new(vec![cfg.seq_len(), d], data).expect("positive dims")
}

impl DiTModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let c = config.latent_channels();
        let hidden = d * config.mlp_ratio;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let in_w = init.weight("input.w".into(), c, d);
        let in_b = init.bias("input.b".into(), d);
        let time_w1 = init.weight("time.w1".into(), d, d);
        let time_b1 = init.bias("time.b1".into(), d);
        let time_w2 = init.weight("time.w2".into(), d, d);
        let time_b2 = init.bias("time.b2".into(), d);
        let text_table = {
            let t = Tensor::randn_scaled(&[config.vocab, d], 0.5, &mut init.rng);
            init.store.add("text.table", t)
        };
        let audio_w = init.weight("audio.w".into(), config.audio_dim, d);
        let audio_b = init.bias("audio.b".into(), d);
        let blocks = (0..config.n_blocks)
            .map(|b| {
                let p = format!("blocks.{b}");
                BlockIds {
                    shift_w: init.weight(format!("{p}.shift.w"), d, d),
                    shift_b: init.bias(format!("{p}.shift.b"), d),
                    norms: [
                        init.norm(&format!("{p}.norm_self"), d),
                        init.norm(&format!("{p}.norm_text"), d),
                        init.norm(&format!("{p}.norm_audio"), d),
                        init.norm(&format!("{p}.norm_mlp"), d),
                    ],
                    self_attn: init.attn(&format!("{p}.self_attn"), d),
                    text_attn: init.attn(&format!("{p}.text_attn"), d),
                    audio_attn: init.attn(&format!("{p}.audio_attn"), d),
                    mlp_w1: init.weight(format!("{p}.mlp.w1"), d, hidden),
                    mlp_b1: init.bias(format!("{p}.mlp.b1"), hidden),
                    mlp_w2: init.weight(format!("{p}.mlp.w2"), hidden, d),
                    mlp_b2: init.bias(format!("{p}.mlp.b2"), d),
                }
            })
            .collect();
        let out_norm = init.norm("output.norm", d);
        let out_w = init.weight("output.w".into(), d, c);
        let out_b = init.bias("output.b".into(), c);
        let skip_w = init.weight("output.skip_w".into(), d, c);
        let skip_b = init.bias("output.skip_b".into(), c);
        let layout = Layout {
            in_w,
            in_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            text_table,
            audio_w,
            audio_b,
            blocks,
            out_norm,
            out_w,
            out_b,
            skip_w,
            skip_b,
        };
        let audio_spans = if config.windowed_audio {
            let mask = build_window_mask(config.latent_frames(), config.r, config.frames, config.window_mode)?;
            Some(mask.expand(config.tokens_per_frame()))
        } else {
            None
        };
        Ok(Self {
            positions: token_positions(&config),
            config,
            params: store,
            layout,
            audio_spans,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// The audio mask this model applies, or `None` for dense audio attention.
    pub fn window_mask(&self) -> Option<WindowMask> {
        let c = &self.config;
        c.windowed_audio
            .then(|| build_window_mask(c.latent_frames(), c.r, c.frames, c.window_mode).expect("validated config"))
    }

    pub fn text_table(&self) -> &Tensor {
        self.params.get(self.layout.text_table)
    }

    pub fn audio_projection(&self) -> (&Tensor, &Tensor) {
        (self.params.get(self.layout.audio_w), self.params.get(self.layout.audio_b))
    }

    /// Plain-tensor weights of one attention layer (`kind` is `self`, `text` or `audio`).
    pub fn attention_weights(&self, block: usize, kind: &str) -> Option<AttnWeights> {
        let b = self.layout.blocks.get(block)?;
        let ids = match kind {
            "self" => b.self_attn,
            "text" => b.text_attn,
            "audio" => b.audio_attn,
            _ => return None,
        };
        let p = |i| self.params.get(i).clone();
        Some(AttnWeights {
            wq: p(ids.wq),
            bq: p(ids.bq),
            wk: p(ids.wk),
            bk: p(ids.bk),
            wv: p(ids.wv),
            bv: p(ids.bv),
            wo: p(ids.wo),
            bo: p(ids.bo),
        })
    }

    fn bind_attn(&self, g: &mut Graph, ids: AttnIds) -> AttnVars {
        let mut p = |i| g.param(i, self.params.get(i));
        AttnVars {
            wq: p(ids.wq),
            bq: p(ids.bq),
            wk: p(ids.wk),
            bk: p(ids.bk),
            wv: p(ids.wv),
            bv: p(ids.bv),
            wo: p(ids.wo),
            bo: p(ids.bo),
        }
    }

    fn bind_block(&self, g: &mut Graph, b: &BlockIds) -> BlockVars {
        let norms = b.norms.map(|(gm, bt)| (g.param(gm, self.params.get(gm)), g.param(bt, self.params.get(bt))));
        BlockVars {
            shift_w: g.param(b.shift_w, self.params.get(b.shift_w)),
            shift_b: g.param(b.shift_b, self.params.get(b.shift_b)),
            norms,
            self_attn: self.bind_attn(g, b.self_attn),
            text_attn: self.bind_attn(g, b.text_attn),
            audio_attn: self.bind_attn(g, b.audio_attn),
            mlp_w1: g.param(b.mlp_w1, self.params.get(b.mlp_w1)),
            mlp_b1: g.param(b.mlp_b1, self.params.get(b.mlp_b1)),
            mlp_w2: g.param(b.mlp_w2, self.params.get(b.mlp_w2)),
            mlp_b2: g.param(b.mlp_b2, self.params.get(b.mlp_b2)),
        }
    }

    fn p(&self, g: &mut Graph, id: usize) -> Var {
        g.param(id, self.params.get(id))
    }

    fn block_graph(
        &self,
        g: &mut Graph,
        w: &BlockVars,
        x: Var,
        text: Var,
        audio: Var,
        temb: Var,
        audio_spans: Option<Arc<[KeySpan]>>,
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let shift = linear(g, temb, w.shift_w, w.shift_b)?;
        let mut x = g.add_row(x, shift)?;

        let h = g.layer_norm(x, w.norms[0].0, w.norms[0].1, LN_EPS)?;
        let a = attend(g, h, h, &w.self_attn, heads, None)?;
        x = g.add(x, a)?;

        let h = g.layer_norm(x, w.norms[1].0, w.norms[1].1, LN_EPS)?;
        let a = attend(g, h, text, &w.text_attn, heads, None)?;
        x = g.add(x, a)?;

        let h = g.layer_norm(x, w.norms[2].0, w.norms[2].1, LN_EPS)?;
        let a = attend(g, h, audio, &w.audio_attn, heads, audio_spans)?;
        x = g.add(x, a)?;

        let h = g.layer_norm(x, w.norms[3].0, w.norms[3].1, LN_EPS)?;
        let m = linear(g, h, w.mlp_w1, w.mlp_b1)?;
        let m = g.silu(m);
        let m = linear(g, m, w.mlp_w2, w.mlp_b2)?;
        g.add(x, m)
    }

    /// `d_model` time embedding as a `1×d` row.
    fn time_embedding(&self, g: &mut Graph, t: f64) -> Result<Var> {
        let d = self.config.d_model;
        let code = Tensor::new(vec![1, d], ops::sinusoidal(t * 1000.0, d))?;
        let code = g.constant(code);
        let (w1, b1) = (self.p(g, self.layout.time_w1), self.p(g, self.layout.time_b1));
        let (w2, b2) = (self.p(g, self.layout.time_w2), self.p(g, self.layout.time_b2));
        let h = linear(g, code, w1, b1)?;
        let h = g.silu(h);
        linear(g, h, w2, b2)
    }

    /// Text tokens on the graph, embedded with the model's table.
    pub fn text_var(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = self.p(g, self.layout.text_table);
        conditioning::embed_text_graph(g, ids, table)
    }

    /// Audio tokens on the graph: projected features, or the zero block.
    pub fn audio_var(&self, g: &mut Graph, audio: &AudioSource) -> Result<Var> {
        let c = &self.config;
        match audio {
            AudioSource::Features(f) => {
                if f.shape() != [c.frames, c.audio_dim] {
                    return Err(Error::Shape(format!(
                        "audio features {:?}, model expects [{}, {}]",
                        f.shape(),
                        c.frames,
                        c.audio_dim
                    )));
                }
                let fv = g.constant(f.clone());
                let (w, b) = (self.p(g, self.layout.audio_w), self.p(g, self.layout.audio_b));
                conditioning::project_audio_graph(g, fv, w, b)
            }
            AudioSource::Zero => Ok(g.constant(conditioning::zero_speech(c.frames, c.d_model)?.tokens)),
        }
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape != self.config.latent_shape() {
            return Err(Error::Shape(format!(
                "latent {shape:?}, model expects {:?}",
                self.config.latent_shape()
            )));
        }
        Ok(())
    }

    /// Velocity prediction on the graph. `x` holds the latent
    /// (`τ×h×w×c_lat`); `text` is `L×d`, `audio` is `T×d`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, text: Var, audio: Var, t: f64) -> Result<Var> {
        let c = &self.config;
        self.check_latent(g.shape(x))?;
        if g.shape(audio) != [c.frames, c.d_model] {
            return Err(Error::Shape(format!(
                "audio condition {:?}, model expects [{}, {}]",
                g.shape(audio),
                c.frames,
                c.d_model
            )));
        }
        let (s, ch) = (c.seq_len(), c.latent_channels());
        let tokens = g.reshape(x, &[s, ch])?;
        let (w, b) = (self.p(g, self.layout.in_w), self.p(g, self.layout.in_b));
        let h = linear(g, tokens, w, b)?;
        let pos = g.constant(self.positions.clone());
        let mut h = g.add(h, pos)?;
        let temb = self.time_embedding(g, t)?;
        for (i, ids) in self.layout.blocks.iter().enumerate() {
            let bv = self.bind_block(g, ids);
            h = self.block_graph(g, &bv, h, text, audio, temb, self.audio_spans.clone())?;
            if !g.value(h).is_finite() {
                return Err(Error::NumericInstability { block: i });
            }
        }
        let (ng, nb) = self.layout.out_norm;
        let (ng, nb) = (self.p(g, ng), self.p(g, nb));
        let h = g.layer_norm(h, ng, nb, LN_EPS)?;
        let (w, b) = (self.p(g, self.layout.out_w), self.p(g, self.layout.out_b));
        let out = linear(g, h, w, b)?;
        // per-channel, time-dependent multiple of the input latent
        let (sw, sb) = (self.p(g, self.layout.skip_w), self.p(g, self.layout.skip_b));
        let gate = linear(g, temb, sw, sb)?;
        let skip = g.mul_row(tokens, gate)?;
        let out = g.add(out, skip)?;
        let out = g.reshape(out, &c.latent_shape())?;
        if !g.value(out).is_finite() {
            return Err(Error::NumericInstability { block: c.n_blocks });
        }
        Ok(out)
    }

    /// Velocity prediction from raw conditions.
    pub fn predict(&self, g: &mut Graph, x: Var, cond: &Condition, t: f64) -> Result<Var> {
        let text = self.text_var(g, &cond.text_ids)?;
        let audio = self.audio_var(g, &cond.audio)?;
        self.forward_graph(g, x, text, audio, t)
    }

    /// `f_θ(x_t, c, α, t)` on already-embedded conditions.
    pub fn dit_forward(&self, x_t: &VideoLatent, text: &TextCond, audio: &AudioCond, t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(x_t.data.clone());
        let tv = g.constant(text.tokens.clone());
        let av = g.constant(audio.tokens.clone());
        let out = self.forward_graph(&mut g, x, tv, av, t)?;
        Ok(g.value(out).clone())
    }

    /// Forward pass from raw conditions, without recording gradients.
    pub fn velocity(&self, x_t: &Tensor, cond: &Condition, t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let out = self.predict(&mut g, x, cond, t)?;
        Ok(g.value(out).clone())
    }

    /// Time embedding row for `t`, as the blocks see it.
    pub fn time_embedding_value(&self, t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.time_embedding(&mut g, t)?;
        Ok(g.value(v).clone())
    }

    /// One block applied to token matrix `x[S×d]`. The audio mask is
    /// broadcast over the `h·w` tokens of each latent frame.
    pub fn dit_block(
        &self,
        block: usize,
        x: &Tensor,
        text: &TextCond,
        audio: &AudioCond,
        t_emb: &Tensor,
        mask: Option<&WindowMask>,
    ) -> Result<Tensor> {
        let ids = self
            .layout
            .blocks
            .get(block)
            .ok_or(Error::Index { index: block, max: self.config.n_blocks })?;
        let spans = match mask {
            Some(m) => {
                let per_frame = x.shape()[0] / m.frames();
                if per_frame * m.frames() != x.shape()[0] {
                    return Err(Error::Shape(format!(
                        "{} tokens do not split into {} latent frames",
                        x.shape()[0],
                        m.frames()
                    )));
                }
                Some(m.expand(per_frame))
            }
            None => None,
        };
        let mut g = Graph::new();
        let bv = self.bind_block(&mut g, ids);
        let (xv, tv, av, te) = (
            g.constant(x.clone()),
            g.constant(text.tokens.clone()),
            g.constant(audio.tokens.clone()),
            g.constant(t_emb.clone()),
        );
        let out = self.block_graph(&mut g, &bv, xv, tv, av, te, spans)?;
        Ok(g.value(out).clone())
    }
}
