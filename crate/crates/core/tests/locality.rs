use mocha_core::conditioning::{embed_text, project_audio, AudioCond, TextCond, VideoLatent};
use mocha_core::model::{DiTModel, ModelConfig};
use mocha_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(windowed: bool) -> DiTModel {
    DiTModel::new(ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_blocks: 1,
        r: 4,
        p: 4,
        frames: 32,
        height: 8,
        width: 8,
        audio_dim: 4,
        vocab: 16,
        windowed_audio: windowed,
        seed: 5,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn inputs(m: &DiTModel, seed: u64) -> (VideoLatent, TextCond, AudioCond) {
    let c = m.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = VideoLatent::new(Tensor::randn(&c.latent_shape(), &mut rng), c.r, c.p).unwrap();
    let text = embed_text(&[1, 2, 3], m.text_table()).unwrap();
    let (w, b) = m.audio_projection();
    let audio = project_audio(&Tensor::randn(&[c.frames, c.audio_dim], &mut rng), w, b).unwrap();
    (x, text, audio)
}

fn frame_rows(out: &Tensor, m: &DiTModel, f: usize) -> Vec<f64> {
    let n = out.len() / m.config().latent_frames();
    out.data()[f * n..(f + 1) * n].to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn audio_outside_window_never_reaches_frame(seed in any::<u64>()) {
        let m = model(true);
        let mask = m.window_mask().unwrap();
        let (x, text, audio) = inputs(&m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let f = rng.random_range(0..mask.frames());
        let outside: Vec<usize> = (0..mask.tokens()).filter(|&j| !mask.allows(f, j)).collect();
        let inside: Vec<usize> = (0..mask.tokens()).filter(|&j| mask.allows(f, j)).collect();
        let t = rng.random_range(0.0..1.0);
        let base = m.dit_forward(&x, &text, &audio, t).unwrap();
        let d = m.config().d_model;
        let bump = |j: usize, rng: &mut ChaCha8Rng| {
            let mut a = audio.clone();
            a.tokens.data_mut()[j * d..(j + 1) * d].iter_mut().for_each(|v| *v += rng.random_range(0.5..2.0));
            a
        };
        let j = outside[rng.random_range(0..outside.len())];
        let out = m.dit_forward(&x, &text, &bump(j, &mut rng), t).unwrap();
        prop_assert_eq!(frame_rows(&out, &m, f), frame_rows(&base, &m, f));
        let j = inside[rng.random_range(0..inside.len())];
        let out = m.dit_forward(&x, &text, &bump(j, &mut rng), t).unwrap();
        prop_assert_ne!(frame_rows(&out, &m, f), frame_rows(&base, &m, f));
    }
}

#[test]
fn dense_audio_attention_is_not_local() {
    let m = model(false);
    let (x, text, audio) = inputs(&m, 3);
    let base = m.dit_forward(&x, &text, &audio, 0.5).unwrap();
    let mut a = audio.clone();
    let d = m.config().d_model;
    let last = m.config().frames - 1;
    a.tokens.data_mut()[last * d..].iter_mut().for_each(|v| *v += 1.0);
    let out = m.dit_forward(&x, &text, &a, 0.5).unwrap();
    assert_ne!(frame_rows(&out, &m, 0), frame_rows(&base, &m, 0));
}
