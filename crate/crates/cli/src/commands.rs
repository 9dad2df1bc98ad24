use std::cell::RefCell;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use mocha_core::conditioning::{extract_audio_features, tokenize};
use mocha_core::data::{self, DataConfig, SampleSpec, SyntheticSample};
use mocha_core::eval::{self, AblationConfig, EVAL_TIMES};
use mocha_core::flow::{self, AdamConfig, SamplerConfig, TrainLog};
use mocha_core::model::checkpoint::Checkpoint;
use mocha_core::model::window::{build_window_mask, window_bounds};
use mocha_core::model::{AudioSource, Condition, DiTModel};
use mocha_core::prompts::{self, PromptError};
use mocha_core::train::{run_training, TrainState};
use mocha_core::{Error, Result, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::config::{read_json, sidecar, write_json, GenDataEcho, RunConfig};

// Stdout writes that surface errors (a closed pipe) instead of panicking.
macro_rules! say {
    ($($t:tt)*) => { writeln!(io::stdout().lock(), $($t)*)? };
}
macro_rules! say_raw {
    ($($t:tt)*) => { write!(io::stdout().lock(), $($t)*)? };
}
use crate::{AblateArgs, EvalArgs, Failure, GenDataArgs, InspectWindowArgs, ParsePromptArgs, SampleArgs, TrainArgs};

type CmdResult = std::result::Result<(), Failure>;

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, t.to_bytes())?;
    Ok(())
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::from_bytes(&fs::read(path)?)
}

fn load_model(path: &Path) -> Result<(DiTModel, u64)> {
    let ck = Checkpoint::load(path)?;
    let state = TrainState::from_checkpoint(&ck, AdamConfig::default())?;
    Ok((state.model, ck.step))
}

fn parse_valid_prompt(text: &str) -> std::result::Result<prompts::StructuredPrompt, PromptError> {
    let sp = prompts::parse_prompt(text)?;
    prompts::validate(&sp).map_err(PromptError::Invalid)?;
    Ok(sp)
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let mut cfg: DataConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DataConfig::default(),
    };
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.validate()?;
    if a.n == 0 {
        return Err(Error::Parameter("--n must be positive".into()).into());
    }
    let spec_of = |i: usize| {
        let base = data::corpus_spec(i);
        SampleSpec {
            shot: a.shot.unwrap_or(base.shot),
            n_characters: a.characters.unwrap_or(base.n_characters),
            clip_count: a.clips.unwrap_or(base.clip_count),
            ..base
        }
    };
    spec_of(0).validate()?;
    let samples = data::gen_corpus(a.n, a.seed, &cfg, spec_of)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    data::write_dataset(&samples, &a.out)?;
    let echo = GenDataEcho {
        n: a.n,
        seed: a.seed,
        shot: a.shot,
        clips: a.clips,
        characters: a.characters,
        data: cfg,
    };
    write_json(&sidecar(&a.out), &echo)?;
    say!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.train.batch_size = a.batch_size.unwrap_or(cfg.train.batch_size);
    cfg.train.optimizer.lr = a.lr.unwrap_or(cfg.train.optimizer.lr);
    cfg.validate()?;
    let (data_path, out) = cfg.paths()?;
    let samples = data::read_dataset(data_path)?;
    cfg.check_dataset(&samples)?;

    let mut state = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config != cfg.model {
                return Err(Error::Parameter(format!(
                    "checkpoint {} was trained with a different model config",
                    p.display()
                ))
                .into());
            }
            TrainState::from_checkpoint(&ck, cfg.train.optimizer)?
        }
        None => TrainState::new(cfg.model.clone(), cfg.train.optimizer)?,
    };

    fs::create_dir_all(out)?;
    write_json(&out.join("effective_config.json"), &cfg)?;
    let m = &cfg.model;
    let prepared = samples
        .iter()
        .map(|s| data::prepare(s, m.r, m.p, m.audio_dim, m.vocab).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    let speech: Vec<_> = prepared
        .iter()
        .zip(&samples)
        .filter(|(_, s)| s.spec.speech)
        .map(|(p, _)| Arc::clone(p))
        .collect();
    let pools = data::pools_by_shot(&speech);

    let log_path = out.join("train_log.csv");
    let log = RefCell::new(if a.resume.is_some() && log_path.is_file() {
        TrainLog::append(BufWriter::new(OpenOptions::new().append(true).open(&log_path)?))
    } else {
        TrainLog::new(BufWriter::new(File::create(&log_path)?))?
    });
    let total = cfg.train.total_steps();
    let report_every = (total / 20).max(1);
    let result = run_training(
        &mut state,
        &cfg.train,
        &pools,
        &prepared,
        |step, k, s| {
            log.borrow_mut().record(step, s, k)?;
            if (step + 1) % report_every == 0 || step + 1 == total {
                eprintln!("step {}/{total} stage {k} loss {:.5}", step + 1, s.loss);
            }
            Ok(())
        },
        |k, st| {
            log.borrow_mut().flush()?;
            st.to_checkpoint(json!({ "stage": k })).save(&out.join(format!("stage_{k}.ckpt")))
        },
    );
    log.borrow_mut().flush()?;
    result?;
    state
        .to_checkpoint(json!({ "stage": cfg.train.stages.len() - 1 }))
        .save(&out.join("final.ckpt"))?;
    say!("trained {} steps; checkpoint {}", state.step, out.join("final.ckpt").display());
    Ok(())
}

pub fn sample(a: SampleArgs) -> CmdResult {
    let (model, _) = load_model(&a.checkpoint)?;
    let c = model.config().clone();
    let record = match &a.from_data {
        Some(p) => {
            let mut all = data::read_dataset(p)?;
            if a.index >= all.len() {
                return Err(Error::Index {
                    index: a.index,
                    max: all.len().saturating_sub(1),
                }
                .into());
            }
            Some(all.swap_remove(a.index))
        }
        None => None,
    };
    let text = match (&a.prompt, &a.prompt_file, &record) {
        (Some(t), _, _) => t.clone(),
        (None, Some(p), _) => fs::read_to_string(p)?,
        (None, None, Some(r)) => r.prompt_text(),
        (None, None, None) => {
            return Err(Error::Parameter("need --prompt, --prompt-file or --from-data".into()).into())
        }
    };
    let sp = parse_valid_prompt(&text).map_err(Error::from)?;
    let text_ids = tokenize(&text, c.vocab);

    let audio = if a.no_audio {
        AudioSource::Zero
    } else if let Some(p) = &a.audio {
        let wave = read_tensor(p)?;
        let expect = (c.frames as f64 * f64::from(a.sample_rate) / a.frame_rate).round() as usize;
        if wave.rank() != 1 || wave.len() != expect {
            return Err(Error::Shape(format!(
                "audio has shape {:?}; {} frames at {} fps and {} Hz need {expect} samples",
                wave.shape(),
                c.frames,
                a.frame_rate,
                a.sample_rate
            ))
            .into());
        }
        AudioSource::Features(extract_audio_features(&wave, a.sample_rate, c.frames, c.audio_dim)?)
    } else if let Some(r) = &record {
        check_grid(r, &c)?;
        AudioSource::Features(extract_audio_features(&r.waveform, r.sample_rate, c.frames, c.audio_dim)?)
    } else {
        return Err(Error::Parameter("need --audio, --from-data or --no-audio".into()).into());
    };

    let sampler = SamplerConfig {
        n_steps: a.steps,
        seed: a.seed,
    };
    let cond = Condition { text_ids, audio };
    let latent = flow::sample(&model, &cond, &sampler)?;
    let frame_rate = record.as_ref().map_or(a.frame_rate, |r| r.video.frame_rate);
    let video = eval::decode(&latent, c.r, c.p, frame_rate)?;
    fs::create_dir_all(&a.out)?;
    write_tensor(&a.out.join("latent.tensor"), &latent)?;
    write_tensor(&a.out.join("video.tensor"), &video.frames)?;

    let mut summary = json!({ "frames": video.num_frames(), "steps": a.steps, "seed": a.seed });
    if let Some(r) = record.as_ref().filter(|_| !a.no_audio && a.audio.is_none()) {
        let rep = eval::sync_report(&video, r)?;
        summary["sync_c_proxy"] = json!(rep.sync_c_proxy);
        summary["sync_d_proxy"] = json!(rep.sync_d_proxy);
    }
    if a.csv {
        let (shot, chars) = record
            .as_ref()
            .map_or((a.shot, sp.characters.len().clamp(1, 2)), |r| (r.shot(), r.spec.n_characters));
        let generated = data::mouth_trace(&video, shot, chars);
        let reference = record.as_ref().map(|r| data::mouth_trace(&r.video, shot, chars));
        let mut w = BufWriter::new(File::create(a.out.join("mouth_trace.csv"))?);
        match &reference {
            Some(_) => writeln!(w, "frame,generated,reference")?,
            None => writeln!(w, "frame,generated")?,
        }
        for (f, g) in generated.iter().enumerate() {
            match &reference {
                Some(r) => writeln!(w, "{f},{g:.9e},{:.9e}", r[f])?,
                None => writeln!(w, "{f},{g:.9e}")?,
            }
        }
        w.flush()?;
    }
    write_json(&a.out.join("sample.json"), &summary)?;
    say!("{summary}");
    Ok(())
}

fn check_grid(r: &SyntheticSample, c: &mocha_core::model::ModelConfig) -> Result<()> {
    let grid = (r.video.num_frames(), r.video.height(), r.video.width());
    if grid != (c.frames, c.height, c.width) {
        return Err(Error::Shape(format!(
            "record grid {grid:?} differs from model grid {:?}",
            (c.frames, c.height, c.width)
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    index: usize,
    sync_c_proxy: f64,
    sync_d_proxy: f64,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint_step: u64,
    n: usize,
    mean_sync_c_proxy: f64,
    mean_sync_d_proxy: f64,
    t2v_loss: f64,
    st2v_loss: f64,
    records: Vec<EvalRecord>,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let (model, step) = load_model(&a.checkpoint)?;
    let c = model.config().clone();
    let samples = data::read_dataset(&a.data)?;
    let end = a.n.map_or(samples.len(), |n| a.start.saturating_add(n)).min(samples.len());
    if a.start >= end {
        return Err(Error::Data(format!("no records in range {}..{end}", a.start)).into());
    }
    let chosen = &samples[a.start..end];
    let mut prepared = Vec::with_capacity(chosen.len());
    let mut records = Vec::with_capacity(chosen.len());
    for (i, s) in chosen.iter().enumerate() {
        check_grid(s, &c)?;
        let p = data::prepare(s, c.r, c.p, c.audio_dim, c.vocab)?;
        let sampler = SamplerConfig {
            n_steps: a.steps,
            seed: data::sample_seed(a.seed, a.start + i),
        };
        let rep = eval::sample_and_score(&model, s, &p, &sampler)?;
        records.push(EvalRecord {
            index: a.start + i,
            sync_c_proxy: rep.sync_c_proxy,
            sync_d_proxy: rep.sync_d_proxy,
        });
        prepared.push(Arc::new(p));
    }
    let mean = |f: fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / records.len() as f64;
    let report = EvalReport {
        checkpoint_step: step,
        n: records.len(),
        mean_sync_c_proxy: mean(|r| r.sync_c_proxy),
        mean_sync_d_proxy: mean(|r| r.sync_d_proxy),
        t2v_loss: eval::eval_loss(&model, &prepared, false, &EVAL_TIMES, a.seed)?,
        st2v_loss: eval::eval_loss(&model, &prepared, true, &EVAL_TIMES, a.seed)?,
        records,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json(&a.out, &report)?;
    say!(
        "n={} sync_c_proxy={:.4} sync_d_proxy={:.4} t2v_loss={:.5} st2v_loss={:.5}",
        report.n, report.mean_sync_c_proxy, report.mean_sync_d_proxy, report.t2v_loss, report.st2v_loss
    );
    Ok(())
}

pub fn ablate(a: AblateArgs) -> CmdResult {
    let cfg: AblationConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AblationConfig::default(),
    };
    cfg.validate()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json(&sidecar(&a.out), &cfg)?;
    let every = a.progress;
    let report = eval::run_ablation(&cfg, |v, seed, step, loss| {
        if every > 0 && (step + 1) % every == 0 {
            eprintln!("{v} seed {seed} step {} loss {loss:.5}", step + 1);
        }
    })?;
    write_json(&a.out, &report)?;
    for (v, r) in &report.variants {
        say!(
            "{v}: sync_c {:.4} sync_d {:.4} t2v_loss {:.5} st2v_loss {:.5}",
            r.median_sync_c, r.median_sync_d, r.median_t2v_loss, r.median_st2v_loss
        );
    }
    for c in &report.checks {
        say!("{} {}", if c.passed { "PASS" } else { "FAIL" }, c.detail);
    }
    if !report.passed() {
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.detail.as_str()).collect();
        return Err(Failure::Assertion(failed.join("; ")));
    }
    Ok(())
}

pub fn parse_prompt(a: ParsePromptArgs) -> CmdResult {
    let text = match (a.text, a.file) {
        (Some(t), _) => t,
        (None, Some(p)) => fs::read_to_string(p)?,
        (None, None) => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let sp = parse_valid_prompt(&text).map_err(Error::from)?;
    let canonical = prompts::render_prompt(&sp).map_err(Error::from)?;
    let out = json!({
        "prompt": sp,
        "canonical": canonical,
        "tokens": prompts::token_count(&canonical),
    });
    say!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub fn inspect_window(a: InspectWindowArgs) -> CmdResult {
    if a.r == 0 {
        return Err(Error::Parameter("--r must be positive".into()).into());
    }
    let mask = build_window_mask(a.t / a.r, a.r, a.t, a.mode)?;
    let interior = a.mode.interior_width(a.r);
    let mut csv = String::from("i,lo,hi,width,boundary\n");
    for i in 1..=mask.frames() {
        let (lo, hi) = window_bounds(i, a.r, a.t, a.mode)?;
        let width = hi - lo + 1;
        csv.push_str(&format!("{i},{lo},{hi},{width},{}\n", width != interior));
    }
    match &a.csv {
        Some(p) => {
            say_raw!("{}", mask.render());
            fs::write(p, csv)?;
        }
        None => {
            say_raw!("{}\n{csv}", mask.render());
        }
    }
    Ok(())
}
