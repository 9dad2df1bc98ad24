//! Flow matching: the linear interpolant between noise and data, its
//! velocity, the regression loss, one optimizer step, and an Euler sampler.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Condition, DiTModel, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Anything that predicts a velocity field over a latent of fixed shape.
pub trait VelocityModel {
    fn latent_shape(&self) -> Vec<usize>;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Records the prediction for `xt` at time `t` on `g`.
    fn predict(&self, g: &mut Graph, xt: Var, cond: &Condition, t: f64) -> Result<Var>;
}

impl VelocityModel for DiTModel {
    fn latent_shape(&self) -> Vec<usize> {
        self.config().latent_shape().to_vec()
    }

    fn params(&self) -> &ParamStore {
        DiTModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        DiTModel::params_mut(self)
    }

    fn predict(&self, g: &mut Graph, xt: Var, cond: &Condition, t: f64) -> Result<Var> {
        DiTModel::predict(self, g, xt, cond, t)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(1 − t)·eps + t·x1`.
pub fn interpolate(eps: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Parameter(format!("t must lie in [0, 1], got {t}")));
    }
    same_shape(eps, x1, "interpolate")?;
    let data = eps
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&e, &x)| (1.0 - t) * e + t * x)
        .collect();
    Tensor::new(eps.shape().to_vec(), data)
}

/// `x1 − eps`, the time derivative of [`interpolate`].
pub fn velocity_target(eps: &Tensor, x1: &Tensor) -> Result<Tensor> {
    same_shape(eps, x1, "velocity_target")?;
    let data = x1.data().iter().zip(eps.data()).map(|(&x, &e)| x - e).collect();
    Tensor::new(eps.shape().to_vec(), data)
}

/// Mean squared error over all elements.
pub fn fm_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target, "fm_loss")?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// One drawn training point on the probability path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x1: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub xt: Tensor,
    pub v_target: Tensor,
}

impl FlowSample {
    /// Draws `t ~ U[0, 1)` and then `eps ~ N(0, I)`, in that order.
    pub fn draw<R: Rng + ?Sized>(x1: &Tensor, rng: &mut R) -> Result<Self> {
        let t: f64 = rng.random();
        let eps = Tensor::randn(x1.shape(), rng);
        Self::at(x1, eps, t)
    }

    pub fn at(x1: &Tensor, eps: Tensor, t: f64) -> Result<Self> {
        let xt = interpolate(&eps, x1, t)?;
        let v_target = velocity_target(&eps, x1)?;
        Ok(Self {
            x1: x1.clone(),
            eps,
            t,
            xt,
            v_target,
        })
    }
}

/// A data latent with its conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub x1: Tensor,
    pub cond: Condition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from `grads` (one vector per parameter).
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                p[k] -= c.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }
    }

    /// Moments as named tensors, for checkpoints.
    pub fn to_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * params.len() + 1);
        out.push(("adam.step".to_string(), Tensor::from_vec(vec![self.step as f64])));
        for (i, (name, t)) in params.iter().enumerate() {
            out.push((format!("adam.m.{name}"), Tensor::new(t.shape().to_vec(), self.m[i].clone()).expect("param shape")));
            out.push((format!("adam.v.{name}"), Tensor::new(t.shape().to_vec(), self.v[i].clone()).expect("param shape")));
        }
        out
    }

    pub fn from_tensors(config: AdamConfig, params: &ParamStore, find: impl Fn(&str) -> Option<Tensor>) -> Result<Self> {
        let missing = |n: &str| Error::Format(format!("checkpoint lacks optimizer tensor {n}"));
        let step = find("adam.step").ok_or_else(|| missing("adam.step"))?.data()[0] as u64;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            for (prefix, dst) in [("adam.m", &mut m), ("adam.v", &mut v)] {
                let key = format!("{prefix}.{name}");
                let s = find(&key).ok_or_else(|| missing(&key))?;
                if s.shape() != t.shape() {
                    return Err(Error::Format(format!("{key} has shape {:?}, expected {:?}", s.shape(), t.shape())));
                }
                dst.push(s.into_data());
            }
        }
        Ok(Self { config, step, m, v })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub t_mean: f64,
    /// Norm of the batch-mean gradient before clipping.
    pub grad_norm: f64,
}

/// Batch-mean loss and gradient at the given flow samples, without updating.
pub fn loss_and_grads<M: VelocityModel + ?Sized>(
    model: &M,
    batch: &[TrainExample],
    samples: &[FlowSample],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let params = model.params();
    let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (index, (ex, s)) in batch.iter().zip(samples).enumerate() {
        let mut g = Graph::new();
        let xt = g.constant(s.xt.clone());
        let pred = model.predict(&mut g, xt, &ex.cond, s.t)?;
        let target = g.constant(s.v_target.clone());
        let loss = g.mse(pred, target)?;
        let l = g.value(loss).data()[0];
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { index, t: s.t });
        }
        total += l;
        let gr = g.backward_scaled(loss, scale)?;
        for (pid, gv) in gr.params() {
            grads[pid].iter_mut().zip(gv).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total * scale, grads))
}

fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Draws one flow sample per example, takes the batch-mean loss and applies
/// one Adam update.
pub fn train_step<M: VelocityModel + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    batch: &[TrainExample],
    opt: &mut Adam,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty training batch".into()));
    }
    let samples = batch
        .iter()
        .map(|ex| FlowSample::draw(&ex.x1, rng))
        .collect::<Result<Vec<_>>>()?;
    let (loss, mut grads) = loss_and_grads(model, batch, &samples)?;
    let grad_norm = global_norm(&grads);
    if let Some(clip) = opt.config.clip {
        if grad_norm > clip {
            let s = clip / grad_norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    opt.update(model.params_mut(), &grads);
    Ok(StepStats {
        loss,
        t_mean: samples.iter().map(|s| s.t).sum::<f64>() / samples.len() as f64,
        grad_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 20, seed: 0 }
    }
}

/// Euler integration of the learned field from noise at `t = 0` to `t = 1`.
pub fn sample<M: VelocityModel + ?Sized>(model: &M, cond: &Condition, cfg: &SamplerConfig) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_with_rng(model, cond, cfg.n_steps, &mut rng)
}

pub fn sample_with_rng<M: VelocityModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &Condition,
    n_steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Parameter("sampler needs at least one step".into()));
    }
    let mut x = Tensor::randn(&model.latent_shape(), rng);
    let dt = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let t = k as f64 / n_steps as f64;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let v = model.predict(&mut g, xv, cond, t)?;
        let v = g.value(v);
        same_shape(v, &x, "sampler velocity")?;
        x.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a += dt * b);
        if !x.is_finite() {
            return Err(Error::SamplerDiverged { step: k });
        }
    }
    Ok(x)
}

/// Comma-separated per-step training log.
pub struct TrainLog<W: Write> {
    out: W,
}

impl<W: Write> TrainLog<W> {
    pub const HEADER: &'static str = "step,t_mean,loss,grad_norm,stage";

    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(Self { out })
    }

    /// Continues a log whose header is already written.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, step: u64, s: &StepStats, stage: usize) -> std::io::Result<()> {
        writeln!(self.out, "{step},{:.6},{:.9e},{:.6e},{stage}", s.t_mean, s.loss, s.grad_norm)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn interpolate_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = Tensor::randn(&[3, 4], &mut rng);
        let x1 = Tensor::randn(&[3, 4], &mut rng);
        assert_eq!(interpolate(&eps, &x1, 0.0).unwrap(), eps);
        assert_eq!(interpolate(&eps, &x1, 1.0).unwrap(), x1);
    }

    #[test]
    fn interpolate_midpoint_scalar() {
        let r = interpolate(&Tensor::scalar(0.0), &Tensor::scalar(2.0), 0.5).unwrap();
        assert_eq!(r.data(), &[1.0]);
    }

    #[test]
    fn interpolate_rejects_t_outside_unit_interval() {
        let z = Tensor::zeros(&[2]);
        assert!(matches!(interpolate(&z, &z, 1.5), Err(Error::Parameter(_))));
        assert!(matches!(interpolate(&z, &z, -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn velocity_examples() {
        let v = velocity_target(&Tensor::scalar(1.0), &Tensor::scalar(3.0)).unwrap();
        assert_eq!(v.data(), &[2.0]);
        let x = Tensor::full(&[3], 0.7);
        assert!(velocity_target(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(velocity_target(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn velocity_is_time_derivative_of_interpolant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = Tensor::randn(&[5, 3], &mut rng);
        let x1 = Tensor::randn(&[5, 3], &mut rng);
        let v = velocity_target(&eps, &x1).unwrap();
        let h = 1e-6;
        for &t in &[0.1, 0.5, 0.9] {
            let a = interpolate(&eps, &x1, t + h).unwrap();
            let b = interpolate(&eps, &x1, t - h).unwrap();
            for i in 0..v.len() {
                let fd = (a.data()[i] - b.data()[i]) / (2.0 * h);
                assert!((fd - v.data()[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let t = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        assert_eq!(fm_loss(&t, &t).unwrap(), 0.0);
        let p = Tensor::from_vec(t.data().iter().map(|v| v + 1.0).collect());
        assert_eq!(fm_loss(&p, &t).unwrap(), 1.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = Tensor::randn(&[4, 3], &mut rng);
        let pred = Tensor::randn(&[4, 3], &mut rng);
        let err = grad_check(
            |g, x| {
                let t = g.constant(target.clone());
                g.mse(x, t)
            },
            &pred,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let mut g = Graph::new();
        let x = g.input(pred.clone());
        let t = g.constant(target.clone());
        let l = g.mse(x, t).unwrap();
        let gr = g.backward(l).unwrap();
        for (i, &gv) in gr.wrt(x).unwrap().iter().enumerate() {
            let expect = 2.0 * (pred.data()[i] - target.data()[i]) / 12.0;
            assert!((gv - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::from_vec(vec![1.0, -1.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            clip: None,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &ps);
        opt.update(&mut ps, &[vec![3.0, -0.5]]);
        let w = ps.get(0).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn adam_state_round_trips_through_tensors() {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor::ones(&[2, 2]));
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        opt.update(&mut ps, &[vec![0.1, 0.2, 0.3, 0.4]]);
        let named = opt.to_tensors(&ps);
        let back = Adam::from_tensors(opt.config, &ps, |n| {
            named.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone())
        })
        .unwrap();
        assert_eq!(back, opt);
    }

    #[test]
    fn log_format() {
        let mut log = TrainLog::new(Vec::new()).unwrap();
        log.record(
            3,
            &StepStats {
                loss: 0.5,
                t_mean: 0.25,
                grad_norm: 1.0,
            },
            1,
        )
        .unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,t_mean,loss,grad_norm,stage");
        let fields: Vec<_> = lines[1].split(',').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], "3");
        assert_eq!(fields[2].parse::<f64>().unwrap(), 0.5);
    }
}
