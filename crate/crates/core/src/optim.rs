//! Adam optimizer with named parameters, serializable moments, gradient
//! clipping, and learning-rate schedules.
//!
//! The optimizer is hand-rolled rather than reused because resumable
//! training needs the first/second moments and the step counter to
//! round-trip through checkpoints; the off-the-shelf optimizers keep that
//! state private. Semantics are standard Adam with bias correction.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};

use crate::checkpoint::{Checkpoint, TensorData};
use crate::error::{CoreError, CoreResult};

/// A named collection of trainable variables. Names are hierarchical
/// (`"blocks.0.attn.q.weight"`) and double as checkpoint tensor names.
#[derive(Debug, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a variable under `name`; duplicate names are a bug.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) -> CoreResult<()> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(CoreError::contract(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.vars.insert(name, var);
        Ok(())
    }

    /// Creates and registers a variable from explicit values.
    pub fn create(
        &mut self,
        name: impl Into<String>,
        values: Vec<f32>,
        shape: &[usize],
        device: &Device,
    ) -> CoreResult<Tensor> {
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, device)?)?;
        let tensor = var.as_tensor().clone();
        self.insert(name, var)?;
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> CoreResult<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| CoreError::contract(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every parameter into `ckpt` under its own name.
    pub fn write_to(&self, ckpt: &mut Checkpoint) -> CoreResult<()> {
        for (name, var) in &self.vars {
            ckpt.insert(name.clone(), TensorData::from_candle(var.as_tensor())?);
        }
        Ok(())
    }

    /// Overwrites every parameter from `ckpt`, validating shapes.
    pub fn read_from(&self, ckpt: &Checkpoint) -> CoreResult<()> {
        for (name, var) in &self.vars {
            let data = ckpt.expect(name)?;
            if data.shape != var.dims() {
                return Err(CoreError::contract(format!(
                    "parameter {name:?} has shape {:?} but checkpoint stores {:?}",
                    var.dims(),
                    data.shape
                )));
            }
            var.set(&data.to_candle(var.device())?)?;
        }
        Ok(())
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Learning rate is passed per step so a
/// schedule can drive it; moments live in f32 on the same device as the
/// parameters.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    /// Completed update count (the `t` in bias correction).
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Global L2 norm over all gradients present in `grads`.
    pub fn grad_norm(params: &ParamSet, grads: &GradStore) -> CoreResult<f64> {
        let mut sq_sum = 0.0f64;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq_sum += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq_sum.sqrt())
    }

    /// One Adam update at learning rate `lr`. When `max_grad_norm` is
    /// set, gradients are jointly rescaled so their global norm does not
    /// exceed it. Parameters without a gradient this step are untouched.
    pub fn step(
        &mut self,
        params: &ParamSet,
        grads: &GradStore,
        lr: f64,
        max_grad_norm: Option<f64>,
    ) -> CoreResult<()> {
        let mut named = BTreeMap::new();
        for (name, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                named.insert(name.clone(), g.clone());
            }
        }
        self.step_named(params, &named, lr, max_grad_norm)
    }

    /// [`Adam::step`] over gradients keyed by parameter name — the form
    /// gradient accumulation produces when several backward passes are
    /// summed outside a single `GradStore`.
    pub fn step_named(
        &mut self,
        params: &ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        max_grad_norm: Option<f64>,
    ) -> CoreResult<()> {
        let scale = match max_grad_norm {
            Some(max) => {
                let mut sq_sum = 0.0f64;
                for g in grads.values() {
                    sq_sum +=
                        g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                }
                let norm = sq_sum.sqrt();
                if !norm.is_finite() {
                    return Err(CoreError::Divergence(format!(
                        "gradient norm is {norm} at optimizer step {}",
                        self.t + 1
                    )));
                }
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (name, var) in params.iter() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            // Sever any backprop references the gradient still carries:
            // moments persist across steps, and moments built from
            // tracked gradients would chain every step's graph fragments
            // into an unbounded leak.
            let grad = grad.detach();
            let grad = if scale != 1.0 { (grad * scale)? } else { grad };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => grad.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => grad.zeros_like()?,
            };
            let m = ((&m_prev * self.cfg.beta1)? + (&grad * (1.0 - self.cfg.beta1))?)?;
            let v = ((&v_prev * self.cfg.beta2)? + (grad.sqr()? * (1.0 - self.cfg.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat * lr)?.div(&(v_hat.sqrt()? + self.cfg.eps)?)?;
            var.set(&var.as_tensor().sub(&update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Writes moments and step counter into `ckpt` under `{ns}.*` names
    /// (namespace them when a checkpoint holds several optimizers).
    pub fn write_to(&self, ckpt: &mut Checkpoint, ns: &str) -> CoreResult<()> {
        for (name, m) in &self.m {
            ckpt.insert(format!("{ns}.m.{name}"), TensorData::from_candle(m)?);
        }
        for (name, v) in &self.v {
            ckpt.insert(format!("{ns}.v.{name}"), TensorData::from_candle(v)?);
        }
        ckpt.insert(format!("{ns}.t"), TensorData::new(vec![1], vec![self.t as f32])?);
        Ok(())
    }

    /// Restores moments and step counter saved by [`Adam::write_to`]
    /// under the same namespace. Missing `{ns}.*` tensors mean the
    /// checkpoint carries no such state; moments start fresh in that case.
    pub fn read_from(&mut self, ckpt: &Checkpoint, ns: &str, device: &Device) -> CoreResult<()> {
        self.m.clear();
        self.v.clear();
        self.t = 0;
        let Some(t_data) = ckpt.tensors.get(&format!("{ns}.t")) else {
            return Ok(());
        };
        self.t = t_data.values.first().copied().unwrap_or(0.0) as u64;
        let m_prefix = format!("{ns}.m.");
        let v_prefix = format!("{ns}.v.");
        for (name, data) in &ckpt.tensors {
            if let Some(param) = name.strip_prefix(&m_prefix) {
                self.m.insert(param.to_string(), data.to_candle(device)?);
            } else if let Some(param) = name.strip_prefix(&v_prefix) {
                self.v.insert(param.to_string(), data.to_candle(device)?);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedules, applied multiplicatively to a base rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// Base rate throughout.
    Constant,
    /// `base * gamma^epoch` where `epoch = step / steps_per_epoch`.
    ExponentialPerEpoch { gamma: f64, steps_per_epoch: usize },
    /// Linear warmup to the base rate, then inverse-square-root decay.
    WarmupInvSqrt { warmup_steps: usize },
}

impl LrSchedule {
    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, base_lr: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base_lr,
            LrSchedule::ExponentialPerEpoch {
                gamma,
                steps_per_epoch,
            } => {
                let epoch = step / steps_per_epoch.max(1) as u64;
                base_lr * gamma.powi(epoch as i32)
            }
            LrSchedule::WarmupInvSqrt { warmup_steps } => {
                let w = warmup_steps.max(1) as f64;
                let s = (step + 1) as f64;
                base_lr * (s / w).min((w / s).sqrt())
            }
        }
    }
}

/// Standard-normal draws via Box–Muller on a seeded stream. Model
/// initialization goes through this (rather than the device RNG) so
/// builds are reproducible from a seed alone.
pub(crate) fn randn_vec(rng: &mut rand_chacha::ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    use rand::Rng;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push((r * theta.cos() * std) as f32);
        if out.len() < n {
            out.push((r * theta.sin() * std) as f32);
        }
    }
    out
}

/// Fails with [`CoreError::Divergence`] when a loss value is not finite.
pub fn check_finite(value: f64, what: &str) -> CoreResult<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CoreError::Divergence(format!("{what} is {value}")))
    }
}
