//! Parameter update strategies and the weight-averaging rule.
//!
//! Each update algorithm lives behind the [`Optimizer`] trait and is
//! registered by name, so the trainer picks implementations at runtime from
//! the configuration ("sgd" drives the generator, "adam" the discriminator,
//! by default). Optimizer state serializes into the same named-tensor records
//! as network checkpoints.

use crate::error::{Error, Result};
use crate::models::NamedParam;
use crate::tensor::Tensor;

/// An update strategy over a fixed parameter list. Gradients are read from
/// each parameter's grad buffer; state buffers are allocated lazily on the
/// first step.
pub trait Optimizer {
    fn name(&self) -> &'static str;

    /// Applies one descent step at the given learning rate.
    fn step(&mut self, params: &mut [NamedParam], lr: f32) -> Result<()>;

    /// Serializes mutable state as named tensor records under `prefix`.
    fn state_records(&self, prefix: &str) -> Vec<(String, Tensor)>;

    /// Restores state previously produced by [`Optimizer::state_records`].
    fn load_state_records(&mut self, prefix: &str, records: &[(String, Tensor)]) -> Result<()>;
}

/// Shared hyperparameter bag consumed by the registry constructors.
#[derive(Debug, Clone, Copy)]
pub struct OptimHyper {
    pub momentum: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps_hat: f32,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper { momentum: 0.9, weight_decay: 5e-5, beta1: 0.9, beta2: 0.99, eps_hat: 1e-8 }
    }
}

type OptimCtor = fn(&OptimHyper) -> Box<dyn Optimizer>;

/// Name-indexed registry of update strategies.
pub const OPTIMIZER_REGISTRY: &[(&str, OptimCtor)] = &[
    ("sgd", |hp| Box::new(SgdMomentum::new(hp.momentum, hp.weight_decay))),
    ("adam", |hp| Box::new(Adam::new(hp.beta1, hp.beta2, hp.eps_hat))),
];

pub fn build_optimizer(name: &str, hp: &OptimHyper) -> Result<Box<dyn Optimizer>> {
    OPTIMIZER_REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, ctor)| ctor(hp))
        .ok_or_else(|| {
            let known: Vec<&str> = OPTIMIZER_REGISTRY.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown optimizer '{name}', expected one of {known:?}"))
        })
}

pub fn optimizer_names() -> Vec<&'static str> {
    OPTIMIZER_REGISTRY.iter().map(|(n, _)| *n).collect()
}

fn grad_of<'a>(param: &'a NamedParam) -> Result<&'a [f32]> {
    param
        .tensor
        .grad()
        .ok_or_else(|| Error::MissingGrad(param.name.clone()))
}

// ── SGD with momentum and weight decay ──────────────────────────────────

/// buf <- momentum*buf + grad + weight_decay*param; param <- param - lr*buf.
pub struct SgdMomentum {
    momentum: f32,
    weight_decay: f32,
    buffers: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        SgdMomentum { momentum, weight_decay, buffers: Vec::new() }
    }

    fn ensure_buffers(&mut self, params: &[NamedParam]) {
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
    }
}

impl Optimizer for SgdMomentum {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut [NamedParam], lr: f32) -> Result<()> {
        self.ensure_buffers(params);
        if self.buffers.len() != params.len() {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        for (param, buf) in params.iter_mut().zip(&mut self.buffers) {
            let grad = grad_of(param)?.to_vec();
            let values = param.tensor.values_mut();
            for ((v, b), g) in values.iter_mut().zip(buf.iter_mut()).zip(grad) {
                *b = self.momentum * *b + g + self.weight_decay * *v;
                *v -= lr * *b;
            }
        }
        Ok(())
    }

    fn state_records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}meta"),
            Tensor::new(vec![2], vec![self.momentum, self.weight_decay]).unwrap(),
        )];
        for (i, buf) in self.buffers.iter().enumerate() {
            out.push((
                format!("{prefix}buf.{i}"),
                Tensor::new(vec![buf.len()], buf.clone()).unwrap(),
            ));
        }
        out
    }

    fn load_state_records(&mut self, prefix: &str, records: &[(String, Tensor)]) -> Result<()> {
        let meta_name = format!("{prefix}meta");
        let meta = records
            .iter()
            .find(|(n, _)| *n == meta_name)
            .ok_or_else(|| Error::Checkpoint(format!("missing '{meta_name}'")))?;
        self.momentum = meta.1.values()[0];
        self.weight_decay = meta.1.values()[1];
        self.buffers.clear();
        let mut i = 0;
        while let Some((_, t)) = records.iter().find(|(n, _)| *n == format!("{prefix}buf.{i}")) {
            self.buffers.push(t.values().to_vec());
            i += 1;
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Standard bias-corrected Adam.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps_hat: f32,
    step_count: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps_hat: f32) -> Self {
        Adam { beta1, beta2, eps_hat, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u32 {
        self.step_count
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut [NamedParam], lr: f32) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for ((param, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = grad_of(param)?.to_vec();
            let values = param.tensor.values_mut();
            for (((p, m), v), g) in values.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad)
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps_hat);
            }
        }
        Ok(())
    }

    fn state_records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}meta"),
            Tensor::new(
                vec![4],
                vec![self.beta1, self.beta2, self.eps_hat, self.step_count as f32],
            )
            .unwrap(),
        )];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("{prefix}m.{i}"), Tensor::new(vec![m.len()], m.clone()).unwrap()));
            out.push((format!("{prefix}v.{i}"), Tensor::new(vec![v.len()], v.clone()).unwrap()));
        }
        out
    }

    fn load_state_records(&mut self, prefix: &str, records: &[(String, Tensor)]) -> Result<()> {
        let meta_name = format!("{prefix}meta");
        let meta = records
            .iter()
            .find(|(n, _)| *n == meta_name)
            .ok_or_else(|| Error::Checkpoint(format!("missing '{meta_name}'")))?;
        let mv = meta.1.values();
        self.beta1 = mv[0];
        self.beta2 = mv[1];
        self.eps_hat = mv[2];
        self.step_count = mv[3] as u32;
        self.m.clear();
        self.v.clear();
        let mut i = 0;
        loop {
            let m = records.iter().find(|(n, _)| *n == format!("{prefix}m.{i}"));
            let v = records.iter().find(|(n, _)| *n == format!("{prefix}v.{i}"));
            match (m, v) {
                (Some((_, m)), Some((_, v))) => {
                    self.m.push(m.values().to_vec());
                    self.v.push(v.values().to_vec());
                    i += 1;
                }
                _ => break,
            }
        }
        Ok(())
    }
}

// ── polynomial learning-rate decay ──────────────────────────────────────

/// base_lr * (1 - k/max_iter)^power.
pub fn poly_lr(base_lr: f32, k: usize, max_iter: usize, power: f32) -> Result<f32> {
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be positive".into()));
    }
    if k > max_iter {
        return Err(Error::Range(format!("iteration {k} exceeds max_iter {max_iter}")));
    }
    let frac = 1.0 - k as f64 / max_iter as f64;
    Ok((base_lr as f64 * frac.powf(power as f64)) as f32)
}

// ── stochastic weight averaging ─────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwaMode {
    /// theta <- (theta*n + theta_gen)/(n+1) with the configured constant n:
    /// an exponential moving average with factor n/(n+1).
    LiteralEq7,
    /// theta <- (theta*c + theta_gen)/(c+1) with c = number of snapshots
    /// absorbed so far: the exact arithmetic mean of all absorbed snapshots.
    RunningMean,
}

impl SwaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal_eq7" => Ok(SwaMode::LiteralEq7),
            "running_mean" => Ok(SwaMode::RunningMean),
            other => Err(Error::Config(format!("unknown swa mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SwaMode::LiteralEq7 => "literal_eq7",
            SwaMode::RunningMean => "running_mean",
        }
    }
}

/// The averaged generator weights. Accumulation runs in f64 so the running
/// mean stays exact to well below f32 resolution over any realistic number
/// of snapshots; values are rounded to f32 only when exported.
#[derive(Debug, Clone)]
pub struct SwaState {
    theta: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    n: usize,
    update_count: usize,
    mode: SwaMode,
}

impl SwaState {
    /// Starts from the initial generator parameters.
    pub fn new(init: &[NamedParam], n: usize, mode: SwaMode) -> Self {
        let theta = init
            .iter()
            .map(|p| p.tensor.values().iter().map(|&v| v as f64).collect())
            .collect();
        let shapes = init.iter().map(|p| p.tensor.shape().to_vec()).collect();
        SwaState { theta, shapes, n, update_count: 0, mode }
    }

    pub fn update_count(&self) -> usize {
        self.update_count
    }

    pub fn mode(&self) -> SwaMode {
        self.mode
    }

    /// Absorbs the current generator parameters.
    pub fn update(&mut self, theta_gen: &[NamedParam]) -> Result<()> {
        if theta_gen.len() != self.theta.len() {
            return Err(Error::ShapeMismatch(format!(
                "swa holds {} tensors, generator has {}",
                self.theta.len(),
                theta_gen.len()
            )));
        }
        let k = match self.mode {
            SwaMode::LiteralEq7 => self.n,
            SwaMode::RunningMean => self.update_count,
        };
        let inv = 1.0 / (k as f64 + 1.0);
        for (avg, param) in self.theta.iter_mut().zip(theta_gen) {
            if avg.len() != param.tensor.numel() {
                return Err(Error::ShapeMismatch(format!(
                    "swa tensor of {} values vs parameter '{}' of {}",
                    avg.len(),
                    param.name,
                    param.tensor.numel()
                )));
            }
            for (a, &g) in avg.iter_mut().zip(param.tensor.values()) {
                // (a*k + g)/(k+1), written so a == g is an exact fixed point.
                *a += (g as f64 - *a) * inv;
            }
        }
        self.update_count += 1;
        Ok(())
    }

    /// Averaged values rounded to f32, in parameter order.
    pub fn values_f32(&self) -> Vec<Vec<f32>> {
        self.theta
            .iter()
            .map(|t| t.iter().map(|&v| v as f32).collect())
            .collect()
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }
}
