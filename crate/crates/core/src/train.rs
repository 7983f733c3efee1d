//! SGD with momentum and weight decay, linear warmup then cosine decay, and a
//! small trainer over the synthetic scene set.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::anchors::{default_templates, fit_anchor_3d_stats};
use crate::error::{arg_err, Result};
use crate::loss::LossConfig;
use crate::model::{loss_and_grads, Model, ModelConfig};
use crate::parallel::Exec;
use crate::scene::{stats_samples, Scene};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr_target: f64,
    pub lr_floor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_target: 0.004,
            lr_floor: 4e-8,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            warmup_epochs: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.lr_target,
            self.lr_floor,
            self.momentum,
            self.weight_decay,
            self.warmup_epochs,
        ];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.batch_size == 0 {
            return Err(arg_err("TrainConfig", "all settings must be positive"));
        }
        if self.lr_floor > self.lr_target {
            return Err(arg_err("TrainConfig", "lr floor exceeds target"));
        }
        Ok(())
    }
}

/// Learning-rate curve over steps `0..=final_step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub target: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub final_step: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize, final_step: usize) -> Self {
        let warmup =
            ((cfg.warmup_epochs * steps_per_epoch as f64).round() as usize).min(final_step);
        Self {
            target: cfg.lr_target,
            floor: cfg.lr_floor,
            warmup_steps: warmup,
            final_step,
        }
    }

    /// Linear from 0 at step 0 to the target at the end of warmup, then
    /// cosine down to the floor at `final_step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.target * step as f64 / self.warmup_steps as f64;
        }
        let span = self.final_step.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.target;
        }
        let t = (step.min(self.final_step) - self.warmup_steps) as f64 / span as f64;
        let c = 0.5 * (1.0 + (PI * t).cos());
        self.target * c + self.floor * (1.0 - c)
    }
}

pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize, final_step: usize) -> f64 {
    LrSchedule::new(cfg, steps_per_epoch, final_step).lr_at(step)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    /// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Vec<f64>],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(arg_err("sgd_step", "parameter and gradient counts differ"));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.numel() != g.len() || v.len() != g.len() {
                return Err(arg_err(
                    "sgd_step",
                    "gradient shape does not match parameter",
                ));
            }
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

pub fn sgd_step(
    opt: &mut Sgd,
    params: Vec<&mut Tensor>,
    grads: &[Vec<f64>],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    opt.step(params, grads, lr, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    pub l2d: f64,
    pub l3d: f64,
    pub total: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,lr,l_cls,l_2d,l_3d,l_total\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:e},{},{},{},{}",
            r.step, r.lr, r.cls, r.l2d, r.l3d, r.total
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub exec: Exec,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            exec: Exec::Parallel,
        }
    }
}

/// A model with the 36 default templates fitted to `scenes`.
pub fn fitted_model(scenes: &[Scene], cfg: &ModelConfig) -> Result<Model> {
    let mut templates = default_templates();
    fit_anchor_3d_stats(&mut templates, &stats_samples(scenes)?, 0.5)?;
    Model::new(cfg.clone(), templates)
}

/// Trains for `steps` updates, cycling through `scenes` in fixed batches.
///
/// Row `i` of the trace is the loss on batch `i mod n_batches` before update
/// `i`; the last row (`i = steps`) is evaluated after all updates.
pub fn train_toy(
    scenes: &[Scene],
    steps: usize,
    cfg: &ToyConfig,
) -> Result<(Model, Vec<TraceRow>)> {
    cfg.train.validate()?;
    let bs = cfg.train.batch_size;
    if scenes.len() < bs {
        return Err(arg_err("train_toy", format!("need at least {bs} scenes")));
    }
    let n_batches = scenes.len() / bs;
    let schedule = LrSchedule::new(&cfg.train, n_batches, steps);
    let mut model = fitted_model(scenes, &cfg.model)?;
    let mut opt = Sgd::default();
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let b = step % n_batches;
        let batch: Vec<&Scene> = scenes[b * bs..(b + 1) * bs].iter().collect();
        let (v, grads) = loss_and_grads(&model, &batch, &cfg.loss, cfg.exec)?;
        let lr = schedule.lr_at(step);
        trace.push(TraceRow {
            step,
            lr,
            cls: v.cls,
            l2d: v.l2d,
            l3d: v.l3d,
            total: v.total,
        });
        if step < steps {
            opt.step(model.params_mut(), &grads, lr, &cfg.train)?;
        }
    }
    Ok((model, trace))
}
