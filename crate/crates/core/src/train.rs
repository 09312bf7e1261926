//! Mini-batch Adam with linear warmup and cosine decay.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{evaluate_loss, ApcdeModel, HeadTargets, McDraws};
use crate::data::Checkpoint;
use crate::error::{Error, ErrorCategory, Result};
use crate::numeric::Tensor;
use crate::par::Execution;

/// Consecutive non-finite steps tolerated before giving up.
pub const DIVERGENCE_STEPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mc_samples: usize,
    pub seed: u64,
    /// Global gradient-norm bound; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            peak_lr: 5e-4,
            warmup_epochs: 10,
            final_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mc_samples: 1000,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("peak_lr", self.peak_lr),
            ("final_lr", self.final_lr),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::Config("train.batch_size and train.mc_samples must be ≥ 1".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs ({}) must be below train.epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("train.clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Warmup length in steps: `warmup_epochs × steps_per_epoch`, with the
/// steps per epoch recovered from `total_steps / epochs`.
pub fn warmup_steps(total_steps: usize, config: &TrainConfig) -> usize {
    if config.epochs == 0 {
        0
    } else {
        config.warmup_epochs * (total_steps / config.epochs)
    }
}

/// Learning rate at optimizer step `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let (peak, fin) = (config.peak_lr, config.final_lr);
    let w = warmup_steps(total_steps, config);
    if step < w {
        return peak * (step + 1) as f64 / w as f64;
    }
    if total_steps <= w {
        return fin;
    }
    let frac = (step - w) as f64 / (total_steps - w) as f64;
    fin + 0.5 * (peak - fin) * (1.0 + (PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros_like(p)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Argument("parameter, gradient and state counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Argument(format!("shape mismatch for parameter {i}")));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { param: i });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            *g = g.scale(s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!("epoch {} loss {:.10e} lr {:.6e}", self.epoch, self.mean_loss, self.lr)
    }
}

/// Independent, reproducible random streams derived from the seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Fits `model` to `(y, targets)`. Actnorm layers not yet initialized are
/// initialized from the first batch. Epoch logs go to `log` when given.
pub fn train(
    mut model: ApcdeModel,
    y: &Tensor,
    targets: &[HeadTargets],
    config: &TrainConfig,
    exec: Execution,
    mut log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    config.validate()?;
    model.base.validate(model.layout())?;
    let n = y.rows();
    if n == 0 {
        return Err(Error::DegenerateData("empty training set".into()));
    }
    model.base.check_targets(targets, n)?;
    model.base.mc_samples = config.mc_samples;

    let mut shuffle_rng = stream(config.seed, 1);
    let mut mc_rng = stream(config.seed, 2);
    let spe = config.steps_per_epoch(n);
    let total = config.epochs * spe;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut shuffle_rng);
    if !model.flow.is_initialized() {
        let first = &order[..config.batch_size.min(n)];
        model.flow.initialize_actnorm(&y.select_rows(first))?;
    }

    let mut adam = AdamState::new(&model.params());
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let mut bad_streak = 0;
    for epoch in 0..config.epochs {
        if epoch > 0 {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            lr = lr_at(step, total, config);
            let yb = y.select_rows(batch);
            let tb: Vec<HeadTargets> = targets.iter().map(|t| t.select(batch)).collect();
            let draws = McDraws::generate(&model.base, config.mc_samples, &mut mc_rng);
            let outcome = evaluate_loss(&model, &yb, &tb, &draws, true, exec).and_then(|eval| {
                let mut grads = eval.grads.expect("requested");
                if let Some(c) = config.clip_norm {
                    clip(&mut grads, c);
                }
                adam_step(&mut model.params_mut(), &grads, &mut adam, lr, config)?;
                Ok(eval.loss)
            });
            step += 1;
            match outcome {
                Ok(loss) => {
                    bad_streak = 0;
                    loss_sum += loss * batch.len() as f64;
                    seen += batch.len();
                }
                Err(e) if e.category() == ErrorCategory::Numerical => {
                    bad_streak += 1;
                    if bad_streak >= DIVERGENCE_STEPS {
                        let last_log = trace
                            .last()
                            .map(EpochLog::line)
                            .unwrap_or_else(|| "none".into());
                        return Err(Error::Divergence {
                            epoch,
                            step: step - 1,
                            last_log,
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let entry = EpochLog {
            epoch,
            mean_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            lr,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", entry.line()).map_err(|e| Error::io("<loss log>", e))?;
        }
        trace.push(entry);
    }
    Ok(Checkpoint {
        model,
        train_config: Some(config.clone()),
        loss_trace: trace,
        head_columns: Vec::new(),
    })
}

#[cfg(test)]
mod tests;
