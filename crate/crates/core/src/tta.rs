//! Test-time adaptation by multi-task entropy minimization.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::merge::AdaMergingModel;
use crate::model::{Batch, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::wemoe::UpscaledModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTAConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TTAConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl TTAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("TTA batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("TTA learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub task_id: usize,
    pub entropy_loss: f64,
    /// Mean routing weight of each site on this step's batch (empty for AdaMerging).
    pub site_mean_weight: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptTrace {
    pub records: Vec<TraceRecord>,
}

impl AdaptTrace {
    /// Losses of `task` in step order.
    pub fn losses(&self, task: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.task_id == task)
            .map(|r| r.entropy_loss)
            .collect()
    }
}

/// Mean entropy of the row-wise softmax, natural log, `p` clamped at `1e-12`.
pub fn entropy_loss<T: Real>(logits: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let e = tape.entropy(l)?;
    Ok(tape.value(e).data()[0])
}

/// A model whose trainable parameters are adapted at test time.
pub trait Adaptable<T: Real> {
    /// Records logits; returns them with the trainable leaves (in
    /// `trainable_mut` order) and any per-site routing weights.
    fn record(&self, tape: &mut Tape<T>, cfg: &ModelConfig, batch: &Batch<T>) -> Result<(Var, Vec<Var>, Vec<Var>)>;

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

impl<T: Real> Adaptable<T> for UpscaledModel<T> {
    fn record(&self, tape: &mut Tape<T>, _cfg: &ModelConfig, batch: &Batch<T>) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let r = UpscaledModel::record(self, tape, batch)?;
        let leaves = r.router_vars.into_iter().flatten().collect();
        Ok((r.logits, leaves, r.weights))
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.router_tensors_mut()
    }
}

impl<T: Real> Adaptable<T> for AdaMergingModel<T> {
    fn record(&self, tape: &mut Tape<T>, cfg: &ModelConfig, batch: &Batch<T>) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let (logits, coeffs) = AdaMergingModel::record(self, tape, cfg, batch)?;
        Ok((logits, coeffs, Vec::new()))
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.coeffs_mut().iter_mut().collect()
    }
}

/// Entropy minimization over unlabeled per-task test sets, visiting tasks
/// round-robin. Each task's rows are shuffled once from `cfg.seed` and
/// consumed in consecutive windows of `batch_size`, wrapping around.
pub fn adapt<T: Real, M: Adaptable<T>>(
    model: &mut M,
    model_cfg: &ModelConfig,
    streams: &[Batch<T>],
    cfg: &TTAConfig,
) -> Result<AdaptTrace> {
    cfg.validate()?;
    if streams.is_empty() {
        return Err(Error::Config("adapt needs at least one test stream".into()));
    }
    if let Some(s) = streams.iter().find(|s| s.is_empty()) {
        return Err(Error::Config(format!("test stream of task {} is empty", s.task_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let orders: Vec<Vec<usize>> = streams
        .iter()
        .map(|s| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let mut cursors = alloc::vec![0usize; streams.len()];
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut trace = AdaptTrace::default();
    for step in 0..cfg.steps {
        let k = step % streams.len();
        let stream = &streams[k];
        let rows: Vec<usize> = (0..cfg.batch_size.min(stream.len()))
            .map(|i| orders[k][(cursors[k] + i) % stream.len()])
            .collect();
        cursors[k] = (cursors[k] + rows.len()) % stream.len();
        let batch = stream.gather(&rows)?;

        let mut tape = Tape::new();
        let (logits, leaves, weights) = model.record(&mut tape, model_cfg, &batch)?;
        let loss = tape.entropy(logits)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("entropy loss"));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor<T>> = leaves.iter().map(|&v| grads.wrt(v)).collect();
        let site_mean_weight = weights.iter().map(|&w| tape.value(w).mean().as_f64()).collect();
        let mut params = model.trainable_mut();
        opt.step(&mut params, &g)?;
        trace.records.push(TraceRecord {
            step,
            task_id: stream.task_id,
            entropy_loss: value.as_f64(),
            site_mean_weight,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let fair = Tensor::<f64>::from_slice([1, 2], &[0.0, 0.0]).unwrap();
        assert!((entropy_loss(&fair).unwrap() - core::f64::consts::LN_2).abs() < 1e-6);
        let uniform = Tensor::<f64>::zeros([3, 5]);
        assert!((entropy_loss(&uniform).unwrap() - 5f64.ln()).abs() < 1e-12);
        let sure = Tensor::<f32>::from_slice([1, 3], &[200.0, 0.0, 0.0]).unwrap();
        assert!(entropy_loss(&sure).unwrap() < 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        let c = TTAConfig {
            batch_size: 0,
            ..TTAConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TTAConfig {
            learning_rate: -1.0,
            ..TTAConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
