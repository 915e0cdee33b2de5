//! Synthetic token-classification tasks, training loops and input corruptions.
//!
//! A task draws every token as `s + sep · P[c, n] + ε`: a task signature `s`
//! shared by all its samples, a class prototype restricted to a task-specific
//! feature subspace, and isotropic noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{bind, forward_on_tape, Batch, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::NamedParamSet;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Stable 64-bit sub-seed for `(seed, label, index)`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed
        .to_le_bytes()
        .iter()
        .chain(label.as_bytes())
        .chain(&index.to_le_bytes())
    {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub separation: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Standard deviation of the per-entry noise.
    pub noise: f64,
    /// Norm of the task signature added to every token.
    pub signature: f64,
    /// Dimension of the task's class subspace.
    pub subspace: usize,
}

impl TaskSpec {
    pub fn new(task_id: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            task_id,
            n_classes,
            seed,
            separation: 4.0,
            n_train: 1024,
            n_test: 256,
            noise: 1.0,
            signature: 2.0,
            subspace: 4,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("task {}: need at least 2 classes", self.task_id)));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!("task {}: separation must be >= 0", self.task_id)));
        }
        if !(self.noise >= 0.0 && self.signature >= 0.0) {
            return Err(Error::Config(format!(
                "task {}: negative noise or signature",
                self.task_id
            )));
        }
        if self.subspace == 0 || self.subspace > cfg.input_dim {
            return Err(Error::Config(format!(
                "task {}: subspace {} not in 1..={}",
                self.task_id, self.subspace, cfg.input_dim
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config(format!("task {}: empty split", self.task_id)));
        }
        if cfg.classes(self.task_id)? != self.n_classes {
            return Err(Error::Config(format!(
                "task {}: spec has {} classes, model head has {}",
                self.task_id,
                self.n_classes,
                cfg.classes(self.task_id)?
            )));
        }
        Ok(())
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normalize(v: &mut [f64]) {
    let n = num_traits::Float::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Orthonormal basis of a random `k`-dimensional subspace of `ℝᵈ`.
fn random_subspace<R: Rng>(d: usize, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

/// Train and test splits of a task; labels are balanced round-robin.
pub fn gen_task(spec: &TaskSpec, cfg: &ModelConfig) -> Result<(Batch, Batch)> {
    spec.validate(cfg)?;
    let (n, d) = (cfg.seq_len, cfg.input_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut signature: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
    normalize(&mut signature);
    signature.iter_mut().for_each(|x| *x *= spec.signature);
    let basis = random_subspace(d, spec.subspace, &mut rng);
    // prototypes[c][token] is a unit vector in the task subspace
    let prototypes: Vec<Vec<Vec<f64>>> = (0..spec.n_classes)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let coef: Vec<f64> = (0..spec.subspace).map(|_| gaussian(&mut rng)).collect();
                    let mut v = vec![0.0; d];
                    for (c, b) in coef.iter().zip(&basis) {
                        v.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
                    }
                    normalize(&mut v);
                    v
                })
                .collect()
        })
        .collect();
    let sample = |count: usize, rng: &mut ChaCha8Rng| -> Result<Batch> {
        let mut data = Vec::with_capacity(count * n * d);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let c = i % spec.n_classes;
            labels.push(c);
            for proto in &prototypes[c] {
                for f in 0..d {
                    let v = signature[f] + spec.separation * proto[f] + spec.noise * gaussian(rng);
                    data.push(v as f32);
                }
            }
        }
        Batch::new(Tensor::new([count, n, d], data)?, Some(labels), spec.task_id)
    };
    let train = sample(spec.n_train, &mut rng)?;
    let test = sample(spec.n_test, &mut rng)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// 500 Adam steps at lr 1e-3, batch 32.
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Cross-entropy training of every parameter in `trainable` (a name filter)
/// on the given labeled sets, visited round-robin.
pub fn train_cross_entropy<T: Real>(
    params: &mut NamedParamSet<T>,
    cfg: &ModelConfig,
    data: &[Batch<T>],
    train: &TrainConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    if train.steps == 0 {
        return Ok(());
    }
    if data.is_empty() || data.iter().any(|b| b.is_empty() || b.labels.is_none()) {
        return Err(Error::Config("training needs nonempty labeled data".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let names: Vec<alloc::string::String> = params.names().filter(|n| trainable(n)).map(Into::into).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut orders: Vec<Vec<usize>> = data.iter().map(|b| (0..b.len()).collect()).collect();
    for o in &mut orders {
        o.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; data.len()];
    let mut opt = Optimizer::new(OptimizerKind::adam(), train.learning_rate)?;
    for step in 0..train.steps {
        let k = step % data.len();
        let len = data[k].len();
        let take = train.batch_size.min(len);
        if cursors[k] + take > len {
            orders[k].shuffle(&mut rng);
            cursors[k] = 0;
        }
        let batch = data[k].gather(&orders[k][cursors[k]..cursors[k] + take])?;
        cursors[k] += take;

        let mut tape = Tape::new();
        let mut scratch = params.clone();
        scratch.set_requires_grad(false);
        for n in &names {
            scratch.get_mut(n).expect("listed").set_requires_grad(true);
        }
        let bound = bind(&mut tape, &scratch);
        let inputs = tape.constant(batch.inputs.clone());
        let logits = forward_on_tape(&mut tape, &bound, cfg, inputs, batch.task_id, None)?;
        let loss = tape.cross_entropy(logits, batch.labels.as_deref().expect("labeled"))?;
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor<T>> = names.iter().map(|n| grads.wrt(bound[n.as_str()])).collect();
        let mut targets: Vec<&mut Tensor<T>> = Vec::with_capacity(names.len());
        for (name, t) in params.iter_mut() {
            if names.iter().any(|n| n == name) {
                targets.push(t);
            }
        }
        opt.step(&mut targets, &g)?;
    }
    Ok(())
}

/// Brief multi-task training of the encoder and every head.
pub fn pretrain<T: Real>(
    theta: &mut NamedParamSet<T>,
    cfg: &ModelConfig,
    train_sets: &[Batch<T>],
    train: &TrainConfig,
) -> Result<()> {
    train_cross_entropy(theta, cfg, train_sets, train, |_| true)
}

/// Encoder plus the task's own head, trained from `theta_0`.
pub fn fine_tune<T: Real>(
    theta_0: &NamedParamSet<T>,
    cfg: &ModelConfig,
    train_set: &Batch<T>,
    train: &TrainConfig,
) -> Result<NamedParamSet<T>> {
    let mut theta = theta_0.clone();
    let own = format!("heads.{}.", train_set.task_id);
    train_cross_entropy(&mut theta, cfg, core::slice::from_ref(train_set), train, |n| {
        !crate::params::is_head(n) || n.starts_with(&own)
    })?;
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    GaussianNoise,
    ImpulseNoise,
    Contrast,
    Pixelate,
}

impl Corruption {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "gaussian_noise" => Self::GaussianNoise,
            "impulse_noise" => Self::ImpulseNoise,
            "contrast" => Self::Contrast,
            "pixelate" => Self::Pixelate,
            other => return Err(Error::Config(format!("unknown corruption `{other}`"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::Contrast => "contrast",
            Self::Pixelate => "pixelate",
        }
    }

    /// Strength at `severity ∈ 1..=5`: noise std, impulse fraction, contrast
    /// factor, or pixelation block length in tokens.
    pub fn level(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("severity {severity} not in 1..=5")));
        }
        let i = usize::from(severity - 1);
        Ok(match self {
            Self::GaussianNoise => [0.5, 1.0, 1.5, 2.0, 3.0][i],
            Self::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27][i],
            Self::Contrast => [0.4, 0.3, 0.2, 0.1, 0.05][i],
            Self::Pixelate => [2.0, 2.0, 4.0, 4.0, 8.0][i],
        })
    }
}

pub fn corrupt(batch: &Batch, kind: Corruption, severity: u8, seed: u64) -> Result<Batch> {
    corrupt_at_level(batch, kind, kind.level(severity)?, seed)
}

/// Applies `kind` at an explicit strength (see [`Corruption::level`]).
pub fn corrupt_at_level(batch: &Batch, kind: Corruption, level: f64, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = batch.inputs.shape().to_vec();
    let (rows, n, d) = (s[0], s[1], s[2]);
    let mut out = batch.inputs.clone();
    let x = out.data_mut();
    match kind {
        Corruption::GaussianNoise => {
            if level < 0.0 {
                return Err(Error::Config("noise level must be >= 0".into()));
            }
            for v in x.iter_mut() {
                *v += (level * gaussian(&mut rng)) as f32;
            }
        }
        Corruption::ImpulseNoise => {
            if !(0.0..=1.0).contains(&level) {
                return Err(Error::Config("impulse fraction must lie in [0, 1]".into()));
            }
            let peak = x.iter().fold(0f32, |m, v| m.max(v.abs()));
            for v in x.iter_mut() {
                if rng.random::<f64>() < level {
                    *v = if rng.random::<bool>() { peak } else { -peak };
                }
            }
        }
        Corruption::Contrast => {
            if !(0.0..=1.0).contains(&level) {
                return Err(Error::Config("contrast factor must lie in [0, 1]".into()));
            }
            let stride = n * d;
            for r in 0..rows {
                let row = &mut x[r * stride..(r + 1) * stride];
                let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / stride as f64;
                for v in row.iter_mut() {
                    *v = (mean + level * (f64::from(*v) - mean)) as f32;
                }
            }
        }
        Corruption::Pixelate => {
            let block = level as usize;
            if block == 0 || num_traits::Float::fract(level) != 0.0 {
                return Err(Error::Config("pixelate block must be a positive integer".into()));
            }
            for r in 0..rows {
                for start in (0..n).step_by(block) {
                    let end = (start + block).min(n);
                    for f in 0..d {
                        let idx = |t: usize| (r * n + t) * d + f;
                        let mean = (start..end).map(|t| x[idx(t)]).sum::<f32>() / (end - start) as f32;
                        for t in start..end {
                            x[idx(t)] = mean;
                        }
                    }
                }
            }
        }
    }
    Batch::new(out, batch.labels.clone(), batch.task_id)
}
