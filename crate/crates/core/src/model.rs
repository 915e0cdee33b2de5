//! A small pre-LayerNorm Transformer encoder with per-task linear heads.
//!
//! Parameters live in a [`NamedParamSet`] under a fixed naming scheme:
//!
//! | name                                   | shape            |
//! |----------------------------------------|------------------|
//! | `embed.weight`, `embed.bias`           | `[d × in]`, `[d]` |
//! | `embed.pos`                            | `[N × d]`        |
//! | `layers.{i}.ln1.{gain,bias}`           | `[d]`            |
//! | `layers.{i}.attn.{q,k,v,o}.weight`     | `[d × d]`        |
//! | `layers.{i}.attn.{q,k,v,o}.bias`       | `[d]`            |
//! | `layers.{i}.ln2.{gain,bias}`           | `[d]`            |
//! | `layers.{i}.mlp.fc1.{weight,bias}`     | `[ff × d]`, `[ff]` |
//! | `layers.{i}.mlp.fc2.{weight,bias}`     | `[d × ff]`, `[d]` |
//! | `final_norm.{gain,bias}`               | `[d]`            |
//! | `heads.{t}.{weight,bias}`              | `[C_t × d]`, `[C_t]` |
//!
//! Logits are the task head applied to the token-mean of the final normed
//! hidden states.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::NamedParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    /// Class count per task.
    pub n_classes: Vec<usize>,
}

impl ModelConfig {
    /// d=32, L=4, 4 heads, ff=64, N=16, 16 input features.
    pub fn desk(n_classes: Vec<usize>) -> Self {
        Self {
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ff: 64,
            seq_len: 16,
            input_dim: 16,
            n_classes,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.n_classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes.is_empty() || self.n_classes.iter().any(|&c| c < 2) {
            return Err(Error::Config("need at least one task, each with >= 2 classes".into()));
        }
        Ok(())
    }

    pub fn classes(&self, task: usize) -> Result<usize> {
        self.n_classes.get(task).copied().ok_or(Error::OutOfRange {
            index: task,
            len: self.n_classes.len(),
        })
    }

    /// Encoder parameter names in canonical order (no heads).
    pub fn encoder_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["embed.weight", "embed.bias", "embed.pos"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..self.n_layers {
            names.extend(block_param_names(i));
        }
        names.push("final_norm.gain".into());
        names.push("final_norm.bias".into());
        names
    }

    /// Scalar count of the encoder (no heads).
    pub fn encoder_param_count(&self) -> u64 {
        let (d, ff) = (self.d_model as u64, self.d_ff as u64);
        let embed = d * self.input_dim as u64 + d + self.seq_len as u64 * d;
        let block = 4 * d + 4 * (d * d + d) + 2 * d * ff + ff + d;
        embed + self.n_layers as u64 * block + 2 * d
    }
}

/// Sublayers a hook may replace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    /// q/k/v/o projections; input is the post-`ln1` hidden state.
    Attention,
    /// fc1/fc2; input is the post-`ln2` hidden state.
    Mlp,
    /// The whole block including both LayerNorms; input is the residual stream.
    Block,
}

pub fn attention_param_names(layer: usize) -> Vec<String> {
    let mut out = Vec::new();
    for p in ["q", "k", "v", "o"] {
        for s in ["weight", "bias"] {
            out.push(format!("layers.{layer}.attn.{p}.{s}"));
        }
    }
    out
}

pub fn mlp_param_names(layer: usize) -> Vec<String> {
    let mut out = Vec::new();
    for p in ["fc1", "fc2"] {
        for s in ["weight", "bias"] {
            out.push(format!("layers.{layer}.mlp.{p}.{s}"));
        }
    }
    out
}

pub fn block_param_names(layer: usize) -> Vec<String> {
    let mut out = Vec::new();
    out.push(format!("layers.{layer}.ln1.gain"));
    out.push(format!("layers.{layer}.ln1.bias"));
    out.extend(attention_param_names(layer));
    out.push(format!("layers.{layer}.ln2.gain"));
    out.push(format!("layers.{layer}.ln2.bias"));
    out.extend(mlp_param_names(layer));
    out
}

pub fn site_param_names(layer: usize, kind: SiteKind) -> Vec<String> {
    match kind {
        SiteKind::Attention => attention_param_names(layer),
        SiteKind::Mlp => mlp_param_names(layer),
        SiteKind::Block => block_param_names(layer),
    }
}

/// Samples fresh parameters: scaled Gaussian weights, zero biases, unit gains.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<NamedParamSet> {
    cfg.validate()?;
    let (d, ff, inp) = (cfg.d_model, cfg.d_ff, cfg.input_dim);
    let inv_sqrt = |n: usize| 1.0 / num_traits::Float::sqrt(n as f64);
    let mut p = NamedParamSet::new();
    p.insert("embed.weight", Tensor::randn([d, inp], inv_sqrt(inp), rng));
    p.insert("embed.bias", Tensor::zeros([d]));
    p.insert("embed.pos", Tensor::randn([cfg.seq_len, d], 0.1, rng));
    for i in 0..cfg.n_layers {
        p.insert(format!("layers.{i}.ln1.gain"), Tensor::full([d], 1.0));
        p.insert(format!("layers.{i}.ln1.bias"), Tensor::zeros([d]));
        for proj in ["q", "k", "v", "o"] {
            p.insert(
                format!("layers.{i}.attn.{proj}.weight"),
                Tensor::randn([d, d], inv_sqrt(d), rng),
            );
            p.insert(format!("layers.{i}.attn.{proj}.bias"), Tensor::zeros([d]));
        }
        p.insert(format!("layers.{i}.ln2.gain"), Tensor::full([d], 1.0));
        p.insert(format!("layers.{i}.ln2.bias"), Tensor::zeros([d]));
        p.insert(
            format!("layers.{i}.mlp.fc1.weight"),
            Tensor::randn([ff, d], inv_sqrt(d), rng),
        );
        p.insert(format!("layers.{i}.mlp.fc1.bias"), Tensor::zeros([ff]));
        p.insert(
            format!("layers.{i}.mlp.fc2.weight"),
            Tensor::randn([d, ff], inv_sqrt(ff), rng),
        );
        p.insert(format!("layers.{i}.mlp.fc2.bias"), Tensor::zeros([d]));
    }
    p.insert("final_norm.gain", Tensor::full([d], 1.0));
    p.insert("final_norm.bias", Tensor::zeros([d]));
    for (t, &c) in cfg.n_classes.iter().enumerate() {
        p.insert(head_weight(t), Tensor::randn([c, d], inv_sqrt(d), rng));
        p.insert(head_bias(t), Tensor::zeros([c]));
    }
    Ok(p)
}

pub fn head_weight(task: usize) -> String {
    format!("heads.{task}.weight")
}

pub fn head_bias(task: usize) -> String {
    format!("heads.{task}.bias")
}

/// Checks that `params` carries every name and shape `cfg` implies.
pub fn check_params<T: Real>(params: &NamedParamSet<T>, cfg: &ModelConfig) -> Result<()> {
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    for name in cfg.encoder_names() {
        let t = params.require(&name)?;
        let expected: Vec<usize> = if name == "embed.weight" {
            [d, cfg.input_dim].into()
        } else if name == "embed.pos" {
            [cfg.seq_len, d].into()
        } else if name.ends_with("fc1.weight") {
            [ff, d].into()
        } else if name.ends_with("fc1.bias") {
            [ff].into()
        } else if name.ends_with("fc2.weight") {
            [d, ff].into()
        } else if name.contains(".attn.") && name.ends_with(".weight") {
            [d, d].into()
        } else {
            [d].into()
        };
        if t.shape() != expected.as_slice() {
            return Err(Error::Dimension {
                op: "check_params",
                lhs: t.shape().to_vec(),
                rhs: expected,
            });
        }
    }
    Ok(())
}

/// A batch of token sequences for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Real = f32> {
    /// `[B × N × input_dim]`
    pub inputs: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub task_id: usize,
}

impl<T: Real> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Option<Vec<usize>>, task_id: usize) -> Result<Self> {
        if inputs.rank() != 3 {
            return Err(Error::Dimension {
                op: "batch",
                lhs: inputs.shape().to_vec(),
                rhs: alloc::vec![0, 0, 0],
            });
        }
        if let Some(l) = &labels {
            if l.len() != inputs.shape()[0] {
                return Err(Error::Dimension {
                    op: "batch labels",
                    lhs: inputs.shape().to_vec(),
                    rhs: alloc::vec![l.len()],
                });
            }
        }
        Ok(Self {
            inputs,
            labels,
            task_id,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let s = self.inputs.shape();
        if s[1] != cfg.seq_len || s[2] != cfg.input_dim {
            return Err(Error::Dimension {
                op: "batch vs config",
                lhs: s.to_vec(),
                rhs: alloc::vec![s[0], cfg.seq_len, cfg.input_dim],
            });
        }
        let c = cfg.classes(self.task_id)?;
        if let Some(bad) = self.labels.iter().flatten().find(|&&y| y >= c) {
            return Err(Error::OutOfRange { index: *bad, len: c });
        }
        Ok(())
    }

    /// Rows `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let s = self.inputs.shape();
        if start >= end || end > s[0] {
            return Err(Error::OutOfRange { index: end, len: s[0] });
        }
        let row = s[1] * s[2];
        let inputs = Tensor::from_slice([end - start, s[1], s[2]], &self.inputs.data()[start * row..end * row])?;
        let labels = self.labels.as_ref().map(|l| l[start..end].to_vec());
        Self::new(inputs, labels, self.task_id)
    }

    /// The listed rows, in order.
    pub fn gather(&self, rows: &[usize]) -> Result<Self> {
        let s = self.inputs.shape();
        let stride = s[1] * s[2];
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::OutOfRange { index: r, len: s[0] });
            }
            data.extend_from_slice(&self.inputs.data()[r * stride..(r + 1) * stride]);
        }
        let labels = self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect());
        Self::new(Tensor::new([rows.len(), s[1], s[2]], data)?, labels, self.task_id)
    }

    /// Stacks batches of the same task along the batch axis.
    pub fn concat(parts: &[Batch<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of no batches".into()))?;
        let s = first.inputs.shape();
        let mut data = Vec::new();
        let mut labels = Some(Vec::new());
        let mut rows = 0;
        for b in parts {
            if b.inputs.shape()[1..] != s[1..] || b.task_id != first.task_id {
                return Err(Error::Dimension {
                    op: "batch concat",
                    lhs: s.to_vec(),
                    rhs: b.inputs.shape().to_vec(),
                });
            }
            rows += b.len();
            data.extend_from_slice(b.inputs.data());
            labels = match (labels, &b.labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
        }
        Self::new(Tensor::new([rows, s[1], s[2]], data)?, labels, first.task_id)
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
            task_id: self.task_id,
        }
    }
}

/// Resolves parameter names to tape variables.
pub trait ParamLookup {
    fn var(&self, name: &str) -> Result<Var>;
}

impl ParamLookup for BTreeMap<String, Var> {
    fn var(&self, name: &str) -> Result<Var> {
        self.get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }
}

/// Records every entry of `params` as a leaf, honoring `requires_grad`.
pub fn bind<T: Real>(tape: &mut Tape<T>, params: &NamedParamSet<T>) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(n, t)| (n.to_string(), tape.leaf(t.clone())))
        .collect()
}

/// Replacement hook for attention, MLP, or whole-block sublayers.
///
/// Returning `Ok(None)` keeps the standard sublayer.
pub trait SublayerHook<T: Real> {
    fn replace(
        &mut self,
        tape: &mut Tape<T>,
        cfg: &ModelConfig,
        layer: usize,
        kind: SiteKind,
        input: Var,
    ) -> Result<Option<Var>>;
}

/// Hook that never replaces anything.
pub struct NoHook;

impl<T: Real> SublayerHook<T> for NoHook {
    fn replace(
        &mut self,
        _tape: &mut Tape<T>,
        _cfg: &ModelConfig,
        _layer: usize,
        _kind: SiteKind,
        _input: Var,
    ) -> Result<Option<Var>> {
        Ok(None)
    }
}

pub fn attention_sublayer<T: Real>(
    tape: &mut Tape<T>,
    p: &dyn ParamLookup,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let proj = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
        let w = p.var(&format!("layers.{layer}.attn.{name}.weight"))?;
        let b = p.var(&format!("layers.{layer}.attn.{name}.bias"))?;
        tape.linear(x, w, Some(b))
    };
    let q = proj(tape, "q")?;
    let k = proj(tape, "k")?;
    let v = proj(tape, "v")?;
    let ctx = tape.attention(q, k, v, cfg.n_heads)?;
    let w = p.var(&format!("layers.{layer}.attn.o.weight"))?;
    let b = p.var(&format!("layers.{layer}.attn.o.bias"))?;
    tape.linear(ctx, w, Some(b))
}

pub fn mlp_sublayer<T: Real>(tape: &mut Tape<T>, p: &dyn ParamLookup, layer: usize, x: Var) -> Result<Var> {
    let w1 = p.var(&format!("layers.{layer}.mlp.fc1.weight"))?;
    let b1 = p.var(&format!("layers.{layer}.mlp.fc1.bias"))?;
    let w2 = p.var(&format!("layers.{layer}.mlp.fc2.weight"))?;
    let b2 = p.var(&format!("layers.{layer}.mlp.fc2.bias"))?;
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.gelu(h)?;
    tape.linear(h, w2, Some(b2))
}

fn layernorm<T: Real>(tape: &mut Tape<T>, p: &dyn ParamLookup, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.gain"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    tape.layernorm(x, g, b, T::c(LN_EPS))
}

/// One pre-LN block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &dyn ParamLookup,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    hook: &mut dyn SublayerHook<T>,
) -> Result<Var> {
    if let Some(out) = hook.replace(tape, cfg, layer, SiteKind::Block, x)? {
        return Ok(out);
    }
    let normed = layernorm(tape, p, &format!("layers.{layer}.ln1"), x)?;
    let attn = match hook.replace(tape, cfg, layer, SiteKind::Attention, normed)? {
        Some(v) => v,
        None => attention_sublayer(tape, p, cfg, layer, normed)?,
    };
    let x = tape.add(x, attn)?;
    let normed = layernorm(tape, p, &format!("layers.{layer}.ln2"), x)?;
    let mlp = match hook.replace(tape, cfg, layer, SiteKind::Mlp, normed)? {
        Some(v) => v,
        None => mlp_sublayer(tape, p, layer, normed)?,
    };
    tape.add(x, mlp)
}

/// Records the full forward pass and returns `[B × C_task]` logits.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    p: &dyn ParamLookup,
    cfg: &ModelConfig,
    inputs: Var,
    task: usize,
    hook: Option<&mut dyn SublayerHook<T>>,
) -> Result<Var> {
    cfg.classes(task)?;
    let mut plain = NoHook;
    let hook: &mut dyn SublayerHook<T> = match hook {
        Some(h) => h,
        None => &mut plain,
    };
    let w = p.var("embed.weight")?;
    let b = p.var("embed.bias")?;
    let pos = p.var("embed.pos")?;
    let mut h = tape.linear(inputs, w, Some(b))?;
    h = tape.add_broadcast(h, pos)?;
    for layer in 0..cfg.n_layers {
        h = block_forward(tape, p, cfg, layer, h, &mut *hook)?;
    }
    let h = layernorm(tape, p, "final_norm", h)?;
    let pooled = tape.mean_axis1(h)?;
    let hw = p.var(&head_weight(task))?;
    let hb = p.var(&head_bias(task))?;
    tape.linear(pooled, hw, Some(hb))
}

/// Logits for `batch` through its task head.
pub fn forward<T: Real>(
    params: &NamedParamSet<T>,
    cfg: &ModelConfig,
    batch: &Batch<T>,
    hook: Option<&mut dyn SublayerHook<T>>,
) -> Result<Tensor<T>> {
    batch.validate(cfg)?;
    let mut tape = Tape::new();
    let bound: BTreeMap<String, Var> = params
        .iter()
        .map(|(n, t)| (n.to_string(), tape.constant(t.clone())))
        .collect();
    let inputs = tape.constant(batch.inputs.clone());
    let logits = forward_on_tape(&mut tape, &bound, cfg, inputs, batch.task_id, hook)?;
    Ok(tape.value(logits).clone())
}

struct Capture {
    layer: usize,
    value: Option<Var>,
}

impl<T: Real> SublayerHook<T> for Capture {
    fn replace(
        &mut self,
        _tape: &mut Tape<T>,
        _cfg: &ModelConfig,
        layer: usize,
        kind: SiteKind,
        input: Var,
    ) -> Result<Option<Var>> {
        if layer == self.layer && kind == SiteKind::Mlp {
            self.value = Some(input);
        }
        Ok(None)
    }
}

/// Hidden states entering the MLP of block `layer` (after `ln2`), `[B × N × d]`.
pub fn token_sequence_hidden<T: Real>(
    params: &NamedParamSet<T>,
    cfg: &ModelConfig,
    batch: &Batch<T>,
    layer: usize,
) -> Result<Tensor<T>> {
    if layer >= cfg.n_layers {
        return Err(Error::OutOfRange {
            index: layer,
            len: cfg.n_layers,
        });
    }
    batch.validate(cfg)?;
    let mut tape = Tape::new();
    let bound: BTreeMap<String, Var> = params
        .iter()
        .map(|(n, t)| (n.to_string(), tape.constant(t.clone())))
        .collect();
    let inputs = tape.constant(batch.inputs.clone());
    let mut cap = Capture { layer, value: None };
    forward_on_tape(&mut tape, &bound, cfg, inputs, batch.task_id, Some(&mut cap))?;
    let v = cap.value.expect("every layer visits its MLP");
    Ok(tape.value(v).clone())
}

/// Fraction of rows whose argmax matches `labels`.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let preds = logits.argmax_last();
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Mean cross-entropy of logits against labels, outside any tape.
pub fn cross_entropy_value<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> T {
    let p = logits.softmax_last();
    let c = logits.last_dim();
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -p.data()[b * c + y].max(T::c(1e-12)).ln())
        .sum();
    total / T::c(labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            seq_len: 5,
            input_dim: 4,
            n_classes: vec![3, 2],
        }
    }

    fn batch(b: usize, cfg: &ModelConfig, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch::new(Tensor::randn([b, cfg.seq_len, cfg.input_dim], 1.0, &mut rng), None, 0).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.d_ff = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_embedding_and_head_give_zero_logits() {
        let cfg = tiny();
        let mut p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (n, t) in p.iter_mut() {
            if n.starts_with("embed.") || n.starts_with("heads.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let logits = forward(&p, &cfg, &batch(3, &cfg, 1), None).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_row_gives_identical_logits() {
        let cfg = tiny();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let one = batch(1, &cfg, 2);
        let two = Batch::concat(&[one.clone(), one.clone()]).unwrap();
        let a = forward(&p, &cfg, &one, None).unwrap();
        let b = forward(&p, &cfg, &two, None).unwrap();
        assert_eq!(&b.data()[..3], a.data());
        assert_eq!(&b.data()[3..], a.data());
    }

    #[test]
    fn missing_parameter_is_named() {
        let cfg = tiny();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .filter(|n| n != "layers.1.mlp.fc2.bias");
        match forward(&p, &cfg, &batch(1, &cfg, 3), None) {
            Err(Error::MissingParameter(n)) => assert_eq!(n, "layers.1.mlp.fc2.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hidden_shape_and_range() {
        let cfg = ModelConfig {
            d_model: 8,
            seq_len: 5,
            ..tiny()
        };
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let h = token_sequence_hidden(&p, &cfg, &batch(3, &cfg, 4), 1).unwrap();
        assert_eq!(h.shape(), &[3, 5, 8]);
        assert!(token_sequence_hidden(&p, &cfg, &batch(3, &cfg, 4), 2).is_err());
    }

    #[test]
    fn init_matches_config() {
        let cfg = tiny();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        check_params(&p, &cfg).unwrap();
        assert_eq!(p.encoder().len(), cfg.encoder_names().len());
        assert_eq!(p.heads().len(), 4);
    }
}
