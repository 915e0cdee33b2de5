//! Static merging baselines: weight averaging, task arithmetic, Ties-merging
//! and AdaMerging with learnable task-wise or layer-wise coefficients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{self, forward_on_tape, Batch, ModelConfig};
use crate::params::{check_covers, is_head, NamedParamSet, TaskVector, HEAD_PREFIX};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_TIES_KEEP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
    AdaMergingTask,
    AdaMergingLayer,
}

impl MergeMethod {
    pub const ALL: [Self; 5] = [
        Self::Average,
        Self::TaskArithmetic,
        Self::Ties,
        Self::AdaMergingTask,
        Self::AdaMergingLayer,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "average" => Self::Average,
            "task_arithmetic" => Self::TaskArithmetic,
            "ties" => Self::Ties,
            "adamerging_task" => Self::AdaMergingTask,
            "adamerging_layer" => Self::AdaMergingLayer,
            other => return Err(Error::Config(format!("unknown merge method `{other}`"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::TaskArithmetic => "task_arithmetic",
            Self::Ties => "ties",
            Self::AdaMergingTask => "adamerging_task",
            Self::AdaMergingLayer => "adamerging_layer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeSpec {
    pub method: MergeMethod,
    pub lambda: f64,
    pub ties_keep_fraction: f64,
}

impl Default for MergeSpec {
    fn default() -> Self {
        Self {
            method: MergeMethod::TaskArithmetic,
            lambda: DEFAULT_LAMBDA,
            ties_keep_fraction: DEFAULT_TIES_KEEP,
        }
    }
}

impl MergeSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        check_keep_fraction(self.ties_keep_fraction)
    }
}

fn check_keep_fraction(keep: f64) -> Result<()> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config(format!("ties keep fraction {keep} must lie in (0, 1]")));
    }
    Ok(())
}

/// Elementwise mean of congruent models. Heads are taken from the first model.
pub fn weight_average<T: Real>(models: &[NamedParamSet<T>]) -> Result<NamedParamSet<T>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("weight_average needs at least one model".into()))?;
    for m in &models[1..] {
        first.check_congruent(m)?;
    }
    let inv = T::one() / T::c(models.len() as f64);
    let mut out = first.clone();
    for (name, t) in out.iter_mut() {
        if is_head(name) {
            continue;
        }
        for m in &models[1..] {
            t.axpy(T::one(), m.get(name).expect("congruent"))?;
        }
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// `θ₀ + λ Σᵢ τᵢ`, accumulated as `θ₀ + λτ₁ + λτ₂ + …`.
pub fn task_arithmetic<T: Real>(
    theta_0: &NamedParamSet<T>,
    task_vectors: &[TaskVector<T>],
    lambda: T,
) -> Result<NamedParamSet<T>> {
    if task_vectors.is_empty() {
        return Err(Error::Config("task_arithmetic needs at least one task vector".into()));
    }
    for tv in task_vectors {
        check_covers(theta_0, tv)?;
    }
    let mut out = theta_0.clone();
    for (name, t) in out.iter_mut() {
        if is_head(name) {
            continue;
        }
        for tv in task_vectors {
            t.axpy(lambda, tv.get(name).expect("covered"))?;
        }
    }
    Ok(out)
}

/// Trim / elect / disjoint-merge of task vectors (before scaling by λ).
pub fn ties_merged_vector<T: Real>(task_vectors: &[TaskVector<T>], keep_fraction: f64) -> Result<TaskVector<T>> {
    check_keep_fraction(keep_fraction)?;
    let first = task_vectors
        .first()
        .ok_or_else(|| Error::Config("ties_merge needs at least one task vector".into()))?;
    for tv in &task_vectors[1..] {
        first.params().check_congruent(tv.params())?;
    }
    let flat: Vec<Vec<T>> = task_vectors.iter().map(|tv| trim(tv, keep_fraction)).collect();
    let n = flat[0].len();
    let mut merged = vec![T::zero(); n];
    for (j, slot) in merged.iter_mut().enumerate() {
        let mass: T = flat.iter().map(|f| f[j]).sum();
        let sign = sign_of(mass);
        if sign == 0 {
            continue;
        }
        let mut total = T::zero();
        let mut count = 0usize;
        for f in &flat {
            if sign_of(f[j]) == sign {
                total += f[j];
                count += 1;
            }
        }
        if count > 0 {
            *slot = total / T::c(count as f64);
        }
    }
    let mut out = NamedParamSet::new();
    let mut offset = 0;
    for (name, t) in first.iter() {
        let len = t.numel();
        out.insert(
            name,
            Tensor::from_slice(t.shape().to_vec(), &merged[offset..offset + len])?,
        );
        offset += len;
    }
    TaskVector::from_params(out)
}

/// `θ₀ + λ · ties_merged_vector(τ, keep)`.
pub fn ties_merge<T: Real>(
    theta_0: &NamedParamSet<T>,
    task_vectors: &[TaskVector<T>],
    keep_fraction: f64,
    lambda: T,
) -> Result<NamedParamSet<T>> {
    let merged = ties_merged_vector(task_vectors, keep_fraction)?;
    crate::params::apply_vector(theta_0, &merged, lambda)
}

pub(crate) fn sign_of<T: Real>(v: T) -> i8 {
    if v > T::zero() {
        1
    } else if v < T::zero() {
        -1
    } else {
        0
    }
}

/// Keeps the `ceil(keep · n)` largest-magnitude coordinates of the flattened
/// vector; equal magnitudes keep the earlier coordinate.
fn trim<T: Real>(tv: &TaskVector<T>, keep_fraction: f64) -> Vec<T> {
    let flat: Vec<T> = tv.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
    let n = flat.len();
    let k = num_traits::Float::ceil(keep_fraction * n as f64) as usize;
    let k = k.clamp(1, n);
    if k == n {
        return flat;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        flat[b]
            .abs()
            .partial_cmp(&flat[a].abs())
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![T::zero(); n];
    for &i in &order[..k] {
        out[i] = flat[i];
    }
    out
}

/// Copies `heads.{t}.*` from `finetuned[t]` into `params`.
pub fn install_heads<T: Real>(params: &mut NamedParamSet<T>, finetuned: &[NamedParamSet<T>]) -> Result<()> {
    for (t, ft) in finetuned.iter().enumerate() {
        let prefix = format!("{HEAD_PREFIX}{t}.");
        for (name, tensor) in ft.iter().filter(|(n, _)| n.starts_with(&prefix)) {
            match params.get(name) {
                Some(existing) if existing.shape() == tensor.shape() => params.insert(name, tensor.clone()),
                _ => return Err(Error::Congruence(format!("head `{name}` missing or reshaped"))),
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One coefficient per task.
    Task,
    /// One coefficient per task per parameter group (embed, each block, final norm).
    Layer,
}

/// Owning parameter group of an encoder entry for layer-wise merging.
pub fn layer_group(name: &str) -> String {
    if let Some(rest) = name.strip_prefix("layers.") {
        let idx = rest.split('.').next().unwrap_or("");
        format!("layers.{idx}")
    } else {
        name.split('.').next().unwrap_or(name).to_string()
    }
}

/// Merged model `θ₀ + Σᵢ λᵢ τᵢ` with learnable coefficients.
///
/// Entries outside every trainable group stay at the fixed coefficient.
#[derive(Debug, Clone)]
pub struct AdaMergingModel<T: Real = f32> {
    theta_0: NamedParamSet<T>,
    task_vectors: Vec<TaskVector<T>>,
    group_names: Vec<String>,
    /// Group index for each entry of `theta_0` (None: heads or frozen).
    entry_group: Vec<Option<usize>>,
    coeffs: Vec<Tensor<T>>,
    fixed: T,
}

impl<T: Real> AdaMergingModel<T> {
    pub fn new(
        theta_0: &NamedParamSet<T>,
        task_vectors: &[TaskVector<T>],
        granularity: Granularity,
        lambda0: T,
    ) -> Result<Self> {
        match granularity {
            Granularity::Task => Self::with_groups(theta_0, task_vectors, lambda0, |_| Some("all".into())),
            Granularity::Layer => Self::with_groups(theta_0, task_vectors, lambda0, |n| Some(layer_group(n))),
        }
    }

    /// Custom grouping: `group(name)` names the coefficient group of each
    /// encoder entry, or `None` to freeze the entry at `lambda0`.
    pub fn with_groups(
        theta_0: &NamedParamSet<T>,
        task_vectors: &[TaskVector<T>],
        lambda0: T,
        mut group: impl FnMut(&str) -> Option<String>,
    ) -> Result<Self> {
        if task_vectors.is_empty() {
            return Err(Error::Config("AdaMerging needs at least one task vector".into()));
        }
        for tv in task_vectors {
            check_covers(theta_0, tv)?;
        }
        let mut group_names: Vec<String> = Vec::new();
        let mut lookup: BTreeMap<String, usize> = BTreeMap::new();
        let mut entry_group = Vec::with_capacity(theta_0.len());
        for name in theta_0.names() {
            if is_head(name) {
                entry_group.push(None);
                continue;
            }
            let g = group(name).map(|g| {
                *lookup.entry(g.clone()).or_insert_with(|| {
                    group_names.push(g);
                    group_names.len() - 1
                })
            });
            entry_group.push(g);
        }
        let t = task_vectors.len();
        let coeffs = group_names
            .iter()
            .map(|_| Tensor::full([t], lambda0).with_requires_grad(true))
            .collect();
        Ok(Self {
            theta_0: theta_0.clone(),
            task_vectors: task_vectors.to_vec(),
            group_names,
            entry_group,
            coeffs,
            fixed: lambda0,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.task_vectors.len()
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    /// One `[T]` coefficient tensor per group.
    pub fn coeffs(&self) -> &[Tensor<T>] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.coeffs
    }

    pub fn num_trainable(&self) -> usize {
        self.coeffs.iter().map(|c| c.numel()).sum()
    }

    pub fn theta_0(&self) -> &NamedParamSet<T> {
        &self.theta_0
    }

    pub fn task_vectors(&self) -> &[TaskVector<T>] {
        &self.task_vectors
    }

    fn entry_coeffs(&self, entry: usize) -> Vec<T> {
        match self.entry_group[entry] {
            Some(g) => self.coeffs[g].data().to_vec(),
            None => vec![self.fixed; self.n_tasks()],
        }
    }

    /// Current merged parameters (heads from `theta_0`).
    pub fn materialize(&self) -> Result<NamedParamSet<T>> {
        let mut out = self.theta_0.clone();
        for (i, (name, t)) in out.iter_mut().enumerate() {
            if is_head(name) {
                continue;
            }
            let c = self.entry_coeffs(i);
            for (tv, &ci) in self.task_vectors.iter().zip(&c) {
                t.axpy(ci, tv.get(name).expect("covered"))?;
            }
        }
        Ok(out)
    }

    /// Records logits for `batch`; the returned vars are the coefficient
    /// leaves, in group order.
    pub fn record(&self, tape: &mut Tape<T>, cfg: &ModelConfig, batch: &Batch<T>) -> Result<(Var, Vec<Var>)> {
        batch.validate(cfg)?;
        let coeff_vars: Vec<Var> = self.coeffs.iter().map(|c| tape.leaf(c.clone())).collect();
        let fixed = tape.constant(Tensor::full([self.n_tasks()], self.fixed));
        let mut bound: BTreeMap<String, Var> = BTreeMap::new();
        for (i, (name, t0)) in self.theta_0.iter().enumerate() {
            let base = tape.constant(t0.clone());
            if is_head(name) {
                bound.insert(name.to_string(), base);
                continue;
            }
            let deltas: Vec<Var> = self
                .task_vectors
                .iter()
                .map(|tv| tape.constant(tv.get(name).expect("covered").clone()))
                .collect();
            let coeffs = self.entry_group[i].map_or(fixed, |g| coeff_vars[g]);
            let merged = tape.combine(base, &deltas, coeffs, 0)?;
            bound.insert(name.to_string(), merged);
        }
        let inputs = tape.constant(batch.inputs.clone());
        let logits = forward_on_tape(tape, &bound, cfg, inputs, batch.task_id, None)?;
        Ok((logits, coeff_vars))
    }

    pub fn logits(&self, cfg: &ModelConfig, batch: &Batch<T>) -> Result<Tensor<T>> {
        model::forward(&self.materialize()?, cfg, batch, None)
    }
}
