//! End-to-end experiment: pretraining, fine-tuning, merging, adaptation and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wemoe_core::merge::{
    install_heads, task_arithmetic, ties_merge, weight_average, AdaMergingModel, Granularity, MergeMethod,
};
use wemoe_core::model::{self, init_params};
use wemoe_core::params::task_vector;
use wemoe_core::synth::{derive_seed, fine_tune, gen_task, pretrain, TaskSpec, TrainConfig};
use wemoe_core::tta::{adapt, AdaptTrace, TTAConfig};
use wemoe_core::wemoe::{upscale, UpscaleOptions, UpscaledModel};
use wemoe_core::{Batch, ModelConfig, NamedParamSet, Result, TaskVector};

/// Everything needed to reproduce one run from a single seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub lambda: f64,
    pub ties_keep: f64,
    pub upscale: UpscaleOptions,
    pub tta: TTAConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Four 4-class tasks on the desk model; every sub-seed derives from `seed`.
    pub fn desk(seed: u64) -> Self {
        let n_tasks = 4;
        let tasks = (0..n_tasks)
            .map(|i| TaskSpec {
                subspace: 12,
                ..TaskSpec::new(i, 4, derive_seed(seed, "task", i as u64))
            })
            .collect();
        Self {
            model: ModelConfig::desk(vec![4; n_tasks]),
            tasks,
            pretrain: TrainConfig {
                steps: 100,
                seed: derive_seed(seed, "pretrain", 0),
                ..TrainConfig::default()
            },
            finetune: TrainConfig::default(),
            lambda: wemoe_core::merge::DEFAULT_LAMBDA,
            ties_keep: wemoe_core::merge::DEFAULT_TIES_KEEP,
            upscale: UpscaleOptions::default(),
            tta: TTAConfig {
                seed: derive_seed(seed, "tta", 0),
                ..TTAConfig::default()
            },
            seed,
        }
    }

    pub fn finetune_config(&self, task: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "finetune", task as u64),
            ..self.finetune
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.tasks.len() != self.model.n_tasks() {
            return Err(wemoe_core::Error::Config(format!(
                "{} task specs for a model with {} heads",
                self.tasks.len(),
                self.model.n_tasks()
            )));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task_id != i {
                return Err(wemoe_core::Error::Config(format!(
                    "task spec {i} carries task_id {}",
                    t.task_id
                )));
            }
            t.validate(&self.model)?;
        }
        self.upscale.validate()?;
        self.tta.validate()
    }
}

/// Train/test splits per task.
pub fn datasets(exp: &ExperimentConfig) -> Result<(Vec<Batch>, Vec<Batch>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for spec in &exp.tasks {
        let (a, b) = gen_task(spec, &exp.model)?;
        train.push(a);
        test.push(b);
    }
    Ok((train, test))
}

pub fn pretrained(exp: &ExperimentConfig, train: &[Batch]) -> Result<NamedParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(exp.seed, "init", 0));
    let mut theta = init_params(&exp.model, &mut rng)?;
    pretrain(&mut theta, &exp.model, train, &exp.pretrain)?;
    Ok(theta)
}

/// Pretrained and fine-tuned models plus the data they came from.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub exp: ExperimentConfig,
    pub train: Vec<Batch>,
    pub test: Vec<Batch>,
    pub theta_0: NamedParamSet,
    pub finetuned: Vec<NamedParamSet>,
}

impl Prepared {
    pub fn new(exp: ExperimentConfig) -> Result<Self> {
        exp.validate()?;
        let (train, test) = datasets(&exp)?;
        let theta_0 = pretrained(&exp, &train)?;
        let finetuned = train
            .iter()
            .enumerate()
            .map(|(t, set)| fine_tune(&theta_0, &exp.model, set, &exp.finetune_config(t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            exp,
            train,
            test,
            theta_0,
            finetuned,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.exp.model
    }

    pub fn task_vectors(&self) -> Result<Vec<TaskVector>> {
        self.finetuned.iter().map(|ft| task_vector(ft, &self.theta_0)).collect()
    }

    /// `θ₀` carrying every task's fine-tuned head.
    pub fn base_with_heads(&self) -> Result<NamedParamSet> {
        let mut base = self.theta_0.clone();
        install_heads(&mut base, &self.finetuned)?;
        Ok(base)
    }

    /// A static merge with fine-tuned heads installed.
    pub fn merge(&self, method: MergeMethod) -> Result<NamedParamSet> {
        let base = self.base_with_heads()?;
        let taus = self.task_vectors()?;
        let lambda = self.exp.lambda as f32;
        let mut merged = match method {
            MergeMethod::Average => weight_average(&self.finetuned)?,
            MergeMethod::TaskArithmetic => task_arithmetic(&base, &taus, lambda)?,
            MergeMethod::Ties => ties_merge(&base, &taus, self.exp.ties_keep, lambda)?,
            MergeMethod::AdaMergingTask | MergeMethod::AdaMergingLayer => {
                let (ada, _) = self.adamerging(method, &self.test, &self.exp.tta)?;
                ada.materialize()?
            }
        };
        install_heads(&mut merged, &self.finetuned)?;
        Ok(merged)
    }

    /// AdaMerging adapted on `streams`.
    pub fn adamerging(
        &self,
        method: MergeMethod,
        streams: &[Batch],
        tta: &TTAConfig,
    ) -> Result<(AdaMergingModel, AdaptTrace)> {
        let granularity = match method {
            MergeMethod::AdaMergingTask => Granularity::Task,
            _ => Granularity::Layer,
        };
        let mut ada = AdaMergingModel::new(
            &self.base_with_heads()?,
            &self.task_vectors()?,
            granularity,
            self.exp.lambda as f32,
        )?;
        let trace = adapt(&mut ada, self.cfg(), &unlabeled(streams), tta)?;
        Ok((ada, trace))
    }

    /// Upscaled model before adaptation, fine-tuned heads installed.
    pub fn upscaled(&self, opts: &UpscaleOptions) -> Result<UpscaledModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.exp.seed, "router", 0));
        let mut m = upscale(&self.theta_0, &self.finetuned, self.cfg(), opts, &mut rng)?;
        install_heads(&mut m.static_params, &self.finetuned)?;
        Ok(m)
    }

    /// Upscaled model adapted on `streams`.
    pub fn wemoe(
        &self,
        opts: &UpscaleOptions,
        streams: &[Batch],
        tta: &TTAConfig,
    ) -> Result<(UpscaledModel, AdaptTrace)> {
        let mut m = self.upscaled(opts)?;
        let trace = adapt(&mut m, self.cfg(), &unlabeled(streams), tta)?;
        Ok((m, trace))
    }
}

/// Drops labels so adaptation can never see them.
pub fn unlabeled(sets: &[Batch]) -> Vec<Batch> {
    sets.iter()
        .map(|b| Batch {
            labels: None,
            ..b.clone()
        })
        .collect()
}

const EVAL_CHUNK: usize = 64;

/// Accuracy of a logits function over one labeled set, evaluated in chunks.
pub fn accuracy_with(set: &Batch, mut logits: impl FnMut(&Batch) -> Result<wemoe_core::Tensor>) -> Result<f64> {
    let labels = set
        .labels
        .as_deref()
        .ok_or_else(|| wemoe_core::Error::Config("evaluation needs labels".into()))?;
    let mut hits = 0usize;
    let mut start = 0;
    while start < set.len() {
        let end = (start + EVAL_CHUNK).min(set.len());
        let out = logits(&set.slice(start, end)?)?;
        hits += out
            .argmax_last()
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(hits as f64 / set.len() as f64)
}

/// Per-task accuracy of a plain parameter set.
pub fn accuracies(params: &NamedParamSet, cfg: &ModelConfig, sets: &[Batch]) -> Result<Vec<f64>> {
    sets.iter()
        .map(|s| accuracy_with(s, |b| model::forward(params, cfg, b, None)))
        .collect()
}

pub fn upscaled_accuracies(m: &UpscaledModel, sets: &[Batch]) -> Result<Vec<f64>> {
    sets.iter().map(|s| accuracy_with(s, |b| m.logits(b))).collect()
}

/// Each fine-tuned model on its own task.
pub fn individual_accuracies(p: &Prepared, sets: &[Batch]) -> Result<Vec<f64>> {
    sets.iter()
        .zip(&p.finetuned)
        .map(|(s, ft)| accuracy_with(s, |b| model::forward(ft, p.cfg(), b, None)))
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
