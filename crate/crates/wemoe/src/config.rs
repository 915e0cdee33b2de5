//! `RunConfig`: the TOML document driving every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use wemoe_core::merge::{MergeMethod, MergeSpec};
use wemoe_core::optim::OptimizerKind;
use wemoe_core::synth::{derive_seed, TaskSpec, TrainConfig};
use wemoe_core::tta::TTAConfig;
use wemoe_core::wemoe::{Scope, UpscaleOptions};
use wemoe_core::ModelConfig;

use crate::error::{Error, Result};
use crate::pipeline::ExperimentConfig;

fn desk() -> ExperimentConfig {
    ExperimentConfig::desk(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub input_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = desk().model;
        Self {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            seq_len: m.seq_len,
            input_dim: m.input_dim,
        }
    }
}

/// Generator settings shared by every task; per-task seeds derive from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksSection {
    pub count: usize,
    pub n_classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub signature: f64,
    pub subspace: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TasksSection {
    fn default() -> Self {
        let e = desk();
        let t = &e.tasks[0];
        Self {
            count: e.tasks.len(),
            n_classes: t.n_classes,
            separation: t.separation,
            noise: t.noise,
            signature: t.signature,
            subspace: t.subspace,
            n_train: t.n_train,
            n_test: t.n_test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = desk().pretrain;
        Self {
            steps: p.steps,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = desk().finetune;
        Self {
            steps: f.steps,
            learning_rate: f.learning_rate,
            batch_size: f.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    pub method: String,
    pub lambda: f64,
    pub ties_keep: f64,
}

impl Default for MergeSection {
    fn default() -> Self {
        let e = desk();
        Self {
            method: MergeMethod::TaskArithmetic.as_str().into(),
            lambda: e.lambda,
            ties_keep: e.ties_keep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WemoeSection {
    pub scope: String,
    pub router_depth: usize,
    pub lambda: f64,
    pub router_hidden: Option<usize>,
    pub init_std: f64,
}

impl Default for WemoeSection {
    fn default() -> Self {
        let u = desk().upscale;
        Self {
            scope: u.scope.as_str().into(),
            router_depth: u.router_depth,
            lambda: u.lambda,
            router_hidden: u.router_hidden,
            init_std: u.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `adam` or `sgd`.
    pub optimizer: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TtaSection {
    fn default() -> Self {
        let t = desk().tta;
        let OptimizerKind::Adam { beta1, beta2, eps } = OptimizerKind::adam() else {
            unreachable!()
        };
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: "adam".into(),
            beta1,
            beta2,
            eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub tasks: TasksSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub merge: MergeSection,
    pub wemoe: WemoeSection,
    pub tta: TtaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            model: ModelSection::default(),
            tasks: TasksSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            merge: MergeSection::default(),
            wemoe: WemoeSection::default(),
            tta: TtaSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn merge_method(&self) -> Result<MergeMethod> {
        Ok(MergeMethod::parse(&self.merge.method)?)
    }

    pub fn upscale_options(&self) -> Result<UpscaleOptions> {
        Ok(UpscaleOptions {
            lambda: self.wemoe.lambda,
            scope: Scope::parse(&self.wemoe.scope)?,
            router_depth: self.wemoe.router_depth,
            router_hidden: self.wemoe.router_hidden,
            init_std: self.wemoe.init_std,
        })
    }

    pub fn tta_config(&self) -> Result<TTAConfig> {
        let t = &self.tta;
        let optimizer = match t.optimizer.as_str() {
            "adam" => OptimizerKind::Adam {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            "sgd" => OptimizerKind::Sgd,
            other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
        };
        let cfg = TTAConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer,
            seed: derive_seed(self.seed, "tta", 0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully resolved experiment; every stochastic component gets a named sub-seed.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let ts = &self.tasks;
        let m = &self.model;
        let model = ModelConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            seq_len: m.seq_len,
            input_dim: m.input_dim,
            n_classes: vec![ts.n_classes; ts.count],
        };
        let tasks = (0..ts.count)
            .map(|i| TaskSpec {
                separation: ts.separation,
                noise: ts.noise,
                signature: ts.signature,
                subspace: ts.subspace,
                n_train: ts.n_train,
                n_test: ts.n_test,
                ..TaskSpec::new(i, ts.n_classes, derive_seed(self.seed, "task", i as u64))
            })
            .collect();
        let exp = ExperimentConfig {
            model,
            tasks,
            pretrain: TrainConfig {
                steps: self.pretrain.steps,
                learning_rate: self.pretrain.learning_rate,
                batch_size: self.pretrain.batch_size,
                seed: derive_seed(self.seed, "pretrain", 0),
            },
            finetune: TrainConfig {
                steps: self.finetune.steps,
                learning_rate: self.finetune.learning_rate,
                batch_size: self.finetune.batch_size,
                seed: 0,
            },
            lambda: self.merge.lambda,
            ties_keep: self.merge.ties_keep,
            upscale: self.upscale_options()?,
            tta: self.tta_config()?,
            seed: self.seed,
        };
        exp.validate()?;
        MergeSpec {
            method: self.merge_method()?,
            lambda: self.merge.lambda,
            ties_keep_fraction: self.merge.ties_keep,
        }
        .validate()?;
        Ok(exp)
    }
}
