//! The commands behind the `wemoe` binary. Each reads its inputs from the
//! run directory and writes deterministic artifacts back into it.

use std::path::{Path, PathBuf};

use wemoe_core::analysis::{
    clip_count_configs, count_report, first_choice_matrix, landscape_axis, loss_landscape_grid, observe_routing,
    param_similarity, routing_stats, CountConfig,
};
use wemoe_core::merge::MergeMethod;
use wemoe_core::tta::adapt;
use wemoe_core::wemoe::UpscaledModel;
use wemoe_core::NamedParamSet;

use crate::checkpoint::{load_params, save_params, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{
    accuracies, datasets, individual_accuracies, pretrained, unlabeled, upscaled_accuracies, ExperimentConfig, Prepared,
};
use crate::report::{self, EvalRow};

pub const DATASETS: &str = "datasets.wemc";
pub const PRETRAINED: &str = "pretrained.wemc";
pub const UPSCALED: &str = "upscaled.wemc";
pub const ADAPTED: &str = "adapted.wemc";

pub fn finetuned_file(task: usize) -> String {
    format!("finetuned_{task}.wemc")
}

pub fn merged_file(method: MergeMethod) -> String {
    format!("merged_{}.wemc", method.as_str())
}

/// Grid resolution of `landscape.csv`.
pub const LANDSCAPE_RESOLUTION: usize = 11;
const ROUTING_CHUNK: usize = 64;

/// A resolved configuration bound to its output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub exp: ExperimentConfig,
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self> {
        let exp = config.experiment()?;
        Ok(Self { config, exp })
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.config.out.join(file)
    }

    fn require(&self, file: &str, producer: &'static str) -> Result<PathBuf> {
        let path = self.path(file);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact { path, producer })
        }
    }

    fn meta(&self) -> Vec<(&'static str, String)> {
        vec![("seed", self.config.seed.to_string())]
    }

    fn load_model(&self, file: &str, producer: &'static str) -> Result<NamedParamSet> {
        let path = self.require(file, producer)?;
        let (params, ck) = load_params(&path)?;
        if ck.config()? != &self.exp.model {
            return Err(Error::Config(format!(
                "{} was produced with a different model configuration",
                path.display()
            )));
        }
        Ok(params)
    }

    fn load_upscaled(&self, file: &str, producer: &'static str) -> Result<UpscaledModel> {
        let path = self.require(file, producer)?;
        let m = Checkpoint::load(&path)?.to_upscaled()?;
        if m.cfg != self.exp.model {
            return Err(Error::Config(format!(
                "{} was produced with a different model configuration",
                path.display()
            )));
        }
        Ok(m)
    }

    /// Datasets and pretrained model.
    fn base(&self) -> Result<Prepared> {
        let path = self.require(DATASETS, "pretrain")?;
        let (train, test) = Checkpoint::load(&path)?.to_datasets()?;
        let theta_0 = self.load_model(PRETRAINED, "pretrain")?;
        Ok(Prepared {
            exp: self.exp.clone(),
            train,
            test,
            theta_0,
            finetuned: Vec::new(),
        })
    }

    /// Datasets, pretrained and every fine-tuned model.
    pub fn prepared(&self) -> Result<Prepared> {
        let mut p = self.base()?;
        p.finetuned = (0..self.exp.tasks.len())
            .map(|t| self.load_model(&finetuned_file(t), "finetune"))
            .collect::<Result<_>>()?;
        Ok(p)
    }

    fn create_out(&self) -> Result<()> {
        std::fs::create_dir_all(self.out()).map_err(|e| Error::io(self.out(), e))
    }
}

/// Writes `datasets.wemc` and `pretrained.wemc`.
pub fn cmd_pretrain(run: &Run) -> Result<()> {
    run.create_out()?;
    let (train, test) = datasets(&run.exp)?;
    Checkpoint::from_datasets(&train, &test, &run.exp.model)?.save(run.path(DATASETS))?;
    let theta_0 = pretrained(&run.exp, &train)?;
    let mut meta = run.meta();
    meta.push(("kind", "pretrained".into()));
    save_params(run.path(PRETRAINED), &theta_0, &run.exp.model, &meta)
}

/// Writes `finetuned_{t}.wemc` for every task.
pub fn cmd_finetune(run: &Run) -> Result<()> {
    let p = run.base()?;
    for (t, set) in p.train.iter().enumerate() {
        let ft = wemoe_core::synth::fine_tune(&p.theta_0, p.cfg(), set, &run.exp.finetune_config(t))?;
        let mut meta = run.meta();
        meta.push(("kind", "finetuned".into()));
        meta.push(("task", t.to_string()));
        save_params(run.path(&finetuned_file(t)), &ft, p.cfg(), &meta)?;
    }
    Ok(())
}

/// Writes `merged_{method}.wemc`; AdaMerging adapts on the unlabeled test streams.
pub fn cmd_merge(run: &Run, method: MergeMethod) -> Result<PathBuf> {
    let p = run.prepared()?;
    let merged = p.merge(method)?;
    let mut meta = run.meta();
    meta.push(("kind", "merged".into()));
    meta.push(("method", method.as_str().into()));
    let path = run.path(&merged_file(method));
    save_params(&path, &merged, p.cfg(), &meta)?;
    Ok(path)
}

/// Writes `upscaled.wemc` with freshly initialized routers.
pub fn cmd_upscale(run: &Run) -> Result<()> {
    let p = run.prepared()?;
    let m = p.upscaled(&run.exp.upscale)?;
    Checkpoint::from_upscaled(&m)?
        .with_meta("seed", run.config.seed)
        .save(run.path(UPSCALED))
}

/// Adapts `upscaled.wemc` on the unlabeled test streams; writes
/// `adapted.wemc` and `adapt_trace.csv`.
pub fn cmd_tta(run: &Run) -> Result<()> {
    let mut m = run.load_upscaled(UPSCALED, "upscale")?;
    let path = run.require(DATASETS, "pretrain")?;
    let (_, test) = Checkpoint::load(&path)?.to_datasets()?;
    let trace = adapt(&mut m, &run.exp.model, &unlabeled(&test), &run.exp.tta)?;
    Checkpoint::from_upscaled(&m)?
        .with_meta("seed", run.config.seed)
        .with_meta("tta_steps", run.exp.tta.steps)
        .save(run.path(ADAPTED))?;
    report::write_trace(&run.path(report::ADAPT_TRACE), &trace)
}

/// Accuracy of every available model on each task's test set; writes `eval.csv`.
pub fn cmd_eval(run: &Run) -> Result<Vec<EvalRow>> {
    let mut p = run.base()?;
    let cfg = p.cfg().clone();
    let mut rows = vec![EvalRow {
        method: "pretrained".into(),
        accuracy: accuracies(&p.theta_0, &cfg, &p.test)?,
    }];
    p.finetuned = (0..run.exp.tasks.len())
        .map(|t| run.load_model(&finetuned_file(t), "finetune"))
        .collect::<Result<_>>()?;
    rows.push(EvalRow {
        method: "individual".into(),
        accuracy: individual_accuracies(&p, &p.test)?,
    });
    for method in MergeMethod::ALL {
        let file = merged_file(method);
        if run.path(&file).is_file() {
            let merged = run.load_model(&file, "merge")?;
            rows.push(EvalRow {
                method: method.as_str().into(),
                accuracy: accuracies(&merged, &cfg, &p.test)?,
            });
        }
    }
    for (file, label) in [(UPSCALED, "wemoe_init"), (ADAPTED, "wemoe")] {
        if run.path(file).is_file() {
            let m = run.load_upscaled(file, "upscale")?;
            rows.push(EvalRow {
                method: label.into(),
                accuracy: upscaled_accuracies(&m, &p.test)?,
            });
        }
    }
    report::write_eval(&run.path(report::EVAL), &rows)?;
    Ok(rows)
}

/// Writes `counts.csv`, `similarity.csv` and `landscape.csv`, plus
/// `routing.csv` and `first_choice.csv` when an upscaled model exists
/// (the adapted one is preferred).
pub fn cmd_analyze(run: &Run) -> Result<()> {
    run.create_out()?;
    let mut counts = clip_count_configs();
    let cfg = &run.exp.model;
    for depth in 0..=2 {
        counts.push(CountConfig::desk(
            &format!("desk-l{depth}"),
            cfg,
            depth,
            run.exp.upscale.scope,
        ));
    }
    report::write_counts(&run.path(report::COUNTS), &count_report(&counts))?;

    let p = run.prepared()?;
    let similarity = p
        .finetuned
        .iter()
        .map(|ft| param_similarity(&p.theta_0, ft))
        .collect::<wemoe_core::Result<Vec<_>>>()?;
    report::write_similarity(&run.path(report::SIMILARITY), &similarity)?;

    if p.finetuned.len() >= 2 {
        let taus = p.task_vectors()?;
        let grid = loss_landscape_grid(
            &p.base_with_heads()?,
            &taus[0],
            &taus[1],
            cfg,
            [&p.test[0], &p.test[1]],
            &landscape_axis(LANDSCAPE_RESOLUTION)?,
        )?;
        report::write_landscape(&run.path(report::LANDSCAPE), &grid)?;
    }

    let source = [ADAPTED, UPSCALED].into_iter().find(|f| run.path(f).is_file());
    if let Some(file) = source {
        let m = run.load_upscaled(file, "upscale")?;
        let obs = observe_routing(&m, &p.test, ROUTING_CHUNK)?;
        report::write_routing(&run.path(report::ROUTING), &obs, &routing_stats(&obs))?;
        report::write_first_choice(&run.path(report::FIRST_CHOICE), &obs, &first_choice_matrix(&obs))?;
    }
    Ok(())
}
