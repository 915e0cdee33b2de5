//! Parameter similarity, routing statistics, loss landscapes and parameter counts.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelConfig};
use crate::params::{is_head, NamedParamSet, TaskVector};
use crate::tensor::{argmax, Real, Tensor};
use crate::wemoe::{router_param_count, Scope, UpscaledModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModuleGroup {
    Attn,
    Mlp,
    Other,
}

impl ModuleGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attn => "attn",
            Self::Mlp => "mlp",
            Self::Other => "other",
        }
    }

    /// Group and layer of an encoder parameter name.
    pub fn of(name: &str) -> (Self, Option<usize>) {
        let Some(rest) = name.strip_prefix("layers.") else {
            return (Self::Other, None);
        };
        let mut parts = rest.split('.');
        let layer = parts.next().and_then(|s| s.parse().ok());
        let group = match parts.next() {
            Some("attn") => Self::Attn,
            Some("mlp") => Self::Mlp,
            _ => Self::Other,
        };
        (group, layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    pub group: ModuleGroup,
    /// `None` for parameters outside the blocks (embedding, final norm).
    pub layer: Option<usize>,
    pub l2: f64,
    pub cosine: f64,
    /// Set when either side has zero norm; `cosine` is then reported as 0.
    pub degenerate: bool,
}

type GroupKey = (ModuleGroup, Option<usize>);

/// `‖θᵢ − θ₀‖₂` and `cos(θᵢ, θ₀)` per module group and layer, heads excluded.
pub fn param_similarity<T: Real>(theta_0: &NamedParamSet<T>, theta_i: &NamedParamSet<T>) -> Result<Vec<SimilarityRow>> {
    theta_0.check_congruent(theta_i)?;
    // (group, layer) -> (Σ(a−b)², Σab, Σa², Σb²)
    let mut acc: Vec<(GroupKey, [f64; 4])> = Vec::new();
    for (name, a) in theta_0.iter() {
        if is_head(name) {
            continue;
        }
        let b = theta_i.get(name).expect("congruent");
        let key = ModuleGroup::of(name);
        let slot = match acc.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                acc.push((key, [0.0; 4]));
                acc.len() - 1
            }
        };
        let s = &mut acc[slot].1;
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (x, y) = (x.as_f64(), y.as_f64());
            s[0] += (y - x) * (y - x);
            s[1] += x * y;
            s[2] += x * x;
            s[3] += y * y;
        }
    }
    acc.sort_by_key(|((g, l), _)| (l.map_or(usize::MAX, |l| l), *g));
    Ok(acc
        .into_iter()
        .map(|((group, layer), s)| {
            let (c, degenerate) = cosine_from_sums(s[1], s[2], s[3]);
            SimilarityRow {
                group,
                layer,
                l2: num_traits::Float::sqrt(s[0]),
                cosine: c,
                degenerate,
            }
        })
        .collect())
}

fn cosine_from_sums(dot: f64, aa: f64, bb: f64) -> (f64, bool) {
    if aa == 0.0 || bb == 0.0 {
        return (0.0, true);
    }
    let c = dot / (num_traits::Float::sqrt(aa) * num_traits::Float::sqrt(bb));
    (c.clamp(-1.0, 1.0), false)
}

/// Cosine similarity of two equal-length vectors; zero vectors give `(0, true)`.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> (f64, bool) {
    let mut s = [0.0; 3];
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        s[0] += x * y;
        s[1] += x * x;
        s[2] += y * y;
    }
    cosine_from_sums(s[0], s[1], s[2])
}

/// Routing weights gathered over labeled evaluation sets:
/// `weights[t][k]` is `[n_t × T]` for source task `t` at site `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingObservations {
    pub site_ids: Vec<String>,
    pub weights: Vec<Vec<Tensor<f64>>>,
}

/// Runs `model` over each source task's batch in chunks of `chunk` rows.
pub fn observe_routing<T: Real>(
    model: &UpscaledModel<T>,
    sets: &[Batch<T>],
    chunk: usize,
) -> Result<RoutingObservations> {
    let chunk = chunk.max(1);
    let n_sites = model.sites.len();
    let t = model.n_tasks();
    let mut weights = Vec::with_capacity(sets.len());
    for set in sets {
        let mut per_site: Vec<Vec<f64>> = vec![Vec::new(); n_sites];
        let mut start = 0;
        while start < set.len() {
            let end = (start + chunk).min(set.len());
            let ws = model.routing_weights(&set.slice(start, end)?)?;
            for (k, w) in ws.iter().enumerate() {
                per_site[k].extend(w.data().iter().map(|v| v.as_f64()));
            }
            start = end;
        }
        let rows = set.len();
        weights.push(
            per_site
                .into_iter()
                .map(|d| Tensor::new([rows, t], d))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(RoutingObservations {
        site_ids: model.sites.iter().map(|s| s.id()).collect(),
        weights,
    })
}

/// `mean[k][t]`: mean routing vector at site `k` over source task `t`'s samples.
pub fn routing_stats(obs: &RoutingObservations) -> Vec<Vec<Vec<f64>>> {
    let n_sites = obs.site_ids.len();
    (0..n_sites)
        .map(|k| {
            obs.weights
                .iter()
                .map(|per_site| {
                    let w = &per_site[k];
                    let (rows, t) = (w.shape()[0], w.shape()[1]);
                    let mut m = vec![0.0; t];
                    for r in 0..rows {
                        for (j, mj) in m.iter_mut().enumerate() {
                            *mj += w.data()[r * t + j];
                        }
                    }
                    m.iter_mut().for_each(|v| *v /= rows.max(1) as f64);
                    m
                })
                .collect()
        })
        .collect()
}

/// `matrix[t][k]`: fraction of task-`t` samples whose largest weight at site
/// `k` is on task `t`; ties go to the lowest index.
pub fn first_choice_matrix(obs: &RoutingObservations) -> Vec<Vec<f64>> {
    obs.weights
        .iter()
        .enumerate()
        .map(|(t, per_site)| {
            per_site
                .iter()
                .map(|w| {
                    let (rows, n) = (w.shape()[0], w.shape()[1]);
                    let hits = (0..rows)
                        .filter(|&r| argmax(&w.data()[r * n..(r + 1) * n]) == t)
                        .count();
                    hits as f64 / rows.max(1) as f64
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub axis: Vec<f64>,
    /// `loss_a[i][j]` at `(λ₁, λ₂) = (axis[i], axis[j])`.
    pub loss_a: Vec<Vec<f64>>,
    pub loss_b: Vec<Vec<f64>>,
    pub joint: Vec<Vec<f64>>,
}

/// `resolution` evenly spaced points on `[−1, 1]`.
pub fn landscape_axis(resolution: usize) -> Result<Vec<f64>> {
    if resolution < 2 {
        return Err(Error::Config("landscape resolution must be >= 2".into()));
    }
    let step = 2.0 / (resolution - 1) as f64;
    Ok((0..resolution).map(|i| -1.0 + step * i as f64).collect())
}

/// Cross-entropy of `θ₀ + λ₁τ₁ + λ₂τ₂` on two labeled sets over `axis × axis`.
/// Heads come from `theta_0`.
pub fn loss_landscape_grid<T: Real>(
    theta_0: &NamedParamSet<T>,
    tau_1: &TaskVector<T>,
    tau_2: &TaskVector<T>,
    cfg: &ModelConfig,
    eval_sets: [&Batch<T>; 2],
    axis: &[f64],
) -> Result<LandscapeGrid> {
    crate::params::check_covers(theta_0, tau_1)?;
    crate::params::check_covers(theta_0, tau_2)?;
    if axis.is_empty() {
        return Err(Error::Config("landscape axis is empty".into()));
    }
    for set in eval_sets {
        if set.labels.is_none() {
            return Err(Error::Config("landscape sets need labels".into()));
        }
    }
    let n = axis.len();
    let mut loss_a = vec![vec![0.0; n]; n];
    let mut loss_b = vec![vec![0.0; n]; n];
    let mut joint = vec![vec![0.0; n]; n];
    for (i, &l1) in axis.iter().enumerate() {
        for (j, &l2) in axis.iter().enumerate() {
            let theta = interpolate(theta_0, tau_1, tau_2, l1, l2)?;
            let a = set_loss(&theta, cfg, eval_sets[0])?;
            let b = set_loss(&theta, cfg, eval_sets[1])?;
            loss_a[i][j] = a;
            loss_b[i][j] = b;
            joint[i][j] = a + b;
        }
    }
    Ok(LandscapeGrid {
        axis: axis.to_vec(),
        loss_a,
        loss_b,
        joint,
    })
}

fn interpolate<T: Real>(
    theta_0: &NamedParamSet<T>,
    tau_1: &TaskVector<T>,
    tau_2: &TaskVector<T>,
    l1: f64,
    l2: f64,
) -> Result<NamedParamSet<T>> {
    let mut theta = theta_0.clone();
    for (name, t) in theta.iter_mut() {
        if is_head(name) {
            continue;
        }
        if l1 != 0.0 {
            t.axpy(T::c(l1), tau_1.get(name).expect("covered"))?;
        }
        if l2 != 0.0 {
            t.axpy(T::c(l2), tau_2.get(name).expect("covered"))?;
        }
    }
    Ok(theta)
}

/// Mean cross-entropy of `params` on a labeled set.
pub fn set_loss<T: Real>(params: &NamedParamSet<T>, cfg: &ModelConfig, set: &Batch<T>) -> Result<f64> {
    let logits = model::forward(params, cfg, set, None)?;
    let labels = set
        .labels
        .as_deref()
        .ok_or_else(|| Error::Config("loss needs labels".into()))?;
    Ok(model::cross_entropy_value(&logits, labels).as_f64())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountConfig {
    pub label: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_tasks: usize,
    pub depth: usize,
    pub hidden: usize,
    pub scope: Scope,
    /// Parameter count of the single pretrained model, when known.
    pub base_params: Option<u64>,
}

impl CountConfig {
    /// A ViT-style encoder with `d_ff = 4d`, MLP-only upscaling and `hidden = d`.
    pub fn vit(label: &str, d: usize, layers: usize, n_tasks: usize, depth: usize) -> Self {
        Self {
            label: label.into(),
            d_model: d,
            n_layers: layers,
            d_ff: 4 * d,
            n_tasks,
            depth,
            hidden: d,
            scope: Scope::MlpOnly,
            base_params: None,
        }
    }

    /// Counts for a concrete desk model.
    pub fn desk(label: &str, cfg: &ModelConfig, depth: usize, scope: Scope) -> Self {
        let base = cfg.encoder_param_count() + cfg.n_classes.iter().map(|&c| (c * cfg.d_model + c) as u64).sum::<u64>();
        Self {
            label: label.into(),
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            d_ff: cfg.d_ff,
            n_tasks: cfg.n_tasks(),
            depth,
            hidden: cfg.d_model,
            scope,
            base_params: Some(base),
        }
    }

    fn site_params_per_layer(&self) -> Vec<u64> {
        let (d, ff) = (self.d_model as u64, self.d_ff as u64);
        let attn = 4 * (d * d + d);
        let mlp = 2 * d * ff + ff + d;
        let norms = 4 * d;
        match self.scope {
            Scope::MlpOnly => vec![mlp],
            Scope::AttnAndMlpSeparate => vec![attn, mlp],
            Scope::WholeBlock => vec![attn + mlp + norms],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub label: String,
    pub depth: usize,
    pub n_tasks: usize,
    pub n_sites: usize,
    pub trainable: u64,
    /// Frozen task-vector dictionary entries across all sites.
    pub dictionary: u64,
    /// Base model plus dictionaries plus routers, when the base is known.
    pub total: Option<u64>,
}

pub fn count_report(configs: &[CountConfig]) -> Vec<CountRow> {
    configs
        .iter()
        .map(|c| {
            let per_layer = c.site_params_per_layer();
            let n_sites = per_layer.len() * c.n_layers;
            let router = router_param_count(c.depth, c.d_model, c.hidden, c.n_tasks);
            let trainable = n_sites as u64 * router;
            let dictionary = c.n_tasks as u64 * c.n_layers as u64 * per_layer.iter().sum::<u64>();
            CountRow {
                label: c.label.clone(),
                depth: c.depth,
                n_tasks: c.n_tasks,
                n_sites,
                trainable,
                dictionary,
                total: c.base_params.map(|b| b + dictionary + trainable),
            }
        })
        .collect()
}

/// The CLIP encoder shapes used by the published count tables.
pub fn clip_count_configs() -> Vec<CountConfig> {
    let mut out = Vec::new();
    for depth in [0, 1, 2] {
        out.push(CountConfig::vit("CLIP-ViT-B/32", 768, 12, 8, depth));
        out.push(CountConfig::vit("CLIP-ViT-B/16", 768, 12, 8, depth));
        out.push(CountConfig::vit("CLIP-ViT-L/14", 1024, 24, 8, depth));
    }
    for t in 2..8 {
        out.push(CountConfig::vit("CLIP-ViT-B/32", 768, 12, t, 2));
    }
    out
}
