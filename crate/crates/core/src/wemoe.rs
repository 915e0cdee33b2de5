//! Weight-ensembling mixture-of-experts upscaling.
//!
//! Each site keeps its pretrained weights `θ₀` frozen next to a dictionary of
//! site-restricted task vectors. A router maps the site input to a weight
//! vector `w ∈ ℝᵀ` (the token mean of the router output) and the sublayer
//! runs with `θ₀ + Σᵢ wᵢ τᵢ`, one weight set per sample.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::merge::task_arithmetic;
use crate::model::{
    attention_sublayer, block_forward, check_params, forward_on_tape, mlp_sublayer, site_param_names, Batch,
    ModelConfig, NoHook, SiteKind, SublayerHook,
};
use crate::params::{task_vector, NamedParamSet, TaskVector};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Standard deviation of router weights at init (variance 0.01).
pub const ROUTER_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    MlpOnly,
    AttnAndMlpSeparate,
    WholeBlock,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mlp" | "mlp_only" => Self::MlpOnly,
            "attn-mlp" | "attn_and_mlp_separate" => Self::AttnAndMlpSeparate,
            "block" | "whole_block" => Self::WholeBlock,
            other => return Err(Error::Config(format!("unknown upscaling scope `{other}`"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MlpOnly => "mlp_only",
            Self::AttnAndMlpSeparate => "attn_and_mlp_separate",
            Self::WholeBlock => "whole_block",
        }
    }

    /// Site kinds created in every block.
    pub fn kinds(self) -> &'static [SiteKind] {
        match self {
            Self::MlpOnly => &[SiteKind::Mlp],
            Self::AttnAndMlpSeparate => &[SiteKind::Attention, SiteKind::Mlp],
            Self::WholeBlock => &[SiteKind::Block],
        }
    }
}

pub fn site_kind_name(kind: SiteKind) -> &'static str {
    match kind {
        SiteKind::Attention => "attn",
        SiteKind::Mlp => "mlp",
        SiteKind::Block => "block",
    }
}

pub fn parse_site_kind(s: &str) -> Result<SiteKind> {
    Ok(match s {
        "attn" => SiteKind::Attention,
        "mlp" => SiteKind::Mlp,
        "block" => SiteKind::Block,
        other => return Err(Error::Config(format!("unknown site kind `{other}`"))),
    })
}

/// Trainable scalars of one router.
pub fn router_param_count(depth: usize, d: usize, hidden: usize, n_tasks: usize) -> u64 {
    let (d, h, t) = (d as u64, hidden as u64, n_tasks as u64);
    match depth {
        0 => t,
        1 => t * d + t,
        _ => d * h + h + t * h + t,
    }
}

/// The `l`-layer perceptron `r(h)`; depth 0 is a bare bias.
///
/// Tensors by depth: 0 `[b0]`; 1 `[w1 (T×d), b1]`; 2 `[w1 (hidden×d), b1, w2 (T×hidden), b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Router<T: Real = f32> {
    depth: usize,
    input_dim: usize,
    hidden: usize,
    n_tasks: usize,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Router<T> {
    /// A zero-initialized router.
    pub fn new(depth: usize, input_dim: usize, hidden: usize, n_tasks: usize) -> Result<Self> {
        if depth > 2 {
            return Err(Error::Config(format!("router depth {depth} not in 0..=2")));
        }
        if input_dim == 0 || n_tasks == 0 || (depth == 2 && hidden == 0) {
            return Err(Error::Config("router dimensions must be positive".into()));
        }
        let z = |s: &[usize]| Tensor::zeros(s.to_vec()).with_requires_grad(true);
        let tensors = match depth {
            0 => vec![z(&[n_tasks])],
            1 => vec![z(&[n_tasks, input_dim]), z(&[n_tasks])],
            _ => vec![
                z(&[hidden, input_dim]),
                z(&[hidden]),
                z(&[n_tasks, hidden]),
                z(&[n_tasks]),
            ],
        };
        Ok(Self {
            depth,
            input_dim,
            hidden: if depth == 2 { hidden } else { 0 },
            n_tasks,
            tensors,
        })
    }

    pub fn from_tensors(
        depth: usize,
        input_dim: usize,
        hidden: usize,
        n_tasks: usize,
        tensors: Vec<Tensor<T>>,
    ) -> Result<Self> {
        let mut r = Self::new(depth, input_dim, hidden, n_tasks)?;
        if tensors.len() != r.tensors.len() {
            return Err(Error::Config(format!(
                "depth-{depth} router needs {} tensors, got {}",
                r.tensors.len(),
                tensors.len()
            )));
        }
        for (slot, t) in r.tensors.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "router tensor",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t.with_requires_grad(true);
        }
        Ok(r)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self.depth {
            0 => &["b0"],
            1 => &["w1", "b1"],
            _ => &["w1", "b1", "w2", "b2"],
        }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Zero linear weights and final bias `w`, so `r(h) = w` for every `h`.
    pub fn force_constant(&mut self, w: &[T]) -> Result<()> {
        if w.len() != self.n_tasks {
            return Err(Error::Dimension {
                op: "force_constant",
                lhs: vec![self.n_tasks],
                rhs: vec![w.len()],
            });
        }
        let last = self.tensors.len() - 1;
        for t in &mut self.tensors[..last] {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        self.tensors[last].data_mut().copy_from_slice(w);
        Ok(())
    }

    /// Records `w = mean_n r(h_n)` for `hidden: [B × N × d]`, returning `[B × T]`.
    pub fn record(&self, tape: &mut Tape<T>, vars: &[Var], hidden: Var) -> Result<Var> {
        let hs = tape.value(hidden).shape().to_vec();
        if hs.len() != 3 || hs[2] != self.input_dim {
            return Err(Error::Dimension {
                op: "route",
                lhs: hs,
                rhs: vec![0, 0, self.input_dim],
            });
        }
        match self.depth {
            0 => {
                let zeros = tape.constant(Tensor::zeros([hs[0], self.n_tasks]));
                tape.add_broadcast(zeros, vars[0])
            }
            1 => {
                let r = tape.linear(hidden, vars[0], Some(vars[1]))?;
                tape.mean_axis1(r)
            }
            _ => {
                let h = tape.linear(hidden, vars[0], Some(vars[1]))?;
                let h = tape.relu(h)?;
                let r = tape.linear(h, vars[2], Some(vars[3]))?;
                tape.mean_axis1(r)
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// `W ~ N(0, std²)`, hidden bias 0, output bias `λ`.
pub fn init_router<T: Real, R: Rng + ?Sized>(router: &mut Router<T>, lambda: T, std: f64, rng: &mut R) {
    let depth = router.depth;
    for (i, t) in router.tensors.iter_mut().enumerate() {
        let is_weight = t.rank() == 2;
        let is_output_bias = (depth == 0 && i == 0) || (depth == 1 && i == 1) || (depth == 2 && i == 3);
        let fresh: Tensor<T> = if is_weight {
            Tensor::randn(t.shape().to_vec(), std, rng)
        } else if is_output_bias {
            Tensor::full(t.shape().to_vec(), lambda)
        } else {
            Tensor::zeros(t.shape().to_vec())
        };
        *t = fresh.with_requires_grad(true);
    }
}

/// Routing weights `[B × T]` for `hidden: [B × N × d]`.
pub fn route<T: Real>(router: &Router<T>, hidden: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = router.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let h = tape.constant(hidden.clone());
    let w = router.record(&mut tape, &vars, h)?;
    Ok(tape.value(w).clone())
}

/// Site-restricted task vectors: `columns[i][j]` is `τᵢ` for the site's j-th tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDictionary<T: Real = f32> {
    pub columns: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> TaskDictionary<T> {
    pub fn n_tasks(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WEMoESite<T: Real = f32> {
    pub layer: usize,
    pub kind: SiteKind,
    pub names: Vec<String>,
    pub theta0: Vec<Tensor<T>>,
    pub dict: TaskDictionary<T>,
    pub router: Router<T>,
}

impl<T: Real> WEMoESite<T> {
    pub fn id(&self) -> String {
        format!("layers.{}.{}", self.layer, site_kind_name(self.kind))
    }

    /// `θ₀ + Σᵢ wᵢ τᵢ` for every tensor of the site.
    pub fn materialize(&self, w: &[T]) -> Result<Vec<Tensor<T>>> {
        if w.len() != self.dict.n_tasks() {
            return Err(Error::Dimension {
                op: "materialize",
                lhs: vec![self.dict.n_tasks()],
                rhs: vec![w.len()],
            });
        }
        let mut out = self.theta0.clone();
        for (col, &wi) in self.dict.columns.iter().zip(w) {
            for (o, d) in out.iter_mut().zip(col) {
                o.axpy(wi, d)?;
            }
        }
        Ok(out)
    }

    /// Runs the site sublayer on `hidden: [B × N × d]` with per-row weights `w: [B × T]`.
    pub fn apply(&self, tape: &mut Tape<T>, cfg: &ModelConfig, hidden: Var, w: Var) -> Result<Var> {
        let rows = tape.value(hidden).shape()[0];
        let ws = tape.value(w).shape().to_vec();
        if ws != [rows, self.dict.n_tasks()] {
            return Err(Error::Dimension {
                op: "site weights",
                lhs: ws,
                rhs: vec![rows, self.dict.n_tasks()],
            });
        }
        let bases: Vec<Var> = self.theta0.iter().map(|t| tape.constant(t.clone())).collect();
        let deltas: Vec<Vec<Var>> = (0..self.names.len())
            .map(|j| {
                self.dict
                    .columns
                    .iter()
                    .map(|col| tape.constant(col[j].clone()))
                    .collect()
            })
            .collect();
        let mut outs = Vec::with_capacity(rows);
        for b in 0..rows {
            let mut local = alloc::collections::BTreeMap::new();
            for (j, name) in self.names.iter().enumerate() {
                local.insert(name.clone(), tape.combine(bases[j], &deltas[j], w, b)?);
            }
            let hb = tape.select_row(hidden, b)?;
            let out = match self.kind {
                SiteKind::Mlp => mlp_sublayer(tape, &local, self.layer, hb)?,
                SiteKind::Attention => attention_sublayer(tape, &local, cfg, self.layer, hb)?,
                SiteKind::Block => block_forward(tape, &local, cfg, self.layer, hb, &mut NoHook)?,
            };
            outs.push(out);
        }
        tape.concat_rows(&outs)
    }
}

/// Eager site forward: routes `hidden` through the site's router.
pub fn moe_forward<T: Real>(site: &WEMoESite<T>, cfg: &ModelConfig, hidden: &Tensor<T>) -> Result<Tensor<T>> {
    let w = route(&site.router, hidden)?;
    moe_forward_with_weights(site, cfg, hidden, &w)
}

/// Eager site forward with explicit routing weights `[B × T]`.
pub fn moe_forward_with_weights<T: Real>(
    site: &WEMoESite<T>,
    cfg: &ModelConfig,
    hidden: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let wv = tape.constant(w.clone());
    let out = site.apply(&mut tape, cfg, h, wv)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpscaleOptions {
    pub lambda: f64,
    pub scope: Scope,
    pub router_depth: usize,
    /// Hidden width of depth-2 routers; `None` means `d_model`.
    pub router_hidden: Option<usize>,
    pub init_std: f64,
}

impl Default for UpscaleOptions {
    fn default() -> Self {
        Self {
            lambda: crate::merge::DEFAULT_LAMBDA,
            scope: Scope::MlpOnly,
            router_depth: 2,
            router_hidden: None,
            init_std: ROUTER_INIT_STD,
        }
    }
}

impl UpscaleOptions {
    pub fn validate(&self) -> Result<()> {
        if self.router_depth > 2 {
            return Err(Error::Config(format!(
                "router depth {} not in 0..=2",
                self.router_depth
            )));
        }
        if self.router_hidden == Some(0) {
            return Err(Error::Config("router hidden width must be positive".into()));
        }
        if !self.lambda.is_finite() || !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(
                "router lambda and init std must be finite, std >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpscaledModel<T: Real = f32> {
    pub cfg: ModelConfig,
    pub scope: Scope,
    pub lambda: f64,
    pub static_params: NamedParamSet<T>,
    pub sites: Vec<WEMoESite<T>>,
}

/// Builds sites per `scope`, merges the rest by task arithmetic and
/// initializes every router.
pub fn upscale<T: Real, R: Rng + ?Sized>(
    theta_0: &NamedParamSet<T>,
    finetuned: &[NamedParamSet<T>],
    cfg: &ModelConfig,
    opts: &UpscaleOptions,
    rng: &mut R,
) -> Result<UpscaledModel<T>> {
    if finetuned.is_empty() {
        return Err(Error::Config("upscale needs at least one fine-tuned model".into()));
    }
    opts.validate()?;
    check_params(theta_0, cfg)?;
    let taus: Vec<TaskVector<T>> = finetuned
        .iter()
        .map(|ft| task_vector(ft, theta_0))
        .collect::<Result<_>>()?;
    let merged = task_arithmetic(theta_0, &taus, T::c(opts.lambda))?;
    let hidden = opts.router_hidden.unwrap_or(cfg.d_model);
    let mut sites = Vec::new();
    let mut site_names = BTreeSet::new();
    for layer in 0..cfg.n_layers {
        for &kind in opts.scope.kinds() {
            let names = site_param_names(layer, kind);
            let theta0 = names
                .iter()
                .map(|n| theta_0.require(n).cloned())
                .collect::<Result<Vec<_>>>()?;
            let columns = taus
                .iter()
                .map(|tau| names.iter().map(|n| tau.get(n).cloned().expect("covered")).collect())
                .collect();
            let mut router = Router::new(opts.router_depth, cfg.d_model, hidden, taus.len())?;
            init_router(&mut router, T::c(opts.lambda), opts.init_std, rng);
            site_names.extend(names.iter().cloned());
            sites.push(WEMoESite {
                layer,
                kind,
                names,
                theta0,
                dict: TaskDictionary { columns },
                router,
            });
        }
    }
    let static_params = merged.filter(|n| !site_names.contains(n));
    let model = UpscaledModel {
        cfg: cfg.clone(),
        scope: opts.scope,
        lambda: opts.lambda,
        static_params,
        sites,
    };
    model.check_partition()?;
    Ok(model)
}

/// Logits plus the tape handles needed for adaptation and analysis.
pub struct Recorded {
    pub logits: Var,
    /// Router leaves, site by site, in `Router::tensors` order.
    pub router_vars: Vec<Vec<Var>>,
    /// `[B × T]` routing weights of every site.
    pub weights: Vec<Var>,
}

struct SiteHook<'a, T: Real> {
    model: &'a UpscaledModel<T>,
    router_vars: &'a [Vec<Var>],
    weights: Vec<Option<Var>>,
}

impl<T: Real> SublayerHook<T> for SiteHook<'_, T> {
    fn replace(
        &mut self,
        tape: &mut Tape<T>,
        cfg: &ModelConfig,
        layer: usize,
        kind: SiteKind,
        input: Var,
    ) -> Result<Option<Var>> {
        let Some(k) = self.model.site_index(layer, kind) else {
            return Ok(None);
        };
        let site = &self.model.sites[k];
        let w = site.router.record(tape, &self.router_vars[k], input)?;
        self.weights[k] = Some(w);
        site.apply(tape, cfg, input, w).map(Some)
    }
}

impl<T: Real> UpscaledModel<T> {
    pub fn n_tasks(&self) -> usize {
        self.sites.first().map_or(0, |s| s.dict.n_tasks())
    }

    pub fn router_depth(&self) -> usize {
        self.sites.first().map_or(0, |s| s.router.depth())
    }

    pub fn site_index(&self, layer: usize, kind: SiteKind) -> Option<usize> {
        self.sites.iter().position(|s| s.layer == layer && s.kind == kind)
    }

    /// Every name either static or in exactly one site, covering the model.
    pub fn check_partition(&self) -> Result<()> {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for name in self.static_params.names() {
            seen.insert(name.to_string());
        }
        for site in &self.sites {
            for name in &site.names {
                if !seen.insert(name.clone()) {
                    return Err(Error::Congruence(format!("`{name}` appears twice")));
                }
            }
        }
        let mut expected: BTreeSet<String> = self.cfg.encoder_names().into_iter().collect();
        for t in 0..self.cfg.n_tasks() {
            expected.insert(crate::model::head_weight(t));
            expected.insert(crate::model::head_bias(t));
        }
        if let Some(extra) = seen.difference(&expected).next() {
            return Err(Error::Congruence(format!("unexpected parameter `{extra}`")));
        }
        if let Some(missing) = expected.difference(&seen).next() {
            return Err(Error::MissingParameter(missing.clone()));
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape<T>, batch: &Batch<T>) -> Result<Recorded> {
        batch.validate(&self.cfg)?;
        let router_vars: Vec<Vec<Var>> = self.sites.iter().map(|s| s.router.bind(tape)).collect();
        let bound: alloc::collections::BTreeMap<String, Var> = self
            .static_params
            .iter()
            .map(|(n, t)| (n.to_string(), tape.constant(t.clone())))
            .collect();
        let inputs = tape.constant(batch.inputs.clone());
        let mut hook = SiteHook {
            model: self,
            router_vars: &router_vars,
            weights: vec![None; self.sites.len()],
        };
        let logits = forward_on_tape(tape, &bound, &self.cfg, inputs, batch.task_id, Some(&mut hook))?;
        let weights = hook
            .weights
            .into_iter()
            .map(|w| w.ok_or_else(|| Error::Contract("site was never visited".into())))
            .collect::<Result<_>>()?;
        Ok(Recorded {
            logits,
            router_vars,
            weights,
        })
    }

    pub fn logits(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let r = self.record(&mut tape, batch)?;
        Ok(tape.value(r.logits).clone())
    }

    /// Per-site routing weights `[B × T]` observed on `batch`.
    pub fn routing_weights(&self, batch: &Batch<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let r = self.record(&mut tape, batch)?;
        Ok(r.weights.iter().map(|&w| tape.value(w).clone()).collect())
    }

    /// Router tensors as `sites.{k}.router.{name}`.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.sites
            .iter()
            .enumerate()
            .flat_map(|(k, s)| {
                s.router
                    .param_names()
                    .iter()
                    .zip(s.router.tensors())
                    .map(move |(n, t)| (format!("sites.{k}.router.{n}"), t))
            })
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.sites.iter().map(|s| s.router.num_params()).sum()
    }

    pub fn router_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.sites
            .iter_mut()
            .flat_map(|s| s.router.tensors_mut().iter_mut())
            .collect()
    }

    /// Forces every router to output `w` regardless of input.
    pub fn force_routers(&mut self, w: &[T]) -> Result<()> {
        self.sites.iter_mut().try_for_each(|s| s.router.force_constant(w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        assert_eq!(12 * router_param_count(0, 768, 768, 8), 96);
        assert_eq!(24 * router_param_count(0, 1024, 1024, 8), 192);
        assert_eq!(12 * router_param_count(1, 768, 768, 8), 73_824);
        assert_eq!(12 * router_param_count(2, 768, 768, 8), 7_160_928);
        assert_eq!(24 * router_param_count(2, 1024, 1024, 8), 25_387_200);
        assert_eq!(12 * router_param_count(2, 768, 768, 2), 7_105_560);
    }

    #[test]
    fn router_shapes_match_counts() {
        for depth in 0..=2 {
            let r = Router::<f32>::new(depth, 8, 5, 3).unwrap();
            assert_eq!(r.num_params() as u64, router_param_count(depth, 8, 5, 3));
            assert_eq!(r.tensors().len(), r.param_names().len());
        }
        assert!(Router::<f32>::new(3, 8, 8, 3).is_err());
    }

    #[test]
    fn depth_zero_routes_to_bias() {
        let mut r = Router::<f32>::new(0, 4, 0, 3).unwrap();
        r.force_constant(&[0.3, 0.3, 0.3]).unwrap();
        let h = Tensor::full([2, 5, 4], 7.0);
        let w = route(&r, &h).unwrap();
        assert_eq!(w.shape(), &[2, 3]);
        assert!(w.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn depth_one_hand_example() {
        // w1 rows: [1,0], [0,2]; tokens [1,0] and [0,1] → mean of [1,0] and [0,2].
        let w1 = Tensor::from_slice([2, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap();
        let r = Router::<f32>::from_tensors(1, 2, 0, 2, vec![w1, Tensor::zeros([2])]).unwrap();
        let h = Tensor::from_slice([1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(route(&r, &h).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn scope_names() {
        for s in [Scope::MlpOnly, Scope::AttnAndMlpSeparate, Scope::WholeBlock] {
            assert_eq!(Scope::parse(s.as_str()).unwrap(), s);
        }
        assert_eq!(Scope::parse("attn-mlp").unwrap(), Scope::AttnAndMlpSeparate);
        assert!(Scope::parse("heads").is_err());
    }
}
