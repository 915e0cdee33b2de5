//! The `.wemc` container.
//!
//! ```text
//! "WEMC" | u32 version | u64 manifest length | manifest (UTF-8) | u64 blob length | blob
//! ```
//!
//! The manifest is line-oriented text split into `[meta]`, `[config]`,
//! `[sites]` and `[tensors]` sections. Each tensor line reads
//! `name shape offset`, where `shape` is `AxBxC` (`scalar` for rank 0) and
//! `offset` is a byte offset into the blob of little-endian `f32` values.
//! Tensors are packed back to back in manifest order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use wemoe_core::model::SiteKind;
use wemoe_core::wemoe::UpscaledModel;
use wemoe_core::wemoe::{parse_site_kind, site_kind_name, Router, Scope, TaskDictionary, WEMoESite};
use wemoe_core::{Batch, ModelConfig, NamedParamSet, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WEMC";
pub const VERSION: u32 = 1;

/// Layout of one upscaled site, enough to rebuild it from the tensor table.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteEntry {
    pub layer: usize,
    pub kind: SiteKind,
    pub depth: usize,
    pub hidden: usize,
    pub n_tasks: usize,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub config: Option<ModelConfig>,
    pub sites: Vec<SiteEntry>,
    pub tensors: NamedParamSet,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| format_err(format!("bad shape `{s}`"))))
        .collect()
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(char::is_whitespace) || s.contains(['=', ',']) {
        return Err(format_err(format!("{what} `{s}` cannot be written to a manifest")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(tensors: NamedParamSet) -> Self {
        Self {
            tensors,
            ..Self::default()
        }
    }

    pub fn with_config(mut self, cfg: &ModelConfig) -> Self {
        self.config = Some(cfg.clone());
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format_err(format!("manifest has no `{key}` entry")))
    }

    fn manifest(&self) -> Result<String> {
        let mut m = String::from("[meta]\n");
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains(['\n', '\r']) {
                return Err(format_err(format!("meta value for `{k}` spans lines")));
            }
            let _ = writeln!(m, "{k} = {v}");
        }
        if let Some(cfg) = &self.config {
            m.push_str("[config]\n");
            let n_classes = cfg.n_classes.iter().map(|c| c.to_string()).collect::<Vec<_>>();
            let _ = write!(
                m,
                "d_model = {}\nn_layers = {}\nn_heads = {}\nd_ff = {}\nseq_len = {}\ninput_dim = {}\nn_classes = {}\n",
                cfg.d_model,
                cfg.n_layers,
                cfg.n_heads,
                cfg.d_ff,
                cfg.seq_len,
                cfg.input_dim,
                n_classes.join(",")
            );
        }
        if !self.sites.is_empty() {
            m.push_str("[sites]\n");
            for s in &self.sites {
                for n in &s.names {
                    check_token("site parameter", n)?;
                }
                let _ = writeln!(
                    m,
                    "layer={} kind={} depth={} hidden={} tasks={} names={}",
                    s.layer,
                    site_kind_name(s.kind),
                    s.depth,
                    s.hidden,
                    s.n_tasks,
                    s.names.join(",")
                );
            }
        }
        m.push_str("[tensors]\n");
        let mut offset = 0usize;
        for (name, t) in self.tensors.iter() {
            check_token("tensor name", name)?;
            let _ = writeln!(m, "{name} {} {offset}", shape_str(t.shape()));
            offset += 4 * t.numel();
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = self.manifest()?;
        let blob_len: usize = self.tensors.iter().map(|(_, t)| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(24 + manifest.len() + blob_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(blob_len as u64).to_le_bytes());
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(format_err("not a .wemc file (bad magic)"));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(format_err(format!(
                "file has version {version}, this build reads version {VERSION}"
            )));
        }
        let manifest_len = cur.u64()?;
        let manifest = std::str::from_utf8(cur.take(manifest_len)?).map_err(|_| format_err("manifest is not UTF-8"))?;
        let blob_len = cur.u64()?;
        let blob = &bytes[cur.pos..];
        if blob.len() as u64 != blob_len {
            return Err(Error::Integrity(format!(
                "header declares a {blob_len}-byte blob but {} bytes follow",
                blob.len()
            )));
        }
        parse_manifest(manifest, blob)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let end = usize::try_from(n)
            .ok()
            .and_then(|n| self.pos.checked_add(n))
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn key_values(line: &str) -> Result<BTreeMap<&str, &str>> {
    line.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| format_err(format!("expected key=value, got `{kv}`")))
        })
        .collect()
}

fn field<'a>(map: &BTreeMap<&str, &'a str>, key: &str) -> Result<&'a str> {
    map.get(key)
        .copied()
        .ok_or_else(|| format_err(format!("missing `{key}`")))
}

fn number(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| format_err(format!("`{what}` is not a count: `{s}`")))
}

fn parse_config(map: &BTreeMap<&str, &str>) -> Result<ModelConfig> {
    let n = |k: &str| field(map, k).and_then(|v| number(v, k));
    let n_classes = field(map, "n_classes")?
        .split(',')
        .map(|c| number(c, "n_classes"))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelConfig {
        d_model: n("d_model")?,
        n_layers: n("n_layers")?,
        n_heads: n("n_heads")?,
        d_ff: n("d_ff")?,
        seq_len: n("seq_len")?,
        input_dim: n("input_dim")?,
        n_classes,
    })
}

fn parse_manifest(manifest: &str, blob: &[u8]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    let mut section = "";
    let mut config = BTreeMap::new();
    let mut expected_offset = 0usize;
    for line in manifest.lines() {
        if line.starts_with('[') {
            section = match line {
                "[meta]" | "[config]" | "[sites]" | "[tensors]" => line,
                _ => return Err(format_err(format!("unknown manifest section {line}"))),
            };
            continue;
        }
        match section {
            "[meta]" | "[config]" => {
                let (k, v) = line
                    .split_once(" = ")
                    .ok_or_else(|| format_err(format!("bad manifest line `{line}`")))?;
                if section == "[meta]" {
                    ck.meta.insert(k.to_string(), v.to_string());
                } else {
                    config.insert(k, v);
                }
            }
            "[sites]" => {
                let kv = key_values(line)?;
                let num = |k: &str| field(&kv, k).and_then(|v| number(v, k));
                ck.sites.push(SiteEntry {
                    layer: num("layer")?,
                    kind: parse_site_kind(field(&kv, "kind")?)?,
                    depth: num("depth")?,
                    hidden: num("hidden")?,
                    n_tasks: num("tasks")?,
                    names: field(&kv, "names")?.split(',').map(String::from).collect(),
                });
            }
            "[tensors]" => {
                let parts: Vec<&str> = line.split(' ').collect();
                let [name, shape, offset] = parts[..] else {
                    return Err(format_err(format!("bad tensor line `{line}`")));
                };
                let shape = parse_shape(shape)?;
                let offset = number(offset, "offset")?;
                if offset != expected_offset {
                    return Err(Error::Integrity(format!(
                        "tensor `{name}` at offset {offset}, expected {expected_offset}"
                    )));
                }
                let numel: usize = shape.iter().product();
                let end = offset + 4 * numel;
                let bytes = blob
                    .get(offset..end)
                    .ok_or_else(|| Error::Integrity(format!("tensor `{name}` runs past the end of the blob")))?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                if ck.tensors.contains(name) {
                    return Err(Error::Integrity(format!("tensor `{name}` listed twice")));
                }
                ck.tensors.insert(name, Tensor::new(shape, data)?);
                expected_offset = end;
            }
            _ => return Err(format_err("manifest does not start with a section header")),
        }
    }
    if expected_offset != blob.len() {
        return Err(Error::Integrity(format!(
            "tensors cover {expected_offset} bytes of a {}-byte blob",
            blob.len()
        )));
    }
    if !config.is_empty() {
        ck.config = Some(parse_config(&config)?);
    }
    Ok(ck)
}

/// A plain parameter set with its model configuration.
pub fn save_params(
    path: impl AsRef<Path>,
    params: &NamedParamSet,
    cfg: &ModelConfig,
    meta: &[(&str, String)],
) -> Result<()> {
    let mut ck = Checkpoint::new(params.clone()).with_config(cfg);
    for (k, v) in meta {
        ck = ck.with_meta(k, v);
    }
    ck.save(path)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(NamedParamSet, Checkpoint)> {
    let mut ck = Checkpoint::load(path)?;
    let params = std::mem::take(&mut ck.tensors);
    Ok((params, ck))
}

impl Checkpoint {
    pub fn config(&self) -> Result<&ModelConfig> {
        self.config
            .as_ref()
            .ok_or_else(|| format_err("checkpoint carries no model configuration"))
    }

    pub fn from_upscaled(m: &UpscaledModel) -> Result<Self> {
        let mut tensors = NamedParamSet::new();
        for (name, t) in m.static_params.iter() {
            tensors.insert(format!("static.{name}"), t.clone());
        }
        let mut sites = Vec::with_capacity(m.sites.len());
        for (k, s) in m.sites.iter().enumerate() {
            for (name, t) in s.names.iter().zip(&s.theta0) {
                tensors.insert(format!("sites.{k}.theta0.{name}"), t.clone());
            }
            for (task, column) in s.dict.columns.iter().enumerate() {
                for (name, t) in s.names.iter().zip(column) {
                    tensors.insert(format!("sites.{k}.dict.{task}.{name}"), t.clone());
                }
            }
            for (name, t) in s.router.param_names().iter().zip(s.router.tensors()) {
                tensors.insert(format!("sites.{k}.router.{name}"), t.clone());
            }
            sites.push(SiteEntry {
                layer: s.layer,
                kind: s.kind,
                depth: s.router.depth(),
                hidden: s.router.hidden(),
                n_tasks: s.router.n_tasks(),
                names: s.names.clone(),
            });
        }
        Ok(Self {
            meta: BTreeMap::new(),
            config: Some(m.cfg.clone()),
            sites,
            tensors,
        }
        .with_meta("kind", "upscaled")
        .with_meta("scope", m.scope.as_str())
        .with_meta("lambda", m.lambda))
    }

    pub fn to_upscaled(&self) -> Result<UpscaledModel> {
        if self.meta.get("kind").map(String::as_str) != Some("upscaled") {
            return Err(format_err("checkpoint does not hold an upscaled model"));
        }
        let cfg = self.config()?.clone();
        let scope = Scope::parse(self.meta("scope")?)?;
        let lambda: f64 = self
            .meta("lambda")?
            .parse()
            .map_err(|_| format_err("`lambda` is not a number"))?;
        let take = |name: String| -> Result<Tensor> {
            self.tensors
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Integrity(format!("tensor `{name}` missing")))
        };
        let mut used = 0usize;
        let mut static_params = NamedParamSet::new();
        for (name, t) in self.tensors.iter() {
            if let Some(rest) = name.strip_prefix("static.") {
                static_params.insert(rest, t.clone());
                used += 1;
            }
        }
        let mut sites = Vec::with_capacity(self.sites.len());
        for (k, e) in self.sites.iter().enumerate() {
            let theta0 = e
                .names
                .iter()
                .map(|n| take(format!("sites.{k}.theta0.{n}")))
                .collect::<Result<Vec<_>>>()?;
            let columns = (0..e.n_tasks)
                .map(|task| {
                    e.names
                        .iter()
                        .map(|n| take(format!("sites.{k}.dict.{task}.{n}")))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let shell = Router::<f32>::new(e.depth, cfg.d_model, e.hidden, e.n_tasks)?;
            let router_tensors = shell
                .param_names()
                .iter()
                .map(|n| take(format!("sites.{k}.router.{n}")))
                .collect::<Result<Vec<_>>>()?;
            used += e.names.len() * (1 + e.n_tasks) + router_tensors.len();
            sites.push(WEMoESite {
                layer: e.layer,
                kind: e.kind,
                names: e.names.clone(),
                theta0,
                dict: TaskDictionary { columns },
                router: Router::from_tensors(e.depth, cfg.d_model, e.hidden, e.n_tasks, router_tensors)?,
            });
        }
        if used != self.tensors.len() {
            return Err(Error::Integrity(format!(
                "{} tensors do not belong to any part of the upscaled model",
                self.tensors.len() - used
            )));
        }
        let m = UpscaledModel {
            cfg,
            scope,
            lambda,
            static_params,
            sites,
        };
        m.check_partition()?;
        Ok(m)
    }

    /// Train and test splits per task; labels are stored as exact `f32` integers.
    pub fn from_datasets(train: &[Batch], test: &[Batch], cfg: &ModelConfig) -> Result<Self> {
        let mut tensors = NamedParamSet::new();
        for (split, sets) in [("train", train), ("test", test)] {
            for (i, b) in sets.iter().enumerate() {
                let labels = b
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Config("stored datasets must be labeled".into()))?;
                tensors.insert(format!("{split}.{i}.inputs"), b.inputs.clone());
                let l = labels.iter().map(|&c| c as f32).collect();
                tensors.insert(format!("{split}.{i}.labels"), Tensor::new([labels.len()], l)?);
            }
        }
        let ids = train.iter().map(|b| b.task_id.to_string()).collect::<Vec<_>>();
        Ok(Self::new(tensors)
            .with_config(cfg)
            .with_meta("kind", "dataset")
            .with_meta("task_ids", ids.join(",")))
    }

    pub fn to_datasets(&self) -> Result<(Vec<Batch>, Vec<Batch>)> {
        if self.meta.get("kind").map(String::as_str) != Some("dataset") {
            return Err(format_err("checkpoint does not hold datasets"));
        }
        let ids = self
            .meta("task_ids")?
            .split(',')
            .map(|s| number(s, "task_ids"))
            .collect::<Result<Vec<_>>>()?;
        let mut out = [Vec::new(), Vec::new()];
        for (slot, split) in out.iter_mut().zip(["train", "test"]) {
            for (i, &task) in ids.iter().enumerate() {
                let get = |what: &str| {
                    let name = format!("{split}.{i}.{what}");
                    self.tensors
                        .get(&name)
                        .ok_or_else(|| Error::Integrity(format!("tensor `{name}` missing")))
                };
                let labels = get("labels")?
                    .data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::Integrity(format!("label {v} is not a class index")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                slot.push(Batch::new(get("inputs")?.clone(), Some(labels), task)?);
            }
        }
        let [train, test] = out;
        Ok((train, test))
    }
}
