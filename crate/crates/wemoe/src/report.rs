//! CSV reports. Headers are fixed; readers should look columns up by name.
//!
//! | file | columns |
//! |------|---------|
//! | `eval.csv` | `method, task_0 … task_{T-1}, average` |
//! | `similarity.csv` | `task, group, layer, l2, cosine, degenerate` |
//! | `routing.csv` | `site, source_task, expert, mean_weight` |
//! | `first_choice.csv` | `site, source_task, fraction` |
//! | `landscape.csv` | `lambda_1, lambda_2, loss_a, loss_b, joint` |
//! | `counts.csv` | `label, depth, n_tasks, n_sites, trainable, dictionary, total` |
//! | `adapt_trace.csv` | `step, task, entropy, site_0 … site_{K-1}` |

use std::path::Path;

use wemoe_core::analysis::{CountRow, LandscapeGrid, RoutingObservations, SimilarityRow};
use wemoe_core::tta::AdaptTrace;

use crate::error::{Error, Result};

pub const EVAL: &str = "eval.csv";
pub const SIMILARITY: &str = "similarity.csv";
pub const ROUTING: &str = "routing.csv";
pub const FIRST_CHOICE: &str = "first_choice.csv";
pub const LANDSCAPE: &str = "landscape.csv";
pub const COUNTS: &str = "counts.csv";
pub const ADAPT_TRACE: &str = "adapt_trace.csv";

fn write_rows(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let wrap = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(&header).map_err(wrap)?;
    for r in rows {
        w.write_record(&r).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain decimal with enough digits to round-trip.
fn num(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub accuracy: Vec<f64>,
}

impl EvalRow {
    pub fn average(&self) -> f64 {
        crate::pipeline::mean(&self.accuracy)
    }
}

pub fn write_eval(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let n_tasks = rows.first().map_or(0, |r| r.accuracy.len());
    let mut header = vec!["method".to_string()];
    header.extend((0..n_tasks).map(|t| format!("task_{t}")));
    header.push("average".into());
    let body = rows
        .iter()
        .map(|r| {
            let mut rec = vec![r.method.clone()];
            rec.extend(r.accuracy.iter().map(|&a| num(a)));
            rec.push(num(r.average()));
            rec
        })
        .collect();
    write_rows(path, header, body)
}

/// `per_task[t]` holds the rows comparing fine-tuned model `t` with `θ₀`.
pub fn write_similarity(path: &Path, per_task: &[Vec<SimilarityRow>]) -> Result<()> {
    let header = ["task", "group", "layer", "l2", "cosine", "degenerate"];
    let mut body = Vec::new();
    for (t, rows) in per_task.iter().enumerate() {
        for r in rows {
            body.push(vec![
                t.to_string(),
                r.group.as_str().to_string(),
                r.layer.map_or_else(String::new, |l| l.to_string()),
                num(r.l2),
                num(r.cosine),
                r.degenerate.to_string(),
            ]);
        }
    }
    write_rows(path, header.map(String::from).to_vec(), body)
}

/// `stats[site][source_task][expert]` from `routing_stats`.
pub fn write_routing(path: &Path, obs: &RoutingObservations, stats: &[Vec<Vec<f64>>]) -> Result<()> {
    let header = ["site", "source_task", "expert", "mean_weight"];
    let mut body = Vec::new();
    for (site, per_task) in obs.site_ids.iter().zip(stats) {
        for (t, w) in per_task.iter().enumerate() {
            for (e, v) in w.iter().enumerate() {
                body.push(vec![site.clone(), t.to_string(), e.to_string(), num(*v)]);
            }
        }
    }
    write_rows(path, header.map(String::from).to_vec(), body)
}

/// `matrix[source_task][site]` from `first_choice_matrix`.
pub fn write_first_choice(path: &Path, obs: &RoutingObservations, matrix: &[Vec<f64>]) -> Result<()> {
    let header = ["site", "source_task", "fraction"];
    let mut body = Vec::new();
    for (k, site) in obs.site_ids.iter().enumerate() {
        for (t, row) in matrix.iter().enumerate() {
            body.push(vec![site.clone(), t.to_string(), num(row[k])]);
        }
    }
    write_rows(path, header.map(String::from).to_vec(), body)
}

pub fn write_landscape(path: &Path, grid: &LandscapeGrid) -> Result<()> {
    let header = ["lambda_1", "lambda_2", "loss_a", "loss_b", "joint"];
    let mut body = Vec::new();
    for (i, &a) in grid.axis.iter().enumerate() {
        for (j, &b) in grid.axis.iter().enumerate() {
            body.push(vec![
                num(a),
                num(b),
                num(grid.loss_a[i][j]),
                num(grid.loss_b[i][j]),
                num(grid.joint[i][j]),
            ]);
        }
    }
    write_rows(path, header.map(String::from).to_vec(), body)
}

pub fn write_counts(path: &Path, rows: &[CountRow]) -> Result<()> {
    let header = [
        "label",
        "depth",
        "n_tasks",
        "n_sites",
        "trainable",
        "dictionary",
        "total",
    ];
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.depth.to_string(),
                r.n_tasks.to_string(),
                r.n_sites.to_string(),
                r.trainable.to_string(),
                r.dictionary.to_string(),
                r.total.map_or_else(String::new, |t| t.to_string()),
            ]
        })
        .collect();
    write_rows(path, header.map(String::from).to_vec(), body)
}

pub fn write_trace(path: &Path, trace: &AdaptTrace) -> Result<()> {
    let n_sites = trace.records.first().map_or(0, |r| r.site_mean_weight.len());
    let mut header = vec!["step".to_string(), "task".into(), "entropy".into()];
    header.extend((0..n_sites).map(|k| format!("site_{k}")));
    let body = trace
        .records
        .iter()
        .map(|r| {
            let mut rec = vec![r.step.to_string(), r.task_id.to_string(), num(r.entropy_loss)];
            rec.extend(r.site_mean_weight.iter().map(|&w| num(w)));
            rec
        })
        .collect();
    write_rows(path, header, body)
}

/// Reads a report back as header plus records, for tests and downstream tools.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let wrap = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(wrap)?;
    let header = r.headers().map_err(wrap)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(wrap))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}
