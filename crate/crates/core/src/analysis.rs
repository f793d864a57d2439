//! PCA, cluster statistics and the plot-ready CSV products built from
//! evaluation results, regression traces and rollout captures.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::{ErTrace, Rollout, SuiteResult};
use crate::sim::{PositionMode, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal axes of length `d`, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// `n x k` coordinates of the fitted data.
    pub projected: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(x).zip(&self.mean).map(|((a, b), m)| a * (b - m)).sum()).collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter().zip(coords) {
            for (o, a) in out.iter_mut().zip(c) {
                *o += w * a;
            }
        }
        out
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        self.explained_variance.iter().map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 }).collect()
    }
}

/// Principal components of the rows of `data` via the covariance eigendecomposition.
pub fn pca(data: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = data.len();
    let d = data.first().map_or(0, Vec::len);
    if k == 0 || n < 2 || k > (n - 1).min(d) {
        return Err(Error::Config(format!("pca needs 1 <= k <= min(n-1, d); got k={k}, n={n}, d={d}")));
    }
    if data.iter().any(|r| r.len() != d) {
        return Err(Error::shape("pca", "ragged rows"));
    }
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(k);
    for &i in &order[..k] {
        let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let pivot = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
    }
    let explained_variance = order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total_variance = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut out = Pca { mean, components, projected: Vec::new(), explained_variance, total_variance };
    out.projected = data.iter().map(|r| out.transform(r)).collect();
    Ok(out)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean pairwise distance within labels and between labels.
pub fn cluster_distances(points: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = distance(&points[i], &points[j]);
            if labels[i] == labels[j] {
                within += d;
                nw += 1;
            } else {
                between += d;
                nb += 1;
            }
        }
    }
    (within / nw.max(1) as f64, between / nb.max(1) as f64)
}

/// Mean silhouette coefficient; points alone in their cluster score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Config("silhouette needs one label per point".into()));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::Config("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    for i in 0..points.len() {
        let mean_to = |c: usize| {
            let (s, n) = (0..points.len())
                .filter(|&j| j != i && labels[j] == c)
                .fold((0.0, 0usize), |(s, n), j| (s + distance(&points[i], &points[j]), n + 1));
            (n > 0).then(|| s / n as f64)
        };
        let Some(a) = mean_to(labels[i]) else { continue };
        let b = clusters.iter().filter(|&&c| c != labels[i]).filter_map(|&c| mean_to(c)).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

/// Labels for the attention rows and columns: the joint token, then the six points.
pub const TOKEN_LABELS: [&str; 7] = ["ja", "pt1", "pt2", "pt3", "pt4", "pt5", "pt6"];

const SUCCESS_HEADER: &str = "task,case,language,er,successes,trials,rate";

fn case(p: PositionMode) -> u8 {
    match p {
        PositionMode::Training => 1,
        PositionMode::Test => 2,
    }
}

/// Success counts by task, position case, language mode and ER, one row per cell.
pub fn success_csv(results: &[SuiteResult]) -> String {
    let mut out = format!("{SUCCESS_HEADER}\n");
    let mut rows = Vec::new();
    for r in results {
        for task in Task::ALL {
            let (s, n) = r.successes(task);
            if n > 0 {
                let lang = serde_json::to_value(r.language).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                rows.push((task.index(), case(r.position), lang, r.with_er, s, n));
            }
        }
    }
    rows.sort_by(|a, b| (a.0, a.1, &a.2, a.3).cmp(&(b.0, b.1, &b.2, b.3)));
    for (t, c, lang, er, s, n) in rows {
        let _ = writeln!(out, "{},{c},{lang},{},{s},{n},{:.4}", Task::ALL[t].name(), if er { "with" } else { "without" }, s as f64 / n as f64);
    }
    out
}

/// One row per ER iteration: loss terms and the SLV the loss was evaluated at.
pub fn slv_trace_csv(traces: &[(String, ErTrace)]) -> String {
    let dim = traces.iter().flat_map(|(_, t)| &t.records).map(|r| r.slv.len()).max().unwrap_or(0);
    let mut out = String::from("run,instruction,iteration,loss,point,language");
    for i in 0..dim {
        let _ = write!(out, ",slv{i}");
    }
    out.push('\n');
    for (run, t) in traces {
        let final_row = (t.records.len(), t.final_loss, f64::NAN, f64::NAN, &t.final_slv);
        let rows = t.records.iter().map(|r| (r.iteration, r.loss, r.point, r.language, &r.slv)).chain(std::iter::once(final_row));
        for (it, loss, point, lang, slv) in rows {
            let _ = write!(out, "{run},\"{}\",{it},{loss},{point},{lang}", t.instruction.replace('"', "'"));
            for v in slv {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Top-layer LSTM states per step per rollout, plus their first `k` principal coordinates.
pub fn lstm_csv(rollouts: &[(String, Rollout)], k: usize) -> Result<(String, Option<Pca>)> {
    let rows: Vec<(&str, Task, usize, Vec<f64>)> = rollouts
        .iter()
        .flat_map(|(run, r)| r.captures.iter().enumerate().map(move |(t, c)| (run.as_str(), r.task, t, c.hidden.iter().map(|&v| v as f64).collect())))
        .collect();
    let data: Vec<Vec<f64>> = rows.iter().map(|r| r.3.clone()).collect();
    let d = data.first().map_or(0, Vec::len);
    let k = k.min(d).min(data.len().saturating_sub(1));
    let fit = if k > 0 { Some(pca(&data, k)?) } else { None };
    let mut out = String::from("run,task,step");
    for i in 0..k {
        let _ = write!(out, ",pc{}", i + 1);
    }
    for i in 0..d {
        let _ = write!(out, ",h{i}");
    }
    out.push('\n');
    for (n, (run, task, t, h)) in rows.iter().enumerate() {
        let _ = write!(out, "{run},{},{t}", task.name());
        if let Some(p) = &fit {
            for v in &p.projected[n] {
                let _ = write!(out, ",{v}");
            }
        }
        for v in h {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok((out, fit))
}

/// Attention per layer and step: the head average, and each head, as labelled 7x7 cells.
pub fn attention_csv(rollouts: &[(String, Rollout)]) -> String {
    let mut out = String::from("run,task,step,layer,head,row,col,weight\n");
    for (run, r) in rollouts {
        for (t, c) in r.captures.iter().enumerate() {
            for (l, a) in c.attention.iter().enumerate() {
                let heads = a.len() / 49;
                for row in 0..7 {
                    for col in 0..7 {
                        let mean = (0..heads).map(|h| a[h * 49 + row * 7 + col]).sum::<f32>() / heads.max(1) as f32;
                        let _ = writeln!(out, "{run},{},{t},{},mean,{},{},{mean}", r.task.name(), l + 1, TOKEN_LABELS[row], TOKEN_LABELS[col]);
                        for h in 0..heads {
                            let _ = writeln!(out, "{run},{},{t},{},{h},{},{},{}", r.task.name(), l + 1, TOKEN_LABELS[row], TOKEN_LABELS[col], a[h * 49 + row * 7 + col]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Regressed SLVs labelled by task, with cluster statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlvClusters {
    pub within: f64,
    pub between: f64,
    pub silhouette: Option<f64>,
    pub pca: Option<Pca>,
}

pub fn slv_clusters(slvs: &[(Task, Vec<f32>)]) -> Result<SlvClusters> {
    let points: Vec<Vec<f64>> = slvs.iter().map(|(_, s)| s.iter().map(|&v| v as f64).collect()).collect();
    let labels: Vec<usize> = slvs.iter().map(|(t, _)| t.index()).collect();
    let (within, between) = cluster_distances(&points, &labels);
    let silhouette = silhouette(&points, &labels).ok();
    let d = points.first().map_or(0, Vec::len);
    let k = 3.min(d).min(points.len().saturating_sub(1));
    let pca = if k > 0 { Some(pca(&points, k)?) } else { None };
    Ok(SlvClusters { within, between, silhouette, pca })
}

/// Everything `report` can draw on; absent streams are listed as gaps.
#[derive(Default)]
pub struct ReportInputs {
    pub suites: Vec<SuiteResult>,
    pub traces: Vec<(String, ErTrace)>,
    pub rollouts: Vec<(String, Rollout)>,
}

/// Writes the CSV/JSON products into `dir` and returns the names of missing inputs.
pub fn report(dir: &Path, inputs: &ReportInputs) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut gaps = Vec::new();
    fs::write(dir.join("success.csv"), success_csv(&inputs.suites))?;
    if inputs.suites.is_empty() {
        gaps.push("evaluation results".to_string());
    }
    fs::write(dir.join("slv_traces.csv"), slv_trace_csv(&inputs.traces))?;
    if inputs.traces.is_empty() {
        gaps.push("regression traces".to_string());
    } else {
        let slvs: Vec<(Task, Vec<f32>)> = inputs
            .traces
            .iter()
            .filter_map(|(_, t)| crate::sim::InstructionBank::new().parse(&t.instruction).map(|(task, _, _)| (task, t.final_slv.clone())))
            .collect();
        if slvs.len() >= 2 {
            fs::write(dir.join("slv_clusters.json"), serde_json::to_string_pretty(&slv_clusters(&slvs)?)?)?;
        }
    }
    let captured: Vec<(String, Rollout)> = inputs.rollouts.iter().filter(|(_, r)| !r.captures.is_empty()).cloned().collect();
    if captured.is_empty() {
        gaps.push("rollout captures".to_string());
    }
    let (lstm, fit) = lstm_csv(&captured, 3)?;
    fs::write(dir.join("lstm_states.csv"), lstm)?;
    if let Some(p) = fit {
        fs::write(dir.join("lstm_pca.json"), serde_json::to_string_pretty(&p)?)?;
    }
    fs::write(dir.join("attention.csv"), attention_csv(&captured))?;
    fs::write(dir.join("gaps.json"), serde_json::to_string_pretty(&gaps)?)?;
    Ok(gaps)
}
