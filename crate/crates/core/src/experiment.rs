//! Experiment orchestration behind the `run` and `analyze` commands.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml              normalized configuration
//! metrics.csv              metric,order,seed,value
//! report.txt               per-metric mean and 95% interval over runs
//! bwt_series.csv           order,seed,task_index,bwt
//! order{o}_seed{s}/
//!     accuracy.csv         row,task_index,accuracy
//!     summary.txt
//!     trace.csv            position,task_id,step,gamma,loss,penalty
//!     masks/               one raw mask array per (task, layer)
//! ```
//!
//! An `INCOMPLETE` marker exists while the run is in progress and stays
//! behind if it fails.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::adapter::LayerId;
use crate::config::ExperimentConfig;
use crate::data::generate_task_stream;
use crate::error::{Error, Result};
use crate::harness::{run_stream, AccuracyMatrix, StreamOutcome, TaskLog};
use crate::metrics::{
    backward_transfer, backward_transfer_series, forward_transfer, mean_pairwise_jaccard, mean_prior_overlap,
    overall_accuracy, pooled_sparsity, sparsity, SupportMask,
};
use crate::store;

pub const INCOMPLETE: &str = "INCOMPLETE";
pub const METRICS: [&str; 5] = ["oa", "bwt", "fwt", "sparsity", "mean_pairwise_jaccard"];

/// Headline numbers of one (order, seed) run; `None` is not applicable.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub order: usize,
    pub seed: u64,
    pub oa: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    /// Zero fraction of every merged update, pooled over tasks and layers.
    pub sparsity: f64,
    /// Pairwise Jaccard over tasks, averaged over layers.
    pub mean_pairwise_jaccard: Option<f64>,
    pub trace_digest: String,
}

impl RunMetrics {
    fn value(&self, metric: &str) -> Option<f64> {
        match metric {
            "oa" => Some(self.oa),
            "bwt" => self.bwt,
            "fwt" => self.fwt,
            "sparsity" => Some(self.sparsity),
            "mean_pairwise_jaccard" => self.mean_pairwise_jaccard,
            _ => None,
        }
    }
}

fn not_applicable<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NotApplicable(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn layers_of(masks: &[SupportMask]) -> Vec<LayerId> {
    let mut layers: Vec<LayerId> = masks.iter().map(|m| m.layer).collect();
    layers.sort();
    layers.dedup();
    layers
}

/// Masks of one layer ordered by task.
fn layer_masks(masks: &[SupportMask], layer: LayerId) -> Vec<&SupportMask> {
    let mut v: Vec<&SupportMask> = masks.iter().filter(|m| m.layer == layer).collect();
    v.sort_by_key(|m| m.task);
    v
}

/// Mean over layers of the pairwise Jaccard across tasks.
pub fn model_pairwise_jaccard(masks: &[SupportMask]) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for layer in layers_of(masks) {
        if let Some(v) = mean_pairwise_jaccard(&layer_masks(masks, layer))? {
            vals.push(v);
        }
    }
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

pub fn run_metrics(order: usize, seed: u64, out: &StreamOutcome<f32>) -> Result<RunMetrics> {
    Ok(RunMetrics {
        order,
        seed,
        oa: overall_accuracy(&out.matrix)?,
        bwt: not_applicable(backward_transfer(&out.matrix))?,
        fwt: match forward_transfer(&out.matrix) {
            Ok(v) => Some(v),
            Err(Error::State(_)) => None,
            Err(e) => return Err(e),
        },
        sparsity: pooled_sparsity(out.masks.iter()),
        mean_pairwise_jaccard: model_pairwise_jaccard(&out.masks)?,
        trace_digest: out.trace_digest.clone(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn summary_text(m: &RunMetrics, matrix: &AccuracyMatrix, masks: &[SupportMask]) -> String {
    let mut s = String::new();
    writeln!(s, "order: {}", m.order).unwrap();
    writeln!(s, "seed: {}", m.seed).unwrap();
    writeln!(s, "tasks: {}", matrix.n_tasks()).unwrap();
    writeln!(s, "oa: {}", m.oa).unwrap();
    writeln!(s, "bwt: {}", fmt_opt(m.bwt)).unwrap();
    writeln!(s, "fwt: {}", fmt_opt(m.fwt)).unwrap();
    writeln!(s, "sparsity: {}", m.sparsity).unwrap();
    writeln!(s, "mean_pairwise_jaccard: {}", fmt_opt(m.mean_pairwise_jaccard)).unwrap();
    for t in 0..matrix.n_tasks() {
        let sp = pooled_sparsity(masks.iter().filter(|k| k.task == t));
        writeln!(s, "task{}_sparsity: {}", t + 1, sp).unwrap();
    }
    writeln!(s, "trace_sha256: {}", m.trace_digest).unwrap();
    s
}

/// Mean and half-width of a two-sided 95% Student-t interval.
pub fn mean_ci95(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, f64::NAN));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Some((mean, t * (var / n as f64).sqrt()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Step log of a stream; floats are written in shortest round-trip form.
pub fn trace_csv(logs: &[TaskLog]) -> String {
    let mut out = String::from("position,task_id,step,gamma,loss,penalty\n");
    for (pos, log) in logs.iter().enumerate() {
        for r in &log.steps {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                pos + 1,
                log.task_id,
                r.step,
                r.gamma,
                r.loss,
                r.penalty
            )
            .unwrap();
        }
    }
    out
}

fn run_dir_name(order: usize, seed: u64) -> String {
    format!("order{order}_seed{seed}")
}

/// Output of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub runs: Vec<RunMetrics>,
}

/// Runs every (order, seed) pair of `cfg` and writes the artifacts under
/// `dir`. `jobs` bounds the number of runs in flight.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(INCOMPLETE);
    write(&marker, "run in progress\n")?;
    match run_inner(cfg, dir, jobs) {
        Ok(runs) => {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            Ok(ExperimentOutcome {
                dir: dir.to_path_buf(),
                runs,
            })
        }
        Err(e) => {
            // Best effort: the marker already flags the directory.
            let _ = write(&marker, &format!("run failed: {e}\n"));
            Err(e)
        }
    }
}

fn run_inner(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<Vec<RunMetrics>> {
    write(&dir.join("config.toml"), &cfg.to_toml_string())?;
    let stream = generate_task_stream(&cfg.stream_spec())?;
    let orders = cfg.task_orders();
    let pairs: Vec<(usize, Vec<usize>, u64)> = orders
        .iter()
        .enumerate()
        .flat_map(|(i, o)| cfg.seeds.iter().map(move |&s| (i + 1, o.clone(), s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(RunMetrics, Vec<f64>)>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|(oi, order, seed)| {
                log::info!("starting order {oi} seed {seed}");
                let out = run_stream(&stream, order, cfg, *seed)?;
                let m = run_metrics(*oi, *seed, &out)?;
                let rd = dir.join(run_dir_name(*oi, *seed));
                fs::create_dir_all(&rd).map_err(|e| Error::io(&rd, e))?;
                write(&rd.join("accuracy.csv"), &out.matrix.to_csv())?;
                write(&rd.join("summary.txt"), &summary_text(&m, &out.matrix, &out.masks))?;
                write(&rd.join("trace.csv"), &trace_csv(&out.logs))?;
                store::save_masks(&rd.join("masks"), &out.masks)?;
                Ok((m, backward_transfer_series(&out.matrix)?))
            })
            .collect()
    });
    let results: Vec<(RunMetrics, Vec<f64>)> = results.into_iter().collect::<Result<_>>()?;

    let mut metrics_csv = String::from("metric,order,seed,value\n");
    let mut series_csv = String::from("order,seed,task_index,bwt\n");
    for (m, series) in &results {
        for name in METRICS {
            writeln!(metrics_csv, "{name},{},{},{}", m.order, m.seed, fmt_opt(m.value(name))).unwrap();
        }
        for (i, v) in series.iter().enumerate() {
            writeln!(series_csv, "{},{},{},{v}", m.order, m.seed, i + 1).unwrap();
        }
    }
    write(&dir.join("metrics.csv"), &metrics_csv)?;
    write(&dir.join("bwt_series.csv"), &series_csv)?;

    let runs: Vec<RunMetrics> = results.into_iter().map(|(m, _)| m).collect();
    let mut report = String::new();
    writeln!(report, "method: {}", cfg.method).unwrap();
    writeln!(report, "runs: {}", runs.len()).unwrap();
    for name in METRICS {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.value(name)).collect();
        match mean_ci95(&vals) {
            Some((mean, hw)) if hw.is_nan() => writeln!(report, "{name}: {mean} (n=1, no interval)").unwrap(),
            Some((mean, hw)) => writeln!(report, "{name}: {mean} ± {hw} (n={})", vals.len()).unwrap(),
            None => writeln!(report, "{name}: NA").unwrap(),
        }
    }
    write(&dir.join("report.txt"), &report)?;
    Ok(runs)
}

/// Which adapted layers an analysis covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSelector {
    One(LayerId),
    /// Both projections of block `⌊n_blocks/2⌋`.
    Middle,
    All,
}

impl std::str::FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "middle" => Ok(LayerSelector::Middle),
            "all" => Ok(LayerSelector::All),
            other => other
                .parse()
                .map(LayerSelector::One)
                .map_err(|_| Error::Config(format!("layer selector {other:?} is not middle, all or blockN.q|v"))),
        }
    }
}

impl std::fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSelector::One(l) => write!(f, "{l}"),
            LayerSelector::Middle => f.write_str("middle"),
            LayerSelector::All => f.write_str("all"),
        }
    }
}

/// `task,layer,sparsity,mean_prior_jaccard` rows for the selected
/// layers. With more than one layer selected, `model` rows pool sparsity
/// and average the overlap across them.
pub fn analyze_masks(masks: &[SupportMask], selector: LayerSelector) -> Result<String> {
    let layers = layers_of(masks);
    if layers.is_empty() {
        return Err(Error::State("no masks to analyze".into()));
    }
    let selected: Vec<LayerId> = match selector {
        LayerSelector::One(l) => {
            if !layers.contains(&l) {
                return Err(Error::State(format!("no masks recorded for layer {l}")));
            }
            vec![l]
        }
        LayerSelector::All => layers.clone(),
        LayerSelector::Middle => {
            let n_blocks = layers.iter().map(|l| l.block).max().expect("nonempty") + 1;
            layers.iter().copied().filter(|l| l.block == n_blocks / 2).collect()
        }
    };
    let n_tasks = masks.iter().map(|m| m.task).max().expect("nonempty") + 1;
    let mut out = String::from("task,layer,sparsity,mean_prior_jaccard\n");
    let per_layer: Vec<Vec<&SupportMask>> = selected.iter().map(|&l| layer_masks(masks, l)).collect();
    for ms in &per_layer {
        if ms.len() != n_tasks || ms.iter().enumerate().any(|(i, m)| m.task != i) {
            return Err(Error::State(format!("layer {} is missing task masks", ms[0].layer)));
        }
    }
    for t in 0..n_tasks {
        let mut overlaps = Vec::new();
        for (layer, ms) in selected.iter().zip(&per_layer) {
            let ov = not_applicable(mean_prior_overlap(ms, t + 1))?;
            if let Some(v) = ov {
                overlaps.push(v);
            }
            writeln!(out, "{},{layer},{},{}", t + 1, sparsity(ms[t]), fmt_opt(ov)).unwrap();
        }
        if selected.len() > 1 {
            let sp = pooled_sparsity(per_layer.iter().map(|ms| ms[t]));
            let ov = (!overlaps.is_empty()).then(|| overlaps.iter().sum::<f64>() / overlaps.len() as f64);
            writeln!(out, "{},model,{sp},{}", t + 1, fmt_opt(ov)).unwrap();
        }
    }
    Ok(out)
}

/// Writes `analysis_{selector}.csv` into every run directory under `dir`
/// and returns the paths written.
pub fn analyze_experiment(dir: &Path, selector: LayerSelector) -> Result<Vec<PathBuf>> {
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("masks").is_dir())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::State(format!(
            "no run directories with masks under {}",
            dir.display()
        )));
    }
    let mut written = Vec::new();
    for rd in runs {
        let masks = store::load_masks(&rd.join("masks"))?;
        let csv = analyze_masks(&masks, selector)?;
        let path = rd.join(format!("analysis_{selector}.csv"));
        write(&path, &csv)?;
        written.push(path);
    }
    Ok(written)
}
