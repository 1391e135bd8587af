//! Continual-learning driver: adapter injection, the per-task step loop
//! with the threshold lifecycle, merging, past-update bookkeeping and the
//! accuracy matrix.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::adapter::{
    final_sparse_update, init_adapter, interpolate_update, jump_update, merge, support_mask, Adapter, Gates, LayerId,
};
use crate::autodiff::{Tape, Var};
use crate::config::ExperimentConfig;
use crate::data::{Task, TaskStream};
use crate::ella::{ella_penalty, penalized_update, EllaState, UpdateVars};
use crate::error::{Error, Result};
use crate::metrics::SupportMask;
use crate::model::{build_model, Batch, TinyTransformer, WeightHook};
use crate::optim::AdamW;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::schedule::Schedule;
use crate::tensor::{Scalar, Tensor};

const EVAL_BATCH: usize = 256;

/// Accuracy grid with `n + 1` rows: row 0 holds isolated-training
/// accuracies and row `i` the accuracies after task `i` on tasks `1..=i`.
/// Columns are zero-based task positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    n_tasks: usize,
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(n_tasks: usize) -> Self {
        AccuracyMatrix {
            n_tasks,
            rows: vec![vec![None; n_tasks]; n_tasks + 1],
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    fn check(&self, row: usize, col: usize) -> Result<()> {
        let valid = col < self.n_tasks && row <= self.n_tasks && (row == 0 || col < row);
        if valid {
            Ok(())
        } else {
            Err(Error::Range(format!(
                "cell ({row}, {col}) is outside the lower-triangular grid for {} tasks",
                self.n_tasks
            )))
        }
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        self.check(row, col)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Range(format!("accuracy {value} outside [0, 1]")));
        }
        self.rows[row][col] = Some(value);
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.rows.get(row)?.get(col).copied().flatten()
    }

    /// Like `get`, but a missing entry is a state error.
    pub fn require(&self, row: usize, col: usize) -> Result<f64> {
        self.check(row, col)?;
        self.get(row, col)
            .ok_or_else(|| Error::State(format!("accuracy ({row}, {col}) was never recorded")))
    }

    /// `row,task_index,accuracy` with one-based task indices; absent
    /// cells are omitted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,task_index,accuracy\n");
        for (r, row) in self.rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    writeln!(out, "{r},{},{v}", c + 1).expect("string write");
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str, n_tasks: usize) -> Result<Self> {
        let fmt_err = |m: String| Error::Format {
            what: "accuracy csv".into(),
            message: m,
        };
        let mut lines = text.lines();
        if lines.next() != Some("row,task_index,accuracy") {
            return Err(fmt_err("missing header".into()));
        }
        let mut m = AccuracyMatrix::new(n_tasks);
        for line in lines.filter(|l| !l.is_empty()) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(fmt_err(format!("bad line {line:?}")));
            }
            let r: usize = parts[0].parse().map_err(|_| fmt_err(format!("bad row in {line:?}")))?;
            let t: usize = parts[1].parse().map_err(|_| fmt_err(format!("bad task in {line:?}")))?;
            let v: f64 = parts[2]
                .parse()
                .map_err(|_| fmt_err(format!("bad value in {line:?}")))?;
            if t == 0 {
                return Err(fmt_err("task indices are one-based".into()));
            }
            m.set(r, t - 1, v)?;
        }
        Ok(m)
    }
}

/// Per-step record of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub gamma: f64,
    pub loss: f64,
    pub penalty: f64,
    pub taus: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskLog {
    pub task_id: usize,
    pub schedule: Schedule,
    pub steps: Vec<StepRecord>,
    /// Step at which thresholds were initialized; `None` for dense methods.
    pub threshold_init_step: Option<usize>,
    /// Task ids of every example drawn for training.
    pub data_task_ids: BTreeSet<usize>,
}

/// Settings of one task's training derived from the experiment config.
#[derive(Clone, Debug)]
struct Plan {
    gated: bool,
    thresholds: bool,
    lambda: f64,
}

impl Plan {
    fn new(cfg: &ExperimentConfig, lambda: f64) -> Self {
        Plan {
            gated: cfg.method.gated() && cfg.gating,
            thresholds: cfg.method.gated(),
            lambda: if cfg.method.uses_ella() { lambda } else { 0.0 },
        }
    }
}

/// Substitutes `W + β·ΔW_interp` for every adapted projection and keeps
/// the tape handles needed for the penalty and the optimizer.
pub struct AdapterHook<'a, T> {
    adapters: &'a [Adapter<T>],
    gamma: T,
    /// One bound threshold per gate unit; empty when the update is dense.
    taus: Vec<Var>,
    gates: Option<&'a Gates<T>>,
    factors: Vec<Option<(Var, Var)>>,
    updates: Vec<Option<UpdateVars>>,
    trainable: bool,
}

impl<'a, T: Scalar> AdapterHook<'a, T> {
    /// `gates` must be initialized when given; `None` applies the dense
    /// update. `trainable` places `A`, `B` and `τ` on the tape as parameters.
    pub fn new(
        tape: &mut Tape<T>,
        adapters: &'a [Adapter<T>],
        gates: Option<&'a Gates<T>>,
        gamma: T,
        trainable: bool,
    ) -> Result<Self> {
        if !(gamma >= T::zero() && gamma <= T::one()) {
            return Err(Error::Range(format!("interpolation factor {gamma} outside [0, 1]")));
        }
        let mut taus = Vec::new();
        if let Some(g) = gates {
            for unit in &g.units {
                taus.push(unit.bind(tape, trainable)?.tau);
            }
        }
        Ok(AdapterHook {
            adapters,
            gamma,
            taus,
            gates,
            factors: vec![None; adapters.len()],
            updates: vec![None; adapters.len()],
            trainable,
        })
    }

    /// `(A, B)` handles per adapter, in adapter order.
    pub fn factors(&self) -> &[Option<(Var, Var)>] {
        &self.factors
    }

    pub fn updates(&self) -> &[Option<UpdateVars>] {
        &self.updates
    }

    pub fn tau_vars(&self) -> &[Var] {
        &self.taus
    }
}

impl<T: Scalar> WeightHook<T> for AdapterHook<'_, T> {
    fn effective_weight(&mut self, tape: &mut Tape<T>, layer: LayerId, base: Var) -> Result<Var> {
        let Some(idx) = self.adapters.iter().position(|a| a.layer == layer) else {
            return Ok(base);
        };
        let ad = &self.adapters[idx];
        let (a, b) = if self.trainable {
            (tape.param(ad.a.clone()), tape.param(ad.b.clone()))
        } else {
            (tape.constant(ad.a.clone()), tape.constant(ad.b.clone()))
        };
        let dense = tape.matmul(a, b)?;
        let jump = match self.gates {
            Some(g) => {
                let gate = g.gate_for(layer);
                let bound = crate::adapter::BoundGate {
                    tau: self.taus[g.unit_of(layer)],
                    epsilon: gate.epsilon,
                };
                Some(jump_update(tape, dense, bound)?)
            }
            None => None,
        };
        // γ = 0 leaves the dense update exactly.
        let interp = match jump {
            Some(j) if self.gamma > T::zero() => interpolate_update(tape, dense, j, self.gamma)?,
            _ => dense,
        };
        self.factors[idx] = Some((a, b));
        self.updates[idx] = Some(UpdateVars { dense, jump, interp });
        let scaled = tape.scale(interp, ad.beta);
        tape.add(base, scaled)
    }
}

/// Fresh adapters on every adapted projection of `model` for `task_id`.
pub fn inject_adapters<T: Scalar>(
    model: &TinyTransformer<T>,
    cfg: &ExperimentConfig,
    seed: u64,
    task_id: usize,
) -> Result<Vec<Adapter<T>>> {
    model
        .config
        .adapted_layers()
        .into_iter()
        .enumerate()
        .map(|(i, layer)| {
            let w = model.projection(layer)?;
            let (d_in, d_out) = w.dims2()?;
            let s = derive_seed(seed, Stream::AdapterInit, (task_id as u64) * 1000 + i as u64);
            init_adapter(layer, d_in, d_out, cfg.rank, T::of(cfg.alpha), s)
        })
        .collect()
}

pub fn fresh_gates<T: Scalar>(model: &TinyTransformer<T>, cfg: &ExperimentConfig) -> Result<Gates<T>> {
    Gates::new(
        cfg.gate_scope(),
        model.config.n_blocks,
        T::of(cfg.epsilon),
        T::of(cfg.tau_floor),
    )
}

fn batch_of(examples: &[&crate::data::Example]) -> Result<(Batch, Vec<usize>)> {
    let batch = Batch::from_sequences(examples.iter().map(|e| e.tokens.as_slice()))?;
    Ok((batch, examples.iter().map(|e| e.label).collect()))
}

/// One epoch over `task.train` with the full threshold lifecycle.
/// `adapters` and `gates` are updated in place.
#[allow(clippy::too_many_arguments)]
pub fn train_task<T: Scalar>(
    model: &TinyTransformer<T>,
    adapters: &mut [Adapter<T>],
    gates: &mut Gates<T>,
    task: &Task,
    cfg: &ExperimentConfig,
    lambda: f64,
    ella: Option<&EllaState<T>>,
    seed: u64,
) -> Result<TaskLog> {
    if task.train.is_empty() {
        return Err(Error::Config(format!("task {} has no training data", task.id)));
    }
    let plan = Plan::new(cfg, lambda);
    let total = task.train.len().div_ceil(cfg.batch_size);
    let schedule = Schedule::from_fractions(total, cfg.start_frac, cfg.end_frac)?;

    let mut order: Vec<usize> = (0..task.train.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, task.id as u64));

    let mut slots: Vec<(usize, bool)> = Vec::new();
    for ad in adapters.iter() {
        slots.push((ad.a.numel(), true));
        slots.push((ad.b.numel(), true));
    }
    slots.extend(gates.units.iter().map(|_| (1, false)));
    let mut opt = AdamW::<T>::new(cfg.optimizer(), &slots);

    let past: Vec<Option<Tensor<T>>> = match (ella, plan.lambda > 0.0) {
        (Some(st), true) => adapters
            .iter()
            .map(|a| st.past(a.layer).map(|p| Some(p.clone())))
            .collect::<Result<_>>()?,
        _ => vec![None; adapters.len()],
    };

    let mut log = TaskLog {
        task_id: task.id,
        schedule,
        steps: Vec::with_capacity(total),
        threshold_init_step: None,
        data_task_ids: BTreeSet::new(),
    };

    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        if plan.thresholds && step == schedule.start && !gates.all_initialized() {
            gates.initialize(adapters)?;
            log.threshold_init_step = Some(step);
        }
        let gamma = if plan.gated { schedule.gamma(step) } else { 0.0 };
        let examples: Vec<&crate::data::Example> = chunk.iter().map(|&i| &task.train[i]).collect();
        log.data_task_ids.extend(examples.iter().map(|e| e.task_id));
        let (batch, labels) = batch_of(&examples)?;

        let mut tape = Tape::new();
        let active_gates = (plan.gated && gates.all_initialized()).then_some(&*gates);
        let mut hook = AdapterHook::new(&mut tape, adapters, active_gates, T::of(gamma), true)?;
        let logits = model.forward(&mut tape, &batch, &mut hook)?;
        let ce = tape.cross_entropy(logits, &labels)?;
        let mut loss = ce;
        let mut penalty_total = 0.0;
        let variant = cfg.ella_variant();
        for (i, upd) in hook.updates().iter().enumerate() {
            let (Some(upd), Some(p)) = (upd, &past[i]) else {
                continue;
            };
            let u = penalized_update(*upd, step, schedule.start, variant);
            let pv = tape.constant(p.clone());
            let pen = ella_penalty(&mut tape, u, pv, T::of(plan.lambda))?;
            penalty_total += tape.value(pen).item().to_f64_lossy();
            loss = tape.add(loss, pen)?;
        }
        tape.backward(loss)?;

        let grads: Vec<Option<Tensor<T>>> = hook
            .factors()
            .iter()
            .flat_map(|f| match f {
                Some((a, b)) => [tape.grad(*a), tape.grad(*b)],
                None => [None, None],
            })
            .chain((0..gates.units.len()).map(|u| hook.tau_vars().get(u).and_then(|&t| tape.grad(t))))
            .collect();
        let record = StepRecord {
            step,
            gamma,
            loss: tape.value(ce).item().to_f64_lossy(),
            penalty: penalty_total,
            taus: gates.taus().iter().map(|t| t.to_f64_lossy()).collect(),
        };
        drop(hook);

        let mut tau_vals: Vec<T> = gates.units.iter().map(|g| g.tau).collect();
        {
            let mut params: Vec<&mut [T]> = Vec::with_capacity(slots.len());
            for ad in adapters.iter_mut() {
                params.push(ad.a.data_mut());
                params.push(ad.b.data_mut());
            }
            for t in tau_vals.iter_mut() {
                params.push(std::slice::from_mut(t));
            }
            let grad_refs: Vec<Option<&[T]>> = grads.iter().map(|g| g.as_ref().map(|t| t.data())).collect();
            opt.step(&mut params, &grad_refs);
        }
        for (g, t) in gates.units.iter_mut().zip(tau_vals) {
            g.tau = t;
        }
        gates.clamp_all();
        log.steps.push(record);
    }

    // A start fraction of 1 places S_start past the last step.
    if plan.thresholds && !gates.all_initialized() {
        gates.initialize(adapters)?;
        log.threshold_init_step = Some(total);
    }
    Ok(log)
}

/// Unscaled update merged for one adapter: hard-thresholded when gating
/// is active, dense otherwise.
pub fn final_update<T: Scalar>(adapter: &Adapter<T>, gates: &Gates<T>, cfg: &ExperimentConfig) -> Result<Tensor<T>> {
    if cfg.method.gated() && cfg.gating {
        final_sparse_update(adapter, gates.gate_for(adapter.layer))
    } else {
        Ok(adapter.dense_update())
    }
}

/// Result of training one task and folding it into the base model.
#[derive(Clone, Debug)]
pub struct MergedTask<T> {
    pub log: TaskLog,
    pub finals: Vec<(LayerId, Tensor<T>)>,
    pub taus: Vec<f64>,
}

/// Trains fresh adapters on `task`, merges `β·ΔW_final` into `model` and
/// accumulates the past state. The adapters are dropped on return.
pub fn train_and_merge<T: Scalar>(
    model: &mut TinyTransformer<T>,
    task: &Task,
    cfg: &ExperimentConfig,
    lambda: f64,
    ella: Option<&mut EllaState<T>>,
    seed: u64,
) -> Result<MergedTask<T>> {
    let mut adapters = inject_adapters(model, cfg, seed, task.id)?;
    let mut gates = fresh_gates(model, cfg)?;
    let log = train_task(
        model,
        &mut adapters,
        &mut gates,
        task,
        cfg,
        lambda,
        ella.as_deref(),
        seed,
    )?;
    let mut finals = Vec::with_capacity(adapters.len());
    for ad in &adapters {
        let fin = final_update(ad, &gates, cfg)?;
        let w = model.projection_mut(ad.layer)?;
        *w = merge(w, &fin, ad.beta)?;
        finals.push((ad.layer, fin));
    }
    if let Some(st) = ella {
        for (ad, (layer, fin)) in adapters.iter().zip(&finals) {
            let acc = if cfg.past_includes_beta {
                fin.map(|v| v * ad.beta)
            } else {
                fin.clone()
            };
            st.update_past(*layer, &acc)?;
        }
    }
    Ok(MergedTask {
        log,
        finals,
        taus: gates.taus().iter().map(|t| t.to_f64_lossy()).collect(),
    })
}

/// Fraction of `examples` whose argmax over the full class head matches
/// the label.
pub fn evaluate<T: Scalar>(model: &TinyTransformer<T>, examples: &[crate::data::Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&crate::data::Example> = chunk.iter().collect();
        let (batch, labels) = batch_of(&refs)?;
        let logits = model.logits(&batch)?;
        let (_, cols) = logits.dims2()?;
        for (row, &label) in logits.data().chunks(cols).zip(&labels) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Everything a stream run produces.
#[derive(Clone, Debug)]
pub struct StreamOutcome<T> {
    pub matrix: AccuracyMatrix,
    /// One mask per (task position, adapted layer).
    pub masks: Vec<SupportMask>,
    pub logs: Vec<TaskLog>,
    pub final_taus: Vec<Vec<f64>>,
    pub model: TinyTransformer<T>,
    pub ella: Option<EllaState<T>>,
    pub merges: usize,
    /// SHA-256 over loss bits, merged weights and the matrix.
    pub trace_digest: String,
}

/// Runs the tasks of `stream` in `order` from a base model built from
/// `seed`, filling rows `1..=n` of the matrix and, when enabled, row 0
/// from isolated runs on copies of the initial model.
pub fn run_stream(
    stream: &TaskStream,
    order: &[usize],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<StreamOutcome<f32>> {
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..stream.tasks.len()).collect::<Vec<_>>() {
        return Err(Error::Config(format!(
            "order {order:?} is not a permutation of the {} tasks",
            stream.tasks.len()
        )));
    }
    let initial = build_model::<f32>(&cfg.model_config(), seed)?;
    let mut model = initial.clone();
    let n = order.len();
    let mut matrix = AccuracyMatrix::new(n);
    let mut ella = cfg.method.uses_ella().then(|| {
        EllaState::new(
            model
                .config
                .adapted_layers()
                .into_iter()
                .map(|l| (l, model.projection(l).expect("adapted layer").shape().to_vec())),
        )
    });
    let mut hasher = Sha256::new();
    let mut masks = Vec::new();
    let mut logs = Vec::new();
    let mut final_taus = Vec::new();
    let mut merges = 0;

    for (pos, &tid) in order.iter().enumerate() {
        let task = &stream.tasks[tid];
        let merged = train_and_merge(&mut model, task, cfg, cfg.lambda_at(pos), ella.as_mut(), seed)?;
        merges += 1;
        for rec in &merged.log.steps {
            hasher.update(rec.loss.to_bits().to_le_bytes());
            hasher.update(rec.penalty.to_bits().to_le_bytes());
        }
        for (layer, fin) in &merged.finals {
            masks.push(SupportMask::from_tensor(*layer, pos, &support_mask(fin))?);
        }
        for l in model.config.adapted_layers() {
            for v in model.projection(l)?.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        for (j, &prev) in order[..=pos].iter().enumerate() {
            let acc = evaluate(&model, &stream.tasks[prev].test)?;
            matrix.set(pos + 1, j, acc)?;
        }
        log::info!(
            "task {} ({}/{}) done: a_ii = {:.4}",
            tid,
            pos + 1,
            n,
            matrix.get(pos + 1, pos).unwrap_or(f64::NAN)
        );
        final_taus.push(merged.taus);
        logs.push(merged.log);
    }

    if cfg.isolated {
        for (pos, &tid) in order.iter().enumerate() {
            let task = &stream.tasks[tid];
            let mut solo = initial.clone();
            let mut solo_state = ella
                .as_ref()
                .map(|st| EllaState::new(st.layers().map(|(l, p)| (*l, p.shape().to_vec()))));
            train_and_merge(&mut solo, task, cfg, cfg.lambda_at(0), solo_state.as_mut(), seed)?;
            matrix.set(0, pos, evaluate(&solo, &task.test)?)?;
        }
    }
    hasher.update(matrix.to_csv().as_bytes());
    let trace_digest = hasher.finalize().iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").expect("string write");
        s
    });
    Ok(StreamOutcome {
        matrix,
        masks,
        logs,
        final_taus,
        model,
        ella,
        merges,
        trace_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use crate::data::{generate_task_stream, StreamSpec};

    fn small_cfg(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 32,
            vocab_size: 32,
            max_seq_len: 8,
            seq_len: 8,
            n_tasks: 2,
            classes_per_task: 2,
            samples_per_class: 40,
            rank: 2,
            alpha: 8.0,
            batch_size: 8,
            learning_rate: 1e-2,
            lambda: vec![100.0],
            ..ExperimentConfig::default()
        }
    }

    fn stream(cfg: &ExperimentConfig) -> TaskStream {
        generate_task_stream(&cfg.stream_spec()).unwrap()
    }

    #[test]
    fn matrix_rejects_upper_cells_and_out_of_range() {
        let mut m = AccuracyMatrix::new(3);
        m.set(0, 2, 0.5).unwrap();
        m.set(2, 1, 0.5).unwrap();
        assert!(m.set(1, 1, 0.5).is_err());
        assert!(m.set(4, 0, 0.5).is_err());
        assert!(m.set(1, 0, 1.5).is_err());
        assert!(matches!(m.require(3, 0), Err(Error::State(_))));
    }

    #[test]
    fn matrix_csv_round_trip() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, 0.75).unwrap();
        m.set(0, 1, 0.5).unwrap();
        m.set(1, 0, 0.8125).unwrap();
        m.set(2, 0, 0.1).unwrap();
        m.set(2, 1, 1.0).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("row,task_index,accuracy\n0,1,0.75\n"));
        assert_eq!(AccuracyMatrix::from_csv(&csv, 2).unwrap(), m);
    }

    #[test]
    fn empty_task_is_a_config_error() {
        let cfg = small_cfg(Method::JumpIncLora);
        let mut model = build_model::<f32>(&cfg.model_config(), 1).unwrap();
        let mut task = stream(&cfg).tasks[0].clone();
        task.train.clear();
        assert!(matches!(
            train_and_merge(&mut model, &task, &cfg, 0.0, None, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gamma_endpoints_and_single_threshold_init() {
        let cfg = small_cfg(Method::JumpIncLora);
        let s = stream(&cfg);
        let mut model = build_model::<f32>(&cfg.model_config(), 3).unwrap();
        let out = train_and_merge(&mut model, &s.tasks[0], &cfg, 0.0, None, 3).unwrap();
        let log = &out.log;
        let total = log.steps.len();
        assert_eq!(total, s.tasks[0].train.len().div_ceil(cfg.batch_size));
        assert_eq!(log.steps[0].gamma, 0.0);
        let s_final = (0.8 * total as f64).floor() as usize;
        assert!(log.steps[s_final..].iter().all(|r| r.gamma == 1.0));
        assert_eq!(log.threshold_init_step, Some((0.2 * total as f64).floor() as usize));
        assert_eq!(log.data_task_ids, BTreeSet::from([s.tasks[0].id]));
    }

    #[test]
    fn zero_lambda_penalty_matches_no_penalty() {
        let s = stream(&small_cfg(Method::JumpIncLora));
        let inc = small_cfg(Method::JumpIncLora);
        let ella = ExperimentConfig {
            lambda: vec![0.0],
            ..small_cfg(Method::JumpElla)
        };
        let a = run_stream(&s, &[0, 1], &inc, 5).unwrap();
        let b = run_stream(&s, &[0, 1], &ella, 5).unwrap();
        let la: Vec<u64> = a
            .logs
            .iter()
            .flat_map(|l| l.steps.iter().map(|r| r.loss.to_bits()))
            .collect();
        let lb: Vec<u64> = b
            .logs
            .iter()
            .flat_map(|l| l.steps.iter().map(|r| r.loss.to_bits()))
            .collect();
        assert_eq!(la, lb);
        assert_eq!(a.trace_digest, b.trace_digest);
    }

    #[test]
    fn stream_bookkeeping() {
        let cfg = small_cfg(Method::JumpElla);
        let s = stream(&cfg);
        let out = run_stream(&s, &[1, 0], &cfg, 9).unwrap();
        assert_eq!(out.merges, 2);
        assert_eq!(out.masks.len(), 2 * cfg.model_config().adapted_layers().len());
        for r in 1..=2 {
            for c in 0..r {
                assert!(out.matrix.get(r, c).is_some());
            }
        }
        assert!(out.matrix.get(0, 0).is_some() && out.matrix.get(0, 1).is_some());
        // The first stream task and its isolated run see identical state.
        assert_eq!(out.matrix.get(0, 0), out.matrix.get(1, 0));
        let again = run_stream(&s, &[1, 0], &cfg, 9).unwrap();
        assert_eq!(again.matrix, out.matrix);
        assert_eq!(again.trace_digest, out.trace_digest);
    }

    #[test]
    fn masks_match_final_support() {
        let cfg = small_cfg(Method::JumpIncLora);
        let s = stream(&cfg);
        let mut model = build_model::<f32>(&cfg.model_config(), 4).unwrap();
        let out = train_and_merge(&mut model, &s.tasks[0], &cfg, 0.0, None, 4).unwrap();
        for (layer, fin) in &out.finals {
            let mask = SupportMask::from_tensor(*layer, 0, &support_mask(fin)).unwrap();
            for (bit, v) in mask.bits().iter().zip(fin.data()) {
                assert_eq!(*bit, *v != 0.0);
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_near_chance_for_random_weights() {
        let spec = StreamSpec {
            n_tasks: 1,
            classes_per_task: 4,
            samples_per_class: 400,
            seq_len: 8,
            vocab_size: 32,
            ..StreamSpec::default()
        };
        let s = generate_task_stream(&spec).unwrap();
        let cfg = ExperimentConfig {
            n_tasks: 1,
            classes_per_task: 4,
            ..small_cfg(Method::IncLora)
        };
        let mut model = build_model::<f32>(&cfg.model_config(), 11).unwrap();
        // Zero head: every logit ties, argmax picks class 0.
        model.head = Tensor::zeros(model.head.shape());
        let acc = evaluate(&model, &s.tasks[0].test).unwrap();
        let n = s.tasks[0].test.len() as f64;
        let k = 4.0;
        let sd = ((1.0 / k) * (1.0 - 1.0 / k) / n).sqrt();
        assert!((acc - 1.0 / k).abs() < 4.0 * sd, "acc {acc}");
        assert_eq!(acc, evaluate(&model, &s.tasks[0].test).unwrap());
    }
}
