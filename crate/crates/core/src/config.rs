//! Experiment configuration: a flat TOML table with typed keys. Unknown
//! keys are rejected.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{GateScope, DEFAULT_TAU_FLOOR};
use crate::data::StreamSpec;
use crate::ella::EllaVariant;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

/// Continual-learning method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "inclora")]
    IncLora,
    #[serde(rename = "jumplora+inclora")]
    JumpIncLora,
    #[serde(rename = "ella")]
    Ella,
    #[serde(rename = "jumplora+ella")]
    JumpElla,
}

impl Method {
    pub fn gated(self) -> bool {
        matches!(self, Method::JumpIncLora | Method::JumpElla)
    }

    pub fn uses_ella(self) -> bool {
        matches!(self, Method::Ella | Method::JumpElla)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::IncLora => "inclora",
            Method::JumpIncLora => "jumplora+inclora",
            Method::Ella => "ella",
            Method::JumpElla => "jumplora+ella",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Threshold sharing; JumpLoRA methods only (defaults to global).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_scope: Option<GateScope>,
    /// Which update the ELLA penalty sees after `S_start`; JumpLoRA+ELLA
    /// only (defaults to sparse).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ella_variant: Option<EllaVariant>,
    /// `false` pins γ to 0 and merges the dense update, reducing the
    /// JumpLoRA methods to their baselines.
    pub gating: bool,

    pub rank: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub tau_floor: f64,
    pub start_frac: f64,
    pub end_frac: f64,

    /// Penalty weight per task position; the last value repeats.
    pub lambda: Vec<f64>,
    /// Accumulate `β·ΔW_final` instead of `ΔW_final` into the past state.
    pub past_includes_beta: bool,

    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_ff: usize,

    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub seq_len: usize,
    pub difficulty: f64,
    pub stream_seed: u64,

    /// Task permutations to run; empty means the identity order.
    pub orders: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
    /// Train each task alone from the initial model to fill the isolated row.
    pub isolated: bool,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let stream = StreamSpec::default();
        let optim = AdamWConfig::default();
        ExperimentConfig {
            method: Method::JumpIncLora,
            gate_scope: None,
            ella_variant: None,
            gating: true,
            rank: 8,
            alpha: 32.0,
            epsilon: 0.001,
            tau_floor: DEFAULT_TAU_FLOOR,
            start_frac: 0.2,
            end_frac: 0.8,
            lambda: vec![1e3],
            past_includes_beta: false,
            learning_rate: optim.lr,
            warmup_steps: optim.warmup_steps,
            weight_decay: optim.weight_decay,
            batch_size: 32,
            d_model: model.d_model,
            n_heads: model.n_heads,
            n_blocks: model.n_blocks,
            vocab_size: model.vocab_size,
            max_seq_len: model.max_seq_len,
            d_ff: model.d_ff,
            n_tasks: stream.n_tasks,
            classes_per_task: stream.classes_per_task,
            samples_per_class: stream.samples_per_class,
            seq_len: stream.seq_len,
            difficulty: stream.difficulty,
            stream_seed: stream.seed,
            orders: Vec::new(),
            seeds: vec![42, 43, 44],
            isolated: true,
            output_dir: "runs/default".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Format {
            what: "config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn gate_scope(&self) -> GateScope {
        self.gate_scope.unwrap_or(GateScope::Global)
    }

    pub fn ella_variant(&self) -> EllaVariant {
        self.ella_variant.unwrap_or(EllaVariant::Sparse)
    }

    /// Penalty weight for the task at zero-based stream position `pos`.
    pub fn lambda_at(&self, pos: usize) -> f64 {
        match self.lambda.get(pos) {
            Some(&l) => l,
            None => self.lambda.last().copied().unwrap_or(0.0),
        }
    }

    pub fn task_orders(&self) -> Vec<Vec<usize>> {
        if self.orders.is_empty() {
            vec![(0..self.n_tasks).collect()]
        } else {
            self.orders.clone()
        }
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            seed: self.stream_seed,
            n_tasks: self.n_tasks,
            classes_per_task: self.classes_per_task,
            samples_per_class: self.samples_per_class,
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
            difficulty: self.difficulty,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            max_seq_len: self.max_seq_len,
            d_ff: self.d_ff,
            num_classes: self.n_tasks * self.classes_per_task,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.method {
            Method::IncLora | Method::Ella => {
                if self.gate_scope.is_some() {
                    return bad(format!("gate_scope has no meaning for method {}", self.method));
                }
                if self.ella_variant.is_some() {
                    return bad(format!("ella_variant has no meaning for method {}", self.method));
                }
            }
            Method::JumpIncLora => {
                if self.ella_variant.is_some() {
                    return bad("ella_variant requires method jumplora+ella".into());
                }
            }
            Method::JumpElla => {}
        }
        if self.rank == 0 || self.batch_size == 0 {
            return bad("rank and batch_size must be positive".into());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.tau_floor > 0.0) {
            return bad(format!("tau_floor must be positive, got {}", self.tau_floor));
        }
        if !(0.0..=1.0).contains(&self.start_frac)
            || !(0.0..=1.0).contains(&self.end_frac)
            || self.start_frac > self.end_frac
        {
            return bad(format!(
                "need 0 <= start_frac ({}) <= end_frac ({}) <= 1",
                self.start_frac, self.end_frac
            ));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0)) {
            return bad("lambda values must be nonnegative".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay nonnegative".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.seq_len > self.max_seq_len {
            return bad(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.seq_len, self.max_seq_len
            ));
        }
        for order in &self.orders {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..self.n_tasks).collect::<Vec<_>>() {
                return bad(format!("order {order:?} is not a permutation of 0..{}", self.n_tasks));
            }
        }
        self.model_config().validate()?;
        Ok(())
    }
}
