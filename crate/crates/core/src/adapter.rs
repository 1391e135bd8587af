//! Low-rank adapters and the JumpReLU gate over their dense update.
//!
//! An adapter holds `A ∈ R^{d_in×r}` and `B ∈ R^{r×d_out}`; its dense update
//! is `ΔW = A·B`. The gated update keeps only entries with `|ΔW| > τ`:
//! `JumpReLU_τ(ΔW) − JumpReLU_τ(−ΔW) = ΔW ⊙ H(|ΔW| − τ)`. The scale
//! `β = α/r` is applied at forward and merge time, never inside the gate.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{heaviside_scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

/// Default lower bound on any initialized threshold.
pub const DEFAULT_TAU_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Value,
}

/// The base weight an adapter is bound to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub block: usize,
    pub proj: Projection,
}

impl LayerId {
    pub fn query(block: usize) -> Self {
        LayerId {
            block,
            proj: Projection::Query,
        }
    }

    pub fn value(block: usize) -> Self {
        LayerId {
            block,
            proj: Projection::Value,
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.proj {
            Projection::Query => "q",
            Projection::Value => "v",
        };
        write!(f, "block{}.{}", self.block, p)
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("layer id `{s}` is not of the form block<N>.q or block<N>.v"));
        let rest = s.strip_prefix("block").ok_or_else(bad)?;
        let (num, proj) = rest.split_once('.').ok_or_else(bad)?;
        let block = num.parse().map_err(|_| bad())?;
        let proj = match proj {
            "q" => Projection::Query,
            "v" => Projection::Value,
            _ => return Err(bad()),
        };
        Ok(LayerId { block, proj })
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A LoRA adapter bound to one base weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<T> {
    pub layer: LayerId,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: T,
    pub beta: T,
}

/// Half-width of the Kaiming-uniform distribution used for `A`.
pub fn kaiming_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Fresh adapter: `A ~ U(−√(6/d_in), √(6/d_in))`, `B = 0`, `β = α/r`.
pub fn init_adapter<T: Scalar>(
    layer: LayerId,
    d_in: usize,
    d_out: usize,
    rank: usize,
    alpha: T,
    seed: u64,
) -> Result<Adapter<T>> {
    if d_in == 0 || d_out == 0 || rank == 0 {
        return Err(Error::Config(format!(
            "adapter dimensions must be positive (d_in={d_in}, d_out={d_out}, r={rank})"
        )));
    }
    if !(alpha > T::zero()) {
        return Err(Error::Config(format!("adapter alpha must be positive, got {alpha}")));
    }
    if rank > d_in.min(d_out) {
        log::warn!(
            "adapter rank {rank} exceeds min(d_in, d_out) = {} for {layer}",
            d_in.min(d_out)
        );
    }
    let bound = kaiming_uniform_bound(d_in);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<T> = (0..d_in * rank)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Ok(Adapter {
        layer,
        a: Tensor::matrix(d_in, rank, a)?,
        b: Tensor::zeros(&[rank, d_out]),
        rank,
        alpha,
        beta: alpha / T::of(rank as f64),
    })
}

impl<T: Scalar> Adapter<T> {
    pub fn d_in(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[1]
    }

    /// Trainable parameter count, `r·(d_in + d_out)`.
    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// Unscaled dense update `ΔW = A·B`.
    pub fn dense_update(&self) -> Tensor<T> {
        matmul(&self.a, &self.b).expect("adapter factors are conformable")
    }
}

/// Whether thresholds are shared by the whole model or per transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateScope {
    Global,
    PerBlock,
}

impl fmt::Display for GateScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateScope::Global => "global",
            GateScope::PerBlock => "per_block",
        })
    }
}

/// One learnable threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpGate<T> {
    pub tau: T,
    pub epsilon: T,
    pub tau_floor: T,
    pub initialized: bool,
}

/// A threshold placed on a tape, ready for gating.
#[derive(Clone, Copy, Debug)]
pub struct BoundGate<T> {
    pub tau: Var,
    pub epsilon: T,
}

impl<T: Scalar> JumpGate<T> {
    pub fn new(epsilon: T, tau_floor: T) -> Result<Self> {
        if !(epsilon > T::zero()) {
            return Err(Error::Config(format!("gate bandwidth must be positive, got {epsilon}")));
        }
        if !(tau_floor > T::zero()) {
            return Err(Error::Config(format!(
                "threshold floor must be positive, got {tau_floor}"
            )));
        }
        Ok(JumpGate {
            tau: T::zero(),
            epsilon,
            tau_floor,
            initialized: false,
        })
    }

    /// An already-initialized gate with a fixed threshold (clamped to the
    /// floor).
    pub fn with_tau(tau: T, epsilon: T, tau_floor: T) -> Result<Self> {
        let mut g = Self::new(epsilon, tau_floor)?;
        g.tau = tau.max(tau_floor);
        g.initialized = true;
        Ok(g)
    }

    /// Places `τ` on the tape, as a trainable leaf when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundGate<T>> {
        if !self.initialized {
            return Err(Error::State("gate threshold used before initialization".into()));
        }
        let t = Tensor::scalar(self.tau);
        let tau = if trainable { tape.param(t) } else { tape.constant(t) };
        Ok(BoundGate {
            tau,
            epsilon: self.epsilon,
        })
    }

    pub fn clamp(&mut self) {
        if self.initialized {
            self.tau = self.tau.max(self.tau_floor);
        }
    }
}

/// The thresholds of one model, laid out by scope.
#[derive(Clone, Debug, PartialEq)]
pub struct Gates<T> {
    pub scope: GateScope,
    pub units: Vec<JumpGate<T>>,
}

impl<T: Scalar> Gates<T> {
    pub fn new(scope: GateScope, n_blocks: usize, epsilon: T, tau_floor: T) -> Result<Self> {
        let n = match scope {
            GateScope::Global => 1,
            GateScope::PerBlock => n_blocks,
        };
        let unit = JumpGate::new(epsilon, tau_floor)?;
        Ok(Gates {
            scope,
            units: vec![unit; n],
        })
    }

    pub fn unit_of(&self, layer: LayerId) -> usize {
        match self.scope {
            GateScope::Global => 0,
            GateScope::PerBlock => layer.block,
        }
    }

    pub fn gate_for(&self, layer: LayerId) -> &JumpGate<T> {
        &self.units[self.unit_of(layer)]
    }

    pub fn all_initialized(&self) -> bool {
        self.units.iter().all(|g| g.initialized)
    }

    /// Sets every unit's threshold from the current dense updates of the
    /// adapters it covers, pooling magnitudes and budgets per unit.
    pub fn initialize(&mut self, adapters: &[Adapter<T>]) -> Result<()> {
        for unit in 0..self.units.len() {
            let members: Vec<&Adapter<T>> = adapters.iter().filter(|a| self.unit_of(a.layer) == unit).collect();
            let updates: Vec<Tensor<T>> = members.iter().map(|a| a.dense_update()).collect();
            let budget = members.iter().map(|a| a.param_count()).sum();
            let pool: Vec<&Tensor<T>> = updates.iter().collect();
            let gate = &mut self.units[unit];
            gate.tau = init_threshold(&pool, budget, gate.tau_floor)?;
            gate.initialized = true;
        }
        Ok(())
    }

    pub fn clamp_all(&mut self) {
        self.units.iter_mut().for_each(JumpGate::clamp);
    }

    pub fn taus(&self) -> Vec<T> {
        self.units.iter().map(|g| g.tau).collect()
    }
}

/// Symmetric gated update `JumpReLU_τ(ΔW) − JumpReLU_τ(−ΔW)`.
pub fn jump_update<T: Scalar>(tape: &mut Tape<T>, dw: Var, gate: BoundGate<T>) -> Result<Var> {
    let pos = tape.jumprelu(dw, gate.tau, gate.epsilon)?;
    let flipped = tape.neg(dw);
    let neg = tape.jumprelu(flipped, gate.tau, gate.epsilon)?;
    tape.sub(pos, neg)
}

/// Convex mix `(1 − γ)·ΔW + γ·ΔW_jump`.
pub fn interpolate_update<T: Scalar>(tape: &mut Tape<T>, dw: Var, dw_jump: Var, gamma: T) -> Result<Var> {
    if !(gamma >= T::zero() && gamma <= T::one()) {
        return Err(Error::Range(format!("interpolation factor {gamma} outside [0, 1]")));
    }
    let dense = tape.scale(dw, T::one() - gamma);
    let sparse = tape.scale(dw_jump, gamma);
    tape.add(dense, sparse)
}

/// Threshold such that at most `budget` pooled magnitudes lie strictly
/// above it: the `(budget+1)`-th largest `|ΔW|`, clamped to `tau_floor`.
/// Returns the floor when the budget covers every entry or when the pool
/// is all zero.
pub fn init_threshold<T: Scalar>(pool: &[&Tensor<T>], budget: usize, tau_floor: T) -> Result<T> {
    let mut mags: Vec<T> = pool.iter().flat_map(|t| t.data().iter().map(|v| v.abs())).collect();
    if mags.is_empty() {
        return Err(Error::State("threshold initialization over an empty scope".into()));
    }
    if mags.iter().all(|&m| m == T::zero()) {
        log::warn!("dense update is all zero at threshold initialization; using the floor");
        return Ok(tau_floor);
    }
    if budget >= mags.len() {
        return Ok(tau_floor);
    }
    // Descending order statistic at index `budget`.
    let (_, nth, _) = mags.select_nth_unstable_by(budget, |x, y| y.partial_cmp(x).expect("finite magnitudes"));
    Ok(nth.max(tau_floor))
}

/// Hard-thresholded product `(A·B) ⊙ H(|A·B| − τ)`.
pub fn final_sparse_update<T: Scalar>(adapter: &Adapter<T>, gate: &JumpGate<T>) -> Result<Tensor<T>> {
    if !gate.initialized {
        return Err(Error::State("final update requested from an uninitialized gate".into()));
    }
    let tau = gate.tau;
    Ok(adapter.dense_update().map(|v| v * heaviside_scalar(v.abs() - tau)))
}

/// `W_base + β·ΔW_final`.
pub fn merge<T: Scalar>(base: &Tensor<T>, dw_final: &Tensor<T>, beta: T) -> Result<Tensor<T>> {
    base.zip_map(dw_final, |w, d| w + d * beta)
}

/// Binary indicator of the nonzero entries of a merged update.
pub fn support_mask<T: Scalar>(dw_final: &Tensor<T>) -> Tensor<T> {
    dw_final.map(|v| if v != T::zero() { T::one() } else { T::zero() })
}
