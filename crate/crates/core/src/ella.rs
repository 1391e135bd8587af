//! Coordinate-wise interference penalty against accumulated past updates.
//!
//! The penalty is `λ‖u ⊙ W_past‖²_F` where `u` is the dense update before
//! `S_start` and the gated (or interpolated) update afterwards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::LayerId;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which update the penalty sees once gating has started.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllaVariant {
    Sparse,
    Interpolated,
}

/// Tape handles for the three forms of one adapter's update at a step.
#[derive(Clone, Copy, Debug)]
pub struct UpdateVars {
    pub dense: Var,
    pub jump: Option<Var>,
    pub interp: Var,
}

/// Picks the update the penalty applies to at `step`.
pub fn penalized_update(updates: UpdateVars, step: usize, start: usize, variant: EllaVariant) -> Var {
    if step < start {
        return updates.dense;
    }
    match (variant, updates.jump) {
        (EllaVariant::Sparse, Some(jump)) => jump,
        (EllaVariant::Interpolated, Some(_)) => updates.interp,
        (_, None) => updates.dense,
    }
}

/// `λ‖u ⊙ W_past‖²_F` on the tape.
pub fn ella_penalty<T: Scalar>(tape: &mut Tape<T>, update: Var, past: Var, lambda: T) -> Result<Var> {
    if !(lambda >= T::zero()) {
        return Err(Error::Config(format!(
            "penalty weight must be nonnegative, got {lambda}"
        )));
    }
    let overlap = tape.mul(update, past)?;
    let sq = tape.frobenius_sq(overlap);
    Ok(tape.scale(sq, lambda))
}

/// Accumulated merged updates per adapted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EllaState<T> {
    past: BTreeMap<LayerId, Tensor<T>>,
}

impl<T: Scalar> EllaState<T> {
    /// All-zero state for the given layers.
    pub fn new(layers: impl IntoIterator<Item = (LayerId, Vec<usize>)>) -> Self {
        EllaState {
            past: layers
                .into_iter()
                .map(|(id, shape)| (id, Tensor::zeros(&shape)))
                .collect(),
        }
    }

    pub fn past(&self, layer: LayerId) -> Result<&Tensor<T>> {
        self.past
            .get(&layer)
            .ok_or_else(|| Error::State(format!("no accumulated update for layer {layer}")))
    }

    pub fn layers(&self) -> impl Iterator<Item = (&LayerId, &Tensor<T>)> {
        self.past.iter()
    }

    /// `W_past ← W_past + ΔW_final` for one layer.
    pub fn update_past(&mut self, layer: LayerId, dw_final: &Tensor<T>) -> Result<()> {
        let slot = self
            .past
            .get_mut(&layer)
            .ok_or_else(|| Error::State(format!("unknown layer {layer}")))?;
        *slot = slot.zip_map(dw_final, |p, d| p + d)?;
        Ok(())
    }

    pub fn from_parts(past: BTreeMap<LayerId, Tensor<T>>) -> Self {
        EllaState { past }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn penalty_value(dw: &Tensor<f64>, past: &Tensor<f64>, lambda: f64) -> f64 {
        let mut tape = Tape::new();
        let u = tape.constant(dw.clone());
        let p = tape.constant(past.clone());
        let pen = ella_penalty(&mut tape, u, p, lambda).unwrap();
        tape.value(pen).item()
    }

    #[test]
    fn zero_past_gives_zero_penalty() {
        let dw = Tensor::from_rows(&[&[1.0, -2.0], &[3.5, 4.0]]).unwrap();
        assert_eq!(penalty_value(&dw, &Tensor::zeros(&[2, 2]), 10.0), 0.0);
    }

    #[test]
    fn hand_evaluated_penalty() {
        let dw = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let past = Tensor::from_rows(&[&[3.0, 0.0]]).unwrap();
        assert_eq!(penalty_value(&dw, &past, 2.0), 18.0);
    }

    #[test]
    fn disjoint_support_gives_zero() {
        let jump = Tensor::from_rows(&[&[0.0, 2.0, 0.0]]).unwrap();
        let past = Tensor::from_rows(&[&[5.0, 0.0, -1.0]]).unwrap();
        assert_eq!(penalty_value(&jump, &past, 1e5), 0.0);
    }

    #[test]
    fn negative_lambda_rejected() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(ella_penalty(&mut tape, u, u, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn penalty_picks_update_by_step_and_variant() {
        let mut tape = Tape::<f64>::new();
        let dense = tape.constant(Tensor::scalar(1.0));
        let jump = tape.constant(Tensor::scalar(2.0));
        let interp = tape.constant(Tensor::scalar(3.0));
        let u = UpdateVars {
            dense,
            jump: Some(jump),
            interp,
        };
        assert_eq!(penalized_update(u, 3, 5, EllaVariant::Sparse), dense);
        assert_eq!(penalized_update(u, 5, 5, EllaVariant::Sparse), jump);
        assert_eq!(penalized_update(u, 9, 5, EllaVariant::Interpolated), interp);
    }

    #[test]
    fn accumulation() {
        let id = LayerId::query(0);
        let mut st = EllaState::<f64>::new([(id, vec![2, 2])]);
        assert!(st.past(id).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 0.0]]).unwrap();
        st.update_past(id, &x).unwrap();
        assert_eq!(st.past(id).unwrap(), &x);
        st.update_past(id, &x.map(|v| -v)).unwrap();
        assert!(st.past(id).unwrap().data().iter().all(|&v| v == 0.0));

        let unknown = LayerId::value(3);
        assert!(matches!(st.update_past(unknown, &x), Err(Error::State(_))));
        assert!(st.update_past(id, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn three_task_sum() {
        let id = LayerId::value(1);
        let mut st = EllaState::<f64>::new([(id, vec![1, 3])]);
        let updates = [[0.5, 0.0, -1.0], [0.25, 2.0, 0.0], [0.0, -0.5, 3.0]];
        for u in &updates {
            st.update_past(id, &Tensor::new(vec![1, 3], u.to_vec()).unwrap())
                .unwrap();
        }
        let oracle: Vec<f64> = (0..3).map(|j| updates.iter().map(|u| u[j]).sum()).collect();
        assert_eq!(st.past(id).unwrap().data(), oracle.as_slice());
    }
}
