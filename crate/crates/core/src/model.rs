//! Tiny pre-layer-norm transformer encoder with a mean-pooled
//! classification head. Adapters attach to the query and value
//! projections of every block through a [`WeightHook`].

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::LayerId;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub max_seq_len: usize,
    pub d_ff: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            max_seq_len: 32,
            d_ff: 128,
            num_classes: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("max_seq_len", self.max_seq_len),
            ("d_ff", self.d_ff),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count of the base network.
    pub fn param_count(&self) -> usize {
        let (v, d, f, c, l) = (
            self.vocab_size,
            self.d_model,
            self.d_ff,
            self.num_classes,
            self.max_seq_len,
        );
        let block = 4 * d * d + 4 * d + d * f + f + f * d + d;
        v * d + l * d + self.n_blocks * block + 2 * d + d * c + c
    }

    /// The adapted projections, in model order.
    pub fn adapted_layers(&self) -> Vec<LayerId> {
        (0..self.n_blocks)
            .flat_map(|b| [LayerId::query(b), LayerId::value(b)])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyTransformer<T> {
    pub config: ModelConfig,
    pub token_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
    pub head: Tensor<T>,
    pub head_bias: Tensor<T>,
}

/// Supplies the effective weight of each adapted projection.
pub trait WeightHook<T: Scalar> {
    fn effective_weight(&mut self, tape: &mut Tape<T>, layer: LayerId, base: Var) -> Result<Var>;
}

/// Uses the base weights unchanged.
pub struct BaseWeights;

impl<T: Scalar> WeightHook<T> for BaseWeights {
    fn effective_weight(&mut self, _tape: &mut Tape<T>, _layer: LayerId, base: Var) -> Result<Var> {
        Ok(base)
    }
}

/// Token ids for a batch of equal-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut batch = 0;
        let mut seq = None;
        for s in seqs {
            match seq {
                None => seq = Some(s.len()),
                Some(len) if len != s.len() => {
                    return Err(Error::Input("sequences in a batch must share one length".into()))
                }
                _ => {}
            }
            ids.extend_from_slice(s);
            batch += 1;
        }
        let seq = seq.unwrap_or(0);
        if batch == 0 || seq == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(Batch { ids, batch, seq })
    }
}

fn normal_tensor<T: Scalar>(rng: &mut impl rand::Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("shape")
}

/// Deterministic random initialization from `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<TinyTransformer<T>> {
    config.validate()?;
    let mut rng = stream_rng(seed, Stream::ModelInit, 0);
    let (d, f) = (config.d_model, config.d_ff);
    let lin = |rng: &mut _, i: usize, o: usize| normal_tensor::<T>(rng, &[i, o], 1.0 / (i as f64).sqrt());
    let token_emb = normal_tensor(&mut rng, &[config.vocab_size, d], 1.0);
    let pos_emb = normal_tensor(&mut rng, &[config.max_seq_len, d], 0.1);
    let blocks = (0..config.n_blocks)
        .map(|_| Block {
            ln1_gain: Tensor::full(&[d], T::one()),
            ln1_bias: Tensor::zeros(&[d]),
            wq: lin(&mut rng, d, d),
            wk: lin(&mut rng, d, d),
            wv: lin(&mut rng, d, d),
            wo: lin(&mut rng, d, d),
            ln2_gain: Tensor::full(&[d], T::one()),
            ln2_bias: Tensor::zeros(&[d]),
            w1: lin(&mut rng, d, f),
            b1: Tensor::zeros(&[f]),
            w2: lin(&mut rng, f, d),
            b2: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(TinyTransformer {
        config: config.clone(),
        token_emb,
        pos_emb,
        blocks,
        final_gain: Tensor::full(&[d], T::one()),
        final_bias: Tensor::zeros(&[d]),
        head: lin(&mut rng, d, config.num_classes),
        head_bias: Tensor::zeros(&[config.num_classes]),
    })
}

impl<T: Scalar> TinyTransformer<T> {
    /// Every base weight with a stable name, in a fixed order.
    pub fn named_weights(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1.gain", &b.ln1_gain),
                ("ln1.bias", &b.ln1_bias),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2.gain", &b.ln2_gain),
                ("ln2.bias", &b.ln2_bias),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("final_ln.gain".to_string(), &self.final_gain));
        out.push(("final_ln.bias".to_string(), &self.final_bias));
        out.push(("head.weight".to_string(), &self.head));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    pub fn named_weights_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("token_emb".to_string(), &mut self.token_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in [
                ("ln1.gain", &mut b.ln1_gain),
                ("ln1.bias", &mut b.ln1_bias),
                ("wq", &mut b.wq),
                ("wk", &mut b.wk),
                ("wv", &mut b.wv),
                ("wo", &mut b.wo),
                ("ln2.gain", &mut b.ln2_gain),
                ("ln2.bias", &mut b.ln2_bias),
                ("w1", &mut b.w1),
                ("b1", &mut b.b1),
                ("w2", &mut b.w2),
                ("b2", &mut b.b2),
            ] {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("final_ln.gain".to_string(), &mut self.final_gain));
        out.push(("final_ln.bias".to_string(), &mut self.final_bias));
        out.push(("head.weight".to_string(), &mut self.head));
        out.push(("head.bias".to_string(), &mut self.head_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_weights().iter().map(|(_, t)| t.numel()).sum()
    }

    /// The base weight an adapter on `layer` modifies.
    pub fn projection(&self, layer: LayerId) -> Result<&Tensor<T>> {
        let b = self
            .blocks
            .get(layer.block)
            .ok_or_else(|| Error::Input(format!("no block for layer {layer}")))?;
        Ok(match layer.proj {
            crate::adapter::Projection::Query => &b.wq,
            crate::adapter::Projection::Value => &b.wv,
        })
    }

    pub fn projection_mut(&mut self, layer: LayerId) -> Result<&mut Tensor<T>> {
        let b = self
            .blocks
            .get_mut(layer.block)
            .ok_or_else(|| Error::Input(format!("no block for layer {layer}")))?;
        Ok(match layer.proj {
            crate::adapter::Projection::Query => &mut b.wq,
            crate::adapter::Projection::Value => &mut b.wv,
        })
    }

    /// Records the forward pass on `tape` and returns `[batch × classes]`
    /// logits. Base weights enter as constants.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch, hook: &mut dyn WeightHook<T>) -> Result<Var> {
        let cfg = &self.config;
        if batch.seq > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, cfg.max_seq_len
            )));
        }
        if batch.ids.len() != batch.batch * batch.seq {
            return Err(Error::Input("batch ids do not match batch×seq".into()));
        }
        let c = |tape: &mut Tape<T>, t: &Tensor<T>| tape.constant(t.clone());
        let eps = T::of(LN_EPS);

        let tok = c(tape, &self.token_emb);
        let pos = c(tape, &self.pos_emb);
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let te = tape.embedding(tok, &batch.ids)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut x = tape.add(te, pe)?;

        for (i, blk) in self.blocks.iter().enumerate() {
            let g1 = c(tape, &blk.ln1_gain);
            let b1 = c(tape, &blk.ln1_bias);
            let h = tape.layer_norm(x, g1, b1, eps)?;
            let wq = c(tape, &blk.wq);
            let wq = hook.effective_weight(tape, LayerId::query(i), wq)?;
            let wk = c(tape, &blk.wk);
            let wv = c(tape, &blk.wv);
            let wv = hook.effective_weight(tape, LayerId::value(i), wv)?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let att = tape.attention(q, k, v, batch.batch, batch.seq, cfg.n_heads)?;
            let wo = c(tape, &blk.wo);
            let proj = tape.matmul(att, wo)?;
            x = tape.add(x, proj)?;

            let g2 = c(tape, &blk.ln2_gain);
            let b2 = c(tape, &blk.ln2_bias);
            let h2 = tape.layer_norm(x, g2, b2, eps)?;
            let w1 = c(tape, &blk.w1);
            let bias1 = c(tape, &blk.b1);
            let w2 = c(tape, &blk.w2);
            let bias2 = c(tape, &blk.b2);
            let up = tape.matmul(h2, w1)?;
            let up = tape.add_row_bias(up, bias1)?;
            let act = tape.relu(up);
            let down = tape.matmul(act, w2)?;
            let down = tape.add_row_bias(down, bias2)?;
            x = tape.add(x, down)?;
        }

        let gf = c(tape, &self.final_gain);
        let bf = c(tape, &self.final_bias);
        let hf = tape.layer_norm(x, gf, bf, eps)?;
        let pooled = tape.mean_pool(hf, batch.batch)?;
        let head = c(tape, &self.head);
        let hb = c(tape, &self.head_bias);
        let logits = tape.matmul(pooled, head)?;
        tape.add_row_bias(logits, hb)
    }

    /// Logits of the base network alone, without gradient tracking.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, &mut BaseWeights)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            max_seq_len: 6,
            d_ff: 12,
            num_classes: 3,
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model::<f32>(&ModelConfig::default(), 5).unwrap();
        let b = build_model::<f32>(&ModelConfig::default(), 5).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f32>(&ModelConfig::default(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_has_eight_adapted_layers() {
        assert_eq!(ModelConfig::default().adapted_layers().len(), 8);
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [ModelConfig::default(), small()] {
            let m = build_model::<f32>(&cfg, 1).unwrap();
            assert_eq!(m.param_count(), cfg.param_count());
        }
        // Hand count for the small config: 80 + 48 + 2·(256 + 32 + 96 + 12 + 96 + 8) + 16 + 24 + 3.
        assert_eq!(small().param_count(), 80 + 48 + 2 * 500 + 16 + 24 + 3);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(build_model::<f32>(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_long_sequences() {
        let m = build_model::<f32>(&small(), 0).unwrap();
        let long = vec![1usize; 7];
        let batch = Batch::from_sequences([long.as_slice()]).unwrap();
        assert!(matches!(m.logits(&batch), Err(Error::Input(_))));
        let bad_token = vec![10usize; 3];
        let batch = Batch::from_sequences([bad_token.as_slice()]).unwrap();
        assert!(matches!(m.logits(&batch), Err(Error::Input(_))));
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = build_model::<f64>(&small(), 3).unwrap();
        let seqs = [vec![1usize, 2, 3, 4], vec![9, 8, 7, 6], vec![0, 0, 5, 5]];
        let batch = Batch::from_sequences(seqs.iter().map(|s| s.as_slice())).unwrap();
        let out = m.logits(&batch).unwrap();
        let perm = [2usize, 0, 1];
        let permuted = Batch::from_sequences(perm.iter().map(|&i| seqs[i].as_slice())).unwrap();
        let out_p = m.logits(&permuted).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(out_p.at(row, c), out.at(src, c));
            }
        }
    }
}
