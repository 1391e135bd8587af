//! Fused forward/backward kernels for the transformer layers. The tape
//! records these as single operations with their own backward rules.

use crate::tensor::Scalar;

pub(crate) struct LayerNormCache<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    cols: usize,
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / cols;
    let n = T::of(cols as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mu = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        for c in 0..cols {
            y[r * cols + c] = (row[c] - mu) * rs * gain[c] + bias[c];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (y, LayerNormCache { mean, rstd })
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    gain: &[T],
    cache: &LayerNormCache<T>,
    cols: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let n = T::of(cols as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![T::zero(); cols];
    let mut dbias = vec![T::zero(); cols];
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..rows {
        let (mu, rs) = (cache.mean[r], cache.rstd[r]);
        let xr = &x[r * cols..(r + 1) * cols];
        let gr = &g[r * cols..(r + 1) * cols];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for c in 0..cols {
            let xhat = (xr[c] - mu) * rs;
            dgain[c] = dgain[c] + gr[c] * xhat;
            dbias[c] = dbias[c] + gr[c];
            dxhat[c] = gr[c] * gain[c];
            sum_dxhat = sum_dxhat + dxhat[c];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[c] * xhat;
        }
        for c in 0..cols {
            let xhat = (xr[c] - mu) * rs;
            dx[r * cols + c] = rs / n * (n * dxhat[c] - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_model: usize,
}

impl AttentionShape {
    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn probs_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.seq * self.seq
    }
}

/// Multi-head scaled dot-product self-attention over rows laid out as
/// `[batch·seq × d_model]`. Returns the attended values and the softmax
/// probabilities, `[batch × heads × seq × seq]`.
pub(crate) fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], shape: AttentionShape) -> (Vec<T>, Vec<T>) {
    let AttentionShape {
        batch,
        seq,
        heads,
        d_model: d,
    } = shape;
    let dh = shape.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); batch * seq * d];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut row = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = shape.probs_offset(b, h);
            let col0 = h * dh;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * d + col0..(b * seq + i) * d + col0 + dh];
                let mut max = T::neg_infinity();
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[(b * seq + j) * d + col0..(b * seq + j) * d + col0 + dh];
                    let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                    *r = s;
                    max = max.max(s);
                }
                let mut z = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z = z + *r;
                }
                let out_i = (b * seq + i) * d + col0;
                for (j, &r) in row.iter().enumerate() {
                    let p = r / z;
                    probs[base + i * seq + j] = p;
                    let vj = &v[(b * seq + j) * d + col0..(b * seq + j) * d + col0 + dh];
                    for c in 0..dh {
                        out[out_i + c] = out[out_i + c] + p * vj[c];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn attention_backward<T: Scalar>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    shape: AttentionShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttentionShape {
        batch,
        seq,
        heads,
        d_model: d,
    } = shape;
    let dh = shape.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = shape.probs_offset(b, h);
            let col0 = h * dh;
            for i in 0..seq {
                let gi = (b * seq + i) * d + col0;
                let p_row = &probs[base + i * seq..base + (i + 1) * seq];
                // dP = dO · Vᵀ, dV += Pᵀ · dO
                for j in 0..seq {
                    let vj = (b * seq + j) * d + col0;
                    let mut acc = T::zero();
                    for c in 0..dh {
                        acc = acc + g[gi + c] * v[vj + c];
                        dv[vj + c] = dv[vj + c] + p_row[j] * g[gi + c];
                    }
                    dp[j] = acc;
                }
                let dot = p_row.iter().zip(&dp).map(|(&p, &x)| p * x).sum::<T>();
                for j in 0..seq {
                    let ds = p_row[j] * (dp[j] - dot) * scale;
                    let kj = (b * seq + j) * d + col0;
                    for c in 0..dh {
                        dq[gi + c] = dq[gi + c] + ds * k[kj + c];
                        dk[kj + c] = dk[kj + c] + ds * q[gi + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Mean softmax cross-entropy over rows. Returns the loss and the row
/// probabilities.
pub(crate) fn cross_entropy_forward<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> (T, Vec<T>) {
    let rows = labels.len();
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let z = row.iter().map(|&x| (x - max).exp()).sum::<T>();
        let log_z = z.ln() + max;
        for c in 0..classes {
            probs[r * classes + c] = (row[c] - log_z).exp();
        }
        total = total + (log_z - row[label]);
    }
    (total / T::of(rows as f64), probs)
}
