//! Transfer metrics over an accuracy matrix, and sparsity and overlap of
//! merged-update supports.

use crate::adapter::LayerId;
use crate::error::{Error, Result};
use crate::harness::AccuracyMatrix;
use crate::tensor::{Scalar, Tensor};

/// Binary support of one task's merged update for one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportMask {
    pub layer: LayerId,
    /// Zero-based stream position of the task.
    pub task: usize,
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl SupportMask {
    pub fn new(layer: LayerId, task: usize, shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::Dimension(format!(
                "mask shape {shape:?} does not hold {} entries",
                bits.len()
            )));
        }
        Ok(SupportMask {
            layer,
            task,
            shape,
            bits,
        })
    }

    /// Entries must be exactly 0 or 1.
    pub fn from_tensor<T: Scalar>(layer: LayerId, task: usize, mask: &Tensor<T>) -> Result<Self> {
        let bits = mask
            .data()
            .iter()
            .map(|&v| {
                if v == T::one() {
                    Ok(true)
                } else if v == T::zero() {
                    Ok(false)
                } else {
                    Err(Error::Input(format!("mask entry {v} is not binary")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layer, task, mask.shape().to_vec(), bits)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.bits
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("validated shape")
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `(1/|T|)·Σᵢ a_{|T|,i}`.
pub fn overall_accuracy(a: &AccuracyMatrix) -> Result<f64> {
    let n = a.n_tasks();
    if n == 0 {
        return Err(Error::State("empty accuracy matrix".into()));
    }
    let mut sum = 0.0;
    for i in 0..n {
        sum += a.require(n, i)?;
    }
    Ok(sum / n as f64)
}

/// `(1/(|T|−1))·Σ_{i<|T|} (a_{|T|,i} − a_{i,i})`; not applicable below two tasks.
pub fn backward_transfer(a: &AccuracyMatrix) -> Result<f64> {
    let n = a.n_tasks();
    if n < 2 {
        return Err(Error::NotApplicable(format!(
            "backward transfer needs two tasks, have {n}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..n - 1 {
        sum += a.require(n, i)? - a.require(i + 1, i)?;
    }
    Ok(sum / (n - 1) as f64)
}

/// `(1/|T|)·Σᵢ (a_{i,i} − a_{0,i})`.
pub fn forward_transfer(a: &AccuracyMatrix) -> Result<f64> {
    let n = a.n_tasks();
    if n == 0 {
        return Err(Error::State("empty accuracy matrix".into()));
    }
    let mut sum = 0.0;
    for i in 0..n {
        let iso = a
            .get(0, i)
            .ok_or_else(|| Error::State(format!("isolated accuracy for task {} missing", i + 1)))?;
        sum += a.require(i + 1, i)? - iso;
    }
    Ok(sum / n as f64)
}

/// Per-task backward transfer `a_{|T|,i} − a_{i,i}` for `i < |T|`.
pub fn backward_transfer_series(a: &AccuracyMatrix) -> Result<Vec<f64>> {
    let n = a.n_tasks();
    (0..n.saturating_sub(1))
        .map(|i| Ok(a.require(n, i)? - a.require(i + 1, i)?))
        .collect()
}

/// Fraction of zero entries.
pub fn sparsity(mask: &SupportMask) -> f64 {
    if mask.bits.is_empty() {
        return 1.0;
    }
    (mask.bits.len() - mask.ones()) as f64 / mask.bits.len() as f64
}

/// Zero fraction over several masks pooled together.
pub fn pooled_sparsity<'a>(masks: impl IntoIterator<Item = &'a SupportMask>) -> f64 {
    let (mut zeros, mut total) = (0usize, 0usize);
    for m in masks {
        zeros += m.bits.len() - m.ones();
        total += m.bits.len();
    }
    if total == 0 {
        1.0
    } else {
        zeros as f64 / total as f64
    }
}

/// `|S₁ ∩ S₂| / |S₁ ∪ S₂|`, zero when both supports are empty.
pub fn jaccard_overlap(m1: &SupportMask, m2: &SupportMask) -> Result<f64> {
    if m1.shape != m2.shape {
        return Err(Error::Dimension(format!(
            "mask shapes {:?} and {:?} differ",
            m1.shape, m2.shape
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in m1.bits.iter().zip(&m2.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Mean overlap of task `t` (one-based) with every earlier task, within
/// one layer. `masks[i]` belongs to task `i + 1`.
pub fn mean_prior_overlap(masks: &[&SupportMask], t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::NotApplicable(format!("task {t} has no prior tasks")));
    }
    if t > masks.len() {
        return Err(Error::Range(format!("task {t} beyond {} masks", masks.len())));
    }
    let cur = masks[t - 1];
    let mut sum = 0.0;
    for prev in &masks[..t - 1] {
        sum += jaccard_overlap(cur, prev)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// Mean Jaccard over all unordered task pairs, within one layer.
pub fn mean_pairwise_jaccard(masks: &[&SupportMask]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            sum += jaccard_overlap(masks[i], masks[j])?;
            pairs += 1;
        }
    }
    Ok((pairs > 0).then(|| sum / pairs as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> SupportMask {
        SupportMask::new(
            LayerId::query(0),
            0,
            vec![bits.len()],
            bits.iter().map(|&b| b == 1).collect(),
        )
        .unwrap()
    }

    fn indices(n: usize, on: &[usize]) -> SupportMask {
        let mut bits = vec![0u8; n];
        for &i in on {
            bits[i] = 1;
        }
        mask(&bits)
    }

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let n = rows[0].len();
        let mut m = AccuracyMatrix::new(n);
        for (r, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if r == 0 || c < r {
                    m.set(r, c, v).unwrap();
                }
            }
        }
        m
    }

    #[test]
    fn overall_accuracy_examples() {
        let m = matrix(&[&[0.5, 0.5], &[1.0, 0.0], &[0.8, 0.6]]);
        assert!((overall_accuracy(&m).unwrap() - 0.7).abs() < 1e-15);
        let one = matrix(&[&[0.3], &[0.9]]);
        assert_eq!(overall_accuracy(&one).unwrap(), 0.9);
        assert!(matches!(
            overall_accuracy(&AccuracyMatrix::new(2)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn backward_transfer_examples() {
        let m = matrix(&[&[0.0, 0.0], &[0.9, 0.0], &[0.7, 0.5]]);
        assert!((backward_transfer(&m).unwrap() + 0.2).abs() < 1e-12);
        let flat = matrix(&[&[0.0, 0.0], &[0.6, 0.0], &[0.6, 0.4]]);
        assert_eq!(backward_transfer(&flat).unwrap(), 0.0);
        let better = matrix(&[&[0.0, 0.0], &[0.5, 0.0], &[0.7, 0.4]]);
        assert!(backward_transfer(&better).unwrap() > 0.0);
        let single = matrix(&[&[0.5], &[0.5]]);
        assert!(matches!(backward_transfer(&single), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn forward_transfer_examples() {
        let m = matrix(&[&[0.5, 0.5], &[0.6, 0.0], &[0.0, 0.2]]);
        assert!((forward_transfer(&m).unwrap() + 0.1).abs() < 1e-12);
        let same = matrix(&[&[0.4, 0.7], &[0.4, 0.0], &[0.1, 0.7]]);
        assert_eq!(forward_transfer(&same).unwrap(), 0.0);
        let single = matrix(&[&[0.25], &[0.75]]);
        assert_eq!(forward_transfer(&single).unwrap(), 0.5);
        let mut no_iso = AccuracyMatrix::new(1);
        no_iso.set(1, 0, 0.5).unwrap();
        assert!(matches!(forward_transfer(&no_iso), Err(Error::State(_))));
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(&mask(&[0, 0, 0])), 1.0);
        assert_eq!(sparsity(&mask(&[1, 1])), 0.0);
        assert_eq!(sparsity(&mask(&[0, 1, 0, 1, 1, 1, 0, 1, 1, 1])), 0.3);
    }

    #[test]
    fn jaccard_examples() {
        let a = indices(6, &[1, 2, 3]);
        assert_eq!(jaccard_overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard_overlap(&a, &indices(6, &[3, 4])).unwrap(), 0.25);
        assert_eq!(jaccard_overlap(&a, &indices(6, &[0, 5])).unwrap(), 0.0);
        assert_eq!(jaccard_overlap(&indices(6, &[]), &indices(6, &[])).unwrap(), 0.0);
        assert!(matches!(
            jaccard_overlap(&a, &indices(5, &[])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mean_prior_overlap_examples() {
        let d = [indices(6, &[0]), indices(6, &[1]), indices(6, &[2])];
        let refs: Vec<&SupportMask> = d.iter().collect();
        assert_eq!(mean_prior_overlap(&refs, 3).unwrap(), 0.0);
        assert!(matches!(mean_prior_overlap(&refs, 1), Err(Error::NotApplicable(_))));

        let same = [indices(4, &[1, 2]), indices(4, &[1, 2])];
        let refs: Vec<&SupportMask> = same.iter().collect();
        assert_eq!(mean_prior_overlap(&refs, 2).unwrap(), 1.0);

        // Overlaps with task 3 are 1/5 and 2/5.
        let m1 = indices(10, &[0, 5, 6]);
        let m2 = indices(10, &[0, 1, 8, 9]);
        let m3 = indices(10, &[0, 1, 2]);
        assert_eq!(jaccard_overlap(&m3, &m1).unwrap(), 0.2);
        assert_eq!(jaccard_overlap(&m3, &m2).unwrap(), 0.4);
        assert!((mean_prior_overlap(&[&m1, &m2, &m3], 3).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn pairwise_mean() {
        let a = indices(4, &[0, 1]);
        let b = indices(4, &[1, 2]);
        let c = indices(4, &[3]);
        let v = mean_pairwise_jaccard(&[&a, &b, &c]).unwrap().unwrap();
        assert!((v - (1.0 / 3.0) / 3.0).abs() < 1e-15);
        assert_eq!(mean_pairwise_jaccard(&[&a]).unwrap(), None);
    }

    #[test]
    fn non_binary_tensor_rejected() {
        let t = Tensor::new(vec![2], vec![0.0f32, 0.5]).unwrap();
        assert!(SupportMask::from_tensor(LayerId::query(0), 0, &t).is_err());
    }
}
