//! Label-smoothed cross-entropy and negative class subsampling.
//!
//! Per sample, with `p = softmax(z)` over the sample's class universe of size
//! `K'` and target `t`:
//!
//! `loss = (1 - ε) * (-log p_t) + ε * mean_k(-log p_k)`
//!
//! and the batch loss is the mean over samples. The universe is all `K`
//! classes, or a per-row subset when negatives are subsampled (softmax is
//! renormalized over the subset and `K' = |subset|`).

use serde::{Deserialize, Serialize};

use crate::error::{HebaError, Result};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub epsilon: f64,
    /// Sampled non-target classes per sample; 0 disables subsampling.
    pub negative_ratio: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.1,
            negative_ratio: 5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(HebaError::InvalidConfig(format!(
            "epsilon {eps} not in [0, 1)"
        )));
    }
    Ok(())
}

fn validate(
    shape: &[usize],
    targets: &[usize],
    subsets: Option<&[Vec<usize>]>,
) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(HebaError::InvalidShape {
            op: "lsce_loss",
            detail: format!("logits must be [B,K], got {shape:?}"),
        });
    }
    let (b, k) = (shape[0], shape[1]);
    if targets.len() != b {
        return Err(HebaError::ShapeMismatch {
            op: "lsce_loss",
            lhs: vec![b],
            rhs: vec![targets.len()],
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(HebaError::IndexOutOfRange {
            what: "target class",
            index: t,
            limit: k,
        });
    }
    if let Some(s) = subsets {
        if s.len() != b {
            return Err(HebaError::ShapeMismatch {
                op: "lsce_loss subsets",
                lhs: vec![b],
                rhs: vec![s.len()],
            });
        }
        for (row, cls) in s.iter().enumerate() {
            if let Some(&c) = cls.iter().find(|&&c| c >= k) {
                return Err(HebaError::IndexOutOfRange {
                    what: "subset class",
                    index: c,
                    limit: k,
                });
            }
            if !cls.contains(&targets[row]) {
                return Err(HebaError::Invariant(format!(
                    "subset for row {row} does not contain its target {}",
                    targets[row]
                )));
            }
        }
    }
    Ok((b, k))
}

/// Loss value and `d loss / d logits` (already divided by `B`).
fn lsce_forward_backward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    eps: T,
    subsets: Option<&[Vec<usize>]>,
) -> (T, Vec<T>) {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let full: Vec<usize> = (0..k).collect();
    let one = T::one();
    let inv_b = one / T::of(b as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); b * k];
    for row in 0..b {
        let z = &logits.data()[row * k..(row + 1) * k];
        let cls: &[usize] = match subsets {
            Some(s) => &s[row],
            None => &full,
        };
        let zs: Vec<T> = cls.iter().map(|&c| z[c]).collect();
        let lse = log_sum_exp(&zs);
        let kp = T::of(cls.len() as f64);
        let mut ce = T::zero();
        let mut smooth = T::zero();
        for (&c, &zc) in cls.iter().zip(&zs) {
            let nlp = lse - zc;
            smooth = smooth + nlp;
            if c == targets[row] {
                ce = nlp;
            }
        }
        smooth = smooth / kp;
        total = total + (one - eps) * ce + eps * smooth;
        for (&c, &zc) in cls.iter().zip(&zs) {
            let p = (zc - lse).exp();
            let hit = if c == targets[row] {
                one - eps
            } else {
                T::zero()
            };
            grad[row * k + c] = (p - hit - eps / kp) * inv_b;
        }
    }
    (total * inv_b, grad)
}

/// Label-smoothed cross-entropy as a fused graph op. Returns a `[1]` node.
pub fn lsce_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    epsilon: f64,
    subsets: Option<&[Vec<usize>]>,
) -> Result<Var> {
    check_epsilon(epsilon)?;
    validate(g.shape(logits), targets, subsets)?;
    let (value, grad) = lsce_forward_backward(g.value(logits), targets, T::of(epsilon), subsets);
    Ok(g.custom(
        "lsce",
        &[logits],
        Tensor::scalar(value),
        Box::new(move |_, _, up| vec![Some(grad.iter().map(|&v| v * up[0]).collect())]),
    ))
}

/// Loss value without building a graph.
pub fn lsce_value<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    epsilon: f64,
    subsets: Option<&[Vec<usize>]>,
) -> Result<T> {
    check_epsilon(epsilon)?;
    validate(logits.shape(), targets, subsets)?;
    Ok(lsce_forward_backward(logits, targets, T::of(epsilon), subsets).0)
}

/// The target plus `ratio` distinct non-target classes drawn uniformly from
/// `0..k`, returned in ascending class order.
pub fn subsample_negatives(
    k: usize,
    target: usize,
    ratio: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if target >= k {
        return Err(HebaError::IndexOutOfRange {
            what: "target class",
            index: target,
            limit: k,
        });
    }
    if ratio > k - 1 {
        return Err(HebaError::InvalidConfig(format!(
            "negative ratio {ratio} exceeds {} available negatives",
            k - 1
        )));
    }
    let mut pool: Vec<usize> = (0..k).filter(|&c| c != target).collect();
    // Partial Fisher–Yates: the first `ratio` slots become the sample.
    for i in 0..ratio {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    let mut out = pool[..ratio].to_vec();
    out.push(target);
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn worked_two_class_example() {
        let l = lsce_value(&t(&[1, 2], &[2.0, 0.0]), &[0], 0.1, None).unwrap();
        assert!((l - 0.226928).abs() < 1e-5, "{l}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let z = t(&[1, 2], &[0.0, 0.0]);
        assert!(matches!(
            lsce_value(&z, &[2], 0.1, None),
            Err(HebaError::IndexOutOfRange { .. })
        ));
        assert!(lsce_value(&z, &[0], 1.0, None).is_err());
        assert!(lsce_value(&z, &[0], -0.1, None).is_err());
        assert!(lsce_value(&z, &[0, 1], 0.1, None).is_err());
        let bad_subset = vec![vec![1]];
        assert!(lsce_value(&z, &[0], 0.1, Some(&bad_subset)).is_err());
    }

    #[test]
    fn graph_op_matches_value_and_grad_sums_to_zero() {
        let z = t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, -0.5]);
        let mut g = Graph::<f64>::new();
        let v = g.param(z.clone());
        let l = lsce_loss(&mut g, v, &[2, 0], 0.1, None).unwrap();
        assert_eq!(
            g.value(l).data()[0],
            lsce_value(&z, &[2, 0], 0.1, None).unwrap()
        );
        let gr = g.backward(l).unwrap();
        let d = gr.get(v).unwrap().data();
        for row in d.chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn subset_excludes_other_columns_from_gradient() {
        let z = t(&[1, 4], &[0.1, 0.2, 0.3, 0.4]);
        let subsets = vec![vec![1, 3]];
        let mut g = Graph::<f64>::new();
        let v = g.param(z);
        let l = lsce_loss(&mut g, v, &[3], 0.1, Some(&subsets)).unwrap();
        let gr = g.backward(l).unwrap();
        let d = gr.get(v).unwrap().data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[2], 0.0);
        assert!(d[1] != 0.0 && d[3] != 0.0);
    }

    #[test]
    fn subsample_degenerate_cases() {
        let mut r = Rng::new(0);
        assert_eq!(subsample_negatives(10, 4, 0, &mut r).unwrap(), vec![4]);
        assert_eq!(
            subsample_negatives(10, 4, 9, &mut r).unwrap(),
            (0..10).collect::<Vec<_>>()
        );
        assert!(subsample_negatives(10, 4, 10, &mut r).is_err());
        assert!(subsample_negatives(10, 10, 1, &mut r).is_err());
    }
}
