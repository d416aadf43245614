//! Sampling distributions over replay indices.
//!
//! Everything here manipulates explicit probability vectors: priority
//! transforms into distributions, importance weights that undo the induced
//! bias, the gradient-norm-proportional distribution that minimizes update
//! variance, and a sum tree for O(log n) proportional index draws.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::kahan_sum;

/// Tolerance for the sum-to-one invariant of [`Distribution`].
pub const SUM_TOLERANCE: f64 = 1e-12;

/// A validated probability vector: entries are finite, non-negative, and
/// sum to one within [`SUM_TOLERANCE`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validate and wrap an explicit probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    context: "distribution entry",
                    value: p,
                });
            }
            if p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "negative probability {p} at index {i}"
                )));
            }
        }
        let total = kahan_sum(probs.iter().copied());
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "sum {total} deviates from 1 by more than {SUM_TOLERANCE}"
            )));
        }
        Ok(Distribution { probs })
    }

    /// Uniform distribution over `n` indices.
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution needs n > 0");
        Distribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Normalize non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        for &w in weights {
            if !w.is_finite() {
                return Err(Error::NonFinite {
                    context: "weight",
                    value: w,
                });
            }
            if w < 0.0 {
                return Err(Error::InvalidDistribution(format!("negative weight {w}")));
            }
        }
        let total = kahan_sum(weights.iter().copied());
        if total <= 0.0 {
            return Err(Error::AllZero(weights.len()));
        }
        let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        // The largest entry absorbs the rounding residual so the
        // sum-to-one invariant holds exactly at any length.
        let residual = kahan_sum(probs.iter().copied()) - 1.0;
        if residual != 0.0 {
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            probs[argmax] -= residual;
        }
        Ok(Distribution { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Inverse-CDF lookup: the first index whose cumulative probability
    /// exceeds `u`. For `u` at or beyond the accumulated total (possible
    /// through rounding) the last positive-probability index is returned.
    pub fn index_for(&self, u: f64) -> usize {
        debug_assert!((0.0..=1.0 + 1e-9).contains(&u));
        let mut cum = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            cum += p;
            if u < cum && p > 0.0 {
                return i;
            }
        }
        self.probs
            .iter()
            .rposition(|&p| p > 0.0)
            .expect("distribution has positive mass")
    }
}

/// Raw priorities plus the transform parameters that turn them into
/// sampling probabilities: p_i proportional to (value_i + floor)^alpha.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorityVector {
    pub values: Vec<f64>,
    /// Exponent in [0, 1]; 0 recovers uniform, 1 is fully proportional.
    pub alpha: f64,
    /// Additive constant keeping zero-priority entries sampleable.
    pub floor: f64,
}

impl PriorityVector {
    pub fn new(values: Vec<f64>, alpha: f64, floor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!(
                "priority exponent {alpha} outside [0, 1]"
            )));
        }
        if !floor.is_finite() || floor < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "priority floor {floor} must be finite and non-negative"
            )));
        }
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "priority value",
                    value: v,
                });
            }
            if v < 0.0 {
                return Err(Error::NegativePriority(v));
            }
        }
        Ok(PriorityVector {
            values,
            alpha,
            floor,
        })
    }
}

/// Per-index importance weights w_i = (1 / (n p_i))^beta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub beta: f64,
}

/// Transform raw priorities into a sampling distribution,
/// p_i = (v_i + floor)^alpha / sum_j (v_j + floor)^alpha.
pub fn normalize_priorities(pv: &PriorityVector) -> Result<Distribution> {
    let transformed: Vec<f64> = pv
        .values
        .iter()
        .map(|&v| (v + pv.floor).powf(pv.alpha))
        .collect();
    Distribution::from_weights(&transformed)
}

/// Importance weights that correct the bias of sampling from `p` instead of
/// uniformly: w_i = (1 / (n p_i))^beta. Every index must have positive
/// probability; with beta = 1 the weighted mean of any quantity under `p`
/// equals its plain average.
pub fn importance_weights(p: &Distribution, beta: f64) -> Result<WeightVector> {
    let n = p.len() as f64;
    let mut weights = Vec::with_capacity(p.len());
    for (i, &pi) in p.probs().iter().enumerate() {
        if pi <= 0.0 {
            return Err(Error::ZeroProbability(i));
        }
        weights.push((1.0 / (n * pi)).powf(beta));
    }
    Ok(WeightVector { weights, beta })
}

/// The sampling distribution minimizing the expected squared norm of the
/// bias-corrected gradient estimate: p_i proportional to the per-sample
/// gradient norm g_i.
pub fn optimal_distribution(grad_norms: &[f64]) -> Result<Distribution> {
    for &g in grad_norms {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: "gradient norm",
                value: g,
            });
        }
        if g < 0.0 {
            return Err(Error::NegativePriority(g));
        }
    }
    Distribution::from_weights(grad_norms)
}

/// E_p[G^T G] for the single-sample estimator G = (1 / (n p_i)) grad_i with
/// per-sample gradient norms `grad_norms`:
///
///   E_p[G^T G] = (1/n^2) * sum_i g_i^2 / p_i,
///
/// where indices with g_i = 0 contribute nothing regardless of p_i.
pub fn expected_squared_norm(p: &Distribution, grad_norms: &[f64]) -> Result<f64> {
    if p.len() != grad_norms.len() {
        return Err(Error::LengthMismatch {
            context: "expected_squared_norm",
            left: p.len(),
            right: grad_norms.len(),
        });
    }
    let n = p.len() as f64;
    let mut terms = Vec::with_capacity(p.len());
    for (i, (&pi, &gi)) in p.probs().iter().zip(grad_norms).enumerate() {
        if gi == 0.0 {
            continue;
        }
        if !gi.is_finite() {
            return Err(Error::NonFinite {
                context: "gradient norm",
                value: gi,
            });
        }
        if pi <= 0.0 {
            return Err(Error::ZeroProbability(i));
        }
        terms.push(gi * gi / pi);
    }
    Ok(kahan_sum(terms) / (n * n))
}

/// Total variation distance in its unnormalized form,
/// sum_i |p_i - q_i|, ranging over [0, 2].
pub fn total_variation(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            context: "total_variation",
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(kahan_sum(
        p.probs()
            .iter()
            .zip(q.probs())
            .map(|(&a, &b)| (a - b).abs()),
    ))
}

/// Number of leaf updates between exact internal rebuilds.
const REBUILD_PERIOD: u64 = 1 << 16;

/// Binary indexed sum tree over a fixed set of leaves, supporting O(log n)
/// priority updates and O(log n) sampling proportional to leaf values.
///
/// The leaf count is rounded up to a power of two; padding leaves stay at
/// zero and are never sampled. Internal nodes are recomputed bottom-up
/// along the updated path, so each parent is always the exact floating-point
/// sum of its children; a periodic full rebuild additionally re-derives all
/// internal nodes from the leaves.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SumTree {
    /// Power-of-two leaf count.
    capacity: usize,
    /// Number of addressable leaves (as requested at construction).
    len: usize,
    /// Flat heap layout: root at 0, leaves at capacity-1 .. 2*capacity-2.
    nodes: Vec<f64>,
    sets_since_rebuild: u64,
}

impl SumTree {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "sum tree needs at least one leaf");
        let capacity = len.next_power_of_two();
        SumTree {
            capacity,
            len,
            nodes: vec![0.0; 2 * capacity - 1],
            sets_since_rebuild: 0,
        }
    }

    /// Addressable leaf count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Power-of-two internal leaf count (>= len).
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total priority mass (the root).
    pub fn total(&self) -> f64 {
        self.nodes[0]
    }

    pub fn leaf(&self, index: usize) -> Result<f64> {
        if index >= self.len {
            return Err(Error::OutOfRange {
                context: "sum tree leaf",
                index,
                len: self.len,
            });
        }
        Ok(self.nodes[self.capacity - 1 + index])
    }

    /// Set leaf `index` to `priority` and restore the sum invariant along
    /// the path to the root.
    pub fn set(&mut self, index: usize, priority: f64) -> Result<()> {
        if index >= self.len {
            return Err(Error::OutOfRange {
                context: "sum tree leaf",
                index,
                len: self.len,
            });
        }
        if !priority.is_finite() {
            return Err(Error::NonFinite {
                context: "sum tree priority",
                value: priority,
            });
        }
        if priority < 0.0 {
            return Err(Error::NegativePriority(priority));
        }
        let mut pos = self.capacity - 1 + index;
        self.nodes[pos] = priority;
        while pos > 0 {
            pos = (pos - 1) / 2;
            self.nodes[pos] = self.nodes[2 * pos + 1] + self.nodes[2 * pos + 2];
        }
        self.sets_since_rebuild += 1;
        if self.sets_since_rebuild >= REBUILD_PERIOD {
            self.rebuild();
        }
        Ok(())
    }

    /// Recompute every internal node from the leaves.
    pub fn rebuild(&mut self) {
        for pos in (0..self.capacity - 1).rev() {
            self.nodes[pos] = self.nodes[2 * pos + 1] + self.nodes[2 * pos + 2];
        }
        self.sets_since_rebuild = 0;
    }

    /// Index of the leaf owning prefix position `u`, i.e. the first leaf
    /// whose cumulative priority exceeds `u`. Requires `0 <= u`; values at
    /// or beyond the total land on the last positive leaf. The returned
    /// leaf always has positive priority.
    pub fn prefix_search(&self, u: f64) -> Result<usize> {
        if self.total() <= 0.0 {
            return Err(Error::EmptyTree);
        }
        assert!(u >= 0.0 && u.is_finite(), "prefix position must be >= 0");
        let mut u = u;
        let mut pos = 0;
        while pos < self.capacity - 1 {
            let left = 2 * pos + 1;
            let right = left + 1;
            // Descending into an exhausted right subtree would strand the
            // search on a zero leaf, hence the mass check.
            if u < self.nodes[left] || self.nodes[right] <= 0.0 {
                pos = left;
            } else {
                u -= self.nodes[left];
                pos = right;
            }
        }
        Ok(pos - (self.capacity - 1))
    }

    /// Draw one leaf index with probability proportional to its priority.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<usize> {
        let total = self.total();
        if total <= 0.0 {
            return Err(Error::EmptyTree);
        }
        self.prefix_search(rng.gen::<f64>() * total)
    }
}

/// Draw `batch` i.i.d. indices (with replacement) from `p` by inverse-CDF
/// lookup. Feeding the same uniforms to [`SumTree::prefix_search`] over
/// leaves equal to `p` selects the same indices.
pub fn sample_indices<R: Rng>(p: &Distribution, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| p.index_for(rng.gen::<f64>())).collect()
}
