//! Prototype-based locally linear feature activation.
//!
//! Each feature owns, per encoder layer, `t` scalar prototypes with a local
//! linear piece `a·x + b` attached to every prototype. An input is activated
//! by the proximity-weighted mixture of those pieces, where the Gaussian
//! width `σ` anneals from 1 towards 0 over training. Once `σ` is small the
//! activation is the piece of the nearest prototype alone, which lets the
//! downstream network represent jumps at prototype boundaries.

use serde::{Deserialize, Serialize};

use crate::autodiff::{proximity_into, Tensor};

/// Lower bound on the localization width. The raw schedule reaches
/// ~2.7e-14 at the end of training where every Gaussian underflows.
pub const SIGMA_MIN: f64 = 1e-3;

/// Convergence-speed constant used for every dataset.
pub const DEFAULT_TAU: f64 = 16.0;

/// Logistic annealing of the localization width over training iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub tau: f64,
    pub t_max: usize,
    pub sigma_min: f64,
}

impl SigmaSchedule {
    pub fn new(t_max: usize, tau: f64) -> Self {
        SigmaSchedule {
            tau,
            t_max,
            sigma_min: SIGMA_MIN,
        }
    }

    /// `σ(T) = 1 / (1 + exp((T − T_max/2) / τ))`, without the floor.
    pub fn raw(&self, iteration: f64) -> f64 {
        1.0 / (1.0 + ((iteration - self.t_max as f64 / 2.0) / self.tau).exp())
    }

    /// Width used by the model at `iteration`: the raw schedule floored at
    /// `sigma_min`.
    pub fn sigma(&self, iteration: usize) -> f64 {
        self.raw(iteration as f64).max(self.sigma_min)
    }
}

/// Normalized proximity weights of `x` to each prototype at width `sigma`.
/// Sums to one for any `sigma > 0`.
pub fn proximity_weights(x: f64, prototypes: &[f64], sigma: f64) -> Vec<f64> {
    let mut w = vec![0.0; prototypes.len()];
    proximity_into(x, prototypes, 1.0 / (2.0 * sigma * sigma), &mut w);
    w
}

/// Prototype parameters of one feature in one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub prototypes: Vec<f64>,
    pub slopes: Vec<f64>,
    pub intercepts: Vec<f64>,
}

impl PrototypeSet {
    /// Scalar evaluation of the mixture activation.
    pub fn activate(&self, x: f64, sigma: f64) -> f64 {
        proximity_weights(x, &self.prototypes, sigma)
            .iter()
            .zip(self.slopes.iter().zip(&self.intercepts))
            .map(|(w, (a, b))| w * (a * x + b))
            .sum()
    }

    /// Index of the prototype closest to `x` (first on ties).
    pub fn nearest(&self, x: f64) -> usize {
        let mut best = 0;
        for (j, p) in self.prototypes.iter().enumerate() {
            if (x - p).abs() < (x - self.prototypes[best]).abs() {
                best = j;
            }
        }
        best
    }
}

/// All prototype parameters of a model, indexed `[layer][feature]`, each
/// holding `t` prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub layers: usize,
    pub features: usize,
    pub per_feature: usize,
    /// `[layers]` tensors of shape `[features, t]`.
    pub prototypes: Vec<Tensor>,
    pub slopes: Vec<Tensor>,
    pub intercepts: Vec<Tensor>,
}

impl PrototypeBank {
    /// Places `t` prototypes per feature at the empirical quantile levels
    /// `(j + 0.5)/t` of the transformed training columns, identical across
    /// layers, with identity pieces (`a = 1`, `b = 0`).
    ///
    /// `columns[i]` holds every training value of feature `i`.
    pub fn from_quantiles(columns: &[Vec<f64>], t: usize, layers: usize) -> Self {
        let features = columns.len();
        let mut mu = Vec::with_capacity(features * t);
        for col in columns {
            let mut sorted = col.clone();
            sorted.sort_by(f64::total_cmp);
            for j in 0..t {
                mu.push(empirical_quantile(&sorted, (j as f64 + 0.5) / t as f64));
            }
        }
        let proto = Tensor::new(vec![features, t], mu);
        PrototypeBank {
            layers,
            features,
            per_feature: t,
            prototypes: vec![proto; layers],
            slopes: vec![Tensor::full(&[features, t], 1.0); layers],
            intercepts: vec![Tensor::zeros(&[features, t]); layers],
        }
    }

    pub fn set(&self, layer: usize, feature: usize) -> PrototypeSet {
        let t = self.per_feature;
        let row = |x: &Tensor| x.data()[feature * t..(feature + 1) * t].to_vec();
        PrototypeSet {
            prototypes: row(&self.prototypes[layer]),
            slopes: row(&self.slopes[layer]),
            intercepts: row(&self.intercepts[layer]),
        }
    }
}

/// Quantile of sorted data with linear interpolation between order
/// statistics at position `q·(n − 1)`.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
