//! Per-feature hierarchical encoders and weak predictors.
//!
//! All features are processed together as channels: every tensor carries a
//! leading feature axis and per-feature weights are stacked along it, so no
//! parameter is shared between features.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, BatchStats, Tape, Tensor, Var};
use crate::config::Normalization;
use crate::error::Result;
use crate::params::{uniform_fan_in, Bound, ParamStore, RegClass};
use crate::proto::PrototypeBank;

/// Running batch-normalization estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl NormStats {
    pub fn new(len: usize) -> Self {
        NormStats {
            mean: vec![0.0; len],
            var: vec![1.0; len],
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Per-forward state: mode, localization width and stochastic parts.
pub struct Pass<'a> {
    pub train: bool,
    pub sigma: f64,
    pub dropout: f64,
    pub normalization: Normalization,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub norm_stats: &'a BTreeMap<String, NormStats>,
    /// Batch statistics gathered in training mode, keyed like `norm_stats`.
    pub batch_stats: Vec<(String, BatchStats)>,
}

impl Pass<'_> {
    pub(crate) fn normalize(&mut self, tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
        let gamma = bound.get(&format!("{name}.gamma"));
        let beta = bound.get(&format!("{name}.beta"));
        match self.normalization {
            Normalization::LayerNorm => tape.layer_norm(x, gamma, beta),
            Normalization::BatchNorm if self.train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, BatchNormMode::Train)?;
                self.batch_stats.push((name.to_string(), stats.expect("training statistics")));
                Ok(y)
            }
            Normalization::BatchNorm => {
                let s = &self.norm_stats[name];
                let (y, _) = tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    BatchNormMode::Inference {
                        mean: &s.mean,
                        var: &s.var,
                    },
                )?;
                Ok(y)
            }
        }
    }

    pub(crate) fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match (&mut self.rng, self.train && self.dropout > 0.0) {
            (Some(rng), true) => tape.dropout(x, self.dropout, *rng),
            _ => Ok(x),
        }
    }

    pub(crate) fn random_mask(&mut self, len: usize, p: f64) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        if !self.train || p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        Some((0..len).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect())
    }
}

/// Shape of the feature encoders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderSpec {
    pub features: usize,
    pub layers: usize,
    pub hidden: usize,
    pub use_prototypes: bool,
}

pub(crate) fn norm_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.gamma"), format!("{prefix}.beta")]
}

pub(crate) fn insert_norm(
    params: &mut ParamStore,
    stats: &mut BTreeMap<String, NormStats>,
    prefix: &str,
    shape: &[usize],
) {
    let [g, b] = norm_names(prefix);
    params.insert(g, Tensor::full(shape, 1.0), RegClass::None);
    params.insert(b, Tensor::zeros(shape), RegClass::None);
    stats.insert(prefix.to_string(), NormStats::new(shape.iter().product()));
}

/// Adds prototype banks and layer blocks. Prototypes start at the
/// quantiles of the normalized training columns.
pub fn init_encoders(
    spec: &EncoderSpec,
    prototypes: usize,
    columns: &[Vec<f64>],
    params: &mut ParamStore,
    stats: &mut BTreeMap<String, NormStats>,
    rng: &mut ChaCha8Rng,
) {
    let (c, h) = (spec.features, spec.hidden);
    if spec.use_prototypes {
        let bank = PrototypeBank::from_quantiles(columns, prototypes, spec.layers);
        for m in 0..spec.layers {
            params.insert(format!("proto.{m}.mu"), bank.prototypes[m].clone(), RegClass::None);
            params.insert(format!("proto.{m}.slope"), bank.slopes[m].clone(), RegClass::None);
            params.insert(format!("proto.{m}.intercept"), bank.intercepts[m].clone(), RegClass::None);
        }
    }
    for m in 0..spec.layers {
        let fan_in = if m == 0 { 1 } else { h + 1 };
        params.insert(
            format!("encoder.{m}.weight"),
            uniform_fan_in(rng, &[c, fan_in, h], fan_in),
            RegClass::WeightDecay,
        );
        params.insert(format!("encoder.{m}.bias"), uniform_fan_in(rng, &[c, h], fan_in), RegClass::None);
        insert_norm(params, stats, &format!("encoder.{m}.norm"), &[c, h]);
    }
}

/// Activated inputs `A^m(x)` for layer `m`, shape `[features, batch]`.
pub fn activation(tape: &mut Tape, bound: &Bound, spec: &EncoderSpec, pass: &Pass, x: Var, m: usize) -> Result<Var> {
    if !spec.use_prototypes {
        return Ok(x);
    }
    tape.proto_activate(
        x,
        bound.get(&format!("proto.{m}.mu")),
        bound.get(&format!("proto.{m}.slope")),
        bound.get(&format!("proto.{m}.intercept")),
        pass.sigma,
    )
}

/// Embeddings `v_1..v_d`, each `[features, batch, hidden]`. Layer 1 reads
/// the activated scalar; deeper layers read the previous embedding
/// concatenated with their own activated scalar.
pub fn forward_embeddings(
    tape: &mut Tape,
    bound: &Bound,
    spec: &EncoderSpec,
    pass: &mut Pass,
    x: Var,
) -> Result<Vec<Var>> {
    let (c, b) = (tape.shape(x)[0], tape.shape(x)[1]);
    let mut out: Vec<Var> = Vec::with_capacity(spec.layers);
    for m in 0..spec.layers {
        let a = activation(tape, bound, spec, pass, x, m)?;
        let a = tape.reshape(a, &[c, b, 1])?;
        let input = match out.last() {
            None => a,
            Some(&prev) => tape.concat(&[prev, a], 2)?,
        };
        let z = tape.affine(
            input,
            bound.get(&format!("encoder.{m}.weight")),
            bound.get(&format!("encoder.{m}.bias")),
        )?;
        let z = pass.normalize(tape, bound, &format!("encoder.{m}.norm"), z)?;
        let z = tape.relu(z);
        out.push(pass.dropout(tape, z)?);
    }
    Ok(out)
}

/// Adds weak predictors `h_1..h_d` for main-effect models. The output
/// affine starts at zero.
pub fn init_predictors(
    spec: &EncoderSpec,
    depth: usize,
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) {
    let (c, h) = (spec.features, spec.hidden);
    for m in 0..spec.layers {
        if depth == 2 {
            params.insert(
                format!("predictor.{m}.hidden.weight"),
                uniform_fan_in(rng, &[c, h, h], h),
                RegClass::WeightDecay,
            );
            params.insert(format!("predictor.{m}.hidden.bias"), uniform_fan_in(rng, &[c, h], h), RegClass::None);
        }
        params.insert(format!("predictor.{m}.out.weight"), Tensor::zeros(&[c, h, 1]), RegClass::WeightDecay);
        params.insert(format!("predictor.{m}.out.bias"), Tensor::zeros(&[c, 1]), RegClass::None);
    }
}

/// `h_m(v_m)` for every feature, `[features, batch]`.
pub fn predictor_outputs(
    tape: &mut Tape,
    bound: &Bound,
    depth: usize,
    pass: &mut Pass,
    embeddings: &[Var],
) -> Result<Vec<Var>> {
    embeddings
        .iter()
        .enumerate()
        .map(|(m, &v)| {
            let (c, b) = (tape.shape(v)[0], tape.shape(v)[1]);
            let mut z = v;
            if depth == 2 {
                z = tape.affine(
                    z,
                    bound.get(&format!("predictor.{m}.hidden.weight")),
                    bound.get(&format!("predictor.{m}.hidden.bias")),
                )?;
                z = tape.relu(z);
                z = pass.dropout(tape, z)?;
            }
            let y = tape.affine(
                z,
                bound.get(&format!("predictor.{m}.out.weight")),
                bound.get(&format!("predictor.{m}.out.bias")),
            )?;
            tape.reshape(y, &[c, b])
        })
        .collect()
}

/// Running sums `f′_m = f′_{m−1} + h_m`, accumulated in layer order.
pub fn cumulative_outputs(tape: &mut Tape, increments: &[Var]) -> Result<Vec<Var>> {
    let mut out: Vec<Var> = Vec::with_capacity(increments.len());
    for &h in increments {
        let next = match out.last() {
            None => h,
            Some(&prev) => tape.add(prev, h)?,
        };
        out.push(next);
    }
    Ok(out)
}
