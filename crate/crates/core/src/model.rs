//! Complete additive models: encoders, term predictors and the head.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{ModelKind, Normalization, TaskKind, TrainConfig};
use crate::data::EncodedData;
use crate::encoder::{self, EncoderSpec, NormStats, Pass};
use crate::error::{Error, Result};
use crate::head;
use crate::interactions::{self, Route};
use crate::params::{Bound, ParamStore};
use crate::proto::SigmaSchedule;

/// Rows evaluated per tape during inference.
pub const INFERENCE_CHUNK: usize = 2048;

/// Structural description of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub task: TaskKind,
    pub features: usize,
    pub tasks: usize,
    pub layers: usize,
    pub hidden: usize,
    pub predictor_layers: usize,
    pub prototypes: usize,
    pub normalization: Normalization,
    pub use_prototypes: bool,
    pub dropout: f64,
    pub dropout_output: f64,
    pub tau: f64,
    pub t_max: usize,
    /// Feature index set of every additive term.
    pub terms: Vec<Vec<usize>>,
}

impl Architecture {
    pub fn from_config(cfg: &TrainConfig, features: usize, tasks: usize) -> Result<Self> {
        cfg.validate()?;
        if features == 0 {
            return Err(Error::Config("model needs at least one feature".into()));
        }
        let terms = match cfg.model_kind {
            ModelKind::Protonam => (0..features).map(|i| vec![i]).collect(),
            ModelKind::Protona2m => {
                if features < 2 {
                    return Err(Error::Config("pairwise model needs at least two features".into()));
                }
                match &cfg.interactions {
                    Some(sets) => interactions::validate_sets(sets, features, 2)?,
                    None => interactions::index_sets(features, 2),
                }
            }
            ModelKind::Protonanm => vec![(0..features).collect()],
        };
        Ok(Architecture {
            kind: cfg.model_kind,
            task: cfg.task,
            features,
            tasks,
            layers: cfg.layers,
            hidden: cfg.hidden_dim,
            predictor_layers: cfg.predictor_layers,
            prototypes: cfg.prototypes,
            normalization: cfg.normalization,
            use_prototypes: cfg.use_prototypes,
            dropout: cfg.dropout,
            dropout_output: cfg.dropout_output,
            tau: cfg.tau,
            t_max: cfg.max_iteration,
            terms,
        })
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            features: self.features,
            layers: self.layers,
            hidden: self.hidden,
            use_prototypes: self.use_prototypes,
        }
    }

    pub fn schedule(&self) -> SigmaSchedule {
        SigmaSchedule::new(self.t_max, self.tau)
    }

    pub fn is_interaction(&self) -> bool {
        self.kind != ModelKind::Protonam
    }

    pub fn term_index(&self, set: &[usize]) -> Option<usize> {
        let mut s = set.to_vec();
        s.sort_unstable();
        self.terms.iter().position(|t| *t == s)
    }
}

/// Mini-batch in model layout.
pub struct Batch {
    /// `[features, rows]`.
    pub x: Tensor,
    pub targets: Vec<f64>,
    pub groups: Vec<usize>,
}

impl Batch {
    pub fn gather(data: &EncodedData, rows: &[usize]) -> Self {
        let mut x = Vec::with_capacity(data.n_features() * rows.len());
        for col in &data.features {
            x.extend(rows.iter().map(|&r| col[r]));
        }
        Batch {
            x: Tensor::new(vec![data.n_features(), rows.len()], x),
            targets: rows.iter().map(|&r| data.targets[r]).collect(),
            groups: rows.iter().map(|&r| data.groups[r]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    /// Embeddings `v_m`, `[features, batch, hidden]`.
    pub embeddings: Vec<Var>,
    /// Per-layer term increments `h_m`, `[terms, batch]`.
    pub increments: Vec<Var>,
    /// Cumulative term outputs `f′_m`, `[terms, batch]`.
    pub cumulative: Vec<Var>,
    /// Pre-link layer scores `ŷ′_m`, `[batch]`.
    pub scores: Vec<Var>,
    /// Batch-normalization statistics from a training pass.
    pub batch_stats: Vec<(String, crate::autodiff::BatchStats)>,
}

/// Options of one forward pass.
pub struct PassOptions<'a> {
    pub train: bool,
    pub iteration: usize,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub route: Route,
}

impl PassOptions<'_> {
    pub fn inference(iteration: usize) -> Self {
        PassOptions {
            train: false,
            iteration,
            rng: None,
            route: Route::Projected,
        }
    }
}

/// Values of a forward pass over a full dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    /// `increments[m][term][row]`.
    pub increments: Vec<Vec<Vec<f64>>>,
    /// `cumulative[m][term][row]`.
    pub cumulative: Vec<Vec<Vec<f64>>>,
    /// `scores[m][row]`, pre-link.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
    pub norm_stats: BTreeMap<String, NormStats>,
    /// Optimizer steps taken; fixes the localization width at inference.
    pub iteration: usize,
}

impl Model {
    /// Fresh model. `columns` are the normalized training features (for
    /// prototype placement) and `base` the initial head bias.
    pub fn new(arch: Architecture, columns: &[Vec<f64>], base: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if columns.len() != arch.features {
            return Err(Error::Config(format!(
                "model expects {} feature columns, got {}",
                arch.features,
                columns.len()
            )));
        }
        let mut params = ParamStore::new();
        let mut norm_stats = BTreeMap::new();
        let spec = arch.encoder_spec();
        encoder::init_encoders(&spec, arch.prototypes, columns, &mut params, &mut norm_stats, rng);
        if arch.is_interaction() {
            interactions::init_conditional(arch.features, arch.hidden, arch.layers, arch.predictor_layers, &mut params, rng);
        } else {
            encoder::init_predictors(&spec, arch.predictor_layers, &mut params, rng);
        }
        head::init_head(&mut params, arch.layers, arch.tasks, arch.terms.len(), base);
        Ok(Model {
            arch,
            params,
            norm_stats,
            iteration: 0,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.arch.schedule().sigma(self.iteration)
    }

    /// Builds the full graph for `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, opts: PassOptions) -> Result<Forward> {
        if batch.x.shape()[0] != self.arch.features {
            return Err(Error::Shape {
                op: "model-forward",
                lhs: batch.x.shape().to_vec(),
                rhs: vec![self.arch.features],
            });
        }
        let mut pass = Pass {
            train: opts.train,
            sigma: self.arch.schedule().sigma(opts.iteration),
            dropout: self.arch.dropout,
            normalization: self.arch.normalization,
            rng: opts.rng,
            norm_stats: &self.norm_stats,
            batch_stats: Vec::new(),
        };
        let x = tape.constant(batch.x.clone());
        let spec = self.arch.encoder_spec();
        let embeddings = encoder::forward_embeddings(tape, bound, &spec, &mut pass, x)?;
        let increments = if self.arch.is_interaction() {
            interactions::conditional_outputs(
                tape,
                bound,
                self.arch.predictor_layers,
                &mut pass,
                &embeddings,
                &self.arch.terms,
                opts.route,
            )?
        } else {
            encoder::predictor_outputs(tape, bound, self.arch.predictor_layers, &mut pass, &embeddings)?
        };
        let cumulative = encoder::cumulative_outputs(tape, &increments)?;
        let head_input = match pass.random_mask(self.arch.terms.len() * batch.len(), self.arch.dropout_output) {
            Some(mask) => cumulative
                .iter()
                .map(|&f| tape.mask_mul(f, mask.clone()))
                .collect::<Result<Vec<_>>>()?,
            None => cumulative.clone(),
        };
        let scores = head::predict_layerwise(tape, bound, &head_input, &batch.groups)?;
        Ok(Forward {
            embeddings,
            increments,
            cumulative,
            scores,
            batch_stats: pass.batch_stats,
        })
    }

    /// Forward pass over `data` in chunks with frozen parameters.
    pub fn outputs(&self, data: &EncodedData) -> Result<Outputs> {
        let (layers, terms) = (self.arch.layers, self.arch.terms.len());
        let mut out = Outputs {
            increments: vec![vec![Vec::with_capacity(data.n_samples()); terms]; layers],
            cumulative: vec![vec![Vec::with_capacity(data.n_samples()); terms]; layers],
            scores: vec![Vec::with_capacity(data.n_samples()); layers],
        };
        let rows: Vec<usize> = (0..data.n_samples()).collect();
        for chunk in rows.chunks(INFERENCE_CHUNK) {
            let batch = Batch::gather(data, chunk);
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let fwd = self.forward(&mut tape, &bound, &batch, PassOptions::inference(self.iteration))?;
            let b = chunk.len();
            for m in 0..layers {
                for (dst, src) in [
                    (&mut out.increments[m], fwd.increments[m]),
                    (&mut out.cumulative[m], fwd.cumulative[m]),
                ] {
                    let d = tape.value(src).data();
                    for (t, row) in dst.iter_mut().enumerate() {
                        row.extend_from_slice(&d[t * b..(t + 1) * b]);
                    }
                }
                out.scores[m].extend_from_slice(tape.value(fwd.scores[m]).data());
            }
        }
        Ok(out)
    }

    /// Final-layer pre-link scores.
    pub fn predict_scores(&self, data: &EncodedData) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(data.n_samples());
        let rows: Vec<usize> = (0..data.n_samples()).collect();
        for chunk in rows.chunks(INFERENCE_CHUNK) {
            let batch = Batch::gather(data, chunk);
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let fwd = self.forward(&mut tape, &bound, &batch, PassOptions::inference(self.iteration))?;
            scores.extend_from_slice(tape.value(*fwd.scores.last().expect("layers")).data());
        }
        Ok(scores)
    }

    /// Predictions after the output link.
    pub fn predict(&self, data: &EncodedData) -> Result<Vec<f64>> {
        let task = self.arch.task;
        Ok(self.predict_scores(data)?.into_iter().map(|s| head::link(task, s)).collect())
    }

    /// Head weight `w[m][task][term]`.
    pub fn head_weight(&self, layer: usize, task: usize, term: usize) -> f64 {
        let w = self.params.get(&format!("head.{layer}.weight")).expect("head weight");
        w.data()[task * self.arch.terms.len() + term]
    }

    pub fn head_bias(&self, layer: usize, task: usize) -> f64 {
        self.params.get(&format!("head.{layer}.bias")).expect("head bias").data()[task]
    }

    /// Rescales every layer's head so scores come out as
    /// `shift + scale·score`.
    pub fn rescale_output(&mut self, shift: f64, scale: f64) {
        for m in 0..self.arch.layers {
            let w = self.params.get_mut(&format!("head.{m}.weight")).expect("head weight");
            w.data_mut().iter_mut().for_each(|v| *v *= scale);
            let b = self.params.get_mut(&format!("head.{m}.bias")).expect("head bias");
            b.data_mut().iter_mut().for_each(|v| *v = shift + scale * *v);
        }
    }

    /// Scalar count of the term predictors (weak or conditional).
    pub fn predictor_size(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("predictor.") || p.name.starts_with("conditional."))
            .map(|p| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests;
