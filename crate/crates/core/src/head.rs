//! Additive head: layer-wise predictions, the summed layer-wise loss and
//! evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::config::TaskKind;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore, RegClass};

/// Adds `head.{m}.weight: [tasks, terms]` (ones) and `head.{m}.bias:
/// [tasks]` (`base`) for every layer.
pub fn init_head(params: &mut ParamStore, layers: usize, tasks: usize, terms: usize, base: f64) {
    for m in 0..layers {
        params.insert(format!("head.{m}.weight"), Tensor::full(&[tasks, terms], 1.0), RegClass::WeightDecay);
        params.insert(format!("head.{m}.bias"), Tensor::full(&[tasks], base), RegClass::None);
    }
}

/// Pre-link scores `ŷ′_m = w0[m][u] + Σ_i w[m][u][i]·f′_im` for every
/// layer. `terms[m]` is `[terms, batch]`; `groups[r]` picks the task row.
pub fn predict_layerwise(
    tape: &mut Tape,
    bound: &Bound,
    terms: &[Var],
    groups: &[usize],
) -> Result<Vec<Var>> {
    terms
        .iter()
        .enumerate()
        .map(|(m, &f)| {
            let weight = bound.get(&format!("head.{m}.weight"));
            let bias = bound.get(&format!("head.{m}.bias"));
            let tasks = tape.shape(weight)[0];
            if let Some(&g) = groups.iter().find(|&&g| g >= tasks) {
                return Err(Error::UnknownGroup { label: g, tasks });
            }
            let ft = tape.transpose(f)?;
            let w = tape.gather_rows(weight, groups)?;
            let prod = tape.mul(ft, w)?;
            let s = tape.sum_axis(prod, 1)?;
            let b = tape.gather_rows(bias, groups)?;
            tape.add(s, b)
        })
        .collect()
}

/// Loss for one layer's scores.
pub fn layer_loss(tape: &mut Tape, task: TaskKind, scores: Var, targets: &[f64]) -> Result<Var> {
    match task {
        TaskKind::Regression => {
            let y = tape.constant(Tensor::vector(targets.to_vec()));
            let d = tape.sub(scores, y)?;
            let sq = tape.square(d);
            Ok(tape.mean(sq))
        }
        TaskKind::Classification => {
            check_binary(targets)?;
            tape.bce_with_logits(scores, targets)
        }
    }
}

pub fn check_binary(targets: &[f64]) -> Result<()> {
    match targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(&y) => Err(Error::InvalidTarget(y)),
        None => Ok(()),
    }
}

/// `Σ_m L(y, ŷ′_m) + λ·mean(f′_d²)`. With `hierarchical` false only the
/// last layer's score enters.
pub fn hierarchical_loss(
    tape: &mut Tape,
    task: TaskKind,
    scores: &[Var],
    targets: &[f64],
    hierarchical: bool,
    final_terms: Option<Var>,
    output_penalty: f64,
) -> Result<Var> {
    let first = if hierarchical { 0 } else { scores.len() - 1 };
    let mut total: Option<Var> = None;
    for &s in &scores[first..] {
        let l = layer_loss(tape, task, s, targets)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let mut total = total.expect("at least one layer");
    if let (Some(f), true) = (final_terms, output_penalty > 0.0) {
        let sq = tape.square(f);
        let m = tape.mean(sq);
        let p = tape.scale(m, output_penalty);
        total = tape.add(total, p)?;
    }
    Ok(total)
}

/// Applies the output link to a pre-link score.
pub fn link(task: TaskKind, score: f64) -> f64 {
    match task {
        TaskKind::Regression => score,
        TaskKind::Classification => sigmoid(score),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Auc,
}

impl Metric {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Regression => Metric::Rmse,
            TaskKind::Classification => Metric::Auc,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Metric::Auc
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Auc => "auc",
        }
    }

    pub fn evaluate(self, predictions: &[f64], targets: &[f64]) -> Result<f64> {
        match self {
            Metric::Rmse => rmse(predictions, targets),
            Metric::Auc => auc(predictions, targets),
        }
    }
}

fn check_lengths(predictions: &[f64], targets: &[f64]) -> Result<()> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::MetricInput {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    Ok(())
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    let sse: f64 = predictions.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// Area under the ROC curve from the Mann-Whitney rank statistic; tied
/// scores share their mid rank.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    check_binary(labels)?;
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64 * mid;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Aggregated metric as emitted by cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub value: f64,
    pub std: f64,
    pub folds: Vec<f64>,
}

impl MetricSummary {
    pub fn from_folds(metric: Metric, folds: Vec<f64>) -> Self {
        let (value, std) = mean_std(&folds);
        MetricSummary { metric, value, std, folds }
    }
}
