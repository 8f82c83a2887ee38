//! Shape functions, per-layer decompositions, prototype reports and
//! interaction surfaces.
//!
//! Contributions are on the model's score scale: term `i` contributes
//! `w_{d,u,i}·f′_{d,i}` to task `u`, and layer `m`'s part of it is
//! `w_{d,u,i}·h_{m,i}`, so the layer curves add up to the total. Every
//! curve is shifted by its mean over the training rows of the task.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset, EncodedData, FeatureState, TransformState};
use crate::error::{Error, Result};
use crate::model::Model;

/// Options for [`export_shape`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeOptions {
    /// Uniform points across the observed raw range (at least 2).
    pub grid_size: usize,
    /// Histogram bins over the raw range.
    pub bins: usize,
    /// Also place a grid point at every distinct training value.
    pub include_samples: bool,
}

impl Default for ShapeOptions {
    fn default() -> Self {
        ShapeOptions {
            grid_size: 200,
            bins: 50,
            include_samples: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeExport {
    pub feature: String,
    pub task: usize,
    pub task_label: Option<String>,
    /// Raw-unit grid values (category codes for categorical features).
    pub grid_raw: Vec<f64>,
    /// Category names for categorical features.
    pub grid_labels: Option<Vec<String>>,
    pub grid_norm: Vec<f64>,
    /// Centered curve of every ensemble member.
    pub members: Vec<Vec<f64>>,
    pub contribution_mean: Vec<f64>,
    pub contribution_std: Vec<f64>,
    /// Member-averaged centered curve of every layer.
    pub layers: Vec<Vec<f64>>,
    pub density: Vec<f64>,
    /// Member-averaged centering constant of the total curve.
    pub centering: f64,
    pub layer_centering: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub feature: String,
    pub layer: usize,
    pub index: usize,
    pub prototype_norm: f64,
    pub prototype_raw: Option<f64>,
    pub slope: f64,
    pub intercept_norm: f64,
    pub intercept_raw: Option<f64>,
    /// False when the feature transform is not affine, so raw-unit pieces
    /// are not reported.
    pub raw_affine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub feature_a_raw: f64,
    pub feature_b_raw: f64,
    pub contribution: f64,
    pub contribution_centered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceExport {
    pub features: [String; 2],
    pub points: Vec<SurfacePoint>,
}

fn raw_numeric(data: &Dataset, name: &str, state: &FeatureState) -> Result<Vec<f64>> {
    match data.column(name) {
        Some(Column::Numeric(v)) => Ok(v.clone()),
        Some(Column::Categorical(v)) => {
            let cats = state.categories().unwrap_or(&[]);
            v.iter()
                .map(|s| {
                    cats.binary_search(s).map(|c| c as f64).map_err(|_| Error::UnseenCategory {
                        column: name.to_string(),
                        value: s.clone(),
                    })
                })
                .collect()
        }
        None => Err(Error::MissingColumn(name.to_string())),
    }
}

/// Normalized value of a raw-unit (or category code) grid point.
fn normalize(state: &FeatureState, raw: f64) -> f64 {
    if state.is_categorical() {
        let n = state.categories().map_or(1, <[String]>::len);
        if n > 1 {
            raw / (n - 1) as f64
        } else {
            0.0
        }
    } else {
        state.apply_numeric(raw)
    }
}

fn check_member_shapes(models: &[Model]) -> Result<&Model> {
    let first = models.first().ok_or_else(|| Error::Config("no models to explain".into()))?;
    if models.iter().any(|m| m.arch.terms != first.arch.terms || m.arch.tasks != first.arch.tasks) {
        return Err(Error::Config("ensemble members have different structures".into()));
    }
    Ok(first)
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Grid for feature `i`: uniform raw points, learned prototype locations
/// inside the range and optionally every training value.
fn grid(models: &[Model], state: &FeatureState, feature: usize, raw: &[f64], opts: &ShapeOptions) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if state.is_categorical() {
        let n = state.categories().map_or(0, <[String]>::len);
        return (0..n).map(|c| c as f64).collect();
    }
    let mut points: Vec<f64> = (0..opts.grid_size)
        .map(|k| lo + (hi - lo) * k as f64 / (opts.grid_size - 1) as f64)
        .collect();
    for model in models.iter().filter(|m| m.arch.use_prototypes) {
        let t = model.arch.prototypes;
        for m in 0..model.arch.layers {
            let mu = model.params.get(&format!("proto.{m}.mu")).expect("prototypes");
            points.extend(
                mu.data()[feature * t..(feature + 1) * t]
                    .iter()
                    .map(|&z| state.invert(z.clamp(0.0, 1.0)))
                    .filter(|&x| x >= lo && x <= hi),
            );
        }
    }
    if opts.include_samples {
        points.extend_from_slice(raw);
    }
    sorted_unique(points)
}

/// Normalized histogram of `raw` over `bins` uniform bins, read at each
/// grid point.
fn density(raw: &[f64], grid: &[f64], bins: usize, categorical: bool) -> Vec<f64> {
    let n = raw.len() as f64;
    if categorical {
        return grid
            .iter()
            .map(|&g| raw.iter().filter(|&&x| x == g).count() as f64 / n)
            .collect();
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    if width <= 0.0 {
        return vec![1.0; grid.len()];
    }
    let bin = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
    let mut counts = vec![0usize; bins];
    for &x in raw {
        counts[bin(x)] += 1;
    }
    grid.iter().map(|&g| counts[bin(g)] as f64 / (n * width)).collect()
}

/// Per-layer contributions `w_{d,u,i}·h_{m,i}` of term `term` at the rows
/// of `data`; returns `[layer][row]` and the totals `w_{d,u,i}·f′_{d,i}`.
fn term_contributions(model: &Model, data: &EncodedData, term: usize, task: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let out = model.outputs(data)?;
    let d = model.arch.layers;
    let w = model.head_weight(d - 1, task, term);
    let layers = (0..d)
        .map(|m| out.increments[m][term].iter().map(|h| w * h).collect())
        .collect();
    let total = out.cumulative[d - 1][term].iter().map(|f| w * f).collect();
    Ok((layers, total))
}

/// Encoded rows whose only meaningful column is `feature`.
fn probe(n_features: usize, feature: usize, values: Vec<f64>, task: usize) -> EncodedData {
    let rows = values.len();
    let mut features = vec![vec![0.0; rows]; n_features];
    features[feature] = values;
    EncodedData {
        features,
        targets: vec![0.0; rows],
        groups: vec![task; rows],
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Shape function of `feature` for `task`, averaged over `models`.
/// `train` holds the raw training rows. The grid spans all of them so the
/// curves of different tasks share an axis; centering and density use the
/// task's rows only.
pub fn export_shape(
    models: &[Model],
    transforms: &TransformState,
    train: &Dataset,
    feature: &str,
    task: usize,
    opts: &ShapeOptions,
) -> Result<ShapeExport> {
    let first = check_member_shapes(models)?;
    if first.arch.is_interaction() {
        return Err(Error::Unsupported("shape export needs a main-effect model".into()));
    }
    if opts.grid_size < 2 {
        return Err(Error::Config("grid size must be at least 2".into()));
    }
    if task >= first.arch.tasks {
        return Err(Error::UnknownGroup {
            label: task,
            tasks: first.arch.tasks,
        });
    }
    let i = transforms.feature_index(feature)?;
    let state = &transforms.features[i];
    let encoded = transforms.apply(train)?;
    let rows: Vec<usize> = (0..encoded.n_samples()).filter(|&r| encoded.groups[r] == task).collect();
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let raw_all = raw_numeric(train, feature, state)?;
    let raw: Vec<f64> = rows.iter().map(|&r| raw_all[r]).collect();
    let grid_raw = grid(models, state, i, &raw_all, opts);
    let grid_norm: Vec<f64> = grid_raw.iter().map(|&x| normalize(state, x)).collect();

    let at_grid = probe(first.arch.features, i, grid_norm.clone(), task);
    let at_data = probe(first.arch.features, i, rows.iter().map(|&r| encoded.features[i][r]).collect(), task);
    let d = first.arch.layers;
    let g = grid_raw.len();
    let mut members = Vec::with_capacity(models.len());
    let mut layers = vec![vec![0.0; g]; d];
    let mut centering = 0.0;
    let mut layer_centering = vec![0.0; d];
    for model in models {
        let (grid_layers, grid_total) = term_contributions(model, &at_grid, i, task)?;
        let (data_layers, data_total) = term_contributions(model, &at_data, i, task)?;
        let c = mean(&data_total);
        centering += c / models.len() as f64;
        members.push(grid_total.iter().map(|v| v - c).collect::<Vec<f64>>());
        for m in 0..d {
            let cm = mean(&data_layers[m]);
            layer_centering[m] += cm / models.len() as f64;
            for (acc, v) in layers[m].iter_mut().zip(&grid_layers[m]) {
                *acc += (v - cm) / models.len() as f64;
            }
        }
    }
    let k = members.len() as f64;
    let contribution_mean: Vec<f64> = (0..g).map(|p| members.iter().map(|c| c[p]).sum::<f64>() / k).collect();
    let contribution_std = (0..g)
        .map(|p| {
            if members.len() < 2 {
                return 0.0;
            }
            let mu = contribution_mean[p];
            (members.iter().map(|c| (c[p] - mu).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        })
        .collect();
    Ok(ShapeExport {
        feature: feature.to_string(),
        task,
        task_label: transforms.groups.as_ref().map(|l| l[task].clone()),
        grid_labels: state
            .categories()
            .map(|c| grid_raw.iter().map(|&x| c[x as usize].clone()).collect()),
        density: density(&raw, &grid_raw, opts.bins, state.is_categorical()),
        grid_raw,
        grid_norm,
        members,
        contribution_mean,
        contribution_std,
        layers,
        centering,
        layer_centering,
    })
}

/// Prototype and local activation parameters of every feature and layer.
/// For an affine transform `z = (x − lo)/(hi − lo)`, mapping both input and
/// output of a piece `a·z + b` back to raw units gives
/// `lo + (hi − lo)·(a·z + b) = a·x + b·(hi − lo) + lo·(1 − a)`.
pub fn prototype_report(model: &Model, transforms: &TransformState) -> Result<Vec<PrototypeRecord>> {
    if !model.arch.use_prototypes {
        return Err(Error::Unsupported("model was trained without prototypes".into()));
    }
    let t = model.arch.prototypes;
    let mut out = Vec::new();
    for (i, state) in transforms.features.iter().enumerate() {
        let bounds = state.affine_bounds();
        let invertible = !state.is_categorical();
        for m in 0..model.arch.layers {
            let get = |kind: &str| {
                model.params.get(&format!("proto.{m}.{kind}")).expect("prototype parameter").data()[i * t..(i + 1) * t].to_vec()
            };
            let (mu, slope, intercept) = (get("mu"), get("slope"), get("intercept"));
            for j in 0..t {
                let (a, b) = (slope[j], intercept[j]);
                out.push(PrototypeRecord {
                    feature: state.name.clone(),
                    layer: m + 1,
                    index: j,
                    prototype_norm: mu[j],
                    prototype_raw: invertible.then(|| match bounds {
                        Some((lo, hi)) => lo + mu[j] * (hi - lo),
                        None => state.invert(mu[j]),
                    }),
                    slope: a,
                    intercept_norm: b,
                    intercept_raw: bounds.map(|(lo, hi)| b * (hi - lo) + lo * (1.0 - a)),
                    raw_affine: bounds.is_some(),
                });
            }
        }
    }
    Ok(out)
}

/// Pairwise contribution `w_{d,u,k}·f′_{d,k}` of the pair term at every
/// training row.
pub fn export_surface(
    model: &Model,
    transforms: &TransformState,
    train: &Dataset,
    pair: (&str, &str),
) -> Result<SurfaceExport> {
    let a = transforms.feature_index(pair.0)?;
    let b = transforms.feature_index(pair.1)?;
    let term = model.arch.term_index(&[a, b]).filter(|_| a != b).ok_or_else(|| {
        let mut p = vec![a, b];
        p.sort_unstable();
        Error::PairNotInModel(p)
    })?;
    let encoded = transforms.apply(train)?;
    let out = model.outputs(&encoded)?;
    let d = model.arch.layers;
    let contributions: Vec<f64> = (0..encoded.n_samples())
        .map(|r| model.head_weight(d - 1, encoded.groups[r], term) * out.cumulative[d - 1][term][r])
        .collect();
    let c = mean(&contributions);
    let (ra, rb) = (
        raw_numeric(train, pair.0, &transforms.features[a])?,
        raw_numeric(train, pair.1, &transforms.features[b])?,
    );
    Ok(SurfaceExport {
        features: [pair.0.to_string(), pair.1.to_string()],
        points: contributions
            .iter()
            .enumerate()
            .map(|(r, &v)| SurfacePoint {
                feature_a_raw: ra[r],
                feature_b_raw: rb[r],
                contribution: v,
                contribution_centered: v - c,
            })
            .collect(),
    })
}

fn file_stem(export: &ShapeExport) -> String {
    let mut stem = sanitize(&export.feature);
    if let Some(label) = &export.task_label {
        stem.push('_');
        stem.push_str(&sanitize(label));
    }
    stem
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes `<feature>[_<group>].csv` with columns `grid_raw,
/// contribution_mean, contribution_std, layer_1..layer_d, density` and a
/// JSON sidecar holding the centering constants.
pub fn write_shape(export: &ShapeExport, dir: &Path) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(format!("{}.csv", file_stem(export)));
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["grid_raw".to_string(), "contribution_mean".into(), "contribution_std".into()];
    header.extend((1..=export.layers.len()).map(|m| format!("layer_{m}")));
    header.push("density".into());
    w.write_record(&header)?;
    for p in 0..export.grid_raw.len() {
        let mut row = vec![
            match &export.grid_labels {
                Some(l) => l[p].clone(),
                None => export.grid_raw[p].to_string(),
            },
            export.contribution_mean[p].to_string(),
            export.contribution_std[p].to_string(),
        ];
        row.extend(export.layers.iter().map(|l| l[p].to_string()));
        row.push(export.density[p].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    let sidecar = serde_json::json!({
        "feature": export.feature,
        "task": export.task,
        "task_label": export.task_label,
        "centering": export.centering,
        "layer_centering": export.layer_centering,
        "members": export.members.len(),
    });
    fs::write(
        dir.join(format!("{}.json", file_stem(export))),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    Ok(path)
}

pub fn write_prototypes(records: &[PrototypeRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(records)? + "\n")?;
    Ok(())
}

/// Writes `<a>_<b>.csv` with one row per training sample.
pub fn write_surface(export: &SurfaceExport, dir: &Path) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(format!("{}_{}.csv", sanitize(&export.features[0]), sanitize(&export.features[1])));
    let mut w = csv::Writer::from_path(&path)?;
    for p in &export.points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(path)
}
