//! Tabular ingestion, preprocessing and splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Feature,
    Target,
    Group,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

/// Validated column list: one target, at most one group column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ColumnSchema>", into = "Vec<ColumnSchema>")]
pub struct Schema {
    columns: Vec<ColumnSchema>,
}

impl TryFrom<Vec<ColumnSchema>> for Schema {
    type Error = Error;

    fn try_from(columns: Vec<ColumnSchema>) -> Result<Self> {
        let count = |role| columns.iter().filter(|c| c.role == role).count();
        if count(ColumnRole::Target) != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one target column, found {}",
                count(ColumnRole::Target)
            )));
        }
        if count(ColumnRole::Group) > 1 {
            return Err(Error::Schema("at most one group column is allowed".into()));
        }
        if count(ColumnRole::Feature) == 0 {
            return Err(Error::Schema("no feature columns".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", c.name)));
            }
        }
        if let Some(t) = columns.iter().find(|c| c.role == ColumnRole::Target) {
            if t.kind != ColumnKind::Numeric {
                return Err(Error::Schema(format!("target `{}` must be numeric", t.name)));
            }
        }
        Ok(Schema { columns })
    }
}

impl From<Schema> for Vec<ColumnSchema> {
    fn from(s: Schema) -> Self {
        s.columns
    }
}

impl Schema {
    pub fn new(columns: Vec<ColumnSchema>) -> Result<Self> {
        columns.try_into()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cols: Vec<ColumnSchema> = serde_json::from_str(&text)?;
        cols.try_into()
    }

    pub fn columns(&self) -> &[ColumnSchema] {
        &self.columns
    }

    pub fn features(&self) -> impl Iterator<Item = &ColumnSchema> {
        self.columns.iter().filter(|c| c.role == ColumnRole::Feature)
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features().map(|c| c.name.clone()).collect()
    }

    pub fn target(&self) -> &ColumnSchema {
        self.columns
            .iter()
            .find(|c| c.role == ColumnRole::Target)
            .expect("validated schema has a target")
    }

    pub fn group(&self) -> Option<&ColumnSchema> {
        self.columns.iter().find(|c| c.role == ColumnRole::Group)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&r| v[r].clone()).collect()),
        }
    }
}

/// Typed table, stored column-major in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    columns: Vec<Column>,
    n_samples: usize,
}

impl Dataset {
    pub fn new(schema: Schema, columns: Vec<Column>) -> Result<Self> {
        if columns.len() != schema.columns().len() {
            return Err(Error::Schema(format!(
                "{} columns supplied for a schema of {}",
                columns.len(),
                schema.columns().len()
            )));
        }
        let n_samples = columns.first().map_or(0, Column::len);
        for (c, s) in columns.iter().zip(schema.columns()) {
            let kind_ok = matches!(
                (c, s.kind),
                (Column::Numeric(_), ColumnKind::Numeric) | (Column::Categorical(_), ColumnKind::Categorical)
            );
            if !kind_ok || c.len() != n_samples {
                return Err(Error::Schema(format!("column `{}` has the wrong kind or length", s.name)));
            }
        }
        Ok(Dataset {
            schema,
            columns,
            n_samples,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.schema
            .columns()
            .iter()
            .position(|c| c.name == name)
            .map(|i| &self.columns[i])
    }

    pub fn targets(&self) -> &[f64] {
        match self.column(&self.schema.target().name) {
            Some(Column::Numeric(v)) => v,
            _ => unreachable!("validated schema has a numeric target"),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            n_samples: rows.len(),
        }
    }

    /// Reads an RFC-4180 CSV with a header row. Header order is free and
    /// extra columns are ignored.
    pub fn load_csv(path: &Path, schema: &Schema) -> Result<Self> {
        Self::read_csv(path, schema, true)
    }

    /// Like [`Dataset::load_csv`], but a missing target column is filled
    /// with NaN, for scoring unlabeled rows.
    pub fn load_unlabeled_csv(path: &Path, schema: &Schema) -> Result<Self> {
        Self::read_csv(path, schema, false)
    }

    fn read_csv(path: &Path, schema: &Schema, require_target: bool) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path)?;
        let header = reader.headers()?.clone();
        if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
            return Err(Error::EmptyDataset);
        }
        let positions = schema
            .columns()
            .iter()
            .map(|c| {
                match header.iter().position(|h| h.trim() == c.name) {
                    Some(p) => Ok(Some(p)),
                    None if !require_target && c.role == ColumnRole::Target => Ok(None),
                    None => Err(Error::MissingColumn(c.name.clone())),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut columns: Vec<Column> = schema
            .columns()
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Numeric => Column::Numeric(Vec::new()),
                ColumnKind::Categorical => Column::Categorical(Vec::new()),
            })
            .collect();
        for (r, record) in reader.records().enumerate() {
            let record = record?;
            let row = r + 1;
            if record.len() != header.len() {
                return Err(Error::RowLength {
                    row,
                    expected: header.len(),
                    found: record.len(),
                });
            }
            for ((col, &pos), spec) in columns.iter_mut().zip(&positions).zip(schema.columns()) {
                let Some(pos) = pos else {
                    if let Column::Numeric(v) = col {
                        v.push(f64::NAN);
                    }
                    continue;
                };
                let raw = record[pos].trim();
                if raw.is_empty() {
                    return Err(Error::MissingValue {
                        row,
                        column: spec.name.clone(),
                    });
                }
                match col {
                    Column::Numeric(v) => v.push(raw.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(
                        || Error::Parse {
                            row,
                            column: spec.name.clone(),
                            value: raw.to_string(),
                        },
                    )?),
                    Column::Categorical(v) => v.push(raw.to_string()),
                }
            }
        }
        let ds = Dataset::new(schema.clone(), columns)?;
        if ds.n_samples == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(ds)
    }
}

/// Midpoint empirical CDF over the distinct training values, linearly
/// interpolated between them and clamped outside their range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileMap {
    pub knots: Vec<f64>,
    pub levels: Vec<f64>,
}

impl QuantileMap {
    pub fn fit(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let (mut knots, mut levels) = (Vec::new(), Vec::new());
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            knots.push(sorted[i]);
            levels.push((i as f64 + 0.5 * (j - i) as f64) / n);
            i = j;
        }
        QuantileMap { knots, levels }
    }

    pub fn apply(&self, x: f64) -> f64 {
        interpolate(&self.knots, &self.levels, x)
    }

    pub fn invert(&self, q: f64) -> f64 {
        interpolate(&self.levels, &self.knots, q)
    }
}

/// Piecewise-linear interpolation through increasing `xs`, clamped.
fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let k = xs.partition_point(|&v| v <= x);
    let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureTransform {
    /// Min-max scaling, optionally preceded by a quantile map (in which case
    /// the bounds are those of the quantile levels).
    Numeric {
        min: f64,
        max: f64,
        quantile: Option<QuantileMap>,
    },
    /// Lexicographic ordinal codes, then min-max over the code range.
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureState {
    pub name: String,
    pub transform: FeatureTransform,
}

fn min_max(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

impl FeatureState {
    pub fn apply_numeric(&self, x: f64) -> f64 {
        match &self.transform {
            FeatureTransform::Numeric { min, max, quantile } => {
                let q = quantile.as_ref().map_or(x, |m| m.apply(x));
                min_max(q, *min, *max)
            }
            FeatureTransform::Categorical { categories } => {
                min_max(x, 0.0, categories.len().saturating_sub(1) as f64)
            }
        }
    }

    pub fn apply_category(&self, value: &str) -> Result<f64> {
        match &self.transform {
            FeatureTransform::Categorical { categories } => {
                let code = categories
                    .binary_search_by(|c| c.as_str().cmp(value))
                    .map_err(|_| Error::UnseenCategory {
                        column: self.name.clone(),
                        value: value.to_string(),
                    })?;
                Ok(min_max(code as f64, 0.0, categories.len().saturating_sub(1) as f64))
            }
            FeatureTransform::Numeric { .. } => Err(Error::Schema(format!(
                "feature `{}` is numeric but received a category",
                self.name
            ))),
        }
    }

    /// Raw-unit value of a normalized one. Exact for plain min-max and
    /// ordinal features; through the quantile map it is only the piecewise
    /// linear inverse.
    pub fn invert(&self, z: f64) -> f64 {
        match &self.transform {
            FeatureTransform::Numeric { min, max, quantile } => {
                let q = min + z * (max - min);
                quantile.as_ref().map_or(q, |m| m.invert(q))
            }
            FeatureTransform::Categorical { categories } => z * categories.len().saturating_sub(1) as f64,
        }
    }

    /// `(lo, hi)` when the feature is an exact affine image of raw units.
    pub fn affine_bounds(&self) -> Option<(f64, f64)> {
        match &self.transform {
            FeatureTransform::Numeric { min, max, quantile: None } => Some((*min, *max)),
            FeatureTransform::Categorical { categories } => {
                Some((0.0, categories.len().saturating_sub(1) as f64))
            }
            FeatureTransform::Numeric { .. } => None,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.transform, FeatureTransform::Categorical { .. })
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.transform {
            FeatureTransform::Categorical { categories } => Some(categories),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformConfig {
    pub use_quantile: bool,
}

/// Everything fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformState {
    pub features: Vec<FeatureState>,
    /// Ordered group labels when the schema has a group column.
    pub groups: Option<Vec<String>>,
}

/// Model-ready arrays: `features[i][r]` is the normalized value of
/// feature `i` in row `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedData {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub groups: Vec<usize>,
}

impl EncodedData {
    pub fn n_samples(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn select(&self, rows: &[usize]) -> EncodedData {
        EncodedData {
            features: self.features.iter().map(|c| rows.iter().map(|&r| c[r]).collect()).collect(),
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
            groups: rows.iter().map(|&r| self.groups[r]).collect(),
        }
    }
}

fn sorted_categories(values: &[String]) -> Vec<String> {
    values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

impl TransformState {
    pub fn fit(train: &Dataset, config: TransformConfig) -> Result<Self> {
        Self::fit_with_vocabulary(train, train, config)
    }

    /// Numeric statistics come from `train`; category and group vocabularies
    /// come from `vocabulary`, usually the whole loaded table. Categories carry
    /// no label information, and a category that occurs once still needs a code
    /// when its row lands in a test fold.
    pub fn fit_with_vocabulary(train: &Dataset, vocabulary: &Dataset, config: TransformConfig) -> Result<Self> {
        if train.n_samples() == 0 {
            return Err(Error::EmptyDataset);
        }
        let features = train
            .schema
            .features()
            .map(|spec| {
                let transform = match train.column(&spec.name).expect("schema column") {
                    Column::Numeric(v) => {
                        let quantile = config.use_quantile.then(|| QuantileMap::fit(v));
                        let mapped: Vec<f64> = match &quantile {
                            Some(q) => v.iter().map(|&x| q.apply(x)).collect(),
                            None => v.clone(),
                        };
                        let min = mapped.iter().copied().fold(f64::INFINITY, f64::min);
                        let max = mapped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        FeatureTransform::Numeric { min, max, quantile }
                    }
                    Column::Categorical(_) => match vocabulary.column(&spec.name) {
                        Some(Column::Categorical(all)) => FeatureTransform::Categorical {
                            categories: sorted_categories(all),
                        },
                        _ => return Err(Error::Schema(format!("vocabulary lacks categorical column {}", spec.name))),
                    },
                };
                Ok(FeatureState {
                    name: spec.name.clone(),
                    transform,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let groups = train.schema.group().map(|g| match vocabulary.column(&g.name).expect("schema column") {
            Column::Categorical(v) => sorted_categories(v),
            Column::Numeric(v) => sorted_categories(&v.iter().map(|x| x.to_string()).collect::<Vec<_>>()),
        });
        Ok(TransformState { features, groups })
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    pub fn n_tasks(&self) -> usize {
        self.groups.as_ref().map_or(1, Vec::len)
    }

    pub fn apply(&self, data: &Dataset) -> Result<EncodedData> {
        let features = self
            .features
            .iter()
            .map(|f| match data.column(&f.name) {
                Some(Column::Numeric(v)) => Ok(v.iter().map(|&x| f.apply_numeric(x)).collect()),
                Some(Column::Categorical(v)) => v.iter().map(|x| f.apply_category(x)).collect(),
                None => Err(Error::MissingColumn(f.name.clone())),
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let groups = match (&self.groups, data.schema.group()) {
            (Some(labels), Some(g)) => {
                let lookup: HashMap<&str, usize> =
                    labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
                let raw: Vec<String> = match data.column(&g.name).expect("schema column") {
                    Column::Categorical(v) => v.clone(),
                    Column::Numeric(v) => v.iter().map(|x| x.to_string()).collect(),
                };
                raw.iter()
                    .map(|r| {
                        lookup.get(r.as_str()).copied().ok_or_else(|| Error::UnseenCategory {
                            column: g.name.clone(),
                            value: r.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            _ => vec![0; data.n_samples()],
        };
        Ok(EncodedData {
            features,
            targets: data.targets().to_vec(),
            groups,
        })
    }
}

/// Seeded train/validation/test partition by fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn holdout_split(n: usize, spec: &HoldoutSpec) -> Result<SplitIndices> {
    let fr = [spec.train, spec.validation, spec.test];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || fr.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Split(format!("invalid fractions {fr:?}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_test = (spec.test * n as f64).round() as usize;
    let n_val = (spec.validation * n as f64).round() as usize;
    let n_train = ((spec.train * n as f64).round() as usize).min(n - n_test - n_val);
    Ok(SplitIndices {
        test: idx[..n_test].to_vec(),
        validation: idx[n_test..n_test + n_val].to_vec(),
        train: idx[n_test + n_val..n_test + n_val + n_train].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `{fold_id: {train: [...], test: [...]}}` with validated indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FoldFile {
    pub folds: BTreeMap<String, Fold>,
}

impl FoldFile {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if self.folds.is_empty() {
            return Err(Error::Split("fold file defines no folds".into()));
        }
        for (id, fold) in &self.folds {
            let mut train = BTreeSet::new();
            for &i in fold.train.iter().chain(&fold.test) {
                if i >= n_rows {
                    return Err(Error::FoldRange {
                        fold: id.clone(),
                        index: i,
                        n_rows,
                    });
                }
            }
            train.extend(fold.train.iter().copied());
            if let Some(&i) = fold.test.iter().find(|i| train.contains(i)) {
                return Err(Error::FoldOverlap {
                    fold: id.clone(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    /// Seeded k-fold partition: every row lands in exactly one test fold.
    pub fn k_fold(n_rows: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 || k > n_rows {
            return Err(Error::Split(format!("cannot make {k} folds of {n_rows} rows")));
        }
        let mut idx: Vec<usize> = (0..n_rows).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let folds = (0..k)
            .map(|f| {
                let (lo, hi) = (f * n_rows / k, (f + 1) * n_rows / k);
                let mut test = idx[lo..hi].to_vec();
                let mut train: Vec<usize> = idx[..lo].iter().chain(&idx[hi..]).copied().collect();
                test.sort_unstable();
                train.sort_unstable();
                (f.to_string(), Fold { train, test })
            })
            .collect();
        Ok(FoldFile { folds })
    }
}

/// Carves a seeded validation subset of `fraction` from training rows.
pub fn carve_validation(train: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx = train.to_vec();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((train.len() as f64 * fraction).round() as usize).max(1).min(train.len().saturating_sub(1));
    let validation = idx[..n_val].to_vec();
    let rest = idx[n_val..].to_vec();
    (rest, validation)
}
