//! Tabular ingestion, splitting, and the synthetic biased-data generator.
//!
//! Categorical columns are one-hot encoded against the vocabulary declared in
//! the schema. Numeric columns are z-scored by [`split`] using statistics of
//! the training rows only. The protected column is kept out of the feature
//! matrix unless the schema asks for it.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum Column {
    Numeric {
        name: String,
    },
    Categorical {
        name: String,
        vocabulary: Vec<String>,
    },
    /// Binary target; any value listed in `positive` is the positive class.
    Label {
        name: String,
        positive: Vec<String>,
    },
    /// Protected attribute; group ids follow the order of `groups`.
    Protected {
        name: String,
        groups: Vec<String>,
    },
    /// Present in the file but not used.
    Ignore {
        name: String,
    },
}

impl Column {
    pub fn name(&self) -> &str {
        match self {
            Column::Numeric { name }
            | Column::Categorical { name, .. }
            | Column::Label { name, .. }
            | Column::Protected { name, .. }
            | Column::Ignore { name } => name,
        }
    }
}

fn default_missing() -> Vec<String> {
    vec![String::new(), "?".into(), "NA".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    /// One-hot encode the protected attribute into the features as well.
    #[serde(default)]
    pub include_protected: bool,
    /// Cell values treated as missing. Missing values are rejected.
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
    pub columns: Vec<Column>,
}

impl Schema {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let schema: Schema = toml::from_str(text).map_err(|e| e.to_string())?;
        schema.validate().map_err(|e| e.to_string())?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|m| Error::parse(path, m))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self.columns.iter().filter(|c| matches!(c, Column::Label { .. })).count();
        let protected: Vec<_> = self
            .columns
            .iter()
            .filter_map(|c| match c {
                Column::Protected { groups, .. } => Some(groups),
                _ => None,
            })
            .collect();
        if labels != 1 {
            return Err(Error::Config(format!("schema needs exactly one label column, found {labels}")));
        }
        if protected.len() != 1 {
            return Err(Error::Config(format!(
                "schema needs exactly one protected column, found {}",
                protected.len()
            )));
        }
        if protected[0].len() < 2 {
            return Err(Error::Config("protected attribute needs at least two groups".into()));
        }
        let mut seen = HashMap::new();
        for c in &self.columns {
            if seen.insert(c.name(), ()).is_some() {
                return Err(Error::Config(format!("column {} declared twice", c.name())));
            }
            if let Column::Categorical { name, vocabulary } = c {
                if vocabulary.is_empty() {
                    return Err(Error::Config(format!("column {name} has an empty vocabulary")));
                }
            }
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.protected().1.len()
    }

    fn protected(&self) -> (&str, &[String]) {
        self.columns
            .iter()
            .find_map(|c| match c {
                Column::Protected { name, groups } => Some((name.as_str(), groups.as_slice())),
                _ => None,
            })
            .expect("validated schema")
    }

    /// Encoded feature names, in column order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.columns {
            match c {
                Column::Numeric { name } => names.push(name.clone()),
                Column::Categorical { name, vocabulary } => {
                    names.extend(vocabulary.iter().map(|v| format!("{name}={v}")))
                }
                Column::Protected { name, groups } if self.include_protected => {
                    names.extend(groups.iter().map(|v| format!("{name}={v}")))
                }
                _ => {}
            }
        }
        names
    }

    /// Recovers the categorical value of `column` from its one-hot block.
    pub fn decode_categorical(&self, column: &str, one_hot: &[f64]) -> Option<String> {
        let vocab = self.columns.iter().find_map(|c| match c {
            Column::Categorical { name, vocabulary } if name == column => Some(vocabulary),
            Column::Protected { name, groups } if name == column => Some(groups),
            _ => None,
        })?;
        if one_hot.len() != vocab.len() {
            return None;
        }
        let hot = one_hot.iter().position(|&v| v == 1.0)?;
        Some(vocab[hot].clone())
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Full,
    Train,
    Test,
}

/// z-score parameters for a subset of feature columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Scaling {
    pub fn fit(x: &Matrix, columns: &[usize]) -> Self {
        let n = x.rows().max(1) as f64;
        let mut means = Vec::with_capacity(columns.len());
        let mut stds = Vec::with_capacity(columns.len());
        for &c in columns {
            let mean = (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n;
            let var = (0..x.rows()).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n;
            means.push(mean);
            stds.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self {
            columns: columns.to_vec(),
            means,
            stds,
        }
    }

    pub fn apply(&self, x: &mut Matrix) {
        for r in 0..x.rows() {
            for ((&c, &mu), &sd) in self.columns.iter().zip(&self.means).zip(&self.stds) {
                let v = x.get(r, c);
                x.set(r, c, (v - mu) / sd);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    /// 0/1 labels.
    pub y: Vec<f64>,
    /// Group ids in `0..num_groups`.
    pub a: Vec<usize>,
    pub num_groups: usize,
    pub feature_names: Vec<String>,
    /// Feature columns that are z-scored on split.
    pub numeric_columns: Vec<usize>,
    pub scaling: Option<Scaling>,
    /// File hash or generator description.
    pub provenance: String,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.y.iter().map(|&v| v == 1.0).collect()
    }

    /// Rows `indices` in that order.
    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            a: indices.iter().map(|&i| self.a[i]).collect(),
            num_groups: self.num_groups,
            feature_names: self.feature_names.clone(),
            numeric_columns: self.numeric_columns.clone(),
            scaling: self.scaling.clone(),
            provenance: self.provenance.clone(),
            split,
        }
    }

    /// Applies an already fitted scaling (e.g. one stored with a model).
    pub fn with_scaling(mut self, scaling: &Scaling) -> Dataset {
        scaling.apply(&mut self.x);
        self.scaling = Some(scaling.clone());
        self
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a headed CSV and encodes it against `schema`. Numeric columns are
/// left unscaled; [`split`] scales them.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    schema.validate()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let declared: Vec<&str> = schema.columns.iter().map(Column::name).collect();
    let missing_cols: Vec<&str> = declared.iter().copied().filter(|c| !position.contains_key(c)).collect();
    if !missing_cols.is_empty() {
        return Err(Error::Data(format!(
            "{}: header lacks schema columns {missing_cols:?}",
            path.display()
        )));
    }
    let extra: Vec<&str> = header.iter().map(String::as_str).filter(|h| !declared.contains(h)).collect();
    if !extra.is_empty() {
        return Err(Error::Data(format!(
            "{}: columns {extra:?} are not declared in the schema",
            path.display()
        )));
    }

    let feature_names = schema.feature_names();
    let d = feature_names.len();
    let mut numeric_columns = Vec::new();
    {
        let mut offset = 0;
        for c in &schema.columns {
            match c {
                Column::Numeric { .. } => {
                    numeric_columns.push(offset);
                    offset += 1;
                }
                Column::Categorical { vocabulary, .. } => offset += vocabulary.len(),
                Column::Protected { groups, .. } if schema.include_protected => offset += groups.len(),
                _ => {}
            }
        }
    }
    let lookups: Vec<Option<HashMap<&str, usize>>> = schema
        .columns
        .iter()
        .map(|c| match c {
            Column::Categorical { vocabulary: v, .. } | Column::Protected { groups: v, .. } => {
                Some(v.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect())
            }
            _ => None,
        })
        .collect();

    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut a = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        let row_no = line + 2;
        let mut row = vec![0.0; d];
        let mut offset = 0;
        for (c, lookup) in schema.columns.iter().zip(&lookups) {
            let name = c.name();
            let cell = record.get(position[name]).unwrap_or("");
            if matches!(c, Column::Ignore { .. }) {
                continue;
            }
            if schema.missing.iter().any(|m| m == cell) {
                return Err(Error::Data(format!(
                    "{}: line {row_no}: missing value in column {name}",
                    path.display()
                )));
            }
            let category = |vocab: &HashMap<&str, usize>| {
                vocab.get(cell).copied().ok_or_else(|| {
                    Error::Data(format!(
                        "{}: line {row_no}: unknown value {cell:?} in column {name}",
                        path.display()
                    ))
                })
            };
            match c {
                Column::Numeric { .. } => {
                    let v: f64 = cell.parse().map_err(|_| {
                        Error::Data(format!(
                            "{}: line {row_no}: column {name} is not numeric: {cell:?}",
                            path.display()
                        ))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Data(format!(
                            "{}: line {row_no}: non-finite value in column {name}",
                            path.display()
                        )));
                    }
                    row[offset] = v;
                    offset += 1;
                }
                Column::Categorical { vocabulary, .. } => {
                    let k = category(lookup.as_ref().expect("categorical lookup"))?;
                    row[offset + k] = 1.0;
                    offset += vocabulary.len();
                }
                Column::Label { positive, .. } => {
                    y.push(if positive.iter().any(|p| p == cell) { 1.0 } else { 0.0 });
                }
                Column::Protected { groups, .. } => {
                    let k = category(lookup.as_ref().expect("protected lookup"))?;
                    a.push(k);
                    if schema.include_protected {
                        row[offset + k] = 1.0;
                        offset += groups.len();
                    }
                }
                Column::Ignore { .. } => {}
            }
        }
        data.extend_from_slice(&row);
    }
    let n = y.len();
    Ok(Dataset {
        x: Matrix::new(n, d, data)?,
        y,
        a,
        num_groups: schema.num_groups(),
        feature_names,
        numeric_columns,
        scaling: None,
        provenance: format!("sha256:{}", sha256_hex(&bytes)),
        split: SplitTag::Full,
    })
}

/// Seeded shuffle split into `(train, test)` with `round(n·train_fraction)`
/// training rows. Numeric columns of both parts are z-scored with the
/// training rows' statistics.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);
    let mut train = dataset.subset(train_idx, SplitTag::Train);
    let mut test = dataset.subset(test_idx, SplitTag::Test);
    let scaling = Scaling::fit(&train.x, &dataset.numeric_columns);
    scaling.apply(&mut train.x);
    scaling.apply(&mut test.x);
    train.scaling = Some(scaling.clone());
    test.scaling = Some(scaling);
    Ok((train, test))
}

/// Writes `x0..x{d-1}, a, y` with a header row. Feature values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let names: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    writeln!(out, "{},a,y", names.join(",")).expect("write to vec");
    for r in 0..dataset.len() {
        for v in dataset.x.row(r) {
            write!(out, "{v},").expect("write to vec");
        }
        writeln!(out, "{},{}", dataset.a[r], dataset.y[r] as u8).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Schema matching the files produced by [`write_csv`].
pub fn synthetic_schema(d: usize, num_groups: usize) -> Schema {
    let mut columns: Vec<Column> = (0..d).map(|j| Column::Numeric { name: format!("x{j}") }).collect();
    columns.push(Column::Protected {
        name: "a".into(),
        groups: (0..num_groups).map(|g| g.to_string()).collect(),
    });
    columns.push(Column::Label {
        name: "y".into(),
        positive: vec!["1".into()],
    });
    Schema {
        include_protected: false,
        missing: default_missing(),
        columns,
    }
}

fn default_proxies() -> usize {
    2
}

fn default_noise() -> f64 {
    1.0
}

pub const DEFAULT_LABEL_WEIGHT: f64 = 1.5;

/// Generative description of a two-group biased dataset.
///
/// For every row: `a ~ Bernoulli(π)`; base features are standard normal;
/// each proxy feature is `β·a + σ·ε`; the label is
/// `1[w·x_base + β·a + σ·ε > β·π]`, so the base positive rate is near ½.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    /// Total features: `d − proxy_features` base features plus the proxies.
    pub d: usize,
    /// `P(a = 1)`.
    pub group_prior: f64,
    /// Weights on the base features; all `DEFAULT_LABEL_WEIGHT` when absent.
    #[serde(default)]
    pub label_weights: Option<Vec<f64>>,
    /// Bias leak β.
    pub bias: f64,
    #[serde(default = "default_proxies")]
    pub proxy_features: usize,
    /// Noise scale σ.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n: usize, d: usize, group_prior: f64, bias: f64, seed: u64) -> Self {
        Self {
            n,
            d,
            group_prior,
            label_weights: None,
            bias,
            proxy_features: default_proxies(),
            noise: default_noise(),
            seed,
        }
    }

    pub fn base_features(&self) -> usize {
        self.d.saturating_sub(self.proxy_features)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.label_weights
            .clone()
            .unwrap_or_else(|| vec![DEFAULT_LABEL_WEIGHT; self.base_features()])
    }

    pub fn threshold(&self) -> f64 {
        self.bias * self.group_prior
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.group_prior > 0.0 && self.group_prior < 1.0) {
            return Err(Error::Config(format!("group_prior must be in (0,1), got {}", self.group_prior)));
        }
        if !(self.bias >= 0.0) || !self.bias.is_finite() {
            return Err(Error::Config(format!("bias must be >= 0, got {}", self.bias)));
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be > 0, got {}", self.noise)));
        }
        if self.proxy_features >= self.d {
            return Err(Error::Config(format!(
                "d = {} leaves no base features next to {} proxies",
                self.d, self.proxy_features
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if let Some(w) = &self.label_weights {
            if w.len() != self.base_features() {
                return Err(Error::Config(format!(
                    "label_weights has {} entries, expected {}",
                    w.len(),
                    self.base_features()
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| e.to_string())?;
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|m| Error::parse(path, m))
    }
}

struct SynthRow {
    a: usize,
    base: Vec<f64>,
    proxies: Vec<f64>,
    y: bool,
}

fn draw_row(spec: &SynthSpec, w: &[f64], rng: &mut impl Rng) -> SynthRow {
    let a = usize::from(rng.random::<f64>() < spec.group_prior);
    let base: Vec<f64> = (0..spec.base_features()).map(|_| rng.sample(StandardNormal)).collect();
    let proxies: Vec<f64> = (0..spec.proxy_features)
        .map(|_| spec.bias * a as f64 + spec.noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let score: f64 = w.iter().zip(&base).map(|(wi, xi)| wi * xi).sum::<f64>()
        + spec.bias * a as f64
        + spec.noise * rng.sample::<f64, _>(StandardNormal);
    SynthRow {
        a,
        base,
        proxies,
        y: score > spec.threshold(),
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let w = spec.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.n * spec.d);
    let mut y = Vec::with_capacity(spec.n);
    let mut a = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let row = draw_row(spec, &w, &mut rng);
        data.extend_from_slice(&row.base);
        data.extend_from_slice(&row.proxies);
        y.push(if row.y { 1.0 } else { 0.0 });
        a.push(row.a);
    }
    Ok(Dataset {
        x: Matrix::new(spec.n, spec.d, data)?,
        y,
        a,
        num_groups: 2,
        feature_names: (0..spec.d).map(|j| format!("x{j}")).collect(),
        numeric_columns: (0..spec.d).collect(),
        scaling: None,
        provenance: format!(
            "synthetic:{}",
            serde_json::to_string(spec).expect("spec serializes")
        ),
        split: SplitTag::Full,
    })
}

/// Monte-Carlo evaluation of the Bayes-optimal classifier that sees the
/// features but not the protected attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n_mc: usize,
    pub accuracy: f64,
    pub accuracy_se: f64,
    pub dp_gap: f64,
    pub dp_gap_se: f64,
    pub majority_rate: f64,
}

/// Stream offset so oracle draws never coincide with the dataset's own.
const ORACLE_STREAM: u64 = 0x6f72_6163_6c65;

/// `P(y = 1 | x)` marginalising the unobserved group through the proxies.
pub fn bayes_posterior(spec: &SynthSpec, base: &[f64], proxies: &[f64]) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let w = spec.weights();
    let sigma = spec.noise;
    let log_lik = |group: f64| -> f64 {
        proxies
            .iter()
            .map(|&p| -0.5 * ((p - spec.bias * group) / sigma).powi(2))
            .sum()
    };
    let (l1, l0) = (
        log_lik(1.0) + spec.group_prior.ln(),
        log_lik(0.0) + (1.0 - spec.group_prior).ln(),
    );
    let p_a1 = 1.0 / (1.0 + (l0 - l1).exp());
    let f: f64 = w.iter().zip(base).map(|(wi, xi)| wi * xi).sum();
    let t = spec.threshold();
    let p_y_a1 = std.cdf((f + spec.bias - t) / sigma);
    let p_y_a0 = std.cdf((f - t) / sigma);
    p_a1 * p_y_a1 + (1.0 - p_a1) * p_y_a0
}

pub fn bias_oracle(spec: &SynthSpec, n_mc: usize) -> Result<OracleReport> {
    spec.validate()?;
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    let w = spec.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(ORACLE_STREAM);
    let mut correct = 0usize;
    let mut positives = 0usize;
    let mut counts = [0usize; 2];
    let mut predicted_pos = [0usize; 2];
    for _ in 0..n_mc {
        let row = draw_row(spec, &w, &mut rng);
        let pred = bayes_posterior(spec, &row.base, &row.proxies) >= 0.5;
        correct += usize::from(pred == row.y);
        positives += usize::from(row.y);
        counts[row.a] += 1;
        predicted_pos[row.a] += usize::from(pred);
    }
    let n = n_mc as f64;
    let accuracy = correct as f64 / n;
    let rate = |g: usize| predicted_pos[g] as f64 / counts[g].max(1) as f64;
    let var = |g: usize| rate(g) * (1.0 - rate(g)) / counts[g].max(1) as f64;
    let pos_rate = positives as f64 / n;
    Ok(OracleReport {
        n_mc,
        accuracy,
        accuracy_se: (accuracy * (1.0 - accuracy) / n).sqrt(),
        dp_gap: (rate(1) - rate(0)).abs(),
        dp_gap_se: (var(0) + var(1)).sqrt(),
        majority_rate: pos_rate.max(1.0 - pos_rate),
    })
}

/// Row counts per group.
pub fn group_counts(a: &[usize], num_groups: usize) -> BTreeMap<usize, usize> {
    let mut counts: BTreeMap<usize, usize> = (0..num_groups).map(|g| (g, 0)).collect();
    for &g in a {
        *counts.entry(g).or_default() += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_schema() -> Schema {
        Schema::from_toml(
            r#"
            [[columns]]
            name = "age"
            role = "numeric"

            [[columns]]
            name = "color"
            role = "categorical"
            vocabulary = ["red", "blue"]

            [[columns]]
            name = "sex"
            role = "protected"
            groups = ["m", "f"]

            [[columns]]
            name = "label"
            role = "label"
            positive = ["yes"]
            "#,
        )
        .unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const TOY: &str = "age,color,sex,label\n30,red,m,yes\n40,blue,f,no\n 50 , red ,f,yes\n";

    #[test]
    fn toy_csv_one_hot_width() {
        let f = write_tmp(TOY);
        let ds = load_csv(f.path(), &toy_schema()).unwrap();
        assert_eq!(ds.dim(), 1 + 2);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.a, vec![0, 1, 1]);
        assert_eq!(ds.y, vec![1.0, 0.0, 1.0]);
        assert_eq!(ds.x.row(1), &[40.0, 0.0, 1.0]);
        assert_eq!(ds.num_groups, 2);
        assert!(ds.provenance.starts_with("sha256:"));
    }

    #[test]
    fn include_protected_adds_one_hot_block() {
        let mut schema = toy_schema();
        schema.include_protected = true;
        let f = write_tmp(TOY);
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.dim(), 5);
        assert_eq!(&ds.x.row(0)[3..], &[1.0, 0.0]);
    }

    #[test]
    fn categorical_encoding_round_trips() {
        let schema = toy_schema();
        let f = write_tmp(TOY);
        let ds = load_csv(f.path(), &schema).unwrap();
        let decoded: Vec<String> = (0..ds.len())
            .map(|r| schema.decode_categorical("color", &ds.x.row(r)[1..3]).unwrap())
            .collect();
        assert_eq!(decoded, ["red", "blue", "red"]);
    }

    #[test]
    fn unknown_category_names_column_and_value() {
        let f = write_tmp("age,color,sex,label\n30,green,m,yes\n");
        let err = load_csv(f.path(), &toy_schema()).unwrap_err().to_string();
        assert!(err.contains("color") && err.contains("green"), "{err}");
    }

    #[test]
    fn missing_values_are_rejected() {
        let f = write_tmp("age,color,sex,label\n?,red,m,yes\n");
        let err = load_csv(f.path(), &toy_schema()).unwrap_err().to_string();
        assert!(err.contains("missing") && err.contains("age"), "{err}");
        let f = write_tmp("age,color,sex,label\n3,red,,yes\n");
        assert!(load_csv(f.path(), &toy_schema()).is_err());
    }

    #[test]
    fn header_must_match_schema() {
        let f = write_tmp("age,color,label\n30,red,yes\n");
        assert!(matches!(load_csv(f.path(), &toy_schema()), Err(Error::Data(_))));
        let f = write_tmp("age,color,sex,label,extra\n30,red,m,yes,1\n");
        assert!(matches!(load_csv(f.path(), &toy_schema()), Err(Error::Data(_))));
    }

    #[test]
    fn missing_file_error_names_path() {
        let err = load_csv("/nonexistent/file.csv", &toy_schema()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/file.csv"));
    }

    #[test]
    fn schema_validation() {
        let no_label = r#"
            [[columns]]
            name = "a"
            role = "protected"
            groups = ["x", "y"]
        "#;
        assert!(Schema::from_toml(no_label).is_err());
        let one_group = r#"
            [[columns]]
            name = "a"
            role = "protected"
            groups = ["x"]
            [[columns]]
            name = "y"
            role = "label"
            positive = ["1"]
        "#;
        assert!(Schema::from_toml(one_group).is_err());
    }

    #[test]
    fn bundled_schemas_have_expected_groups() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas");
        let adult = Schema::load(root.join("adult.schema.toml")).unwrap();
        assert_eq!(adult.num_groups(), 2);
        let health = Schema::load(root.join("health.schema.toml")).unwrap();
        assert_eq!(health.num_groups(), 9);
    }

    #[test]
    fn split_is_seeded_disjoint_and_exhaustive() {
        let ds = synth_generate(&SynthSpec::new(300, 6, 0.5, 1.0, 9)).unwrap();
        let (tr, te) = split(&ds, 2.0 / 3.0, 4).unwrap();
        assert_eq!(tr.len(), 200);
        assert_eq!(te.len(), 100);
        let (tr2, te2) = split(&ds, 2.0 / 3.0, 4).unwrap();
        assert_eq!((tr.clone(), te.clone()), (tr2, te2));

        // Undo the scaling and match rows back to the original.
        let sc = tr.scaling.clone().unwrap();
        let unscale = |row: &[f64]| -> Vec<u64> {
            row.iter()
                .enumerate()
                .map(|(c, v)| (v * sc.stds[c] + sc.means[c]).to_bits())
                .collect()
        };
        let mut originals: Vec<Vec<f64>> = (0..ds.len()).map(|r| ds.x.row(r).to_vec()).collect();
        let mut recovered: Vec<Vec<f64>> = (0..tr.len())
            .map(|r| tr.x.row(r).to_vec())
            .chain((0..te.len()).map(|r| te.x.row(r).to_vec()))
            .collect();
        assert_eq!(recovered.len(), originals.len());
        // Compare approximately: scaling is not bit-invertible.
        originals.sort_by(|a, b| a[0].total_cmp(&b[0]));
        recovered.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (o, r) in originals.iter().zip(&recovered) {
            let back = unscale(r);
            for (ov, bv) in o.iter().zip(back) {
                assert!((ov - f64::from_bits(bv)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_thirds_split_matches_thirty_to_fifteen() {
        let ds = synth_generate(&SynthSpec::new(45, 3, 0.5, 0.0, 1)).unwrap();
        let (tr, te) = split(&ds, 2.0 / 3.0, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (30, 15));
    }

    #[test]
    fn test_rows_do_not_influence_train_encoding() {
        let ds = synth_generate(&SynthSpec::new(120, 4, 0.5, 1.0, 2)).unwrap();
        let (tr, te) = split(&ds, 0.5, 8).unwrap();
        // Find the original indices that landed in the test split and perturb them.
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
        let mut mutated = ds.clone();
        for &i in &order[60..] {
            for c in 0..mutated.dim() {
                mutated.x.set(i, c, 1e3 + c as f64);
            }
        }
        let (tr2, te2) = split(&mutated, 0.5, 8).unwrap();
        assert_eq!(tr.x, tr2.x);
        assert_eq!(tr.scaling, tr2.scaling);
        assert_ne!(te.x, te2.x);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = synth_generate(&SynthSpec::new(10, 3, 0.5, 0.0, 1)).unwrap();
        assert!(split(&ds, 1.0, 0).is_err());
        assert!(split(&ds, 0.0, 0).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SynthSpec::new(500, 6, 0.3, 2.0, 11);
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
    }

    #[test]
    fn group_proportion_tracks_prior() {
        for prior in [0.3, 0.5] {
            let ds = synth_generate(&SynthSpec::new(10_000, 6, prior, 2.0, 5)).unwrap();
            let frac = ds.a.iter().filter(|&&g| g == 1).count() as f64 / ds.len() as f64;
            assert!((frac - prior).abs() < 0.02, "{frac}");
        }
    }

    #[test]
    fn synthetic_csv_round_trips_through_schema() {
        let spec = SynthSpec::new(50, 6, 0.5, 2.0, 3);
        let ds = synth_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.csv");
        write_csv(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 51);
        let back = load_csv(&path, &synthetic_schema(6, 2)).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.a, ds.a);
    }

    #[test]
    fn spec_validation() {
        let mut spec = SynthSpec::new(10, 6, 0.5, 2.0, 0);
        spec.group_prior = 1.0;
        assert!(synth_generate(&spec).is_err());
        let mut spec = SynthSpec::new(10, 2, 0.5, 2.0, 0);
        spec.proxy_features = 2;
        assert!(synth_generate(&spec).is_err());
        let mut spec = SynthSpec::new(10, 6, 0.5, -1.0, 0);
        spec.bias = -1.0;
        assert!(synth_generate(&spec).is_err());
    }

    #[test]
    fn unbiased_oracle_has_no_parity_gap() {
        let r = bias_oracle(&SynthSpec::new(1, 6, 0.5, 0.0, 1), 100_000).unwrap();
        assert!(r.dp_gap < 3.0 * r.dp_gap_se, "{r:?}");
        assert!(r.dp_gap < 0.03);
        assert!(r.accuracy >= r.majority_rate);
    }

    #[test]
    fn biased_oracle_has_large_parity_gap() {
        let r = bias_oracle(&SynthSpec::new(1, 6, 0.5, 2.0, 1), 100_000).unwrap();
        assert!(r.dp_gap >= 0.15, "{r:?}");
        assert!(r.accuracy >= r.majority_rate);
    }

    #[test]
    fn oracle_standard_error_scales_with_sqrt_n() {
        let spec = SynthSpec::new(1, 6, 0.5, 2.0, 4);
        let small = bias_oracle(&spec, 20_000).unwrap();
        let doubled = bias_oracle(&spec, 40_000).unwrap();
        let quadrupled = bias_oracle(&spec, 80_000).unwrap();
        let r2 = doubled.dp_gap_se / small.dp_gap_se;
        let r4 = quadrupled.dp_gap_se / small.dp_gap_se;
        assert!((r2 / std::f64::consts::FRAC_1_SQRT_2 - 1.0).abs() < 0.2, "{r2}");
        assert!((r4 / 0.5 - 1.0).abs() < 0.2, "{r4}");
    }

    /// The Bayes posterior is checked against brute-force numerical
    /// integration over the unobserved label noise.
    #[test]
    fn bayes_posterior_matches_quadrature() {
        let spec = SynthSpec::new(1, 6, 0.3, 2.0, 0);
        let base = [0.4, -0.2, 0.1, 0.7];
        let proxies = [1.1, 2.5];
        let w = spec.weights();
        let f: f64 = w.iter().zip(&base).map(|(a, b)| a * b).sum();
        let lik = |g: f64| -> f64 {
            proxies
                .iter()
                .map(|p| (-(p - 2.0 * g) * (p - 2.0 * g) / 2.0).exp())
                .product()
        };
        let (j1, j0) = (0.3 * lik(1.0), 0.7 * lik(0.0));
        // ∫ 1[f + 2g + e > t] φ(e) de by the midpoint rule
        let t = spec.threshold();
        let integrate = |g: f64| -> f64 {
            let steps = 200_000;
            let (lo, hi) = (-12.0, 12.0);
            let h = (hi - lo) / steps as f64;
            (0..steps)
                .map(|i| lo + (i as f64 + 0.5) * h)
                .filter(|e| f + 2.0 * g + e > t)
                .map(|e| (-e * e / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() * h)
                .sum()
        };
        let expected = (j1 * integrate(1.0) + j0 * integrate(0.0)) / (j1 + j0);
        let got = bayes_posterior(&spec, &base, &proxies);
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }
}
