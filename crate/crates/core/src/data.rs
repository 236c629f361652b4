//! Domain types and their file formats.
//!
//! Matrices travel either as `WSF1` binary (magic, `u32` rows, `u32` cols,
//! then row-major little-endian `f32`) or as header-less CSV. Labels are one
//! nonnegative integer per line and are densified to `0..k` in
//! first-appearance order on load; the original ids are kept in a
//! [`LabelIndex`] so that reports can speak in the caller's ids.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights at or below this value are treated as zero on export.
pub const WEIGHT_CLAMP: f64 = 1e-9;
/// Tolerance on the unit sum of a [`ClassWeights`] vector.
pub const SIMPLEX_SUM_TOL: f64 = 1e-8;

const MAGIC: &[u8; 4] = b"WSF1";

/// Dense row-major matrix of embeddings; rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "feature matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(FeatureMatrix { rows, cols, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        FeatureMatrix::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.cols)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix::new(indices.len(), self.cols, values)
    }

    /// Vertical concatenation.
    pub fn stack(&self, other: &FeatureMatrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "cannot stack {} and {} columns",
                self.cols, other.cols
            )));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        FeatureMatrix::new(self.rows + other.rows, self.cols, values)
    }
}

/// Dense class ids plus the original id of every dense class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelIndex {
    pub labels: Vec<usize>,
    pub class_ids: Vec<u64>,
}

impl LabelIndex {
    /// Re-indexes raw ids to `0..k` in order of first appearance.
    pub fn densify(raw: &[u64]) -> Self {
        let mut lookup = HashMap::new();
        let mut class_ids = Vec::new();
        let labels = raw
            .iter()
            .map(|&id| {
                *lookup.entry(id).or_insert_with(|| {
                    class_ids.push(id);
                    class_ids.len() - 1
                })
            })
            .collect();
        LabelIndex { labels, class_ids }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// The labels expressed in original ids.
    pub fn raw_labels(&self) -> Vec<u64> {
        self.labels.iter().map(|&l| self.class_ids[l]).collect()
    }
}

/// Feature matrix with dense per-row class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: FeatureMatrix,
    labels: Vec<usize>,
    class_ids: Vec<u64>,
    class_counts: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: FeatureMatrix, labels: Vec<usize>, class_ids: Vec<u64>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        let k = class_ids.len();
        let mut class_counts = vec![0usize; k];
        for &l in &labels {
            if l >= k {
                return Err(Error::InvalidInput(format!("label {l} outside 0..{k}")));
            }
            class_counts[l] += 1;
        }
        if let Some(empty) = class_counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidInput(format!(
                "class {} (id {}) has no samples",
                empty, class_ids[empty]
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_ids,
            class_counts,
        })
    }

    pub fn from_index(features: FeatureMatrix, index: LabelIndex) -> Result<Self> {
        LabeledDataset::new(features, index.labels, index.class_ids)
    }

    /// Builds a dataset from original ids, densifying them.
    pub fn from_raw_labels(features: FeatureMatrix, raw: &[u64]) -> Result<Self> {
        LabeledDataset::from_index(features, LabelIndex::densify(raw))
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_ids(&self) -> &[u64] {
        &self.class_ids
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn raw_labels(&self) -> Vec<u64> {
        self.labels.iter().map(|&l| self.class_ids[l]).collect()
    }

    /// Rows by index; classes that end up empty are dropped and the rest
    /// re-densified in first-appearance order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(indices)?;
        let raw: Vec<u64> = indices.iter().map(|&i| self.class_ids[self.labels[i]]).collect();
        LabeledDataset::from_raw_labels(features, &raw)
    }
}

/// Probability vector over source classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < -WEIGHT_CLAMP) {
            return Err(Error::InvalidInput(format!(
                "weight {i} is {} (must be finite and nonnegative)",
                weights[i]
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidInput(format!("weights sum to {sum}, not 1")));
        }
        Ok(ClassWeights { weights })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("zero classes".into()));
        }
        ClassWeights::new(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Zeroes weights at or below [`WEIGHT_CLAMP`] and renormalizes.
    pub fn clamped(&self) -> ClassWeights {
        let mut w: Vec<f64> = self
            .weights
            .iter()
            .map(|&x| if x <= WEIGHT_CLAMP { 0.0 } else { x })
            .collect();
        let sum: f64 = w.iter().sum();
        if sum > 0.0 {
            w.iter_mut().for_each(|x| *x /= sum);
        }
        ClassWeights { weights: w }
    }

    /// Dense indices of classes with weight above [`WEIGHT_CLAMP`].
    pub fn support(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > WEIGHT_CLAMP)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Nonnegative `rows x cols` coupling with its marginals and cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub plan: Vec<f64>,
    pub source_marginal: Vec<f64>,
    pub target_marginal: Vec<f64>,
    pub objective: f64,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.plan.chunks_exact(self.cols) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// Largest absolute deviation of any row or column sum from its marginal.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self
            .row_sums()
            .iter()
            .zip(&self.source_marginal)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let cols = self
            .col_sums()
            .iter()
            .zip(&self.target_marginal)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }

    /// `sum_ij cost_ij * plan_ij` against a row-major cost of the same shape.
    pub fn cost_against(&self, cost: &[f64]) -> f64 {
        self.plan.iter().zip(cost).map(|(p, c)| p * c).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAtom {
    pub feature: Vec<f64>,
    pub label: u64,
    pub mass: f64,
}

/// Finitely supported distribution over features x labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJointDistribution {
    atoms: Vec<JointAtom>,
}

impl DiscreteJointDistribution {
    pub fn new(atoms: Vec<JointAtom>) -> Result<Self> {
        let Some(first) = atoms.first() else {
            return Err(Error::InvalidInput("joint distribution has no atoms".into()));
        };
        let dim = first.feature.len();
        let mut total = 0.0;
        for (i, a) in atoms.iter().enumerate() {
            if a.feature.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "atom {i} has dimension {}, expected {dim}",
                    a.feature.len()
                )));
            }
            if !(a.mass >= 0.0) || !a.mass.is_finite() {
                return Err(Error::InvalidInput(format!("atom {i} has mass {}", a.mass)));
            }
            if a.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("atom {i} has a non-finite feature")));
            }
            total += a.mass;
        }
        if (total - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidInput(format!("atom masses sum to {total}")));
        }
        Ok(DiscreteJointDistribution { atoms })
    }

    /// Empirical joint distribution of a labeled sample with the given per-row masses.
    pub fn from_samples(features: &FeatureMatrix, labels: &[u64], masses: &[f64]) -> Result<Self> {
        if labels.len() != features.rows() || masses.len() != features.rows() {
            return Err(Error::DimensionMismatch(
                "labels, masses and feature rows must align".into(),
            ));
        }
        let atoms = features
            .iter_rows()
            .zip(labels)
            .zip(masses)
            .map(|((f, &label), &mass)| JointAtom {
                feature: f.to_vec(),
                label,
                mass,
            })
            .collect();
        DiscreteJointDistribution::new(atoms)
    }

    pub fn atoms(&self) -> &[JointAtom] {
        &self.atoms
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].feature.len()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.mass).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Binary,
    Csv,
}

impl MatrixFormat {
    /// `.csv` means CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Binary,
        }
    }
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "bin" | "wsf" => Ok(MatrixFormat::Binary),
            "csv" => Ok(MatrixFormat::Csv),
            other => Err(Error::InvalidInput(format!("unknown matrix format {other:?}"))),
        }
    }
}

pub fn load_feature_matrix(path: &Path, format: MatrixFormat) -> Result<FeatureMatrix> {
    match format {
        MatrixFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(path, &bytes)
        }
        MatrixFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(path, &text)
        }
    }
}

pub fn save_feature_matrix(matrix: &FeatureMatrix, path: &Path, format: MatrixFormat) -> Result<()> {
    let bytes = match format {
        MatrixFormat::Binary => encode_binary(matrix),
        MatrixFormat::Csv => {
            let mut out = String::new();
            for row in matrix.iter_rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
            out.into_bytes()
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Values are narrowed to `f32`; matrices whose entries are already
/// `f32`-representable round-trip bit-exactly.
pub fn encode_binary(matrix: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * matrix.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(matrix.rows as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.cols as u32).to_le_bytes());
    for v in &matrix.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_binary(path: &Path, bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::malformed(path, "missing WSF1 header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::malformed(path, format!("bad shape {rows}x{cols}")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::malformed(path, "shape overflows"))?;
    let body = &bytes[12..];
    if body.len() != expected {
        return Err(Error::malformed(
            path,
            format!("expected {expected} payload bytes for {rows}x{cols}, found {}", body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureMatrix::new(rows, cols, values)
}

pub fn parse_csv(path: &Path, text: &str) -> Result<FeatureMatrix> {
    let mut values = Vec::new();
    let mut cols = 0;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let start = values.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::malformed(path, format!("line {}: cannot parse {field:?}", lineno + 1))
            })?;
            values.push(v);
        }
        let width = values.len() - start;
        if rows == 0 {
            cols = width;
        } else if width != cols {
            return Err(Error::malformed(
                path,
                format!("line {} has {width} fields, expected {cols}", lineno + 1),
            ));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::malformed(path, "no rows"));
    }
    FeatureMatrix::new(rows, cols, values)
}

pub fn load_labels(path: &Path) -> Result<LabelIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(path, &text)
}

pub fn parse_labels(path: &Path, text: &str) -> Result<LabelIndex> {
    let mut raw = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id: u64 = line.parse().map_err(|_| {
            Error::malformed(path, format!("line {}: {line:?} is not a nonnegative integer", lineno + 1))
        })?;
        raw.push(id);
    }
    if raw.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(LabelIndex::densify(&raw))
}

pub fn save_labels(raw: &[u64], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(raw.len() * 3);
    for id in raw {
        out.push_str(&id.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Comma- or newline-separated real vector (marginals).
pub fn load_vector(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for field in text.split(|c: char| c == ',' || c.is_whitespace()) {
        if field.is_empty() {
            continue;
        }
        let v: f64 = field
            .parse()
            .map_err(|_| Error::malformed(path, format!("cannot parse {field:?}")))?;
        if !v.is_finite() {
            return Err(Error::malformed(path, "non-finite entry"));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(out)
}

/// JSON shape of an exported weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsDocument {
    pub k: usize,
    pub weights: serde_json::Map<String, serde_json::Value>,
    pub support: Vec<u64>,
}

pub fn weights_document(weights: &ClassWeights, class_ids: &[u64]) -> Result<WeightsDocument> {
    if class_ids.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} class ids",
            weights.len(),
            class_ids.len()
        )));
    }
    let clamped = weights.clamped();
    let mut map = serde_json::Map::new();
    let mut support = Vec::new();
    for (&id, &w) in class_ids.iter().zip(clamped.as_slice()) {
        map.insert(id.to_string(), serde_json::Value::from(w));
        if w > 0.0 {
            support.push(id);
        }
    }
    Ok(WeightsDocument {
        k: weights.len(),
        weights: map,
        support,
    })
}

pub fn save_class_weights(weights: &ClassWeights, class_ids: &[u64], path: &Path) -> Result<()> {
    let doc = weights_document(weights, class_ids)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut file, &doc)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Reads a weights document and aligns it with `class_ids`. Classes absent
/// from the document get weight zero; ids not in `class_ids` are an error.
pub fn load_class_weights(path: &Path, class_ids: &[u64]) -> Result<ClassWeights> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: WeightsDocument =
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
    let mut w = vec![0.0; class_ids.len()];
    for (key, value) in &doc.weights {
        let id: u64 = key
            .parse()
            .map_err(|_| Error::malformed(path, format!("class id {key:?} is not an integer")))?;
        let v = value
            .as_f64()
            .ok_or_else(|| Error::malformed(path, format!("weight of class {id} is not a number")))?;
        let slot = class_ids
            .iter()
            .position(|&c| c == id)
            .ok_or(Error::UnknownLabel(id))?;
        w[slot] = v;
    }
    ClassWeights::new(w)
}
