//! Dataset ingestion and the preprocessing pipeline: categorical encoding,
//! observation masks, MCAR amputation, standardization from observed cells,
//! zero pre-assignment and corruption variants.
//!
//! Missing values are carried as NaN inside the value matrix; the [`Mask`] is
//! the authority on which cells count as observed. All randomized steps are
//! reproducible from their seed alone.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("column '{0}' has no observed values")]
    AllMissing(String),
    #[error("categorical column '{0}' has a single level; degenerate")]
    DegenerateCategorical(String),
    #[error("table too small: need at least 2 rows and 2 columns, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("column {0} has fewer than 2 observed cells")]
    TooSparse(usize),
    #[error("amputation: {0}")]
    Amputation(String),
    #[error("rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("target column '{0}' not found")]
    TargetNotFound(String),
    #[error("target column has missing values")]
    TargetMissing,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
}

type Result<T> = std::result::Result<T, DataError>;

/// Per-column type after encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Continuous,
    Categorical { cardinality: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Continuous,
    Binary,
    Multiclass { classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetSpec {
    pub column: usize,
    pub kind: TargetKind,
}

/// Optional guidance for the loader: force columns categorical by name and
/// designate a target column.
#[derive(Debug, Clone, Default)]
pub struct SchemaHints {
    pub force_categorical: Vec<String>,
    pub target: Option<String>,
}

/// Numeric table with missing cells as NaN, per-column kinds and the code
/// books used to encode categorical columns.
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    values: Matrix<S>,
    kinds: Vec<ColumnKind>,
    names: Vec<String>,
    code_books: Vec<Option<Vec<String>>>,
    target: Option<TargetSpec>,
}

/// Extracted target column for downstream prediction.
#[derive(Debug, Clone)]
pub enum TargetData {
    Continuous(Vec<f64>),
    Classes { labels: Vec<usize>, classes: usize },
}

impl<S: Scalar> Dataset<S> {
    pub fn from_parts(
        values: Matrix<S>,
        kinds: Vec<ColumnKind>,
        names: Vec<String>,
        code_books: Vec<Option<Vec<String>>>,
        target: Option<TargetSpec>,
    ) -> Self {
        assert_eq!(values.cols(), kinds.len());
        assert_eq!(values.cols(), names.len());
        assert_eq!(values.cols(), code_books.len());
        Dataset { values, kinds, names, code_books, target }
    }

    /// Purely numeric dataset, every column continuous.
    pub fn from_matrix(values: Matrix<S>) -> Self {
        let d = values.cols();
        Dataset {
            values,
            kinds: vec![ColumnKind::Continuous; d],
            names: (0..d).map(|i| format!("x{i}")).collect(),
            code_books: vec![None; d],
            target: None,
        }
    }

    pub fn values(&self) -> &Matrix<S> {
        &self.values
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn code_books(&self) -> &[Option<Vec<String>>] {
        &self.code_books
    }

    pub fn target(&self) -> Option<TargetSpec> {
        self.target
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    /// Observation indicator: 1 where a value is present.
    pub fn observe_mask(&self) -> Mask {
        let mut mask = Mask::filled(self.rows(), self.cols(), false);
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                mask.set(r, c, self.values.get(r, c).is_finite());
            }
        }
        mask
    }

    /// Split off the target column: feature-only dataset plus target values.
    /// The target must be fully observed.
    pub fn split_target(&self) -> Result<(Dataset<S>, TargetData)> {
        let spec = self.target.expect("dataset has no target column");
        let t = spec.column;
        let n = self.rows();
        let mut raw = Vec::with_capacity(n);
        for r in 0..n {
            let v = self.values.get(r, t);
            if !v.is_finite() {
                return Err(DataError::TargetMissing);
            }
            raw.push(v.to_f64().unwrap());
        }
        let target = match spec.kind {
            TargetKind::Continuous => TargetData::Continuous(raw),
            TargetKind::Binary => TargetData::Classes {
                labels: raw.iter().map(|&v| v as usize).collect(),
                classes: 2,
            },
            TargetKind::Multiclass { classes } => TargetData::Classes {
                labels: raw.iter().map(|&v| v as usize).collect(),
                classes,
            },
        };

        let keep: Vec<usize> = (0..self.cols()).filter(|&c| c != t).collect();
        let mut values = Matrix::zeros(n, keep.len());
        for r in 0..n {
            for (j, &c) in keep.iter().enumerate() {
                values.set(r, j, self.values.get(r, c));
            }
        }
        let features = Dataset {
            values,
            kinds: keep.iter().map(|&c| self.kinds[c]).collect(),
            names: keep.iter().map(|&c| self.names[c].clone()).collect(),
            code_books: keep.iter().map(|&c| self.code_books[c].clone()).collect(),
            target: None,
        };
        Ok((features, target))
    }

    /// Replace the value matrix, keeping the schema. Shapes must match.
    pub fn with_values(&self, values: Matrix<S>) -> Result<Dataset<S>> {
        if values.shape() != self.values.shape() {
            return Err(DataError::Shape(values.shape(), self.values.shape()));
        }
        let mut out = self.clone();
        out.values = values;
        Ok(out)
    }

    /// Write as CSV on the original scale. Cells that are unobserved under
    /// `mask` are written as empty strings; categorical codes are decoded
    /// back to their labels.
    pub fn write_csv(&self, path: &Path, mask: Option<&Mask>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names).map_err(csv_io)?;
        for r in 0..self.rows() {
            let mut rec = Vec::with_capacity(self.cols());
            for c in 0..self.cols() {
                let observed = mask.map_or(true, |m| m.get(r, c)) && self.values.get(r, c).is_finite();
                if !observed {
                    rec.push(String::new());
                    continue;
                }
                rec.push(format_cell(self.values.get(r, c), &self.kinds[c], &self.code_books[c]));
            }
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Render one cell the way `write_csv` does: shortest round-trip decimal for
/// continuous values, decoded label for categorical codes.
pub fn format_cell<S: Scalar>(v: S, kind: &ColumnKind, codes: &Option<Vec<String>>) -> String {
    match kind {
        ColumnKind::Continuous => format!("{}", v.to_f64().unwrap()),
        ColumnKind::Categorical { cardinality } => {
            let code = v.to_f64().unwrap().round().max(0.0) as usize;
            let code = code.min(cardinality - 1);
            match codes {
                Some(book) => book[code].clone(),
                None => format!("{code}"),
            }
        }
    }
}

fn csv_io(e: csv::Error) -> DataError {
    DataError::Parse { row: 0, message: e.to_string() }
}

/// Binary observation / corruption indicator matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Mask { rows, cols, bits: vec![value; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn ones_in_col(&self, c: usize) -> usize {
        (0..self.rows).filter(|&r| self.get(r, c)).count()
    }

    pub fn ones_in_row(&self, r: usize) -> usize {
        self.bits[r * self.cols..(r + 1) * self.cols].iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Mask {
        Mask { rows: self.rows, cols: self.cols, bits: self.bits.iter().map(|&b| !b).collect() }
    }

    /// 0/1 weight matrix for the loss terms.
    pub fn to_weights<S: Scalar>(&self) -> Matrix<S> {
        let data = self.bits.iter().map(|&b| if b { S::one() } else { S::zero() }).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// Copy `values`, overwriting cells that are unobserved here with NaN.
    pub fn apply_nan<S: Scalar>(&self, values: &Matrix<S>) -> Matrix<S> {
        assert_eq!(self.shape(), values.shape());
        let mut out = values.clone();
        for (v, &b) in out.data_mut().iter_mut().zip(&self.bits) {
            if !b {
                *v = S::nan();
            }
        }
        out
    }

    /// Rows selected by index, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Mask {
        let mut bits = Vec::with_capacity(indices.len() * self.cols);
        for &r in indices {
            bits.extend_from_slice(&self.bits[r * self.cols..(r + 1) * self.cols]);
        }
        Mask { rows: indices.len(), cols: self.cols, bits }
    }

    /// Plain 0/1 CSV, no header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in 0..self.rows {
            let line: Vec<&str> =
                (0..self.cols).map(|c| if self.get(r, c) { "1" } else { "0" }).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Mask> {
        let content = std::fs::read_to_string(path)?;
        let mut bits = Vec::new();
        let mut cols = 0;
        let mut rows = 0;
        for (i, line) in content.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let row: Vec<bool> = line
                .split(',')
                .map(|t| t.trim() == "1")
                .collect();
            if rows == 0 {
                cols = row.len();
            } else if row.len() != cols {
                return Err(DataError::Parse { row: i + 1, message: "ragged mask row".into() });
            }
            bits.extend(row);
            rows += 1;
        }
        Ok(Mask { rows, cols, bits })
    }
}

/// Per-column mean and population standard deviation, computed over observed
/// cells only. `stds` is always positive (unit fallback for constants).
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats<S> {
    pub means: Vec<S>,
    pub stds: Vec<S>,
}

impl<S: Scalar> ColumnStats<S> {
    /// Standardize every cell of `values` with these statistics (NaN passes
    /// through). Used to put ground truth on the same scale as imputations.
    pub fn apply(&self, values: &Matrix<S>) -> Matrix<S> {
        let mut out = values.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c);
                out.set(r, c, (v - self.means[c]) / self.stds[c]);
            }
        }
        out
    }
}

/// Independently corrupted copies of the zero-filled seed, with the masks
/// marking which observed cells were zeroed in each.
#[derive(Debug, Clone)]
pub struct CorruptionSet<S> {
    pub variants: Vec<Matrix<S>>,
    pub masks: Vec<Mask>,
}

const MISSING_TOKENS: [&str; 3] = ["na", "?", "nan"];

fn is_missing_token(tok: &str) -> bool {
    let t = tok.trim();
    t.is_empty() || MISSING_TOKENS.contains(&t.to_ascii_lowercase().as_str())
}

/// Load a CSV with a header row. Blank cells, "NA", "?" and "nan" count as
/// missing; columns containing non-numeric tokens are ordinal-encoded with a
/// code book ordered by first appearance.
pub fn load_csv<S: Scalar>(path: &Path, hints: &SchemaHints) -> Result<Dataset<S>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_path(path)?;
    let names: Vec<String> =
        reader.headers().map_err(csv_io)?.iter().map(|h| h.trim().to_string()).collect();

    let mut cells: Vec<Vec<String>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Parse { row: i + 1, message: e.to_string() })?;
        cells.push(record.iter().map(|t| t.trim().to_string()).collect());
    }

    let rows = cells.len();
    let cols = names.len();
    if rows < 2 || cols < 2 {
        return Err(DataError::TooSmall { rows, cols });
    }

    let mut values = Matrix::zeros(rows, cols);
    let mut kinds = Vec::with_capacity(cols);
    let mut code_books: Vec<Option<Vec<String>>> = Vec::with_capacity(cols);

    for c in 0..cols {
        let forced = hints.force_categorical.iter().any(|n| n == &names[c]);
        let observed: Vec<(usize, &str)> = (0..rows)
            .filter(|&r| !is_missing_token(&cells[r][c]))
            .map(|r| (r, cells[r][c].as_str()))
            .collect();
        if observed.is_empty() {
            return Err(DataError::AllMissing(names[c].clone()));
        }
        let numeric = !forced && observed.iter().all(|(_, t)| t.parse::<f64>().is_ok());
        if numeric {
            kinds.push(ColumnKind::Continuous);
            code_books.push(None);
            for r in 0..rows {
                let tok = &cells[r][c];
                let v = if is_missing_token(tok) {
                    S::nan()
                } else {
                    S::from_f64(tok.parse::<f64>().unwrap()).unwrap()
                };
                values.set(r, c, v);
            }
        } else {
            // Ordinal encoding, stable by first appearance.
            let mut book: Vec<String> = Vec::new();
            let mut index: HashMap<&str, usize> = HashMap::new();
            for &(_, tok) in &observed {
                if !index.contains_key(tok) {
                    index.insert(tok, book.len());
                    book.push(tok.to_string());
                }
            }
            if book.len() < 2 {
                return Err(DataError::DegenerateCategorical(names[c].clone()));
            }
            for r in 0..rows {
                let tok = &cells[r][c];
                let v = if is_missing_token(tok) {
                    S::nan()
                } else {
                    S::from_usize(index[tok.as_str()]).unwrap()
                };
                values.set(r, c, v);
            }
            kinds.push(ColumnKind::Categorical { cardinality: book.len() });
            code_books.push(Some(book));
        }
    }

    let target = match &hints.target {
        None => None,
        Some(name) => {
            let column = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| DataError::TargetNotFound(name.clone()))?;
            let kind = match kinds[column] {
                ColumnKind::Continuous => TargetKind::Continuous,
                ColumnKind::Categorical { cardinality: 2 } => TargetKind::Binary,
                ColumnKind::Categorical { cardinality } => TargetKind::Multiclass { classes: cardinality },
            };
            Some(TargetSpec { column, kind })
        }
    };

    Ok(Dataset { values, kinds, names, code_books, target })
}

/// Knock out observed cells completely at random. Every cell gets a uniform
/// draw in row-major order, so masks produced from the same seed nest as the
/// rate grows. Afterwards the mask is repaired so each column keeps at least
/// 2 observed cells and each row at least 1, by restoring uniformly chosen
/// cells removed in this call.
pub fn ampute_mcar(mask: &Mask, rate: f64, rng: &mut ChaCha8Rng) -> Result<Mask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DataError::InvalidRate(rate));
    }
    if rate == 0.0 {
        return Ok(mask.clone());
    }
    let (rows, cols) = mask.shape();
    let mut out = mask.clone();
    let mut removed = Mask::filled(rows, cols, false);
    for r in 0..rows {
        for c in 0..cols {
            let u: f64 = rng.random();
            if u < rate && mask.get(r, c) {
                out.set(r, c, false);
                removed.set(r, c, true);
            }
        }
    }
    // Column repair first: restoring cells only adds observations, so the
    // later row repair cannot break it.
    for c in 0..cols {
        while out.ones_in_col(c) < 2 {
            let candidates: Vec<usize> =
                (0..rows).filter(|&r| removed.get(r, c) && !out.get(r, c)).collect();
            if candidates.is_empty() {
                return Err(DataError::Amputation(format!(
                    "column {c} cannot keep 2 observed cells"
                )));
            }
            let pick = candidates[rng.random_range(0..candidates.len())];
            out.set(pick, c, true);
        }
    }
    for r in 0..rows {
        if out.ones_in_row(r) == 0 {
            let candidates: Vec<usize> =
                (0..cols).filter(|&c| removed.get(r, c) && !out.get(r, c)).collect();
            if candidates.is_empty() {
                return Err(DataError::Amputation(format!("row {r} cannot keep 1 observed cell")));
            }
            let pick = candidates[rng.random_range(0..candidates.len())];
            out.set(r, pick, true);
        }
    }
    Ok(out)
}

/// Per-column standardization over observed cells only, population standard
/// deviation, unit fallback for zero variance. Unobserved cells come out as
/// NaN regardless of input, so ground truth cannot leak through.
pub fn standardize<S: Scalar>(values: &Matrix<S>, mask: &Mask) -> Result<(Matrix<S>, ColumnStats<S>)> {
    if values.shape() != mask.shape() {
        return Err(DataError::Shape(values.shape(), mask.shape()));
    }
    let (rows, cols) = values.shape();
    let mut means = Vec::with_capacity(cols);
    let mut stds = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut count = 0usize;
        let mut sum = S::zero();
        for r in 0..rows {
            if mask.get(r, c) {
                count += 1;
                sum += values.get(r, c);
            }
        }
        if count < 2 {
            return Err(DataError::TooSparse(c));
        }
        let mean = sum / S::from_usize(count).unwrap();
        let mut sq = S::zero();
        for r in 0..rows {
            if mask.get(r, c) {
                let d = values.get(r, c) - mean;
                sq += d * d;
            }
        }
        let var = sq / S::from_usize(count).unwrap();
        let std = if var > S::zero() { var.sqrt() } else { S::one() };
        means.push(mean);
        stds.push(std);
    }
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = if mask.get(r, c) {
                (values.get(r, c) - means[c]) / stds[c]
            } else {
                S::nan()
            };
            out.set(r, c, v);
        }
    }
    Ok((out, ColumnStats { means, stds }))
}

/// Back to the original scale: `x * std + mean`, then categorical columns are
/// rounded to the nearest code and clamped into range.
pub fn destandardize<S: Scalar>(
    values: &Matrix<S>,
    stats: &ColumnStats<S>,
    kinds: &[ColumnKind],
) -> Matrix<S> {
    let mut out = values.clone();
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            let mut v = out.get(r, c) * stats.stds[c] + stats.means[c];
            if let ColumnKind::Categorical { cardinality } = kinds[c] {
                let hi = S::from_usize(cardinality - 1).unwrap();
                v = v.round().max(S::zero()).min(hi);
            }
            out.set(r, c, v);
        }
    }
    out
}

/// Zero pre-assignment: unobserved cells become 0, observed cells unchanged.
pub fn zero_fill<S: Scalar>(values: &Matrix<S>, mask: &Mask) -> Matrix<S> {
    assert_eq!(values.shape(), mask.shape());
    let mut out = values.clone();
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            if !mask.get(r, c) {
                out.set(r, c, S::zero());
            }
        }
    }
    out
}

/// Build `variants` independently corrupted copies of the zero-filled seed:
/// each zeroes exactly `round(rate * observed)` observed cells, chosen
/// uniformly without replacement, and records them in its corruption mask.
/// The finished variants are returned in shuffled order.
pub fn corrupt<S: Scalar>(
    seed_matrix: &Matrix<S>,
    mask: &Mask,
    rate: f64,
    variants: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CorruptionSet<S>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DataError::InvalidRate(rate));
    }
    assert!(variants >= 1, "need at least one corruption variant");
    let (rows, cols) = mask.shape();
    let observed: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.get(r, c))
        .collect();
    let count = (rate * observed.len() as f64).round() as usize;

    let mut out_variants = Vec::with_capacity(variants);
    let mut out_masks = Vec::with_capacity(variants);
    for _ in 0..variants {
        let mut variant = seed_matrix.clone();
        let mut cmask = Mask::filled(rows, cols, false);
        for idx in rand::seq::index::sample(rng, observed.len(), count) {
            let (r, c) = observed[idx];
            variant.set(r, c, S::zero());
            cmask.set(r, c, true);
        }
        out_variants.push(variant);
        out_masks.push(cmask);
    }
    let mut order: Vec<usize> = (0..variants).collect();
    order.shuffle(rng);
    let variants_shuffled = order.iter().map(|&i| out_variants[i].clone()).collect();
    let masks_shuffled = order.iter().map(|&i| out_masks[i].clone()).collect();
    Ok(CorruptionSet { variants: variants_shuffled, masks: masks_shuffled })
}

/// JSON sidecar describing columns: kind, code book, and the standardization
/// statistics when available.
#[derive(Debug, Serialize, Deserialize)]
pub struct SchemaSidecar {
    pub columns: Vec<ColumnMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub column: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codes: Option<Vec<String>>,
}

pub fn schema_sidecar<S: Scalar>(ds: &Dataset<S>, stats: Option<&ColumnStats<S>>) -> SchemaSidecar {
    let columns = (0..ds.cols())
        .map(|c| {
            let (kind, cardinality) = match ds.kinds()[c] {
                ColumnKind::Continuous => ("continuous".to_string(), None),
                ColumnKind::Categorical { cardinality } => ("categorical".to_string(), Some(cardinality)),
            };
            ColumnMeta {
                column: ds.names()[c].clone(),
                kind,
                cardinality,
                mean: stats.map(|s| s.means[c].to_f64().unwrap()),
                std: stats.map(|s| s.stds[c].to_f64().unwrap()),
                codes: ds.code_books()[c].clone(),
            }
        })
        .collect();
    SchemaSidecar { columns }
}

/// Full-precision matrix CSV without header (trace export and its tests).
pub fn write_matrix_csv<S: Scalar>(m: &Matrix<S>, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{}", v.to_f64().unwrap())).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_matrix_csv<S: Scalar>(path: &Path) -> Result<Matrix<S>> {
    let content = std::fs::read_to_string(path)?;
    let mut data: Vec<S> = Vec::new();
    let mut cols = 0;
    let mut rows = 0;
    for (i, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| DataError::Parse { row: i + 1, message: e.to_string() })?;
        if rows == 0 {
            cols = row.len();
        } else if row.len() != cols {
            return Err(DataError::Parse { row: i + 1, message: "ragged row".into() });
        }
        data.extend(row.into_iter().map(|v| S::from_f64(v).unwrap()));
        rows += 1;
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_csv_detects_kinds_and_codes() {
        let f = write_tmp("a,b\n1,x\n2,y\n3,x\n");
        let ds: Dataset<f64> = load_csv(f.path(), &SchemaHints::default()).unwrap();
        assert_eq!(ds.kinds()[0], ColumnKind::Continuous);
        assert_eq!(ds.kinds()[1], ColumnKind::Categorical { cardinality: 2 });
        assert_eq!(ds.code_books()[1].as_ref().unwrap(), &vec!["x".to_string(), "y".to_string()]);
        assert_eq!(ds.values().get(0, 1), 0.0);
        assert_eq!(ds.values().get(1, 1), 1.0);
        assert_eq!(ds.values().get(2, 1), 0.0);
    }

    #[test]
    fn load_csv_missing_tokens() {
        let f = write_tmp("a,b\nNA,1\n2,?\n3,nan\n4,\n5,7\n");
        let ds: Dataset<f64> = load_csv(f.path(), &SchemaHints::default()).unwrap();
        assert!(ds.values().get(0, 0).is_nan());
        assert!(ds.values().get(1, 1).is_nan());
        assert!(ds.values().get(2, 1).is_nan());
        assert!(ds.values().get(3, 1).is_nan());
        let mask = ds.observe_mask();
        assert!(!mask.get(0, 0));
        assert!(mask.get(1, 0));
        assert_eq!(mask.count_ones(), 6);
    }

    #[test]
    fn load_csv_rejects_degenerate_and_all_missing() {
        let f = write_tmp("a,b\n1,x\n2,x\n3,x\n");
        let err = load_csv::<f64>(f.path(), &SchemaHints::default()).unwrap_err();
        assert!(matches!(err, DataError::DegenerateCategorical(_)));

        let f = write_tmp("a,b\n1,\n2,NA\n3,?\n");
        let err = load_csv::<f64>(f.path(), &SchemaHints::default()).unwrap_err();
        assert!(matches!(err, DataError::AllMissing(_)));
    }

    #[test]
    fn load_csv_ragged_row_reports_row_number() {
        let f = write_tmp("a,b\n1,2\n3\n");
        let err = load_csv::<f64>(f.path(), &SchemaHints::default()).unwrap_err();
        match err {
            DataError::Parse { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn observe_mask_matches_presence_and_is_idempotent() {
        let values = Matrix::from_rows(&[vec![1.0, f64::NAN], vec![f64::NAN, 2.0]]);
        let ds = Dataset::from_matrix(values);
        let m = ds.observe_mask();
        assert!(m.get(0, 0) && !m.get(0, 1) && !m.get(1, 0) && m.get(1, 1));
        assert_eq!(ds.observe_mask(), m);
    }

    #[test]
    fn ampute_rate_zero_is_identity() {
        let mask = Mask::filled(5, 4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(ampute_mcar(&mask, 0.0, &mut rng).unwrap(), mask);
    }

    #[test]
    fn ampute_hits_expected_fraction() {
        let mask = Mask::filled(1000, 10, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = ampute_mcar(&mask, 0.4, &mut rng).unwrap();
        let frac = out.count_ones() as f64 / 10_000.0;
        assert!((0.58..=0.62).contains(&frac), "observed fraction {frac}");
    }

    #[test]
    fn ampute_is_deterministic_and_nested_across_rates() {
        let mask = Mask::filled(50, 6, true);
        let m1 = ampute_mcar(&mask, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let m2 = ampute_mcar(&mask, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(m1, m2);

        // Same seed, higher rate: cells missing at the low rate stay missing
        // at the high rate. Exact nesting holds as long as the repair pass
        // does not fire, which these sizes and rates keep away from.
        let wide = Mask::filled(60, 10, true);
        let lo = ampute_mcar(&wide, 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let hi = ampute_mcar(&wide, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let nested_violations = (0..60)
            .flat_map(|r| (0..10).map(move |c| (r, c)))
            .filter(|&(r, c)| !lo.get(r, c) && hi.get(r, c))
            .count();
        assert_eq!(nested_violations, 0);
    }

    #[test]
    fn ampute_repair_keeps_columns_and_rows_alive() {
        let mask = Mask::filled(30, 3, true);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = ampute_mcar(&mask, 0.85, &mut rng).unwrap();
            for c in 0..3 {
                assert!(out.ones_in_col(c) >= 2, "seed {seed} col {c}");
            }
            for r in 0..30 {
                assert!(out.ones_in_row(r) >= 1, "seed {seed} row {r}");
            }
        }
    }

    #[test]
    fn standardize_hand_cases() {
        let values = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let values = {
            // Need 2 columns minimum only for datasets, not raw matrices.
            let mut m = Matrix::zeros(3, 2);
            for r in 0..3 {
                m.set(r, 0, values.get(r, 0));
                m.set(r, 1, if r == 1 { f64::NAN } else { values.get(r, 0) });
            }
            m
        };
        let mut mask = Mask::filled(3, 2, true);
        mask.set(1, 1, false);
        let (std_m, stats) = standardize(&values, &mask).unwrap();

        // Column 0: mean 2, population std sqrt(2/3).
        let s = (2.0f64 / 3.0).sqrt();
        assert!((stats.means[0] - 2.0).abs() < 1e-15);
        assert!((stats.stds[0] - s).abs() < 1e-15);
        assert!((std_m.get(0, 0) + 1.0 / s).abs() < 1e-12);
        assert!((std_m.get(1, 0)).abs() < 1e-12);

        // Column 1 observes [1, 3]: mean 2, std 1.
        assert!((stats.means[1] - 2.0).abs() < 1e-15);
        assert!((stats.stds[1] - 1.0).abs() < 1e-15);
        assert_eq!(std_m.get(0, 1), -1.0);
        assert!(std_m.get(1, 1).is_nan());
        assert_eq!(std_m.get(2, 1), 1.0);
    }

    #[test]
    fn standardize_constant_column_falls_back_to_unit_std() {
        let values = Matrix::from_rows(&[vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]]);
        let mask = Mask::filled(3, 2, true);
        let (std_m, stats) = standardize(&values, &mask).unwrap();
        assert_eq!(stats.stds[0], 1.0);
        for r in 0..3 {
            assert_eq!(std_m.get(r, 0), 0.0);
        }
    }

    #[test]
    fn standardize_makes_observed_cells_zero_mean_unit_var() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = Matrix::from_vec(
            200,
            4,
            (0..800).map(|_| rng.random_range(-5.0..9.0)).collect::<Vec<f64>>(),
        );
        let mask = ampute_mcar(&Mask::filled(200, 4, true), 0.3, &mut rng).unwrap();
        let (std_m, _) = standardize(&values, &mask).unwrap();
        for c in 0..4 {
            let obs: Vec<f64> =
                (0..200).filter(|&r| mask.get(r, c)).map(|r| std_m.get(r, c)).collect();
            let mean: f64 = obs.iter().sum::<f64>() / obs.len() as f64;
            let var: f64 = obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / obs.len() as f64;
            assert!(mean.abs() < 1e-10, "col {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-10, "col {c} var {var}");
        }
    }

    #[test]
    fn destandardize_round_trips_and_rounds_categoricals() {
        let values = Matrix::from_rows(&[vec![1.0, 4.0], vec![2.0, 5.5], vec![3.0, 9.0]]);
        let mask = Mask::filled(3, 2, true);
        let (std_m, stats) = standardize(&values, &mask).unwrap();
        let back = destandardize(&std_m, &stats, &[ColumnKind::Continuous, ColumnKind::Continuous]);
        for r in 0..3 {
            for c in 0..2 {
                let diff: f64 = back.get(r, c) - values.get(r, c);
                assert!(diff.abs() < 1e-12);
            }
        }

        // Categorical rounding and clamping on already-destandardized codes.
        let codes = Matrix::from_rows(&[vec![1.4], vec![2.7], vec![-0.4]]);
        let unit = ColumnStats { means: vec![0.0], stds: vec![1.0] };
        let kinds = [ColumnKind::Categorical { cardinality: 3 }];
        let rounded = destandardize(&codes, &unit, &kinds);
        assert_eq!(rounded.get(0, 0), 1.0);
        assert_eq!(rounded.get(1, 0), 2.0);
        assert_eq!(rounded.get(2, 0), 0.0);
    }

    #[test]
    fn zero_fill_cases() {
        let values = Matrix::from_rows(&[vec![1.0, f64::NAN], vec![f64::NAN, 2.0]]);
        let ds = Dataset::from_matrix(values);
        let mask = ds.observe_mask();
        let filled = zero_fill(ds.values(), &mask);
        assert_eq!(filled, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]));

        let full = Matrix::from_rows(&[vec![1.0, 2.0]]);
        assert_eq!(zero_fill(&full, &Mask::filled(1, 2, true)), full);

        let empty_row = Mask::filled(1, 2, false);
        assert_eq!(zero_fill(&full, &empty_row), Matrix::zeros(1, 2));
    }

    #[test]
    fn corrupt_exact_count_and_masks_inside_observed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mask = Mask::filled(5, 2, true);
        // Two missing cells -> 8 observed; rate 0.25 -> exactly 2 per variant.
        mask.set(0, 0, false);
        mask.set(3, 1, false);
        let seed_m = zero_fill(&Matrix::filled(5, 2, 1.0), &mask);
        let set = corrupt(&seed_m, &mask, 0.25, 4, &mut rng).unwrap();
        assert_eq!(set.variants.len(), 4);
        for (v, cm) in set.variants.iter().zip(&set.masks) {
            assert_eq!(cm.count_ones(), 2);
            for r in 0..5 {
                for c in 0..2 {
                    if cm.get(r, c) {
                        assert!(mask.get(r, c), "corruption outside observed");
                        assert_eq!(v.get(r, c), 0.0);
                    } else {
                        assert_eq!(v.get(r, c), seed_m.get(r, c));
                    }
                }
            }
        }
    }

    #[test]
    fn corrupt_rate_zero_keeps_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mask = Mask::filled(3, 2, true);
        let seed_m = Matrix::filled(3, 2, 2.5);
        let set = corrupt(&seed_m, &mask, 0.0, 3, &mut rng).unwrap();
        for (v, cm) in set.variants.iter().zip(&set.masks) {
            assert_eq!(v, &seed_m);
            assert_eq!(cm.count_ones(), 0);
        }
    }

    #[test]
    fn corrupt_variant_overlap_matches_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask = Mask::filled(100, 100, true);
        let seed_m = Matrix::filled(100, 100, 1.0);
        let set = corrupt(&seed_m, &mask, 0.2, 2, &mut rng).unwrap();
        let overlap = (0..100)
            .flat_map(|r| (0..100).map(move |c| (r, c)))
            .filter(|&(r, c)| set.masks[0].get(r, c) && set.masks[1].get(r, c))
            .count() as f64;
        // Expect 0.04 * 10^4 = 400; sigma ~ sqrt(400 * 0.96) ~ 19.6.
        assert!((overlap - 400.0).abs() < 3.0 * 19.6, "overlap {overlap}");
    }

    #[test]
    fn mask_csv_round_trip() {
        let mut mask = Mask::filled(3, 4, true);
        mask.set(1, 2, false);
        mask.set(2, 0, false);
        let f = tempfile::NamedTempFile::new().unwrap();
        mask.write_csv(f.path()).unwrap();
        assert_eq!(Mask::read_csv(f.path()).unwrap(), mask);
    }

    #[test]
    fn matrix_csv_round_trip_is_exact() {
        let m = Matrix::from_rows(&[
            vec![1.0 / 3.0, -2.718281828459045],
            vec![1e-17, 4.9e300],
        ]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_matrix_csv(&m, f.path()).unwrap();
        let back: Matrix<f64> = read_matrix_csv(f.path()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn dataset_csv_write_decodes_categories() {
        let f = write_tmp("a,b\n1.5,x\n2.25,y\n3,x\n");
        let ds: Dataset<f64> = load_csv(f.path(), &SchemaHints::default()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        ds.write_csv(out.path(), None).unwrap();
        let text = std::fs::read_to_string(out.path()).unwrap();
        assert_eq!(text, "a,b\n1.5,x\n2.25,y\n3,x\n");
    }

    #[test]
    fn split_target_extracts_classes() {
        let f = write_tmp("a,b,y\n1,4,p\n2,5,q\n3,6,p\n");
        let hints = SchemaHints { target: Some("y".into()), ..Default::default() };
        let ds: Dataset<f64> = load_csv(f.path(), &hints).unwrap();
        assert_eq!(ds.target().unwrap().kind, TargetKind::Binary);
        let (features, target) = ds.split_target().unwrap();
        assert_eq!(features.cols(), 2);
        match target {
            TargetData::Classes { labels, classes } => {
                assert_eq!(classes, 2);
                assert_eq!(labels, vec![0, 1, 0]);
            }
            _ => panic!("expected classes"),
        }
    }
}
