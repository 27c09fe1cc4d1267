//! Text formats for arrays, kernels, and factor matrices.
//!
//! Everything is line-oriented delimited text without quoting: long-format
//! data tables (one row per cell), labeled square matrices, entity-by-marker
//! matrices, and level files (one label per line). Floats are written with
//! 17 significant digits, so a write/read cycle reproduces every value
//! bit-exactly. Parse errors carry 1-based line numbers counting the header,
//! matching what an editor shows.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{CoreError, Result};
use crate::missing::{PartialArray, PartialSample};
use crate::tensor::{MultiwayArray, ObservationMask, Shape};

/// Canonical float formatting: 17 significant digits, enough for an exact
/// text round trip of any finite `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_value(token: &str, line: usize, column: &str) -> Result<f64> {
    token.trim().parse::<f64>().map_err(|_| CoreError::Parse {
        line,
        message: format!("column '{column}': '{token}' is not a number"),
    })
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn split_row(line: &str, delimiter: char) -> Vec<String> {
    line.trim_end_matches(['\r', '\n'])
        .split(delimiter)
        .map(|f| f.trim().to_string())
        .collect()
}

/// Column layout of a long-format data file: one row per cell, one column
/// per array dimension holding the level label, an optional replicate-id
/// column, and a value column.
#[derive(Debug, Clone)]
pub struct TableSchema {
    /// Dimension column names, in axis order.
    pub dimensions: Vec<String>,
    /// Replicate-id column name; a file without it holds a single array.
    pub sample_column: String,
    pub value_column: String,
    /// Token marking a missing value; blank fields count as missing too.
    pub missing_token: String,
    pub delimiter: char,
    /// Per-dimension fixed level order (e.g. from a level file); `None`
    /// orders levels by first appearance.
    pub fixed_levels: Vec<Option<Vec<String>>>,
}

impl TableSchema {
    pub fn new(dimensions: Vec<String>) -> Self {
        let fixed = vec![None; dimensions.len()];
        TableSchema {
            dimensions,
            sample_column: String::from("sample"),
            value_column: String::from("value"),
            missing_token: String::from("NA"),
            delimiter: ',',
            fixed_levels: fixed,
        }
    }
}

/// A partially observed sample plus the label dictionaries tying its axes
/// and replicates back to the source table.
#[derive(Debug, Clone)]
pub struct LongTable {
    pub sample: PartialSample,
    /// Per-dimension level labels in axis order.
    pub levels: Vec<Vec<String>>,
    /// Replicate ids in first-appearance order; empty when the source had no
    /// replicate column (then `sample` holds exactly one array).
    pub sample_ids: Vec<String>,
}

/// Growable label dictionary preserving first-appearance order, or a fixed
/// one that rejects unknown labels.
struct LevelIndex {
    order: Vec<String>,
    index: HashMap<String, usize>,
    fixed: bool,
}

impl LevelIndex {
    fn open() -> Self {
        LevelIndex {
            order: Vec::new(),
            index: HashMap::new(),
            fixed: false,
        }
    }

    fn fixed(levels: &[String]) -> Self {
        let mut index = HashMap::new();
        for (i, l) in levels.iter().enumerate() {
            index.insert(l.clone(), i);
        }
        LevelIndex {
            order: levels.to_vec(),
            index,
            fixed: true,
        }
    }

    fn resolve(&mut self, label: &str, line: usize, column: &str) -> Result<usize> {
        if let Some(&i) = self.index.get(label) {
            return Ok(i);
        }
        if self.fixed {
            return Err(CoreError::Parse {
                line,
                message: format!("column '{column}': label '{label}' is not a declared level"),
            });
        }
        let i = self.order.len();
        self.order.push(label.to_string());
        self.index.insert(label.to_string(), i);
        Ok(i)
    }
}

/// Reads a long-format table into one [`PartialArray`] per replicate id
/// (a single array when the file has no replicate column). Cells never
/// referenced by any row are missing, as are rows carrying the missing
/// token or a blank value field.
pub fn load_long_table(path: &Path, schema: &TableSchema) -> Result<LongTable> {
    if schema.dimensions.is_empty() {
        return Err(CoreError::domain("schema declares no dimension columns"));
    }
    if schema.fixed_levels.len() != schema.dimensions.len() {
        return Err(CoreError::shape(format!(
            "{} fixed level lists for {} dimensions",
            schema.fixed_levels.len(),
            schema.dimensions.len()
        )));
    }
    let reader = open_reader(path)?;
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => split_row(&h?, schema.delimiter),
        None => {
            return Err(CoreError::Parse {
                line: 1,
                message: String::from("empty file"),
            })
        }
    };
    let find = |name: &str| header.iter().position(|h| h == name);
    let mut dim_cols = Vec::with_capacity(schema.dimensions.len());
    for name in &schema.dimensions {
        dim_cols.push(find(name).ok_or_else(|| CoreError::Parse {
            line: 1,
            message: format!("dimension column '{name}' not found in header"),
        })?);
    }
    let value_col = find(&schema.value_column).ok_or_else(|| CoreError::Parse {
        line: 1,
        message: format!("value column '{}' not found in header", schema.value_column),
    })?;
    let sample_col = find(&schema.sample_column);

    let mut levels: Vec<LevelIndex> = schema
        .fixed_levels
        .iter()
        .map(|f| match f {
            Some(l) => LevelIndex::fixed(l),
            None => LevelIndex::open(),
        })
        .collect();
    let mut samples = LevelIndex::open();

    // (replicate, coordinates, value-or-missing, source line)
    let mut records: Vec<(usize, Vec<usize>, Option<f64>, usize)> = Vec::new();
    let needed = dim_cols
        .iter()
        .chain(sample_col.iter())
        .chain(std::iter::once(&value_col))
        .max()
        .copied()
        .unwrap_or(0);
    for (i, row) in lines.enumerate() {
        let line = i + 2;
        let row = row?;
        if row.trim().is_empty() {
            continue;
        }
        let fields = split_row(&row, schema.delimiter);
        if fields.len() <= needed {
            return Err(CoreError::Parse {
                line,
                message: format!(
                    "row has {} fields but the header implies at least {}",
                    fields.len(),
                    needed + 1
                ),
            });
        }
        let mut coords = Vec::with_capacity(dim_cols.len());
        for (k, &c) in dim_cols.iter().enumerate() {
            coords.push(levels[k].resolve(&fields[c], line, &schema.dimensions[k])?);
        }
        let rep = match sample_col {
            Some(c) => samples.resolve(&fields[c], line, &schema.sample_column)?,
            None => 0,
        };
        let token = &fields[value_col];
        let value = if token.is_empty() || *token == schema.missing_token {
            None
        } else {
            Some(parse_value(token, line, &schema.value_column)?)
        };
        records.push((rep, coords, value, line));
    }
    if records.is_empty() {
        return Err(CoreError::Parse {
            line: 2,
            message: String::from("no data rows"),
        });
    }

    let dims: Vec<usize> = levels.iter().map(|l| l.order.len()).collect();
    let shape = Shape::new(dims)?;
    let n_samples = if sample_col.is_some() {
        samples.order.len()
    } else {
        1
    };
    let mut values = vec![vec![0.0; shape.len()]; n_samples];
    let mut observed = vec![vec![false; shape.len()]; n_samples];
    let mut seen = vec![vec![false; shape.len()]; n_samples];
    for (rep, coords, value, line) in records {
        let t = shape.offset(&coords)?;
        if seen[rep][t] {
            return Err(CoreError::Parse {
                line,
                message: format!(
                    "duplicate key: replicate '{}', cell ({})",
                    if sample_col.is_some() {
                        samples.order[rep].as_str()
                    } else {
                        "-"
                    },
                    coords
                        .iter()
                        .enumerate()
                        .map(|(k, &c)| levels[k].order[c].clone())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            });
        }
        seen[rep][t] = true;
        if let Some(v) = value {
            values[rep][t] = v;
            observed[rep][t] = true;
        }
    }

    let mut arrays = Vec::with_capacity(n_samples);
    for (vals, flags) in values.into_iter().zip(observed) {
        let arr = MultiwayArray::from_vec(shape.clone(), vals)?;
        arrays.push(PartialArray::new(arr, ObservationMask::from_flags(flags))?);
    }
    Ok(LongTable {
        sample: PartialSample::new(arrays)?,
        levels: levels.into_iter().map(|l| l.order).collect(),
        sample_ids: if sample_col.is_some() {
            samples.order
        } else {
            Vec::new()
        },
    })
}

/// Writes a sample as a long-format table, the inverse of
/// [`load_long_table`]. Missing cells are emitted with the missing token
/// when `emit_missing` is set and skipped otherwise; in the latter case a
/// round trip needs `fixed_levels` to reproduce the axis order.
pub fn write_long_table(
    table: &LongTable,
    schema: &TableSchema,
    path: &Path,
    emit_missing: bool,
) -> Result<()> {
    let shape = table.sample.shape();
    if schema.dimensions.len() != shape.order() || table.levels.len() != shape.order() {
        return Err(CoreError::shape(format!(
            "schema has {} dimension columns and {} level lists for an order-{} sample",
            schema.dimensions.len(),
            table.levels.len(),
            shape.order()
        )));
    }
    for (k, l) in table.levels.iter().enumerate() {
        if l.len() != shape.dim(k) {
            return Err(CoreError::shape(format!(
                "dimension {k} has {} levels for size {}",
                l.len(),
                shape.dim(k)
            )));
        }
    }
    let with_sample = !table.sample_ids.is_empty();
    if with_sample && table.sample_ids.len() != table.sample.len() {
        return Err(CoreError::shape(format!(
            "{} replicate ids for {} arrays",
            table.sample_ids.len(),
            table.sample.len()
        )));
    }
    if !with_sample && table.sample.len() != 1 {
        return Err(CoreError::domain(
            "replicate ids are required to write more than one array",
        ));
    }

    let d = schema.delimiter;
    let mut w = create_writer(path)?;
    let mut header = schema.dimensions.join(&d.to_string());
    if with_sample {
        header.push(d);
        header.push_str(&schema.sample_column);
    }
    header.push(d);
    header.push_str(&schema.value_column);
    writeln!(w, "{header}")?;

    for (q, obs) in table.sample.observations().iter().enumerate() {
        for t in 0..shape.len() {
            let is_obs = obs.mask().is_observed(t);
            if !is_obs && !emit_missing {
                continue;
            }
            let idx = shape.multi_index(t);
            let mut row = String::new();
            for (k, &c) in idx.iter().enumerate() {
                row.push_str(&table.levels[k][c]);
                row.push(d);
            }
            if with_sample {
                row.push_str(&table.sample_ids[q]);
                row.push(d);
            }
            if is_obs {
                row.push_str(&format_value(obs.values().values()[t]));
            } else {
                row.push_str(&schema.missing_token);
            }
            writeln!(w, "{row}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a square matrix with row and column labels: header row is an
/// empty corner followed by the labels, each data row starts with its label.
pub fn write_labeled_matrix(
    path: &Path,
    labels: &[String],
    matrix: &DMatrix<f64>,
    delimiter: char,
) -> Result<()> {
    if matrix.nrows() != labels.len() || matrix.ncols() != labels.len() {
        return Err(CoreError::shape(format!(
            "{} labels for a {}x{} matrix",
            labels.len(),
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    let mut w = create_writer(path)?;
    let d = delimiter;
    writeln!(w, "{}", std::iter::once("").chain(labels.iter().map(String::as_str)).collect::<Vec<_>>().join(&d.to_string()))?;
    for r in 0..matrix.nrows() {
        let mut row = labels[r].clone();
        for c in 0..matrix.ncols() {
            row.push(d);
            row.push_str(&format_value(matrix[(r, c)]));
        }
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a labeled square matrix written by [`write_labeled_matrix`]; row
/// labels must repeat the column labels in order.
pub fn read_labeled_matrix(path: &Path, delimiter: char) -> Result<(Vec<String>, DMatrix<f64>)> {
    let reader = open_reader(path)?;
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => split_row(&h?, delimiter),
        None => {
            return Err(CoreError::Parse {
                line: 1,
                message: String::from("empty file"),
            })
        }
    };
    if header.len() < 2 {
        return Err(CoreError::Parse {
            line: 1,
            message: String::from("header must hold a corner field and at least one label"),
        });
    }
    let labels: Vec<String> = header[1..].to_vec();
    let n = labels.len();
    let mut matrix = DMatrix::zeros(n, n);
    let mut r = 0usize;
    for (i, row) in lines.enumerate() {
        let line = i + 2;
        let row = row?;
        if row.trim().is_empty() {
            continue;
        }
        if r >= n {
            return Err(CoreError::Parse {
                line,
                message: format!("more than {n} data rows for {n} labels"),
            });
        }
        let fields = split_row(&row, delimiter);
        if fields.len() != n + 1 {
            return Err(CoreError::Parse {
                line,
                message: format!("row has {} fields, expected {}", fields.len(), n + 1),
            });
        }
        if fields[0] != labels[r] {
            return Err(CoreError::Parse {
                line,
                message: format!(
                    "row label '{}' does not match column label '{}'",
                    fields[0], labels[r]
                ),
            });
        }
        for c in 0..n {
            matrix[(r, c)] = parse_value(&fields[c + 1], line, &labels[c])?;
        }
        r += 1;
    }
    if r != n {
        return Err(CoreError::Parse {
            line: r + 2,
            message: format!("{r} data rows for {n} labels"),
        });
    }
    Ok((labels, matrix))
}

/// A validated similarity kernel, with the repairs that were applied to the
/// raw file recorded.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub labels: Vec<String>,
    pub matrix: DMatrix<f64>,
    /// Largest absolute asymmetry of the raw matrix (symmetrized away).
    pub asymmetry: f64,
    /// Total negative eigenvalue mass clamped to zero.
    pub repair_delta: f64,
}

/// Loads a labeled square kernel, symmetrizes it, and clamps tiny negative
/// eigenvalues. Asymmetry beyond 1e-6 or clamped mass beyond 1e-6 of the
/// trace rejects the file instead of repairing it.
pub fn load_kernel_matrix(path: &Path, delimiter: char) -> Result<KernelMatrix> {
    let (labels, raw) = read_labeled_matrix(path, delimiter)?;
    let n = raw.nrows();
    let mut asymmetry: f64 = 0.0;
    for r in 0..n {
        for c in 0..n {
            if !raw[(r, c)].is_finite() {
                return Err(CoreError::domain("kernel has non-finite entries"));
            }
            asymmetry = asymmetry.max((raw[(r, c)] - raw[(c, r)]).abs());
        }
    }
    if asymmetry > 1e-6 {
        return Err(CoreError::domain(format!(
            "kernel asymmetry {asymmetry:.3e} exceeds 1e-6; refusing to symmetrize"
        )));
    }
    let sym = (&raw + raw.transpose()) * 0.5;
    let trace = sym.trace();
    if !(trace > 0.0) {
        return Err(CoreError::domain(format!(
            "kernel trace {trace} must be positive"
        )));
    }
    let eig = SymmetricEigen::new(sym.clone());
    let repair_delta: f64 = eig.eigenvalues.iter().map(|e| (-e).max(0.0)).sum();
    if repair_delta > 1e-6 * trace {
        return Err(CoreError::domain(format!(
            "negative eigenvalue mass {repair_delta:.3e} exceeds 1e-6 of trace {trace:.3e}"
        )));
    }
    let matrix = if repair_delta > 0.0 {
        let clamped = eig.eigenvalues.map(|e| e.max(0.0));
        let rebuilt =
            &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        (&rebuilt + rebuilt.transpose()) * 0.5
    } else {
        sym
    };
    Ok(KernelMatrix {
        labels,
        matrix,
        asymmetry,
        repair_delta,
    })
}

/// An entity-by-marker score matrix with entity labels.
#[derive(Debug, Clone)]
pub struct MarkerMatrix {
    pub labels: Vec<String>,
    pub values: DMatrix<f64>,
}

impl MarkerMatrix {
    pub fn new(labels: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != labels.len() {
            return Err(CoreError::shape(format!(
                "{} labels for {} marker rows",
                labels.len(),
                values.nrows()
            )));
        }
        if values.nrows() < 2 {
            return Err(CoreError::domain("marker matrix needs at least 2 entities"));
        }
        if values.ncols() == 0 {
            return Err(CoreError::domain("marker matrix needs at least 1 marker"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::domain("marker matrix has non-finite entries"));
        }
        Ok(MarkerMatrix { labels, values })
    }
}

/// Loads an entity-by-marker matrix: header row with a corner field and
/// marker names, one row per entity starting with its label.
pub fn load_marker_matrix(path: &Path, delimiter: char) -> Result<MarkerMatrix> {
    let reader = open_reader(path)?;
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => split_row(&h?, delimiter),
        None => {
            return Err(CoreError::Parse {
                line: 1,
                message: String::from("empty file"),
            })
        }
    };
    if header.len() < 2 {
        return Err(CoreError::Parse {
            line: 1,
            message: String::from("header must hold a corner field and at least one marker"),
        });
    }
    let p = header.len() - 1;
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, row) in lines.enumerate() {
        let line = i + 2;
        let row = row?;
        if row.trim().is_empty() {
            continue;
        }
        let fields = split_row(&row, delimiter);
        if fields.len() != p + 1 {
            return Err(CoreError::Parse {
                line,
                message: format!("row has {} fields, expected {}", fields.len(), p + 1),
            });
        }
        labels.push(fields[0].clone());
        let mut vals = Vec::with_capacity(p);
        for c in 0..p {
            vals.push(parse_value(&fields[c + 1], line, &header[c + 1])?);
        }
        rows.push(vals);
    }
    let n = rows.len();
    let values = DMatrix::from_fn(n, p, |r, c| rows[r][c]);
    MarkerMatrix::new(labels, values)
}

/// Builds a relationship kernel from marker scores: (optionally) center each
/// marker column, then `K = W W' / c` with `c = trace(W W')/n`, so
/// `trace(K) = n` and the mixed model's variance ratio reads as error to
/// signal variance per dimension.
pub fn marker_kernel(markers: &MarkerMatrix, center: bool) -> Result<DMatrix<f64>> {
    let n = markers.values.nrows();
    let mut w = markers.values.clone();
    if center {
        for mut col in w.column_iter_mut() {
            let avg = col.mean();
            col.add_scalar_mut(-avg);
        }
    }
    let g = &w * w.transpose();
    let c = g.trace() / n as f64;
    if !(c > 0.0) || !c.is_finite() {
        return Err(CoreError::domain(
            "markers have zero variance; relationship kernel is degenerate",
        ));
    }
    Ok(g / c)
}

/// Reads a level file: one label per line, fixing an axis order. Blank
/// lines are skipped; duplicate labels are rejected.
pub fn load_level_file(path: &Path) -> Result<Vec<String>> {
    let reader = open_reader(path)?;
    let mut labels = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let label = line.trim();
        if label.is_empty() {
            continue;
        }
        if seen.insert(label.to_string(), ()).is_some() {
            return Err(CoreError::Parse {
                line: i + 1,
                message: format!("duplicate label '{label}'"),
            });
        }
        labels.push(label.to_string());
    }
    if labels.is_empty() {
        return Err(CoreError::Parse {
            line: 1,
            message: String::from("level file holds no labels"),
        });
    }
    Ok(labels)
}
