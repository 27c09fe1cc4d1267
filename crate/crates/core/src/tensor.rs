//! Dense multiway arrays and the index algebra the models are built on.
//!
//! Cells are stored in vectorization order with dimension 0 fastest: the
//! linear offset of zero-based multi-index `(j_0, ..., j_{i-1})` is
//! `j_0 + j_1*m_0 + j_2*m_0*m_1 + ...`. All mode arguments in this crate are
//! zero-based; [`linear_index`] is the one function speaking the one-based
//! numbering used in written-out formulas and file formats.

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};

/// Extents of a multiway array, one entry per dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl Shape {
    /// Builds a shape from per-dimension extents. Every extent must be at
    /// least 1 and at least one dimension must be present.
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(CoreError::shape("a shape needs at least one dimension"));
        }
        if let Some(pos) = dims.iter().position(|&m| m == 0) {
            return Err(CoreError::shape(format!(
                "dimension {pos} has extent 0; extents must be positive"
            )));
        }
        let mut strides = Vec::with_capacity(dims.len());
        let mut acc: usize = 1;
        for &m in &dims {
            strides.push(acc);
            acc = acc.checked_mul(m).ok_or_else(|| {
                CoreError::shape(format!("total cell count overflows usize for {dims:?}"))
            })?;
        }
        Ok(Shape {
            dims,
            strides,
            len: acc,
        })
    }

    /// Number of dimensions.
    pub fn order(&self) -> usize {
        self.dims.len()
    }

    /// Extents, one per dimension.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Extent of one dimension.
    pub fn dim(&self, mode: usize) -> usize {
        self.dims[mode]
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Stride of `mode` in the canonical layout: the product of the extents
    /// of all lower dimensions.
    pub fn stride(&self, mode: usize) -> usize {
        self.strides[mode]
    }

    /// Product of the extents of every dimension except `mode`.
    pub fn codim(&self, mode: usize) -> usize {
        self.len / self.dims[mode]
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            Err(CoreError::InvalidMode {
                mode,
                order: self.order(),
            })
        } else {
            Ok(())
        }
    }

    /// Canonical linear offset of a zero-based multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.order() {
            return Err(CoreError::shape(format!(
                "index has {} coordinates but the array has {} dimensions",
                index.len(),
                self.order()
            )));
        }
        let mut t = 0usize;
        for (d, (&j, &m)) in index.iter().zip(&self.dims).enumerate() {
            if j >= m {
                return Err(CoreError::domain(format!(
                    "coordinate {j} out of range for dimension {d} of extent {m}"
                )));
            }
            t += j * self.strides[d];
        }
        Ok(t)
    }

    /// Zero-based multi-index of a canonical linear offset.
    pub fn multi_index(&self, offset: usize) -> Vec<usize> {
        debug_assert!(offset < self.len);
        let mut idx = Vec::with_capacity(self.order());
        for d in 0..self.order() {
            idx.push((offset / self.strides[d]) % self.dims[d]);
        }
        idx
    }
}

/// One-based linear position of a one-based multi-index in vectorization
/// order, i.e. `(j_i - 1) m_{i-1} ... m_1 + ... + (j_2 - 1) m_1 + j_1`.
pub fn linear_index(index: &[usize], shape: &Shape) -> Result<usize> {
    if index.len() != shape.order() {
        return Err(CoreError::shape(format!(
            "index has {} coordinates but the array has {} dimensions",
            index.len(),
            shape.order()
        )));
    }
    for (d, (&j, &m)) in index.iter().zip(shape.dims()).enumerate() {
        if j == 0 || j > m {
            return Err(CoreError::domain(format!(
                "coordinate {j} out of range for dimension {d} of extent {m} (one-based)"
            )));
        }
    }
    let zero_based: Vec<usize> = index.iter().map(|&j| j - 1).collect();
    Ok(shape.offset(&zero_based)? + 1)
}

/// Dense array of `f64` cells in canonical layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiwayArray {
    shape: Shape,
    data: Vec<f64>,
}

impl MultiwayArray {
    /// Wraps a value buffer already in vectorization order.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(CoreError::shape(format!(
                "{} values supplied for a shape holding {} cells",
                data.len(),
                shape.len()
            )));
        }
        Ok(MultiwayArray { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.len();
        MultiwayArray {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn constant(shape: Shape, value: f64) -> Self {
        let n = shape.len();
        MultiwayArray {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Cell values in vectorization order (the `rvec` of the array).
    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.shape.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let t = self.shape.offset(index)?;
        self.data[t] = value;
        Ok(())
    }

    /// Elementwise sum of squares.
    pub fn square_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Elementwise difference; shapes must agree.
    pub fn sub(&self, other: &MultiwayArray) -> Result<MultiwayArray> {
        if self.shape != other.shape {
            return Err(CoreError::shape("arrays differ in shape"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(MultiwayArray {
            shape: self.shape.clone(),
            data,
        })
    }
}

/// Rebuilds an array from a value vector in vectorization order.
pub fn inverse_rvec(values: Vec<f64>, shape: Shape) -> Result<MultiwayArray> {
    MultiwayArray::from_vec(shape, values)
}

/// Mode-`k` matricization: an `m_k x (n / m_k)` matrix whose columns are the
/// mode-`k` fibers, ordered canonically over the remaining dimensions.
pub fn matricize(x: &MultiwayArray, mode: usize) -> Result<DMatrix<f64>> {
    let shape = x.shape();
    shape.check_mode(mode)?;
    let m_k = shape.dim(mode);
    let cols = shape.codim(mode);
    let data = x.values();
    if mode == 0 {
        // Dimension 0 is fastest, so the buffer is already column-major.
        return Ok(DMatrix::from_column_slice(m_k, cols, data));
    }
    let s_k = shape.stride(mode);
    let block = s_k * m_k;
    let mut out = DMatrix::zeros(m_k, cols);
    for (t, &v) in data.iter().enumerate() {
        let row = (t / s_k) % m_k;
        let col = t % s_k + (t / block) * s_k;
        out[(row, col)] = v;
    }
    Ok(out)
}

/// Inverse of [`matricize`]: folds an `m_k x (n / m_k)` matrix back into an
/// array of the given shape along `mode`.
pub fn dematricize(m: &DMatrix<f64>, mode: usize, shape: &Shape) -> Result<MultiwayArray> {
    shape.check_mode(mode)?;
    let m_k = shape.dim(mode);
    let cols = shape.codim(mode);
    if m.nrows() != m_k || m.ncols() != cols {
        return Err(CoreError::shape(format!(
            "matrix is {}x{} but mode-{mode} matricization of this shape is {m_k}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    if mode == 0 {
        return MultiwayArray::from_vec(shape.clone(), m.as_slice().to_vec());
    }
    let s_k = shape.stride(mode);
    let block = s_k * m_k;
    let mut data = vec![0.0; shape.len()];
    for (t, slot) in data.iter_mut().enumerate() {
        let row = (t / s_k) % m_k;
        let col = t % s_k + (t / block) * s_k;
        *slot = m[(row, col)];
    }
    MultiwayArray::from_vec(shape.clone(), data)
}

/// Multiplies `x` along `mode` by `a` (whose column count must match the
/// extent of that mode), returning an array whose `mode` extent is `a`'s row
/// count.
pub fn mode_multiply(x: &MultiwayArray, a: &DMatrix<f64>, mode: usize) -> Result<MultiwayArray> {
    let shape = x.shape();
    shape.check_mode(mode)?;
    if a.ncols() != shape.dim(mode) {
        return Err(CoreError::shape(format!(
            "factor for mode {mode} has {} columns but the mode has extent {}",
            a.ncols(),
            shape.dim(mode)
        )));
    }
    let unfolded = matricize(x, mode)?;
    let product = a * unfolded;
    let mut dims = shape.dims().to_vec();
    dims[mode] = a.nrows();
    dematricize(&product, mode, &Shape::new(dims)?)
}

/// Multiplies `x` by several factors, one per listed mode, applying them in
/// the order given. Modes must be distinct; for distinct modes the result
/// does not depend on the order.
pub fn tucker_multiply(x: &MultiwayArray, factors: &[(usize, &DMatrix<f64>)]) -> Result<MultiwayArray> {
    for (i, (mode, _)) in factors.iter().enumerate() {
        if factors[..i].iter().any(|(m, _)| m == mode) {
            return Err(CoreError::domain(format!(
                "mode {mode} listed twice in a Tucker product"
            )));
        }
    }
    let mut acc = x.clone();
    for &(mode, a) in factors {
        acc = mode_multiply(&acc, a, mode)?;
    }
    Ok(acc)
}

/// Kronecker product `a (x) b`: block `(u, v)` equals `a[(u, v)] * b`.
pub fn kronecker_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Which cells of an array are observed, in canonical cell order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    observed: Vec<bool>,
    count: usize,
}

impl ObservationMask {
    pub fn from_flags(observed: Vec<bool>) -> Self {
        let count = observed.iter().filter(|&&b| b).count();
        ObservationMask { observed, count }
    }

    /// Mask with every cell observed.
    pub fn full(len: usize) -> Self {
        ObservationMask {
            observed: vec![true; len],
            count: len,
        }
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.count
    }

    pub fn missing_count(&self) -> usize {
        self.observed.len() - self.count
    }

    pub fn is_observed(&self, offset: usize) -> bool {
        self.observed[offset]
    }

    /// Canonical offsets of observed cells, ascending.
    pub fn observed_offsets(&self) -> impl Iterator<Item = usize> + '_ {
        self.observed
            .iter()
            .enumerate()
            .filter_map(|(t, &b)| b.then_some(t))
    }

    /// Canonical offsets of missing cells, ascending.
    pub fn missing_offsets(&self) -> impl Iterator<Item = usize> + '_ {
        self.observed
            .iter()
            .enumerate()
            .filter_map(|(t, &b)| (!b).then_some(t))
    }
}
