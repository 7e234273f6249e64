use crate::error::{Error, Result};
use crate::math::{Matrix, Scalar};

/// Binary keep (true) / pruned (false) pattern over a matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl SparseMask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![false; rows * cols],
        }
    }

    pub fn from_bools(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} mask bits cannot cover a {rows}x{cols} matrix",
                keep.len()
            )));
        }
        Ok(Self { rows, cols, keep })
    }

    /// Keep wherever the matrix is nonzero.
    pub fn from_nonzero<T: Scalar>(m: &Matrix<T>) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            keep: m.data().iter().map(|v| !v.is_zero()).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.keep.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, keep: bool) {
        self.keep[r * self.cols + c] = keep;
    }

    pub fn count_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn count_pruned(&self) -> usize {
        self.len() - self.count_kept()
    }

    /// Pruned fraction.
    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.count_pruned() as f64 / self.len() as f64
        }
    }

    pub fn is_dense(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    fn check_shape<T: Scalar>(&self, m: &Matrix<T>) -> Result<()> {
        if self.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "mask {}x{} vs matrix {}x{}",
                self.rows,
                self.cols,
                m.rows(),
                m.cols()
            )));
        }
        Ok(())
    }

    /// Zero every pruned position in place.
    pub fn apply<T: Scalar>(&self, m: &mut Matrix<T>) -> Result<()> {
        self.check_shape(m)?;
        for (v, &k) in m.data_mut().iter_mut().zip(&self.keep) {
            if !k {
                *v = T::zero();
            }
        }
        Ok(())
    }

    /// True when every pruned position of `m` holds exactly zero.
    pub fn is_respected_by<T: Scalar>(&self, m: &Matrix<T>) -> bool {
        self.shape() == m.shape() && m.data().iter().zip(&self.keep).all(|(v, &k)| k || v.is_zero())
    }

    /// Packed little-endian bitset, least significant bit first.
    pub fn to_bitset(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.keep.len().div_ceil(8)];
        for (i, &k) in self.keep.iter().enumerate() {
            if k {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_bitset(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let n = rows * cols;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Parse(format!(
                "bitset of {} bytes for a {rows}x{cols} mask",
                bytes.len()
            )));
        }
        let keep = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self { rows, cols, keep })
    }
}

/// Elementwise select: `a` where the mask keeps, `b` elsewhere.
pub fn masked_where<T: Scalar>(mask: &SparseMask, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    mask.check_shape(a)?;
    mask.check_shape(b)?;
    let data = mask
        .keep
        .iter()
        .zip(a.data().iter().zip(b.data()))
        .map(|(&k, (&x, &y))| if k { x } else { y })
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}
