//! The ℓ-tuple missingness model.
//!
//! A row of width `n` is split into `n/ℓ` contiguous tuples. Each tuple is
//! independently present (all ℓ entries observed) with probability `p` and
//! absent (all ℓ entries zeroed) otherwise. `ℓ = 1` is entrywise Bernoulli
//! missingness.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, check_probability, Error, Result};
use crate::matrix::DenseMatrix;

/// Largest `n/ℓ` accepted by [`enumerate_masks`].
pub const ENUMERATION_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFields")]
pub struct TupleMissingModel {
    n: usize,
    ell: usize,
    p: f64,
}

#[derive(Deserialize)]
struct ModelFields {
    n: usize,
    ell: usize,
    p: f64,
}

impl TryFrom<ModelFields> for TupleMissingModel {
    type Error = Error;

    fn try_from(f: ModelFields) -> Result<Self> {
        Self::new(f.n, f.ell, f.p)
    }
}

impl TupleMissingModel {
    pub fn new(n: usize, ell: usize, p: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "row width must be at least 1"));
        }
        if ell == 0 {
            return Err(Error::invalid("ell", "tuple length must be at least 1"));
        }
        if n % ell != 0 {
            return Err(Error::EllDoesNotDivide { ell, n });
        }
        check_probability(p)?;
        Ok(Self { n, ell, p })
    }

    /// Fully observed rows (`p = 1`, `ℓ = 1`).
    pub fn complete(n: usize) -> Result<Self> {
        Self::new(n, 1, 1.0)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn ell(&self) -> usize {
        self.ell
    }

    #[inline]
    pub fn p(&self) -> f64 {
        self.p
    }

    #[inline]
    pub fn tuples(&self) -> usize {
        self.n / self.ell
    }

    pub fn with_p(&self, p: f64) -> Result<Self> {
        Self::new(self.n, self.ell, p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskRow {
    bits: Vec<bool>,
}

impl MaskRow {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Expands one flag per tuple into a full-width row.
    pub fn from_tuples(tuple_bits: &[bool], ell: usize) -> Self {
        let bits = tuple_bits
            .iter()
            .flat_map(|&b| std::iter::repeat(b).take(ell))
            .collect();
        Self { bits }
    }

    pub fn all_ones(n: usize) -> Self {
        Self { bits: vec![true; n] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn present_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_tuple_constant(&self, ell: usize) -> bool {
        is_tuple_constant(&self.bits, ell)
    }
}

fn is_tuple_constant(bits: &[bool], ell: usize) -> bool {
    ell > 0
        && bits.len() % ell == 0
        && bits.chunks(ell).all(|t| t.iter().all(|&b| b == t[0]))
}

/// A row with its mask and the masked values `D_i ⊙ A_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedRow {
    pub row_index: usize,
    pub mask: MaskRow,
    pub values: Vec<f64>,
}

impl ObservedRow {
    pub fn new(row_index: usize, row: &[f64], mask: MaskRow) -> Result<Self> {
        let values = apply_mask(row, &mask)?;
        Ok(Self {
            row_index,
            mask,
            values,
        })
    }

    /// A fully observed row.
    pub fn complete(row_index: usize, row: &[f64]) -> Self {
        Self {
            row_index,
            mask: MaskRow::all_ones(row.len()),
            values: row.to_vec(),
        }
    }
}

/// Binary mask for a whole matrix, row-major. `true` marks an observed entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        check_len("mask entries", rows * cols, bits.len())?;
        Ok(Self { rows, cols, bits })
    }

    pub fn all_ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    /// One fixed mask for every row, drawn row by row with [`fill_mask`].
    pub fn sample<R: Rng + ?Sized>(model: &TupleMissingModel, rows: usize, rng: &mut R) -> Self {
        let mut bits = vec![false; rows * model.n()];
        for row in bits.chunks_mut(model.n()) {
            fill_mask(model, rng, row);
        }
        Self {
            rows,
            cols: model.n(),
            bits,
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
    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn missing_count(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }

    pub fn zero_fraction(&self) -> f64 {
        self.missing_count() as f64 / self.bits.len() as f64
    }

    pub fn is_tuple_constant(&self, ell: usize) -> bool {
        (0..self.rows).all(|i| is_tuple_constant(self.row(i), ell))
    }

    /// `D ⊙ A`
    pub fn apply(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        check_len("mask rows", a.rows(), self.rows)?;
        check_len("mask cols", a.cols(), self.cols)?;
        let mut out = a.clone();
        for i in 0..self.rows {
            for (v, &b) in out.row_mut(i).iter_mut().zip(self.row(i)) {
                if !b {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        DenseMatrix::new(self.rows, self.cols, data).expect("mask shape is valid")
    }
}

/// Draws one mask row in place: one uniform draw per tuple, left to right.
/// A complete model (`p = 1`) fills the row without touching `rng`.
#[inline]
pub fn fill_mask<R: Rng + ?Sized>(model: &TupleMissingModel, rng: &mut R, out: &mut [bool]) {
    debug_assert_eq!(out.len(), model.n());
    if model.p() >= 1.0 {
        out.fill(true);
        return;
    }
    for tuple in out.chunks_mut(model.ell()) {
        let present = rng.random::<f64>() < model.p();
        tuple.fill(present);
    }
}

pub fn sample_mask_row<R: Rng + ?Sized>(model: &TupleMissingModel, rng: &mut R) -> MaskRow {
    let mut bits = vec![false; model.n()];
    fill_mask(model, rng, &mut bits);
    MaskRow { bits }
}

/// `D_i ⊙ A_i`
pub fn apply_mask(row: &[f64], mask: &MaskRow) -> Result<Vec<f64>> {
    check_len("mask width vs row", row.len(), mask.len())?;
    Ok(row
        .iter()
        .zip(mask.bits())
        .map(|(&v, &b)| if b { v } else { 0.0 })
        .collect())
}

/// The block-diagonal ones matrix `L` for tuple length ℓ.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionStructure {
    n: usize,
    ell: usize,
    l: DenseMatrix,
}

impl CorrectionStructure {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.l
    }

    #[inline]
    pub fn same_tuple(&self, a: usize, b: usize) -> bool {
        a / self.ell == b / self.ell
    }
}

pub fn build_l(n: usize, ell: usize) -> Result<CorrectionStructure> {
    if n == 0 || ell == 0 {
        return Err(Error::invalid("ell", "n and ell must be positive"));
    }
    if n % ell != 0 {
        return Err(Error::EllDoesNotDivide { ell, n });
    }
    let mut l = DenseMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            if a / ell == b / ell {
                l.set(a, b, 1.0);
            }
        }
    }
    Ok(CorrectionStructure { n, ell, l })
}

/// Every tuple-constant mask with its probability under `model`.
///
/// Mask `k` has tuple `j` present iff bit `j` of `k` is set.
pub fn enumerate_masks(model: &TupleMissingModel) -> Result<Vec<(MaskRow, f64)>> {
    let t = model.tuples();
    if t > ENUMERATION_CAP {
        return Err(Error::BudgetExceeded {
            what: "n/ell",
            value: t,
            cap: ENUMERATION_CAP,
        });
    }
    let p = model.p();
    let mut out = Vec::with_capacity(1 << t);
    let mut flags = vec![false; t];
    for code in 0u64..(1u64 << t) {
        for (j, f) in flags.iter_mut().enumerate() {
            *f = code >> j & 1 == 1;
        }
        let k = code.count_ones() as i32;
        let prob = p.powi(k) * (1.0 - p).powi(t as i32 - k);
        out.push((MaskRow::from_tuples(&flags, model.ell()), prob));
    }
    Ok(out)
}
