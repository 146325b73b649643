//! Dense matrices and the norms the rest of the crate needs: exact and
//! bounded `inf -> 2` norms, SVD-based extreme singular values, distances to
//! column spans, unit normals, and independent row permutations.

use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::distributions::EntryDistribution;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest column count accepted by [`inf2_exact`] unless overridden.
pub const INF2_EXACT_CAP: usize = 24;

/// Relative threshold below which a singular value is treated as zero when
/// extracting a nullspace.
pub const NULLSPACE_REL_TOL: f64 = 1e-12;

/// Dense real matrix in row-major order. All entries are finite.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix dimensions must be >= 1, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be >= 1");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data).expect("from_fn produced an invalid matrix")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    /// I.i.d. entries from `dist`, filled row by row.
    pub fn random(rows: usize, cols: usize, dist: &EntryDistribution, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(rows, cols);
        dist.fill(rng, &mut m.data);
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(v.is_finite());
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
            .expect("scaling keeps entries finite")
    }

    /// `self * diag(d)`: column `j` multiplied by `d[j]`.
    pub fn scale_columns(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.cols {
            return Err(Error::Shape(format!("{} column factors for {} columns", d.len(), self.cols)));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols) {
            for (v, s) in row.iter_mut().zip(d) {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// Keeps the columns in `range`.
    pub fn columns(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.cols {
            return Err(Error::Shape(format!("column range {range:?} of {} columns", self.cols)));
        }
        let width = range.end - range.start;
        Ok(Self::from_fn(self.rows, width, |i, j| self.get(i, range.start + j)))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!("vector of length {} for {} columns", x.len(), self.cols)));
        }
        Ok(self.data.chunks(self.cols).map(|row| dot(row, x)).collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self::from_dmatrix(&(self.to_dmatrix() * other.to_dmatrix())))
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.data.chunks(self.cols).map(norm).collect()
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// Plain text: `rows cols` on the first line, then one row per line.
    /// Values use the shortest representation that round-trips exactly.
    pub fn write_text(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{} {}", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let header = lines.next().ok_or_else(|| Error::Parse("empty matrix file".into()))??;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad matrix header {header:?}"))))
            .collect::<Result<_>>()?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Parse(format!("matrix header needs `rows cols`, got {header:?}")));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| Error::Parse(format!("bad number {tok:?}")))?);
            }
            if data.len() - before != cols {
                return Err(Error::Parse(format!("row {} has {} entries, expected {cols}", i + 1, data.len() - before)));
            }
        }
        if data.len() != rows * cols {
            return Err(Error::Parse(format!("expected {rows} rows, got {}", data.len() / cols.max(1))));
        }
        Self::new(rows, cols, data)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Exact `||B||_{inf->2} = max_{v in {-1,1}^n} ||Bv||` with a witness.
pub fn inf2_exact(b: &Matrix) -> Result<(f64, Vec<f64>)> {
    inf2_exact_capped(b, INF2_EXACT_CAP)
}

/// Gray-code enumeration of the cube with `v_1 = +1` fixed (the norm is even
/// in `v`). Each step flips one sign and updates `Bv` in `O(rows)`. Large
/// instances are split on the top bits and reduced with a deterministic max.
pub fn inf2_exact_capped(b: &Matrix, cap: usize) -> Result<(f64, Vec<f64>)> {
    let n = b.cols;
    if n > cap {
        return Err(Error::Cap(format!(
            "exact inf->2 norm limited to {cap} columns, got {n}; use inf2_lower/inf2_upper"
        )));
    }
    let cols: Vec<Vec<f64>> = (0..n).map(|j| b.column(j)).collect();
    let free = n - 1;
    let split = free.saturating_sub(14).min(10);
    let low = free - split;

    let best = (0u64..1 << split)
        .into_par_iter()
        .map(|chunk| {
            // Sign of column j (j >= 1) is bit j-1 of the code; a set bit means -1.
            let mut signs = vec![1.0; n];
            for t in 0..split {
                if chunk >> t & 1 == 1 {
                    signs[1 + low + t] = -1.0;
                }
            }
            let mut y = vec![0.0; b.rows];
            for (s, c) in signs.iter().zip(&cols) {
                for (yi, ci) in y.iter_mut().zip(c) {
                    *yi += s * ci;
                }
            }
            let mut best_sq = dot(&y, &y);
            let mut best_signs = signs.clone();
            for step in 1u64..1 << low {
                let j = 1 + step.trailing_zeros() as usize;
                let s = signs[j];
                for (yi, ci) in y.iter_mut().zip(&cols[j]) {
                    *yi -= 2.0 * s * ci;
                }
                signs[j] = -s;
                let sq = dot(&y, &y);
                if sq > best_sq {
                    best_sq = sq;
                    best_signs.copy_from_slice(&signs);
                }
            }
            (best_sq, chunk, best_signs)
        })
        .reduce_with(|a, b| {
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                b
            } else {
                a
            }
        })
        .expect("at least one chunk");
    let witness = best.2;
    let value = norm(&b.mul_vec(&witness)?);
    Ok((value, witness))
}

/// Sign ascent from `start`: flip `v_j` whenever the off-diagonal part of
/// `(B^T B v)_j` has the opposite sign. Each flip strictly increases `||Bv||`,
/// so the loop terminates; ties keep the current sign.
pub fn inf2_ascent_from(b: &Matrix, start: &[f64]) -> Result<(f64, Vec<f64>)> {
    if start.len() != b.cols {
        return Err(Error::Shape(format!("start of length {} for {} columns", start.len(), b.cols)));
    }
    let cols: Vec<Vec<f64>> = (0..b.cols).map(|j| b.column(j)).collect();
    let col_sq: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let mut v: Vec<f64> = start.iter().map(|s| if *s < 0.0 { -1.0 } else { 1.0 }).collect();
    let mut y = b.mul_vec(&v)?;
    loop {
        let mut flipped = false;
        for j in 0..b.cols {
            let off = dot(&cols[j], &y) - col_sq[j] * v[j];
            if off * v[j] < 0.0 {
                let s = v[j];
                for (yi, ci) in y.iter_mut().zip(&cols[j]) {
                    *yi -= 2.0 * s * ci;
                }
                v[j] = -s;
                flipped = true;
            }
        }
        if !flipped {
            break;
        }
    }
    let value = norm(&b.mul_vec(&v)?);
    Ok((value, v))
}

/// Best sign-ascent fixpoint over `restarts` random starts; a certified lower
/// bound for `||B||_{inf->2}` since the witness is evaluated directly.
pub fn inf2_lower(b: &Matrix, restarts: usize, rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
    if restarts == 0 {
        return Err(Error::Parameter("restarts must be >= 1".into()));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..restarts {
        let start: Vec<f64> = (0..b.cols).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let cand = inf2_ascent_from(b, &start)?;
        if best.as_ref().is_none_or(|(v, _)| cand.0 > *v) {
            best = Some(cand);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// `min(sqrt(cols) * ||B||_2, sqrt(sum_i (sum_j |b_ij|)^2))`.
pub fn inf2_upper(b: &Matrix) -> Result<f64> {
    let spectral = spectral_norm(b)?;
    let row_l1: f64 = b
        .data
        .chunks(b.cols)
        .map(|r| {
            let s: f64 = r.iter().map(|v| v.abs()).sum();
            s * s
        })
        .sum::<f64>()
        .sqrt();
    Ok(((b.cols as f64).sqrt() * spectral).min(row_l1))
}

/// Singular value decomposition with the factors the caller asked for,
/// singular values sorted descending.
pub struct Svd {
    pub singular_values: Vec<f64>,
    pub u: Option<DMatrix<f64>>,
    pub v_t: Option<DMatrix<f64>>,
}

impl Svd {
    pub fn compute(b: &Matrix, want_u: bool, want_v: bool) -> Result<Self> {
        let m = b.to_dmatrix();
        let svd = m.try_svd(want_u, want_v, f64::EPSILON, 0).ok_or_else(|| {
            Error::Numerical(format!(
                "SVD did not converge on a {}x{} matrix (frobenius {:e}, max |entry| {:e})",
                b.rows,
                b.cols,
                b.frobenius(),
                b.data.iter().fold(0.0f64, |a, v| a.max(v.abs()))
            ))
        })?;
        Ok(Self {
            singular_values: svd.singular_values.iter().copied().collect(),
            u: svd.u,
            v_t: svd.v_t,
        })
    }

    /// `||B - U S V^T||_F` when both factors are present.
    pub fn reconstruction_error(&self, b: &Matrix) -> Option<f64> {
        let (u, v_t) = (self.u.as_ref()?, self.v_t.as_ref()?);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.singular_values));
        Some((b.to_dmatrix() - u * s * v_t).norm())
    }
}

pub fn singular_values(b: &Matrix) -> Result<Vec<f64>> {
    Ok(Svd::compute(b, false, false)?.singular_values)
}

pub fn spectral_norm(b: &Matrix) -> Result<f64> {
    Ok(singular_values(b)?[0])
}

/// Smallest singular value `inf_{|y|=1} |By|`; zero for wide matrices.
pub fn smin(b: &Matrix) -> Result<f64> {
    if b.rows < b.cols {
        return Ok(0.0);
    }
    Ok(*singular_values(b)?.last().expect("non-empty"))
}

/// Smallest singular value of a square matrix and a right singular vector
/// attaining it.
pub fn smin_with_vector(b: &Matrix) -> Result<(f64, Vec<f64>)> {
    if !b.is_square() {
        return Err(Error::Shape(format!("expected a square matrix, got {}x{}", b.rows, b.cols)));
    }
    let svd = Svd::compute(b, false, true)?;
    let v_t = svd.v_t.expect("requested");
    let last = b.cols - 1;
    Ok((svd.singular_values[last], v_t.row(last).iter().copied().collect()))
}

/// Euclidean norm of the least-squares residual of `x` against the column
/// space of `columns`.
pub fn distance_to_span(x: &[f64], columns: &Matrix) -> Result<f64> {
    if x.len() != columns.rows {
        return Err(Error::Shape(format!(
            "vector of length {} against columns of length {}",
            x.len(),
            columns.rows
        )));
    }
    let svd = Svd::compute(columns, true, false)?;
    let u = svd.u.expect("requested");
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let tol = smax * (columns.rows.max(columns.cols) as f64) * f64::EPSILON;
    let mut residual = x.to_vec();
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s <= tol || *s == 0.0 {
            continue;
        }
        let uk = u.column(k);
        let c: f64 = uk.iter().zip(x).map(|(a, b)| a * b).sum();
        for (r, a) in residual.iter_mut().zip(uk.iter()) {
            *r -= c * a;
        }
    }
    Ok(norm(&residual))
}

/// Unit vector in the nullspace of a wide matrix.
#[derive(Clone, Debug)]
pub struct UnitNormal {
    pub vector: Vec<f64>,
    /// Dimension of the numerical nullspace used.
    pub nullity: usize,
    /// Set when the nullspace is not one-dimensional to within
    /// [`NULLSPACE_REL_TOL`].
    pub ill_determined: bool,
}

/// A uniformly random unit vector of the nullspace of `ap` (`rows < cols`).
pub fn unit_normal(ap: &Matrix, rng: &mut Rng) -> Result<UnitNormal> {
    let n = ap.cols;
    if ap.rows >= n {
        return Err(Error::Shape(format!(
            "unit normal needs fewer rows than columns, got {}x{n}",
            ap.rows
        )));
    }
    // Pad with zero rows so that the SVD returns a full right basis.
    let mut padded = ap.data.clone();
    padded.resize(n * n, 0.0);
    let square = Matrix::new(n, n, padded)?;
    let svd = Svd::compute(&square, false, true)?;
    let v_t = svd.v_t.expect("requested");
    let smax = svd.singular_values[0];
    let tol = NULLSPACE_REL_TOL * smax;
    let null_idx: Vec<usize> = (0..n)
        .filter(|&i| i == n - 1 || svd.singular_values[i] <= tol)
        .collect();
    let nullity = null_idx.len();
    let ill_determined = nullity > 1 || smax == 0.0;
    let mut x = vec![0.0; n];
    if nullity == 1 {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for (xi, v) in x.iter_mut().zip(v_t.row(n - 1).iter()) {
            *xi = sign * v;
        }
    } else {
        for &i in &null_idx {
            let g: f64 = rng.sample(StandardNormal);
            for (xi, v) in x.iter_mut().zip(v_t.row(i).iter()) {
                *xi += g * v;
            }
        }
    }
    let len = norm(&x);
    if len == 0.0 || !len.is_finite() {
        return Err(Error::Numerical("degenerate nullspace combination".into()));
    }
    x.iter_mut().for_each(|v| *v /= len);
    Ok(UnitNormal { vector: x, nullity, ill_determined })
}

/// `b~_ij = b_{i, pi_i(j)}` with independent uniform permutations `pi_i`.
pub fn permute_rows_independently(b: &Matrix, rng: &mut Rng) -> Matrix {
    let mut out = b.clone();
    for row in out.data.chunks_mut(b.cols) {
        row.shuffle(rng);
    }
    out
}
