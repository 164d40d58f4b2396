//! Small dense helpers: a row-major matrix that serializes as nested arrays,
//! and SVD-backed least squares with numerical rank diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_RTOL: f64 = 1e-8;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// `out += self * v`
    #[inline]
    pub fn mul_vec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v) {
                acc += a * b;
            }
            *o += acc;
        }
    }

    /// `out += selfᵀ * v`
    #[inline]
    pub fn tr_mul_vec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
    }

    /// `self += a bᵀ`
    #[inline]
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, bj) in row.iter_mut().zip(b) {
                *r += ai * bj;
            }
        }
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct MatRepr {
    rows: usize,
    cols: usize,
    data: Vec<Vec<f64>>,
}

impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatRepr {
            rows: self.rows,
            cols: self.cols,
            data: self.to_rows(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MatRepr::deserialize(d)?;
        if repr.data.len() != repr.rows || repr.data.iter().any(|r| r.len() != repr.cols) {
            return Err(serde::de::Error::custom("matrix dims do not match data"));
        }
        Ok(Mat {
            rows: repr.rows,
            cols: repr.cols,
            data: repr.data.into_iter().flatten().collect(),
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least-squares solution with rank diagnostics.
#[derive(Debug, Clone)]
pub struct Lstsq {
    pub solution: Vec<f64>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub cond: f64,
}

/// Singular values of `a`, sorted descending.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = a.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Numerical rank and 2-norm condition number from singular values.
pub fn rank_and_cond(sv: &[f64]) -> (usize, f64) {
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return (0, f64::INFINITY);
    }
    let rank = sv.iter().filter(|&&s| s > RANK_RTOL * smax).count();
    let smin = sv.last().copied().unwrap_or(0.0);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    (rank, cond)
}

/// Solves `min ‖A x − b‖` via the SVD pseudo-inverse. Fails when `A` does not
/// have full column rank.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<Lstsq> {
    let cols = a.ncols();
    if a.nrows() != b.len() {
        return Err(Error::Shape(format!(
            "{context}: {} rows vs {} targets",
            a.nrows(),
            b.len()
        )));
    }
    if a.nrows() < cols {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            rank: a.nrows(),
            expected: cols,
            cond: f64::INFINITY,
        });
    }
    let svd = a.clone().svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    let (rank, cond) = rank_and_cond(&sv);
    if rank < cols {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            rank,
            expected: cols,
            cond,
        });
    }
    let eps = RANK_RTOL * sv[0];
    let x = svd
        .solve(b, eps)
        .map_err(|e| Error::Singular {
            context: format!("{context}: {e}"),
            cond,
        })?;
    Ok(Lstsq {
        solution: x.iter().copied().collect(),
        rank,
        singular_values: sv,
        cond,
    })
}
