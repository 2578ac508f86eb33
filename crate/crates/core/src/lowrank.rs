//! Dense matrices and the low-rank adaptation arithmetic.
//!
//! An adaptation is stored as two factors: a class-specific `A` (r x k) and a
//! projection `B` (d x r), with `delta = B * A`. Everything here is a pure
//! function over immutable values. Merges are exact elementwise affine maps,
//! and their endpoints (coefficient 0 or 1) return one input unchanged, bit
//! for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of finite `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::BadLength {
                rows: rows.len(),
                cols,
                len: rows.iter().map(|r| r.len()).sum(),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let lhs = self.data[i * self.cols + k];
                if lhs == 0.0 {
                    continue;
                }
                for (o, &r) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += lhs * r;
                }
            }
        }
        Ok(out)
    }

    /// `self * v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `self^T * v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += vi * m;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds `s * u v^T` in place.
    pub(crate) fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let f = s * ui;
            if f == 0.0 {
                continue;
            }
            for (o, &vj) in self.data[i * self.cols..(i + 1) * self.cols]
                .iter_mut()
                .zip(v)
            {
                *o += f * vj;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Raw little-endian bytes of the entries, used for freeze checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which of the two training phases produced an expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Specialized,
}

/// A class-specific `A` factor plus its version metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertModule {
    pub class_id: String,
    pub a: DenseMatrix,
    pub version: u64,
    pub parent_version: Option<u64>,
    pub task_id: String,
    pub phase: Phase,
}

/// The task-shared `B` factor.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedProjection {
    pub b: DenseMatrix,
    pub task_index: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl MergeConfig {
    /// Mostly-disjoint class streams.
    pub const DISJOINT: Self = Self {
        lambda_a: 0.3,
        lambda_b: 0.7,
    };
    /// Streams where every class recurs.
    pub const OVERLAPPED: Self = Self {
        lambda_a: 0.1,
        lambda_b: 0.7,
    };

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda_a)?;
        check_lambda(self.lambda_b)
    }
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self::DISJOINT
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankConfig {
    /// Adaptation rank.
    pub r: usize,
    /// Output dimension of the adapted layer.
    pub d: usize,
    /// Input dimension of the adapted layer.
    pub k: usize,
    pub num_layers: usize,
}

impl RankConfig {
    pub fn new(r: usize, d: usize) -> Self {
        Self {
            r,
            d,
            k: d,
            num_layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.d == 0 || self.k == 0 || self.num_layers == 0 {
            return Err(Error::InvalidConfig(
                "rank config fields must be positive".into(),
            ));
        }
        if self.r > self.d.min(self.k) {
            return Err(Error::InvalidConfig(format!(
                "rank {} exceeds min(d, k) = {}",
                self.r,
                self.d.min(self.k)
            )));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    Ok(())
}

/// `B * A`: the d x k weight delta of one adaptation.
pub fn compose_delta(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if b.cols() != a.rows() {
        return Err(Error::ShapeMismatch {
            op: "compose_delta",
            left: b.shape(),
            right: a.shape(),
        });
    }
    b.matmul(a)
}

/// `w + scale * B * A`. A scale of `-alpha` subtracts a module (unlearning).
pub fn apply_adaptation(
    w: &DenseMatrix,
    a: &DenseMatrix,
    b: &DenseMatrix,
    scale: f64,
) -> Result<DenseMatrix> {
    let delta = compose_delta(a, b)?;
    if delta.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_adaptation",
            left: w.shape(),
            right: delta.shape(),
        });
    }
    if scale == 0.0 {
        return Ok(w.clone());
    }
    let mut out = w.clone();
    out.axpy(scale, &delta)?;
    Ok(out)
}

fn affine_merge(
    old: &DenseMatrix,
    new: &DenseMatrix,
    lambda: f64,
    op: &'static str,
) -> Result<DenseMatrix> {
    check_lambda(lambda)?;
    old.check_same_shape(new, op)?;
    if lambda == 0.0 {
        return Ok(old.clone());
    }
    if lambda == 1.0 {
        return Ok(new.clone());
    }
    let keep = 1.0 - lambda;
    Ok(DenseMatrix {
        rows: old.rows,
        cols: old.cols,
        data: old
            .data
            .iter()
            .zip(&new.data)
            // Equal entries are returned as-is: keep * o + lambda * o can round away from o.
            .map(|(&o, &n)| if o == n { o } else { keep * o + lambda * n })
            .collect(),
    })
}

/// Expert merge: `(1 - lambda_a) * a_old + lambda_a * a_wu`.
pub fn merge_expert(a_old: &DenseMatrix, a_wu: &DenseMatrix, lambda_a: f64) -> Result<DenseMatrix> {
    affine_merge(a_old, a_wu, lambda_a, "merge_expert")
}

/// Shared-projection merge: `(1 - lambda_b) * b_prev + lambda_b * b_opt`.
pub fn merge_shared(
    b_prev: &DenseMatrix,
    b_opt: &DenseMatrix,
    lambda_b: f64,
) -> Result<DenseMatrix> {
    affine_merge(b_prev, b_opt, lambda_b, "merge_shared")
}

/// Unweighted elementwise mean of equally shaped modules.
///
/// Each entry is averaged over its values in sorted order with a running
/// update, so the result does not depend on input order and a multiset of
/// identical matrices averages to that matrix exactly.
pub fn average_experts(modules: &[&DenseMatrix]) -> Result<DenseMatrix> {
    let first = *modules.first().ok_or(Error::Empty("average_experts"))?;
    for m in &modules[1..] {
        first.check_same_shape(m, "average_experts")?;
    }
    if modules.len() == 1 {
        return Ok(first.clone());
    }
    let mut column = Vec::with_capacity(modules.len());
    let data = (0..first.data.len())
        .map(|i| {
            column.clear();
            column.extend(modules.iter().map(|m| m.data[i]));
            column.sort_by(f64::total_cmp);
            let mut mean = column[0];
            for (n, &v) in column.iter().enumerate().skip(1) {
                mean += (v - mean) / (n + 1) as f64;
            }
            mean
        })
        .collect();
    Ok(DenseMatrix {
        rows: first.rows,
        cols: first.cols,
        data,
    })
}

/// Trainable parameter counts `(per_class, total)` for a library of
/// `num_classes` experts, with a single shared `B` or one `B` per class.
pub fn param_count(cfg: &RankConfig, num_classes: u64, shared_b: bool) -> (u64, u64) {
    let (r, d, k, layers) = (
        cfg.r as u64,
        cfg.d as u64,
        cfg.k as u64,
        cfg.num_layers as u64,
    );
    if shared_b {
        (layers * r * k, layers * (num_classes * r * k + d * r))
    } else {
        let per = layers * (r * k + d * r);
        (per, num_classes * per)
    }
}
