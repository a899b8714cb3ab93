//! Imputation baselines: fill the missing entries once, then run plain SGD
//! on the completed matrix.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::matrix::DenseMatrix;
use crate::missingness::MaskMatrix;
use crate::solvers::{run_solver, ErrorTrace, Method, SolverConfig};
use crate::system::LinearSystem;

pub const DEFAULT_NEIGHBORS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeMethod {
    ColumnMean,
    Knn,
}

impl ImputeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ImputeMethod::ColumnMean => "column-mean",
            ImputeMethod::Knn => "knn",
        }
    }
}

impl fmt::Display for ImputeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImputeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "column-mean" => Ok(ImputeMethod::ColumnMean),
            "knn" => Ok(ImputeMethod::Knn),
            other => Err(Error::invalid("impute", format!("unknown imputation method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImputedSystem {
    pub a_hat: DenseMatrix,
    pub method: ImputeMethod,
    pub fill_count: usize,
    /// Columns with no observed entry; their gaps were filled with 0.
    pub empty_columns: Vec<usize>,
    /// k-NN entries that had no candidate row and fell back to the column mean.
    pub mean_fallbacks: usize,
}

impl ImputedSystem {
    /// Metadata sidecar written next to the completed matrix.
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "method_tag": self.method,
            "fill_count": self.fill_count,
            "empty_columns": self.empty_columns,
            "mean_fallbacks": self.mean_fallbacks,
        })
    }
}

fn check_shapes(a: &DenseMatrix, mask: &MaskMatrix) -> Result<()> {
    check_len("mask rows", a.rows(), mask.rows())?;
    check_len("mask cols", a.cols(), mask.cols())
}

/// Mean of the observed entries of every column (0 for an empty column).
fn column_means(a: &DenseMatrix, mask: &MaskMatrix) -> (Vec<f64>, Vec<usize>) {
    let mut means = vec![0.0; a.cols()];
    let mut empty = Vec::new();
    for (j, mean) in means.iter_mut().enumerate() {
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..a.rows() {
            if mask.get(i, j) {
                sum += a.get(i, j);
                count += 1;
            }
        }
        if count == 0 {
            empty.push(j);
        } else {
            *mean = sum / count as f64;
        }
    }
    (means, empty)
}

pub fn column_mean_impute(a_masked: &DenseMatrix, mask: &MaskMatrix) -> Result<ImputedSystem> {
    check_shapes(a_masked, mask)?;
    let (means, empty_columns) = column_means(a_masked, mask);
    let mut a_hat = a_masked.clone();
    let mut fill_count = 0;
    for i in 0..a_hat.rows() {
        for j in 0..a_hat.cols() {
            if !mask.get(i, j) {
                a_hat.set(i, j, means[j]);
                fill_count += 1;
            }
        }
    }
    Ok(ImputedSystem {
        a_hat,
        method: ImputeMethod::ColumnMean,
        fill_count,
        empty_columns,
        mean_fallbacks: 0,
    })
}

/// Root-mean-square difference over the columns observed in both rows;
/// `+∞` when the rows share no observed column.
pub fn coobserved_distance(a: &DenseMatrix, mask: &MaskMatrix, i: usize, r: usize) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for j in 0..a.cols() {
        if mask.get(i, j) && mask.get(r, j) {
            let d = a.get(i, j) - a.get(r, j);
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Row-neighbour k-NN imputation.
///
/// For a gap at `(i, c)` the candidates are the other rows that observe
/// column `c`, ranked by [`coobserved_distance`] to row `i` with ties going to
/// the lower row index. The gap gets the mean of column `c` over the first
/// `k` candidates (all of them if fewer), or the column mean when there are
/// none.
pub fn knn_impute(a_masked: &DenseMatrix, mask: &MaskMatrix, k: usize) -> Result<ImputedSystem> {
    check_shapes(a_masked, mask)?;
    if k == 0 {
        return Err(Error::invalid("k", "neighbour count must be at least 1"));
    }
    let (m, n) = (a_masked.rows(), a_masked.cols());
    let (means, empty_columns) = column_means(a_masked, mask);
    let mut a_hat = a_masked.clone();
    let mut fill_count = 0;
    let mut mean_fallbacks = 0;
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(m);
    for i in 0..m {
        if mask.row(i).iter().all(|&b| b) {
            continue;
        }
        // distances do not depend on the gap's column, so rank once per row
        ranked.clear();
        ranked.extend(
            (0..m)
                .filter(|&r| r != i)
                .map(|r| (coobserved_distance(a_masked, mask, i, r), r)),
        );
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        for c in 0..n {
            if mask.get(i, c) {
                continue;
            }
            fill_count += 1;
            let (mut sum, mut used) = (0.0, 0usize);
            for &(_, r) in ranked.iter().filter(|&&(_, r)| mask.get(r, c)).take(k) {
                sum += a_masked.get(r, c);
                used += 1;
            }
            let value = if used == 0 {
                mean_fallbacks += 1;
                means[c]
            } else {
                sum / used as f64
            };
            a_hat.set(i, c, value);
        }
    }
    Ok(ImputedSystem {
        a_hat,
        method: ImputeMethod::Knn,
        fill_count,
        empty_columns,
        mean_fallbacks,
    })
}

pub fn impute(method: ImputeMethod, a_masked: &DenseMatrix, mask: &MaskMatrix) -> Result<ImputedSystem> {
    match method {
        ImputeMethod::ColumnMean => column_mean_impute(a_masked, mask),
        ImputeMethod::Knn => knn_impute(a_masked, mask, DEFAULT_NEIGHBORS),
    }
}

/// Plain SGD on the completed matrix, scored against `x_star`.
///
/// The run forces `p = 1`, so only row indices are drawn: it visits rows in
/// the same order as a fixed-mask run with the same seed.
pub fn solve_imputed(
    imputed: &ImputedSystem,
    y: &[f64],
    x_star: &[f64],
    config: &SolverConfig,
) -> Result<ErrorTrace> {
    if config.method != Method::Sgd {
        return Err(Error::invalid(
            "method",
            format!("imputed systems are solved with sgd, got {}", config.method),
        ));
    }
    let sys = LinearSystem::new(imputed.a_hat.clone(), y.to_vec(), Some(x_star.to_vec()))?;
    let mut cfg = config.clone();
    cfg.model = config.model.with_p(1.0)?;
    run_solver(&sys, &cfg)
}
