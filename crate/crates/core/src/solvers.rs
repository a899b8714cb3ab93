//! SGD, mSGD and ℓ-tuple mSGD on masked rows, plus the iteration driver.
//!
//! All three methods share one update shape, `x ← P(x − α_k·d)`, and differ
//! only in the direction `d` computed from a masked row `ã = D_i ⊙ A_i`:
//!
//! * SGD: `d = ã(ã·x − y_i)`
//! * mSGD: `d = ã(ã·x − p·y_i)/p² − (1−p)/p²·diag(ãᵀã)·x`
//! * ℓ-tuple mSGD: `d = ã(ã·x − p·y_i)/p² − (1−p)/p²·(L ⊙ ãᵀã)·x`
//!
//! The arithmetic is written so that ℓ-tuple mSGD with `p = 1` performs the
//! same floating-point operations as SGD, and with `ℓ = 1` the same as
//! mSGD. Seeded traces of the reduced cases are therefore bit-identical.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, check_probability, Error, Result};
use crate::matrix::{dot, norm_sq};
use crate::missingness::{fill_mask, CorrectionStructure, MaskMatrix, ObservedRow, TupleMissingModel};
use crate::rng::rng_from_seed;
use crate::system::{error_sq, LinearSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sgd,
    Msgd,
    TupleMsgd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sgd, Method::Msgd, Method::TupleMsgd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Msgd => "msgd",
            Method::TupleMsgd => "tuple-msgd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Method::Sgd),
            "msgd" => Ok(Method::Msgd),
            "tuple-msgd" => Ok(Method::TupleMsgd),
            other => Err(Error::invalid(
                "method",
                format!("unknown method `{other}` (expected sgd, msgd or tuple-msgd)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    Fixed { alpha: f64 },
    /// `α_k = 1/(μ·k)` with `k` counted from 1.
    InverseMuK { mu: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Fixed { alpha } if !(alpha.is_finite() && alpha > 0.0) => {
                Err(Error::invalid("alpha", format!("step size must be positive, got {alpha}")))
            }
            StepSchedule::InverseMuK { mu } if !(mu.is_finite() && mu > 0.0) => Err(Error::invalid(
                "mu",
                format!("strong-convexity constant must be positive, got {mu}"),
            )),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn step(&self, k: u64) -> f64 {
        match *self {
            StepSchedule::Fixed { alpha } => alpha,
            StepSchedule::InverseMuK { mu } => 1.0 / (mu * k as f64),
        }
    }
}

/// Feasible set for projected iterations: everything, or a centered ball.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Projection {
    #[default]
    Disabled,
    Ball { radius: f64 },
}

impl Projection {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Projection::Ball { radius } if !(radius.is_finite() && radius > 0.0) => Err(
                Error::invalid("radius", format!("projection radius must be positive, got {radius}")),
            ),
            _ => Ok(()),
        }
    }

    /// Radially shrinks `x` onto the ball when it lies outside.
    #[inline]
    pub fn apply(&self, x: &mut [f64]) {
        if let Projection::Ball { radius } = *self {
            let nrm = norm_sq(x).sqrt();
            if nrm > radius {
                let s = radius / nrm;
                x.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

pub fn project_ball(x: &[f64], projection: &Projection) -> Vec<f64> {
    let mut out = x.to_vec();
    projection.apply(&mut out);
    out
}

/// Everything `run_solver` needs besides the system.
///
/// `method` picks the update rule; `model` is the missingness mechanism the
/// masks are drawn from. mSGD uses only `model.p()` in its update, whatever
/// the tuple length of the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub model: TupleMissingModel,
    pub schedule: StepSchedule,
    #[serde(default)]
    pub projection: Projection,
    pub iterations: u64,
    pub seed: u64,
    /// Starting point; the zero vector when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Record every `record_every`-th iterate (the last one is always kept).
    #[serde(default = "one")]
    pub record_every: u64,
}

fn one() -> u64 {
    1
}

impl SolverConfig {
    pub fn new(
        method: Method,
        model: TupleMissingModel,
        schedule: StepSchedule,
        iterations: u64,
        seed: u64,
    ) -> Self {
        Self {
            method,
            model,
            schedule,
            projection: Projection::Disabled,
            iterations,
            seed,
            x0: None,
            record_every: 1,
        }
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    pub fn with_projection(mut self, projection: Projection) -> Self {
        self.projection = projection;
        self
    }

    pub fn with_record_every(mut self, every: u64) -> Self {
        self.record_every = every;
        self
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be at least 1"));
        }
        check_len("model width vs system cols", n, self.model.n())?;
        self.schedule.validate()?;
        self.projection.validate()?;
        if let Some(x0) = &self.x0 {
            check_len("x0 length vs cols", n, x0.len())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// A fresh mask row from the model at every iteration.
    Resample,
    /// Missingness fixed in advance for every row.
    Fixed,
}

/// Squared errors `‖x_k − x_*‖²` of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorTrace {
    pub iterations: Vec<u64>,
    pub errors: Vec<f64>,
    pub config: SolverConfig,
    pub mask_mode: MaskMode,
    pub wall_time: f64,
}

impl ErrorTrace {
    pub fn final_error(&self) -> f64 {
        *self.errors.last().expect("a trace always holds the initial error")
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    /// `iteration,error` CSV with one line per recorded iterate.
    pub fn to_csv(&self) -> String {
        trace_csv(&self.iterations, &self.errors)
    }
}

pub(crate) fn trace_csv(iterations: &[u64], errors: &[f64]) -> String {
    let mut s = String::with_capacity(24 * errors.len() + 16);
    s.push_str("iteration,error\n");
    for (k, e) in iterations.iter().zip(errors) {
        s.push_str(&format!("{k},{e}\n"));
    }
    s
}

#[inline]
fn residual_terms(values: &[f64], y_i: f64, x: &[f64], p: f64, out: &mut [f64]) {
    let r = dot(values, x) - p * y_i;
    let inv = 1.0 / (p * p);
    for (o, &a) in out.iter_mut().zip(values) {
        *o = a * r * inv;
    }
}

/// SGD direction `ã(ã·x − y_i)`.
#[inline]
pub fn sgd_direction(values: &[f64], y_i: f64, x: &[f64], out: &mut [f64]) {
    let r = dot(values, x) - y_i;
    for (o, &a) in out.iter_mut().zip(values) {
        *o = a * r;
    }
}

/// mSGD direction with the diagonal correction.
#[inline]
pub fn msgd_direction(values: &[f64], y_i: f64, x: &[f64], p: f64, out: &mut [f64]) {
    residual_terms(values, y_i, x, p, out);
    let coef = (1.0 - p) / (p * p);
    for ((o, &a), &xc) in out.iter_mut().zip(values).zip(x) {
        *o -= coef * (a * (a * xc));
    }
}

/// ℓ-tuple mSGD direction. The correction `(L ⊙ ãᵀã)·x` is evaluated tuple by
/// tuple as `ã_j·(ã_j·x_j)`; the n×n outer product is never formed.
#[inline]
pub fn tuple_msgd_direction(values: &[f64], y_i: f64, x: &[f64], p: f64, ell: usize, out: &mut [f64]) {
    residual_terms(values, y_i, x, p, out);
    let coef = (1.0 - p) / (p * p);
    for ((o, a), xt) in out
        .chunks_mut(ell)
        .zip(values.chunks(ell))
        .zip(x.chunks(ell))
    {
        let s = dot(a, xt);
        for (oc, &ac) in o.iter_mut().zip(a) {
            *oc -= coef * (ac * s);
        }
    }
}

/// Dispatches to the direction of `method`. `ell` is ignored except by
/// ℓ-tuple mSGD, `p` is ignored by SGD.
#[inline]
pub fn step_direction(
    method: Method,
    values: &[f64],
    y_i: f64,
    x: &[f64],
    p: f64,
    ell: usize,
    out: &mut [f64],
) {
    match method {
        Method::Sgd => sgd_direction(values, y_i, x, out),
        Method::Msgd => msgd_direction(values, y_i, x, p, out),
        Method::TupleMsgd => tuple_msgd_direction(values, y_i, x, p, ell, out),
    }
}

fn apply_step(x: &[f64], dir: &[f64], alpha: f64) -> Vec<f64> {
    x.iter().zip(dir).map(|(&xc, &d)| xc - alpha * d).collect()
}

fn check_row(row: &ObservedRow, x: &[f64]) -> Result<()> {
    check_len("row width vs x", x.len(), row.values.len())
}

pub fn sgd_step(row: &ObservedRow, y_i: f64, x: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_row(row, x)?;
    let mut dir = vec![0.0; x.len()];
    sgd_direction(&row.values, y_i, x, &mut dir);
    Ok(apply_step(x, &dir, alpha))
}

pub fn msgd_step(row: &ObservedRow, y_i: f64, x: &[f64], alpha: f64, p: f64) -> Result<Vec<f64>> {
    check_row(row, x)?;
    check_probability(p)?;
    let mut dir = vec![0.0; x.len()];
    msgd_direction(&row.values, y_i, x, p, &mut dir);
    Ok(apply_step(x, &dir, alpha))
}

pub fn tuple_msgd_step(
    row: &ObservedRow,
    y_i: f64,
    x: &[f64],
    alpha: f64,
    p: f64,
    l: &CorrectionStructure,
) -> Result<Vec<f64>> {
    check_row(row, x)?;
    check_probability(p)?;
    check_len("correction structure size vs x", x.len(), l.n())?;
    let mut dir = vec![0.0; x.len()];
    tuple_msgd_direction(&row.values, y_i, x, p, l.ell(), &mut dir);
    Ok(apply_step(x, &dir, alpha))
}

/// Runs `config.iterations` projected steps, drawing a fresh mask per step.
///
/// Randomness is consumed in a fixed order each iteration: the row index
/// (uniform with replacement), then one draw per tuple from left to right,
/// skipped entirely when `p = 1`. Every method consumes the stream
/// identically, so equal seeds give paired runs across methods; with `p = 1`
/// runs are paired across tuple lengths too.
pub fn run_solver(sys: &LinearSystem, config: &SolverConfig) -> Result<ErrorTrace> {
    drive(sys, config, None)
}

/// Like [`run_solver`] but reads missingness from a fixed mask; only the row
/// index is drawn from the RNG.
pub fn run_solver_with_mask(
    sys: &LinearSystem,
    config: &SolverConfig,
    mask: &MaskMatrix,
) -> Result<ErrorTrace> {
    check_len("mask rows vs system rows", sys.rows(), mask.rows())?;
    check_len("mask cols vs system cols", sys.cols(), mask.cols())?;
    drive(sys, config, Some(mask))
}

fn drive(sys: &LinearSystem, config: &SolverConfig, fixed: Option<&MaskMatrix>) -> Result<ErrorTrace> {
    let start = Instant::now();
    let x_star = sys.x_star()?;
    let (m, n) = (sys.rows(), sys.cols());
    config.validate(n)?;

    let model = config.model;
    let (p, ell) = (model.p(), model.ell());
    let mut x = config.x0.clone().unwrap_or_else(|| vec![0.0; n]);
    let mut rng = rng_from_seed(config.seed);

    let capacity = (config.iterations / config.record_every + 2) as usize;
    let mut iterations = Vec::with_capacity(capacity);
    let mut errors = Vec::with_capacity(capacity);
    iterations.push(0);
    errors.push(error_sq(&x, x_star)?);

    let mut bits = vec![true; n];
    let mut values = vec![0.0; n];
    let mut dir = vec![0.0; n];
    for k in 1..=config.iterations {
        let i = rng.random_range(0..m);
        let mask_row: &[bool] = match fixed {
            None => {
                fill_mask(&model, &mut rng, &mut bits);
                &bits
            }
            Some(mask) => mask.row(i),
        };
        for ((v, &a), &b) in values.iter_mut().zip(sys.a.row(i)).zip(mask_row) {
            *v = if b { a } else { 0.0 };
        }
        step_direction(config.method, &values, sys.y[i], &x, p, ell, &mut dir);
        let alpha = config.schedule.step(k);
        for (xc, &d) in x.iter_mut().zip(&dir) {
            *xc -= alpha * d;
        }
        config.projection.apply(&mut x);
        if k % config.record_every == 0 || k == config.iterations {
            iterations.push(k);
            errors.push(error_sq(&x, x_star)?);
        }
    }

    Ok(ErrorTrace {
        iterations,
        errors,
        config: config.clone(),
        mask_mode: if fixed.is_some() {
            MaskMode::Fixed
        } else {
            MaskMode::Resample
        },
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{norm, DenseMatrix};
    use crate::missingness::{build_l, sample_mask_row, MaskRow};
    use crate::system::generate_gaussian_system;
    use proptest::prelude::*;
    use rand::Rng;

    fn obs(values: &[f64]) -> ObservedRow {
        ObservedRow::complete(0, values)
    }

    /// Masked update with the n×n outer product materialised.
    fn dense_tuple_direction(a: &[f64], y: f64, x: &[f64], p: f64, ell: usize) -> Vec<f64> {
        let n = a.len();
        let l = build_l(n, ell).unwrap();
        let ax: f64 = a.iter().zip(x).map(|(u, v)| u * v).sum();
        (0..n)
            .map(|r| {
                let mut corr = 0.0;
                for c in 0..n {
                    corr += l.matrix().get(r, c) * a[r] * a[c] * x[c];
                }
                a[r] * (ax - p * y) / (p * p) - (1.0 - p) / (p * p) * corr
            })
            .collect()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("adam".parse::<Method>().is_err());
    }

    #[test]
    fn sgd_step_cases() {
        let sys = generate_gaussian_system(10, 3, 1).unwrap();
        let xs = sys.x_star().unwrap();
        let row = obs(sys.a.row(4));
        let out = sgd_step(&row, sys.y[4], xs, 0.1).unwrap();
        for (a, b) in out.iter().zip(xs) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(sgd_step(&row, 3.0, &[1.0, 2.0, 3.0], 0.0).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(sgd_step(&obs(&[1.0, 0.0]), 2.0, &[0.0, 0.0], 1.0).unwrap(), vec![2.0, 0.0]);
        assert!(sgd_step(&row, 1.0, &[0.0; 2], 1.0).is_err());
    }

    #[test]
    fn msgd_step_cases() {
        let row = obs(&[1.0, 2.0]);
        let out = msgd_step(&row, 1.0, &[1.0, 1.0], 1.0, 0.5).unwrap();
        assert_eq!(out, vec![-7.0, -11.0]);
        // independent evaluation of the plain stochastic gradient
        let (a, x, p, y) = ([1.0, 2.0], [1.0, 1.0], 0.5, 1.0);
        let ax = a[0] * x[0] + a[1] * x[1];
        let h: Vec<f64> = (0..2)
            .map(|c| a[c] * (ax - p * y) / (p * p) - (1.0 - p) / (p * p) * a[c] * a[c] * x[c])
            .collect();
        assert_eq!(h, vec![8.0, 12.0]);

        let zero = ObservedRow::new(0, &[3.0, 4.0], MaskRow::from_bits(vec![false, false])).unwrap();
        assert_eq!(msgd_step(&zero, 5.0, &[1.0, -1.0], 0.7, 0.3).unwrap(), vec![1.0, -1.0]);
        assert_eq!(
            msgd_step(&row, 2.0, &[0.5, 0.25], 0.1, 1.0).unwrap(),
            sgd_step(&row, 2.0, &[0.5, 0.25], 0.1).unwrap()
        );
        assert!(msgd_step(&row, 1.0, &[1.0, 1.0], 1.0, 0.0).is_err());
        assert!(msgd_step(&row, 1.0, &[1.0, 1.0], 1.0, 1.2).is_err());
    }

    #[test]
    fn tuple_msgd_step_cases() {
        let row = obs(&[1.0, 2.0]);
        let l2 = build_l(2, 2).unwrap();
        let out = tuple_msgd_step(&row, 1.0, &[1.0, 1.0], 1.0, 0.5, &l2).unwrap();
        assert_eq!(out, vec![-3.0, -7.0]);
        let dense = dense_tuple_direction(&[1.0, 2.0], 1.0, &[1.0, 1.0], 0.5, 2);
        assert_eq!(dense, vec![4.0, 8.0]);

        let l1 = build_l(2, 1).unwrap();
        assert_eq!(
            tuple_msgd_step(&row, 1.0, &[1.0, 1.0], 1.0, 0.5, &l1).unwrap(),
            msgd_step(&row, 1.0, &[1.0, 1.0], 1.0, 0.5).unwrap()
        );
        assert_eq!(
            tuple_msgd_step(&row, 2.0, &[0.3, 0.1], 0.2, 1.0, &l2).unwrap(),
            sgd_step(&row, 2.0, &[0.3, 0.1], 0.2).unwrap()
        );
        assert!(tuple_msgd_step(&row, 1.0, &[1.0, 1.0], 1.0, 0.5, &build_l(4, 2).unwrap()).is_err());
        assert!(tuple_msgd_step(&row, 1.0, &[1.0, 1.0], 1.0, -0.1, &l2).is_err());
    }

    #[test]
    fn projection_cases() {
        assert_eq!(project_ball(&[30.0, 40.0], &Projection::Disabled), vec![30.0, 40.0]);
        assert_eq!(project_ball(&[3.0, 4.0], &Projection::Ball { radius: 10.0 }), vec![3.0, 4.0]);
        let p = project_ball(&[3.0, 4.0], &Projection::Ball { radius: 1.0 });
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert!(Projection::Ball { radius: 0.0 }.validate().is_err());
    }

    #[test]
    fn schedule_steps() {
        assert_eq!(StepSchedule::Fixed { alpha: 0.1 }.step(7), 0.1);
        assert_eq!(StepSchedule::InverseMuK { mu: 0.5 }.step(4), 0.5);
        assert!(StepSchedule::Fixed { alpha: 0.0 }.validate().is_err());
        assert!(StepSchedule::InverseMuK { mu: -1.0 }.validate().is_err());
    }

    fn base_config(sys: &LinearSystem, method: Method, ell: usize, p: f64) -> SolverConfig {
        let model = TupleMissingModel::new(sys.cols(), ell, p).unwrap();
        SolverConfig::new(method, model, StepSchedule::Fixed { alpha: 2e-3 }, 2000, 17)
    }

    #[test]
    fn full_presence_tuple_run_equals_sgd_run() {
        let sys = generate_gaussian_system(300, 10, 4).unwrap();
        let a = run_solver(&sys, &base_config(&sys, Method::TupleMsgd, 5, 1.0)).unwrap();
        let b = run_solver(&sys, &base_config(&sys, Method::Sgd, 5, 1.0)).unwrap();
        assert_eq!(a.errors, b.errors);
        assert_eq!(a.len(), 2001);
    }

    #[test]
    fn fixed_point_stays_put() {
        let sys = generate_gaussian_system(100, 6, 5).unwrap();
        let mut cfg = base_config(&sys, Method::TupleMsgd, 3, 1.0);
        cfg.x0 = Some(sys.x_star().unwrap().to_vec());
        let trace = run_solver(&sys, &cfg).unwrap();
        assert!(trace.errors.iter().all(|&e| e < 1e-24), "{:?}", &trace.errors[..5]);
    }

    #[test]
    fn runs_are_reproducible_and_thinned() {
        let sys = generate_gaussian_system(200, 6, 6).unwrap();
        let cfg = base_config(&sys, Method::TupleMsgd, 3, 0.7).with_record_every(300);
        let a = run_solver(&sys, &cfg).unwrap();
        let b = run_solver(&sys, &cfg).unwrap();
        assert_eq!(a.errors, b.errors);
        assert_eq!(a.iterations, vec![0, 300, 600, 900, 1200, 1500, 1800, 2000]);
        assert!(a.to_csv().starts_with("iteration,error\n0,"));
    }

    #[test]
    fn run_rejects_bad_configs() {
        let sys = generate_gaussian_system(20, 6, 6).unwrap();
        let mut no_truth = sys.clone();
        no_truth.x_star = None;
        let cfg = base_config(&sys, Method::Sgd, 3, 0.7);
        assert!(matches!(run_solver(&no_truth, &cfg), Err(Error::MissingGroundTruth)));
        let other = generate_gaussian_system(20, 4, 6).unwrap();
        assert!(run_solver(&other, &cfg).is_err());
        let mut zero = cfg.clone();
        zero.iterations = 0;
        assert!(run_solver(&sys, &zero).is_err());
    }

    #[test]
    fn projected_iterates_stay_in_ball() {
        let sys = generate_gaussian_system(100, 4, 8).unwrap();
        let radius = 2.0 * norm(sys.x_star().unwrap());
        let model = TupleMissingModel::new(4, 2, 0.5).unwrap();
        let cfg = SolverConfig::new(Method::TupleMsgd, model, StepSchedule::InverseMuK { mu: 0.05 }, 500, 3)
            .with_projection(Projection::Ball { radius });
        // ‖x_k‖ ≤ r implies ‖x_k − x_*‖ ≤ r + ‖x_*‖ = 1.5 r
        let trace = run_solver(&sys, &cfg).unwrap();
        assert!(trace.errors.iter().all(|&e| e.sqrt() <= 1.5 * radius + 1e-12));
    }

    #[test]
    fn fixed_mask_mode_uses_the_mask() {
        let sys = generate_gaussian_system(50, 4, 9).unwrap();
        let cfg = base_config(&sys, Method::Sgd, 2, 0.6);
        let ones = MaskMatrix::all_ones(50, 4);
        let fixed = run_solver_with_mask(&sys, &cfg, &ones).unwrap();
        assert_eq!(fixed.mask_mode, MaskMode::Fixed);
        let mut zeros = MaskMatrix::all_ones(50, 4);
        for i in 0..50 {
            for j in 0..4 {
                zeros.set(i, j, false);
            }
        }
        let stuck = run_solver_with_mask(&sys, &cfg, &zeros).unwrap();
        assert!(stuck.errors.iter().all(|&e| e == stuck.errors[0]));
        assert!(run_solver_with_mask(&sys, &cfg, &MaskMatrix::all_ones(49, 4)).is_err());
    }

    proptest! {
        #[test]
        fn block_local_correction_matches_dense_outer_product(
            tuples in 1usize..5, ell in 1usize..5, p in 0.05f64..1.0,
            y in -5.0f64..5.0, seed in any::<u64>(),
        ) {
            let n = tuples * ell;
            let mut rng = rng_from_seed(seed);
            let model = TupleMissingModel::new(n, ell, p).unwrap();
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let row = ObservedRow::new(0, &a, sample_mask_row(&model, &mut rng)).unwrap();
            let mut fast = vec![0.0; n];
            tuple_msgd_direction(&row.values, y, &x, p, ell, &mut fast);
            let dense = dense_tuple_direction(&row.values, y, &x, p, ell);
            let scale = dense.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (f, d) in fast.iter().zip(&dense) {
                prop_assert!((f - d).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn reductions_hold_exactly(
            n in 1usize..9, p in 0.05f64..1.0, y in -5.0f64..5.0, seed in any::<u64>(),
        ) {
            let mut rng = rng_from_seed(seed);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (mut t, mut s, mut m) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            tuple_msgd_direction(&a, y, &x, 1.0, n, &mut t);
            sgd_direction(&a, y, &x, &mut s);
            prop_assert_eq!(&t, &s);
            tuple_msgd_direction(&a, y, &x, p, 1, &mut t);
            msgd_direction(&a, y, &x, p, &mut m);
            prop_assert_eq!(&t, &m);
        }

        #[test]
        fn tuple_direction_is_affine_in_x(
            w in 0.0f64..1.0, p in 0.05f64..1.0, seed in any::<u64>(),
        ) {
            let (n, ell) = (6, 3);
            let mut rng = rng_from_seed(seed);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x2: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| w * u + (1.0 - w) * v).collect();
            let (mut h1, mut h2, mut hm) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            tuple_msgd_direction(&a, 0.7, &x1, p, ell, &mut h1);
            tuple_msgd_direction(&a, 0.7, &x2, p, ell, &mut h2);
            tuple_msgd_direction(&a, 0.7, &mix, p, ell, &mut hm);
            let scale = h1.iter().chain(&h2).fold(1.0f64, |m, v| m.max(v.abs()));
            for c in 0..n {
                prop_assert!((hm[c] - (w * h1[c] + (1.0 - w) * h2[c])).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn dense_matrix_rows_feed_steps() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let row = ObservedRow::new(0, a.row(0), MaskRow::from_bits(vec![true, false])).unwrap();
        assert_eq!(row.values, vec![1.0, 0.0]);
    }
}
