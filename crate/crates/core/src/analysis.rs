//! Theory layer: strong convexity, the second-moment bound `G`, the
//! `1/(μk)` convergence bound, the mSGD bias under tuple missingness, and
//! exact / Monte-Carlo expectations of the update directions.
//!
//! # Bias convention
//!
//! Row expectations use `E_i[A_iᵀA_i] = AᵀA/m`. Under ℓ-tuple missingness
//! with presence probability `p`,
//!
//! ```text
//! E[h_msgd(x)] − ∇F(x) = ((1−p)/p) · ((L − I) ⊙ AᵀA/m) · x
//! ```
//!
//! which is what [`bias_term`] returns. The ℓ-tuple direction has zero bias.
//! The constant (including the `1/p` and `1/m` factors) is pinned by the
//! exact enumeration in [`exact_expected_update`]; see the tests.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, check_probability, Error, Result};
use crate::matrix::{norm, norm_sq, scaled_deviation, DenseMatrix};
use crate::missingness::{enumerate_masks, fill_mask, CorrectionStructure, TupleMissingModel};
use crate::par::par_map;
use crate::rng::{derive_seed, rng_from_seed};
use crate::solvers::{run_solver, step_direction, Method, Projection, SolverConfig, StepSchedule};
use crate::system::{full_gradient, generate_gaussian_system, LinearSystem};

/// Cap on `n/ℓ` for exact expectations (2^12 masks).
pub const EXACT_TUPLE_CAP: usize = 12;
/// Cap on `m` for exact expectations.
pub const EXACT_ROW_CAP: usize = 10_000;

pub const BIAS_CONVENTION: &str = "E[h_msgd] - grad F = ((1-p)/p) * ((L - I) .* (A^T A / m)) * x";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuEstimate {
    pub mu: f64,
    pub sigma_min: f64,
    /// Set when `A` is numerically rank deficient; `mu` is then 0 and the
    /// `1/(μk)` theory does not apply.
    pub rank_deficient: bool,
}

/// `σ_min(A)²/m` from the singular values of a bidiagonalising SVD
/// (nalgebra's Golub–Kahan implementation). Singular values below
/// `max(m, n)·ε·σ_max` count as zero.
pub fn strong_convexity_mu(a: &DenseMatrix) -> Result<MuEstimate> {
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        return Err(Error::invalid("A", format!("need m >= n, got {m} x {n}")));
    }
    let sv = a.to_nalgebra().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = m.max(n) as f64 * f64::EPSILON * smax;
    if smin <= tol {
        return Ok(MuEstimate {
            mu: 0.0,
            sigma_min: smin,
            rank_deficient: true,
        });
    }
    Ok(MuEstimate {
        mu: smin * smin / m as f64,
        sigma_min: smin,
        rank_deficient: false,
    })
}

/// `G = 2B/(m p³)·Σ‖A_i‖⁴ + 2/(m p)·Σ y_i²‖A_i‖²`
pub fn bound_g(sys: &LinearSystem, p: f64, b: f64) -> Result<f64> {
    check_probability(p)?;
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::invalid("B", format!("squared radius must be positive, got {b}")));
    }
    let m = sys.rows() as f64;
    let (mut quartic, mut weighted) = (0.0, 0.0);
    for i in 0..sys.rows() {
        let r2 = norm_sq(sys.a.row(i));
        quartic += r2 * r2;
        weighted += sys.y[i] * sys.y[i] * r2;
    }
    Ok(2.0 * b / (m * p.powi(3)) * quartic + 2.0 / (m * p) * weighted)
}

/// `17·G·(1 + ln k)/(μ²·k)` (natural log).
pub fn convergence_bound(g: f64, mu: f64, k: u64) -> Result<f64> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::invalid("mu", "convergence bound needs mu > 0"));
    }
    if k == 0 {
        return Err(Error::invalid("k", "iteration index starts at 1"));
    }
    if !(g >= 0.0) {
        return Err(Error::invalid("G", "must be non-negative"));
    }
    let kf = k as f64;
    Ok(17.0 * g * (1.0 + kf.ln()) / (mu * mu * kf))
}

/// Expected mSGD-minus-gradient gap under tuple missingness; see the module
/// docs for the convention.
pub fn bias_term(a: &DenseMatrix, p: f64, l: &CorrectionStructure, x: &[f64]) -> Result<Vec<f64>> {
    check_probability(p)?;
    check_len("x length vs cols", a.cols(), x.len())?;
    check_len("correction structure size vs cols", a.cols(), l.n())?;
    let n = a.cols();
    let mut gram = a.gram();
    gram.scale(1.0 / a.rows() as f64);
    let coef = (1.0 - p) / p;
    let mut out = vec![0.0; n];
    for (r, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for c in 0..n {
            if c != r && l.same_tuple(r, c) {
                s += gram.get(r, c) * x[c];
            }
        }
        *o = coef * s;
    }
    Ok(out)
}

/// `E_i E_δ[d(i, δ, x)]` by enumerating every row and every mask.
pub fn exact_expected_update(
    sys: &LinearSystem,
    method: Method,
    model: &TupleMissingModel,
    x: &[f64],
) -> Result<Vec<f64>> {
    let n = sys.cols();
    check_len("model width vs cols", n, model.n())?;
    check_len("x length vs cols", n, x.len())?;
    if model.tuples() > EXACT_TUPLE_CAP {
        return Err(Error::BudgetExceeded {
            what: "n/ell",
            value: model.tuples(),
            cap: EXACT_TUPLE_CAP,
        });
    }
    if sys.rows() > EXACT_ROW_CAP {
        return Err(Error::BudgetExceeded {
            what: "m",
            value: sys.rows(),
            cap: EXACT_ROW_CAP,
        });
    }
    let masks = enumerate_masks(model)?;
    let (p, ell) = (model.p(), model.ell());
    let mut total = vec![0.0; n];
    let mut row_acc = vec![0.0; n];
    let mut values = vec![0.0; n];
    let mut dir = vec![0.0; n];
    for i in 0..sys.rows() {
        row_acc.fill(0.0);
        let row = sys.a.row(i);
        for (mask, prob) in &masks {
            for ((v, &a), &b) in values.iter_mut().zip(row).zip(mask.bits()) {
                *v = if b { a } else { 0.0 };
            }
            step_direction(method, &values, sys.y[i], x, p, ell, &mut dir);
            for (acc, d) in row_acc.iter_mut().zip(&dir) {
                *acc += prob * d;
            }
        }
        for (t, r) in total.iter_mut().zip(&row_acc) {
            *t += r;
        }
    }
    let m = sys.rows() as f64;
    total.iter_mut().for_each(|v| *v /= m);
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McScalar {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

pub const MC_MIN_SAMPLES: usize = 1_000;

fn mc_draws(
    sys: &LinearSystem,
    method: Method,
    model: &TupleMissingModel,
    x: &[f64],
    samples: usize,
    seed: u64,
    mut visit: impl FnMut(&[f64]),
) -> Result<()> {
    let n = sys.cols();
    check_len("model width vs cols", n, model.n())?;
    check_len("x length vs cols", n, x.len())?;
    if samples < MC_MIN_SAMPLES {
        return Err(Error::invalid(
            "samples",
            format!("need at least {MC_MIN_SAMPLES} Monte-Carlo samples, got {samples}"),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut bits = vec![true; n];
    let mut values = vec![0.0; n];
    let mut dir = vec![0.0; n];
    for _ in 0..samples {
        let i = rng.random_range(0..sys.rows());
        fill_mask(model, &mut rng, &mut bits);
        for ((v, &a), &b) in values.iter_mut().zip(sys.a.row(i)).zip(&bits) {
            *v = if b { a } else { 0.0 };
        }
        step_direction(method, &values, sys.y[i], x, model.p(), model.ell(), &mut dir);
        visit(&dir);
    }
    Ok(())
}

/// Sample mean of the update direction over independent (row, mask) draws,
/// with per-coordinate standard errors (Welford accumulation, sequential).
pub fn mc_expected_update(
    sys: &LinearSystem,
    method: Method,
    model: &TupleMissingModel,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let n = sys.cols();
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut count = 0.0;
    mc_draws(sys, method, model, x, samples, seed, |d| {
        count += 1.0;
        for c in 0..n {
            let delta = d[c] - mean[c];
            mean[c] += delta / count;
            m2[c] += delta * (d[c] - mean[c]);
        }
    })?;
    let std_error = m2
        .iter()
        .map(|v| (v / (count - 1.0) / count).sqrt())
        .collect();
    Ok(McEstimate {
        mean,
        std_error,
        samples,
    })
}

/// Monte-Carlo estimate of `E‖d(x)‖²`.
pub fn mc_second_moment(
    sys: &LinearSystem,
    method: Method,
    model: &TupleMissingModel,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<McScalar> {
    let (mut mean, mut m2, mut count) = (0.0, 0.0, 0.0);
    mc_draws(sys, method, model, x, samples, seed, |d| {
        let v = norm_sq(d);
        count += 1.0;
        let delta = v - mean;
        mean += delta / count;
        m2 += delta * (v - mean);
    })?;
    Ok(McScalar {
        mean,
        std_error: (m2 / (count - 1.0) / count).sqrt(),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryConstants {
    pub mu: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub rank_deficient: bool,
}

/// `μ`, `G` and `B = radius²` for projected runs on `sys`.
pub fn theory_constants(sys: &LinearSystem, p: f64, radius: f64) -> Result<TheoryConstants> {
    let mu = strong_convexity_mu(&sys.a)?;
    let b = radius * radius;
    Ok(TheoryConstants {
        mu: mu.mu,
        g: bound_g(sys, p, b)?,
        b,
        rank_deficient: mu.rank_deficient,
    })
}

/// Draws a point uniformly in the ball of squared radius `b`.
pub fn random_point_in_ball<R: Rng + ?Sized>(n: usize, b: f64, rng: &mut R) -> Vec<f64> {
    let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let len = norm(&dir).max(f64::MIN_POSITIVE);
    let r = b.sqrt() * rng.random::<f64>().powf(1.0 / n as f64);
    dir.iter().map(|v| v * r / len).collect()
}

// ---------------------------------------------------------------------------
// Check suites
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub mu: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub bias_convention: &'static str,
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    All,
    Unbiased,
    Bias,
    Bound,
    Convergence,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "unbiased" => Ok(Suite::Unbiased),
            "bias" => Ok(Suite::Bias),
            "bound" => Ok(Suite::Bound),
            "convergence" => Ok(Suite::Convergence),
            other => Err(Error::invalid(
                "suite",
                format!("unknown suite `{other}` (all, unbiased, bias, bound, convergence)"),
            )),
        }
    }
}

/// Parameters of the oracle check suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub suite: Suite,
    pub m: usize,
    pub n: usize,
    pub ells: Vec<usize>,
    pub ps: Vec<f64>,
    /// Random evaluation points per (ℓ, p) cell.
    pub points: usize,
    pub seed: u64,
    pub mc_samples: usize,
    pub bound_points: usize,
    pub convergence: ConvergenceCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCheck {
    pub m: usize,
    pub n: usize,
    pub ell: usize,
    pub p: f64,
    pub replications: usize,
    pub checkpoints: Vec<u64>,
    /// Projection radius as a multiple of `‖x_*‖`.
    pub radius_factor: f64,
}

impl Default for ConvergenceCheck {
    fn default() -> Self {
        Self {
            m: 200,
            n: 5,
            ell: 5,
            p: 0.7,
            replications: 200,
            checkpoints: vec![100, 1_000, 10_000],
            radius_factor: 2.0,
        }
    }
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            suite: Suite::All,
            m: 50,
            n: 8,
            ells: vec![1, 2, 4],
            ps: vec![0.3, 0.6, 0.9],
            points: 5,
            seed: 1,
            mc_samples: 100_000,
            bound_points: 20,
            convergence: ConvergenceCheck::default(),
        }
    }
}

pub const EXACT_TOLERANCE: f64 = 1e-10;
pub const ZERO_BIAS_TOLERANCE: f64 = 1e-14;

impl CheckConfig {
    fn validate(&self) -> Result<()> {
        if self.ells.is_empty() || self.ps.is_empty() {
            return Err(Error::invalid("ells/ps", "need at least one value each"));
        }
        for &ell in &self.ells {
            let model = TupleMissingModel::new(self.n, ell, 0.5)?;
            if model.tuples() > EXACT_TUPLE_CAP {
                return Err(Error::BudgetExceeded {
                    what: "n/ell",
                    value: model.tuples(),
                    cap: EXACT_TUPLE_CAP,
                });
            }
        }
        if self.m > EXACT_ROW_CAP {
            return Err(Error::BudgetExceeded {
                what: "m",
                value: self.m,
                cap: EXACT_ROW_CAP,
            });
        }
        for &p in &self.ps {
            check_probability(p)?;
        }
        Ok(())
    }
}

/// Runs the selected oracle checks. The returned report carries `μ`, `G`
/// and `B` of the main instance (radius `2‖x_*‖`, `p` = smallest in the grid).
pub fn run_checks(cfg: &CheckConfig) -> Result<CheckReport> {
    cfg.validate()?;
    let sys = generate_gaussian_system(cfg.m, cfg.n, cfg.seed)?;
    let radius = 2.0 * norm(sys.x_star()?);
    let p_min = cfg.ps.iter().cloned().fold(1.0, f64::min);
    let consts = theory_constants(&sys, p_min, radius)?;
    let mut checks = Vec::new();
    let want = |s: Suite| cfg.suite == Suite::All || cfg.suite == s;

    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[1]));
    let points: Vec<Vec<f64>> = (0..cfg.points)
        .map(|_| (0..cfg.n).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();

    if want(Suite::Unbiased) {
        checks.extend(check_unbiasedness(&sys, &cfg.ells, &cfg.ps, &points)?);
    }
    if want(Suite::Bias) {
        checks.extend(check_bias_identity(&sys, &cfg.ells, &cfg.ps, &points)?);
    }
    if want(Suite::Bound) {
        for &ell in &cfg.ells {
            for &p in &cfg.ps {
                let model = TupleMissingModel::new(cfg.n, ell, p)?;
                let seed = derive_seed(cfg.seed, &[2, ell as u64, p.to_bits()]);
                checks.push(check_g_bound(&sys, &model, radius * radius, cfg.bound_points, cfg.mc_samples, seed)?);
            }
        }
    }
    if want(Suite::Convergence) {
        checks.extend(check_convergence_bound(&cfg.convergence, derive_seed(cfg.seed, &[3]))?);
    }
    Ok(CheckReport {
        mu: consts.mu,
        g: consts.g,
        b: consts.b,
        bias_convention: BIAS_CONVENTION,
        checks,
    })
}

/// Exact `E[h_ℓ(x)] = ∇F(x)` on every (ℓ, p, x) cell.
pub fn check_unbiasedness(
    sys: &LinearSystem,
    ells: &[usize],
    ps: &[f64],
    points: &[Vec<f64>],
) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &ell in ells {
        for &p in ps {
            let model = TupleMissingModel::new(sys.cols(), ell, p)?;
            let mut worst = 0.0_f64;
            for x in points {
                let exact = exact_expected_update(sys, Method::TupleMsgd, &model, x)?;
                worst = worst.max(scaled_deviation(&exact, &full_gradient(sys, x)?));
            }
            out.push(CheckResult {
                name: format!("unbiased ell={ell} p={p}"),
                pass: worst < EXACT_TOLERANCE,
                max_deviation: worst,
            });
        }
    }
    Ok(out)
}

/// `E[h_msgd(x)] − ∇F(x) = bias_term` for ℓ > 1, and `‖bias_term‖ ≈ 0` for ℓ = 1.
pub fn check_bias_identity(
    sys: &LinearSystem,
    ells: &[usize],
    ps: &[f64],
    points: &[Vec<f64>],
) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &ell in ells {
        let l = crate::missingness::build_l(sys.cols(), ell)?;
        for &p in ps {
            let model = TupleMissingModel::new(sys.cols(), ell, p)?;
            let mut worst = 0.0_f64;
            let pass;
            if ell == 1 {
                for x in points {
                    worst = worst.max(norm(&bias_term(&sys.a, p, &l, x)?));
                }
                pass = worst < ZERO_BIAS_TOLERANCE;
            } else {
                for x in points {
                    let exact = exact_expected_update(sys, Method::Msgd, &model, x)?;
                    let gap = crate::matrix::sub(&exact, &full_gradient(sys, x)?)?;
                    worst = worst.max(scaled_deviation(&gap, &bias_term(&sys.a, p, &l, x)?));
                }
                pass = worst < EXACT_TOLERANCE;
            }
            out.push(CheckResult {
                name: format!("bias ell={ell} p={p}"),
                pass,
                max_deviation: worst,
            });
        }
    }
    Ok(out)
}

/// Monte-Carlo `E‖h_ℓ(x)‖² ≤ G` at random points with `‖x‖² ≤ B`. The reported
/// deviation is the largest ratio of the estimate to `G`.
pub fn check_g_bound(
    sys: &LinearSystem,
    model: &TupleMissingModel,
    b: f64,
    points: usize,
    samples: usize,
    seed: u64,
) -> Result<CheckResult> {
    let g = bound_g(sys, model.p(), b)?;
    let mut rng = rng_from_seed(seed);
    let xs: Vec<Vec<f64>> = (0..points)
        .map(|_| random_point_in_ball(sys.cols(), b, &mut rng))
        .collect();
    let ratios = par_map(&xs, |k, x| {
        mc_second_moment(sys, Method::TupleMsgd, model, x, samples, derive_seed(seed, &[k as u64]))
            .map(|est| est.mean / g)
    });
    let mut worst = 0.0_f64;
    for r in ratios {
        worst = worst.max(r?);
    }
    Ok(CheckResult {
        name: format!("G-bound ell={} p={}", model.ell(), model.p()),
        pass: worst <= 1.0,
        max_deviation: worst,
    })
}

/// Mean error of projected `1/(μk)` ℓ-tuple mSGD runs against the bound.
/// The reported deviation at each checkpoint is `mean error / bound`.
pub fn check_convergence_bound(cfg: &ConvergenceCheck, seed: u64) -> Result<Vec<CheckResult>> {
    let summary = convergence_experiment(cfg, seed)?;
    Ok(summary
        .checkpoints
        .iter()
        .map(|c| CheckResult {
            name: format!("convergence k={}", c.k),
            pass: c.mean_error < c.bound,
            max_deviation: c.mean_error / c.bound,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub k: u64,
    pub mean_error: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    pub constants: TheoryConstants,
    pub radius: f64,
    pub checkpoints: Vec<CheckpointSummary>,
}

pub fn convergence_experiment(cfg: &ConvergenceCheck, seed: u64) -> Result<ConvergenceSummary> {
    if cfg.replications == 0 || cfg.checkpoints.is_empty() {
        return Err(Error::invalid("convergence", "need replications and checkpoints"));
    }
    let sys = generate_gaussian_system(cfg.m, cfg.n, derive_seed(seed, &[0]))?;
    let radius = cfg.radius_factor * norm(sys.x_star()?);
    let consts = theory_constants(&sys, cfg.p, radius)?;
    if consts.rank_deficient {
        return Err(Error::invalid("A", "rank deficient; mu = 0"));
    }
    let model = TupleMissingModel::new(cfg.n, cfg.ell, cfg.p)?;
    let horizon = *cfg.checkpoints.iter().max().expect("non-empty");
    let every = cfg.checkpoints.iter().fold(0, |g, &k| gcd(g, k));
    let reps: Vec<usize> = (0..cfg.replications).collect();
    let traces = par_map(&reps, |_, &r| {
        let config = SolverConfig::new(
            Method::TupleMsgd,
            model,
            StepSchedule::InverseMuK { mu: consts.mu },
            horizon,
            derive_seed(seed, &[1, r as u64]),
        )
        .with_projection(Projection::Ball { radius })
        .with_record_every(every);
        run_solver(&sys, &config)
    });
    let traces = traces.into_iter().collect::<Result<Vec<_>>>()?;
    let mut checkpoints = Vec::new();
    for &k in &cfg.checkpoints {
        let idx = traces[0]
            .iterations
            .iter()
            .position(|&it| it == k)
            .expect("checkpoint recorded");
        let mean_error = traces.iter().map(|t| t.errors[idx]).sum::<f64>() / traces.len() as f64;
        checkpoints.push(CheckpointSummary {
            k,
            mean_error,
            bound: convergence_bound(consts.g, consts.mu, k)?,
        });
    }
    Ok(ConvergenceSummary {
        constants: consts,
        radius,
        checkpoints,
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
