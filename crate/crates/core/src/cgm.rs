//! Sensor time series to tuple-structured linear systems.
//!
//! Per-second readings of `f` features are cut into fixed-length windows.
//! Each window becomes one row of `C`: a few readings, each contributing its
//! `f` features as one contiguous tuple. A reading whose noise level is too
//! high loses its whole tuple, which is exactly ℓ-tuple missingness with
//! `ℓ = f`. The glucose targets `g` are replaced by their projection onto
//! the column space of `C`, so that `C·x = ĝ` is consistent.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::matrix::DenseMatrix;
use crate::missingness::{MaskMatrix, TupleMissingModel};
use crate::rng::rng_from_seed;
use crate::solvers::{run_solver, run_solver_with_mask, ErrorTrace, MaskMode, Method, SolverConfig};
use crate::system::LinearSystem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub timestamp: f64,
    pub features: Vec<f64>,
    pub noise: f64,
    pub glucose: Option<f64>,
}

/// Column names of a sensor CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub timestamp: String,
    pub features: Vec<String>,
    pub noise: String,
    pub glucose: String,
}

impl CsvSchema {
    /// `timestamp, feature_1..feature_f, noise, glucose`
    pub fn generic(features: usize) -> Self {
        Self {
            timestamp: "timestamp".into(),
            features: (1..=features).map(|j| format!("feature_{j}")).collect(),
            noise: "noise".into(),
            glucose: "glucose".into(),
        }
    }

    pub fn arity(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedRow {
    /// 1-based line number in the file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadReport {
    pub records: Vec<SensorRecord>,
    pub rejects: Vec<RejectedRow>,
    pub total_rows: usize,
}

pub const DEFAULT_REJECT_CAP: f64 = 0.05;

pub fn load_sensor_csv(path: &Path, schema: &CsvSchema, reject_cap: f64) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_sensor_csv(file, schema, reject_cap)
}

/// Parses a headed CSV into timestamp-sorted records.
///
/// Rows with unparsable or non-finite cells, the wrong number of cells, or a
/// timestamp already seen are rejected and listed by line number. Loading
/// fails only when the rejected share of rows exceeds `reject_cap`. An empty
/// glucose cell means "no glucose reading at this time".
pub fn read_sensor_csv<R: Read>(reader: R, schema: &CsvSchema, reject_cap: f64) -> Result<LoadReport> {
    if !(0.0..=1.0).contains(&reject_cap) {
        return Err(Error::invalid("reject_cap", format!("must lie in [0, 1], got {reject_cap}")));
    }
    if schema.features.is_empty() {
        return Err(Error::invalid("schema.features", "need at least one feature column"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Ok(LoadReport {
            records: Vec::new(),
            rejects: Vec::new(),
            total_rows: 0,
        });
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let ts_col = find(&schema.timestamp)?;
    let feat_cols = schema
        .features
        .iter()
        .map(|f| find(f))
        .collect::<Result<Vec<_>>>()?;
    let noise_col = find(&schema.noise)?;
    let glucose_col = find(&schema.glucose)?;

    let mut parsed: Vec<(u64, SensorRecord)> = Vec::new();
    let mut rejects = Vec::new();
    let mut total_rows = 0;
    for row in rdr.records() {
        let row = row?;
        total_rows += 1;
        let line = row.position().map_or(0, |p| p.line());
        let number = |col: usize, what: &str| -> std::result::Result<f64, String> {
            let cell = row.get(col).ok_or_else(|| format!("missing {what} cell"))?;
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(format!("{what} `{cell}` is not a finite number")),
            }
        };
        let record = (|| {
            if row.len() != header.len() {
                return Err(format!("expected {} cells, found {}", header.len(), row.len()));
            }
            let timestamp = number(ts_col, "timestamp")?;
            let features = feat_cols
                .iter()
                .zip(&schema.features)
                .map(|(&c, name)| number(c, name))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let noise = number(noise_col, "noise")?;
            let glucose = if row.get(glucose_col).is_some_and(str::is_empty) {
                None
            } else {
                Some(number(glucose_col, "glucose")?)
            };
            Ok(SensorRecord {
                timestamp,
                features,
                noise,
                glucose,
            })
        })();
        match record {
            Ok(r) => parsed.push((line, r)),
            Err(reason) => rejects.push(RejectedRow { line, reason }),
        }
    }
    parsed.sort_by(|a, b| a.1.timestamp.total_cmp(&b.1.timestamp).then(a.0.cmp(&b.0)));
    let mut records: Vec<SensorRecord> = Vec::with_capacity(parsed.len());
    for (line, r) in parsed {
        if records.last().is_some_and(|last| last.timestamp == r.timestamp) {
            rejects.push(RejectedRow {
                line,
                reason: format!("duplicate timestamp {}", r.timestamp),
            });
        } else {
            records.push(r);
        }
    }
    rejects.sort_by_key(|r| r.line);
    if total_rows > 0 && rejects.len() as f64 > reject_cap * total_rows as f64 {
        return Err(Error::RejectRate {
            rejected: rejects.len(),
            total: total_rows,
            cap: reject_cap,
        });
    }
    Ok(LoadReport {
        records,
        rejects,
        total_rows,
    })
}

pub fn write_sensor_csv(records: &[SensorRecord], schema: &CsvSchema) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![schema.timestamp.clone()];
    header.extend(schema.features.iter().cloned());
    header.push(schema.noise.clone());
    header.push(schema.glucose.clone());
    w.write_record(&header)?;
    for r in records {
        check_len("record arity vs schema", schema.arity(), r.features.len())?;
        let mut cells = vec![r.timestamp.to_string()];
        cells.extend(r.features.iter().map(f64::to_string));
        cells.push(r.noise.to_string());
        cells.push(r.glucose.map(|g| g.to_string()).unwrap_or_default());
        w.write_record(&cells)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<memory>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// How a window's glucose target is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPolicy {
    /// The latest glucose reading inside the window.
    #[default]
    LastAtOrBeforeEnd,
    /// The mean of the glucose readings inside the window.
    WindowMean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowedSystem {
    pub c: DenseMatrix,
    pub g: Vec<f64>,
    /// Noise level of every selected reading, row-major: entry
    /// `w·readings_per_window + j` belongs to reading `j` of window `w`.
    pub noise: Vec<f64>,
    /// Tuple length, equal to the feature arity.
    pub ell: usize,
    pub readings_per_window: usize,
    pub window_starts: Vec<f64>,
    pub dropped_short: usize,
    pub dropped_no_target: usize,
}

/// Cuts `records` (sorted, constant arity) into consecutive windows
/// `[t0 + w·span, t0 + (w+1)·span)` with `t0` the first timestamp.
///
/// A window holding `N ≥ R` readings keeps readings
/// `round(j·(N−1)/(R−1))`, `j = 0..R`, concatenated in time order. Windows
/// with fewer than `R` readings or no glucose target are dropped and counted.
pub fn window_features(
    records: &[SensorRecord],
    readings_per_window: usize,
    window_span: f64,
    policy: TargetPolicy,
) -> Result<WindowedSystem> {
    if readings_per_window == 0 {
        return Err(Error::invalid("readings_per_window", "must be at least 1"));
    }
    if !(window_span.is_finite() && window_span > 0.0) {
        return Err(Error::invalid("window_span", format!("must be positive, got {window_span}")));
    }
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("records", "no sensor records to window"))?;
    let f = first.features.len();
    if f == 0 {
        return Err(Error::invalid("records", "records carry no features"));
    }
    if let Some(pos) = records.windows(2).position(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(Error::invalid(
            "records",
            format!("timestamps must be strictly increasing (record {})", pos + 1),
        ));
    }
    let t0 = first.timestamp;
    let r = readings_per_window;
    let mut data = Vec::new();
    let mut g = Vec::new();
    let mut noise = Vec::new();
    let mut window_starts = Vec::new();
    let (mut dropped_short, mut dropped_no_target) = (0, 0);

    let mut start = 0;
    while start < records.len() {
        let w = ((records[start].timestamp - t0) / window_span).floor();
        let end_t = t0 + (w + 1.0) * window_span;
        let end = start + records[start..].partition_point(|rec| rec.timestamp < end_t);
        let window = &records[start..end];
        start = end;

        let glucose: Vec<f64> = window.iter().filter_map(|rec| rec.glucose).collect();
        let target = match policy {
            TargetPolicy::LastAtOrBeforeEnd => glucose.last().copied(),
            TargetPolicy::WindowMean if glucose.is_empty() => None,
            TargetPolicy::WindowMean => Some(glucose.iter().sum::<f64>() / glucose.len() as f64),
        };
        if window.len() < r {
            dropped_short += 1;
            continue;
        }
        let Some(target) = target else {
            dropped_no_target += 1;
            continue;
        };
        let n_avail = window.len();
        for j in 0..r {
            let idx = if r == 1 {
                0
            } else {
                ((j * (n_avail - 1)) as f64 / (r - 1) as f64).round() as usize
            };
            let rec = &window[idx];
            check_len("feature arity", f, rec.features.len())?;
            data.extend_from_slice(&rec.features);
            noise.push(rec.noise);
        }
        g.push(target);
        window_starts.push(t0 + w * window_span);
    }
    if g.is_empty() {
        return Err(Error::invalid("records", "no window has enough readings and a glucose target"));
    }
    Ok(WindowedSystem {
        c: DenseMatrix::new(g.len(), r * f, data)?,
        g,
        noise,
        ell: f,
        readings_per_window: r,
        window_starts,
        dropped_short,
        dropped_no_target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseMask {
    pub mask: MaskMatrix,
    /// Readings with noise strictly above this value are rejected.
    pub threshold: f64,
    pub rejected_readings: usize,
    pub total_readings: usize,
    pub target_fraction: f64,
    /// Zero fraction of `mask`.
    pub realized_fraction: f64,
}

/// Rejects the noisiest readings of `sys` and zeroes their feature tuples.
///
/// The threshold is the `(1 − frac)` empirical quantile taken as the largest
/// noise value that survives when the `round(frac·N)` noisiest of the `N`
/// readings are dropped. Readings tied with the threshold are kept, so ties
/// can push the realized fraction below the target.
pub fn noise_threshold_mask(sys: &WindowedSystem, noise: &[f64], target_fraction: f64) -> Result<NoiseMask> {
    let r = sys.readings_per_window;
    let total = sys.c.rows() * r;
    check_len("noise values vs selected readings", total, noise.len())?;
    if !(0.0..1.0).contains(&target_fraction) {
        return Err(Error::invalid(
            "missing_frac",
            format!("must lie in [0, 1), got {target_fraction}"),
        ));
    }
    if let Some(i) = noise.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let mut sorted = noise.to_vec();
    sorted.sort_by(f64::total_cmp);
    let drop = (target_fraction * total as f64).round() as usize;
    let threshold = sorted[total - 1 - drop.min(total - 1)];
    let mut mask = MaskMatrix::all_ones(sys.c.rows(), sys.c.cols());
    let mut rejected = 0;
    for (k, &v) in noise.iter().enumerate() {
        if v > threshold {
            rejected += 1;
            let (w, j) = (k / r, k % r);
            for c in j * sys.ell..(j + 1) * sys.ell {
                mask.set(w, c, false);
            }
        }
    }
    Ok(NoiseMask {
        realized_fraction: mask.zero_fraction(),
        mask,
        threshold,
        rejected_readings: rejected,
        total_readings: total,
        target_fraction,
    })
}

/// Singular values at or below this are treated as zero.
pub fn svd_tolerance(sv: &DVector<f64>, rows: usize, cols: usize) -> f64 {
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    rows.max(cols) as f64 * f64::EPSILON * smax
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    /// `ĝ = C·C†·g`
    pub g_hat: Vec<f64>,
    /// Minimum-norm least-squares solution of `C·x = ĝ`.
    pub x_min_norm: Vec<f64>,
    pub rank: usize,
    pub tolerance: f64,
}

/// Orthogonal projection of `g` onto the column space of `C`.
///
/// Uses a thin SVD `C = U·Σ·Vᵀ`: with `U_r` the left singular vectors whose
/// singular values exceed [`svd_tolerance`], `ĝ = U_r·(U_rᵀ·g)` and
/// `x = V_r·Σ_r⁻¹·U_rᵀ·g`.
pub fn project_onto_range(c: &DenseMatrix, g: &[f64]) -> Result<Projection> {
    check_len("g length vs rows of C", c.rows(), g.len())?;
    let svd = c.to_nalgebra().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let tol = svd_tolerance(&svd.singular_values, c.rows(), c.cols());
    let gv = DVector::from_column_slice(g);
    let mut g_hat = DVector::zeros(c.rows());
    let mut x = DVector::zeros(c.cols());
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= tol {
            continue;
        }
        rank += 1;
        let uk = u.column(k);
        let coef = uk.dot(&gv);
        g_hat.axpy(coef, &uk, 1.0);
        x.axpy(coef / s, &v_t.row(k).transpose(), 1.0);
    }
    Ok(Projection {
        g_hat: g_hat.iter().copied().collect(),
        x_min_norm: x.iter().copied().collect(),
        rank,
        tolerance: tol,
    })
}

pub fn consistent_rhs(c: &DenseMatrix, g: &[f64]) -> Result<Vec<f64>> {
    project_onto_range(c, g).map(|p| p.g_hat)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CgmTrace {
    pub method: Method,
    pub mode: MaskMode,
    pub trace: ErrorTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CgmRun {
    /// Presence probability handed to the corrected updates:
    /// `1 − realized missing fraction`.
    pub p: f64,
    pub system: LinearSystem,
    pub traces: Vec<CgmTrace>,
}

/// Solves `C·x = ĝ` with every method in `methods`, once with the noise
/// mask held fixed and once with fresh tuple masks drawn at the realized
/// presence rate. `base` supplies schedule, iterations and seed; its model
/// is replaced. All runs share the seed.
pub fn solve_cgm(
    sys: &WindowedSystem,
    noise_mask: &NoiseMask,
    methods: &[Method],
    base: &SolverConfig,
) -> Result<CgmRun> {
    check_len("mask rows", sys.c.rows(), noise_mask.mask.rows())?;
    check_len("mask cols", sys.c.cols(), noise_mask.mask.cols())?;
    let p = 1.0 - noise_mask.realized_fraction;
    if p <= 0.0 {
        return Err(Error::invalid("mask", "every entry is masked; nothing to solve"));
    }
    let proj = project_onto_range(&sys.c, &sys.g)?;
    let system = LinearSystem::new(sys.c.clone(), proj.g_hat, Some(proj.x_min_norm))?;
    let mut cfg = base.clone();
    cfg.model = TupleMissingModel::new(sys.c.cols(), sys.ell, p)?;
    let mut traces = Vec::new();
    for mode in [MaskMode::Fixed, MaskMode::Resample] {
        for &method in methods {
            let run_cfg = cfg.with_method(method);
            let trace = match mode {
                MaskMode::Fixed => run_solver_with_mask(&system, &run_cfg, &noise_mask.mask)?,
                MaskMode::Resample => run_solver(&system, &run_cfg)?,
            };
            traces.push(CgmTrace { method, mode, trace });
        }
    }
    Ok(CgmRun { p, system, traces })
}

/// Parameters of a synthetic sensor stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStream {
    pub windows: usize,
    pub window_seconds: u64,
    pub features: usize,
    pub seed: u64,
}

impl Default for SyntheticStream {
    fn default() -> Self {
        Self {
            windows: 365,
            window_seconds: 300,
            features: 2,
            seed: 1,
        }
    }
}

/// One reading per second, with a glucose reading in the last second of
/// every window. Features are slow oscillations plus Gaussian jitter whose
/// scale is the reading's (continuous, hence almost surely distinct) noise
/// level.
pub fn synthetic_stream(params: &SyntheticStream) -> Result<Vec<SensorRecord>> {
    if params.windows == 0 || params.window_seconds == 0 || params.features == 0 {
        return Err(Error::invalid("synthetic stream", "windows, window_seconds and features must be positive"));
    }
    let mut rng = rng_from_seed(params.seed);
    let t0 = 1_700_000_000.0;
    let span = params.window_seconds;
    let freqs: Vec<f64> = (0..params.features)
        .map(|j| 2.0 * std::f64::consts::PI / (1800.0 * (j + 1) as f64))
        .collect();
    let mut out = Vec::with_capacity(params.windows * span as usize);
    for s in 0..params.windows as u64 * span {
        let t = s as f64;
        let noise: f64 = rng.random::<f64>() * 0.5;
        let features: Vec<f64> = freqs
            .iter()
            .enumerate()
            .map(|(j, w)| {
                let jitter: f64 = rng.sample(StandardNormal);
                (w * t + j as f64).sin() + noise * jitter
            })
            .collect();
        let glucose = (s % span == span - 1).then(|| {
            let drift: f64 = rng.sample(StandardNormal);
            110.0 + 25.0 * (freqs[0] * t).sin() + 10.0 * features[features.len() - 1] + 3.0 * drift
        });
        out.push(SensorRecord {
            timestamp: t0 + t,
            features,
            noise,
            glucose,
        });
    }
    Ok(out)
}

/// `Cᵀ·r` as a plain vector, for orthogonality checks.
pub fn transpose_times(c: &DenseMatrix, r: &[f64]) -> Result<Vec<f64>> {
    let cm: DMatrix<f64> = c.to_nalgebra();
    check_len("vector length vs rows", c.rows(), r.len())?;
    Ok((cm.transpose() * DVector::from_column_slice(r)).iter().copied().collect())
}
