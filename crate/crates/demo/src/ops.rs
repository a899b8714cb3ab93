use serde_json::json;

use tuplesgd::analysis::bias_term;
use tuplesgd::matrix::norm;
use tuplesgd::rng::rng_from_seed;
use tuplesgd::{build_l, generate_gaussian_system, run_solver, MaskMatrix, Method, SolverConfig, StepSchedule, TupleMissingModel};

pub const MAX_ROWS: usize = 20_000;
pub const MAX_COLS: usize = 200;
pub const MAX_ITERATIONS: u64 = 2_000_000;
pub const MAX_MASK_ROWS: usize = 500;

fn check_size(m: usize, n: usize) -> Result<(), String> {
    if m == 0 || n == 0 || m > MAX_ROWS || n > MAX_COLS {
        return Err(format!("need 1 <= m <= {MAX_ROWS} and 1 <= n <= {MAX_COLS}, got {m} x {n}"));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn compare_methods(
    m: usize,
    n: usize,
    ell: usize,
    p: f64,
    alpha: f64,
    iterations: u64,
    points: u64,
    seed: u64,
) -> Result<String, String> {
    check_size(m, n)?;
    if iterations == 0 || iterations > MAX_ITERATIONS {
        return Err(format!("iterations must lie in 1..={MAX_ITERATIONS}"));
    }
    let sys = generate_gaussian_system(m, n, seed).map_err(|e| e.to_string())?;
    let model = TupleMissingModel::new(n, ell, p).map_err(|e| e.to_string())?;
    let every = (iterations / points.max(1)).max(1);
    let base = SolverConfig::new(Method::Sgd, model, StepSchedule::Fixed { alpha }, iterations, seed ^ 0x5eed)
        .with_record_every(every);
    let mut traces = serde_json::Map::new();
    let mut recorded = Vec::new();
    for method in Method::ALL {
        let trace = run_solver(&sys, &base.with_method(method)).map_err(|e| e.to_string())?;
        recorded = trace.iterations.clone();
        traces.insert(method.to_string(), json!(trace.errors));
    }
    Ok(json!({ "iterations": recorded, "traces": traces }).to_string())
}

pub fn sample_mask(rows: usize, n: usize, ell: usize, p: f64, seed: u64) -> Result<Vec<u8>, String> {
    if rows == 0 || rows > MAX_MASK_ROWS {
        return Err(format!("rows must lie in 1..={MAX_MASK_ROWS}"));
    }
    check_size(rows, n)?;
    let model = TupleMissingModel::new(n, ell, p).map_err(|e| e.to_string())?;
    let mask = MaskMatrix::sample(&model, rows, &mut rng_from_seed(seed));
    Ok((0..rows)
        .flat_map(|i| mask.row(i).iter().map(|&b| b as u8).collect::<Vec<_>>())
        .collect())
}

/// `‖bias(x_*)‖ / ‖x_*‖` for every divisor `ℓ` of `n`.
pub fn bias_by_ell(m: usize, n: usize, p: f64, seed: u64) -> Result<String, String> {
    check_size(m, n)?;
    let sys = generate_gaussian_system(m, n, seed).map_err(|e| e.to_string())?;
    let xs = sys.x_star().map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for ell in (1..=n).filter(|d| n % d == 0) {
        let l = build_l(n, ell).map_err(|e| e.to_string())?;
        let b = bias_term(&sys.a, p, &l, xs).map_err(|e| e.to_string())?;
        rows.push(json!({ "ell": ell, "relative_bias": norm(&b) / norm(xs) }));
    }
    Ok(json!(rows).to_string())
}
