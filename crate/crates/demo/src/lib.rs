//! WebAssembly bindings behind `www/index.html`.
//!
//! Each exported function has a plain Rust twin in [`ops`] that returns JSON
//! text, so the logic runs and is tested natively; the wasm wrappers only
//! convert errors into JavaScript exceptions.

use wasm_bindgen::prelude::*;

pub mod ops;

fn js_err(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// Error traces of SGD, mSGD and ℓ-tuple mSGD on one Gaussian system with
/// shared seeds, as JSON `{iterations, traces: {method: [..]}}`.
#[wasm_bindgen(js_name = compareMethods)]
#[allow(clippy::too_many_arguments)]
pub fn compare_methods(
    m: usize,
    n: usize,
    ell: usize,
    p: f64,
    alpha: f64,
    iterations: u32,
    points: u32,
    seed: u32,
) -> Result<String, JsValue> {
    ops::compare_methods(m, n, ell, p, alpha, iterations as u64, points as u64, seed as u64).map_err(js_err)
}

/// A `rows × n` tuple mask, row-major, 1 = observed.
#[wasm_bindgen(js_name = sampleMask)]
pub fn sample_mask(rows: usize, n: usize, ell: usize, p: f64, seed: u32) -> Result<Vec<u8>, JsValue> {
    ops::sample_mask(rows, n, ell, p, seed as u64).map_err(js_err)
}

/// Size of the mSGD bias at `x_*` for every tuple length dividing `n`.
#[wasm_bindgen(js_name = biasByEll)]
pub fn bias_by_ell(m: usize, n: usize, p: f64, seed: u32) -> Result<String, JsValue> {
    ops::bias_by_ell(m, n, p, seed as u64).map_err(js_err)
}
