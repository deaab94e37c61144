//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain function of the same name in
//! [`ops`], which is what the native tests exercise.

use wasm_bindgen::prelude::*;

pub mod ops;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// `[lambda, onehot...]` for the rate `(j, num/den)` on `lambdas`.
#[wasm_bindgen]
pub fn interp_rate(lambdas: &[f64], j: usize, alpha_num: u16, alpha_den: u16) -> Result<Vec<f64>, JsError> {
    ops::interp_rate(lambdas, j, alpha_num, alpha_den).map_err(js)
}

/// Rows `[value, mass, table_prob, table_bits]` flattened, for `value` in
/// `lo..=hi`.
#[wasm_bindgen]
pub fn entropy_table(mu: f64, log_scale: f64, lo: i32, hi: i32) -> Result<Vec<f64>, JsError> {
    ops::entropy_table(mu, log_scale, lo, hi).map_err(js)
}

/// `[bd_rate_percent, bd_quality]` between the first curves of two CSV texts.
#[wasm_bindgen]
pub fn bd_compare(anchor_csv: &str, test_csv: &str) -> Result<Vec<f64>, JsError> {
    ops::bd_compare(anchor_csv, test_csv).map_err(js)
}
