use ivr_core::coder::{build_cdf, QuantParams, SUPPORT, TOTAL};
use ivr_core::entropy::laplace_mass;
use ivr_core::interpca::{interp_lambda, interp_onehot, Alpha, RateControl};
use ivr_core::metrics::{bd_quality, bd_rate, read_curves, RdCurve};

pub fn interp_rate(lambdas: &[f64], j: usize, alpha_num: u16, alpha_den: u16) -> Result<Vec<f64>, String> {
    let alpha = Alpha::new(alpha_num, alpha_den).map_err(|e| e.to_string())?;
    let rate = RateControl::new(lambdas, j, alpha).map_err(|e| e.to_string())?;
    let mut out = vec![interp_lambda(&rate).map_err(|e| e.to_string())?];
    out.extend(interp_onehot(&rate).map_err(|e| e.to_string())?.iter().map(|&v| v as f64));
    Ok(out)
}

/// Values outside the table support cost the escape slot plus 16 raw bits.
pub fn entropy_table(mu: f64, log_scale: f64, lo: i32, hi: i32) -> Result<Vec<f64>, String> {
    const MAX_ROWS: i32 = 512;
    if lo > hi || hi - lo >= MAX_ROWS {
        return Err(format!("value range {lo}..={hi} must hold 1 to {MAX_ROWS} values"));
    }
    if !(mu.is_finite() && log_scale.is_finite()) {
        return Err("mu and log_scale must be finite".into());
    }
    let q = QuantParams::new(mu as f32, log_scale as f32);
    let table = build_cdf(q, SUPPORT);
    let prob = |slot: usize| table.freq(slot) as f64 / TOTAL as f64;
    let mut out = Vec::with_capacity(4 * (hi - lo + 1) as usize);
    for v in lo..=hi {
        let p = match table.slot_of(v) {
            Some(s) => prob(s),
            None => prob(table.escape_slot()) * 2f64.powi(-16),
        };
        out.extend_from_slice(&[v as f64, laplace_mass(v as f64, q.mu(), q.log_scale()), p, -p.log2()]);
    }
    Ok(out)
}

fn first_curve(csv: &str) -> Result<RdCurve, String> {
    read_curves(csv.as_bytes())
        .map_err(|e| e.to_string())?
        .into_iter()
        .next()
        .ok_or_else(|| "no curve in the CSV".to_string())
}

pub fn bd_compare(anchor_csv: &str, test_csv: &str) -> Result<Vec<f64>, String> {
    let (a, t) = (first_curve(anchor_csv)?, first_curve(test_csv)?);
    Ok(vec![bd_rate(&a, &t).map_err(|e| e.to_string())?, bd_quality(&a, &t).map_err(|e| e.to_string())?])
}
