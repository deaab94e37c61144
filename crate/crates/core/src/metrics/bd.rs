//! Bjøntegaard deltas from cubic least-squares fits.

use nalgebra::{DMatrix, DVector};

use super::rd::RdCurve;
use crate::error::{Error, Result};

/// Cubic `p(x) = c0 + c1 x + c2 x^2 + c3 x^3` by least squares. The
/// abscissa is centred and scaled before the solve for conditioning.
#[derive(Clone, Debug)]
pub struct Cubic {
    coef: [f64; 4],
    shift: f64,
    scale: f64,
}

impl Cubic {
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::dim("points", x.len(), y.len()));
        }
        if x.len() < 4 {
            return Err(Error::Insufficient(format!("a cubic fit needs 4 points, got {}", x.len())));
        }
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 0.0 || !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Insufficient("abscissae must span a finite interval".into()));
        }
        let (shift, scale) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let a = DMatrix::from_fn(x.len(), 4, |r, c| ((x[r] - shift) / scale).powi(c as i32));
        let b = DVector::from_column_slice(y);
        let sol = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::Insufficient(format!("cubic fit failed: {e}")))?;
        Ok(Cubic { coef: [sol[0], sol[1], sol[2], sol[3]], shift, scale })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (x - self.shift) / self.scale;
        self.coef.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    /// Definite integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let anti = |x: f64| {
            let t = (x - self.shift) / self.scale;
            self.scale * self.coef.iter().enumerate().map(|(k, c)| c * t.powi(k as i32 + 1) / (k + 1) as f64).sum::<f64>()
        };
        anti(b) - anti(a)
    }
}

fn overlap(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let range = |v: &[f64]| {
        (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    let ((a0, a1), (b0, b1)) = (range(a), range(b));
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if hi <= lo {
        return Err(Error::Insufficient("the two curves do not overlap".into()));
    }
    Ok((lo, hi))
}

fn log_rates(c: &RdCurve) -> Result<Vec<f64>> {
    Ok(c.points.iter().map(|p| p.bpp.log10()).collect())
}

fn check_kinds(anchor: &RdCurve, test: &RdCurve) -> Result<()> {
    anchor.validate()?;
    test.validate()?;
    if anchor.kind() != test.kind() {
        return Err(Error::Config("curves measure different quality kinds".into()));
    }
    Ok(())
}

/// Average bitrate change of `test` against `anchor` at equal quality, in
/// percent. Negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    check_kinds(anchor, test)?;
    let (qa, qt) = (anchor.qualities(), test.qualities());
    let fa = Cubic::fit(&qa, &log_rates(anchor)?)?;
    let ft = Cubic::fit(&qt, &log_rates(test)?)?;
    let (lo, hi) = overlap(&qa, &qt)?;
    let delta = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(100.0 * (10f64.powf(delta) - 1.0))
}

/// Average quality change of `test` against `anchor` at equal rate.
pub fn bd_quality(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    check_kinds(anchor, test)?;
    let (ra, rt) = (log_rates(anchor)?, log_rates(test)?);
    let fa = Cubic::fit(&ra, &anchor.qualities())?;
    let ft = Cubic::fit(&rt, &test.qualities())?;
    let (lo, hi) = overlap(&ra, &rt)?;
    Ok((ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo))
}

/// BD-PSNR; the same computation as [`bd_quality`] on PSNR curves.
pub fn bd_psnr(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    bd_quality(anchor, test)
}
