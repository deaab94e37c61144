use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Per-scale MS-SSIM weights, finest scale first.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
/// Cap for dB values of identical images.
pub const DB_CAP: f64 = 100.0;
/// Contrast-structure terms are floored here before exponentiation.
const CS_FLOOR: f64 = 1e-6;

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        const AXES: [&str; 4] = ["batch", "channels", "height", "width"];
        let (a, b) = (x.shape(), y.shape());
        let i = (0..4).find(|&i| a[i] != b[i]).unwrap_or(0);
        return Err(Error::dim(AXES[i], a[i], b[i]));
    }
    Ok(())
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    Ok(s / x.numel() as f64)
}

/// `10 log10(1 / MSE)` for pixels in `[0, 1]`, capped at 100 dB.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        DB_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(DB_CAP)
    }
}

/// `-10 log10(1 - m)`, capped at 100 dB.
pub fn db_convert(m: f64) -> f64 {
    if m >= 1.0 {
        DB_CAP
    } else {
        (-10.0 * (1.0 - m).log10()).min(DB_CAP)
    }
}

/// Largest scale count (at most 5) that an `h x w` image supports.
pub fn max_scales(h: usize, w: usize) -> usize {
    (1..=5).rev().find(|&k| h.min(w) >= WINDOW << (k - 1)).unwrap_or(0)
}

fn weights(scales: usize) -> Vec<f64> {
    let w = &MSSSIM_WEIGHTS[..scales];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn check_scales(h: usize, w: usize, scales: usize) -> Result<()> {
    if !(1..=5).contains(&scales) {
        return Err(Error::Config(format!("MS-SSIM scales must be 1..=5, got {scales}")));
    }
    let need = WINDOW << (scales - 1);
    if h.min(w) < need {
        return Err(Error::Insufficient(format!(
            "{scales}-scale MS-SSIM needs images of at least {need} px, got {h}x{w}"
        )));
    }
    Ok(())
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut t = [0.0; WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-(d * d) / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Valid-mode separable Gaussian filter of one plane.
fn blur(p: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..WINDOW).map(|k| g[k] * p[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure of one plane pair.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> (f64, f64) {
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
    let (mx, oh, ow) = blur(a, h, w, g);
    let (my, _, _) = blur(b, h, w, g);
    let (sxx, _, _) = blur(&prod(&|x, _| x * x), h, w, g);
    let (syy, _, _) = blur(&prod(&|_, y| y * y), h, w, g);
    let (sxy, _, _) = blur(&prod(&|x, y| x * y), h, w, g);
    let n = (oh * ow) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..oh * ow {
        let (vx, vy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i]);
        let cov = sxy[i] - mx[i] * my[i];
        let c = (2.0 * cov + C2) / (vx + vy + C2);
        let l = (2.0 * mx[i] * my[i] + C1) / (mx[i] * mx[i] + my[i] * my[i] + C1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

fn pool(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM, averaged over batch items and channels.
pub fn msssim(x: &Tensor, y: &Tensor, scales: usize) -> Result<f64> {
    same_shape(x, y)?;
    let [n, c, h, w] = x.shape();
    check_scales(h, w, scales)?;
    let g = gaussian_window();
    let wts = weights(scales);
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let mut a: Vec<f64> = x.data()[p * plane..(p + 1) * plane].iter().map(|v| *v as f64).collect();
        let mut b: Vec<f64> = y.data()[p * plane..(p + 1) * plane].iter().map(|v| *v as f64).collect();
        let (mut hh, mut ww) = (h, w);
        let mut value = 1.0;
        for (k, wk) in wts.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&a, &b, hh, ww, &g);
            let term = if k + 1 == scales { ssim } else { cs };
            value *= term.max(CS_FLOOR).powf(*wk);
            if k + 1 < scales {
                let (pa, nh, nw) = pool(&a, hh, ww);
                let (pb, _, _) = pool(&b, hh, ww);
                a = pa;
                b = pb;
                hh = nh;
                ww = nw;
            }
        }
        total += value;
    }
    Ok(total / (n * c) as f64)
}

/// Differentiable MS-SSIM on the tape, averaged over batch and channels.
pub fn msssim_tape(tape: &mut Tape, x: Var, y: Var, scales: usize) -> Result<Var> {
    let s = tape.shape(x);
    if s != tape.shape(y) {
        return Err(Error::dim("height", s[2], tape.shape(y)[2]));
    }
    check_scales(s[2], s[3], scales)?;
    let wts = weights(scales);
    let (mut a, mut b) = (x, y);
    let mut value: Option<Var> = None;
    for (k, wk) in wts.iter().enumerate() {
        let mx = tape.gaussian_blur(a)?;
        let my = tape.gaussian_blur(b)?;
        let aa = tape.mul(a, a)?;
        let bb = tape.mul(b, b)?;
        let ab = tape.mul(a, b)?;
        let sxx = tape.gaussian_blur(aa)?;
        let syy = tape.gaussian_blur(bb)?;
        let sxy = tape.gaussian_blur(ab)?;
        let mxx = tape.mul(mx, mx)?;
        let myy = tape.mul(my, my)?;
        let mxy = tape.mul(mx, my)?;
        let vx = tape.sub(sxx, mxx)?;
        let vy = tape.sub(syy, myy)?;
        let cov = tape.sub(sxy, mxy)?;
        let cov2 = tape.scale(cov, 2.0);
        let num = tape.add_scalar(cov2, C2 as f32);
        let vsum = tape.add(vx, vy)?;
        let den = tape.add_scalar(vsum, C2 as f32);
        let mut map = tape.div(num, den)?;
        let last = k + 1 == scales;
        if last {
            let mxy2 = tape.scale(mxy, 2.0);
            let ln = tape.add_scalar(mxy2, C1 as f32);
            let msum = tape.add(mxx, myy)?;
            let ld = tape.add_scalar(msum, C1 as f32);
            let l = tape.div(ln, ld)?;
            map = tape.mul(l, map)?;
        }
        let m = tape.mean_spatial(map);
        let m = tape.clamp_min(m, CS_FLOOR as f32);
        let term = tape.pow(m, *wk as f32);
        value = Some(match value {
            Some(v) => tape.mul(v, term)?,
            None => term,
        });
        if !last {
            a = tape.avg_pool2(a);
            b = tape.avg_pool2(b);
        }
    }
    Ok(tape.mean(value.expect("at least one scale")))
}
