//! im2col + GEMM convolution kernels shared by the tape ops.

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a strided convolution from an image `[c, h, w]` to an output
/// grid `[oh, ow]`. Transposed convolutions reuse it with the roles swapped.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    #[inline]
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn conv_output_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

pub fn conv_transpose_output_extent(
    input: usize,
    k: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> usize {
    ((input - 1) * stride + k + output_pad).saturating_sub(2 * pad)
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
/// falls inside `0..w`.
#[inline]
fn valid_cols(g: &Geom, kx: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = g.pad.saturating_sub(kx).div_ceil(s).min(g.ow);
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / s + 1).min(g.ow) } else { 0 };
    (lo, hi.max(lo))
}

pub(crate) fn im2col(x: &[f32], g: &Geom, col: &mut [f32]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if hi > lo {
                        let start = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *v = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column buffer back into an image (adjoint of `im2col`).
pub(crate) fn col2im(col: &[f32], g: &Geom, x: &mut [f32]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kx);
                if hi <= lo {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(line) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(line) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b (+ c if accumulate)` with `a` logically `[m, k]` and `b` `[k, n]`.
/// A transposed flag means the operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn check_conv(
    x: [usize; 4],
    w: [usize; 4],
    bias: Option<[usize; 4]>,
    out_channels_axis: usize,
    in_channels_axis: usize,
    stride: usize,
) -> Result<()> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    if w[2] != w[3] {
        return Err(Error::dim("kernel_width", w[2], w[3]));
    }
    if x[1] != w[in_channels_axis] {
        return Err(Error::dim("in_channels", w[in_channels_axis], x[1]));
    }
    if let Some(b) = bias {
        let numel: usize = b.iter().product();
        if numel != w[out_channels_axis] {
            return Err(Error::dim("bias", w[out_channels_axis], numel));
        }
    }
    Ok(())
}

pub(crate) fn conv2d_geom(x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Result<Geom> {
    let k = w[2];
    let oh = conv_output_extent(x[2], k, stride, pad).ok_or(Error::dim("height", k, x[2] + 2 * pad))?;
    let ow = conv_output_extent(x[3], k, stride, pad).ok_or(Error::dim("width", k, x[3] + 2 * pad))?;
    Ok(Geom {
        c: x[1],
        h: x[2],
        w: x[3],
        k,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Geometry for a transposed convolution: the *output* image is the `[c,h,w]`
/// side and the input grid is the `[oh, ow]` side.
pub(crate) fn conv_t_geom(
    x: [usize; 4],
    w: [usize; 4],
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<Geom> {
    let k = w[2];
    if output_pad >= stride.max(1) && output_pad > 0 {
        return Err(Error::Config(format!(
            "output padding {output_pad} must be smaller than stride {stride}"
        )));
    }
    let h = conv_transpose_output_extent(x[2], k, stride, pad, output_pad);
    let wd = conv_transpose_output_extent(x[3], k, stride, pad, output_pad);
    if h == 0 || wd == 0 {
        return Err(Error::dim("height", 1, 0));
    }
    Ok(Geom {
        c: w[1],
        h,
        w: wd,
        k,
        stride,
        pad,
        oh: x[2],
        ow: x[3],
    })
}

pub(crate) fn conv2d_raw(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &Geom) -> Tensor {
    let [b, _, _, _] = x.shape();
    let o = w.shape()[0];
    let mut out = Tensor::zeros([b, o, g.oh, g.ow]);
    let mut col = vec![0.0f32; g.rows() * g.cols()];
    let in_per = g.c * g.h * g.w;
    let out_per = o * g.cols();
    for bi in 0..b {
        im2col(&x.data()[bi * in_per..(bi + 1) * in_per], g, &mut col);
        let dst = &mut out.data_mut()[bi * out_per..(bi + 1) * out_per];
        gemm(o, g.rows(), g.cols(), w.data(), false, &col, false, dst, false);
        if let Some(bias) = bias {
            for (oc, chunk) in dst.chunks_mut(g.cols()).enumerate() {
                let bv = bias.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) fn conv_t_raw(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &Geom) -> Tensor {
    let [b, ci, _, _] = x.shape();
    let mut out = Tensor::zeros([b, g.c, g.h, g.w]);
    let mut col = vec![0.0f32; g.rows() * g.cols()];
    let in_per = ci * g.cols();
    let out_per = g.c * g.h * g.w;
    for bi in 0..b {
        gemm(
            g.rows(),
            ci,
            g.cols(),
            w.data(),
            true,
            &x.data()[bi * in_per..(bi + 1) * in_per],
            false,
            &mut col,
            false,
        );
        let dst = &mut out.data_mut()[bi * out_per..(bi + 1) * out_per];
        col2im(&col, g, dst);
        if let Some(bias) = bias {
            for (oc, chunk) in dst.chunks_mut(g.h * g.w).enumerate() {
                let bv = bias.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Standalone conv2d on values (no tape). Weight is `[out, in, k, k]`.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    check_conv(x.shape(), w.shape(), bias.map(|b| b.shape()), 0, 1, stride)?;
    let g = conv2d_geom(x.shape(), w.shape(), stride, pad)?;
    Ok(conv2d_raw(x, w, bias, &g))
}

/// Standalone transposed conv on values. Weight is `[in, out, k, k]`.
pub fn conv_transpose2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<Tensor> {
    check_conv(x.shape(), w.shape(), bias.map(|b| b.shape()), 1, 0, stride)?;
    let g = conv_t_geom(x.shape(), w.shape(), stride, pad, output_pad)?;
    Ok(conv_t_raw(x, w, bias, &g))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    fn random(shape: [usize; 4], rng: &mut Rng64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::full([1, 1, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = Rng64::new(3);
        let x = random([2, 3, 5, 7], &mut rng);
        let mut w = Tensor::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            let i = w.index(c, c, 0, 0);
            w.data_mut()[i] = 1.0;
        }
        assert_eq!(conv2d_forward(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn strided_conv_matches_naive_loops() {
        for seed in 0..5 {
            let mut rng = Rng64::new(seed);
            let x = random([2, 3, 8, 8], &mut rng);
            let w = random([4, 3, 5, 5], &mut rng);
            let b = random([1, 4, 1, 1], &mut rng);
            let fast = conv2d_forward(&x, &w, Some(&b), 2, 2).unwrap();
            let slow = reference::conv2d(&x, &w, Some(&b), 2, 2);
            assert!(max_abs_diff(&fast, &slow) < 1e-5);
        }
    }

    #[test]
    fn transpose_unit_stamp() {
        let x = Tensor::full([1, 1, 1, 1], 1.0);
        let w = Tensor::full([1, 1, 2, 2], 1.0);
        let y = conv_transpose2d_forward(&x, &w, None, 2, 0, 0).unwrap();
        assert_eq!(y, Tensor::full([1, 1, 2, 2], 1.0));
    }

    #[test]
    fn transpose_matches_naive_loops() {
        for seed in 0..5 {
            let mut rng = Rng64::new(100 + seed);
            let x = random([2, 4, 4, 5], &mut rng);
            let w = random([4, 3, 5, 5], &mut rng);
            let b = random([1, 3, 1, 1], &mut rng);
            let fast = conv_transpose2d_forward(&x, &w, Some(&b), 2, 2, 1).unwrap();
            let slow = reference::conv_transpose2d(&x, &w, Some(&b), 2, 2, 1);
            assert_eq!(fast.shape(), [2, 3, 8, 10]);
            assert!(max_abs_diff(&fast, &slow) < 1e-5);
        }
    }

    #[test]
    fn transpose_extent_formula() {
        assert_eq!(conv_transpose_output_extent(4, 5, 2, 2, 0), 7);
        assert_eq!(conv_transpose_output_extent(4, 5, 2, 2, 1), 8);
        assert_eq!(conv_transpose_output_extent(1, 2, 2, 0, 0), 2);
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        for seed in 0..20 {
            let mut rng = Rng64::new(500 + seed);
            let a = random([1, 3, 8, 8], &mut rng);
            let w = random([4, 3, 5, 5], &mut rng);
            let ca = conv2d_forward(&a, &w, None, 2, 2).unwrap();
            let bt = random(ca.shape(), &mut rng);
            let tb = conv_transpose2d_forward(&bt, &w, None, 2, 2, 1).unwrap();
            let lhs: f64 = ca.data().iter().zip(bt.data()).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
            let rhs: f64 = a.data().iter().zip(tb.data()).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
            assert!((lhs - rhs).abs() < 1e-4, "seed {seed}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");
    }
}
