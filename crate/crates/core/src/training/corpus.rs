use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::Tensor;

/// Training images, each `[1, 3, H, W]` with pixels in `[0, 1]`.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    images: Vec<Tensor>,
}

impl Corpus {
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        for (i, im) in images.iter().enumerate() {
            let s = im.shape();
            if s[0] != 1 || s[1] != 3 {
                return Err(Error::Contract(format!("image {i} has shape {s:?}, expected [1, 3, H, W]")));
            }
        }
        Ok(Corpus { images })
    }

    /// `n` procedural dead-leaves images of `h x w`.
    pub fn dead_leaves(n: usize, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = Rng64::new(seed);
        Corpus { images: (0..n).map(|_| dead_leaves(h, w, &mut rng)).collect() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// `[batch, 3, patch, patch]` random crops from images large enough to
    /// hold a patch.
    pub fn sample_batch(&self, batch: usize, patch: usize, rng: &mut Rng64) -> Result<Tensor> {
        if self.images.is_empty() {
            return Err(Error::Insufficient("the corpus is empty".into()));
        }
        let fits: Vec<&Tensor> = self
            .images
            .iter()
            .filter(|im| im.shape()[2] >= patch && im.shape()[3] >= patch)
            .collect();
        if fits.is_empty() {
            return Err(Error::Insufficient(format!("no corpus image holds a {patch}x{patch} patch")));
        }
        let mut items = Vec::with_capacity(batch);
        for _ in 0..batch {
            let im = fits[rng.below(fits.len())];
            let [_, _, h, w] = im.shape();
            let (y0, x0) = (rng.below(h - patch + 1), rng.below(w - patch + 1));
            items.push(crop_at(im, y0, x0, patch, patch));
        }
        Tensor::stack(&items)
    }
}

/// The `[h, w]` window of a single image starting at `(y0, x0)`.
pub fn crop_at(im: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let [_, c, ih, iw] = im.shape();
    assert!(y0 + h <= ih && x0 + w <= iw, "crop window outside the image");
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let start = im.index(0, ch, y0 + y, x0);
            out.extend_from_slice(&im.data()[start..start + w]);
        }
    }
    Tensor::from_vec([1, c, h, w], out).expect("crop shape")
}

/// Occluding disks with power-law radii and a soft shading ramp each,
/// giving the scale-invariant edge statistics of natural images. Colors
/// share a luminance with small chroma offsets, and a binomial blur stands
/// in for camera optics.
pub fn dead_leaves(h: usize, w: usize, rng: &mut Rng64) -> Tensor {
    const CHROMA: f64 = 0.1;
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    let tint = |rng: &mut Rng64, lo: f64, hi: f64| -> [f64; 3] {
        let luma = rng.uniform(lo, hi);
        [0, 1, 2].map(|_| luma + rng.uniform(-CHROMA, CHROMA))
    };
    let bg = tint(rng, 0.1, 0.9);
    for (c, v) in bg.iter().enumerate() {
        data[c * plane..(c + 1) * plane].fill(v.clamp(0.0, 1.0) as f32);
    }
    let rmin = 4.0f64;
    let rmax = (h.min(w) as f64 / 1.5).max(rmin + 1.0);
    let (a, b) = (rmin.powi(-2), rmax.powi(-2));
    let count = (plane / 100).max(1);
    for _ in 0..count {
        // inverse CDF of a density proportional to r^-3 on [rmin, rmax]
        let r = (a - rng.uniform(0.0, 1.0) * (a - b)).powf(-0.5);
        let (cy, cx) = (rng.uniform(-r, h as f64 + r), rng.uniform(-r, w as f64 + r));
        let color = tint(rng, 0.05, 0.95);
        let (gy, gx) = (rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15));
        let y_lo = (cy - r).floor().max(0.0) as usize;
        let y_hi = ((cy + r).ceil().max(0.0) as usize).min(h);
        let x_lo = (cx - r).floor().max(0.0) as usize;
        let x_hi = ((cx + r).ceil().max(0.0) as usize).min(w);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= r * r {
                    let shade = (gy * dy + gx * dx) / r;
                    for (c, base) in color.iter().enumerate() {
                        data[c * plane + y * w + x] = (base + shade).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
    for ch in data.chunks_exact_mut(plane) {
        binomial_blur(ch, h, w);
    }
    Tensor::from_vec([1, 3, h, w], data).expect("image shape")
}

/// Separable `[1, 2, 1] / 4` filter with replicated edges, in place.
fn binomial_blur(p: &mut [f32], h: usize, w: usize) {
    let tap = |a: f32, b: f32, c: f32| 0.25 * a + 0.5 * b + 0.25 * c;
    let mut row = vec![0.0f32; w];
    for y in 0..h {
        let line = &mut p[y * w..(y + 1) * w];
        for x in 0..w {
            row[x] = tap(line[x.saturating_sub(1)], line[x], line[(x + 1).min(w - 1)]);
        }
        line.copy_from_slice(&row);
    }
    let src = p.to_vec();
    for y in 0..h {
        let (up, down) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            p[y * w + x] = tap(src[up * w + x], src[y * w + x], src[down * w + x]);
        }
    }
}
