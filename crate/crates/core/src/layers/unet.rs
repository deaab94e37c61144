use super::model::{ConvLayer, ConvSpec, LEAKY_SLOPE};
use crate::error::Result;
use crate::rng::Rng64;
use crate::tensor::{ParamStore, Tape, Var};

/// Unet width for a given transform width.
pub fn unet_width(base_channels: usize) -> usize {
    (base_channels / 4).max(4)
}

/// Four-level residual Unet shared by all rates. The output layer starts at
/// zero so the network starts as the identity.
#[derive(Clone, Debug)]
pub struct Unet {
    pub stem: ConvLayer,
    /// Stride-2 convolutions, finest level first.
    pub down: Vec<ConvLayer>,
    /// Upsampling layers, finest level first.
    pub up: Vec<ConvLayer>,
    /// 3x3 convolutions merging each upsampled map with its skip.
    pub fuse: Vec<ConvLayer>,
    pub out: ConvLayer,
}

impl Unet {
    pub const LEVELS: usize = 4;

    pub fn new(store: &mut ParamStore, rng: &mut Rng64, width: usize) -> Result<Self> {
        let w = [width, 2 * width, 4 * width, 8 * width, 8 * width];
        let stem = ConvLayer::new(store, rng, "unet/stem", ConvSpec::conv(3, w[0], 3, 1), false)?;
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        for i in 0..Self::LEVELS {
            down.push(ConvLayer::new(store, rng, &format!("unet/down{i}"), ConvSpec::conv(w[i], w[i + 1], 3, 2), false)?);
        }
        for i in 0..Self::LEVELS {
            up.push(ConvLayer::new(store, rng, &format!("unet/up{i}"), ConvSpec::up(w[i + 1], w[i], 3, 2), false)?);
            fuse.push(ConvLayer::new(store, rng, &format!("unet/fuse{i}"), ConvSpec::conv(2 * w[i], w[i], 3, 1), false)?);
        }
        let out = ConvLayer::new(store, rng, "unet/out", ConvSpec::conv(w[0], 3, 3, 1), true)?;
        Ok(Unet { stem, down, up, fuse, out })
    }

    /// `ẍ = x̂ + U(x̂)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_hat: Var) -> Result<Var> {
        let s = self.stem.forward(tape, store, x_hat)?;
        let mut h = tape.leaky_relu(s, LEAKY_SLOPE);
        let mut skips = Vec::with_capacity(Self::LEVELS);
        for layer in &self.down {
            skips.push(h);
            let d = layer.forward(tape, store, h)?;
            h = tape.leaky_relu(d, LEAKY_SLOPE);
        }
        for i in (0..Self::LEVELS).rev() {
            let u = self.up[i].forward(tape, store, h)?;
            let u = tape.leaky_relu(u, LEAKY_SLOPE);
            let cat = tape.concat_channels(&[u, skips[i]])?;
            let f = self.fuse[i].forward(tape, store, cat)?;
            h = tape.leaky_relu(f, LEAKY_SLOPE);
        }
        let r = self.out.forward(tape, store, h)?;
        tape.add(x_hat, r)
    }
}
