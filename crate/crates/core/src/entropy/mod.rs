//! Discretized Laplacian entropy model, quantization and noise paths, and
//! the factorized hyper prior.

pub mod laplace;

use crate::error::{Error, Result};
use crate::layers::{CompressionModel, RateInput};
use crate::rng::Rng64;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub use laplace::{laplace_bits, laplace_cdf, laplace_mass, MIN_LOG_SCALE};

/// Round half away from zero. Zero always comes out as `+0.0`, the value
/// the decoder rebuilds from an integer symbol.
pub fn quantize(y: &Tensor) -> Tensor {
    y.map(|v| v.round() + 0.0)
}

/// i.i.d. samples from `U[-1/2, 1/2)`.
pub fn uniform_noise(shape: [usize; 4], rng: &mut Rng64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-0.5, 0.5) as f32).collect()).expect("shape product")
}

pub fn add_uniform_noise(y: &Tensor, rng: &mut Rng64) -> Tensor {
    let noise = uniform_noise(y.shape(), rng);
    let data = y.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Per-element Laplacian location and log-scale.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyParams {
    pub mu: Tensor,
    pub log_scale: Tensor,
}

impl EntropyParams {
    pub fn new(mu: Tensor, log_scale: Tensor) -> Result<Self> {
        if mu.shape() != log_scale.shape() {
            return Err(Error::dim("log_scale", mu.numel(), log_scale.numel()));
        }
        Ok(EntropyParams { mu, log_scale })
    }
}

/// `sum -log2 P(v)` over all elements, in f64.
pub fn rate_bits(values: &Tensor, params: &EntropyParams) -> Result<f64> {
    if values.shape() != params.mu.shape() {
        let (a, b) = (values.shape(), params.mu.shape());
        let axis = (0..4).find(|&i| a[i] != b[i]).unwrap_or(0);
        const AXES: [&str; 4] = ["batch", "channels", "height", "width"];
        return Err(Error::dim(AXES[axis], b[axis], a[axis]));
    }
    Ok(values
        .data()
        .iter()
        .zip(params.mu.data())
        .zip(params.log_scale.data())
        .map(|((v, m), s)| laplace_bits(*v as f64, *m as f64, *s as f64))
        .sum())
}

/// Channel-wise trainable Laplacian for the hyper latent.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    /// `[1, C, 1, 1]`
    pub mu: ParamId,
    /// `[1, C, 1, 1]`, the log of the Laplace scale.
    pub log_scale: ParamId,
    pub channels: usize,
}

impl FactorizedPrior {
    pub fn new(store: &mut ParamStore, channels: usize) -> Result<Self> {
        let mu = store.add("hyper_prior/mu", Tensor::zeros([1, channels, 1, 1]))?;
        let log_scale = store.add("hyper_prior/sigma", Tensor::zeros([1, channels, 1, 1]))?;
        Ok(FactorizedPrior { mu, log_scale, channels })
    }

    /// Parameters broadcast to a `[1, C, h, w]` hyper latent.
    pub fn params_for(&self, store: &ParamStore, h: usize, w: usize) -> EntropyParams {
        let spread = |id: ParamId| {
            let v = store.get(id).value.data();
            let data = (0..self.channels).flat_map(|c| std::iter::repeat_n(v[c], h * w)).collect();
            Tensor::from_vec([1, self.channels, h, w], data).expect("shape")
        };
        EntropyParams { mu: spread(self.mu), log_scale: spread(self.log_scale) }
    }
}

/// Source of the additive training noise. `Zero` and `Rounding` are test
/// hooks; `Rounding` adds `round(v) - v`, turning the noisy paths into the
/// quantized ones.
pub enum Noise<'a> {
    Uniform(&'a mut Rng64),
    Zero,
    Rounding,
}

impl Noise<'_> {
    fn sample(&mut self, v: &Tensor) -> Tensor {
        match self {
            Noise::Uniform(rng) => uniform_noise(v.shape(), rng),
            Noise::Zero => Tensor::zeros(v.shape()),
            Noise::Rounding => v.map(|x| x.round() - x),
        }
    }
}

/// Tape handles for one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainingPaths {
    pub y: Var,
    pub y_hat: Var,
    pub y_tilde: Var,
    pub z: Var,
    pub z_tilde: Var,
    pub psi: Var,
    pub mu: Var,
    pub sigma: Var,
    pub x_hat: Var,
    pub x_ddot: Option<Var>,
    /// Bits of `ỹ` under `(μ, σ)`.
    pub r_y: Var,
    /// Bits of `z̃` under the factorized prior.
    pub r_z: Var,
}

/// Training forward pass. The quantized latent feeds the decoder, the hyper
/// encoder and the context model; the noisy latent is used only for its
/// rate; the noisy hyper latent feeds both the hyper decoder and its rate.
pub fn training_paths(
    model: &CompressionModel,
    tape: &mut Tape,
    x: Var,
    rate: &RateInput,
    mut noise: Noise<'_>,
) -> Result<TrainingPaths> {
    let y = model.forward_transform(tape, x, rate)?;
    let ys = tape.shape(y);
    let y_hat = tape.round_ste(y);
    let ny = noise.sample(tape.value(y));
    let y_tilde = tape.add_const(y, &ny)?;
    let x_hat = model.inverse_transform(tape, y_hat, rate)?;
    let z = model.hyper_encode(tape, y_hat, rate)?;
    let nz = noise.sample(tape.value(z));
    let z_tilde = tape.add_const(z, &nz)?;
    let psi = model.hyper_decode(tape, z_tilde, rate, (ys[2], ys[3]))?;
    let ctx = model.context(tape, y_hat)?;
    let (mu, sigma) = model.entropy_params(tape, psi, ctx)?;
    let r_y = tape.laplace_bits(y_tilde, mu, sigma)?;
    let pm = tape.param(&model.store, model.hyper_prior.mu);
    let ps = tape.param(&model.store, model.hyper_prior.log_scale);
    let r_z = tape.laplace_bits(z_tilde, pm, ps)?;
    let x_ddot = match model.unet {
        Some(_) => Some(model.unet_post(tape, x_hat)?),
        None => None,
    };
    Ok(TrainingPaths { y, y_hat, y_tilde, z, z_tilde, psi, mu, sigma, x_hat, x_ddot, r_y, r_z })
}

/// Values of the inference path, where every noisy quantity is replaced by
/// its quantized counterpart.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub y: Tensor,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub psi: Tensor,
    pub params: EntropyParams,
    /// Decoder output, unclamped.
    pub x_hat: Tensor,
    pub x_ddot: Option<Tensor>,
    pub ry_bits: f64,
    pub rz_bits: f64,
}

pub fn analyze(model: &CompressionModel, x: &Tensor, rate: &RateInput) -> Result<Analysis> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = model.forward_transform(&mut tape, xv, rate)?;
    let y = tape.value(yv).clone();
    let y_hat = quantize(&y);
    let yh = tape.constant(y_hat.clone());
    let x_hat_v = model.inverse_transform(&mut tape, yh, rate)?;
    let zv = model.hyper_encode(&mut tape, yh, rate)?;
    let z_hat = quantize(tape.value(zv));
    let zh = tape.constant(z_hat.clone());
    let ys = y.shape();
    let psi_v = model.hyper_decode(&mut tape, zh, rate, (ys[2], ys[3]))?;
    let ctx = model.context(&mut tape, yh)?;
    let (mu, sigma) = model.entropy_params(&mut tape, psi_v, ctx)?;
    let params = EntropyParams::new(tape.value(mu).clone(), tape.value(sigma).clone())?;
    let ry_bits = rate_bits(&y_hat, &params)?;
    let zs = z_hat.shape();
    let mut rz_bits = 0.0;
    for b in 0..zs[0] {
        rz_bits += rate_bits(&z_hat.batch_item(b), &model.hyper_prior.params_for(&model.store, zs[2], zs[3]))?;
    }
    let x_ddot = match model.unet {
        Some(_) => {
            let v = model.unet_post(&mut tape, x_hat_v)?;
            Some(tape.value(v).clone())
        }
        None => None,
    };
    Ok(Analysis {
        y,
        y_hat,
        z_hat,
        psi: tape.value(psi_v).clone(),
        params,
        x_hat: tape.value(x_hat_v).clone(),
        x_ddot,
        ry_bits,
        rz_bits,
    })
}
