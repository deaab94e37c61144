//! Entropy coding of latents and the `.ivr` container.
//!
//! The hyper latent is coded first under the factorized prior. The latent
//! follows in raster order, all channels of a position before the next
//! position, each under a table built from `(μ, σ)` snapped to a 1/256 grid.
//! With a context model the decoder recomputes `(μ, σ)` one position at a
//! time from the latents decoded so far; without one, all parameters come
//! from the hyper decoder in a single pass.

pub mod bitstream;
pub mod cdf;
pub mod range;

use std::collections::HashMap;

pub use bitstream::{Bitstream, Header, HEADER_LEN};
pub use cdf::{build_cdf, CdfTable, QuantParams, PARAM_STEPS, PRECISION_BITS, SUPPORT, TOTAL};
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder};

use crate::checkpoint::{model_hash, ModelHash};
use crate::entropy::laplace::laplace_bits;
use crate::entropy::quantize;
use crate::error::{Error, Result};
use crate::interpca::{Alpha, RateControl};
use crate::layers::{CompressionModel, RateInput, Variant};
use crate::tensor::{Tape, Tensor};

/// Padding granularity of the analysis transform.
pub const PAD_MULTIPLE: usize = 16;

/// Encoder output with the encoder-side values kept for inspection.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bitstream: Bitstream,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    /// Reconstruction cropped to the original extent, unclamped.
    pub x_hat: Tensor,
    pub x_ddot: Option<Tensor>,
    /// Model rate of `ŷ` under the unrounded parameters, in bits.
    pub ry_bits: f64,
    /// Model rate of `ẑ`, in bits.
    pub rz_bits: f64,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub x_hat: Tensor,
    pub x_ddot: Option<Tensor>,
}

impl Decoded {
    /// The final reconstruction: the Unet output when present.
    pub fn output(&self) -> &Tensor {
        self.x_ddot.as_ref().unwrap_or(&self.x_hat)
    }
}

/// Table cache keyed by the snapped parameters.
#[derive(Default)]
struct Tables(HashMap<QuantParams, CdfTable>);

impl Tables {
    fn get(&mut self, mu: f32, log_scale: f32) -> &CdfTable {
        let q = QuantParams::new(mu, log_scale);
        self.0.entry(q).or_insert_with(|| build_cdf(q, SUPPORT))
    }
}

/// Replicate-padding needed to reach the next multiple of [`PAD_MULTIPLE`].
pub fn pad_amount(extent: usize) -> usize {
    (PAD_MULTIPLE - extent % PAD_MULTIPLE) % PAD_MULTIPLE
}

fn to_symbol(v: f32) -> i32 {
    v as i32
}

/// Hyper-prior tables, one per channel.
fn hyper_tables(model: &CompressionModel) -> Vec<CdfTable> {
    let p = &model.hyper_prior;
    let mu = model.store.get(p.mu).value.data();
    let s = model.store.get(p.log_scale).value.data();
    (0..p.channels).map(|c| build_cdf(QuantParams::new(mu[c], s[c]), SUPPORT)).collect()
}

fn hyper_decode(model: &CompressionModel, z_hat: &Tensor, rate: &RateInput, latent_hw: (usize, usize)) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = tape.constant(z_hat.clone());
    let psi = model.hyper_decode(&mut tape, z, rate, latent_hw)?;
    Ok(tape.value(psi).clone())
}

/// All `(μ, σ)` at once for the variant without a context model.
fn parallel_params(model: &CompressionModel, psi: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = tape.constant(psi.clone());
    let (mu, sigma) = model.entropy_params(&mut tape, p, None)?;
    Ok((tape.value(mu).clone(), tape.value(sigma).clone()))
}

fn reconstruct(model: &CompressionModel, y_hat: &Tensor, rate: &RateInput, h: usize, w: usize) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let y = tape.constant(y_hat.clone());
    let x_hat = model.inverse_transform(&mut tape, y, rate)?;
    let x_ddot = match model.unet {
        Some(_) => Some(model.unet_post(&mut tape, x_hat)?),
        None => None,
    };
    Ok((tape.value(x_hat).crop(h, w), x_ddot.map(|v| tape.value(v).crop(h, w))))
}

/// Visits latent positions in coding order, supplying `(μ, σ)` for every
/// channel at each one. `y_hat` is read for context before `visit` runs at
/// a position and may be filled in by it.
fn for_each_position(
    model: &CompressionModel,
    y_hat: &mut Tensor,
    psi: &Tensor,
    mut visit: impl FnMut(&mut Tensor, usize, usize, &[f32], &[f32]) -> Result<()>,
) -> Result<()> {
    let [_, l, h, w] = y_hat.shape();
    if model.context_model.is_some() {
        for y in 0..h {
            for x in 0..w {
                let (mu, sigma) = model.entropy_params_at(y_hat, psi, y, x)?;
                visit(y_hat, y, x, &mu, &sigma)?;
            }
        }
    } else {
        let (mu, sigma) = parallel_params(model, psi)?;
        let mut m = vec![0.0f32; l];
        let mut s = vec![0.0f32; l];
        for y in 0..h {
            for x in 0..w {
                for c in 0..l {
                    m[c] = mu.at(0, c, y, x);
                    s[c] = sigma.at(0, c, y, x);
                }
                visit(y_hat, y, x, &m, &s)?;
            }
        }
    }
    Ok(())
}

pub fn encode_image(model: &CompressionModel, x: &Tensor, rate: &RateControl) -> Result<Encoded> {
    encode_image_with_hash(model, model_hash(model), x, rate)
}

/// As [`encode_image`] with a precomputed model hash.
pub fn encode_image_with_hash(model: &CompressionModel, hash: ModelHash, x: &Tensor, rate: &RateControl) -> Result<Encoded> {
    let [b, c, h, w] = x.shape();
    if b != 1 || c != 3 {
        return Err(Error::Contract(format!("expected one RGB image, got shape {:?}", x.shape())));
    }
    if !x.is_finite() {
        return Err(Error::Contract("image contains non-finite values".into()));
    }
    if h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Contract(format!("image extent {h}x{w} outside 1..=65535")));
    }
    if rate.j > u8::MAX as usize {
        return Err(Error::Contract(format!("j = {} does not fit the header", rate.j)));
    }
    let ri = model.rate_input(rate)?;
    let (ph, pw) = (pad_amount(h), pad_amount(w));
    let xp = x.pad_replicate(ph, pw);

    let mut tape = Tape::new();
    let xv = tape.constant(xp);
    let yv = model.forward_transform(&mut tape, xv, &ri)?;
    let mut y_hat = quantize(tape.value(yv));
    let yh = tape.constant(y_hat.clone());
    let zv = model.hyper_encode(&mut tape, yh, &ri)?;
    let z_hat = quantize(tape.value(zv));
    let [_, l, lh, lw] = y_hat.shape();
    let psi = hyper_decode(model, &z_hat, &ri, (lh, lw))?;

    let mut enc = RangeEncoder::new();
    let htables = hyper_tables(model);
    let zs = z_hat.shape();
    let mut rz_bits = 0.0;
    let (pm, ps) = (
        model.store.get(model.hyper_prior.mu).value.data(),
        model.store.get(model.hyper_prior.log_scale).value.data(),
    );
    for y in 0..zs[2] {
        for xx in 0..zs[3] {
            for (ch, table) in htables.iter().enumerate() {
                let v = z_hat.at(0, ch, y, xx);
                enc.encode_symbol(table, to_symbol(v))?;
                rz_bits += laplace_bits(v as f64, pm[ch] as f64, ps[ch] as f64);
            }
        }
    }
    let hyper_segment = enc.finish();

    let mut enc = RangeEncoder::new();
    let mut tables = Tables::default();
    let mut ry_bits = 0.0;
    for_each_position(model, &mut y_hat, &psi, |yh, y, xx, mu, sigma| {
        for ch in 0..l {
            let v = yh.at(0, ch, y, xx);
            enc.encode_symbol(tables.get(mu[ch], sigma[ch]), to_symbol(v))?;
            ry_bits += laplace_bits(v as f64, mu[ch] as f64, sigma[ch] as f64);
        }
        Ok(())
    })?;
    let latent_segment = enc.finish();
    debug_assert_eq!((lh, lw), ((h + ph) / PAD_MULTIPLE, (w + pw) / PAD_MULTIPLE));

    let (x_hat, x_ddot) = reconstruct(model, &y_hat, &ri, h, w)?;
    let header = Header {
        model_hash: hash,
        variant: model.variant().id(),
        j: rate.j as u8,
        alpha_num: rate.alpha.num(),
        alpha_den: rate.alpha.den(),
        height: h as u16,
        width: w as u16,
        pad_h: ph as u8,
        pad_w: pw as u8,
    };
    Ok(Encoded {
        bitstream: Bitstream { header, hyper_segment, latent_segment },
        y_hat,
        z_hat,
        x_hat,
        x_ddot,
        ry_bits,
        rz_bits,
    })
}

/// The rate a header names, checked against the model.
pub fn header_rate(model: &CompressionModel, header: &Header) -> Result<RateControl> {
    let alpha = Alpha::new(header.alpha_num, header.alpha_den)
        .map_err(|e| Error::Decode { offset: 16, msg: e.to_string() })?;
    RateControl::new(&model.config.lambda_table, header.j as usize, alpha)
        .map_err(|e| Error::Decode { offset: 15, msg: e.to_string() })
}

pub fn decode_image(model: &CompressionModel, bs: &Bitstream) -> Result<Decoded> {
    decode_image_with_hash(model, model_hash(model), bs)
}

pub fn decode_image_with_hash(model: &CompressionModel, hash: ModelHash, bs: &Bitstream) -> Result<Decoded> {
    let hd = &bs.header;
    if hd.model_hash != hash {
        return Err(Error::Model("bitstream was produced by a different model (hash mismatch)".into()));
    }
    let variant = Variant::from_id(hd.variant).map_err(|e| Error::Decode { offset: 14, msg: e.to_string() })?;
    if variant != model.variant() {
        return Err(Error::Model(format!("bitstream variant {variant}, model variant {}", model.variant())));
    }
    let rate = header_rate(model, hd)?;
    let ri = model.rate_input(&rate)?;
    let (h, w) = (hd.height as usize, hd.width as usize);
    let (ph, pw) = (hd.pad_h as usize, hd.pad_w as usize);
    if h == 0 || w == 0 || (h + ph) % PAD_MULTIPLE != 0 || (w + pw) % PAD_MULTIPLE != 0 || ph >= PAD_MULTIPLE || pw >= PAD_MULTIPLE {
        return Err(Error::Decode { offset: 20, msg: "inconsistent image extent and padding".into() });
    }
    let (lh, lw) = ((h + ph) / PAD_MULTIPLE, (w + pw) / PAD_MULTIPLE);
    let l = model.latent_channels();
    let (zh, zw) = CompressionModel::hyper_extent((lh, lw));
    let zc = model.config.hyper_latent_channels;

    let mut dec = RangeDecoder::new(&bs.hyper_segment, HEADER_LEN)?;
    let htables = hyper_tables(model);
    let mut z_hat = Tensor::zeros([1, zc, zh, zw]);
    for y in 0..zh {
        for x in 0..zw {
            for (ch, table) in htables.iter().enumerate() {
                let i = z_hat.index(0, ch, y, x);
                z_hat.data_mut()[i] = dec.decode_symbol(table)? as f32;
            }
        }
    }
    dec.finish()?;
    let psi = hyper_decode(model, &z_hat, &ri, (lh, lw))?;

    let mut dec = RangeDecoder::new(&bs.latent_segment, HEADER_LEN + bs.hyper_segment.len())?;
    let mut tables = Tables::default();
    let mut y_hat = Tensor::zeros([1, l, lh, lw]);
    for_each_position(model, &mut y_hat, &psi, |yh, y, x, mu, sigma| {
        for ch in 0..l {
            let v = dec.decode_symbol(tables.get(mu[ch], sigma[ch]))?;
            let i = yh.index(0, ch, y, x);
            yh.data_mut()[i] = v as f32;
        }
        Ok(())
    })?;
    dec.finish()?;

    let (x_hat, x_ddot) = reconstruct(model, &y_hat, &ri, h, w)?;
    Ok(Decoded { y_hat, z_hat, x_hat, x_ddot })
}
