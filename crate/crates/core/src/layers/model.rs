use super::config::{ModelConfig, Variant};
use super::unet::Unet;
use crate::entropy::FactorizedPrior;
use crate::error::{Error, Result};
use crate::interpca::{interp_onehot, onehot_row, ConditionalConvGate, InterpCaGate, RateControl};
use crate::rng::Rng64;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Negative slope of every hidden activation.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Total downsampling factor of the analysis transform.
pub const LATENT_STRIDE: usize = 16;

/// Name prefix shared by every rate-gate parameter.
pub const GATE_PREFIX: &str = "interpca/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Conv,
    Transpose,
}

/// A square convolution with bias. Transposed layers store weights as
/// `[in, out, k, k]`, plain ones as `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kind: ConvKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

#[derive(Clone, Copy)]
pub(crate) struct ConvSpec {
    pub kind: ConvKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn conv(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        ConvSpec { kind: ConvKind::Conv, in_ch, out_ch, k, stride }
    }

    pub fn up(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        ConvSpec { kind: ConvKind::Transpose, in_ch, out_ch, k, stride }
    }
}

/// He-uniform bound for a layer followed by a leaky ReLU.
fn he_bound(fan_in: f64) -> f64 {
    let gain = 2.0 / (1.0 + (LEAKY_SLOPE as f64).powi(2));
    (3.0 * gain / fan_in).sqrt()
}

fn uniform_tensor(shape: [usize; 4], bound: f64, rng: &mut Rng64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

impl ConvLayer {
    /// `zero` initializes the weight to zero instead of He-uniform.
    pub(crate) fn new(store: &mut ParamStore, rng: &mut Rng64, name: &str, spec: ConvSpec, zero: bool) -> Result<Self> {
        let ConvSpec { kind, in_ch, out_ch, k, stride } = spec;
        let (shape, fan_in) = match kind {
            ConvKind::Conv => ([out_ch, in_ch, k, k], (in_ch * k * k) as f64),
            ConvKind::Transpose => ([in_ch, out_ch, k, k], (in_ch * k * k) as f64 / (stride * stride) as f64),
        };
        let w = if zero { Tensor::zeros(shape) } else { uniform_tensor(shape, he_bound(fan_in), rng) };
        let weight = store.add(format!("{name}/weight"), w)?;
        let bias = store.add(format!("{name}/bias"), Tensor::zeros([1, out_ch, 1, 1]))?;
        Ok(ConvLayer {
            weight,
            bias,
            kind,
            in_ch,
            out_ch,
            k,
            stride,
            pad: k / 2,
            output_pad: if kind == ConvKind::Transpose { stride - 1 } else { 0 },
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        match self.kind {
            ConvKind::Conv => tape.conv2d(x, w, Some(b), self.stride, self.pad),
            ConvKind::Transpose => tape.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.output_pad),
        }
    }
}

/// Strictly causal raster mask for a `[out, in, k, k]` kernel: taps before
/// the center are 1, the center and everything after it are 0.
pub fn causal_mask(shape: [usize; 4]) -> Tensor {
    let [o, i, kh, kw] = shape;
    let center = (kh / 2) * kw + kw / 2;
    let mut t = Tensor::zeros(shape);
    for (idx, v) in t.data_mut().iter_mut().enumerate() {
        if idx % (kh * kw) < center {
            *v = 1.0;
        }
    }
    debug_assert_eq!(t.numel(), o * i * kh * kw);
    t
}

/// Linear 5x5 masked convolution over the quantized latent.
#[derive(Clone, Debug)]
pub struct MaskedConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    mask: Tensor,
}

impl MaskedConv {
    pub const KERNEL: usize = 5;

    pub fn new(store: &mut ParamStore, rng: &mut Rng64, name: &str, in_ch: usize, out_ch: usize, k: usize) -> Result<Self> {
        if k != Self::KERNEL {
            return Err(Error::Config(format!("masked convolution needs a 5x5 kernel, got {k}x{k}")));
        }
        let shape = [out_ch, in_ch, k, k];
        let mask = causal_mask(shape);
        let live = (k * k / 2) as f64;
        let mut w = uniform_tensor(shape, (3.0 / (in_ch as f64 * live)).sqrt(), rng);
        for (v, m) in w.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        let weight = store.add(format!("{name}/weight"), w)?;
        let bias = store.add(format!("{name}/bias"), Tensor::zeros([1, out_ch, 1, 1]))?;
        Ok(MaskedConv { weight, bias, in_ch, out_ch, mask })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let mw = tape.mul_const(w, self.mask.clone())?;
        tape.conv2d(x, mw, Some(b), 1, Self::KERNEL / 2)
    }
}

#[derive(Clone, Debug)]
pub enum Gate {
    Interp(InterpCaGate),
    Conditional(ConditionalConvGate),
}

impl Gate {
    pub fn ch(&self) -> usize {
        match self {
            Gate::Interp(g) => g.ch,
            Gate::Conditional(g) => g.ch,
        }
    }
}

/// The rate as the gates consume it: an interpolated one-hot vector, the
/// selected row for one-hot-only variants, or no gating at all.
#[derive(Clone, Debug, PartialEq)]
pub struct RateInput {
    onehot: Vec<f32>,
    row: Option<usize>,
    identity: bool,
}

impl RateInput {
    /// Bypasses every gate (single-rate training).
    pub fn identity() -> Self {
        RateInput { onehot: Vec::new(), row: None, identity: true }
    }

    pub fn onehot(&self) -> &[f32] {
        &self.onehot
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }
}

/// A chain of convolutions with one optional gate per layer and a leaky
/// ReLU after every layer but the last.
#[derive(Clone, Debug)]
pub struct GatedNet {
    pub name: &'static str,
    pub layers: Vec<ConvLayer>,
    /// Empty, or one gate per layer.
    pub gates: Vec<Gate>,
}

impl GatedNet {
    fn build(
        store: &mut ParamStore,
        rng: &mut Rng64,
        name: &'static str,
        specs: &[ConvSpec],
        gate: Option<(Variant, usize)>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut gates = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            layers.push(ConvLayer::new(store, rng, &format!("{name}/conv{i}"), *spec, false)?);
            if let Some((variant, n)) = gate {
                let prefix = format!("{GATE_PREFIX}{name}/conv{i}");
                gates.push(match variant {
                    Variant::ConditionalConv => Gate::Conditional(ConditionalConvGate::new(store, &prefix, spec.out_ch, n)?),
                    _ => Gate::Interp(InterpCaGate::new(store, &prefix, spec.out_ch, n)?),
                });
            }
        }
        Ok(GatedNet { name, layers, gates })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, rate: &RateInput) -> Result<Var> {
        self.forward_with(tape, store, x, rate, |_, _, h| Ok(h))
    }

    /// Forward with a hook applied to each layer's gated pre-activation
    /// output (used to crop upsampled maps to a target extent).
    pub(crate) fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        rate: &RateInput,
        mut hook: impl FnMut(&mut Tape, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        let onehot = if self.gates.is_empty() || rate.identity || rate.onehot.is_empty() {
            None
        } else {
            Some(tape.constant(Tensor::vector(&rate.onehot)))
        };
        let n = rate.onehot.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if let (Some(gate), false) = (self.gates.get(i), rate.identity) {
                h = match gate {
                    Gate::Interp(g) => g.forward(tape, store, h, onehot.expect("rate vector"))?,
                    Gate::Conditional(g) => {
                        let row = rate.row.ok_or_else(|| Error::Config("conditional gates need a one-hot rate".into()))?;
                        g.forward(tape, store, h, row, n)?
                    }
                };
            }
            h = hook(tape, i, h)?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }
}

/// Hidden widths of the entropy-parameter stack for `in_ch` inputs:
/// `ceil(5/6 in)`, `ceil(2/3 in)`, then `2L`.
pub fn entropy_parameter_widths(in_ch: usize, latent: usize) -> [usize; 4] {
    [in_ch, (5 * in_ch).div_ceil(6), (2 * in_ch).div_ceil(3), 2 * latent]
}

#[derive(Clone, Debug)]
pub struct CompressionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: GatedNet,
    pub decoder: GatedNet,
    pub hyper_encoder: GatedNet,
    pub hyper_decoder: GatedNet,
    pub context_model: Option<MaskedConv>,
    pub entropy_parameters: Vec<ConvLayer>,
    pub unet: Option<Unet>,
    pub hyper_prior: FactorizedPrior,
}

/// Builds a model with deterministic, seed-driven initialization.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<CompressionModel> {
    config.validate()?;
    let mut rng = Rng64::new(seed);
    let mut store = ParamStore::new();
    let (b, l, zc, n) = (
        config.base_channels,
        config.latent_channels,
        config.hyper_latent_channels,
        config.n_rates,
    );
    let v = config.variant;
    let gate = Some((v, n));
    let hyper_gate = if v.gates_hyper() { gate } else { None };

    let encoder = GatedNet::build(
        &mut store,
        &mut rng,
        "encoder",
        &[ConvSpec::conv(3, b, 5, 2), ConvSpec::conv(b, b, 5, 2), ConvSpec::conv(b, b, 5, 2), ConvSpec::conv(b, l, 5, 2)],
        gate,
    )?;
    let decoder = GatedNet::build(
        &mut store,
        &mut rng,
        "decoder",
        &[ConvSpec::up(l, b, 5, 2), ConvSpec::up(b, b, 5, 2), ConvSpec::up(b, b, 5, 2), ConvSpec::up(b, 3, 5, 2)],
        gate,
    )?;
    let hyper_encoder = GatedNet::build(
        &mut store,
        &mut rng,
        "hyper_encoder",
        &[ConvSpec::conv(l, b, 3, 1), ConvSpec::conv(b, b, 5, 2), ConvSpec::conv(b, zc, 5, 2)],
        hyper_gate,
    )?;
    let hyper_decoder = GatedNet::build(
        &mut store,
        &mut rng,
        "hyper_decoder",
        &[ConvSpec::up(zc, b, 5, 2), ConvSpec::up(b, b, 5, 2), ConvSpec::conv(b, 2 * l, 3, 1)],
        hyper_gate,
    )?;
    let context_model = if v.has_context_model() {
        Some(MaskedConv::new(&mut store, &mut rng, "context_model/masked", l, 2 * l, MaskedConv::KERNEL)?)
    } else {
        None
    };
    let ep_in = if v.has_context_model() { 4 * l } else { 2 * l };
    let widths = entropy_parameter_widths(ep_in, l);
    let mut entropy_parameters = Vec::new();
    for i in 0..3 {
        entropy_parameters.push(ConvLayer::new(
            &mut store,
            &mut rng,
            &format!("entropy_parameters/conv{i}"),
            ConvSpec::conv(widths[i], widths[i + 1], 1, 1),
            false,
        )?);
    }
    let unet = if config.use_unet {
        Some(Unet::new(&mut store, &mut rng, super::unet::unet_width(b))?)
    } else {
        None
    };
    let hyper_prior = FactorizedPrior::new(&mut store, zc)?;
    Ok(CompressionModel {
        config: config.clone(),
        store,
        encoder,
        decoder,
        hyper_encoder,
        hyper_decoder,
        context_model,
        entropy_parameters,
        unet,
        hyper_prior,
    })
}

fn check_divisible(shape: [usize; 4], multiple: usize) -> Result<()> {
    for extent in [shape[2], shape[3]] {
        if extent == 0 || extent % multiple != 0 {
            return Err(Error::PaddingRequired { extent, multiple });
        }
    }
    Ok(())
}

impl CompressionModel {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    /// Every gate with its owning network and layer index.
    pub fn gates(&self) -> impl Iterator<Item = (&'static str, usize, &Gate)> {
        [&self.encoder, &self.decoder, &self.hyper_encoder, &self.hyper_decoder]
            .into_iter()
            .flat_map(|net| net.gates.iter().enumerate().map(move |(i, g)| (net.name, i, g)))
    }

    pub fn gate_count(&self) -> usize {
        self.gates().count()
    }

    /// Converts a rate into gate inputs, checking it against the model's
    /// table size and the variant's one-hot restriction.
    pub fn rate_input(&self, rate: &RateControl) -> Result<RateInput> {
        rate.validate()?;
        if rate.n() != self.config.n_rates {
            return Err(Error::Config(format!(
                "rate table has {} entries, model expects {}",
                rate.n(),
                self.config.n_rates
            )));
        }
        let onehot = interp_onehot(rate)?;
        let row = match self.variant() {
            Variant::NoAlpha | Variant::ConditionalConv => Some(onehot_row(rate).map_err(|_| {
                Error::Config(format!("variant {} accepts alpha 0 or 1 only, got {}", self.variant(), rate.alpha))
            })?),
            _ => None,
        };
        Ok(RateInput { onehot, row, identity: false })
    }

    /// `x [B, 3, H, W] -> y [B, L, H/16, W/16]`.
    pub fn forward_transform(&self, tape: &mut Tape, x: Var, rate: &RateInput) -> Result<Var> {
        let s = tape.shape(x);
        if s[1] != 3 {
            return Err(Error::dim("channels", 3, s[1]));
        }
        check_divisible(s, LATENT_STRIDE)?;
        self.encoder.forward(tape, &self.store, x, rate)
    }

    /// `ŷ [B, L, h, w] -> x̂ [B, 3, 16h, 16w]`, unclamped.
    pub fn inverse_transform(&self, tape: &mut Tape, y_hat: Var, rate: &RateInput) -> Result<Var> {
        let c = tape.shape(y_hat)[1];
        if c != self.latent_channels() {
            return Err(Error::dim("channels", self.latent_channels(), c));
        }
        self.decoder.forward(tape, &self.store, y_hat, rate)
    }

    pub fn hyper_encode(&self, tape: &mut Tape, y_hat: Var, rate: &RateInput) -> Result<Var> {
        let c = tape.shape(y_hat)[1];
        if c != self.latent_channels() {
            return Err(Error::dim("channels", self.latent_channels(), c));
        }
        self.hyper_encoder.forward(tape, &self.store, y_hat, rate)
    }

    /// Hyper decoder output `ψ [B, 2L, h, w]`. Odd latent extents are
    /// handled by cropping each upsampled map to the matching size.
    pub fn hyper_decode(&self, tape: &mut Tape, z: Var, rate: &RateInput, latent_hw: (usize, usize)) -> Result<Var> {
        let c = tape.shape(z)[1];
        if c != self.config.hyper_latent_channels {
            return Err(Error::dim("channels", self.config.hyper_latent_channels, c));
        }
        let (h, w) = latent_hw;
        let targets = [(h.div_ceil(2), w.div_ceil(2)), (h, w), (h, w)];
        self.hyper_decoder
            .forward_with(tape, &self.store, z, rate, |tape, i, v| tape.crop(v, targets[i].0, targets[i].1))
    }

    /// Spatial extent of `z` for a latent of extent `(h, w)`.
    pub fn hyper_extent(latent_hw: (usize, usize)) -> (usize, usize) {
        (latent_hw.0.div_ceil(4), latent_hw.1.div_ceil(4))
    }

    /// Masked-convolution context features, or `None` for the variant
    /// without a context model.
    pub fn context(&self, tape: &mut Tape, y_hat: Var) -> Result<Option<Var>> {
        match &self.context_model {
            Some(cm) => cm.forward(tape, &self.store, y_hat).map(Some),
            None => Ok(None),
        }
    }

    /// `(μ_y, σ_y)`: the first `L` output channels are the means, the last
    /// `L` the log-scales.
    pub fn entropy_params(&self, tape: &mut Tape, psi: Var, ctx: Option<Var>) -> Result<(Var, Var)> {
        let l = self.latent_channels();
        let pc = tape.shape(psi)[1];
        if pc != 2 * l {
            return Err(Error::dim("channels", 2 * l, pc));
        }
        let mut h = match (ctx, &self.context_model) {
            (Some(c), Some(_)) => tape.concat_channels(&[c, psi])?,
            (None, None) => psi,
            (Some(_), None) => return Err(Error::Config("this variant has no context model".into())),
            (None, Some(_)) => return Err(Error::Config("context features are required".into())),
        };
        for (i, layer) in self.entropy_parameters.iter().enumerate() {
            h = layer.forward(tape, &self.store, h)?;
            if i + 1 < self.entropy_parameters.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        let mu = tape.slice_channels(h, 0, l)?;
        let sigma = tape.slice_channels(h, l, l)?;
        Ok((mu, sigma))
    }

    pub fn unet_post(&self, tape: &mut Tape, x_hat: Var) -> Result<Var> {
        let unet = self
            .unet
            .as_ref()
            .ok_or_else(|| Error::Unavailable("model was built without the Unet post-network".into()))?;
        check_divisible(tape.shape(x_hat), LATENT_STRIDE)?;
        unet.forward(tape, &self.store, x_hat)
    }

    /// `(μ, σ)` for latent position `(y, x)` of batch item 0, computed with
    /// a fixed loop order from already-known latents only. Encoder and
    /// decoder both call this, so they see identical values.
    pub fn entropy_params_at(&self, y_hat: &Tensor, psi: &Tensor, y: usize, x: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let l = self.latent_channels();
        let [_, c, hh, ww] = y_hat.shape();
        if c != l {
            return Err(Error::dim("channels", l, c));
        }
        let mut feat = Vec::with_capacity(4 * l);
        if let Some(cm) = &self.context_model {
            let w = self.store.get(cm.weight).value.data();
            let b = self.store.get(cm.bias).value.data();
            let k = MaskedConv::KERNEL;
            let r = k / 2;
            let live = k * k / 2;
            for o in 0..cm.out_ch {
                let mut acc = b[o];
                for i in 0..l {
                    let wb = (o * l + i) * k * k;
                    for t in 0..live {
                        let (ky, kx) = (t / k, t % k);
                        let (sy, sx) = (y as isize + ky as isize - r as isize, x as isize + kx as isize - r as isize);
                        if sy < 0 || sx < 0 || sy >= hh as isize || sx >= ww as isize {
                            continue;
                        }
                        acc += w[wb + t] * y_hat.at(0, i, sy as usize, sx as usize);
                    }
                }
                feat.push(acc);
            }
        }
        for ch in 0..2 * l {
            feat.push(psi.at(0, ch, y, x));
        }
        for (li, layer) in self.entropy_parameters.iter().enumerate() {
            let w = self.store.get(layer.weight).value.data();
            let b = self.store.get(layer.bias).value.data();
            let fin = layer.in_ch;
            let mut next = Vec::with_capacity(layer.out_ch);
            for o in 0..layer.out_ch {
                let mut acc = b[o];
                for (i, f) in feat.iter().enumerate() {
                    acc += w[o * fin + i] * f;
                }
                if li + 1 < self.entropy_parameters.len() && acc < 0.0 {
                    acc *= LEAKY_SLOPE;
                }
                next.push(acc);
            }
            feat = next;
        }
        let sigma = feat.split_off(l);
        Ok((feat, sigma))
    }
}
