//! Rate-distortion training: the Lagrangian loss, Adam with a staged
//! learning rate, per-step random rates, and a procedural image corpus.

pub mod adam;
pub mod corpus;
pub mod log;

pub use adam::{clip_grad_norm, Adam};
pub use corpus::{crop_at, dead_leaves, Corpus};
pub use log::{LogWriter, StepLog, LOG_HEADER};

use crate::entropy::{training_paths, Noise, TrainingPaths};
use crate::error::{Error, Result};
use crate::interpca::{interp_lambda, sample_training_rate, RateControl};
use crate::layers::{parse_key_values, parse_list, parse_num, CompressionModel, Distortion, ModelConfig, RateInput, Variant, GATE_PREFIX};
use crate::metrics::{max_scales, msssim_tape};
use crate::rng::Rng64;
use crate::tensor::{Tape, Var};

/// Stage boundaries of the full-scale schedule, rescaled to `total_steps`.
pub const FULL_SCALE_BOUNDARIES: [usize; 5] = [1_600_000, 2_100_000, 2_300_000, 2_400_000, 2_500_000];
pub const STAGE_LRS: [f64; 5] = [1e-4, 5e-5, 1e-5, 5e-6, 1e-6];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    /// `(boundary, lr)`: the rate applies to steps below the boundary.
    pub lr_stages: Vec<(usize, f64)>,
    pub total_steps: usize,
    pub distortion: Distortion,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Global gradient-norm limit.
    pub clip_norm: f64,
    /// Multiplier on the learning rate of the rate-gate parameters.
    pub gate_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            patch_size: 64,
            lr_stages: scaled_stages(50_000),
            total_steps: 50_000,
            distortion: Distortion::Mse,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: 1.0,
            gate_lr_scale: 1.0,
        }
    }
}

/// The five-stage schedule with boundaries scaled to `total_steps`.
/// Stages that round to zero length are dropped.
pub fn scaled_stages(total_steps: usize) -> Vec<(usize, f64)> {
    let last = *FULL_SCALE_BOUNDARIES.last().expect("nonempty") as u128;
    let mut stages: Vec<(usize, f64)> = Vec::new();
    for (&b, lr) in FULL_SCALE_BOUNDARIES.iter().zip(STAGE_LRS) {
        let end = ((b as u128 * total_steps as u128 + last / 2) / last) as usize;
        if end > stages.last().map_or(0, |s| s.0) {
            stages.push((end, lr));
        }
    }
    stages
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(Error::Config(format!("patch_size must be a positive multiple of 16, got {}", self.patch_size)));
        }
        if self.lr_stages.is_empty() {
            return Err(Error::Config("at least one learning-rate stage is required".into()));
        }
        if self.lr_stages.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("learning-rate boundaries must be strictly increasing".into()));
        }
        if self.lr_stages.windows(2).any(|w| w[1].1 >= w[0].1) {
            return Err(Error::Config("learning rates must be strictly decreasing".into()));
        }
        if self.lr_stages.iter().any(|s| !(s.1.is_finite() && s.1 > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.gate_lr_scale.is_finite() && self.gate_lr_scale > 0.0) {
            return Err(Error::Config("gate_lr_scale must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate of the first stage whose boundary exceeds `step`; the
    /// last stage continues past its boundary.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr_stages
            .iter()
            .find(|(b, _)| step < *b)
            .or(self.lr_stages.last())
            .map(|s| s.1)
            .expect("validated nonempty")
    }

    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(", ");
        format!(
            "batch_size = {}\npatch_size = {}\ntotal_steps = {}\ndistortion = {}\nseed = {}\n\
             checkpoint_every = {}\nclip_norm = {}\ngate_lr_scale = {}\nlr_boundaries = {}\nlr_values = {}\n",
            self.batch_size,
            self.patch_size,
            self.total_steps,
            self.distortion,
            self.seed,
            self.checkpoint_every,
            self.clip_norm,
            self.gate_lr_scale,
            join(self.lr_stages.iter().map(|s| s.0.to_string()).collect()),
            join(self.lr_stages.iter().map(|s| s.1.to_string()).collect()),
        )
    }

    /// Missing keys keep their defaults; without explicit stages the
    /// schedule is scaled to `total_steps`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let (mut bounds, mut lrs): (Option<Vec<usize>>, Option<Vec<f64>>) = (None, None);
        for (key, value) in parse_key_values(text)? {
            match key.as_str() {
                "batch_size" => cfg.batch_size = parse_num(&key, &value)?,
                "patch_size" => cfg.patch_size = parse_num(&key, &value)?,
                "total_steps" => cfg.total_steps = parse_num(&key, &value)?,
                "distortion" => cfg.distortion = value.parse()?,
                "seed" => cfg.seed = parse_num(&key, &value)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_num(&key, &value)?,
                "clip_norm" => cfg.clip_norm = parse_num(&key, &value)?,
                "gate_lr_scale" => cfg.gate_lr_scale = parse_num(&key, &value)?,
                "lr_boundaries" => bounds = Some(parse_list(&key, &value)?),
                "lr_values" => lrs = Some(parse_list(&key, &value)?),
                _ => return Err(Error::Config(format!("unknown training config key `{key}`"))),
            }
        }
        cfg.lr_stages = match (bounds, lrs) {
            (None, None) => scaled_stages(cfg.total_steps),
            (Some(b), Some(l)) if b.len() == l.len() => b.into_iter().zip(l).collect(),
            (Some(b), Some(l)) => {
                return Err(Error::Config(format!("{} lr_boundaries but {} lr_values", b.len(), l.len())));
            }
            _ => return Err(Error::Config("lr_boundaries and lr_values go together".into())),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const MODEL_KEYS: [&str; 7] =
    ["base_channels", "latent_channels", "hyper_latent_channels", "n_rates", "lambda_table", "variant", "use_unet"];

/// Splits one `key = value` file into model and training settings.
/// `distortion` applies to both.
pub fn parse_run_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let (mut model, mut train) = (String::new(), String::new());
    for (k, v) in parse_key_values(text)? {
        let line = format!("{k} = {v}\n");
        if k == "distortion" {
            model.push_str(&line);
            train.push_str(&line);
        } else if MODEL_KEYS.contains(&k.as_str()) {
            model.push_str(&line);
        } else {
            train.push_str(&line);
        }
    }
    Ok((ModelConfig::from_text(&model)?, TrainConfig::from_text(&train)?))
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub ry_bits: f64,
    pub rz_bits: f64,
    /// `(R_y + R_z)` per pixel of the batch.
    pub rate_bpp: f64,
    pub distortion: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `mean((x - out)^2)` or `1 - MS-SSIM(x, out)`.
pub fn distortion_term(tape: &mut Tape, x: Var, out: Var, kind: Distortion) -> Result<Var> {
    match kind {
        Distortion::Mse => {
            let d = tape.sub(out, x)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean(sq))
        }
        Distortion::MsSsim => {
            let s = tape.shape(x);
            let scales = max_scales(s[2], s[3]).min(5);
            let m = msssim_tape(tape, x, out, scales)?;
            let neg = tape.scale(m, -1.0);
            Ok(tape.add_scalar(neg, 1.0))
        }
    }
}

/// `(R_y + R_z) / pixels + lambda * D`, the rate in bits per pixel.
pub fn rd_loss(tape: &mut Tape, r_y: Var, r_z: Var, d: Var, lambda: f64, pixels: usize) -> Result<Var> {
    let r = tape.add(r_y, r_z)?;
    let r = tape.scale(r, (1.0 / pixels as f64) as f32);
    let ld = tape.scale(d, lambda as f32);
    tape.add(r, ld)
}

/// Training forward pass plus loss. The distortion is measured on the Unet
/// output when the model has one.
pub fn loss(
    model: &CompressionModel,
    tape: &mut Tape,
    x: Var,
    rate: &RateInput,
    lambda: f64,
    noise: Noise<'_>,
) -> Result<(Var, TrainingPaths, LossTerms)> {
    let paths = training_paths(model, tape, x, rate, noise)?;
    let out = paths.x_ddot.unwrap_or(paths.x_hat);
    let d = distortion_term(tape, x, out, model.config.distortion)?;
    let s = tape.shape(x);
    let pixels = s[0] * s[2] * s[3];
    let total = rd_loss(tape, paths.r_y, paths.r_z, d, lambda, pixels)?;
    let (ry, rz) = (tape.value(paths.r_y).item() as f64, tape.value(paths.r_z).item() as f64);
    let terms = LossTerms {
        ry_bits: ry,
        rz_bits: rz,
        rate_bpp: (ry + rz) / pixels as f64,
        distortion: tape.value(d).item() as f64,
        lambda,
        total: tape.value(total).item() as f64,
    };
    Ok((total, paths, terms))
}

/// How each step picks its rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateMode {
    /// Fresh `(j, alpha)` per batch; one-hot-only variants draw a table index.
    Sampled,
    /// Gates bypassed and a fixed lambda (single-rate network).
    Fixed(f64),
}

/// Stateful training loop over one model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub mode: RateMode,
    adam: Adam,
    data_rng: Rng64,
    rate_rng: Rng64,
    noise_rng: Rng64,
    step: usize,
}

impl Trainer {
    pub fn new(model: &CompressionModel, config: TrainConfig, mode: RateMode) -> Result<Self> {
        config.validate()?;
        if config.distortion != model.config.distortion {
            return Err(Error::Config(format!(
                "training distortion {} does not match the model's {}",
                config.distortion, model.config.distortion
            )));
        }
        if let RateMode::Fixed(l) = mode {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Config(format!("fixed lambda must be positive, got {l}")));
            }
        }
        let mut root = Rng64::new(config.seed);
        let (data_rng, rate_rng, noise_rng) = (root.fork(), root.fork(), root.fork());
        Ok(Trainer { adam: Adam::new(&model.store), config, mode, data_rng, rate_rng, noise_rng, step: 0 })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn draw_rate(&mut self, model: &CompressionModel) -> Result<(RateInput, Option<RateControl>, f64)> {
        match self.mode {
            RateMode::Fixed(l) => Ok((RateInput::identity(), None, l)),
            RateMode::Sampled => {
                let table = &model.config.lambda_table;
                let rate = match model.variant() {
                    Variant::NoAlpha | Variant::ConditionalConv => {
                        RateControl::at_table_index(table, self.rate_rng.below(table.len()))?
                    }
                    _ => sample_training_rate(table, &mut self.rate_rng)?,
                };
                let lambda = interp_lambda(&rate)?;
                Ok((model.rate_input(&rate)?, Some(rate), lambda))
            }
        }
    }

    /// One optimization step. Gradients stay in the store afterwards.
    pub fn step(&mut self, model: &mut CompressionModel, corpus: &Corpus) -> Result<StepLog> {
        let x = corpus.sample_batch(self.config.batch_size, self.config.patch_size, &mut self.data_rng)?;
        let (ri, rate, lambda) = self.draw_rate(model)?;
        model.store.zero_grad();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (total, _, terms) = loss(model, &mut tape, xv, &ri, lambda, Noise::Uniform(&mut self.noise_rng))?;
        if !terms.total.is_finite() {
            return Err(Error::Contract(format!("training diverged at step {}: loss {}", self.step, terms.total)));
        }
        tape.backward(total, &mut model.store)?;
        let grad_norm = clip_grad_norm(&mut model.store, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Contract(format!("training diverged at step {}: gradient norm {grad_norm}", self.step)));
        }
        let (lr, gate_scale) = (self.config.lr_at(self.step), self.config.gate_lr_scale);
        self.adam.step_with(&mut model.store, |name| if name.starts_with(GATE_PREFIX) { lr * gate_scale } else { lr });
        let log = StepLog {
            step: self.step,
            rate: rate.map(|r| (r.j, r.alpha)),
            lambda,
            ry_bits: terms.ry_bits,
            rz_bits: terms.rz_bits,
            distortion: terms.distortion,
            total: terms.total,
            grad_norm,
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs until `total_steps`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        model: &mut CompressionModel,
        corpus: &Corpus,
        mut on_step: impl FnMut(&StepLog, &CompressionModel) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(self.config.total_steps.saturating_sub(self.step));
        while self.step < self.config.total_steps {
            let log = self.step(model, corpus)?;
            on_step(&log, model)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Variable-rate training with a fresh random rate per batch.
pub fn train(
    model: &mut CompressionModel,
    corpus: &Corpus,
    config: &TrainConfig,
    on_step: impl FnMut(&StepLog, &CompressionModel) -> Result<()>,
) -> Result<Vec<StepLog>> {
    Trainer::new(model, config.clone(), RateMode::Sampled)?.run(model, corpus, on_step)
}

/// Single-rate training: gates bypassed, fixed lambda.
pub fn train_single_rate(
    model: &mut CompressionModel,
    corpus: &Corpus,
    config: &TrainConfig,
    lambda: f64,
    on_step: impl FnMut(&StepLog, &CompressionModel) -> Result<()>,
) -> Result<Vec<StepLog>> {
    Trainer::new(model, config.clone(), RateMode::Fixed(lambda))?.run(model, corpus, on_step)
}

/// Median of a slice (NaN-free input assumed).
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
