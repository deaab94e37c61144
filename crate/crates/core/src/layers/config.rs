use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Lagrange multipliers for MSE-optimized models.
pub const MSE_LAMBDAS: [f64; 10] = [50.0, 160.0, 300.0, 480.0, 710.0, 1000.0, 1350.0, 1780.0, 2302.0, 2915.0];
/// Lagrange multipliers for models optimized for `1 - MS-SSIM`.
pub const MSSSIM_LAMBDAS: [f64; 10] = [1.0, 2.0, 3.0, 5.0, 8.0, 10.0, 15.0, 20.0, 25.0, 30.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// InterpCA gates on every encoder and decoder convolution.
    Proposed,
    /// Same gates, alpha pinned to 1 (no interpolation).
    NoAlpha,
    /// Gates on the hyper encoder and hyper decoder as well.
    HyperInterpca,
    /// No masked-convolution context model; fully parallel decoding.
    NoContextModel,
    /// Conditional convolutions (softplus mask + additive bias, one-hot only).
    ConditionalConv,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Proposed,
        Variant::NoAlpha,
        Variant::HyperInterpca,
        Variant::NoContextModel,
        Variant::ConditionalConv,
    ];

    pub fn id(self) -> u8 {
        match self {
            Variant::Proposed => 0,
            Variant::NoAlpha => 1,
            Variant::HyperInterpca => 2,
            Variant::NoContextModel => 3,
            Variant::ConditionalConv => 4,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == id)
            .ok_or_else(|| Error::Format(format!("unknown variant id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::NoAlpha => "no_alpha",
            Variant::HyperInterpca => "hyper_interpca",
            Variant::NoContextModel => "no_context_model",
            Variant::ConditionalConv => "conditional_conv",
        }
    }

    pub fn has_context_model(self) -> bool {
        self != Variant::NoContextModel
    }

    pub fn gates_hyper(self) -> bool {
        self == Variant::HyperInterpca
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distortion {
    Mse,
    MsSsim,
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distortion::Mse => "mse",
            Distortion::MsSsim => "msssim",
        })
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Distortion::Mse),
            "msssim" => Ok(Distortion::MsSsim),
            _ => Err(Error::Config(format!("unknown distortion `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub latent_channels: usize,
    pub hyper_latent_channels: usize,
    pub n_rates: usize,
    pub lambda_table: Vec<f64>,
    pub variant: Variant,
    pub use_unet: bool,
    pub distortion: Distortion,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            latent_channels: 48,
            hyper_latent_channels: 32,
            n_rates: MSE_LAMBDAS.len(),
            lambda_table: MSE_LAMBDAS.to_vec(),
            variant: Variant::Proposed,
            use_unet: false,
            distortion: Distortion::Mse,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rates < 2 {
            return Err(Error::Config(format!("n_rates must be at least 2, got {}", self.n_rates)));
        }
        if self.lambda_table.len() != self.n_rates {
            return Err(Error::Config(format!(
                "lambda_table has {} entries but n_rates = {}",
                self.lambda_table.len(),
                self.n_rates
            )));
        }
        if self.lambda_table.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config("lambda_table entries must be positive".into()));
        }
        if self.lambda_table.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("lambda_table must be strictly increasing".into()));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("latent_channels", self.latent_channels),
            ("hyper_latent_channels", self.hyper_latent_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Flat `key = value` text, lists comma-separated.
    pub fn to_text(&self) -> String {
        let lambdas: Vec<String> = self.lambda_table.iter().map(|l| format!("{l}")).collect();
        format!(
            "base_channels = {}\nlatent_channels = {}\nhyper_latent_channels = {}\nn_rates = {}\n\
             lambda_table = {}\nvariant = {}\nuse_unet = {}\ndistortion = {}\n",
            self.base_channels,
            self.latent_channels,
            self.hyper_latent_channels,
            self.n_rates,
            lambdas.join(", "),
            self.variant,
            self.use_unet,
            self.distortion
        )
    }

    /// Parses the text form. Missing keys keep their defaults; unknown keys
    /// are rejected. A missing `lambda_table` follows the distortion.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut saw_table = false;
        let mut saw_n = false;
        for (key, value) in parse_key_values(text)? {
            match key.as_str() {
                "base_channels" => cfg.base_channels = parse_num(&key, &value)?,
                "latent_channels" => cfg.latent_channels = parse_num(&key, &value)?,
                "hyper_latent_channels" => cfg.hyper_latent_channels = parse_num(&key, &value)?,
                "n_rates" => {
                    cfg.n_rates = parse_num(&key, &value)?;
                    saw_n = true;
                }
                "lambda_table" => {
                    cfg.lambda_table = parse_list(&key, &value)?;
                    saw_table = true;
                }
                "variant" => cfg.variant = value.parse()?,
                "use_unet" => cfg.use_unet = parse_bool(&key, &value)?,
                "distortion" => cfg.distortion = value.parse()?,
                _ => return Err(Error::Config(format!("unknown model config key `{key}`"))),
            }
        }
        if !saw_table && cfg.distortion == Distortion::MsSsim {
            cfg.lambda_table = MSSSIM_LAMBDAS.to_vec();
        }
        if !saw_n {
            cfg.n_rates = cfg.lambda_table.len();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}
