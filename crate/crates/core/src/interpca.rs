//! Interpolation channel attention.
//!
//! A rate is selected by an index `j` into a table of Lagrange multipliers
//! and an exact rational `alpha`; the pair names the multiplier
//! `alpha * lambda[j] + (1 - alpha) * lambda[j + 1]`. Each gated convolution
//! scales its output channels by `softplus(W · onehot(j, alpha) + b)`, where
//! the one-hot vector is interpolated the same way as the multiplier.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// `softplus^-1(1) = ln(e - 1)`: the bias that makes a zero-weight gate the
/// identity.
pub const IDENTITY_LOGIT: f32 = 0.541_324_85;

/// An interpolation weight `num / den` in `[0, 1]`, carried exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Alpha {
    num: u16,
    den: u16,
}

impl Alpha {
    pub const ZERO: Alpha = Alpha { num: 0, den: 1 };
    pub const HALF: Alpha = Alpha { num: 1, den: 2 };
    pub const ONE: Alpha = Alpha { num: 1, den: 1 };

    pub fn new(num: u16, den: u16) -> Result<Self> {
        if den == 0 {
            return Err(Error::Config("alpha denominator must be at least 1".into()));
        }
        if num > den {
            return Err(Error::Config(format!("alpha {num}/{den} exceeds 1")));
        }
        Ok(Alpha { num, den })
    }

    /// Nearest fraction `k / grid` to a real value in `[0, 1]`.
    pub fn nearest(value: f64, grid: u16) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Config(format!("alpha {value} outside [0, 1]")));
        }
        let grid = grid.max(1);
        Alpha::new((value * grid as f64).round() as u16, grid)
    }

    pub fn num(self) -> u16 {
        self.num
    }

    pub fn den(self) -> u16 {
        self.den
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_one(self) -> bool {
        self.num == self.den
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    /// Whether the value lies on the grid `{0, 1/m, ..., 1}`.
    pub fn on_grid(self, m: u16) -> bool {
        m > 0 && (self.num as u32 * m as u32) % self.den as u32 == 0
    }

    /// Same rational value (cross-multiplication, so 2/4 == 1/2).
    pub fn same_value(self, other: Alpha) -> bool {
        self.num as u32 * other.den as u32 == other.num as u32 * self.den as u32
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// The `(lambda table, j, alpha, M)` bundle that selects one rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RateControl {
    pub j: usize,
    pub alpha: Alpha,
    pub lambda_table: Vec<f64>,
    /// Inference grid density `M`.
    pub grid: u16,
}

impl RateControl {
    pub fn new(lambda_table: &[f64], j: usize, alpha: Alpha) -> Result<Self> {
        let rc = RateControl {
            j,
            alpha,
            lambda_table: lambda_table.to_vec(),
            grid: alpha.den(),
        };
        rc.validate()?;
        Ok(rc)
    }

    /// Inference rate on the grid `{0, 1/m, ..., 1}`.
    pub fn inference(lambda_table: &[f64], j: usize, alpha: Alpha, m: u16) -> Result<Self> {
        if !alpha.on_grid(m) {
            return Err(Error::Config(format!("alpha {alpha} is not on the 1/{m} grid")));
        }
        let mut rc = Self::new(lambda_table, j, alpha)?;
        rc.grid = m;
        Ok(rc)
    }

    /// The rate naming `lambda[i]` exactly: `(i, 1)` for interior indices and
    /// `(n - 2, 0)` for the last entry.
    pub fn at_table_index(lambda_table: &[f64], i: usize) -> Result<Self> {
        let n = lambda_table.len();
        if i + 1 == n && n >= 2 {
            Self::new(lambda_table, n - 2, Alpha::ZERO)
        } else {
            Self::new(lambda_table, i, Alpha::ONE)
        }
    }

    pub fn n(&self) -> usize {
        self.lambda_table.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n < 2 {
            return Err(Error::Config(format!("lambda table needs at least 2 entries, got {n}")));
        }
        if self.j + 2 > n {
            return Err(Error::Index(format!("j = {} but must be at most n - 2 = {}", self.j, n - 2)));
        }
        Ok(())
    }

    /// Whether the rate is one of the training values `alpha ∈ {0, 1/2, 1}`.
    pub fn is_training_rate(&self) -> bool {
        [Alpha::ZERO, Alpha::HALF, Alpha::ONE]
            .iter()
            .any(|a| a.same_value(self.alpha))
    }
}

/// `alpha * lambda[j] + (1 - alpha) * lambda[j + 1]`, exact at both endpoints.
pub fn interp_lambda(rate: &RateControl) -> Result<f64> {
    rate.validate()?;
    let (lo, hi) = (rate.lambda_table[rate.j], rate.lambda_table[rate.j + 1]);
    Ok(if rate.alpha.is_one() {
        lo
    } else if rate.alpha.is_zero() {
        hi
    } else {
        let a = rate.alpha.value();
        a * lo + (1.0 - a) * hi
    })
}

/// Length-`n` vector with `alpha` at `j` and `1 - alpha` at `j + 1`.
pub fn interp_onehot(rate: &RateControl) -> Result<Vec<f32>> {
    rate.validate()?;
    let mut v = vec![0.0f32; rate.n()];
    let (num, den) = (rate.alpha.num() as f32, rate.alpha.den() as f32);
    v[rate.j] = num / den;
    v[rate.j + 1] = (den - num) / den;
    Ok(v)
}

/// Row selected by a one-hot rate: `j` when `alpha = 1`, `j + 1` when
/// `alpha = 0`. Fractional values have no row.
pub fn onehot_row(rate: &RateControl) -> Result<usize> {
    rate.validate()?;
    if rate.alpha.is_one() {
        Ok(rate.j)
    } else if rate.alpha.is_zero() {
        Ok(rate.j + 1)
    } else {
        Err(Error::Config(format!(
            "conditional convolution selects one-hot rows only; alpha {} is fractional",
            rate.alpha
        )))
    }
}

/// Uniform `j ∈ {0, ..., n-2}` and `alpha ∈ {0, 1/2, 1}`.
pub fn sample_training_rate(lambda_table: &[f64], rng: &mut Rng64) -> Result<RateControl> {
    let n = lambda_table.len();
    if n < 2 {
        return Err(Error::Config("need at least two lambdas".into()));
    }
    let j = rng.below(n - 1);
    let alpha = [Alpha::ZERO, Alpha::HALF, Alpha::ONE][rng.below(3)];
    RateControl::new(lambda_table, j, alpha)
}

/// Per-channel softplus gate driven by the interpolated one-hot rate vector.
/// There is no additive mask bias.
#[derive(Clone, Debug)]
pub struct InterpCaGate {
    /// `[ch, n, 1, 1]`
    pub fcn_weight: ParamId,
    /// `[1, ch, 1, 1]`
    pub fcn_bias: ParamId,
    pub ch: usize,
}

impl InterpCaGate {
    /// Identity-initialized gate: zero weights, bias `softplus^-1(1)`.
    pub fn new(store: &mut ParamStore, prefix: &str, ch: usize, n: usize) -> Result<Self> {
        let fcn_weight = store.add(format!("{prefix}/weight"), Tensor::zeros([ch, n, 1, 1]))?;
        let fcn_bias = store.add(format!("{prefix}/bias"), Tensor::full([1, ch, 1, 1], IDENTITY_LOGIT))?;
        Ok(InterpCaGate { fcn_weight, fcn_bias, ch })
    }

    /// Pre-softplus logits `W · onehot + b`, shaped `[1, ch, 1, 1]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, onehot: Var) -> Result<Var> {
        let w = tape.param(store, self.fcn_weight);
        let b = tape.param(store, self.fcn_bias);
        tape.linear(onehot, w, Some(b))
    }

    pub fn scales(&self, tape: &mut Tape, store: &ParamStore, onehot: Var) -> Result<Var> {
        let l = self.logits(tape, store, onehot)?;
        Ok(tape.softplus(l))
    }

    /// `Y[b, c, h, w] = s[c] * X[b, c, h, w]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, onehot: Var) -> Result<Var> {
        let c = tape.shape(x)[1];
        if c != self.ch {
            return Err(Error::dim("channels", self.ch, c));
        }
        let s = self.scales(tape, store, onehot)?;
        tape.mul(x, s)
    }

    /// Gate scales for a rate, evaluated off-tape.
    pub fn scale_values(&self, store: &ParamStore, rate: &RateControl) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let oh = tape.constant(Tensor::vector(&interp_onehot(rate)?));
        let s = self.scales(&mut tape, store, oh)?;
        Ok(tape.value(s).data().to_vec())
    }
}

/// Conditional convolution gate: `softplus(W_m e_j) ⊗ X + W_b e_j` with
/// one-hot row selection only.
#[derive(Clone, Debug)]
pub struct ConditionalConvGate {
    /// `[ch, n, 1, 1]`
    pub weight_fcn: ParamId,
    /// `[ch, n, 1, 1]`
    pub bias_fcn: ParamId,
    pub ch: usize,
}

impl ConditionalConvGate {
    pub fn new(store: &mut ParamStore, prefix: &str, ch: usize, n: usize) -> Result<Self> {
        let weight_fcn = store.add(format!("{prefix}/weight"), Tensor::full([ch, n, 1, 1], IDENTITY_LOGIT))?;
        let bias_fcn = store.add(format!("{prefix}/bias"), Tensor::zeros([ch, n, 1, 1]))?;
        Ok(ConditionalConvGate { weight_fcn, bias_fcn, ch })
    }

    /// Forward for row `row` of the one-hot table.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, row: usize, n: usize) -> Result<Var> {
        let c = tape.shape(x)[1];
        if c != self.ch {
            return Err(Error::dim("channels", self.ch, c));
        }
        if row >= n {
            return Err(Error::Index(format!("row {row} outside table of {n}")));
        }
        let mut e = vec![0.0f32; n];
        e[row] = 1.0;
        let onehot = tape.constant(Tensor::vector(&e));
        let wm = tape.param(store, self.weight_fcn);
        let wb = tape.param(store, self.bias_fcn);
        let m = tape.linear(onehot, wm, None)?;
        let m = tape.softplus(m);
        let b = tape.linear(onehot, wb, None)?;
        let scaled = tape.mul(x, m)?;
        tape.add(scaled, b)
    }

    /// `(mean scale, mean bias)` over channels for one row.
    pub fn row_means(&self, store: &ParamStore, row: usize) -> (f64, f64) {
        let w = &store.get(self.weight_fcn).value;
        let b = &store.get(self.bias_fcn).value;
        let n = w.shape()[1];
        let mut sm = 0.0;
        let mut sb = 0.0;
        for c in 0..self.ch {
            sm += crate::tensor::softplus(w.data()[c * n + row]) as f64;
            sb += b.data()[c * n + row] as f64;
        }
        (sm / self.ch as f64, sb / self.ch as f64)
    }
}
