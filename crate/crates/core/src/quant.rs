//! Per-tensor fake quantization with running range observers and
//! straight-through gradient estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Backward rule for the rounding step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ste {
    /// Gradient passes unchanged.
    Vanilla,
    /// Gradient is zeroed where the scaled input falls outside `[q_min, q_max]`.
    GradClip,
}

impl std::str::FromStr for Ste {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Ste::Vanilla),
            "grad_clip" | "gradclip" | "grad-clip" | "clip" => Ok(Ste::GradClip),
            _ => Err(Error::Config(format!("unknown STE mode {s:?}"))),
        }
    }
}

/// How the running range is tracked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverKind {
    MinMax,
    Momentum,
    /// Batch percentiles fed through a running min/max.
    Percentile,
    /// Batch percentiles fed through a momentum average.
    PercentileMomentum,
}

impl ObserverKind {
    pub fn uses_percentile(self) -> bool {
        matches!(self, ObserverKind::Percentile | ObserverKind::PercentileMomentum)
    }

    /// The running tracker without percentile clipping.
    pub fn base(self) -> ObserverKind {
        match self {
            ObserverKind::Percentile => ObserverKind::MinMax,
            ObserverKind::PercentileMomentum => ObserverKind::Momentum,
            k => k,
        }
    }

    /// The same tracker with percentile clipping added.
    pub fn with_percentile(self) -> ObserverKind {
        match self.base() {
            ObserverKind::Momentum => ObserverKind::PercentileMomentum,
            _ => ObserverKind::Percentile,
        }
    }
}

impl std::str::FromStr for ObserverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" | "min_max" => Ok(ObserverKind::MinMax),
            "momentum" => Ok(ObserverKind::Momentum),
            "percentile" => Ok(ObserverKind::Percentile),
            "percentile_momentum" | "percentile-momentum" => Ok(ObserverKind::PercentileMomentum),
            _ => Err(Error::Config(format!("unknown observer {s:?}"))),
        }
    }
}

pub const DEFAULT_MOMENTUM: f32 = 0.01;
pub const DEFAULT_PERCENTILE: f32 = 0.001;

/// Bit widths at or above this value disable quantization.
pub const BYPASS_BITS: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub signed: bool,
    /// Symmetric (`z = 0`) instead of affine.
    pub symmetric: bool,
    pub ste: Ste,
    pub observer: ObserverKind,
    pub momentum: f32,
    pub percentile: f32,
}

impl QuantConfig {
    /// Signed affine activations.
    pub fn activation(bits: u32, ste: Ste, observer: ObserverKind) -> Self {
        Self {
            bits,
            signed: true,
            symmetric: false,
            ste,
            observer,
            momentum: DEFAULT_MOMENTUM,
            percentile: DEFAULT_PERCENTILE,
        }
    }

    /// Signed symmetric weights.
    pub fn weight(bits: u32, ste: Ste, observer: ObserverKind) -> Self {
        Self { symmetric: true, ..Self::activation(bits, ste, observer) }
    }

    pub fn unsigned(mut self) -> Self {
        self.signed = false;
        self
    }

    pub fn bypass() -> Self {
        Self::activation(BYPASS_BITS, Ste::Vanilla, ObserverKind::MinMax)
    }

    pub fn is_bypass(&self) -> bool {
        self.bits >= BYPASS_BITS
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_bypass() && !(2..=16).contains(&self.bits) {
            return Err(Error::Config(format!("unsupported bit width {}", self.bits)));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!("momentum {} outside (0, 1]", self.momentum)));
        }
        if !(self.percentile > 0.0 && self.percentile < 0.5) {
            return Err(Error::Config(format!("percentile {} outside (0, 0.5)", self.percentile)));
        }
        if self.symmetric && !self.signed {
            return Err(Error::Config("symmetric quantization needs a signed grid".into()));
        }
        Ok(())
    }

    /// Integer grid bounds.
    pub fn q_range(&self) -> (i32, i32) {
        let b = self.bits.min(31);
        if self.signed {
            (-(1i32 << (b - 1)), (1i32 << (b - 1)) - 1)
        } else {
            (0, ((1i64 << b) - 1) as i32)
        }
    }
}

/// Derived quantization parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub scale: f32,
    pub zero_point: i32,
    pub q_min: i32,
    pub q_max: i32,
}

impl QParams {
    /// `clamp(round_half_even(x / s + z), q_min, q_max)`.
    #[inline]
    pub fn quantize(&self, x: f32) -> i32 {
        let v = (x / self.scale + self.zero_point as f32).round_ties_even();
        v.clamp(self.q_min as f32, self.q_max as f32) as i32
    }

    #[inline]
    pub fn dequantize(&self, q: i32) -> f32 {
        (q - self.zero_point) as f32 * self.scale
    }

    #[inline]
    pub fn fake(&self, x: f32) -> f32 {
        self.dequantize(self.quantize(x))
    }

    /// Whether `x / s + z` lies on the representable interval.
    #[inline]
    pub fn in_range(&self, x: f32) -> bool {
        let v = x / self.scale + self.zero_point as f32;
        v >= self.q_min as f32 && v <= self.q_max as f32
    }
}

/// One quantization site: a configuration plus its running range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantModule {
    pub config: QuantConfig,
    pub x_min: f32,
    pub x_max: f32,
    pub initialized: bool,
}

impl QuantModule {
    pub fn new(config: QuantConfig) -> Self {
        Self { config, x_min: 0.0, x_max: 0.0, initialized: false }
    }

    pub fn is_bypass(&self) -> bool {
        self.config.is_bypass()
    }

    /// Updates the running range from a batch of values. Empty input is a
    /// no-op.
    pub fn observe(&mut self, values: &[f32]) {
        if values.is_empty() || self.is_bypass() {
            return;
        }
        let (lo, hi) = if self.config.observer.uses_percentile() {
            let mut buf = values.to_vec();
            let p = self.config.percentile as f64;
            let lo = quantile_in_place(&mut buf, p);
            let hi = quantile_in_place(&mut buf, 1.0 - p);
            (lo, hi)
        } else {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in values {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        };
        if !self.initialized {
            self.x_min = lo;
            self.x_max = hi;
            self.initialized = true;
            return;
        }
        match self.config.observer.base() {
            ObserverKind::Momentum => {
                let c = self.config.momentum;
                self.x_min = (1.0 - c) * self.x_min + c * lo;
                self.x_max = (1.0 - c) * self.x_max + c * hi;
            }
            _ => {
                self.x_min = self.x_min.min(lo);
                self.x_max = self.x_max.max(hi);
            }
        }
    }

    /// Scale and zero point for the tracked range. The range is widened to
    /// contain 0 so zero stays exactly representable.
    pub fn qparams(&self) -> Result<QParams> {
        if !self.initialized {
            return Err(Error::Contract("quantization parameters requested before any observation".into()));
        }
        Ok(qparams_for_range(&self.config, self.x_min, self.x_max))
    }

    /// Forward value and, per element, whether the scaled input was in range.
    pub fn fake_quantize(&self, x: &Tensor) -> Result<(Tensor, Vec<bool>)> {
        let qp = self.qparams()?;
        let out = x.map(|v| qp.fake(v));
        let pass = x.data().iter().map(|&v| qp.in_range(v)).collect();
        Ok((out, pass))
    }

    pub fn integer_quantize(&self, x: &Tensor) -> Result<Vec<i32>> {
        let qp = self.qparams()?;
        Ok(x.data().iter().map(|&v| qp.quantize(v)).collect())
    }

    pub fn dequantize(&self, q: &[i32], rows: usize, cols: usize) -> Result<Tensor> {
        let qp = self.qparams()?;
        Tensor::from_vec(rows, cols, q.iter().map(|&v| qp.dequantize(v)).collect())
    }
}

pub fn qparams_for_range(config: &QuantConfig, x_min: f32, x_max: f32) -> QParams {
    let (q_min, q_max) = config.q_range();
    let lo = x_min.min(0.0);
    let hi = x_max.max(0.0);
    let fallback = QParams { scale: 1.0, zero_point: 0, q_min, q_max };
    if config.symmetric {
        let m = lo.abs().max(hi.abs());
        let s = m / q_max as f32;
        if !(s > 0.0 && s.is_finite()) {
            return fallback;
        }
        QParams { scale: s, zero_point: 0, q_min, q_max }
    } else {
        let s = (hi - lo) / (q_max - q_min) as f32;
        if !(s > 0.0 && s.is_finite()) {
            return fallback;
        }
        let z = (q_min as f32 - lo / s).round_ties_even().clamp(q_min as f32, q_max as f32) as i32;
        QParams { scale: s, zero_point: z, q_min, q_max }
    }
}

/// Quantile `q` with linear interpolation between order statistics at
/// position `q * (n - 1)`. Reorders `buf`.
pub fn quantile_in_place(buf: &mut [f32], q: f64) -> f32 {
    let n = buf.len();
    assert!(n > 0, "quantile of an empty buffer");
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let k = pos.floor() as usize;
    let t = pos - k as f64;
    let (_, &mut lo, rest) = buf.select_nth_unstable_by(k, f32::total_cmp);
    if t == 0.0 || rest.is_empty() {
        return lo;
    }
    let hi = rest.iter().copied().fold(f32::INFINITY, f32::min);
    (lo as f64 + (hi as f64 - lo as f64) * t) as f32
}
