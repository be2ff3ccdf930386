//! Training configuration and the per-architecture defaults it resolves to.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Arch, QuantSpec, SiteKind};
use crate::quant::{ObserverKind, Ste};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Fp32,
    Qat,
    Nqat,
    Dq,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Fp32 => "fp32",
            Regime::Qat => "qat",
            Regime::Nqat => "nqat",
            Regime::Dq => "dq",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Regime::Fp32),
            "qat" => Ok(Regime::Qat),
            "nqat" => Ok(Regime::Nqat),
            "dq" => Ok(Regime::Dq),
            _ => Err(Error::Config(format!("unknown regime {s:?}"))),
        }
    }
}

/// Ablations of the protection method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Protective masking with plain min/max or momentum observers.
    DqMaskingOnly,
    /// Noisy QAT with percentile observers, no masking.
    PercentileOnly,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masking_only" | "dq_masking_only" | "masking-only" => Ok(Ablation::DqMaskingOnly),
            "percentile_only" | "percentile-only" => Ok(Ablation::PercentileOnly),
            _ => Err(Error::Config(format!("unknown ablation mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqConfig {
    pub p_min: f32,
    pub p_max: f32,
    #[serde(default)]
    pub shared_mask: bool,
}

impl Default for DqConfig {
    fn default() -> Self {
        Self { p_min: 0.0, p_max: 0.1, shared_mask: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NqatConfig {
    pub noise_rate: f32,
}

impl Default for NqatConfig {
    fn default() -> Self {
        Self { noise_rate: 0.8 }
    }
}

/// Flat training configuration. Unset optional fields take per-architecture
/// defaults at [`TrainConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    #[serde(default = "default_bits")]
    pub bits: u32,
    #[serde(default)]
    pub ste: Option<Ste>,
    #[serde(default)]
    pub observer: Option<ObserverKind>,
    #[serde(default)]
    pub lr: Option<f32>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default)]
    pub dropout: Option<f32>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dq: Option<DqConfig>,
    #[serde(default)]
    pub nqat: Option<NqatConfig>,
    /// Bit-width overrides by site family.
    #[serde(default)]
    pub site_bits: BTreeMap<SiteKind, u32>,
    #[serde(default)]
    pub ablation: Option<Ablation>,
    /// Graphs per minibatch for graph-level tasks.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_bits() -> u32 {
    8
}
fn default_weight_decay() -> f32 {
    5e-4
}
fn default_epochs() -> usize {
    300
}
fn default_patience() -> usize {
    50
}
fn default_batch_size() -> usize {
    32
}

/// Settings after defaults have been applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub quant: QuantSpec,
    pub lr: f32,
    pub dropout: Option<f32>,
    pub noise_rate: Option<f32>,
    pub protection: Option<DqConfig>,
}

/// STE and observer that work best per architecture and bit width under
/// plain QAT.
pub fn default_ste_observer(arch: Arch, bits: u32) -> (Ste, ObserverKind) {
    let low = bits <= 4;
    match (arch, low) {
        (Arch::Gcn, false) => (Ste::Vanilla, ObserverKind::MinMax),
        (Arch::Gcn, true) => (Ste::GradClip, ObserverKind::Momentum),
        (Arch::Gat, false) | (Arch::Gin, false) => (Ste::GradClip, ObserverKind::Momentum),
        (Arch::Gat, true) | (Arch::Gin, true) => (Ste::Vanilla, ObserverKind::Momentum),
    }
}

pub fn default_lr(arch: Arch) -> f32 {
    match arch {
        Arch::Gat => 0.005,
        _ => 0.01,
    }
}

impl TrainConfig {
    pub fn new(regime: Regime, bits: u32, seed: u64) -> Self {
        Self {
            regime,
            bits,
            ste: None,
            observer: None,
            lr: None,
            weight_decay: default_weight_decay(),
            dropout: None,
            epochs: default_epochs(),
            patience: default_patience(),
            seed,
            dq: (regime == Regime::Dq).then(DqConfig::default),
            nqat: (regime == Regime::Nqat).then(NqatConfig::default),
            site_bits: BTreeMap::new(),
            ablation: None,
            batch_size: default_batch_size(),
        }
    }

    pub fn fp32(seed: u64) -> Self {
        Self::new(Regime::Fp32, 32, seed)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.regime == Regime::Dq) != self.dq.is_some() {
            return Err(Error::Config("`dq` settings must be present exactly when regime is dq".into()));
        }
        if (self.regime == Regime::Nqat) != self.nqat.is_some() {
            return Err(Error::Config("`nqat` settings must be present exactly when regime is nqat".into()));
        }
        if let Some(d) = &self.dq {
            if !(0.0..=1.0).contains(&d.p_min) || !(0.0..=1.0).contains(&d.p_max) || d.p_min > d.p_max {
                return Err(Error::Config(format!("invalid protection range ({}, {})", d.p_min, d.p_max)));
            }
        }
        if let Some(n) = &self.nqat {
            if !(0.0..=1.0).contains(&n.noise_rate) {
                return Err(Error::Config(format!("noise rate {} outside [0, 1]", n.noise_rate)));
            }
        }
        match self.ablation {
            Some(Ablation::DqMaskingOnly) if self.regime != Regime::Dq => {
                return Err(Error::Config("masking-only ablation requires the dq regime".into()))
            }
            Some(Ablation::PercentileOnly) if self.regime != Regime::Nqat => {
                return Err(Error::Config("percentile-only ablation requires the nqat regime".into()))
            }
            _ => {}
        }
        if self.regime != Regime::Fp32 && !(2..=16).contains(&self.bits) {
            return Err(Error::Config(format!("unsupported bit width {}", self.bits)));
        }
        if let Some(&b) = self.site_bits.values().find(|&&b| !(2..=16).contains(&b) && b < 32) {
            return Err(Error::Config(format!("unsupported site bit width {b}")));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, arch: Arch) -> Result<Resolved> {
        self.validate()?;
        let base_lr = default_lr(arch);
        if self.regime == Regime::Fp32 {
            return Ok(Resolved {
                quant: QuantSpec::fp32(),
                lr: self.lr.unwrap_or(base_lr),
                dropout: self.dropout,
                noise_rate: None,
                protection: None,
            });
        }
        let (d_ste, d_obs) = default_ste_observer(arch, self.bits);
        let ste = self.ste.unwrap_or(d_ste);
        let mut observer = match self.observer {
            Some(o) => o,
            None if self.regime == Regime::Dq => d_obs.with_percentile(),
            None => d_obs,
        };
        match self.ablation {
            Some(Ablation::DqMaskingOnly) => observer = observer.base(),
            Some(Ablation::PercentileOnly) => observer = observer.with_percentile(),
            None => {}
        }
        let mut quant = QuantSpec::new(self.bits, ste, observer);
        quant.overrides = self.site_bits.clone();
        Ok(Resolved {
            quant,
            lr: self.lr.unwrap_or(base_lr * 0.5),
            dropout: self.dropout,
            noise_rate: self.nqat.map(|n| n.noise_rate),
            protection: self.dq,
        })
    }
}
