//! Message-passing layers with quantization hooks on every intermediate
//! tensor.
//!
//! Each layer owns a [`SiteSet`]: named [`QuantModule`]s keyed by the
//! position they sit at in the layer pipeline. Activation sites can be
//! applied row-wise under a protection mask; protected rows pass through at
//! full precision and are hidden from the site's observer.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Index, Var};
use crate::error::{Error, Result};
use crate::graph::{EdgeIndex, Graph};
use crate::quant::{ObserverKind, QuantConfig, QuantModule, Ste};
use crate::tensor::Tensor;

pub mod gat;
pub mod gcn;
pub mod gin;
pub mod readout;

/// Named positions in a layer where a tensor is quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Inputs,
    Weights,
    Features,
    Norm,
    Attention,
    Message,
    Aggregate,
    Update,
}

impl SiteKind {
    pub const ALL: [SiteKind; 8] = [
        SiteKind::Inputs,
        SiteKind::Weights,
        SiteKind::Features,
        SiteKind::Norm,
        SiteKind::Attention,
        SiteKind::Message,
        SiteKind::Aggregate,
        SiteKind::Update,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::Inputs => "inputs",
            SiteKind::Weights => "weights",
            SiteKind::Features => "features",
            SiteKind::Norm => "norm",
            SiteKind::Attention => "attention",
            SiteKind::Message => "message",
            SiteKind::Aggregate => "aggregate",
            SiteKind::Update => "update",
        }
    }

    /// Sites present in a given architecture.
    pub fn for_arch(arch: Arch) -> Vec<SiteKind> {
        SiteKind::ALL
            .into_iter()
            .filter(|k| match k {
                SiteKind::Norm => arch == Arch::Gcn,
                SiteKind::Attention => arch == Arch::Gat,
                _ => true,
            })
            .collect()
    }

    pub fn is_weight(self) -> bool {
        self == SiteKind::Weights
    }
}

impl std::fmt::Display for SiteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SiteKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SiteKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown quantization site {s:?}")))
    }
}

/// Site family of a site key: `bias`, `att_src` and `weights.1` belong to
/// the weights family, `features.1` to features.
pub fn site_family(key: &str) -> Result<SiteKind> {
    let head = key.split('.').next().unwrap_or(key);
    match head {
        "bias" | "att_src" | "att_dst" => Ok(SiteKind::Weights),
        other => other.parse(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gcn,
    Gat,
    Gin,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Gcn => "gcn",
            Arch::Gat => "gat",
            Arch::Gin => "gin",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Arch::Gcn),
            "gat" => Ok(Arch::Gat),
            "gin" => Ok(Arch::Gin),
            _ => Err(Error::Config(format!("unknown architecture {s:?}"))),
        }
    }
}

/// How quantization sites are configured for a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub ste: Ste,
    pub observer: ObserverKind,
    /// Per-family bit-width overrides.
    #[serde(default)]
    pub overrides: BTreeMap<SiteKind, u32>,
}

impl QuantSpec {
    pub fn fp32() -> Self {
        Self { bits: crate::quant::BYPASS_BITS, ste: Ste::Vanilla, observer: ObserverKind::MinMax, overrides: BTreeMap::new() }
    }

    pub fn new(bits: u32, ste: Ste, observer: ObserverKind) -> Self {
        Self { bits, ste, observer, overrides: BTreeMap::new() }
    }

    /// Weights track their range without percentile clipping.
    pub fn config_for(&self, family: SiteKind) -> QuantConfig {
        let bits = self.overrides.get(&family).copied().unwrap_or(self.bits);
        if family.is_weight() {
            QuantConfig::weight(bits, self.ste, self.observer.base())
        } else {
            QuantConfig::activation(bits, self.ste, self.observer)
        }
    }

    pub fn is_fp32(&self) -> bool {
        self.bits >= crate::quant::BYPASS_BITS && self.overrides.values().all(|&b| b >= crate::quant::BYPASS_BITS)
    }
}

/// Quantization modules of one layer, by site key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteSet {
    pub sites: BTreeMap<String, QuantModule>,
}

impl SiteSet {
    pub fn build(keys: &[String], spec: &QuantSpec) -> Result<Self> {
        let mut sites = BTreeMap::new();
        for k in keys {
            let cfg = spec.config_for(site_family(k)?);
            cfg.validate()?;
            sites.insert(k.clone(), QuantModule::new(cfg));
        }
        Ok(Self { sites })
    }

    pub fn get(&self, key: &str) -> Result<&QuantModule> {
        self.sites.get(key).ok_or_else(|| Error::Contract(format!("layer has no site {key:?}")))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut QuantModule> {
        self.sites.get_mut(key).ok_or_else(|| Error::Contract(format!("layer has no site {key:?}")))
    }
}

/// Observes intermediate tensors (before quantization) during a forward pass.
pub trait Probe {
    fn record(&mut self, layer: usize, site: &str, value: &Tensor, row_mask: Option<&[bool]>);
}

/// Forward-pass state shared by all layers.
pub struct Ctx<'a> {
    pub training: bool,
    /// Dropout stream.
    pub rng: &'a mut ChaCha8Rng,
    /// Stream for noisy weight quantization, kept separate so that
    /// regimes which draw no noise stay in lockstep with plain QAT.
    pub noise_rng: &'a mut ChaCha8Rng,
    /// Per-element weight quantization probability (training only).
    pub noise_rate: Option<f32>,
    /// Degree-based protection (training only).
    pub protection: Option<Protection<'a>>,
    pub probe: Option<&'a mut dyn Probe>,
    /// Index of the layer currently running, for probes and diagnostics.
    pub layer: usize,
    /// First site at which a non-finite value was seen.
    pub nonfinite: Option<String>,
}

/// Mask sampling state for protected training.
pub struct Protection<'a> {
    pub rng: &'a mut ChaCha8Rng,
    /// One mask for all layers of a forward pass instead of one per layer.
    pub shared: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(training: bool, rng: &'a mut ChaCha8Rng, noise_rng: &'a mut ChaCha8Rng) -> Self {
        Self { training, rng, noise_rng, noise_rate: None, protection: None, probe: None, layer: 0, nonfinite: None }
    }

    fn check_finite(&mut self, key: &str, t: &Tensor) {
        if self.nonfinite.is_none() && !t.all_finite() {
            self.nonfinite = Some(format!("layer {} {key}", self.layer));
        }
    }
}

/// Quantizes an activation row-wise. Rows where `protect` is true pass
/// through unchanged and are excluded from the observer.
pub fn quant_act<'t>(
    x: Var<'t>,
    sites: &mut SiteSet,
    key: &str,
    protect: Option<&[bool]>,
    ctx: &mut Ctx<'_>,
) -> Result<Var<'t>> {
    let xv = x.value();
    if let Some(m) = protect {
        if m.len() != xv.rows() {
            return Err(Error::Contract(format!(
                "{key}: mask of length {} for {} rows",
                m.len(),
                xv.rows()
            )));
        }
    }
    if ctx.training {
        ctx.check_finite(key, &xv);
    }
    let layer = ctx.layer;
    if let Some(p) = ctx.probe.as_deref_mut() {
        p.record(layer, key, &xv, protect);
    }
    let qm = sites.get_mut(key)?;
    if qm.is_bypass() {
        return Ok(x);
    }
    let cols = xv.cols();
    if ctx.training {
        match protect {
            None => qm.observe(xv.data()),
            Some(m) => {
                let vals: Vec<f32> = (0..xv.rows()).filter(|&i| !m[i]).flat_map(|i| xv.row(i).iter().copied()).collect();
                qm.observe(&vals);
            }
        }
    }
    if !qm.initialized {
        return Ok(x);
    }
    let qp = qm.qparams()?;
    let clip = qm.config.ste == Ste::GradClip;
    let mut out = (*xv).clone();
    let mut pass = if clip { Some(vec![true; xv.len()]) } else { None };
    for i in 0..xv.rows() {
        if protect.is_some_and(|m| m[i]) {
            continue;
        }
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            if let Some(p) = pass.as_mut() {
                p[i * cols + j] = qp.in_range(*v);
            }
            *v = qp.fake(*v);
        }
    }
    x.straight_through(out, pass)
}

/// Quantizes a parameter tensor. In training with a noise rate each element
/// is quantized with that probability and otherwise kept at full precision.
pub fn quant_param<'t>(w: Var<'t>, sites: &mut SiteSet, key: &str, ctx: &mut Ctx<'_>) -> Result<Var<'t>> {
    let wv = w.value();
    let qm = sites.get_mut(key)?;
    if qm.is_bypass() {
        return Ok(w);
    }
    if ctx.training {
        qm.observe(wv.data());
    }
    if !qm.initialized {
        return Ok(w);
    }
    let qp = qm.qparams()?;
    let clip = qm.config.ste == Ste::GradClip;
    let noise = if ctx.training { ctx.noise_rate } else { None };
    let mut out = (*wv).clone();
    let mut pass = if clip { Some(vec![true; wv.len()]) } else { None };
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        if let Some(rate) = noise {
            if ctx.noise_rng.random::<f32>() >= rate {
                continue;
            }
        }
        if let Some(p) = pass.as_mut() {
            p[j] = qp.in_range(*v);
        }
        *v = qp.fake(*v);
    }
    w.straight_through(out, pass)
}

/// Graph structure precomputed once per graph (or batch) for the layers.
#[derive(Clone)]
pub struct Prepared {
    pub num_nodes: usize,
    pub x: Tensor,
    /// Edges as given (used by GIN).
    pub plain: EdgeIndex,
    /// Edges plus a self-loop for every node lacking one (GCN, GAT).
    pub looped: EdgeIndex,
    /// Symmetric normalization `1/sqrt(d_src d_dst)` per looped edge.
    pub gcn_norm: Tensor,
    pub probs: Option<Vec<f32>>,
    /// Node-to-graph assignment for graph-level tasks.
    pub batch: Option<(Index, usize)>,
}

impl Prepared {
    pub fn new(graph: &Graph) -> Self {
        let looped_graph = graph.add_self_loops();
        let gcn_norm = gcn_norm(looped_graph.src(), looped_graph.dst(), graph.num_nodes());
        Self {
            num_nodes: graph.num_nodes(),
            x: graph.x().clone(),
            plain: graph.index(),
            looped: looped_graph.index(),
            gcn_norm,
            probs: graph.prob_mask().map(|p| p.to_vec()),
            batch: None,
        }
    }

    pub fn with_batch(mut self, batch: &[usize], num_graphs: usize) -> Self {
        self.batch = Some((Rc::from(batch), num_graphs));
        self
    }
}

/// `1/sqrt(d_src * d_dst)` per edge, with `d` the in-degree over the given
/// (self-looped) edge list.
pub fn gcn_norm(src: &[usize], dst: &[usize], n: usize) -> Tensor {
    let deg = crate::graph::compute_in_degree(dst, n);
    let data = src
        .iter()
        .zip(dst)
        .map(|(&s, &t)| {
            let d = (deg[s] as f64) * (deg[t] as f64);
            if d > 0.0 {
                (1.0 / d.sqrt()) as f32
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(src.len(), 1, data).expect("sized")
}

/// Per-edge protection inherited from the source node.
pub fn edge_mask(node_mask: &[bool], src: &[usize]) -> Vec<bool> {
    src.iter().map(|&s| node_mask[s]).collect()
}

/// Glorot-uniform initialization.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;

    fn spec8() -> QuantSpec {
        QuantSpec::new(8, Ste::Vanilla, ObserverKind::MinMax)
    }

    #[test]
    fn gcn_norm_examples() {
        // isolated node with self-loop
        let n = gcn_norm(&[0], &[0], 1);
        assert_eq!(n.data(), &[1.0]);
        // path 0->1 plus self-loops
        let n = gcn_norm(&[0, 0, 1], &[1, 0, 1], 2);
        assert!((n.get(0, 0) - 1.0 / 2f32.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn site_vocabulary() {
        assert_eq!(SiteKind::for_arch(Arch::Gcn).len(), 7);
        assert!(SiteKind::for_arch(Arch::Gat).contains(&SiteKind::Attention));
        assert!(!SiteKind::for_arch(Arch::Gin).contains(&SiteKind::Norm));
        assert_eq!(site_family("bias").unwrap(), SiteKind::Weights);
        assert_eq!(site_family("features.1").unwrap(), SiteKind::Features);
        assert!("bogus".parse::<SiteKind>().is_err());
    }

    #[test]
    fn protected_rows_pass_through_and_are_not_observed() {
        let mut sites = SiteSet::build(&["inputs".to_string()], &spec8()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut nrng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = Ctx::new(true, &mut rng, &mut nrng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[0.123f32, 0.5], [100.0, -50.0]]).unwrap());
        let y = quant_act(x, &mut sites, "inputs", Some(&[false, true]), &mut ctx).unwrap();
        let qm = sites.get("inputs").unwrap();
        assert_eq!(qm.x_max, 0.5);
        assert_eq!(y.value().row(1), &[100.0, -50.0]);
        assert_ne!(y.value().get(0, 0), 0.123);
    }

    #[test]
    fn mask_length_is_checked() {
        let mut sites = SiteSet::build(&["inputs".to_string()], &spec8()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut nrng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = Ctx::new(true, &mut rng, &mut nrng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(3, 2));
        assert!(matches!(quant_act(x, &mut sites, "inputs", Some(&[true]), &mut ctx), Err(Error::Contract(_))));
    }

    #[test]
    fn noise_rate_controls_quantized_fraction() {
        let mut sites = SiteSet::build(&["weights".to_string()], &spec8()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut nrng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = Ctx::new(true, &mut rng, &mut nrng);
        ctx.noise_rate = Some(0.7);
        let tape = Tape::new();
        let n = 1_000_000;
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::from_vec(1, n, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
        let wv = tape.param(w.clone());
        let q = quant_param(wv, &mut sites, "weights", &mut ctx).unwrap();
        let qp = sites.get("weights").unwrap().qparams().unwrap();
        // elements already on the grid are ambiguous; count those that moved
        let on_grid = w.data().iter().filter(|&&v| qp.fake(v) == v).count();
        let changed = q.value().data().iter().zip(w.data()).filter(|(a, b)| a != b).count();
        let frac = changed as f64 / (n - on_grid) as f64;
        assert!((frac - 0.7).abs() < 0.002, "{frac}");
    }
}
