//! Experiment drivers behind the command line: repeated training runs, the
//! STE/observer sweep, aggregation statistics on star graphs, single-site
//! 4-bit degradation, protection ablations and observer range traces.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{
    citation_surrogate, gen_synthetic_with, load_named, random_features, read_graph_json, FeatureInit, Graph, GraphKind,
    SurrogateConfig,
};
use crate::layers::{Arch, Ctx, Prepared, Probe, QuantSpec, SiteKind};
use crate::model::{Model, ModelSpec};
use crate::quant::{ObserverKind, QuantConfig, QuantModule, Ste};
use crate::tensor::Tensor;
use crate::train::{train_node, train_node_with, Ablation, Hooks, Regime, RunMetrics, TrainConfig, Trained};

/// `cora` and `citeseer` load from the data directory, `surrogate` builds
/// the synthetic citation graph, anything else is read as a graph JSON file.
pub fn load_dataset(name: &str, seed: u64) -> Result<Graph> {
    match name {
        "cora" | "citeseer" => Ok(load_named(name)?.graph),
        "surrogate" => citation_surrogate(&SurrogateConfig::default(), seed),
        path => read_graph_json(Path::new(path)),
    }
}

/// Mean and sample standard deviation, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

pub fn summarize(accuracies: &[f64]) -> Summary {
    let n = accuracies.len();
    let pct: Vec<f64> = accuracies.iter().map(|a| a * 100.0).collect();
    let mean = pct.iter().sum::<f64>() / n.max(1) as f64;
    let var = if n > 1 { pct.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    Summary { mean, std: var.sqrt(), runs: n }
}

/// Trains `runs` models with seeds `config.seed + r` on `threads` workers.
/// Results are ordered by seed whatever the scheduling.
pub fn repeat_runs(graph: &Graph, spec: &ModelSpec, config: &TrainConfig, runs: usize, threads: usize) -> Result<Vec<RunMetrics>> {
    Ok(repeat_training(graph, spec, config, runs, threads)?.into_iter().map(|t| t.metrics).collect())
}

pub fn repeat_training(graph: &Graph, spec: &ModelSpec, config: &TrainConfig, runs: usize, threads: usize) -> Result<Vec<Trained>> {
    if runs == 0 {
        return Err(Error::Config("at least one run is needed".into()));
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {threads}-thread pool: {e}")))?;
    pool.install(|| {
        (0..runs as u64)
            .into_par_iter()
            .map(|r| {
                let mut c = config.clone();
                c.seed = config.seed + r;
                train_node(graph, spec.clone(), &c)
            })
            .collect()
    })
}

pub fn test_summary(metrics: &[RunMetrics]) -> Summary {
    summarize(&metrics.iter().map(|m| m.test_acc).collect::<Vec<_>>())
}

// ---------------------------------------------------------------------------
// STE / observer sweep

pub const STE_CONFIGS: [(Ste, ObserverKind); 4] = [
    (Ste::Vanilla, ObserverKind::MinMax),
    (Ste::Vanilla, ObserverKind::Momentum),
    (Ste::GradClip, ObserverKind::MinMax),
    (Ste::GradClip, ObserverKind::Momentum),
];

pub const MIN_SWEEP_RUNS: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct SteRow {
    pub ste: Ste,
    pub observer: ObserverKind,
    pub bits: u32,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Plain QAT under each STE/observer pair. `base` supplies epochs, seed and
/// the remaining settings; its regime is replaced by QAT.
pub fn sweep_ste(graph: &Graph, arch: Arch, bits: u32, base: &TrainConfig, runs: usize, threads: usize) -> Result<Vec<SteRow>> {
    if runs < MIN_SWEEP_RUNS {
        return Err(Error::Config(format!("the STE sweep needs at least {MIN_SWEEP_RUNS} runs, got {runs}")));
    }
    let spec = ModelSpec::citation(arch, graph.num_features(), graph.num_classes());
    STE_CONFIGS
        .iter()
        .map(|&(ste, observer)| {
            let mut c = base.clone();
            c.regime = Regime::Qat;
            c.dq = None;
            c.nqat = None;
            c.ablation = None;
            c.bits = bits;
            c.ste = Some(ste);
            c.observer = Some(observer);
            let s = test_summary(&repeat_runs(graph, &spec, &c, runs, threads)?);
            Ok(SteRow { ste, observer, bits, mean: s.mean, std: s.std, runs })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Aggregation statistics

#[derive(Clone, Debug)]
pub struct AggregationOptions {
    /// Hub in-degrees of the star graphs.
    pub degrees: Vec<usize>,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for AggregationOptions {
    fn default() -> Self {
        Self { degrees: vec![4, 16, 64, 256], resamples: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AggregationRow {
    pub arch: Arch,
    pub in_degree: usize,
    /// Mean over channels of the absolute per-channel mean.
    pub channel_mean: f64,
    /// Mean over channels of the per-channel variance.
    pub channel_variance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AggregationReport {
    pub arch: Arch,
    pub rows: Vec<AggregationRow>,
    /// Least-squares slope of `ln channel_mean` against `ln in_degree`.
    pub slope: f64,
}

/// Untrained full-precision two-layer model with 16 input features.
pub fn random_fp32_model(arch: Arch, seed: u64) -> Result<Model> {
    let spec = ModelSpec { dropout: 0.0, att_dropout: 0.0, ..ModelSpec::citation(arch, 16, 16) };
    Model::new(spec, QuantSpec::fp32(), seed)
}

/// Eval-mode forward pass reporting every site to `probe`.
pub fn probe_forward(model: &mut Model, prep: &Prepared, probe: &mut dyn Probe) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nrng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::new(false, &mut rng, &mut nrng);
    ctx.probe = Some(probe);
    let tape = Tape::new();
    let out = model.forward(&tape, prep, &mut ctx)?;
    Ok(out.logits.value().as_ref().clone())
}

/// Copies one row of one site.
struct RowProbe {
    layer: usize,
    site: &'static str,
    row: usize,
    value: Option<Vec<f32>>,
}

impl Probe for RowProbe {
    fn record(&mut self, layer: usize, site: &str, value: &Tensor, _row_mask: Option<&[bool]>) {
        if layer == self.layer && site == self.site {
            self.value = Some(value.row(self.row).to_vec());
        }
    }
}

pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Values of the first layer's aggregate at the hub of star graphs, over
/// independent uniform feature draws.
pub fn analyze_aggregation(model: &Model, opts: &AggregationOptions) -> Result<AggregationReport> {
    if !model.quant.is_fp32() {
        return Err(Error::Config("aggregation statistics are collected on full-precision models".into()));
    }
    if opts.degrees.len() < 2 || opts.resamples < 2 || opts.degrees.contains(&0) {
        return Err(Error::Config("need at least two positive degrees and two resamples".into()));
    }
    let f = model.spec.in_dim;
    let arch = model.spec.arch;
    let mut model = model.clone();
    let mut rows = Vec::with_capacity(opts.degrees.len());
    for &deg in &opts.degrees {
        let star = gen_synthetic_with(GraphKind::Star, deg + 1, 0.0, opts.seed, f, FeatureInit::Uniform)?;
        let mut samples: Vec<Vec<f32>> = Vec::with_capacity(opts.resamples);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((deg as u64) << 32));
        for _ in 0..opts.resamples {
            let g = star.clone().with_features(random_features(deg + 1, f, FeatureInit::Uniform, &mut rng))?;
            let mut probe = RowProbe { layer: 0, site: "aggregate", row: 0, value: None };
            probe_forward(&mut model, &Prepared::new(&g), &mut probe)?;
            samples.push(probe.value.ok_or_else(|| Error::Contract("first layer has no aggregate site".into()))?);
        }
        let width = samples[0].len();
        let r = samples.len() as f64;
        let (mut mean_abs, mut var) = (0.0, 0.0);
        for c in 0..width {
            let m = samples.iter().map(|s| s[c] as f64).sum::<f64>() / r;
            let v = samples.iter().map(|s| (s[c] as f64 - m).powi(2)).sum::<f64>() / (r - 1.0);
            mean_abs += m.abs();
            var += v;
        }
        rows.push(AggregationRow {
            arch,
            in_degree: deg,
            channel_mean: mean_abs / width as f64,
            channel_variance: var / width as f64,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.in_degree as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.channel_mean).collect();
    Ok(AggregationReport { arch, slope: log_log_slope(&x, &y), rows })
}

// ---------------------------------------------------------------------------
// Single-site degradation

#[derive(Clone, Debug, Serialize)]
pub struct DegradeRow {
    pub arch: Arch,
    /// `None` for the all-8-bit baseline.
    pub site: Option<SiteKind>,
    pub site_bits: u32,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

pub const DEGRADE_BITS: u32 = 4;

/// Plain 8-bit QAT with one site family dropped to 4 bits, trained from
/// scratch. `site = None` trains the unmodified 8-bit baseline.
pub fn degrade(graph: &Graph, arch: Arch, site: Option<SiteKind>, base: &TrainConfig, runs: usize, threads: usize) -> Result<DegradeRow> {
    if let Some(s) = site {
        if !SiteKind::for_arch(arch).contains(&s) {
            return Err(Error::Config(format!("{arch} layers have no {s} site")));
        }
    }
    let mut c = base.clone();
    c.regime = Regime::Qat;
    c.dq = None;
    c.nqat = None;
    c.ablation = None;
    c.bits = 8;
    c.site_bits.clear();
    if let Some(s) = site {
        c.site_bits.insert(s, DEGRADE_BITS);
    }
    let spec = ModelSpec::citation(arch, graph.num_features(), graph.num_classes());
    let s = test_summary(&repeat_runs(graph, &spec, &c, runs, threads)?);
    Ok(DegradeRow { arch, site, site_bits: if site.is_some() { DEGRADE_BITS } else { 8 }, mean: s.mean, std: s.std, runs })
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub arch: Arch,
    pub mode: Ablation,
    pub bits: u32,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Switches `base` to the regime the ablation mode belongs to.
pub fn ablation_config(base: &TrainConfig, mode: Ablation) -> TrainConfig {
    let mut c = base.clone();
    match mode {
        Ablation::DqMaskingOnly => {
            c.regime = Regime::Dq;
            c.dq = Some(base.dq.unwrap_or_default());
            c.nqat = None;
        }
        Ablation::PercentileOnly => {
            c.regime = Regime::Nqat;
            c.nqat = Some(base.nqat.unwrap_or_default());
            c.dq = None;
        }
    }
    c.ablation = Some(mode);
    c
}

pub fn ablate(graph: &Graph, arch: Arch, mode: Ablation, base: &TrainConfig, runs: usize, threads: usize) -> Result<AblationRow> {
    let c = ablation_config(base, mode);
    let spec = ModelSpec::citation(arch, graph.num_features(), graph.num_classes());
    let s = test_summary(&repeat_runs(graph, &spec, &c, runs, threads)?);
    Ok(AblationRow { arch, mode, bits: c.bits, mean: s.mean, std: s.std, runs })
}

// ---------------------------------------------------------------------------
// Observer range traces

#[derive(Clone, Debug, Serialize)]
pub struct DriftRow {
    pub step: usize,
    pub minmax_min: f32,
    pub minmax_max: f32,
    pub percentile_min: f32,
    pub percentile_max: f32,
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftTrace {
    pub rows: Vec<DriftRow>,
    /// Final percentile maximum over final min/max maximum.
    pub max_ratio: f64,
}

/// Two shadow observers fed the same stream of first-layer aggregates.
struct DriftProbe {
    minmax: QuantModule,
    percentile: QuantModule,
    rows: Vec<DriftRow>,
}

impl Probe for DriftProbe {
    fn record(&mut self, layer: usize, site: &str, value: &Tensor, row_mask: Option<&[bool]>) {
        if layer != 0 || site != "aggregate" {
            return;
        }
        let vals: Vec<f32> = match row_mask {
            None => value.data().to_vec(),
            Some(m) => (0..value.rows()).filter(|&i| !m[i]).flat_map(|i| value.row(i).iter().copied()).collect(),
        };
        self.minmax.observe(&vals);
        self.percentile.observe(&vals);
        self.rows.push(DriftRow {
            step: self.rows.len(),
            minmax_min: self.minmax.x_min,
            minmax_max: self.minmax.x_max,
            percentile_min: self.percentile.x_min,
            percentile_max: self.percentile.x_max,
        });
    }
}

/// Trains with `config` and traces how a min/max and a percentile observer
/// would track the first layer's aggregate over the run.
pub fn range_drift(graph: &Graph, arch: Arch, config: &TrainConfig) -> Result<DriftTrace> {
    let bits = config.bits.min(16);
    let mut probe = DriftProbe {
        minmax: QuantModule::new(QuantConfig::activation(bits, Ste::Vanilla, ObserverKind::MinMax)),
        percentile: QuantModule::new(QuantConfig::activation(bits, Ste::Vanilla, ObserverKind::Percentile)),
        rows: Vec::new(),
    };
    let spec = ModelSpec::citation(arch, graph.num_features(), graph.num_classes());
    train_node_with(graph, spec, config, Hooks { probe: Some(&mut probe), on_epoch: None })?;
    let last = probe.rows.last().ok_or_else(|| Error::Contract("no training step reached the aggregate site".into()))?;
    let max_ratio = last.percentile_max as f64 / last.minmax_max as f64;
    Ok(DriftTrace { rows: probe.rows, max_ratio })
}
