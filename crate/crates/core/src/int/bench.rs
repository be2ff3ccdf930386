//! Latency benchmark of the integer pipeline against full precision.

use std::time::Instant;

use serde::Serialize;

use super::float::FloatModel;
use super::kernels::Isa;
use super::{lower, IntModel};
use crate::error::{Error, Result};
use crate::graph::{gen_synthetic_with, FeatureInit, Graph, GraphKind};
use crate::layers::{Arch, Prepared, QuantSpec};
use crate::model::{Model, ModelSpec, Task};
use crate::quant::{ObserverKind, Ste};

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
    /// Median per-layer time.
    pub layer_median_ms: Vec<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Runs `f` `warmup` times untimed, then `reps` times timed. `f` pushes
/// per-layer milliseconds into its argument.
pub fn measure(reps: usize, warmup: usize, mut f: impl FnMut(&mut Vec<f64>) -> Result<()>) -> Result<LatencyStats> {
    if reps < MIN_REPS || warmup < MIN_WARMUP {
        return Err(Error::Config(format!("benchmark needs reps >= {MIN_REPS} and warmup >= {MIN_WARMUP}")));
    }
    let mut scratch = Vec::new();
    for _ in 0..warmup {
        scratch.clear();
        f(&mut scratch)?;
    }
    let mut totals = Vec::with_capacity(reps);
    let mut layers: Vec<Vec<f64>> = Vec::new();
    for _ in 0..reps {
        scratch.clear();
        let t = Instant::now();
        f(&mut scratch)?;
        totals.push(t.elapsed().as_secs_f64() * 1e3);
        layers.resize(scratch.len(), Vec::new());
        for (acc, &v) in layers.iter_mut().zip(&scratch) {
            acc.push(v);
        }
    }
    let sort = |v: &mut Vec<f64>| v.sort_by(|a, b| a.total_cmp(b));
    sort(&mut totals);
    let layer_median_ms = layers
        .iter_mut()
        .map(|v| {
            sort(v);
            percentile(v, 0.5)
        })
        .collect();
    Ok(LatencyStats {
        median_ms: percentile(&totals, 0.5),
        p95_ms: percentile(&totals, 0.95),
        mean_ms: totals.iter().sum::<f64>() / reps as f64,
        min_ms: totals[0],
        layer_median_ms,
    })
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    /// Kernel variant; detected when unset.
    pub isa: Option<Isa>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { reps: MIN_REPS, warmup: MIN_WARMUP, threads: 1, isa: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchResult {
    pub graph: String,
    pub arch: Arch,
    pub precision: String,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Full-precision median over this median.
    pub speedup: f64,
    pub threads: usize,
    pub reps: usize,
    pub warmup: usize,
    pub isa: Isa,
    pub nodes: usize,
    pub edges: usize,
    pub stats: LatencyStats,
}

/// Times full forward passes of the lowered model and of the same
/// parameters in full precision. Returns `[fp32, int8]`.
pub fn benchmark(model: &Model, graph: &Graph, graph_name: &str, opts: &BenchOptions) -> Result<[BenchResult; 2]> {
    let int = lower(model)?;
    let float = FloatModel::from_model(model)?;
    benchmark_models(&float, &int, graph, graph_name, opts)
}

pub fn benchmark_models(
    float: &FloatModel,
    int: &IntModel,
    graph: &Graph,
    graph_name: &str,
    opts: &BenchOptions,
) -> Result<[BenchResult; 2]> {
    let isa = opts.isa.unwrap_or_else(Isa::detect);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {}-thread pool: {e}", opts.threads)))?;
    let (fs, is, edges) = pool.install(|| -> Result<_> {
        let fg = float.bind(graph)?;
        let ig = int.bind(graph)?;
        let fs = measure(opts.reps, opts.warmup, |t| float.forward(&fg, isa, Some(t)).map(|_| ()))?;
        let is = measure(opts.reps, opts.warmup, |t| int.forward(&ig, isa, Some(t)).map(|_| ()))?;
        Ok((fs, is, ig.num_edges()))
    })?;
    let result = |precision: &str, stats: LatencyStats, speedup: f64| BenchResult {
        graph: graph_name.to_string(),
        arch: float.spec.arch,
        precision: precision.to_string(),
        median_ms: stats.median_ms,
        p95_ms: stats.p95_ms,
        speedup,
        threads: opts.threads.max(1),
        reps: opts.reps,
        warmup: opts.warmup,
        isa,
        nodes: graph.num_nodes(),
        edges,
        stats,
    };
    let speedup = fs.median_ms / is.median_ms;
    Ok([result("fp32", fs, 1.0), result("int8", is, speedup)])
}

/// Synthetic benchmark setup: a preferential-attachment graph with
/// standard-normal features and an 8-bit model of `layers` layers of
/// width `features`, its quantization ranges calibrated on a smaller graph
/// from the same generator.
#[derive(Clone, Debug)]
pub struct SyntheticSetup {
    pub arch: Arch,
    pub nodes: usize,
    pub features: usize,
    pub layers: usize,
    pub edges_per_node: usize,
    pub calibration_nodes: usize,
    pub seed: u64,
}

impl Default for SyntheticSetup {
    fn default() -> Self {
        Self {
            arch: Arch::Gcn,
            nodes: 100_000,
            features: 128,
            layers: 2,
            edges_per_node: 5,
            calibration_nodes: 5_000,
            seed: 0,
        }
    }
}

impl SyntheticSetup {
    pub fn build(&self) -> Result<(Model, Graph)> {
        let graph = gen_synthetic_with(
            GraphKind::PreferentialAttachment,
            self.nodes,
            self.edges_per_node as f64,
            self.seed,
            self.features,
            FeatureInit::Normal,
        )?;
        let calib = gen_synthetic_with(
            GraphKind::PreferentialAttachment,
            self.calibration_nodes.min(self.nodes),
            self.edges_per_node as f64,
            self.seed.wrapping_add(1),
            self.features,
            FeatureInit::Normal,
        )?;
        let (heads, hidden) = match self.arch {
            Arch::Gat => (8, self.features / 8),
            _ => (1, self.features),
        };
        let spec = ModelSpec {
            arch: self.arch,
            in_dim: self.features,
            hidden,
            out_dim: hidden,
            num_layers: self.layers,
            heads,
            out_heads: heads,
            dropout: 0.0,
            att_dropout: 0.0,
            bias: true,
            gin_mlp_depth: 1,
            task: Task::Node,
        };
        let mut model = Model::new(spec, QuantSpec::new(8, Ste::Vanilla, ObserverKind::MinMax), self.seed)?;
        model.calibrate(&Prepared::new(&calib), 1)?;
        Ok((model, graph))
    }
}
