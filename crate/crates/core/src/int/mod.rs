//! Integer-only inference for trained quantized models.
//!
//! [`lower`] freezes every quantization site of a trained node-level model
//! and stores weights as 8-bit codes. The integer forward pass keeps
//! activations as codes on the grid of the site they were last quantized
//! at, accumulates in 32 bits and rescales between sites with fixed-point
//! multipliers. Attention scores and their softmax are computed in float
//! and quantized afterwards; everything else is integer.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{elu, segment_softmax_values};
use crate::checkpoint::{self, Array, ArrayData};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::gat::LEAKY_SLOPE;
use crate::layers::gin::stage_key;
use crate::layers::{gcn_norm, Arch, Prepared};
use crate::model::{Layer, Model, ModelSpec, ELU_ALPHA};
use crate::quant::QParams;
use crate::tensor::Tensor;

pub mod bench;
pub mod csr;
pub mod float;
pub mod kernels;
pub mod requant;

use csr::CsrAdjacency;
use kernels::{AggUpdate, Codes, Combine, Isa, MessageArgs, MessageTables, PackedI8, Target, BIAS_FRACTION_BITS};
use requant::{code_lut, Requant, SmallMult};

pub const INT_MODEL_KIND: &str = "int_model";

/// Rows per parallel work item.
const CHUNK: usize = 64;

/// Integer codes with the grid they live on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    pub rows: usize,
    pub cols: usize,
    #[serde(skip)]
    pub codes: Vec<i8>,
    pub qp: QParams,
}

impl QTensor {
    pub fn quantize(t: &Tensor, qp: QParams) -> Self {
        let codes = t.data().iter().map(|&v| qp.quantize(v) as i8).collect();
        Self { rows: t.rows(), cols: t.cols(), codes, qp }
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self.codes.iter().map(|&c| self.qp.dequantize(c as i32)).collect();
        Tensor::from_vec(self.rows, self.cols, data).expect("sized")
    }

    fn max_abs(&self) -> i32 {
        self.codes.iter().map(|&c| (c as i32).abs()).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum LayerKind {
    Gcn,
    Gat { heads: usize, head_dim: usize },
    Gin { eps: f32, stages: usize },
}

/// One lowered layer: frozen activation grids and quantized parameters,
/// both keyed by site name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoweredLayer {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub sites: BTreeMap<String, QParams>,
    pub tensors: BTreeMap<String, QTensor>,
}

impl LoweredLayer {
    pub fn site(&self, key: &str) -> Result<QParams> {
        self.sites.get(key).copied().ok_or_else(|| Error::Contract(format!("lowered layer has no site {key:?}")))
    }

    pub fn tensor(&self, key: &str) -> Result<&QTensor> {
        self.tensors.get(key).ok_or_else(|| Error::Contract(format!("lowered layer has no tensor {key:?}")))
    }
}

/// Matrix product onto a site grid.
#[derive(Clone, Debug)]
struct DensePlan {
    w: PackedI8,
    /// Bias minus the input zero-point correction, per output column.
    add: Vec<i32>,
    target: Target,
}

#[derive(Clone, Debug)]
struct MessagePlan {
    features: QParams,
    message: QParams,
    agg_update: (Target, Vec<i32>, Target),
}

impl MessagePlan {
    /// Message grid relative to its zero point.
    fn message_range(&self) -> (i32, i32) {
        (self.message.q_min - self.message.zero_point, self.message.q_max - self.message.zero_point)
    }
}

#[derive(Clone, Debug)]
enum Plan {
    Gcn { dense: DensePlan, norm: QParams, msg: MessagePlan },
    Gat { dense: DensePlan, heads: usize, head_dim: usize, att: [(Vec<i32>, f32); 2], attention: QParams, msg: MessagePlan },
    Gin { message_lut: Vec<i8>, message_zero: i32, combine: Combine, stages: Vec<DensePlan> },
}

/// A model lowered to integer arithmetic.
#[derive(Clone, Debug)]
pub struct IntModel {
    pub spec: ModelSpec,
    pub layers: Vec<LoweredLayer>,
    /// Maps each layer's input grid from the previous layer's update grid
    /// through the inter-layer activation.
    input_luts: Vec<Option<Vec<i8>>>,
    plans: Vec<Plan>,
}

impl PartialEq for IntModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

fn check_int8(key: &str, qp: &QParams) -> Result<()> {
    if qp.q_min < -128 || qp.q_max > 127 {
        return Err(Error::Unsupported(format!(
            "site {key} uses the grid [{}, {}], which does not fit 8-bit codes",
            qp.q_min, qp.q_max
        )));
    }
    Ok(())
}

fn target(real: f64, qp: &QParams) -> Result<Target> {
    Ok(Target { rq: Requant::new(real)?, zero_point: qp.zero_point, lo: qp.q_min, hi: qp.q_max })
}

const I32_LIMIT: i64 = i32::MAX as i64;
/// 256 bytes each.
const MAX_MESSAGE_TABLES: usize = 1024;

/// `x (grid a) @ w + bias` onto grid `out`. `relu` clips at zero first.
fn dense_plan(x: &QParams, w: &QTensor, bias: Option<&QTensor>, out: &QParams, relu: bool, what: &str) -> Result<DensePlan> {
    let packed = PackedI8::pack(w.rows, w.cols, &w.codes);
    let acc_scale = x.scale as f64 * w.qp.scale as f64;
    let corr = 128 + x.zero_point;
    let mut add: Vec<i32> = packed.colsum.iter().map(|&s| -corr * s).collect();
    let mut bias_max = 0i64;
    if let Some(b) = bias {
        for (a, v) in add.iter_mut().zip(b.dequantize().data()) {
            let bi = (*v as f64 / acc_scale).round() as i64;
            if bi.abs() > I32_LIMIT / 4 {
                return Err(Error::Overflow(format!("{what}: bias {v} is too large for the accumulator scale")));
            }
            bias_max = bias_max.max(bi.abs());
            *a += bi as i32;
        }
    }
    // |sum (x - z) w| <= k * 255 * max|w|, and the raw u8 product sum obeys
    // the same bound.
    let bound = w.rows as i64 * 255 * w.max_abs() as i64 + bias_max + (corr.abs() as i64) * 127 * w.rows as i64;
    if bound > I32_LIMIT {
        return Err(Error::Overflow(format!(
            "{what}: {} inputs with weights up to {} can exceed 32-bit accumulators",
            w.rows,
            w.max_abs()
        )));
    }
    let mut t = target(acc_scale / out.scale as f64, out)?;
    if relu {
        t.lo = t.lo.max(out.zero_point);
    }
    Ok(DensePlan { w: packed, add, target: t })
}

fn message_plan(layer: &LoweredLayer) -> Result<MessagePlan> {
    let message = layer.site("message")?;
    let aggregate = layer.site("aggregate")?;
    let update = layer.site("update")?;
    let agg = target(message.scale as f64 / aggregate.scale as f64, &aggregate)?;
    let upd = target(aggregate.scale as f64 / ((1u32 << BIAS_FRACTION_BITS) as f64 * update.scale as f64), &update)?;
    let bias = match layer.tensors.get("bias") {
        Some(b) => b
            .dequantize()
            .data()
            .iter()
            .map(|&v| {
                let q = (v as f64 * (1u32 << BIAS_FRACTION_BITS) as f64 / aggregate.scale as f64).round() as i64;
                if q.abs() > I32_LIMIT / 2 {
                    Err(Error::Overflow(format!("bias {v} is too large for the aggregate scale")))
                } else {
                    Ok(q as i32)
                }
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![0; layer.out_dim],
    };
    Ok(MessagePlan { features: layer.site("features")?, message, agg_update: (agg, bias, upd) })
}

fn build_plan(layer: &LoweredLayer) -> Result<Plan> {
    let inputs = layer.site("inputs")?;
    for (k, qp) in &layer.sites {
        check_int8(k, qp)?;
    }
    for (k, t) in &layer.tensors {
        check_int8(k, &t.qp)?;
    }
    match layer.kind {
        LayerKind::Gcn => {
            let dense = dense_plan(&inputs, layer.tensor("weights")?, None, &layer.site("features")?, false, "features")?;
            Ok(Plan::Gcn { dense, norm: layer.site("norm")?, msg: message_plan(layer)? })
        }
        LayerKind::Gat { heads, head_dim } => {
            let dense = dense_plan(&inputs, layer.tensor("weights")?, None, &layer.site("features")?, false, "features")?;
            let att = ["att_src", "att_dst"].map(|k| layer.tensor(k).map(|t| (t.codes.iter().map(|&c| c as i32).collect(), t.qp.scale)));
            let [a, b] = att;
            Ok(Plan::Gat {
                dense,
                heads,
                head_dim,
                att: [a?, b?],
                attention: layer.site("attention")?,
                msg: message_plan(layer)?,
            })
        }
        LayerKind::Gin { eps, stages } => {
            let message = layer.site("message")?;
            let aggregate = layer.site("aggregate")?;
            let features = layer.site("features")?;
            let message_lut = code_lut(&inputs, &message, |v| v);
            let agg = target(message.scale as f64 / aggregate.scale as f64, &aggregate)?;
            let xr = (1.0 + eps as f64) * inputs.scale as f64 / features.scale as f64;
            let ar = aggregate.scale as f64 / features.scale as f64;
            let shift = Requant::new(xr.abs().max(ar))?.shift;
            let scale = (shift as f64).exp2();
            let combine = Combine {
                aggregate: agg,
                x_zero: inputs.zero_point,
                x_mult: (xr * scale).round() as i32,
                a_mult: (ar * scale).round() as i32,
                shift,
                zero_point: features.zero_point,
                lo: features.q_min,
                hi: features.q_max,
            };
            let mut plans = Vec::with_capacity(stages);
            for i in 0..stages {
                let x = layer.site(&stage_key("features", i))?;
                let last = i + 1 == stages;
                let out = if last { layer.site("update")? } else { layer.site(&stage_key("features", i + 1))? };
                let w = layer.tensor(&stage_key("weights", i))?;
                let b = layer.tensors.get(&stage_key("bias", i));
                plans.push(dense_plan(&x, w, b, &out, !last, &stage_key("weights", i))?);
            }
            Ok(Plan::Gin { message_lut, message_zero: message.zero_point, combine, stages: plans })
        }
    }
}

/// Freezes a trained node-level model into integer form.
pub fn lower(model: &Model) -> Result<IntModel> {
    if model.quant.is_fp32() {
        return Err(Error::Unsupported("cannot lower a full-precision model; train with quantization first".into()));
    }
    if model.readout.is_some() {
        return Err(Error::Unsupported("graph-level readouts are not lowered; only node-level models are".into()));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, (layer, sites)) in model.layers.iter().zip(&model.sites).enumerate() {
        let mut frozen = BTreeMap::new();
        for (key, qm) in &sites.sites {
            if qm.is_bypass() {
                return Err(Error::Unsupported(format!("layer {l} site {key} is not quantized")));
            }
            if !qm.initialized {
                return Err(Error::Contract(format!(
                    "layer {l} site {key} has never observed data; train or calibrate the model first"
                )));
            }
            frozen.insert(key.clone(), qm.qparams()?);
        }
        let mut tensors = BTreeMap::new();
        let mut take = |key: String, slot: usize| -> Result<()> {
            let qp = frozen.remove(&key).ok_or_else(|| Error::Contract(format!("layer {l} has no site {key}")))?;
            tensors.insert(key, QTensor::quantize(&model.params[slot].value, qp));
            Ok(())
        };
        let (kind, in_dim, out_dim) = match layer {
            Layer::Gcn(g) => {
                take("weights".into(), g.weight)?;
                if let Some(b) = g.bias {
                    take("bias".into(), b)?;
                }
                (LayerKind::Gcn, g.in_dim, g.out_dim)
            }
            Layer::Gat(g) => {
                take("weights".into(), g.weight)?;
                take("att_src".into(), g.att_src)?;
                take("att_dst".into(), g.att_dst)?;
                if let Some(b) = g.bias {
                    take("bias".into(), b)?;
                }
                (LayerKind::Gat { heads: g.heads, head_dim: g.head_dim }, g.in_dim, g.out_dim())
            }
            Layer::Gin(g) => {
                for (i, &(w, b)) in g.mlp.iter().enumerate() {
                    take(stage_key("weights", i), w)?;
                    if let Some(b) = b {
                        take(stage_key("bias", i), b)?;
                    }
                }
                let eps = model.params[g.eps].value.item();
                (LayerKind::Gin { eps, stages: g.mlp.len() }, g.in_dim, g.out_dim)
            }
        };
        layers.push(LoweredLayer { kind, in_dim, out_dim, sites: frozen, tensors });
    }
    IntModel::from_layers(model.spec.clone(), layers)
}

/// Graph structure bound to a lowered model.
pub struct IntGraph {
    pub num_nodes: usize,
    pub x: Tensor,
    looped: CsrAdjacency,
    looped_src: Vec<usize>,
    looped_dst: Vec<usize>,
    plain: CsrAdjacency,
    /// Per-entry message multipliers of GCN layers, in CSR order.
    gcn_mults: Vec<Option<Vec<SmallMult>>>,
    gcn_tables: Vec<Option<MessageTables>>,
}

impl IntGraph {
    pub fn num_edges(&self) -> usize {
        self.looped.nnz()
    }
}

/// Final-layer update codes.
pub struct IntOutput {
    pub codes: Codes,
    pub qp: QParams,
}

impl IntOutput {
    pub fn dequantize(&self) -> Tensor {
        let mut t = Tensor::zeros(self.codes.rows, self.codes.cols);
        for i in 0..self.codes.rows {
            for (o, &c) in t.row_mut(i).iter_mut().zip(self.codes.row(i)) {
                *o = self.qp.dequantize(c as i32);
            }
        }
        t
    }
}

impl IntModel {
    pub fn from_layers(spec: ModelSpec, layers: Vec<LoweredLayer>) -> Result<Self> {
        if layers.len() != spec.num_layers {
            return Err(Error::Contract(format!("{} lowered layers for a {}-layer spec", layers.len(), spec.num_layers)));
        }
        let plans = layers.iter().map(build_plan).collect::<Result<Vec<_>>>()?;
        let mut input_luts = vec![None];
        for w in layers.windows(2) {
            let (prev, next) = (w[0].site("update")?, w[1].site("inputs")?);
            let lut = match spec.arch {
                Arch::Gat => code_lut(&prev, &next, |v| elu(v, ELU_ALPHA)),
                _ => code_lut(&prev, &next, |v| v.max(0.0)),
            };
            input_luts.push(Some(lut));
        }
        Ok(Self { spec, layers, input_luts, plans })
    }

    /// Precomputes the sparse structure (and GCN edge multipliers) for a
    /// graph.
    pub fn bind(&self, graph: &Graph) -> Result<IntGraph> {
        if graph.num_features() != self.spec.in_dim {
            return Err(Error::Dimension(format!(
                "model expects {} input features, graph has {}",
                self.spec.in_dim,
                graph.num_features()
            )));
        }
        let n = graph.num_nodes();
        let looped_graph = graph.add_self_loops();
        let (ls, ld) = (looped_graph.src().to_vec(), looped_graph.dst().to_vec());
        let looped = CsrAdjacency::from_edges(&ls, &ld, n)?;
        let plain = CsrAdjacency::from_edges(graph.src(), graph.dst(), n)?;
        // Each entry contributes at most 255 in magnitude.
        let deg = looped.max_row_len().max(plain.max_row_len()) as i64;
        if deg * 255 > I32_LIMIT {
            return Err(Error::Overflow(format!("in-degree {deg} can exceed 32-bit aggregation accumulators")));
        }
        let norm = gcn_norm(&ls, &ld, n);
        let mut gcn_mults = Vec::with_capacity(self.plans.len());
        let mut gcn_tables = Vec::with_capacity(self.plans.len());
        for plan in &self.plans {
            let (mults, tables) = match plan {
                Plan::Gcn { norm: nq, msg, .. } => {
                    let k = msg.features.scale as f64 / msg.message.scale as f64;
                    let per_edge = norm
                        .data()
                        .iter()
                        .map(|&v| SmallMult::new(nq.fake(v) as f64 * k))
                        .collect::<Result<Vec<_>>>()?;
                    let mults = looped.permute(&per_edge, 1);
                    let (lo, hi) = msg.message_range();
                    let tables = MessageTables::build(
                        &mults,
                        msg.features.zero_point,
                        lo,
                        hi,
                        msg.message.zero_point,
                        MAX_MESSAGE_TABLES,
                    );
                    (Some(mults), tables)
                }
                _ => (None, None),
            };
            gcn_mults.push(mults);
            gcn_tables.push(tables);
        }
        Ok(IntGraph { num_nodes: n, x: graph.x().clone(), looped, looped_src: ls, looped_dst: ld, plain, gcn_mults, gcn_tables })
    }

    pub fn output_qparams(&self) -> Result<QParams> {
        self.layers.last().expect("at least one layer").site("update")
    }

    /// Integer forward pass. `timings` receives per-layer wall-clock
    /// milliseconds.
    pub fn forward(&self, g: &IntGraph, isa: Isa, mut timings: Option<&mut Vec<f64>>) -> Result<IntOutput> {
        let n = g.num_nodes;
        let first = self.layers[0].site("inputs")?;
        let t0 = Instant::now();
        let mut x = Codes::zeros(n, self.spec.in_dim);
        let (cols, stride) = (x.cols, x.stride);
        x.data.par_chunks_mut(CHUNK * stride).enumerate().for_each(|(ci, chunk)| {
            let src = &g.x.data()[ci * CHUNK * cols..];
            kernels::quantize_rows(isa, src, cols, chunk.len() / stride, cols, &first, chunk, stride);
        });
        let mut quantize_ms = t0.elapsed().as_secs_f64() * 1e3;
        for (l, (layer, plan)) in self.layers.iter().zip(&self.plans).enumerate() {
            let t = Instant::now();
            if let Some(lut) = &self.input_luts[l] {
                let mut next = Codes::zeros(n, layer.in_dim);
                kernels::lut(isa, lut, &x.data, &mut next.data);
                x = next;
            }
            x = match plan {
                Plan::Gcn { dense, msg, .. } => {
                    let h = dense_forward(isa, &x, dense);
                    let mults = g.gcn_mults[l].as_ref().ok_or_else(|| Error::Contract("graph bound to another model".into()))?;
                    let tables = g.gcn_tables[l].as_ref().filter(|_| kernels::tables_vectorized(isa, layer.out_dim));
                    message_forward(isa, &g.looped, &h, msg, 1, layer.out_dim, mults, tables)
                }
                Plan::Gat { dense, heads, head_dim, att, attention, msg } => {
                    let h = dense_forward(isa, &x, dense);
                    let mults = attention_mults(g, &h, msg, *heads, *head_dim, att, attention)?;
                    message_forward(isa, &g.looped, &h, msg, *heads, *head_dim, &mults, None)
                }
                Plan::Gin { message_lut, message_zero, combine, stages } => {
                    let mut m = Codes::zeros(n, x.cols);
                    kernels::lut(isa, message_lut, &x.data, &mut m.data);
                    let mut h = Codes::zeros(n, x.cols);
                    let (width, stride) = (x.cols, h.stride);
                    let csr = &g.plain;
                    h.data.par_chunks_mut(CHUNK * stride).enumerate().for_each(|(ci, chunk)| {
                        let rows = ci * CHUNK..ci * CHUNK + chunk.len() / stride;
                        let mut acc = vec![0i32; rows.len() * width];
                        kernels::sum_aggregate(isa, &csr.row_ptr, &csr.col_idx, &m, *message_zero, rows.clone(), &mut acc);
                        kernels::combine_rows(isa, &acc, &x, rows, combine, chunk, stride);
                    });
                    for s in stages {
                        h = dense_forward(isa, &h, s);
                    }
                    h
                }
            };
            if let Some(t_ms) = timings.as_deref_mut() {
                t_ms.push(t.elapsed().as_secs_f64() * 1e3 + quantize_ms);
                quantize_ms = 0.0;
            }
        }
        Ok(IntOutput { codes: x, qp: self.output_qparams()? })
    }

    /// Dequantized outputs of the integer pipeline.
    pub fn predict(&self, graph: &Graph) -> Result<Tensor> {
        let g = self.bind(graph)?;
        Ok(self.forward(&g, Isa::detect(), None)?.dequantize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, t) in &layer.tensors {
                arrays.push(Array {
                    name: format!("layers.{l}.{k}"),
                    rows: t.rows,
                    cols: t.cols,
                    data: ArrayData::I8(t.codes.clone()),
                });
            }
        }
        let meta = serde_json::json!({ "spec": self.spec, "layers": self.layers });
        checkpoint::encode(INT_MODEL_KIND, meta, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (kind, meta, arrays) = checkpoint::decode(bytes)?;
        if kind != INT_MODEL_KIND {
            return Err(Error::Checkpoint(format!("expected an integer model, found {kind:?}")));
        }
        #[derive(Deserialize)]
        struct Meta {
            spec: ModelSpec,
            layers: Vec<LoweredLayer>,
        }
        let Meta { spec, mut layers } = serde_json::from_value(meta)?;
        let mut by_name: BTreeMap<String, Array> = arrays.into_iter().map(|a| (a.name.clone(), a)).collect();
        for (l, layer) in layers.iter_mut().enumerate() {
            for (k, t) in layer.tensors.iter_mut() {
                let name = format!("layers.{l}.{k}");
                let a = by_name.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
                match a.data {
                    ArrayData::I8(v) if a.rows == t.rows && a.cols == t.cols => t.codes = v,
                    _ => return Err(Error::Checkpoint(format!("array {name} has the wrong type or shape"))),
                }
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {extra}")));
        }
        Self::from_layers(spec, layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

/// Agreement between the integer pipeline and fake-quantized evaluation.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Agreement {
    /// Fraction of nodes with the same arg-max.
    pub argmax: f64,
    /// Largest output difference, in steps of the output grid.
    pub max_steps: f64,
}

pub fn agreement(model: &Model, graph: &Graph, isa: Isa) -> Result<Agreement> {
    let int = lower(model)?;
    let fake = model.clone().predict(&Prepared::new(graph))?;
    let qp = int.output_qparams()?;
    let out = int.forward(&int.bind(graph)?, isa, None)?.dequantize();
    let same = fake.argmax_rows().iter().zip(out.argmax_rows()).filter(|(a, b)| **a == *b).count();
    let max_steps = fake.data().iter().zip(out.data()).map(|(a, b)| ((a - b) / qp.scale).abs() as f64).fold(0.0, f64::max);
    Ok(Agreement { argmax: same as f64 / graph.num_nodes() as f64, max_steps })
}

fn dense_forward(isa: Isa, x: &Codes, p: &DensePlan) -> Codes {
    let mut out = Codes::zeros(x.rows, p.w.n);
    let stride = out.stride;
    out.data.par_chunks_mut(CHUNK * stride).enumerate().for_each(|(ci, chunk)| {
        let r0 = ci * CHUNK;
        let rows = chunk.len() / stride;
        let mut acc = vec![0i32; rows * p.w.np];
        kernels::dense_i8(isa, &x.data[r0 * x.stride..], x.stride, rows, &p.w, &mut acc);
        kernels::requant_rows(isa, &acc, p.w.np, rows, p.w.n, &p.add, p.target, chunk, stride);
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn message_forward(
    isa: Isa,
    csr: &CsrAdjacency,
    h: &Codes,
    msg: &MessagePlan,
    heads: usize,
    block: usize,
    mults: &[SmallMult],
    tables: Option<&MessageTables>,
) -> Codes {
    let width = heads * block;
    let mut out = Codes::zeros(h.rows, width);
    let stride = out.stride;
    let args = MessageArgs {
        row_ptr: &csr.row_ptr,
        col: &csr.col_idx,
        feat: h,
        feat_zero: msg.features.zero_point,
        heads,
        block,
        mults,
        lo: msg.message_range().0,
        hi: msg.message_range().1,
    };
    let (agg, bias, upd) = &msg.agg_update;
    let e = AggUpdate { aggregate: *agg, bias, update: *upd };
    out.data.par_chunks_mut(CHUNK * stride).enumerate().for_each(|(ci, chunk)| {
        let rows = ci * CHUNK..ci * CHUNK + chunk.len() / stride;
        let mut acc = vec![0i32; rows.len() * width];
        let count = rows.len();
        match tables {
            Some(t) => kernels::table_aggregate(isa, &csr.row_ptr, &csr.col_idx, h, t, rows, &mut acc),
            None => kernels::message_aggregate(isa, &args, rows, &mut acc),
        }
        kernels::agg_update_rows(isa, &acc, count, width, &e, chunk, stride);
    });
    out
}

/// Attention coefficients in float, then per-entry message multipliers.
fn attention_mults(
    g: &IntGraph,
    h: &Codes,
    msg: &MessagePlan,
    heads: usize,
    head_dim: usize,
    att: &[(Vec<i32>, f32); 2],
    attention: &QParams,
) -> Result<Vec<SmallMult>> {
    let n = g.num_nodes;
    let zf = msg.features.zero_point;
    let scores: Vec<Vec<f32>> = att
        .iter()
        .map(|(a, s)| {
            // Same float operations as the fake-quantized graph, so that
            // attention codes agree at low bit widths.
            let sf = msg.features.scale;
            let a: Vec<f32> = a.iter().map(|&w| w as f32 * s).collect();
            let mut out = vec![0.0f32; n * heads];
            for i in 0..n {
                let row = h.row(i);
                for hd in 0..heads {
                    let r = hd * head_dim..(hd + 1) * head_dim;
                    out[i * heads + hd] = row[r.clone()].iter().zip(&a[r]).map(|(&c, &w)| (c as i32 - zf) as f32 * sf * w).sum();
                }
            }
            out
        })
        .collect();
    let e = g.looped_src.len();
    let mut logits = Tensor::zeros(e, heads);
    for k in 0..e {
        let (s, t) = (g.looped_src[k], g.looped_dst[k]);
        for hd in 0..heads {
            let v = scores[0][s * heads + hd] + scores[1][t * heads + hd];
            let v = if v > 0.0 { v } else { v * LEAKY_SLOPE };
            logits.set(k, hd, attention.fake(v));
        }
    }
    let alpha = segment_softmax_values(&logits, &g.looped_dst, n);
    let k = msg.features.scale as f64 / msg.message.scale as f64;
    let per_edge = alpha.data().iter().map(|&a| SmallMult::new(a as f64 * k)).collect::<Result<Vec<_>>>()?;
    Ok(g.looped.permute(&per_edge, heads))
}
