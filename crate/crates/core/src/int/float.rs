//! Full-precision inference over the same sparse layout, used as the
//! latency baseline for the integer pipeline.

use std::time::Instant;

use rayon::prelude::*;

use super::csr::CsrAdjacency;
use super::kernels::{self, Act, Isa, PackedF32};
use super::CHUNK;
use crate::autodiff::segment_softmax_values;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::gat::LEAKY_SLOPE;
use crate::layers::{gcn_norm, Arch};
use crate::model::{Layer, Model, ModelSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum FloatLayer {
    Gcn { w: PackedF32, bias: Vec<f32> },
    Gat { w: PackedF32, heads: usize, head_dim: usize, att: [Vec<f32>; 2], bias: Vec<f32> },
    Gin { eps: f32, in_dim: usize, stages: Vec<(PackedF32, Vec<f32>)> },
}

/// Parameters of a trained model, ignoring its quantization sites.
#[derive(Clone, Debug)]
pub struct FloatModel {
    pub spec: ModelSpec,
    layers: Vec<FloatLayer>,
}

pub struct FloatGraph {
    pub num_nodes: usize,
    x: Tensor,
    looped: CsrAdjacency,
    looped_src: Vec<usize>,
    looped_dst: Vec<usize>,
    plain: CsrAdjacency,
    /// GCN normalization in CSR order.
    norm: Vec<f32>,
}

/// Rows of `width` values at a padded stride.
struct Rows {
    width: usize,
    stride: usize,
    data: Vec<f32>,
}

impl FloatModel {
    pub fn from_model(model: &Model) -> Result<Self> {
        if model.readout.is_some() {
            return Err(Error::Unsupported("graph-level readouts are not supported by the inference engine".into()));
        }
        let p = |i: usize| &model.params[i].value;
        let bias = |b: Option<usize>, n: usize| b.map(|b| p(b).data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let pack = |i: usize| PackedF32::pack(p(i).rows(), p(i).cols(), p(i).data());
        let layers = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Gcn(g) => FloatLayer::Gcn { w: pack(g.weight), bias: bias(g.bias, g.out_dim) },
                Layer::Gat(g) => FloatLayer::Gat {
                    w: pack(g.weight),
                    heads: g.heads,
                    head_dim: g.head_dim,
                    att: [p(g.att_src).data().to_vec(), p(g.att_dst).data().to_vec()],
                    bias: bias(g.bias, g.out_dim()),
                },
                Layer::Gin(g) => FloatLayer::Gin {
                    eps: p(g.eps).item(),
                    in_dim: g.in_dim,
                    stages: g.mlp.iter().map(|&(w, b)| (pack(w), bias(b, p(w).cols()))).collect(),
                },
            })
            .collect();
        Ok(Self { spec: model.spec.clone(), layers })
    }

    pub fn bind(&self, graph: &Graph) -> Result<FloatGraph> {
        if graph.num_features() != self.spec.in_dim {
            return Err(Error::Dimension(format!(
                "model expects {} input features, graph has {}",
                self.spec.in_dim,
                graph.num_features()
            )));
        }
        let n = graph.num_nodes();
        let lg = graph.add_self_loops();
        let (ls, ld) = (lg.src().to_vec(), lg.dst().to_vec());
        let looped = CsrAdjacency::from_edges(&ls, &ld, n)?;
        let norm = looped.permute(gcn_norm(&ls, &ld, n).data(), 1);
        let plain = CsrAdjacency::from_edges(graph.src(), graph.dst(), n)?;
        Ok(FloatGraph { num_nodes: n, x: graph.x().clone(), looped, looped_src: ls, looped_dst: ld, plain, norm })
    }

    pub fn forward(&self, g: &FloatGraph, isa: Isa, mut timings: Option<&mut Vec<f64>>) -> Result<Tensor> {
        let n = g.num_nodes;
        let mut x = Rows { width: g.x.cols(), stride: g.x.cols(), data: g.x.data().to_vec() };
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let t = Instant::now();
            let act = match (l == last, self.spec.arch) {
                (true, _) => Act::None,
                (false, Arch::Gat) => Act::Elu,
                (false, _) => Act::Relu,
            };
            x = match layer {
                FloatLayer::Gcn { w, bias } => {
                    let h = dense(isa, &x, w, n);
                    spmm(isa, &g.looped, &g.norm, 1, w.n, &h, n, bias, act)
                }
                FloatLayer::Gat { w, heads, head_dim, att, bias } => {
                    let h = dense(isa, &x, w, n);
                    let alpha = attention(g, &h, *heads, *head_dim, att);
                    spmm(isa, &g.looped, &alpha, *heads, *head_dim, &h, n, bias, act)
                }
                FloatLayer::Gin { eps, in_dim, stages } => {
                    let width = *in_dim;
                    let mut h = Rows { width, stride: width, data: vec![0.0; n * width] };
                    let scale = 1.0 + eps;
                    h.data.par_chunks_mut(CHUNK * width).enumerate().for_each(|(ci, chunk)| {
                        let rows = ci * CHUNK..ci * CHUNK + chunk.len() / width;
                        let r0 = rows.start;
                        kernels::sum_f32(isa, &g.plain.row_ptr, &g.plain.col_idx, width, &x.data, x.stride, rows, chunk, width);
                        for (r, out) in chunk.chunks_mut(width).enumerate() {
                            let xr = &x.data[(r0 + r) * x.stride..(r0 + r) * x.stride + width];
                            for (o, &v) in out.iter_mut().zip(xr) {
                                *o += scale * v;
                            }
                        }
                    });
                    for (i, (w, b)) in stages.iter().enumerate() {
                        let stage_act = if i + 1 == stages.len() { act } else { Act::Relu };
                        let mut o = dense(isa, &h, w, n);
                        let (width, stride) = (o.width, o.stride);
                        o.data.par_chunks_mut(CHUNK * stride).for_each(|chunk| {
                            kernels::bias_act_f32(isa, chunk, chunk.len() / stride, width, stride, b, stage_act);
                        });
                        h = o;
                    }
                    h
                }
            };
            if let Some(t_ms) = timings.as_deref_mut() {
                t_ms.push(t.elapsed().as_secs_f64() * 1e3);
            }
        }
        let mut out = Tensor::zeros(n, x.width);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&x.data[i * x.stride..i * x.stride + x.width]);
        }
        Ok(out)
    }

    pub fn predict(&self, graph: &Graph) -> Result<Tensor> {
        let g = self.bind(graph)?;
        self.forward(&g, Isa::detect(), None)
    }
}

fn dense(isa: Isa, x: &Rows, w: &PackedF32, n: usize) -> Rows {
    let mut out = vec![0.0f32; n * w.np];
    out.par_chunks_mut(CHUNK * w.np).enumerate().for_each(|(ci, chunk)| {
        let r0 = ci * CHUNK;
        kernels::dense_f32(isa, &x.data[r0 * x.stride..], x.stride, chunk.len() / w.np, w, chunk);
    });
    Rows { width: w.n, stride: w.np, data: out }
}

#[allow(clippy::too_many_arguments)]
fn spmm(isa: Isa, csr: &CsrAdjacency, vals: &[f32], heads: usize, block: usize, h: &Rows, n: usize, bias: &[f32], act: Act) -> Rows {
    let width = heads * block;
    let stride = h.stride;
    let mut out = vec![0.0f32; n * stride];
    out.par_chunks_mut(CHUNK * stride).enumerate().for_each(|(ci, chunk)| {
        let rows = ci * CHUNK..ci * CHUNK + chunk.len() / stride;
        let count = rows.len();
        kernels::spmm_f32(isa, &csr.row_ptr, &csr.col_idx, vals, heads, block, &h.data, stride, rows, chunk, stride);
        kernels::bias_act_f32(isa, chunk, count, width, stride, bias, act);
    });
    Rows { width, stride, data: out }
}

/// Softmax-normalized attention per CSR entry and head.
fn attention(g: &FloatGraph, h: &Rows, heads: usize, head_dim: usize, att: &[Vec<f32>; 2]) -> Vec<f32> {
    let n = g.num_nodes;
    let scores: Vec<Vec<f32>> = att
        .iter()
        .map(|a| {
            let mut out = vec![0.0f32; n * heads];
            for i in 0..n {
                let row = &h.data[i * h.stride..i * h.stride + h.width];
                for hd in 0..heads {
                    let r = hd * head_dim..(hd + 1) * head_dim;
                    out[i * heads + hd] = row[r.clone()].iter().zip(&a[r]).map(|(x, w)| x * w).sum();
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
            logits.set(k, hd, if v > 0.0 { v } else { v * LEAKY_SLOPE });
        }
    }
    let alpha = segment_softmax_values(&logits, &g.looped_dst, n);
    g.looped.permute(alpha.data(), heads)
}
