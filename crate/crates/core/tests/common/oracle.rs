//! f64 reference implementations and central finite differences.

use std::collections::BTreeMap;
use std::rc::Rc;

use degree_quant::autodiff::{concat_cols, Index, Tape, Var};
use degree_quant::graph::Graph;
use degree_quant::layers::{Arch, Prepared, QuantSpec};
use degree_quant::model::{Model, ModelSpec};
use degree_quant::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-3;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Mat {
    pub fn zeros(r: usize, c: usize) -> Self {
        Self { r, c, d: vec![0.0; r * c] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self { r: t.rows(), c: t.cols(), d: t.data().iter().map(|&v| v as f64).collect() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.r, self.c, self.d.iter().map(|&v| v as f32).collect()).unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.d[i * self.c + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { r: self.r, c: self.c, d: self.d.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, o: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!((self.r, self.c), (o.r, o.c));
        Mat { r: self.r, c: self.c, d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn matmul(&self, o: &Mat) -> Mat {
        assert_eq!(self.c, o.r);
        let mut out = Mat::zeros(self.r, o.c);
        for i in 0..self.r {
            for k in 0..self.c {
                for j in 0..o.c {
                    *out.at_mut(i, j) += self.at(i, k) * o.at(k, j);
                }
            }
        }
        out
    }

    pub fn scalar(v: f64) -> Mat {
        Mat { r: 1, c: 1, d: vec![v] }
    }
}

/// Values in `[-2, 2]` at least `gap` away from zero, rounded to f32.
pub fn random_mat(r: usize, c: usize, gap: f64, rng: &mut ChaCha8Rng) -> Mat {
    let d = (0..r * c)
        .map(|_| {
            let m: f64 = rng.random_range(gap..2.0);
            let v = if rng.random::<bool>() { m } else { -m };
            v as f32 as f64
        })
        .collect();
    Mat { r, c, d }
}

/// Fixed loss weights so every output element contributes differently.
pub fn loss_weights(r: usize, c: usize) -> Mat {
    Mat { r, c, d: (0..r * c).map(|k| (1.3 * k as f64 + 0.7).sin() as f32 as f64).collect() }
}

pub fn weighted_sum(out: &Mat, w: &Mat) -> f64 {
    out.d.iter().zip(&w.d).map(|(a, b)| a * b).sum()
}

/// Central differences of `f` with respect to every input element.
pub fn central_diff(inputs: &[Mat], f: &dyn Fn(&[Mat]) -> f64) -> Vec<Mat> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for a in 0..inputs.len() {
        let mut g = Mat::zeros(inputs[a].r, inputs[a].c);
        for k in 0..inputs[a].d.len() {
            let x = inputs[a].d[k];
            work[a].d[k] = x + FD_EPS;
            let up = f(&work);
            work[a].d[k] = x - FD_EPS;
            let down = f(&work);
            work[a].d[k] = x;
            g.d[k] = (up - down) / (2.0 * FD_EPS);
        }
        grads.push(g);
    }
    grads
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(REL_FLOOR)
}

/// Largest elementwise relative error between autodiff gradients of
/// `build` and finite differences of `reference`, both under the same
/// weighted-sum loss.
pub fn primitive_error(
    inputs: &[Mat],
    build: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    reference: impl Fn(&[Mat]) -> Mat,
) -> f64 {
    let shape = reference(inputs);
    let w = loss_weights(shape.r, shape.c);
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|m| tape.param(m.to_tensor())).collect();
    let out = build(&tape, &vars);
    assert_eq!(out.shape(), (shape.r, shape.c), "autodiff and reference shapes differ");
    let loss = out.mul(&tape.constant(w.to_tensor())).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let fd = central_diff(inputs, &|xs| weighted_sum(&reference(xs), &w));
    let mut worst = 0.0f64;
    for (v, g) in vars.iter().zip(&fd) {
        let got = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.r, g.c));
        for (a, b) in got.data().iter().zip(&g.d) {
            worst = worst.max(rel_err(*a as f64, *b));
        }
    }
    worst
}

fn idx(v: &[usize]) -> Index {
    Rc::from(v)
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v * slope
    }
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

fn softmax_segments(x: &Mat, seg: &[usize], n: usize) -> Mat {
    let mut out = Mat::zeros(x.r, x.c);
    for j in 0..x.c {
        for s in 0..n {
            let rows: Vec<usize> = (0..x.r).filter(|&i| seg[i] == s).collect();
            let m = rows.iter().map(|&i| x.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = rows.iter().map(|&i| (x.at(i, j) - m).exp()).sum();
            for &i in &rows {
                *out.at_mut(i, j) = (x.at(i, j) - m).exp() / z;
            }
        }
    }
    out
}

fn cross_entropy(x: &Mat, labels: &[usize], rows: &[usize]) -> f64 {
    let mut loss = 0.0;
    for &r in rows {
        let z: f64 = (0..x.c).map(|j| x.at(r, j).exp()).sum();
        loss -= x.at(r, labels[r]) - z.ln();
    }
    loss / rows.len() as f64
}

/// Maximum relative gradient error of every differentiable primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = |r, c| random_mat(r, c, 0.0, &mut rng);
    let a34 = m(3, 4);
    let b34 = m(3, 4);
    let b42 = m(4, 2);
    let r14 = m(1, 4);
    let a36 = m(3, 6);
    let w32 = m(3, 2);
    let s11 = m(1, 1);
    let a53 = m(5, 3);
    let a62 = m(6, 2);
    let l43 = m(4, 3);
    let a32 = m(3, 2);
    let a33 = m(3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let kinked = random_mat(3, 4, 0.05, &mut rng);
    let target = kinked.zip(&random_mat(3, 4, 0.0, &mut rng), |x, t| {
        // Keep each residual at least 0.05 away from the |.| kink.
        let r = x - t;
        if r.abs() < 0.05 {
            (x - 0.1f64.copysign(r)) as f32 as f64
        } else {
            t
        }
    });

    let gather_ix = [2usize, 0, 2, 1, 0];
    let scatter_ix = [1usize, 0, 1, 3, 1];
    let seg = [0usize, 1, 0, 2, 1, 0];
    let labels = [2usize, 0, 1, 1];
    let ce_rows = [0usize, 2, 3];

    let mut out = Vec::new();
    out.push((
        "matmul",
        primitive_error(&[a34.clone(), b42.clone()], |_, v| v[0].matmul(&v[1]).unwrap(), |x| x[0].matmul(&x[1])),
    ));
    out.push((
        "add",
        primitive_error(&[a34.clone(), b34.clone()], |_, v| v[0].add(&v[1]).unwrap(), |x| x[0].zip(&x[1], |a, b| a + b)),
    ));
    out.push((
        "sub",
        primitive_error(&[a34.clone(), b34.clone()], |_, v| v[0].sub(&v[1]).unwrap(), |x| x[0].zip(&x[1], |a, b| a - b)),
    ));
    out.push((
        "mul",
        primitive_error(&[a34.clone(), b34.clone()], |_, v| v[0].mul(&v[1]).unwrap(), |x| x[0].zip(&x[1], |a, b| a * b)),
    ));
    out.push((
        "add_row",
        primitive_error(
            &[a34.clone(), r14.clone()],
            |_, v| v[0].add_row(&v[1]).unwrap(),
            |x| {
                let mut o = x[0].clone();
                for i in 0..o.r {
                    for j in 0..o.c {
                        *o.at_mut(i, j) += x[1].at(0, j);
                    }
                }
                o
            },
        ),
    ));
    out.push((
        "mul_row",
        primitive_error(
            &[a34.clone(), r14.clone()],
            |_, v| v[0].mul_row(&v[1]).unwrap(),
            |x| {
                let mut o = x[0].clone();
                for i in 0..o.r {
                    for j in 0..o.c {
                        *o.at_mut(i, j) *= x[1].at(0, j);
                    }
                }
                o
            },
        ),
    ));
    out.push((
        "mul_blocks",
        primitive_error(
            &[a36.clone(), w32.clone()],
            |_, v| v[0].mul_blocks(&v[1]).unwrap(),
            |x| {
                let mut o = x[0].clone();
                for i in 0..o.r {
                    for j in 0..o.c {
                        *o.at_mut(i, j) *= x[1].at(i, j / 3);
                    }
                }
                o
            },
        ),
    ));
    out.push((
        "block_sum",
        primitive_error(
            &[a36.clone()],
            |_, v| v[0].block_sum(3).unwrap(),
            |x| {
                let mut o = Mat::zeros(3, 3);
                for i in 0..3 {
                    for j in 0..6 {
                        *o.at_mut(i, j / 2) += x[0].at(i, j);
                    }
                }
                o
            },
        ),
    ));
    out.push(("scale", primitive_error(&[a34.clone()], |_, v| v[0].scale(-1.7), |x| x[0].map(|a| a * -1.7f32 as f64))));
    out.push((
        "mul_scalar",
        primitive_error(
            &[a34.clone(), s11.clone()],
            |_, v| v[0].mul_scalar(&v[1]).unwrap(),
            |x| x[0].map(|a| a * x[1].d[0]),
        ),
    ));
    out.push(("relu", primitive_error(&[kinked.clone()], |_, v| v[0].relu(), |x| x[0].map(|a| a.max(0.0)))));
    out.push((
        "leaky_relu",
        primitive_error(&[kinked.clone()], |_, v| v[0].leaky_relu(0.2), |x| x[0].map(|a| leaky(a, 0.2f32 as f64))),
    ));
    out.push(("elu", primitive_error(&[kinked.clone()], |_, v| v[0].elu(1.0), |x| x[0].map(elu))));
    out.push(("sum", primitive_error(&[a34.clone()], |_, v| v[0].sum(), |x| Mat::scalar(x[0].d.iter().sum()))));
    out.push((
        "mean",
        primitive_error(&[a34.clone()], |_, v| v[0].mean(), |x| Mat::scalar(x[0].d.iter().sum::<f64>() / 12.0)),
    ));
    out.push((
        "row_sum",
        primitive_error(
            &[a34.clone()],
            |_, v| v[0].row_sum(),
            |x| Mat { r: 3, c: 1, d: (0..3).map(|i| (0..4).map(|j| x[0].at(i, j)).sum()).collect() },
        ),
    ));
    out.push((
        "gather",
        primitive_error(
            &[a34.clone()],
            |_, v| v[0].gather(&idx(&gather_ix)).unwrap(),
            |x| {
                let mut o = Mat::zeros(gather_ix.len(), 4);
                for (e, &s) in gather_ix.iter().enumerate() {
                    for j in 0..4 {
                        *o.at_mut(e, j) = x[0].at(s, j);
                    }
                }
                o
            },
        ),
    ));
    out.push((
        "scatter_add",
        primitive_error(
            &[a53.clone()],
            |_, v| v[0].scatter_add(&idx(&scatter_ix), 4).unwrap(),
            |x| {
                let mut o = Mat::zeros(4, 3);
                for (e, &t) in scatter_ix.iter().enumerate() {
                    for j in 0..3 {
                        *o.at_mut(t, j) += x[0].at(e, j);
                    }
                }
                o
            },
        ),
    ));
    out.push((
        "segment_softmax",
        primitive_error(
            &[a62.clone()],
            |_, v| v[0].segment_softmax(&idx(&seg), 4).unwrap(),
            |x| softmax_segments(&x[0], &seg, 4),
        ),
    ));
    out.push((
        "cross_entropy",
        primitive_error(
            &[l43.clone()],
            |_, v| v[0].cross_entropy(&labels, &ce_rows).unwrap(),
            |x| Mat::scalar(cross_entropy(&x[0], &labels, &ce_rows)),
        ),
    ));
    let t = target.to_tensor();
    out.push((
        "l1_loss",
        primitive_error(
            &[kinked.clone()],
            |_, v| v[0].l1_loss(&t).unwrap(),
            |x| Mat::scalar(x[0].zip(&target, |a, b| (a - b).abs()).d.iter().sum::<f64>() / 12.0),
        ),
    ));
    out.push((
        "concat_cols",
        primitive_error(
            &[a32.clone(), a33.clone()],
            |_, v| concat_cols(&[v[0], v[1]]).unwrap(),
            |x| {
                let mut o = Mat::zeros(3, 5);
                for i in 0..3 {
                    for j in 0..5 {
                        *o.at_mut(i, j) = if j < 2 { x[0].at(i, j) } else { x[1].at(i, j - 2) };
                    }
                }
                o
            },
        ),
    ));
    // The dropout pattern is read back from one forward pass and replayed
    // by the reference.
    let keep = {
        let tape = Tape::new();
        let x = tape.param(a34.to_tensor());
        let y = x.dropout(0.5, true, &mut ChaCha8Rng::seed_from_u64(5)).value();
        Mat { r: 3, c: 4, d: y.data().iter().zip(&a34.d).map(|(&o, &i)| o as f64 / i).collect() }
    };
    out.push((
        "dropout",
        primitive_error(
            &[a34.clone()],
            |_, v| v[0].dropout(0.5, true, &mut ChaCha8Rng::seed_from_u64(5)),
            |x| x[0].zip(&keep, |a, k| a * k.round()),
        ),
    ));
    out
}

/// Small undirected graph with an isolated node, an explicit self-loop and
/// a hub.
pub fn toy_graph(features: usize, classes: usize, seed: u64) -> Graph {
    let undirected = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (3, 4), (4, 5)];
    let mut edges: Vec<(usize, usize)> = undirected.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    edges.push((2, 2));
    let n = 7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_mat(n, features, 0.0, &mut rng).map(|v| v * 0.5).to_tensor();
    let y = (0..n).map(|i| (i * 5 + 1) % classes).collect();
    Graph::new(n, &edges, x, y).unwrap()
}

/// Two-layer full-precision model with small dimensions and no dropout.
pub fn toy_model(arch: Arch, features: usize, classes: usize, seed: u64) -> Model {
    let mut spec = ModelSpec::citation(arch, features, classes);
    spec.dropout = 0.0;
    spec.att_dropout = 0.0;
    spec.hidden = if arch == Arch::Gat { 3 } else { 5 };
    spec.heads = 2;
    let mut model = Model::new(spec, QuantSpec::fp32(), seed).unwrap();
    // Non-zero biases and eps so their gradients are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in model.params.iter_mut() {
        if p.name.ends_with("bias") || p.name.ends_with("eps") {
            p.value = random_mat(p.value.rows(), p.value.cols(), 0.0, &mut rng).map(|v| v * 0.2).to_tensor();
        }
    }
    model
}

/// Textbook forward pass of a node-level model, written independently of
/// the layer implementations.
pub fn reference_logits(spec: &ModelSpec, params: &BTreeMap<String, Mat>, g: &Graph) -> Mat {
    let n = g.num_nodes();
    let plain: Vec<(usize, usize)> = g.edges().collect();
    let mut looped = plain.clone();
    for i in 0..n {
        if !plain.contains(&(i, i)) {
            looped.push((i, i));
        }
    }
    let mut h = Mat::from_tensor(g.x());
    for l in 0..spec.num_layers {
        let last = l + 1 == spec.num_layers;
        let p = |k: &str| &params[&format!("layers.{l}.{k}")];
        h = match spec.arch {
            Arch::Gcn => {
                let xw = h.matmul(p("weight"));
                let mut deg = vec![0.0f64; n];
                for &(_, t) in &looped {
                    deg[t] += 1.0;
                }
                let mut out = Mat::zeros(n, xw.c);
                for &(s, t) in &looped {
                    let c = 1.0 / (deg[s] * deg[t]).sqrt();
                    for j in 0..xw.c {
                        *out.at_mut(t, j) += c * xw.at(s, j);
                    }
                }
                add_bias(&mut out, p("bias"));
                out
            }
            Arch::Gat => {
                let heads = if last { spec.out_heads } else { spec.heads };
                let hw = h.matmul(p("weight"));
                let f = hw.c / heads;
                let (a_s, a_d) = (p("att_src"), p("att_dst"));
                let score = |i: usize, k: usize, a: &Mat| (0..f).map(|q| hw.at(i, k * f + q) * a.d[k * f + q]).sum::<f64>();
                let mut out = Mat::zeros(n, hw.c);
                for t in 0..n {
                    let inc: Vec<usize> = looped.iter().filter(|e| e.1 == t).map(|e| e.0).collect();
                    for k in 0..heads {
                        let e: Vec<f64> = inc.iter().map(|&s| leaky(score(s, k, a_s) + score(t, k, a_d), 0.2f32 as f64)).collect();
                        let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
                        for (&s, &v) in inc.iter().zip(&e) {
                            let alpha = (v - m).exp() / z;
                            for q in 0..f {
                                *out.at_mut(t, k * f + q) += alpha * hw.at(s, k * f + q);
                            }
                        }
                    }
                }
                add_bias(&mut out, p("bias"));
                out
            }
            Arch::Gin => {
                let eps = p("eps").d[0];
                let mut agg = h.map(|v| (1.0 + eps) * v);
                for &(s, t) in &plain {
                    for j in 0..h.c {
                        *agg.at_mut(t, j) += h.at(s, j);
                    }
                }
                let mut out = agg.matmul(p("mlp.0.weight"));
                add_bias(&mut out, p("mlp.0.bias"));
                out
            }
        };
        if !last {
            h = match spec.arch {
                Arch::Gat => h.map(elu),
                _ => h.map(|v| v.max(0.0)),
            };
        }
    }
    h
}

fn add_bias(out: &mut Mat, b: &Mat) {
    for i in 0..out.r {
        for j in 0..out.c {
            *out.at_mut(i, j) += b.d[j];
        }
    }
}

pub struct ModelCheck {
    pub max_grad_err: f64,
    pub max_forward_err: f64,
}

/// Compares a model's forward values and parameter gradients (mean
/// cross-entropy over all nodes) against the f64 reference.
pub fn model_check(arch: Arch) -> ModelCheck {
    let (f, classes) = (4, 3);
    let g = toy_graph(f, classes, 21);
    let mut model = toy_model(arch, f, classes, 22);
    let rows: Vec<usize> = (0..g.num_nodes()).collect();

    let prep = Prepared::new(&g);
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nrng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = degree_quant::layers::Ctx::new(false, &mut rng, &mut nrng);
    let fwd = model.forward(&tape, &prep, &mut ctx).unwrap();
    let loss = fwd.logits.cross_entropy(g.y(), &rows).unwrap();
    let grads = tape.backward(loss).unwrap();

    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let values: Vec<Mat> = model.params.iter().map(|p| Mat::from_tensor(&p.value)).collect();
    let spec = model.spec.clone();
    let eval = |xs: &[Mat]| {
        let map: BTreeMap<String, Mat> = names.iter().cloned().zip(xs.iter().cloned()).collect();
        reference_logits(&spec, &map, &g)
    };
    let reference = eval(&values);
    let got = fwd.logits.value();
    let max_forward_err = got
        .data()
        .iter()
        .zip(&reference.d)
        .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max);

    let fd = central_diff(&values, &|xs| cross_entropy(&eval(xs), g.y(), &rows));
    let mut max_grad_err = 0.0f64;
    for (v, want) in fwd.params.iter().zip(&fd) {
        let got = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(want.r, want.c));
        for (a, b) in got.data().iter().zip(&want.d) {
            max_grad_err = max_grad_err.max(rel_err(*a as f64, *b));
        }
    }
    ModelCheck { max_grad_err, max_forward_err }
}

/// One-layer GIN `((1 + eps) X + A X) W + b` under the loss `sum(C * out)`:
/// `dW = M^T C`, `db = colsum(C)`, `d eps = sum(C * X W)`. Returns the
/// largest relative error of the autodiff gradients against these.
pub fn gin_closed_form_error() -> f64 {
    let g = toy_graph(4, 3, 31);
    let mut spec = ModelSpec::citation(Arch::Gin, 4, 3);
    spec.num_layers = 1;
    spec.dropout = 0.0;
    let mut model = Model::new(spec, QuantSpec::fp32(), 32).unwrap();
    model.params.iter_mut().find(|p| p.name.ends_with("eps")).unwrap().value = Tensor::scalar(0.3);
    let prep = Prepared::new(&g);
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nrng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = degree_quant::layers::Ctx::new(false, &mut rng, &mut nrng);
    let fwd = model.forward(&tape, &prep, &mut ctx).unwrap();
    let c = loss_weights(g.num_nodes(), 3);
    let loss = fwd.logits.mul(&tape.constant(c.to_tensor())).unwrap().sum();
    let grads = tape.backward(loss).unwrap();

    let x = Mat::from_tensor(g.x());
    let w = Mat::from_tensor(&model.params.iter().find(|p| p.name.ends_with("weight")).unwrap().value);
    let mut m = x.map(|v| 1.3 * v);
    for (s, t) in g.edges() {
        for j in 0..x.c {
            *m.at_mut(t, j) += x.at(s, j);
        }
    }
    let mut mt = Mat::zeros(m.c, m.r);
    for i in 0..m.r {
        for j in 0..m.c {
            *mt.at_mut(j, i) = m.at(i, j);
        }
    }
    let dw = mt.matmul(&c);
    let db = Mat { r: 1, c: 3, d: (0..3).map(|j| (0..c.r).map(|i| c.at(i, j)).sum()).collect() };
    let deps = Mat::scalar(weighted_sum(&x.matmul(&w), &c));

    let mut worst = 0.0f64;
    for (p, v) in model.params.iter().zip(&fwd.params) {
        let want = if p.name.ends_with("weight") {
            &dw
        } else if p.name.ends_with("bias") {
            &db
        } else {
            &deps
        };
        let got = grads.get(*v).unwrap();
        for (a, b) in got.data().iter().zip(&want.d) {
            worst = worst.max(rel_err(*a as f64, *b));
        }
    }
    worst
}
