//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough information to run its backward
//! rule; [`Tape::backward`] walks the nodes once in reverse record order.
//! Parameters enter the tape as leaves and their gradients are read back
//! from the returned [`Gradients`].

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, Tensor};

/// Shared integer index vector (edge endpoints, segment ids, batch ids).
pub type Index = Rc<[usize]>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulBlocks(usize, usize),
    BlockSum(usize, usize),
    Scale(usize, f32),
    MulScalar(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f32),
    Elu(usize, f32),
    Dropout(usize, Rc<Vec<f32>>),
    Concat(Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    RowSum(usize),
    Gather(usize, Index),
    ScatterAdd(usize, Index),
    SegmentSoftmax(usize, Index),
    Ste(usize, Option<Rc<Vec<bool>>>),
    CrossEntropy(usize, Rc<Vec<(usize, usize)>>, Rc<Tensor>),
    L1(usize, Rc<Tensor>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{r}x{c}]", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Trainable leaf; its gradient is reported by `backward`.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never accumulates gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if loss.id >= n {
            return Err(Error::Contract("loss does not belong to this tape".into()));
        }
        if nodes[loss.id].value.shape() != (1, 1) {
            let (r, c) = nodes[loss.id].value.shape();
            return Err(Error::Contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let rg = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if rg(*a) {
                let mut da = Tensor::zeros(m, k);
                matmul_a_bt_into(g.data(), bv.data(), da.data_mut(), m, n, k);
                accumulate(grads, nodes, *a, da);
            }
            if rg(*b) {
                let mut db = Tensor::zeros(k, n);
                matmul_at_b_into(av.data(), g.data(), db.data_mut(), m, k, n);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if rg(*b) {
                accumulate(grads, nodes, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(grads, nodes, *a, zip_map(g, val(*b), |x, y| x * y));
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, zip_map(g, val(*a), |x, y| x * y));
            }
        }
        Op::AddRow(x, row) => {
            accumulate(grads, nodes, *x, g.clone());
            if rg(*row) {
                let mut dr = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (d, &v) in dr.data_mut().iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                accumulate(grads, nodes, *row, dr);
            }
        }
        Op::MulRow(x, row) => {
            let (xv, rv) = (val(*x), val(*row));
            if rg(*x) {
                let mut dx = g.clone();
                for i in 0..dx.rows() {
                    for (d, &r) in dx.row_mut(i).iter_mut().zip(rv.data()) {
                        *d *= r;
                    }
                }
                accumulate(grads, nodes, *x, dx);
            }
            if rg(*row) {
                let mut dr = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for ((d, &gv), &xv) in dr.data_mut().iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                        *d += gv * xv;
                    }
                }
                accumulate(grads, nodes, *row, dr);
            }
        }
        Op::MulBlocks(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let k = wv.cols();
            let f = xv.cols() / k;
            if rg(*x) {
                let mut dx = g.clone();
                for i in 0..dx.rows() {
                    let wr = wv.row(i);
                    for (h, chunk) in dx.row_mut(i).chunks_mut(f).enumerate() {
                        chunk.iter_mut().for_each(|d| *d *= wr[h]);
                    }
                }
                accumulate(grads, nodes, *x, dx);
            }
            if rg(*w) {
                let mut dw = Tensor::zeros(wv.rows(), k);
                for i in 0..g.rows() {
                    let (gr, xr) = (g.row(i), xv.row(i));
                    for h in 0..k {
                        let s: f32 = gr[h * f..(h + 1) * f]
                            .iter()
                            .zip(&xr[h * f..(h + 1) * f])
                            .map(|(a, b)| a * b)
                            .sum();
                        dw.data_mut()[i * k + h] = s;
                    }
                }
                accumulate(grads, nodes, *w, dw);
            }
        }
        Op::BlockSum(x, k) => {
            let xv = val(*x);
            let f = xv.cols() / k;
            let mut dx = Tensor::zeros(xv.rows(), xv.cols());
            for i in 0..xv.rows() {
                let gr = g.row(i);
                for (h, chunk) in dx.row_mut(i).chunks_mut(f).enumerate() {
                    chunk.iter_mut().for_each(|d| *d = gr[h]);
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Scale(x, c) => {
            let c = *c;
            accumulate(grads, nodes, *x, g.map(|v| v * c));
        }
        Op::MulScalar(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            if rg(*x) {
                let c = sv.item();
                accumulate(grads, nodes, *x, g.map(|v| v * c));
            }
            if rg(*s) {
                let d: f32 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                accumulate(grads, nodes, *s, Tensor::scalar(d));
            }
        }
        Op::Relu(x) => {
            accumulate(grads, nodes, *x, zip_map(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
        }
        Op::LeakyRelu(x, slope) => {
            let s = *slope;
            accumulate(grads, nodes, *x, zip_map(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { gv * s }));
        }
        Op::Elu(x, alpha) => {
            // d/dx elu = 1 for x > 0, otherwise elu(x) + alpha
            let a = *alpha;
            accumulate(grads, nodes, *x, zip_map3(g, val(*x), out, |gv, xv, yv| if xv > 0.0 { gv } else { gv * (yv + a) }));
        }
        Op::Dropout(x, keep) => {
            let mut dx = g.clone();
            dx.data_mut().iter_mut().zip(keep.iter()).for_each(|(d, k)| *d *= k);
            accumulate(grads, nodes, *x, dx);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                if rg(p) {
                    let mut dp = Tensor::zeros(g.rows(), c);
                    for i in 0..g.rows() {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    accumulate(grads, nodes, p, dp);
                }
                offset += c;
            }
        }
        Op::SumAll(x) => {
            let xv = val(*x);
            accumulate(grads, nodes, *x, Tensor::full(xv.rows(), xv.cols(), g.item()));
        }
        Op::MeanAll(x) => {
            let xv = val(*x);
            let c = g.item() / xv.len().max(1) as f32;
            accumulate(grads, nodes, *x, Tensor::full(xv.rows(), xv.cols(), c));
        }
        Op::RowSum(x) => {
            let xv = val(*x);
            let mut dx = Tensor::zeros(xv.rows(), xv.cols());
            for i in 0..xv.rows() {
                let gi = g.data()[i];
                dx.row_mut(i).iter_mut().for_each(|d| *d = gi);
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Gather(x, index) => {
            let xv = val(*x);
            let dx = scatter_add_rows(g, index, xv.rows());
            accumulate(grads, nodes, *x, dx);
        }
        Op::ScatterAdd(x, index) => {
            accumulate(grads, nodes, *x, g.select_rows(index));
        }
        Op::SegmentSoftmax(x, seg) => {
            // dl = y * (dy - sum_seg(y * dy)), per column
            let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
            let h = out.cols();
            let mut dot = vec![0.0f32; n_seg * h];
            for (e, &s) in seg.iter().enumerate() {
                for c in 0..h {
                    dot[s * h + c] += out.get(e, c) * g.get(e, c);
                }
            }
            let mut dx = Tensor::zeros(out.rows(), h);
            for (e, &s) in seg.iter().enumerate() {
                for c in 0..h {
                    dx.set(e, c, out.get(e, c) * (g.get(e, c) - dot[s * h + c]));
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Ste(x, pass) => {
            let mut dx = g.clone();
            if let Some(pass) = pass {
                dx.data_mut().iter_mut().zip(pass.iter()).for_each(|(d, &p)| {
                    if !p {
                        *d = 0.0;
                    }
                });
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::CrossEntropy(x, targets, probs) => {
            let mut dx = Tensor::zeros(probs.rows(), probs.cols());
            let scale = g.item() / targets.len() as f32;
            for &(row, label) in targets.iter() {
                let p = probs.row(row);
                let d = dx.row_mut(row);
                for (j, (dv, &pv)) in d.iter_mut().zip(p).enumerate() {
                    *dv = scale * (pv - if j == label { 1.0 } else { 0.0 });
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::L1(x, target) => {
            let xv = val(*x);
            let scale = g.item() / xv.len().max(1) as f32;
            let dx = zip_map(xv, target, |p, t| {
                if p > t {
                    scale
                } else if p < t {
                    -scale
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *x, dx);
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn zip_map3(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// `out[index[e]] += src[e]`, output has `dim_size` rows.
pub fn scatter_add_rows(src: &Tensor, index: &[usize], dim_size: usize) -> Tensor {
    let f = src.cols();
    let mut out = Tensor::zeros(dim_size, f);
    let od = out.data_mut();
    for (e, &t) in index.iter().enumerate() {
        let s = src.row(e);
        for (o, &v) in od[t * f..(t + 1) * f].iter_mut().zip(s) {
            *o += v;
        }
    }
    out
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_index(op: &str, index: &[usize], bound: usize) -> Result<()> {
    if let Some(&bad) = index.iter().find(|&&i| i >= bound) {
        return Err(Error::Index(format!("{op}: index {bad} out of range 0..{bound}")));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("add", &a, &b)?;
        Ok(self.binary(other, zip_map(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("sub", &a, &b)?;
        Ok(self.binary(other, zip_map(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("mul", &a, &b)?;
        Ok(self.binary(other, zip_map(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    /// Adds a `1 x C` row to every row.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (x, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Dimension(format!("add_row: {:?} + {:?}", x.shape(), r.shape())));
        }
        let mut out = (*x).clone();
        for i in 0..out.rows() {
            out.row_mut(i).iter_mut().zip(r.data()).for_each(|(o, &b)| *o += b);
        }
        Ok(self.binary(row, out, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row elementwise by a `1 x C` row.
    pub fn mul_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (x, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Dimension(format!("mul_row: {:?} * {:?}", x.shape(), r.shape())));
        }
        let mut out = (*x).clone();
        for i in 0..out.rows() {
            out.row_mut(i).iter_mut().zip(r.data()).for_each(|(o, &b)| *o *= b);
        }
        Ok(self.binary(row, out, Op::MulRow(self.id, row.id)))
    }

    /// Splits the columns of `self` (`N x k*F`) into `k` blocks and scales
    /// block `h` of row `i` by `w[i, h]` (`w: N x k`). With `k = 1` this is a
    /// per-row scaling by a column vector.
    pub fn mul_blocks(&self, w: &Var<'t>) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        let k = wv.cols();
        if wv.rows() != x.rows() || k == 0 || x.cols() % k != 0 {
            return Err(Error::Dimension(format!("mul_blocks: {:?} by {:?}", x.shape(), wv.shape())));
        }
        let f = x.cols() / k;
        let mut out = (*x).clone();
        for i in 0..out.rows() {
            let wr = wv.row(i);
            for (h, chunk) in out.row_mut(i).chunks_mut(f).enumerate() {
                chunk.iter_mut().for_each(|o| *o *= wr[h]);
            }
        }
        Ok(self.binary(w, out, Op::MulBlocks(self.id, w.id)))
    }

    /// Sums each of `k` equal column blocks: `N x k*F -> N x k`.
    pub fn block_sum(&self, k: usize) -> Result<Var<'t>> {
        let x = self.value();
        if k == 0 || !x.cols().is_multiple_of(k) {
            return Err(Error::Dimension(format!("block_sum: {} columns into {k} blocks", x.cols())));
        }
        let f = x.cols() / k;
        let mut out = Tensor::zeros(x.rows(), k);
        for i in 0..x.rows() {
            for (h, chunk) in x.row(i).chunks(f).enumerate() {
                out.set(i, h, chunk.iter().sum());
            }
        }
        Ok(self.unary(out, Op::BlockSum(self.id, k)))
    }

    pub fn scale(&self, c: f32) -> Var<'t> {
        self.unary(self.value().map(|v| v * c), Op::Scale(self.id, c))
    }

    /// Multiplies by a `1 x 1` variable.
    pub fn mul_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.shape() != (1, 1) {
            return Err(Error::Dimension(format!("mul_scalar by {:?}", sv.shape())));
        }
        let c = sv.item();
        Ok(self.binary(s, self.value().map(|v| v * c), Op::MulScalar(self.id, s.id)))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value().map(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f32) -> Var<'t> {
        self.unary(self.value().map(|v| if v > 0.0 { v } else { v * slope }), Op::LeakyRelu(self.id, slope))
    }

    pub fn elu(&self, alpha: f32) -> Var<'t> {
        let v = self.value().map(|v| elu(v, alpha));
        self.unary(v, Op::Elu(self.id, alpha))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)` during
    /// training; identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f32, training: bool, rng: &mut R) -> Var<'t> {
        if !training || p <= 0.0 {
            return *self;
        }
        let x = self.value();
        let keep_scale = if p >= 1.0 { 0.0 } else { 1.0 / (1.0 - p) };
        let keep: Vec<f32> = (0..x.len())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep_scale })
            .collect();
        let data = x.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape");
        self.unary(out, Op::Dropout(self.id, Rc::new(keep)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s = x.sum() / x.len().max(1) as f32;
        self.unary(Tensor::scalar(s), Op::MeanAll(self.id))
    }

    /// Sums each row: `N x F -> N x 1`.
    pub fn row_sum(&self) -> Var<'t> {
        let x = self.value();
        let data = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
        let out = Tensor::from_vec(x.rows(), 1, data).expect("shape");
        self.unary(out, Op::RowSum(self.id))
    }

    /// `out[e] = self[index[e]]`.
    pub fn gather(&self, index: &Index) -> Result<Var<'t>> {
        let x = self.value();
        check_index("gather", index, x.rows())?;
        Ok(self.unary(x.select_rows(index), Op::Gather(self.id, Rc::clone(index))))
    }

    /// `out[i] = sum over e with index[e] == i of self[e]`.
    pub fn scatter_add(&self, index: &Index, dim_size: usize) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != x.rows() {
            return Err(Error::Dimension(format!(
                "scatter_add: {} rows but {} indices",
                x.rows(),
                index.len()
            )));
        }
        check_index("scatter_add", index, dim_size)?;
        let out = scatter_add_rows(&x, index, dim_size);
        Ok(self.unary(out, Op::ScatterAdd(self.id, Rc::clone(index))))
    }

    /// Column-wise softmax within each segment of rows sharing a `seg` id.
    pub fn segment_softmax(&self, seg: &Index, n_segments: usize) -> Result<Var<'t>> {
        let x = self.value();
        if seg.len() != x.rows() {
            return Err(Error::Dimension(format!(
                "segment_softmax: {} rows but {} segment ids",
                x.rows(),
                seg.len()
            )));
        }
        check_index("segment_softmax", seg, n_segments)?;
        let out = segment_softmax_values(&x, seg, n_segments);
        Ok(self.unary(out, Op::SegmentSoftmax(self.id, Rc::clone(seg))))
    }

    /// Records a straight-through node: the forward value is `value`
    /// (computed by the caller, e.g. fake quantization) and the backward
    /// rule passes the upstream gradient where `pass` is true (everywhere
    /// when `pass` is `None`).
    pub fn straight_through(&self, value: Tensor, pass: Option<Vec<bool>>) -> Result<Var<'t>> {
        let x = self.value();
        check_same_shape("straight_through", &x, &value)?;
        if let Some(p) = &pass {
            if p.len() != x.len() {
                return Err(Error::Dimension("straight_through: pass mask length".into()));
            }
        }
        Ok(self.unary(value, Op::Ste(self.id, pass.map(Rc::new))))
    }

    /// Mean softmax cross-entropy over `rows` (labels indexed by row).
    pub fn cross_entropy(&self, labels: &[usize], rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if rows.is_empty() {
            return Err(Error::Contract("cross_entropy over an empty row selection".into()));
        }
        let mut probs = Tensor::zeros(x.rows(), x.cols());
        let mut targets = Vec::with_capacity(rows.len());
        let mut loss = 0.0f64;
        for &r in rows {
            let label = *labels
                .get(r)
                .ok_or_else(|| Error::Index(format!("cross_entropy: no label for row {r}")))?;
            if r >= x.rows() || label >= x.cols() {
                return Err(Error::Index(format!("cross_entropy: row {r} label {label}")));
            }
            let row = x.row(r);
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|&v| (v - m).exp()).sum();
            let lz = z.ln();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - m - lz).exp();
            }
            loss -= (row[label] - m - lz) as f64;
            targets.push((r, label));
        }
        let value = Tensor::scalar((loss / rows.len() as f64) as f32);
        Ok(self.unary(value, Op::CrossEntropy(self.id, Rc::new(targets), Rc::new(probs))))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&self, target: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        check_same_shape("l1_loss", &x, target)?;
        let s: f32 = x.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        let value = Tensor::scalar(s / x.len().max(1) as f32);
        Ok(self.unary(value, Op::L1(self.id, Rc::new(target.clone()))))
    }
}

/// Concatenates along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rows = values[0].rows();
    if values.iter().any(|v| v.rows() != rows) {
        return Err(Error::Dimension("concat_cols: row counts differ".into()));
    }
    let cols: usize = values.iter().map(|v| v.cols()).sum();
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        let mut off = 0;
        for v in &values {
            out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            off += v.cols();
        }
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(out, Op::Concat(parts.iter().map(|p| p.id).collect()), rg))
}

pub fn elu(v: f32, alpha: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        alpha * (v.exp() - 1.0)
    }
}

/// Numerically stabilized per-segment softmax (values only).
pub fn segment_softmax_values(x: &Tensor, seg: &[usize], n_segments: usize) -> Tensor {
    let h = x.cols();
    let mut max = vec![f32::NEG_INFINITY; n_segments * h];
    for (e, &s) in seg.iter().enumerate() {
        for c in 0..h {
            let m = &mut max[s * h + c];
            *m = m.max(x.get(e, c));
        }
    }
    let mut out = Tensor::zeros(x.rows(), h);
    let mut denom = vec![0.0f32; n_segments * h];
    for (e, &s) in seg.iter().enumerate() {
        for c in 0..h {
            let v = (x.get(e, c) - max[s * h + c]).exp();
            out.set(e, c, v);
            denom[s * h + c] += v;
        }
    }
    for (e, &s) in seg.iter().enumerate() {
        for c in 0..h {
            out.set(e, c, out.get(e, c) / denom[s * h + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn idx(v: &[usize]) -> Index {
        Rc::from(v)
    }

    #[test]
    fn sum_of_weights_has_unit_gradient() {
        let tape = Tape::new();
        let w = tape.param(t(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let loss = w.sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_receive_gradient() {
        let tape = Tape::new();
        let c = tape.constant(t(&[&[2.0]]));
        let w = tape.param(t(&[&[3.0]]));
        let loss = c.mul(&w).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().item(), 2.0);
    }

    #[test]
    fn scatter_add_sums_rows() {
        let tape = Tape::new();
        let src = tape.constant(t(&[&[1.0], &[2.0], &[3.0]]));
        let out = src.scatter_add(&idx(&[0, 0, 1]), 2).unwrap();
        assert_eq!(out.value().data(), &[3.0, 3.0]);
    }

    #[test]
    fn scatter_add_of_nothing_is_zero() {
        let tape = Tape::new();
        let src = tape.constant(Tensor::zeros(0, 3));
        let out = src.scatter_add(&idx(&[]), 4).unwrap();
        assert_eq!(out.value().as_ref(), &Tensor::zeros(4, 3));
    }

    #[test]
    fn scatter_and_gather_reject_bad_indices() {
        let tape = Tape::new();
        let src = tape.constant(t(&[&[1.0], &[2.0]]));
        assert!(matches!(src.scatter_add(&idx(&[0, 2]), 2), Err(Error::Index(_))));
        assert!(matches!(src.gather(&idx(&[5])), Err(Error::Index(_))));
    }

    #[test]
    fn gather_selects_rows() {
        let tape = Tape::new();
        let src = tape.constant(t(&[&[1.0], &[2.0]]));
        assert_eq!(src.gather(&idx(&[1, 0, 1])).unwrap().value().data(), &[2.0, 1.0, 2.0]);
        assert_eq!(src.gather(&idx(&[0, 1])).unwrap().value().as_ref(), src.value().as_ref());
    }

    #[test]
    fn segment_softmax_basic_cases() {
        let tape = Tape::new();
        let l = tape.constant(t(&[&[0.0], &[0.0]]));
        assert_eq!(l.segment_softmax(&idx(&[0, 0]), 1).unwrap().value().data(), &[0.5, 0.5]);
        let single = tape.constant(t(&[&[3.7]]));
        assert_eq!(single.segment_softmax(&idx(&[0]), 1).unwrap().value().data(), &[1.0]);
    }

    #[test]
    fn dropout_zero_and_eval_are_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0, 3.0]]));
        assert_eq!(x.dropout(0.0, true, &mut rng).value().as_ref(), x.value().as_ref());
        assert_eq!(x.dropout(0.5, false, &mut rng).value().as_ref(), x.value().as_ref());
        let d = x.dropout(0.5, true, &mut rng).value();
        for (&o, &i) in d.data().iter().zip(x.value().data()) {
            assert!(o == 0.0 || o == 2.0 * i);
        }
    }

    #[test]
    fn relu_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[&[-1.0, 2.0]]));
        assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn repeated_use_accumulates_gradient() {
        let tape = Tape::new();
        let w = tape.param(t(&[&[2.0]]));
        let y = w.add(&w).unwrap().mul(&w).unwrap().sum(); // 2w^2
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 8.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(3, 7));
        let loss = x.cross_entropy(&[0, 3, 6], &[0, 1, 2]).unwrap();
        assert!((loss.value().item() - 7f32.ln()).abs() < 1e-6);
        assert!(matches!(x.cross_entropy(&[0], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_confident_margin_is_near_zero() {
        let tape = Tape::new();
        let x = tape.param(t(&[&[100.0, 0.0, 0.0]]));
        let loss = x.cross_entropy(&[0], &[0]).unwrap();
        assert!(loss.value().item() < 1e-6);
    }
}
