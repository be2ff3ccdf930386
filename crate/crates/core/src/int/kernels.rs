//! Compute kernels with runtime instruction-set dispatch.
//!
//! Every kernel has a portable implementation plus AVX2 and AVX-512
//! variants. Integer variants are bit-identical to the portable one; the
//! float variants may differ in summation order.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::requant::{rhe_i64, Requant, SmallMult};
use crate::quant::QParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Isa {
    Scalar,
    Avx2,
    /// AVX-512 with VNNI dot products.
    Avx512,
}

impl Isa {
    /// Best variant supported by this CPU, detected once.
    pub fn detect() -> Isa {
        static ISA: OnceLock<Isa> = OnceLock::new();
        *ISA.get_or_init(|| {
            let all = Isa::available();
            *all.last().expect("scalar is always available")
        })
    }

    pub fn available() -> Vec<Isa> {
        #[allow(unused_mut)]
        let mut v = vec![Isa::Scalar];
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                v.push(Isa::Avx2);
                if is_x86_feature_detected!("avx512f")
                    && is_x86_feature_detected!("avx512bw")
                    && is_x86_feature_detected!("avx512vl")
                    && is_x86_feature_detected!("avx512vnni")
                {
                    v.push(Isa::Avx512);
                }
            }
        }
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            Isa::Scalar => "scalar",
            Isa::Avx2 => "avx2",
            Isa::Avx512 => "avx512",
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn has_vbmi() -> bool {
    static VBMI: OnceLock<bool> = OnceLock::new();
    *VBMI.get_or_init(|| is_x86_feature_detected!("avx512vbmi"))
}

/// Compiles `body` three times (baseline, AVX2, AVX-512) and dispatches on
/// the `Isa` argument. The SIMD variants rely on auto-vectorization.
macro_rules! multiversion {
    ($(#[$m:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $body:block) => {
        $(#[$m])*
        #[allow(clippy::too_many_arguments)]
        $vis fn $name(isa: Isa, $($arg: $ty),*) {
            #[inline(always)]
            #[allow(clippy::too_many_arguments)]
            fn body($($arg: $ty),*) $body
            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx2,fma")]
            #[allow(clippy::too_many_arguments)]
            unsafe fn avx2($($arg: $ty),*) { body($($arg),*) }
            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx512f,avx512bw,avx512vl,avx512vnni,avx2,fma")]
            #[allow(clippy::too_many_arguments)]
            unsafe fn avx512($($arg: $ty),*) { body($($arg),*) }
            match isa {
                Isa::Scalar => body($($arg),*),
                // SAFETY: non-scalar variants are only constructed by
                // `Isa::available` after feature detection.
                #[cfg(target_arch = "x86_64")]
                Isa::Avx2 => unsafe { avx2($($arg),*) },
                #[cfg(target_arch = "x86_64")]
                Isa::Avx512 => unsafe { avx512($($arg),*) },
                #[cfg(not(target_arch = "x86_64"))]
                _ => body($($arg),*),
            }
        }
    };
}

pub fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// Row-major `i8` codes with rows padded to a multiple of four bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codes {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub data: Vec<i8>,
}

impl Codes {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let stride = round_up(cols.max(1), 4);
        Self { rows, cols, stride, data: vec![0; rows * stride] }
    }

    pub fn from_rows(rows: usize, cols: usize, values: &[i8]) -> Self {
        let mut c = Self::zeros(rows, cols);
        for i in 0..rows {
            c.row_mut(i).copy_from_slice(&values[i * cols..(i + 1) * cols]);
        }
        c
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.data[i * self.stride..i * self.stride + self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [i8] {
        let s = self.stride;
        &mut self.data[i * s..i * s + self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.data[i * self.stride + j]
    }
}

/// `k x n` weight codes packed as `[k/4][np][4]` with `np` a multiple of
/// 16. Padding is zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedI8 {
    pub k: usize,
    pub n: usize,
    pub kp: usize,
    pub np: usize,
    pub data: Vec<i8>,
    /// Column sums over the real rows.
    pub colsum: Vec<i32>,
}

impl PackedI8 {
    pub fn pack(k: usize, n: usize, w: &[i8]) -> Self {
        assert_eq!(w.len(), k * n);
        let kp = round_up(k.max(1), 4);
        let np = round_up(n.max(1), 16);
        let mut data = vec![0i8; kp * np];
        let mut colsum = vec![0i32; n];
        for r in 0..k {
            for c in 0..n {
                let v = w[r * n + c];
                data[((r / 4) * np + c) * 4 + r % 4] = v;
                colsum[c] += v as i32;
            }
        }
        Self { k, n, kp, np, data, colsum }
    }
}

/// Row-major `k x np` float weights, `np` a multiple of 16.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedF32 {
    pub k: usize,
    pub n: usize,
    pub np: usize,
    pub data: Vec<f32>,
}

impl PackedF32 {
    pub fn pack(k: usize, n: usize, w: &[f32]) -> Self {
        assert_eq!(w.len(), k * n);
        let np = round_up(n.max(1), 16);
        let mut data = vec![0.0; k * np];
        for r in 0..k {
            data[r * np..r * np + n].copy_from_slice(&w[r * n..(r + 1) * n]);
        }
        Self { k, n, np, data }
    }
}

/// `acc[r][c] = sum_k (x[r][k] + 128) * w[k][c]` for `rows` rows of `x`
/// (row stride `xs >= w.kp`). `acc` has `w.np` columns.
pub fn dense_i8(isa: Isa, x: &[i8], xs: usize, rows: usize, w: &PackedI8, acc: &mut [i32]) {
    assert!(xs >= w.kp && x.len() >= rows.saturating_sub(1) * xs + w.kp * (rows > 0) as usize);
    assert!(acc.len() >= rows * w.np);
    match isa {
        // SAFETY: features were detected; bounds were checked above.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { x86::dense_i8_vnni(x, xs, rows, w, acc) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { x86::dense_i8_avx2(x, xs, rows, w, acc) },
        _ => dense_i8_scalar(x, xs, rows, w, acc),
    }
}

fn dense_i8_scalar(x: &[i8], xs: usize, rows: usize, w: &PackedI8, acc: &mut [i32]) {
    let np = w.np;
    for r in 0..rows {
        let xr = &x[r * xs..r * xs + w.kp];
        let a = &mut acc[r * np..(r + 1) * np];
        a.fill(0);
        for k4 in 0..w.kp / 4 {
            let u: [i32; 4] = std::array::from_fn(|t| (xr[k4 * 4 + t] as u8 ^ 0x80) as i32);
            let wk = &w.data[k4 * np * 4..(k4 + 1) * np * 4];
            for (c, av) in a.iter_mut().enumerate() {
                let wc = &wk[c * 4..c * 4 + 4];
                *av += u[0] * wc[0] as i32 + u[1] * wc[1] as i32 + u[2] * wc[2] as i32 + u[3] * wc[3] as i32;
            }
        }
    }
}

/// `out[r][c] = sum_k x[r][k] * w[k][c]`, `out` with `w.np` columns.
pub fn dense_f32(isa: Isa, x: &[f32], xs: usize, rows: usize, w: &PackedF32, out: &mut [f32]) {
    assert!(xs >= w.k && x.len() >= rows.saturating_sub(1) * xs + w.k * (rows > 0) as usize);
    assert!(out.len() >= rows * w.np);
    match isa {
        // SAFETY: features were detected; bounds were checked above.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { x86::dense_f32_avx512(x, xs, rows, w, out) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { x86::dense_f32_avx2(x, xs, rows, w, out) },
        _ => dense_f32_scalar(x, xs, rows, w, out),
    }
}

fn dense_f32_scalar(x: &[f32], xs: usize, rows: usize, w: &PackedF32, out: &mut [f32]) {
    let np = w.np;
    for r in 0..rows {
        let o = &mut out[r * np..(r + 1) * np];
        o.fill(0.0);
        for k in 0..w.k {
            let xv = x[r * xs + k];
            if xv == 0.0 {
                continue;
            }
            for (ov, &wv) in o.iter_mut().zip(&w.data[k * np..(k + 1) * np]) {
                *ov += xv * wv;
            }
        }
    }
}

/// Requantization target: a fixed-point multiplier, zero point and grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub rq: Requant,
    pub zero_point: i32,
    pub lo: i32,
    pub hi: i32,
}

impl Target {
    #[inline(always)]
    pub fn code(&self, acc: i32) -> i32 {
        (rhe_i64(acc as i64 * self.rq.mult as i64, self.rq.shift) + self.zero_point as i64)
            .clamp(self.lo as i64, self.hi as i64) as i32
    }
}

multiversion! {
    /// `QParams::quantize` over a row-major float matrix.
    pub fn quantize_rows(x: &[f32], xs: usize, rows: usize, cols: usize, qp: &QParams, out: &mut [i8], out_stride: usize) {
        let (s, z) = (qp.scale, qp.zero_point as f32);
        let (lo, hi) = (qp.q_min as f32, qp.q_max as f32);
        for r in 0..rows {
            let xr = &x[r * xs..r * xs + cols];
            let o = &mut out[r * out_stride..r * out_stride + cols];
            for (o, &v) in o.iter_mut().zip(xr) {
                *o = (v / s + z).round_ties_even().clamp(lo, hi) as i32 as i8;
            }
        }
    }
}

multiversion! {
    /// `out[r][c] = t.code(acc[r][c] + add[c])` over `n` columns.
    pub fn requant_rows(acc: &[i32], acc_stride: usize, rows: usize, n: usize, add: &[i32], t: Target, out: &mut [i8], out_stride: usize) {
        let (m, s, z) = (t.rq.mult as i64, t.rq.shift, t.zero_point as i64);
        let (lo, hi) = (t.lo as i64, t.hi as i64);
        let add = &add[..n];
        for r in 0..rows {
            let a = &acc[r * acc_stride..r * acc_stride + n];
            let o = &mut out[r * out_stride..r * out_stride + n];
            for c in 0..n {
                let v = (a[c] + add[c]) as i64 * m;
                o[c] = (rhe_i64(v, s) + z).clamp(lo, hi) as i8;
            }
        }
    }
}

/// CSR rows with a quantized message per entry and head.
pub struct MessageArgs<'a> {
    pub row_ptr: &'a [usize],
    pub col: &'a [u32],
    pub feat: &'a Codes,
    pub feat_zero: i32,
    pub heads: usize,
    pub block: usize,
    /// `nnz * heads` multipliers in CSR order.
    pub mults: &'a [SmallMult],
    /// Message grid relative to its zero point.
    pub lo: i32,
    pub hi: i32,
}

/// Sums `clamp(round(mult * (x_src - z_x)))` over incoming entries of
/// each row in `rows`, giving message codes minus their zero point.
pub fn message_aggregate(isa: Isa, a: &MessageArgs<'_>, rows: Range<usize>, acc: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    if isa == Isa::Avx512 && a.block.is_multiple_of(16) {
        assert!(acc.len() >= rows.len() * a.heads * a.block);
        assert!(a.mults.len() >= a.row_ptr[rows.end] * a.heads);
        // SAFETY: AVX-512 was detected; `acc` and `mults` bounds are
        // checked above and source rows come from a validated CSR.
        unsafe { x86::message_aggregate(a, rows, acc) };
        return;
    }
    message_aggregate_generic(isa, a, rows, acc)
}

multiversion! {
    fn message_aggregate_generic(a: &MessageArgs<'_>, rows: Range<usize>, acc: &mut [i32]) {
        let width = a.heads * a.block;
        let fs = a.feat.stride;
        let feat = &a.feat.data;
        let (zf, lo, hi) = (a.feat_zero, a.lo, a.hi);
        for (ri, i) in rows.enumerate() {
            let out = &mut acc[ri * width..(ri + 1) * width];
            out.fill(0);
            for p in a.row_ptr[i]..a.row_ptr[i + 1] {
                let s = a.col[p] as usize;
                let x = &feat[s * fs..s * fs + width];
                for h in 0..a.heads {
                    let k = a.mults[p * a.heads + h];
                    let (mult, shift) = (k.mult, k.shift);
                    let half = (1i32 << (shift - 1)) - 1;
                    let xb = &x[h * a.block..(h + 1) * a.block];
                    let ob = &mut out[h * a.block..(h + 1) * a.block];
                    for j in 0..a.block {
                        let v = (xb[j] as i32 - zf) * mult;
                        let q = (v + half + ((v >> shift) & 1)) >> shift;
                        ob[j] += q.clamp(lo, hi);
                    }
                }
            }
        }
    }
}

/// Per-entry message lookup tables, for layers whose entries share a few
/// distinct multipliers. Table `t` maps `x + 128` to the message code of
/// input code `x`, zero point included.
#[derive(Clone, Debug)]
pub struct MessageTables {
    pub data: Vec<i8>,
    /// Table of each CSR entry.
    pub index: Vec<u32>,
    pub zero_point: i32,
}

impl MessageTables {
    /// `None` when the entries use more than `max_tables` multipliers.
    pub fn build(mults: &[SmallMult], feat_zero: i32, lo: i32, hi: i32, zero_point: i32, max_tables: usize) -> Option<Self> {
        let mut ids: HashMap<SmallMult, u32> = HashMap::new();
        let mut data = Vec::new();
        let mut index = Vec::with_capacity(mults.len());
        for k in mults {
            let next = ids.len() as u32;
            let id = *ids.entry(*k).or_insert_with(|| {
                data.extend((-128..128).map(|x| (k.apply(x - feat_zero).clamp(lo, hi) + zero_point) as i8));
                next
            });
            if ids.len() > max_tables {
                return None;
            }
            index.push(id);
        }
        Some(Self { data, index, zero_point })
    }
}

/// Whether [`table_aggregate`] has a vector path for rows of `width`.
pub fn tables_vectorized(isa: Isa, width: usize) -> bool {
    cfg!(target_arch = "x86_64") && isa == Isa::Avx512 && has_vbmi() && width.is_multiple_of(64)
}

/// Same result as [`message_aggregate`] with one head, from lookup tables.
pub fn table_aggregate(isa: Isa, row_ptr: &[usize], col: &[u32], feat: &Codes, t: &MessageTables, rows: Range<usize>, acc: &mut [i32]) {
    let width = feat.cols;
    assert!(acc.len() >= rows.len() * width);
    assert!(t.index.len() >= row_ptr[rows.end]);
    #[cfg(target_arch = "x86_64")]
    if tables_vectorized(isa, width) {
        // SAFETY: VBMI was detected; bounds of `acc` and the table index
        // are checked above and source rows come from a validated CSR.
        unsafe { x86::table_aggregate(row_ptr, col, feat, t, rows, acc) };
        return;
    }
    let _ = isa;
    let fs = feat.stride;
    for (ri, i) in rows.enumerate() {
        let out = &mut acc[ri * width..(ri + 1) * width];
        out.fill(0);
        for p in row_ptr[i]..row_ptr[i + 1] {
            let s = col[p] as usize;
            let table = &t.data[t.index[p] as usize * 256..][..256];
            for (o, &x) in out.iter_mut().zip(&feat.data[s * fs..s * fs + width]) {
                *o += table[(x as i32 + 128) as usize] as i32;
            }
        }
        let corr = t.zero_point * (row_ptr[i + 1] - row_ptr[i]) as i32;
        for v in out.iter_mut() {
            *v -= corr;
        }
    }
}

multiversion! {
    /// Plain neighbour sums with the zero point removed once per entry:
    /// `acc[i] = sum x_src - z * nnz(i)`.
    pub fn sum_aggregate(row_ptr: &[usize], col: &[u32], feat: &Codes, zero: i32, rows: Range<usize>, acc: &mut [i32]) {
        let width = feat.cols;
        let fs = feat.stride;
        for (ri, i) in rows.enumerate() {
            let out = &mut acc[ri * width..(ri + 1) * width];
            out.fill(0);
            for p in row_ptr[i]..row_ptr[i + 1] {
                let s = col[p] as usize;
                let x = &feat.data[s * fs..s * fs + width];
                for j in 0..width {
                    out[j] += x[j] as i32;
                }
            }
            let corr = zero * (row_ptr[i + 1] - row_ptr[i]) as i32;
            for v in out.iter_mut() {
                *v -= corr;
            }
        }
    }
}

/// Aggregate requantization followed by bias and the update site.
#[derive(Clone, Copy, Debug)]
pub struct AggUpdate<'a> {
    pub aggregate: Target,
    /// Bias in units of `s_aggregate / 2^BIAS_FRACTION_BITS`, one per column.
    pub bias: &'a [i32],
    /// From `((a - z_a) << BIAS_FRACTION_BITS) + bias` to update codes.
    pub update: Target,
}

pub const BIAS_FRACTION_BITS: u32 = 16;

multiversion! {
    pub fn agg_update_rows(acc: &[i32], rows: usize, width: usize, e: &AggUpdate<'_>, out: &mut [i8], out_stride: usize) {
        let (am, ash, az) = (e.aggregate.rq.mult as i64, e.aggregate.rq.shift, e.aggregate.zero_point as i64);
        let (alo, ahi) = (e.aggregate.lo as i64, e.aggregate.hi as i64);
        let (um, ush, uz) = (e.update.rq.mult as i64, e.update.rq.shift, e.update.zero_point as i64);
        let (ulo, uhi) = (e.update.lo as i64, e.update.hi as i64);
        let bias = &e.bias[..width];
        for r in 0..rows {
            let a = &acc[r * width..(r + 1) * width];
            let o = &mut out[r * out_stride..r * out_stride + width];
            for c in 0..width {
                let code = (rhe_i64(a[c] as i64 * am, ash) + az).clamp(alo, ahi);
                let v = ((code - az) << BIAS_FRACTION_BITS) + bias[c] as i64;
                o[c] = (rhe_i64(v * um, ush) + uz).clamp(ulo, uhi) as i8;
            }
        }
    }
}

/// `(1 + eps) x + aggregate` onto the features grid, with two multipliers
/// sharing one shift.
#[derive(Clone, Copy, Debug)]
pub struct Combine {
    pub aggregate: Target,
    pub x_zero: i32,
    pub x_mult: i32,
    pub a_mult: i32,
    pub shift: u32,
    pub zero_point: i32,
    pub lo: i32,
    pub hi: i32,
}

multiversion! {
    pub fn combine_rows(acc: &[i32], x: &Codes, rows: Range<usize>, e: &Combine, out: &mut [i8], out_stride: usize) {
        let width = x.cols;
        let (am, ash, az) = (e.aggregate.rq.mult as i64, e.aggregate.rq.shift, e.aggregate.zero_point as i64);
        let (alo, ahi) = (e.aggregate.lo as i64, e.aggregate.hi as i64);
        let (xm, gm, zx) = (e.x_mult as i64, e.a_mult as i64, e.x_zero as i64);
        let (z, lo, hi) = (e.zero_point as i64, e.lo as i64, e.hi as i64);
        for (ri, i) in rows.enumerate() {
            let a = &acc[ri * width..(ri + 1) * width];
            let xr = &x.data[i * x.stride..i * x.stride + width];
            let o = &mut out[ri * out_stride..ri * out_stride + width];
            for c in 0..width {
                let code = (rhe_i64(a[c] as i64 * am, ash) + az).clamp(alo, ahi);
                let v = (xr[c] as i64 - zx) * xm + (code - az) * gm;
                o[c] = (rhe_i64(v, e.shift) + z).clamp(lo, hi) as i8;
            }
        }
    }
}

/// `dst[i] = table[src[i] + 128]` for a 256-entry table.
pub fn lut(isa: Isa, table: &[i8], src: &[i8], dst: &mut [i8]) {
    assert_eq!(table.len(), 256);
    assert_eq!(src.len(), dst.len());
    #[cfg(target_arch = "x86_64")]
    if isa == Isa::Avx512 && has_vbmi() {
        // SAFETY: VBMI was detected; lengths were checked above.
        unsafe { x86::lut_vbmi(table, src, dst) };
        return;
    }
    let _ = isa;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = table[(s as i32 + 128) as usize];
    }
}

multiversion! {
    /// `out[i] = sum_p vals[p, h] * feat[col[p]]` per head block.
    pub fn spmm_f32(row_ptr: &[usize], col: &[u32], vals: &[f32], heads: usize, block: usize, feat: &[f32], fs: usize, rows: Range<usize>, out: &mut [f32], os: usize) {
        let width = heads * block;
        for (ri, i) in rows.enumerate() {
            let o = &mut out[ri * os..ri * os + width];
            o.fill(0.0);
            for p in row_ptr[i]..row_ptr[i + 1] {
                let s = col[p] as usize;
                let x = &feat[s * fs..s * fs + width];
                for h in 0..heads {
                    let v = vals[p * heads + h];
                    let xb = &x[h * block..(h + 1) * block];
                    let ob = &mut o[h * block..(h + 1) * block];
                    for j in 0..block {
                        ob[j] += v * xb[j];
                    }
                }
            }
        }
    }
}

multiversion! {
    /// Plain neighbour sums in float.
    pub fn sum_f32(row_ptr: &[usize], col: &[u32], width: usize, feat: &[f32], fs: usize, rows: Range<usize>, out: &mut [f32], os: usize) {
        for (ri, i) in rows.enumerate() {
            let o = &mut out[ri * os..ri * os + width];
            o.fill(0.0);
            for p in row_ptr[i]..row_ptr[i + 1] {
                let s = col[p] as usize;
                let x = &feat[s * fs..s * fs + width];
                for j in 0..width {
                    o[j] += x[j];
                }
            }
        }
    }
}

/// Activation applied after a float layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    Elu,
}

multiversion! {
    /// `out[r][c] = act(out[r][c] + bias[c])` over `width` columns.
    pub fn bias_act_f32(out: &mut [f32], rows: usize, width: usize, os: usize, bias: &[f32], act: Act) {
        let bias = &bias[..width];
        for r in 0..rows {
            let o = &mut out[r * os..r * os + width];
            for c in 0..width {
                o[c] += bias[c];
            }
            match act {
                Act::None => {}
                Act::Relu => o.iter_mut().for_each(|v| *v = v.max(0.0)),
                Act::Elu => o.iter_mut().for_each(|v| *v = crate::autodiff::elu(*v, 1.0)),
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use std::ops::Range;

    use super::{Codes, MessageArgs, MessageTables, PackedF32, PackedI8};

    /// Table lookups with `permutex2var` over 64-column groups, summed in
    /// 16-bit lanes that are widened every 256 entries.
    #[target_feature(enable = "avx512f,avx512bw,avx512vbmi")]
    pub unsafe fn table_aggregate(
        row_ptr: &[usize],
        col: &[u32],
        feat: &Codes,
        t: &MessageTables,
        rows: Range<usize>,
        acc: &mut [i32],
    ) {
        let width = feat.cols;
        let groups = width / 64;
        for (ri, i) in rows.enumerate() {
            let out = acc.as_mut_ptr().add(ri * width);
            let mut g = 0;
            while g < groups {
                if groups - g >= 2 {
                    table_group::<2>(row_ptr, col, feat, t, i, g, out);
                    g += 2;
                } else {
                    table_group::<1>(row_ptr, col, feat, t, i, g, out);
                    g += 1;
                }
            }
        }
    }

    #[target_feature(enable = "avx512f,avx512bw,avx512vbmi")]
    #[inline]
    unsafe fn table_group<const C: usize>(
        row_ptr: &[usize],
        col: &[u32],
        feat: &Codes,
        t: &MessageTables,
        i: usize,
        g: usize,
        out: *mut i32,
    ) {
        let fs = feat.stride;
        let fp = feat.data.as_ptr();
        let (p0, p1) = (row_ptr[i], row_ptr[i + 1]);
        let mut wide = [[_mm512_setzero_si512(); 4]; C];
        let mut p = p0;
        while p < p1 {
            let end = p1.min(p + 256);
            let mut narrow = [[_mm512_setzero_si512(); 2]; C];
            for q in p..end {
                if q + 1 < p1 {
                    let next = fp.add(*col.get_unchecked(q + 1) as usize * fs + g * 64);
                    for c in 0..C {
                        _mm_prefetch::<_MM_HINT_T0>(next.add(c * 64));
                    }
                }
                let tp = t.data.as_ptr().add(*t.index.get_unchecked(q) as usize * 256);
                let t0 = _mm512_loadu_si512(tp as *const _);
                let t1 = _mm512_loadu_si512(tp.add(64) as *const _);
                let t2 = _mm512_loadu_si512(tp.add(128) as *const _);
                let t3 = _mm512_loadu_si512(tp.add(192) as *const _);
                let src = fp.add(*col.get_unchecked(q) as usize * fs + g * 64);
                for (c, nc) in narrow.iter_mut().enumerate() {
                    // Negative codes index the first half of the table.
                    let x = _mm512_loadu_si512(src.add(c * 64) as *const _);
                    let neg = _mm512_permutex2var_epi8(t0, x, t1);
                    let pos = _mm512_permutex2var_epi8(t2, x, t3);
                    let m = _mm512_mask_blend_epi8(_mm512_movepi8_mask(x), pos, neg);
                    nc[0] = _mm512_add_epi16(nc[0], _mm512_cvtepi8_epi16(_mm512_castsi512_si256(m)));
                    nc[1] = _mm512_add_epi16(nc[1], _mm512_cvtepi8_epi16(_mm512_extracti64x4_epi64::<1>(m)));
                }
            }
            for (wc, nc) in wide.iter_mut().zip(&narrow) {
                for h in 0..2 {
                    let lo = _mm512_cvtepi16_epi32(_mm512_castsi512_si256(nc[h]));
                    let hi = _mm512_cvtepi16_epi32(_mm512_extracti64x4_epi64::<1>(nc[h]));
                    wc[2 * h] = _mm512_add_epi32(wc[2 * h], lo);
                    wc[2 * h + 1] = _mm512_add_epi32(wc[2 * h + 1], hi);
                }
            }
            p = end;
        }
        let corr = _mm512_set1_epi32(t.zero_point * (p1 - p0) as i32);
        for (c, wc) in wide.iter().enumerate() {
            for (v, w) in wc.iter().enumerate() {
                _mm512_storeu_si512(out.add((g + c) * 64 + v * 16) as *mut _, _mm512_sub_epi32(*w, corr));
            }
        }
    }

    /// Up to eight 16-column accumulators stay in registers across all
    /// entries of a row; the next source row is prefetched.
    #[target_feature(enable = "avx512f,avx512bw")]
    pub unsafe fn message_aggregate(a: &MessageArgs<'_>, rows: Range<usize>, acc: &mut [i32]) {
        let width = a.heads * a.block;
        let vecs = width / 16;
        for (ri, i) in rows.enumerate() {
            let out = acc.as_mut_ptr().add(ri * width);
            let mut g = 0;
            while g < vecs {
                match vecs - g {
                    1 => message_group::<1>(a, i, g, out),
                    2 => message_group::<2>(a, i, g, out),
                    3 => message_group::<3>(a, i, g, out),
                    4 => message_group::<4>(a, i, g, out),
                    5 => message_group::<5>(a, i, g, out),
                    6 => message_group::<6>(a, i, g, out),
                    7 => message_group::<7>(a, i, g, out),
                    _ => message_group::<8>(a, i, g, out),
                }
                g += (vecs - g).min(8);
            }
        }
    }

    #[target_feature(enable = "avx512f,avx512bw")]
    #[inline]
    unsafe fn message_group<const C: usize>(a: &MessageArgs<'_>, i: usize, g: usize, out: *mut i32) {
        let fs = a.feat.stride;
        let feat = a.feat.data.as_ptr();
        let (zf, lo, hi) = (_mm512_set1_epi32(a.feat_zero), _mm512_set1_epi32(a.lo), _mm512_set1_epi32(a.hi));
        let one = _mm512_set1_epi32(1);
        let (p0, p1) = (a.row_ptr[i], a.row_ptr[i + 1]);
        let mut s = [_mm512_setzero_si512(); C];
        for p in p0..p1 {
            if p + 1 < p1 {
                let next = feat.add(*a.col.get_unchecked(p + 1) as usize * fs + g * 16);
                for line in (0..C * 16).step_by(64) {
                    _mm_prefetch::<_MM_HINT_T0>(next.add(line));
                }
            }
            let src = feat.add(*a.col.get_unchecked(p) as usize * fs);
            for (v, sv) in s.iter_mut().enumerate() {
                let c = (g + v) * 16;
                let k = *a.mults.get_unchecked(p * a.heads + c / a.block);
                let x = _mm512_cvtepi8_epi32(_mm_loadu_si128(src.add(c) as *const _));
                let d = _mm512_mullo_epi32(_mm512_sub_epi32(x, zf), _mm512_set1_epi32(k.mult));
                let sh = _mm_cvtsi32_si128(k.shift as i32);
                let half = _mm512_set1_epi32((1 << (k.shift - 1)) - 1);
                let par = _mm512_and_si512(_mm512_sra_epi32(d, sh), one);
                let q = _mm512_sra_epi32(_mm512_add_epi32(_mm512_add_epi32(d, half), par), sh);
                *sv = _mm512_add_epi32(*sv, _mm512_min_epi32(_mm512_max_epi32(q, lo), hi));
            }
        }
        for (v, sv) in s.iter().enumerate() {
            _mm512_storeu_si512(out.add((g + v) * 16) as *mut _, *sv);
        }
    }

    #[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
    #[inline]
    unsafe fn vnni_tile<const R: usize, const C: usize>(
        x: *const i8,
        xs: usize,
        w: *const i8,
        np: usize,
        k4: usize,
        acc: *mut i32,
        accs: usize,
    ) {
        let flip = _mm512_set1_epi32(0x8080_8080u32 as i32);
        let mut a = [[_mm512_setzero_si512(); C]; R];
        for k in 0..k4 {
            let wp = w.add(k * np * 4);
            let mut wv = [_mm512_setzero_si512(); C];
            for (c, v) in wv.iter_mut().enumerate() {
                *v = _mm512_loadu_si512(wp.add(c * 64) as *const _);
            }
            for (r, ar) in a.iter_mut().enumerate() {
                let xb = (x.add(r * xs + k * 4) as *const i32).read_unaligned();
                let xv = _mm512_xor_si512(_mm512_set1_epi32(xb), flip);
                for c in 0..C {
                    ar[c] = _mm512_dpbusd_epi32(ar[c], xv, wv[c]);
                }
            }
        }
        for (r, ar) in a.iter().enumerate() {
            for (c, v) in ar.iter().enumerate() {
                _mm512_storeu_si512(acc.add(r * accs + c * 16) as *mut _, *v);
            }
        }
    }

    #[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
    #[inline]
    unsafe fn vnni_rows<const R: usize>(x: *const i8, xs: usize, w: &PackedI8, acc: *mut i32) {
        let (np, k4) = (w.np, w.kp / 4);
        let mut c = 0;
        while c + 64 <= np {
            vnni_tile::<R, 4>(x, xs, w.data.as_ptr().add(c * 4), np, k4, acc.add(c), np);
            c += 64;
        }
        while c < np {
            vnni_tile::<R, 1>(x, xs, w.data.as_ptr().add(c * 4), np, k4, acc.add(c), np);
            c += 16;
        }
    }

    #[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
    pub unsafe fn dense_i8_vnni(x: &[i8], xs: usize, rows: usize, w: &PackedI8, acc: &mut [i32]) {
        let (xp, ap) = (x.as_ptr(), acc.as_mut_ptr());
        let mut r = 0;
        while r + 4 <= rows {
            vnni_rows::<4>(xp.add(r * xs), xs, w, ap.add(r * w.np));
            r += 4;
        }
        while r < rows {
            vnni_rows::<1>(xp.add(r * xs), xs, w, ap.add(r * w.np));
            r += 1;
        }
    }

    /// Widens to 16 bits and uses pairwise multiply-add; each 4-column
    /// group accumulates two partial sums per column.
    #[target_feature(enable = "avx2")]
    #[inline]
    unsafe fn avx2_tile<const R: usize>(x: *const i8, xs: usize, w: *const i8, np: usize, k4: usize, acc: *mut i32, accs: usize) {
        let flip = _mm_set1_epi32(0x8080_8080u32 as i32);
        let mut a = [[_mm256_setzero_si256(); 4]; R];
        for k in 0..k4 {
            let wp = w.add(k * np * 4);
            let mut wv = [_mm256_setzero_si256(); 4];
            for (g, v) in wv.iter_mut().enumerate() {
                *v = _mm256_cvtepi8_epi16(_mm_loadu_si128(wp.add(g * 16) as *const _));
            }
            for (r, ar) in a.iter_mut().enumerate() {
                let xb = (x.add(r * xs + k * 4) as *const i32).read_unaligned();
                let xv = _mm256_cvtepu8_epi16(_mm_xor_si128(_mm_set1_epi32(xb), flip));
                for g in 0..4 {
                    ar[g] = _mm256_add_epi32(ar[g], _mm256_madd_epi16(xv, wv[g]));
                }
            }
        }
        for (r, ar) in a.iter().enumerate() {
            for (g, v) in ar.iter().enumerate() {
                let mut lanes = [0i32; 8];
                _mm256_storeu_si256(lanes.as_mut_ptr() as *mut _, *v);
                for c in 0..4 {
                    *acc.add(r * accs + g * 4 + c) = lanes[2 * c] + lanes[2 * c + 1];
                }
            }
        }
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn dense_i8_avx2(x: &[i8], xs: usize, rows: usize, w: &PackedI8, acc: &mut [i32]) {
        let (np, k4) = (w.np, w.kp / 4);
        let (xp, ap) = (x.as_ptr(), acc.as_mut_ptr());
        let mut r = 0;
        while r < rows {
            let two = r + 2 <= rows;
            let mut c = 0;
            while c < np {
                let wp = w.data.as_ptr().add(c * 4);
                if two {
                    avx2_tile::<2>(xp.add(r * xs), xs, wp, np, k4, ap.add(r * np + c), np);
                } else {
                    avx2_tile::<1>(xp.add(r * xs), xs, wp, np, k4, ap.add(r * np + c), np);
                }
                c += 16;
            }
            r += if two { 2 } else { 1 };
        }
    }

    #[target_feature(enable = "avx512f")]
    #[inline]
    unsafe fn f32_tile_512<const R: usize, const C: usize>(
        x: *const f32,
        xs: usize,
        k: usize,
        w: *const f32,
        np: usize,
        out: *mut f32,
    ) {
        let mut a = [[_mm512_setzero_ps(); C]; R];
        for kk in 0..k {
            let wp = w.add(kk * np);
            let mut wv = [_mm512_setzero_ps(); C];
            for (c, v) in wv.iter_mut().enumerate() {
                *v = _mm512_loadu_ps(wp.add(c * 16));
            }
            for (r, ar) in a.iter_mut().enumerate() {
                let xv = _mm512_set1_ps(*x.add(r * xs + kk));
                for c in 0..C {
                    ar[c] = _mm512_fmadd_ps(xv, wv[c], ar[c]);
                }
            }
        }
        for (r, ar) in a.iter().enumerate() {
            for (c, v) in ar.iter().enumerate() {
                _mm512_storeu_ps(out.add(r * np + c * 16), *v);
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    #[inline]
    unsafe fn f32_rows_512<const R: usize>(x: *const f32, xs: usize, w: &PackedF32, out: *mut f32) {
        let np = w.np;
        let mut c = 0;
        while c + 64 <= np {
            f32_tile_512::<R, 4>(x, xs, w.k, w.data.as_ptr().add(c), np, out.add(c));
            c += 64;
        }
        while c < np {
            f32_tile_512::<R, 1>(x, xs, w.k, w.data.as_ptr().add(c), np, out.add(c));
            c += 16;
        }
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn dense_f32_avx512(x: &[f32], xs: usize, rows: usize, w: &PackedF32, out: &mut [f32]) {
        let (xp, op) = (x.as_ptr(), out.as_mut_ptr());
        let mut r = 0;
        while r + 4 <= rows {
            f32_rows_512::<4>(xp.add(r * xs), xs, w, op.add(r * w.np));
            r += 4;
        }
        while r < rows {
            f32_rows_512::<1>(xp.add(r * xs), xs, w, op.add(r * w.np));
            r += 1;
        }
    }

    #[target_feature(enable = "avx2,fma")]
    #[inline]
    unsafe fn f32_tile_256<const R: usize>(x: *const f32, xs: usize, k: usize, w: *const f32, np: usize, out: *mut f32) {
        let mut a = [[_mm256_setzero_ps(); 2]; R];
        for kk in 0..k {
            let wp = w.add(kk * np);
            let w0 = _mm256_loadu_ps(wp);
            let w1 = _mm256_loadu_ps(wp.add(8));
            for (r, ar) in a.iter_mut().enumerate() {
                let xv = _mm256_set1_ps(*x.add(r * xs + kk));
                ar[0] = _mm256_fmadd_ps(xv, w0, ar[0]);
                ar[1] = _mm256_fmadd_ps(xv, w1, ar[1]);
            }
        }
        for (r, ar) in a.iter().enumerate() {
            _mm256_storeu_ps(out.add(r * np), ar[0]);
            _mm256_storeu_ps(out.add(r * np + 8), ar[1]);
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dense_f32_avx2(x: &[f32], xs: usize, rows: usize, w: &PackedF32, out: &mut [f32]) {
        let np = w.np;
        let (xp, op) = (x.as_ptr(), out.as_mut_ptr());
        let mut r = 0;
        while r < rows {
            let four = r + 4 <= rows;
            let mut c = 0;
            while c < np {
                let (xr, wp, o) = (xp.add(r * xs), w.data.as_ptr().add(c), op.add(r * np + c));
                if four {
                    f32_tile_256::<4>(xr, xs, w.k, wp, np, o);
                } else {
                    f32_tile_256::<1>(xr, xs, w.k, wp, np, o);
                }
                c += 16;
            }
            r += if four { 4 } else { 1 };
        }
    }

    #[target_feature(enable = "avx512f,avx512bw,avx512vbmi")]
    pub unsafe fn lut_vbmi(table: &[i8], src: &[i8], dst: &mut [i8]) {
        let tp = table.as_ptr();
        let t0 = _mm512_loadu_si512(tp as *const _);
        let t1 = _mm512_loadu_si512(tp.add(64) as *const _);
        let t2 = _mm512_loadu_si512(tp.add(128) as *const _);
        let t3 = _mm512_loadu_si512(tp.add(192) as *const _);
        let flip = _mm512_set1_epi8(-128);
        let n = src.len();
        let mut i = 0;
        while i + 64 <= n {
            let idx = _mm512_xor_si512(_mm512_loadu_si512(src.as_ptr().add(i) as *const _), flip);
            let lo = _mm512_permutex2var_epi8(t0, idx, t1);
            let hi = _mm512_permutex2var_epi8(t2, idx, t3);
            let m = _mm512_movepi8_mask(idx);
            _mm512_storeu_si512(dst.as_mut_ptr().add(i) as *mut _, _mm512_mask_blend_epi8(m, lo, hi));
            i += 64;
        }
        for j in i..n {
            dst[j] = table[(src[j] as i32 + 128) as usize];
        }
    }
}
