//! Graph isomorphism layer: `h_i = f((1 + eps) x_i + sum_{j in N(i)} x_j)`
//! with `f` a stack of linear layers (ReLU between them).

use serde::{Deserialize, Serialize};

use super::{edge_mask, quant_act, quant_param, Ctx, Prepared, SiteSet};
use crate::autodiff::Var;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GinLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `(weight, bias)` slots of the MLP, first to last.
    pub mlp: Vec<(usize, Option<usize>)>,
    /// `1 x 1` trainable epsilon.
    pub eps: usize,
}

/// Site key for MLP stage `i`: stage 0 uses the plain names.
pub fn stage_key(base: &str, i: usize) -> String {
    if i == 0 {
        base.to_string()
    } else {
        format!("{base}.{i}")
    }
}

impl GinLayer {
    pub fn site_keys(&self) -> Vec<String> {
        let mut k: Vec<String> = ["inputs", "message", "aggregate", "features", "update"].iter().map(|s| s.to_string()).collect();
        for (i, (_, b)) in self.mlp.iter().enumerate() {
            k.push(stage_key("weights", i));
            if b.is_some() {
                k.push(stage_key("bias", i));
            }
            if i > 0 {
                k.push(stage_key("features", i));
            }
        }
        k
    }

    pub fn forward<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        prep: &Prepared,
        sites: &mut SiteSet,
        mask: Option<&[bool]>,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var<'t>> {
        let n = prep.num_nodes;
        let (src, dst) = (&prep.plain.src, &prep.plain.dst);
        let emask = mask.map(|m| edge_mask(m, src));
        let emask = emask.as_deref();

        let xq = quant_act(x, sites, "inputs", mask, ctx)?;
        let msg = xq.gather(src)?;
        let mq = quant_act(msg, sites, "message", emask, ctx)?;
        let agg = mq.scatter_add(dst, n)?;
        let aq = quant_act(agg, sites, "aggregate", mask, ctx)?;

        let combined = xq.mul_scalar(&params[self.eps])?.add(&xq)?.add(&aq)?;
        let mut h = quant_act(combined, sites, "features", mask, ctx)?;

        for (i, &(w, b)) in self.mlp.iter().enumerate() {
            if i > 0 {
                h = quant_act(h.relu(), sites, &stage_key("features", i), mask, ctx)?;
            }
            let wq = quant_param(params[w], sites, &stage_key("weights", i), ctx)?;
            h = h.matmul(&wq)?;
            if let Some(b) = b {
                let bq = quant_param(params[b], sites, &stage_key("bias", i), ctx)?;
                h = h.add_row(&bq)?;
            }
        }
        quant_act(h, sites, "update", mask, ctx)
    }
}
