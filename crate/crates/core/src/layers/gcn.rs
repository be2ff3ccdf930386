//! Graph convolution: `h_i = sum_{j in N(i) + i} 1/sqrt(d_i d_j) W x_j + b`.

use serde::{Deserialize, Serialize};

use super::{edge_mask, quant_act, quant_param, Ctx, Prepared, SiteSet};
use crate::autodiff::Var;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Parameter slots in the model's parameter list.
    pub weight: usize,
    pub bias: Option<usize>,
}

impl GcnLayer {
    pub fn site_keys(&self) -> Vec<String> {
        let mut k: Vec<String> = ["inputs", "weights", "features", "norm", "message", "aggregate", "update"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.bias.is_some() {
            k.push("bias".into());
        }
        k
    }

    /// `mask` marks protected nodes (training with protection only).
    pub fn forward<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        prep: &Prepared,
        sites: &mut SiteSet,
        mask: Option<&[bool]>,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var<'t>> {
        let tape = x.tape();
        let n = prep.num_nodes;
        let emask = mask.map(|m| edge_mask(m, &prep.looped.src));
        let emask = emask.as_deref();

        let xq = quant_act(x, sites, "inputs", mask, ctx)?;
        let wq = quant_param(params[self.weight], sites, "weights", ctx)?;
        let h = xq.matmul(&wq)?;
        let hq = quant_act(h, sites, "features", mask, ctx)?;

        let norm = tape.constant(prep.gcn_norm.clone());
        let nq = quant_act(norm, sites, "norm", emask, ctx)?;

        let msg = hq.gather(&prep.looped.src)?.mul_blocks(&nq)?;
        let mq = quant_act(msg, sites, "message", emask, ctx)?;
        let agg = mq.scatter_add(&prep.looped.dst, n)?;
        let aq = quant_act(agg, sites, "aggregate", mask, ctx)?;

        let upd = match self.bias {
            Some(b) => {
                let bq = quant_param(params[b], sites, "bias", ctx)?;
                aq.add_row(&bq)?
            }
            None => aq,
        };
        quant_act(upd, sites, "update", mask, ctx)
    }
}
