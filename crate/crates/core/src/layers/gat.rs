//! Multi-head graph attention with self-loops. Heads are concatenated.

use serde::{Deserialize, Serialize};

use super::{edge_mask, quant_act, quant_param, Ctx, Prepared, SiteSet};
use crate::autodiff::Var;
use crate::error::Result;

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub in_dim: usize,
    pub head_dim: usize,
    pub heads: usize,
    /// `in_dim x heads*head_dim`.
    pub weight: usize,
    /// `1 x heads*head_dim` each.
    pub att_src: usize,
    pub att_dst: usize,
    pub bias: Option<usize>,
    pub att_dropout: f32,
}

impl GatLayer {
    pub fn out_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn site_keys(&self) -> Vec<String> {
        let mut k: Vec<String> = [
            "inputs", "weights", "att_src", "att_dst", "features", "attention", "message", "aggregate", "update",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        if self.bias.is_some() {
            k.push("bias".into());
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
        let (src, dst) = (&prep.looped.src, &prep.looped.dst);
        let emask = mask.map(|m| edge_mask(m, src));
        let emask = emask.as_deref();

        let xq = quant_act(x, sites, "inputs", mask, ctx)?;
        let wq = quant_param(params[self.weight], sites, "weights", ctx)?;
        let h = xq.matmul(&wq)?;
        let hq = quant_act(h, sites, "features", mask, ctx)?;

        let a_s = quant_param(params[self.att_src], sites, "att_src", ctx)?;
        let a_d = quant_param(params[self.att_dst], sites, "att_dst", ctx)?;
        let s_src = hq.mul_row(&a_s)?.block_sum(self.heads)?;
        let s_dst = hq.mul_row(&a_d)?.block_sum(self.heads)?;
        let logits = s_src.gather(src)?.add(&s_dst.gather(dst)?)?.leaky_relu(LEAKY_SLOPE);
        let lq = quant_act(logits, sites, "attention", emask, ctx)?;

        let alpha = lq.segment_softmax(dst, n)?;
        let alpha = alpha.dropout(self.att_dropout, ctx.training, ctx.rng);

        let msg = hq.gather(src)?.mul_blocks(&alpha)?;
        let mq = quant_act(msg, sites, "message", emask, ctx)?;
        let agg = mq.scatter_add(dst, n)?;
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
