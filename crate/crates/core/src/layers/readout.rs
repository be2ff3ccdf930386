//! Graph-level pooling and the quantized output MLP. Readout sites never
//! use protection masks.

use serde::{Deserialize, Serialize};

use super::gin::stage_key;
use super::{quant_act, quant_param, Ctx, SiteSet};
use crate::autodiff::{Index, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Sum,
    Mean,
}

/// Per-graph reduction of node rows by the batch vector.
pub fn global_pool<'t>(h: Var<'t>, batch: &Index, num_graphs: usize, mode: Pool) -> Result<Var<'t>> {
    let summed = h.scatter_add(batch, num_graphs)?;
    match mode {
        Pool::Sum => Ok(summed),
        Pool::Mean => {
            let mut counts = vec![0.0f32; num_graphs];
            for &g in batch.iter() {
                counts[g] += 1.0;
            }
            let inv = Tensor::from_vec(num_graphs, 1, counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect())?;
            summed.mul_blocks(&h.tape().constant(inv))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub pool: Pool,
    /// `(weight, bias)` slots, ReLU between stages.
    pub mlp: Vec<(usize, Option<usize>)>,
}

impl Readout {
    pub fn site_keys(&self) -> Vec<String> {
        let mut k = vec!["inputs".to_string(), "update".to_string()];
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
        h: Var<'t>,
        batch: &Index,
        num_graphs: usize,
        sites: &mut SiteSet,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var<'t>> {
        if self.mlp.is_empty() {
            return Err(Error::Config("readout needs at least one linear stage".into()));
        }
        let pooled = global_pool(h, batch, num_graphs, self.pool)?;
        let mut z = quant_act(pooled, sites, "inputs", None, ctx)?;
        for (i, &(w, b)) in self.mlp.iter().enumerate() {
            if i > 0 {
                z = quant_act(z.relu(), sites, &stage_key("features", i), None, ctx)?;
            }
            let wq = quant_param(params[w], sites, &stage_key("weights", i), ctx)?;
            z = z.matmul(&wq)?;
            if let Some(b) = b {
                let bq = quant_param(params[b], sites, &stage_key("bias", i), ctx)?;
                z = z.add_row(&bq)?;
            }
        }
        quant_act(z, sites, "update", None, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use std::rc::Rc;

    #[test]
    fn sum_pool_of_one_graph_is_column_sum() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[[1.0f32, 2.0], [3.0, 4.0]]).unwrap());
        let p = global_pool(h, &Rc::from(vec![0, 0]), 1, Pool::Sum).unwrap();
        assert_eq!(p.value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mean_pool_of_identical_rows() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[[1.5f32, -2.0], [1.5, -2.0], [1.5, -2.0]]).unwrap());
        let p = global_pool(h, &Rc::from(vec![0, 0, 0]), 1, Pool::Mean).unwrap();
        for (a, b) in p.value().data().iter().zip([1.5, -2.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
