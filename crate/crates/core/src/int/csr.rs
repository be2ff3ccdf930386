//! Compressed sparse rows over incoming edges.

use crate::error::{Error, Result};

/// Row `i` lists the sources of edges into node `i`, in edge-list order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsrAdjacency {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    /// Position of each entry in the original edge list.
    pub edge_id: Vec<u32>,
}

impl CsrAdjacency {
    pub fn from_edges(src: &[usize], dst: &[usize], n: usize) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::Dimension(format!("{} sources for {} targets", src.len(), dst.len())));
        }
        if n > u32::MAX as usize || src.len() > u32::MAX as usize {
            return Err(Error::Unsupported("graph too large for 32-bit indices".into()));
        }
        let mut row_ptr = vec![0usize; n + 1];
        for (&s, &t) in src.iter().zip(dst) {
            if s >= n || t >= n {
                return Err(Error::Index(format!("edge ({s}, {t}) outside {n} nodes")));
            }
            row_ptr[t + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut next = row_ptr.clone();
        let mut col_idx = vec![0u32; src.len()];
        let mut edge_id = vec![0u32; src.len()];
        for (e, (&s, &t)) in src.iter().zip(dst).enumerate() {
            let p = next[t];
            col_idx[p] = s as u32;
            edge_id[p] = e as u32;
            next[t] += 1;
        }
        Ok(Self { row_ptr, col_idx, edge_id })
    }

    pub fn num_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn max_row_len(&self) -> usize {
        self.row_ptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// Reorders per-edge values (in edge-list order, `width` per edge) into
    /// CSR order.
    pub fn permute<T: Copy>(&self, values: &[T], width: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(values.len());
        for &e in &self.edge_id {
            let e = e as usize * width;
            out.extend_from_slice(&values[e..e + width]);
        }
        out
    }
}
