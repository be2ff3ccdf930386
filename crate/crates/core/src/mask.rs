//! Degree-based protection probabilities and per-step Bernoulli masks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, LabeledGraph};

/// Protection probability per node, interpolated between `p_min` and `p_max`
/// along the cumulative in-degree distribution: nodes whose in-degree is at
/// the top of the distribution get `p_max`.
pub fn build_prob_mask(in_degree: &[usize], p_min: f32, p_max: f32) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&p_min) || !(0.0..=1.0).contains(&p_max) {
        return Err(Error::Config(format!("protection probabilities ({p_min}, {p_max}) outside [0, 1]")));
    }
    if p_min > p_max {
        return Err(Error::Config(format!("p_min {p_min} exceeds p_max {p_max}")));
    }
    let n = in_degree.len();
    let Some(&max_deg) = in_degree.iter().max() else {
        return Ok(Vec::new());
    };
    let mut counts = vec![0usize; max_deg + 1];
    for &d in in_degree {
        counts[d] += 1;
    }
    let step = (p_max as f64 - p_min as f64) / n as f64;
    let mut acc = 0.0f64;
    let mut per_degree: Vec<f32> = counts
        .iter()
        .map(|&c| {
            acc += c as f64 * step;
            (p_min as f64 + acc) as f32
        })
        .collect();
    per_degree[max_deg] = p_max;
    Ok(in_degree.iter().map(|&d| per_degree[d].clamp(p_min, p_max)).collect())
}

/// Attaches protection probabilities to a graph.
pub fn attach_prob_mask(graph: Graph, p_min: f32, p_max: f32) -> Result<Graph> {
    let p = build_prob_mask(graph.in_degree(), p_min, p_max)?;
    graph.with_prob_mask(p)
}

/// Per-graph probabilities for every graph of a corpus.
pub fn attach_prob_masks(corpus: Vec<LabeledGraph>, p_min: f32, p_max: f32) -> Result<Vec<LabeledGraph>> {
    corpus
        .into_iter()
        .map(|g| Ok(LabeledGraph { graph: attach_prob_mask(g.graph, p_min, p_max)?, label: g.label }))
        .collect()
}

/// Independent draws `m_i ~ Bernoulli(p_i)`.
pub fn sample_mask<R: Rng + ?Sized>(p: &[f32], rng: &mut R) -> Vec<bool> {
    p.iter().map(|&pi| rng.random::<f32>() < pi).collect()
}
