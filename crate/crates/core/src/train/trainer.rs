//! Node- and graph-classification training loops with early stopping on
//! validation loss.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::{Resolved, TrainConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBatch, LabeledGraph, Split};
use crate::layers::{Arch, Ctx, Prepared, Probe, Protection};
use crate::mask::{attach_prob_masks, build_prob_mask};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub arch: Arch,
    pub config: TrainConfig,
    pub resolved: Resolved,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_acc: f64,
    /// Measured once, on the kept parameters.
    pub test_acc: f64,
    pub test_loss: f64,
    pub wall_clock_s: f64,
}

impl RunMetrics {
    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", e.epoch, e.train_loss, e.val_loss, e.val_acc));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Trained model (best-validation snapshot) and its metrics.
pub struct Trained {
    pub model: Model,
    pub metrics: RunMetrics,
}

/// Independent random stream `k` derived from a run seed.
pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

const DROPOUT_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;

/// Mean cross-entropy and accuracy of `logits` over `rows`.
pub fn loss_and_accuracy(logits: &Tensor, labels: &[usize], rows: &[usize]) -> (f64, f64) {
    if rows.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for &r in rows {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        loss -= row[labels[r]] as f64 - m - z.ln();
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        correct += (best == labels[r]) as usize;
    }
    (loss / rows.len() as f64, correct as f64 / rows.len() as f64)
}

/// Builds the model for a configuration; `ModelSpec::dropout` is replaced when
/// the configuration sets one.
pub fn build_model(mut spec: ModelSpec, resolved: &Resolved, seed: u64) -> Result<Model> {
    if let Some(p) = resolved.dropout {
        spec.dropout = p;
    }
    Model::new(spec, resolved.quant.clone(), seed)
}

struct StepState {
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
}

impl StepState {
    fn new(seed: u64) -> Self {
        Self {
            rng: stream(seed, DROPOUT_STREAM),
            noise_rng: stream(seed, NOISE_STREAM),
            mask_rng: stream(seed, MASK_STREAM),
        }
    }

    /// One optimizer step on a training forward pass; returns the loss.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        model: &mut Model,
        opt: &mut Adam,
        prep: &Prepared,
        labels: &[usize],
        rows: &[usize],
        resolved: &Resolved,
        epoch: usize,
        probe: Option<&mut dyn Probe>,
    ) -> Result<f64> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(true, &mut self.rng, &mut self.noise_rng);
        ctx.noise_rate = resolved.noise_rate;
        ctx.protection = resolved.protection.map(|d| Protection { rng: &mut self.mask_rng, shared: d.shared_mask });
        ctx.probe = probe.map(|p| p as &mut dyn Probe);
        let out = model.forward(&tape, prep, &mut ctx)?;
        let loss = out.logits.cross_entropy(labels, rows)?;
        let lv = loss.value().item();
        if !lv.is_finite() || ctx.nonfinite.is_some() {
            let site = ctx.nonfinite.take().unwrap_or_else(|| "loss".to_string());
            return Err(Error::NonFinite { epoch, site });
        }
        let mut grads = tape.backward(loss)?;
        let g: Vec<Option<Tensor>> = out.params.iter().map(|&p| grads.take(p)).collect();
        if let Some(i) = g.iter().position(|g| g.as_ref().is_some_and(|t| !t.all_finite())) {
            return Err(Error::NonFinite { epoch, site: format!("gradient of {}", model.params[i].name) });
        }
        opt.step(&mut model.params, &g);
        Ok(lv as f64)
    }
}

/// Optional hooks into a training run.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Sees every training forward pass.
    pub probe: Option<&'a mut dyn Probe>,
    /// Called after each epoch with the epoch index and the current model.
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<&'a mut dyn FnMut(usize, &Model)>,
}

/// Prepared graph with protection probabilities attached when needed.
pub fn prepare_node_graph(graph: &Graph, resolved: &Resolved) -> Result<Prepared> {
    let mut prep = Prepared::new(graph);
    if let Some(d) = &resolved.protection {
        prep.probs = Some(build_prob_mask(graph.in_degree(), d.p_min, d.p_max)?);
    }
    Ok(prep)
}

pub fn train_node(graph: &Graph, spec: ModelSpec, config: &TrainConfig) -> Result<Trained> {
    train_node_with(graph, spec, config, Hooks::default())
}

pub fn train_node_with(graph: &Graph, spec: ModelSpec, config: &TrainConfig, mut hooks: Hooks<'_>) -> Result<Trained> {
    let start = Instant::now();
    let arch = spec.arch;
    let resolved = config.resolve(arch)?;
    if graph.y().len() != graph.num_nodes() {
        return Err(Error::Config("node classification needs a label per node".into()));
    }
    let prep = prepare_node_graph(graph, &resolved)?;
    let train_rows = graph.split_rows(Split::Train);
    let val_rows = graph.split_rows(Split::Val);
    let test_rows = graph.split_rows(Split::Test);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::Contract("training needs non-empty train and validation splits".into()));
    }
    let mut model = build_model(spec, &resolved, config.seed)?;
    let mut opt = Adam::new(&model.params, resolved.lr, config.weight_decay);
    let mut state = StepState::new(config.seed);

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, f64, Model)> = None;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        let probe = hooks.probe.as_mut().map(|p| &mut **p as &mut dyn Probe);
        let train_loss = state.step(&mut model, &mut opt, &prep, graph.y(), &train_rows, &resolved, epoch, probe)?;
        let logits = model.predict(&prep)?;
        let (val_loss, val_acc) = loss_and_accuracy(&logits, graph.y(), &val_rows);
        epochs.push(EpochRecord { epoch, train_loss, val_loss, val_acc });
        if let Some(f) = hooks.on_epoch.as_deref_mut() {
            f(epoch, &model);
        }
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, val_acc, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, best_val_acc, mut best_model) = best.expect("at least one epoch");
    let logits = best_model.predict(&prep)?;
    let (test_loss, test_acc) = loss_and_accuracy(&logits, graph.y(), &test_rows);
    let metrics = RunMetrics {
        arch,
        config: config.clone(),
        resolved,
        seed: config.seed,
        epochs,
        best_epoch,
        best_val_loss,
        best_val_acc,
        test_acc,
        test_loss,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(Trained { model: best_model, metrics })
}

/// Shuffled 70/15/15 split of graph indices.
pub fn split_corpus(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, SHUFFLE_STREAM));
    let n_train = n * 7 / 10;
    let n_val = n * 15 / 100;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    (idx, val, test)
}

/// Prepared batch of the given corpus members.
pub fn prepare_batch(corpus: &[LabeledGraph], members: &[usize]) -> Result<(Prepared, Vec<usize>)> {
    let items: Vec<&LabeledGraph> = members.iter().map(|&i| &corpus[i]).collect();
    let b = GraphBatch::from_graphs(&items)?;
    let prep = Prepared::new(&b.graph).with_batch(&b.batch, b.num_graphs);
    Ok((prep, b.labels))
}

fn eval_graphs(model: &mut Model, corpus: &[LabeledGraph], members: &[usize]) -> Result<(f64, f64)> {
    if members.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (prep, labels) = prepare_batch(corpus, members)?;
    let logits = model.predict(&prep)?;
    let rows: Vec<usize> = (0..labels.len()).collect();
    Ok(loss_and_accuracy(&logits, &labels, &rows))
}

/// Graph classification with minibatches; protection probabilities are
/// computed per graph.
pub fn train_graph(corpus: &[LabeledGraph], spec: ModelSpec, config: &TrainConfig) -> Result<Trained> {
    let start = Instant::now();
    let arch = spec.arch;
    let resolved = config.resolve(arch)?;
    let corpus: Vec<LabeledGraph> = match &resolved.protection {
        Some(d) => attach_prob_masks(corpus.to_vec(), d.p_min, d.p_max)?,
        None => corpus.to_vec(),
    };
    let (train_idx, val_idx, test_idx) = split_corpus(corpus.len(), config.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Contract("corpus too small for a train/validation split".into()));
    }
    let mut model = build_model(spec, &resolved, config.seed)?;
    let mut opt = Adam::new(&model.params, resolved.lr, config.weight_decay);
    let mut state = StepState::new(config.seed);
    let mut shuffle = stream(config.seed, SHUFFLE_STREAM + 1);

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, f64, Model)> = None;
    let mut since_best = 0;
    let mut order = train_idx.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (prep, labels) = prepare_batch(&corpus, chunk)?;
            let rows: Vec<usize> = (0..labels.len()).collect();
            let l = state.step(&mut model, &mut opt, &prep, &labels, &rows, &resolved, epoch, None)?;
            total += l * chunk.len() as f64;
        }
        let (val_loss, val_acc) = eval_graphs(&mut model, &corpus, &val_idx)?;
        epochs.push(EpochRecord { epoch, train_loss: total / order.len() as f64, val_loss, val_acc });
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, val_acc, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, best_val_acc, mut best_model) = best.expect("at least one epoch");
    let (test_loss, test_acc) = eval_graphs(&mut best_model, &corpus, &test_idx)?;
    let metrics = RunMetrics {
        arch,
        config: config.clone(),
        resolved,
        seed: config.seed,
        epochs,
        best_epoch,
        best_val_loss,
        best_val_acc,
        test_acc,
        test_loss,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(Trained { model: best_model, metrics })
}

/// Loss and accuracy of a model on one split, in eval mode.
pub fn evaluate(model: &mut Model, graph: &Graph, split: Split) -> Result<(f64, f64)> {
    let rows = graph.split_rows(split);
    if rows.is_empty() {
        return Err(Error::Contract(format!("split {split:?} is empty")));
    }
    let logits = model.predict(&Prepared::new(graph))?;
    Ok(loss_and_accuracy(&logits, graph.y(), &rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_of_uniform_logits() {
        let logits = Tensor::zeros(2, 7);
        let (l, _) = loss_and_accuracy(&logits, &[1, 2], &[0, 1]);
        assert!((l - 7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn corpus_split_is_a_partition() {
        let (a, b, c) = split_corpus(40, 3);
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        assert_eq!((a.len(), b.len()), (28, 6));
    }
}
