//! Stacked message-passing models with an optional graph-level readout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::gat::GatLayer;
use crate::layers::gcn::GcnLayer;
use crate::layers::gin::GinLayer;
use crate::layers::readout::{Pool, Readout};
use crate::layers::{glorot, Arch, Ctx, Prepared, QuantSpec, SiteSet};
use crate::mask::sample_mask;
use crate::tensor::Tensor;

pub const ELU_ALPHA: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Node,
    Graph { pool: Pool, readout_hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub num_layers: usize,
    /// Attention heads of every GAT layer but the last.
    pub heads: usize,
    pub out_heads: usize,
    pub dropout: f32,
    pub att_dropout: f32,
    pub bias: bool,
    /// Linear stages inside each GIN update function.
    pub gin_mlp_depth: usize,
    pub task: Task,
}

impl ModelSpec {
    /// Two-layer citation-network architectures: 16 hidden units for GCN and
    /// GIN (single linear update), 8 heads of 8 units for GAT.
    pub fn citation(arch: Arch, in_dim: usize, num_classes: usize) -> Self {
        let base = Self {
            arch,
            in_dim,
            hidden: 16,
            out_dim: num_classes,
            num_layers: 2,
            heads: 1,
            out_heads: 1,
            dropout: 0.5,
            att_dropout: 0.0,
            bias: true,
            gin_mlp_depth: 1,
            task: Task::Node,
        };
        match arch {
            Arch::Gat => Self { hidden: 8, heads: 8, dropout: 0.6, att_dropout: 0.6, ..base },
            _ => base,
        }
    }

    /// GIN encoder with a sum-pooled two-stage readout.
    pub fn graph_classifier(in_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            arch: Arch::Gin,
            in_dim,
            hidden,
            out_dim: num_classes,
            num_layers: 3,
            heads: 1,
            out_heads: 1,
            dropout: 0.0,
            att_dropout: 0.0,
            bias: true,
            gin_mlp_depth: 2,
            task: Task::Graph { pool: Pool::Sum, readout_hidden: hidden },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("model dimensions and layer count must be positive".into()));
        }
        if self.arch == Arch::Gat && (self.heads == 0 || self.out_heads == 0) {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        if self.arch == Arch::Gin && self.gin_mlp_depth == 0 {
            return Err(Error::Config("GIN update needs at least one linear stage".into()));
        }
        for p in [self.dropout, self.att_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum Layer {
    Gcn(GcnLayer),
    Gat(GatLayer),
    Gin(GinLayer),
}

impl Layer {
    pub fn site_keys(&self) -> Vec<String> {
        match self {
            Layer::Gcn(l) => l.site_keys(),
            Layer::Gat(l) => l.site_keys(),
            Layer::Gin(l) => l.site_keys(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Gcn(l) => l.out_dim,
            Layer::Gat(l) => l.out_dim(),
            Layer::Gin(l) => l.out_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Parameters, layer topology and quantization state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub quant: QuantSpec,
    pub params: Vec<Param>,
    pub layers: Vec<Layer>,
    pub sites: Vec<SiteSet>,
    pub readout: Option<Readout>,
    pub readout_sites: SiteSet,
}

/// Output of a forward pass and the leaves the parameters were bound to.
pub struct Forward<'t> {
    pub logits: Var<'t>,
    pub params: Vec<Var<'t>>,
}

struct Builder<'r> {
    params: Vec<Param>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn glorot(&mut self, name: String, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> usize {
        let value = glorot(rows, cols, fan_in, fan_out, self.rng);
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.params.push(Param { name, value: Tensor::zeros(rows, cols) });
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, i: usize, o: usize, bias: bool) -> (usize, Option<usize>) {
        let w = self.glorot(format!("{prefix}.weight"), i, o, i, o);
        let b = bias.then(|| self.zeros(format!("{prefix}.bias"), 1, o));
        (w, b)
    }
}

impl Model {
    pub fn new(spec: ModelSpec, quant: QuantSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: Vec::new(), rng: &mut rng };
        let node_task = spec.task == Task::Node;
        let mut layers = Vec::with_capacity(spec.num_layers);
        let mut in_dim = spec.in_dim;
        for l in 0..spec.num_layers {
            let last = l + 1 == spec.num_layers;
            let p = format!("layers.{l}");
            let layer = match spec.arch {
                Arch::Gcn => {
                    let out = if last && node_task { spec.out_dim } else { spec.hidden };
                    let (weight, bias) = b.linear(&p, in_dim, out, spec.bias);
                    Layer::Gcn(GcnLayer { in_dim, out_dim: out, weight, bias })
                }
                Arch::Gat => {
                    let (heads, head_dim) =
                        if last && node_task { (spec.out_heads, spec.out_dim) } else { (spec.heads, spec.hidden) };
                    let width = heads * head_dim;
                    let weight = b.glorot(format!("{p}.weight"), in_dim, width, in_dim, width);
                    let att_src = b.glorot(format!("{p}.att_src"), 1, width, heads, head_dim);
                    let att_dst = b.glorot(format!("{p}.att_dst"), 1, width, heads, head_dim);
                    let bias = spec.bias.then(|| b.zeros(format!("{p}.bias"), 1, width));
                    Layer::Gat(GatLayer {
                        in_dim,
                        head_dim,
                        heads,
                        weight,
                        att_src,
                        att_dst,
                        bias,
                        att_dropout: spec.att_dropout,
                    })
                }
                Arch::Gin => {
                    let out = if last && node_task { spec.out_dim } else { spec.hidden };
                    let mut mlp = Vec::with_capacity(spec.gin_mlp_depth);
                    let mut d = in_dim;
                    for s in 0..spec.gin_mlp_depth {
                        let o = if s + 1 == spec.gin_mlp_depth { out } else { spec.hidden };
                        mlp.push(b.linear(&format!("{p}.mlp.{s}"), d, o, spec.bias));
                        d = o;
                    }
                    let eps = b.zeros(format!("{p}.eps"), 1, 1);
                    Layer::Gin(GinLayer { in_dim, out_dim: out, mlp, eps })
                }
            };
            in_dim = layer.out_dim();
            layers.push(layer);
        }
        let readout = match spec.task {
            Task::Node => None,
            Task::Graph { pool, readout_hidden } => {
                let l0 = b.linear("readout.0", in_dim, readout_hidden, spec.bias);
                let l1 = b.linear("readout.1", readout_hidden, spec.out_dim, spec.bias);
                Some(Readout { pool, mlp: vec![l0, l1] })
            }
        };
        let params = b.params;
        let sites = layers.iter().map(|l| SiteSet::build(&l.site_keys(), &quant)).collect::<Result<Vec<_>>>()?;
        let readout_sites = match &readout {
            Some(r) => SiteSet::build(&r.site_keys(), &quant)?,
            None => SiteSet::default(),
        };
        Ok(Self { spec, quant, params, layers, sites, readout, readout_sites })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rebuilds every quantization site from `quant`, discarding observer
    /// state.
    pub fn requantize(&mut self, quant: QuantSpec) -> Result<()> {
        self.sites = self.layers.iter().map(|l| SiteSet::build(&l.site_keys(), &quant)).collect::<Result<Vec<_>>>()?;
        if let Some(r) = &self.readout {
            self.readout_sites = SiteSet::build(&r.site_keys(), &quant)?;
        }
        self.quant = quant;
        Ok(())
    }

    pub fn forward<'t>(&mut self, tape: &'t Tape, prep: &Prepared, ctx: &mut Ctx<'_>) -> Result<Forward<'t>> {
        if prep.x.cols() != self.spec.in_dim {
            return Err(Error::Dimension(format!(
                "model expects {} input features, graph has {}",
                self.spec.in_dim,
                prep.x.cols()
            )));
        }
        let params: Vec<Var<'t>> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let mut h = tape.constant(prep.x.clone());
        let protect = ctx.training && ctx.protection.is_some();
        let probs = if protect {
            Some(prep.probs.as_deref().ok_or_else(|| {
                Error::Contract("protected training needs protection probabilities on the graph".into())
            })?)
        } else {
            None
        };
        let shared = match (probs, ctx.protection.as_mut()) {
            (Some(p), Some(pr)) if pr.shared => Some(sample_mask(p, pr.rng)),
            _ => None,
        };
        let n_layers = self.layers.len();
        let activate_last = self.readout.is_some();
        for (l, layer) in self.layers.iter().enumerate() {
            ctx.layer = l;
            h = h.dropout(self.spec.dropout, ctx.training, ctx.rng);
            let mask = match (&shared, probs, ctx.protection.as_mut()) {
                (Some(m), _, _) => Some(m.clone()),
                (None, Some(p), Some(pr)) => Some(sample_mask(p, pr.rng)),
                _ => None,
            };
            let sites = &mut self.sites[l];
            h = match layer {
                Layer::Gcn(g) => g.forward(&params, h, prep, sites, mask.as_deref(), ctx)?,
                Layer::Gat(g) => g.forward(&params, h, prep, sites, mask.as_deref(), ctx)?,
                Layer::Gin(g) => g.forward(&params, h, prep, sites, mask.as_deref(), ctx)?,
            };
            if l + 1 < n_layers || activate_last {
                h = match self.spec.arch {
                    Arch::Gat => h.elu(ELU_ALPHA),
                    _ => h.relu(),
                };
            }
        }
        if let Some(r) = &self.readout {
            ctx.layer = n_layers;
            let (batch, g) = prep
                .batch
                .as_ref()
                .ok_or_else(|| Error::Contract("graph-level model needs a batch vector".into()))?;
            h = r.forward(&params, h, batch, *g, &mut self.readout_sites, ctx)?;
        }
        Ok(Forward { logits: h, params })
    }

    /// Eval-mode logits: no dropout, no masks, observers frozen.
    pub fn predict(&mut self, prep: &Prepared) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut nrng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx::new(false, &mut rng, &mut nrng);
        let tape = Tape::new();
        let out = self.forward(&tape, prep, &mut ctx)?;
        Ok(out.logits.value().as_ref().clone())
    }

    /// Runs training-mode forward passes without parameter updates so that
    /// observers see data (used to calibrate untrained models).
    pub fn calibrate(&mut self, prep: &Prepared, passes: usize) -> Result<()> {
        let dropout = (self.spec.dropout, self.spec.att_dropout);
        self.spec.dropout = 0.0;
        self.set_att_dropout(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut nrng = ChaCha8Rng::seed_from_u64(0);
        let result = (0..passes).try_for_each(|_| {
            let mut ctx = Ctx::new(true, &mut rng, &mut nrng);
            let tape = Tape::new();
            self.forward(&tape, prep, &mut ctx).map(|_| ())
        });
        self.spec.dropout = dropout.0;
        self.set_att_dropout(dropout.1);
        result
    }

    fn set_att_dropout(&mut self, p: f32) {
        self.spec.att_dropout = p;
        for l in &mut self.layers {
            if let Layer::Gat(g) = l {
                g.att_dropout = p;
            }
        }
    }
}
