//! Identities between training regimes and protection masks.

use degree_quant::graph::{citation_surrogate, Graph, SurrogateConfig};
use degree_quant::layers::{Arch, Ctx, Prepared, Protection, QuantSpec, SiteKind};
use degree_quant::model::Model;
use degree_quant::model::ModelSpec;
use degree_quant::quant::{ObserverKind, Ste};
use degree_quant::train::{train_node, DqConfig, NqatConfig, Regime, RunMetrics, TrainConfig, Trained};
use degree_quant::autodiff::Tape;
use degree_quant::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::oracle::{toy_graph, toy_model};

pub const ARCHS: [Arch; 3] = [Arch::Gcn, Arch::Gat, Arch::Gin];

pub fn small_graph() -> Graph {
    let cfg = SurrogateConfig { num_nodes: 240, num_features: 48, ..SurrogateConfig::default() };
    citation_surrogate(&cfg, 5).unwrap()
}

fn train(g: &Graph, arch: Arch, cfg: &TrainConfig) -> Result<Trained, String> {
    let spec = ModelSpec::citation(arch, g.num_features(), g.num_classes());
    train_node(g, spec, cfg).map_err(|e| format!("{arch}: {e}"))
}

fn qat(arch: Arch, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(Regime::Qat, 8, seed);
    cfg.epochs = 8;
    let r = cfg.resolve(arch).unwrap();
    cfg.ste = Some(r.quant.ste);
    cfg.observer = Some(r.quant.observer);
    cfg.lr = Some(r.lr);
    cfg
}

/// Same parameters, quantization state and per-epoch losses, bit for bit.
fn same_run(a: &Trained, b: &Trained) -> Result<(), String> {
    if a.model.params != b.model.params {
        return Err("parameters differ".into());
    }
    if a.model.sites != b.model.sites {
        return Err("quantization state differs".into());
    }
    let key = |m: &RunMetrics| {
        m.epochs.iter().map(|e| (e.train_loss.to_bits(), e.val_loss.to_bits())).collect::<Vec<_>>()
    };
    if key(&a.metrics) != key(&b.metrics) || a.metrics.test_acc != b.metrics.test_acc {
        return Err("training curves differ".into());
    }
    Ok(())
}

/// Protection with `p_min = p_max = 0` is plain QAT.
pub fn dq_zero_is_qat(g: &Graph, arch: Arch) -> Result<(), String> {
    let base = qat(arch, 3);
    let mut dq = base.clone();
    dq.regime = Regime::Dq;
    dq.dq = Some(DqConfig { p_min: 0.0, p_max: 0.0, shared_mask: false });
    same_run(&train(g, arch, &base)?, &train(g, arch, &dq)?).map_err(|e| format!("{arch}: {e}"))
}

/// Noisy QAT that quantizes every weight element is plain QAT.
pub fn nqat_one_is_qat(g: &Graph, arch: Arch) -> Result<(), String> {
    let base = qat(arch, 4);
    let mut nq = base.clone();
    nq.regime = Regime::Nqat;
    nq.nqat = Some(NqatConfig { noise_rate: 1.0 });
    same_run(&train(g, arch, &base)?, &train(g, arch, &nq)?).map_err(|e| format!("{arch}: {e}"))
}

/// QAT with every site at the bypass width trains exactly like FP32.
pub fn bypass_is_fp32(g: &Graph, arch: Arch) -> Result<(), String> {
    let mut bypass = qat(arch, 6);
    bypass.site_bits = SiteKind::for_arch(arch).into_iter().map(|k| (k, 32)).collect();
    let mut fp = TrainConfig::fp32(6);
    fp.epochs = bypass.epochs;
    fp.lr = bypass.lr;
    let (a, b) = (train(g, arch, &bypass)?, train(g, arch, &fp)?);
    if a.model.params != b.model.params {
        return Err(format!("{arch}: parameters differ"));
    }
    let losses = |t: &Trained| t.metrics.epochs.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    if losses(&a) != losses(&b) {
        return Err(format!("{arch}: training curves differ"));
    }
    Ok(())
}

/// Repeating a run with the same configuration and seed reproduces it.
pub fn seed_determinism(g: &Graph, arch: Arch) -> Result<(), String> {
    let mut cfg = TrainConfig::new(Regime::Dq, 8, 9);
    cfg.epochs = 6;
    same_run(&train(g, arch, &cfg)?, &train(g, arch, &cfg)?).map_err(|e| format!("{arch}: {e}"))
}

/// Training-mode logits with every node protected (`p = 1`) or none
/// (`p = 0`).
fn protected_logits(model: &mut Model, g: &Graph, p: f32) -> Tensor {
    let mut prep = Prepared::new(g);
    prep.probs = Some(vec![p; g.num_nodes()]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut nrng = ChaCha8Rng::seed_from_u64(2);
    let mut mrng = ChaCha8Rng::seed_from_u64(3);
    let mut ctx = Ctx::new(true, &mut rng, &mut nrng);
    ctx.protection = Some(Protection { rng: &mut mrng, shared: false });
    let tape = Tape::new();
    let out = model.forward(&tape, &prep, &mut ctx).unwrap();
    out.logits.value().as_ref().clone()
}

fn unprotected_logits(model: &mut Model, g: &Graph) -> Tensor {
    let prep = Prepared::new(g);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut nrng = ChaCha8Rng::seed_from_u64(2);
    let mut ctx = Ctx::new(true, &mut rng, &mut nrng);
    let tape = Tape::new();
    let out = model.forward(&tape, &prep, &mut ctx).unwrap();
    out.logits.value().as_ref().clone()
}

/// Symmetric 8-bit grid from the tensor's own range, round half to even.
fn quantize_weight(w: &Tensor) -> Tensor {
    let m = w.data().iter().fold(0.0f32, |a, v| a.max(v.abs()));
    if m == 0.0 {
        return w.clone();
    }
    let s = m / 127.0;
    w.map(|v| (v / s).round_ties_even().clamp(-128.0, 127.0) * s)
}

fn quantized(arch: Arch, seed: u64) -> (Model, Graph) {
    let g = toy_graph(4, 3, seed);
    let fp = toy_model(arch, 4, 3, seed + 1);
    let mut m = fp.clone();
    m.requantize(QuantSpec::new(8, Ste::Vanilla, ObserverKind::MinMax)).unwrap();
    (m, g)
}

/// With no node protected the layers behave exactly as unmasked QAT.
pub fn all_false_mask_is_qat(arch: Arch) -> Result<(), String> {
    let (m, g) = quantized(arch, 40);
    let a = protected_logits(&mut m.clone(), &g, 0.0);
    let b = unprotected_logits(&mut m.clone(), &g);
    if a != b {
        return Err(format!("{arch}: all-false mask differs from unmasked QAT"));
    }
    Ok(())
}

/// With every node protected only the weights are quantized.
pub fn all_true_mask_is_fp32_activations(arch: Arch) -> Result<(), String> {
    let (m, g) = quantized(arch, 50);
    let got = protected_logits(&mut m.clone(), &g, 1.0);
    let mut fp = m.clone();
    fp.requantize(QuantSpec::fp32()).unwrap();
    for p in fp.params.iter_mut() {
        if !p.name.ends_with("eps") {
            p.value = quantize_weight(&p.value);
        }
    }
    let want = fp.predict(&Prepared::new(&g)).unwrap();
    let err = got
        .data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0f32, f32::max);
    if err > 1e-6 {
        return Err(format!("{arch}: all-true mask deviates by {err} from FP32 with quantized weights"));
    }
    Ok(())
}

/// A model whose sites all sit at the bypass width computes the FP32
/// forward pass.
pub fn bypass_forward_is_fp32(arch: Arch) -> Result<(), String> {
    let g = toy_graph(4, 3, 60);
    let fp = toy_model(arch, 4, 3, 61);
    let mut bypass = fp.clone();
    bypass.requantize(QuantSpec::new(32, Ste::GradClip, ObserverKind::Percentile)).unwrap();
    let a = unprotected_logits(&mut fp.clone(), &g);
    let b = unprotected_logits(&mut bypass, &g);
    if a != b {
        return Err(format!("{arch}: bypass forward differs from FP32"));
    }
    Ok(())
}
