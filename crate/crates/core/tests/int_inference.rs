use degree_quant::graph::{citation_surrogate, gen_synthetic_with, FeatureInit, Graph, GraphKind, SurrogateConfig};
use degree_quant::int::bench::{benchmark, BenchOptions, SyntheticSetup};
use degree_quant::int::float::FloatModel;
use degree_quant::int::kernels::{Codes, Isa, PackedI8, Target};
use degree_quant::int::requant::Requant;
use degree_quant::int::{lower, IntModel};
use degree_quant::layers::{Arch, Prepared, QuantSpec};
use degree_quant::model::{Model, ModelSpec};
use degree_quant::quant::{ObserverKind, QParams, Ste};
use degree_quant::train::{train_node, Regime, TrainConfig};
use degree_quant::Error;

fn surrogate() -> Graph {
    let cfg = SurrogateConfig { num_nodes: 600, num_features: 120, ..SurrogateConfig::default() };
    citation_surrogate(&cfg, 7).unwrap()
}

fn trained(arch: Arch, regime: Regime, bits: u32, g: &Graph) -> Model {
    let mut cfg = TrainConfig::new(regime, bits, 3);
    cfg.epochs = 60;
    let spec = ModelSpec::citation(arch, g.num_features(), g.num_classes());
    train_node(g, spec, &cfg).unwrap().model
}

struct Agreement {
    argmax: f64,
    max_steps: f64,
}

fn compare(model: &Model, g: &Graph) -> Agreement {
    let mut m = model.clone();
    let fake = m.predict(&Prepared::new(g)).unwrap();
    let int = lower(model).unwrap();
    let qp = int.output_qparams().unwrap();
    let mut best = Agreement { argmax: 1.0, max_steps: 0.0 };
    for isa in Isa::available() {
        let ig = int.bind(g).unwrap();
        let out = int.forward(&ig, isa, None).unwrap().dequantize();
        let same = fake.argmax_rows().iter().zip(out.argmax_rows()).filter(|(a, b)| **a == *b).count();
        let steps = fake.data().iter().zip(out.data()).map(|(a, b)| ((a - b) / qp.scale).abs() as f64).fold(0.0, f64::max);
        best.argmax = best.argmax.min(same as f64 / g.num_nodes() as f64);
        best.max_steps = best.max_steps.max(steps);
    }
    best
}

#[test]
fn lowered_models_match_fake_quantized_eval() {
    let g = surrogate();
    for arch in [Arch::Gcn, Arch::Gat, Arch::Gin] {
        for (regime, bits) in [(Regime::Qat, 8), (Regime::Dq, 8), (Regime::Dq, 4)] {
            let model = trained(arch, regime, bits, &g);
            let a = compare(&model, &g);
            eprintln!("{arch} {regime:?} {bits}: argmax {:.4} max steps {}", a.argmax, a.max_steps);
            assert!(a.argmax >= 0.995, "{arch} {regime:?} {bits}: argmax agreement {}", a.argmax);
            assert!(a.max_steps <= 1.0 + 1e-3, "{arch} {regime:?} {bits}: {} steps", a.max_steps);
        }
    }
}

#[test]
fn lowered_weights_dequantize_to_fake_quantized_weights() {
    let g = surrogate();
    let model = trained(Arch::Gcn, Regime::Qat, 8, &g);
    let int = lower(&model).unwrap();
    for (l, layer) in int.layers.iter().enumerate() {
        let w = layer.tensor("weights").unwrap();
        let qm = model.sites[l].get("weights").unwrap();
        let qp = qm.qparams().unwrap();
        let slot = match &model.layers[l] {
            degree_quant::model::Layer::Gcn(gl) => gl.weight,
            _ => unreachable!(),
        };
        let fake: Vec<u32> = model.params[slot].value.data().iter().map(|&v| qp.fake(v).to_bits()).collect();
        let back: Vec<u32> = w.dequantize().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(fake, back);
    }
    assert_eq!(lower(&model).unwrap(), int);
}

#[test]
fn four_bit_weights_stay_in_range() {
    let g = surrogate();
    let model = trained(Arch::Gin, Regime::Dq, 4, &g);
    let int = lower(&model).unwrap();
    for layer in &int.layers {
        for (k, t) in &layer.tensors {
            assert!(t.codes.iter().all(|&c| (-8..=7).contains(&c)), "{k}");
        }
    }
}

#[test]
fn lowering_rejects_unquantized_and_uncalibrated_models() {
    let spec = ModelSpec::citation(Arch::Gcn, 10, 3);
    let fp = Model::new(spec.clone(), QuantSpec::fp32(), 0).unwrap();
    assert!(matches!(lower(&fp), Err(Error::Unsupported(_))));
    let fresh = Model::new(spec, QuantSpec::new(8, Ste::Vanilla, ObserverKind::MinMax), 0).unwrap();
    assert!(matches!(lower(&fresh), Err(Error::Contract(_))));
}

#[test]
fn int_checkpoint_round_trips_and_is_small() {
    // Citation-sized input width, where weights dominate the file.
    let cfg = SurrogateConfig { num_nodes: 300, num_features: 1433, ..SurrogateConfig::default() };
    let g = citation_surrogate(&cfg, 5).unwrap();
    let spec = ModelSpec::citation(Arch::Gcn, g.num_features(), g.num_classes());
    let mut model = Model::new(spec, QuantSpec::new(8, Ste::Vanilla, ObserverKind::MinMax), 1).unwrap();
    model.calibrate(&Prepared::new(&g), 1).unwrap();
    let int = lower(&model).unwrap();
    let bytes = int.to_bytes().unwrap();
    let back = IntModel::from_bytes(&bytes).unwrap();
    assert_eq!(back, int);
    assert_eq!(back.predict(&g).unwrap(), int.predict(&g).unwrap());
    let fp_bytes = degree_quant::checkpoint::model_to_bytes(&model, None).unwrap();
    let ratio = bytes.len() as f64 / fp_bytes.len() as f64;
    assert!(ratio <= 0.30, "int checkpoint is {ratio:.3} of the float one");
}

#[test]
fn float_engine_matches_autodiff_forward() {
    let g = surrogate();
    for arch in [Arch::Gcn, Arch::Gat, Arch::Gin] {
        let mut model = trained(arch, Regime::Fp32, 32, &g);
        let want = model.predict(&Prepared::new(&g)).unwrap();
        let fm = FloatModel::from_model(&model).unwrap();
        for isa in Isa::available() {
            let fg = fm.bind(&g).unwrap();
            let got = fm.forward(&fg, isa, None).unwrap();
            let err = want.data().iter().zip(got.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err < 1e-3, "{arch} {isa:?}: {err}");
        }
    }
}

fn grid(scale: f32, zero_point: i32) -> QParams {
    QParams { scale, zero_point, q_min: -128, q_max: 127 }
}

#[test]
fn int_linear_identity_and_zero_input() {
    // Identity weights on a grid of step 1: the product is a pure rescale.
    let n = 16;
    let mut w = vec![0i8; n * n];
    for i in 0..n {
        w[i * n + i] = 1;
    }
    let packed = PackedI8::pack(n, n, &w);
    let x_qp = grid(0.5, 3);
    let out_qp = grid(0.25, -7);
    let x: Vec<i8> = (0..2 * n as i32).map(|v| (v * 5 - 60) as i8).collect();
    let codes = Codes::from_rows(2, n, &x);
    let add: Vec<i32> = packed.colsum.iter().map(|&s| -(128 + x_qp.zero_point) * s).collect();
    let t = Target { rq: Requant::new(0.5 / 0.25).unwrap(), zero_point: out_qp.zero_point, lo: -128, hi: 127 };
    for isa in Isa::available() {
        let mut acc = vec![0; 2 * packed.np];
        degree_quant::int::kernels::dense_i8(isa, &codes.data, codes.stride, 2, &packed, &mut acc);
        let mut out = vec![0i8; 2 * n];
        degree_quant::int::kernels::requant_rows(isa, &acc, packed.np, 2, n, &add, t, &mut out, n);
        for (o, &c) in out.iter().zip(&x) {
            assert_eq!(*o as i32, out_qp.quantize(x_qp.dequantize(c as i32)));
        }
        // Inputs at the zero point map to the output zero point.
        let zeros = Codes::from_rows(1, n, &vec![x_qp.zero_point as i8; n]);
        degree_quant::int::kernels::dense_i8(isa, &zeros.data, zeros.stride, 1, &packed, &mut acc);
        degree_quant::int::kernels::requant_rows(isa, &acc, packed.np, 1, n, &add, t, &mut out, n);
        assert!(out[..n].iter().all(|&o| o as i32 == out_qp.zero_point));
    }
}

#[test]
fn int_linear_matches_f64_reference() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let n = 16;
    let x_qp = grid(0.031, -12);
    let w_qp = QParams { scale: 0.0042, zero_point: 0, q_min: -127, q_max: 127 };
    let out_qp = grid(0.09, 4);
    let x: Vec<i8> = (0..n * n).map(|_| rng.random()).collect();
    let w: Vec<i8> = (0..n * n).map(|_| rng.random_range(-127..=127)).collect();
    let packed = PackedI8::pack(n, n, &w);
    let add: Vec<i32> = packed.colsum.iter().map(|&s| -(128 + x_qp.zero_point) * s).collect();
    let real = x_qp.scale as f64 * w_qp.scale as f64 / out_qp.scale as f64;
    let t = Target { rq: Requant::new(real).unwrap(), zero_point: out_qp.zero_point, lo: -128, hi: 127 };
    let codes = Codes::from_rows(n, n, &x);
    let mut acc = vec![0; n * packed.np];
    degree_quant::int::kernels::dense_i8(Isa::detect(), &codes.data, codes.stride, n, &packed, &mut acc);
    let mut out = vec![0i8; n * n];
    degree_quant::int::kernels::requant_rows(Isa::detect(), &acc, packed.np, n, n, &add, t, &mut out, n);
    for r in 0..n {
        for c in 0..n {
            let y: f64 = (0..n)
                .map(|k| x_qp.dequantize(x[r * n + k] as i32) as f64 * w_qp.dequantize(w[k * n + c] as i32) as f64)
                .sum();
            let want = (y / out_qp.scale as f64 + out_qp.zero_point as f64).round().clamp(-128.0, 127.0);
            assert!((out[r * n + c] as f64 - want).abs() <= 1.0, "{r},{c}");
        }
    }
}

#[test]
fn int_spmm_hand_examples() {
    use degree_quant::int::csr::CsrAdjacency;
    use degree_quant::int::kernels::sum_aggregate;
    // Two nodes pointing at each other plus a self-loop on node 0.
    let csr = CsrAdjacency::from_edges(&[0, 1, 0], &[1, 0, 0], 2).unwrap();
    let feat = Codes::from_rows(2, 2, &[10, -20, 3, 4]);
    let mut acc = vec![0; 4];
    sum_aggregate(Isa::detect(), &csr.row_ptr, &csr.col_idx, &feat, 2, 0..2, &mut acc);
    // Row 0: (3 - 2) + (10 - 2), (4 - 2) + (-20 - 2); row 1: 10 - 2, -20 - 2.
    assert_eq!(acc, vec![9, -20, 8, -22]);
    // Identity adjacency leaves the codes minus the zero point.
    let eye = CsrAdjacency::from_edges(&[0, 1], &[0, 1], 2).unwrap();
    sum_aggregate(Isa::detect(), &eye.row_ptr, &eye.col_idx, &feat, 2, 0..2, &mut acc);
    assert_eq!(acc, vec![8, -22, 1, 2]);
}

#[test]
fn small_graph_benchmark_runs() {
    let setup = SyntheticSetup { nodes: 300, features: 32, calibration_nodes: 300, ..SyntheticSetup::default() };
    let (model, graph) = setup.build().unwrap();
    let [fp, int] = benchmark(&model, &graph, "pa-300", &BenchOptions::default()).unwrap();
    assert_eq!(fp.precision, "fp32");
    assert_eq!(int.precision, "int8");
    assert_eq!(int.stats.layer_median_ms.len(), 2);
    assert!(int.median_ms > 0.0 && int.p95_ms >= int.median_ms);
}

#[test]
fn synthetic_model_lowers_on_every_architecture() {
    for arch in [Arch::Gcn, Arch::Gat, Arch::Gin] {
        let setup = SyntheticSetup { arch, nodes: 400, features: 32, calibration_nodes: 400, ..SyntheticSetup::default() };
        let (model, graph) = setup.build().unwrap();
        let a = compare(&model, &graph);
        assert!(a.max_steps <= 1.0 + 1e-3, "{arch}: {}", a.max_steps);
        let g2 = gen_synthetic_with(GraphKind::ErdosRenyi, 50, 0.1, 1, 32, FeatureInit::Uniform).unwrap();
        assert!(lower(&model).unwrap().predict(&g2).is_ok());
    }
}
