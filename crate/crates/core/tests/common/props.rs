//! Property checks driven by proptest runners with a fixed seed, so the
//! same cases run under `cargo test` and the acceptance target.

use degree_quant::autodiff::{scatter_add_rows, segment_softmax_values, Tape};
use degree_quant::layers::{quant_act, Ctx, QuantSpec, SiteSet};
use degree_quant::mask::{build_prob_mask, sample_mask};
use degree_quant::quant::{qparams_for_range, ObserverKind, QuantConfig, QuantModule, Ste};
use degree_quant::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 256;

pub fn run<S: Strategy>(strategy: S, check: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let config = Config { cases: CASES, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, check).map_err(|e| e.to_string())
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-100.0f32..100.0, rows * cols).prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
}

/// Reordering the (row, index) pairs does not change `scatter_add` beyond
/// float reassociation.
pub fn scatter_permutation_invariance() -> Result<(), String> {
    let case = (1usize..40, 1usize..5, 1usize..8).prop_flat_map(|(e, c, n)| {
        (tensor(e, c), prop::collection::vec(0..n, e), Just(n), Just((0..e).collect::<Vec<_>>()).prop_shuffle())
    });
    run(case, |(src, index, n, perm)| {
        let a = scatter_add_rows(&src, &index, n);
        let src_p = src.select_rows(&perm);
        let index_p: Vec<usize> = perm.iter().map(|&k| index[k]).collect();
        let b = scatter_add_rows(&src_p, &index_p, n);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()), "{x} vs {y}");
        }
        Ok(())
    })
}

/// Every non-empty segment sums to one per column.
pub fn segment_softmax_normalization() -> Result<(), String> {
    let case = (1usize..40, 1usize..4, 1usize..8)
        .prop_flat_map(|(e, c, n)| (tensor(e, c), prop::collection::vec(0..n, e), Just(n)));
    run(case, |(x, seg, n)| {
        let y = segment_softmax_values(&x, &seg, n);
        for s in 0..n {
            let rows: Vec<usize> = (0..seg.len()).filter(|&e| seg[e] == s).collect();
            if rows.is_empty() {
                continue;
            }
            for j in 0..x.cols() {
                let total: f64 = rows.iter().map(|&e| y.get(e, j) as f64).sum();
                prop_assert!((total - 1.0).abs() <= 1e-6, "segment {s} column {j} sums to {total}");
            }
        }
        Ok(())
    })
}

fn config(bits: u32, symmetric: bool) -> QuantConfig {
    let c = QuantConfig::activation(bits, Ste::Vanilla, ObserverKind::MinMax);
    if symmetric {
        QuantConfig { symmetric: true, ..c }
    } else {
        c
    }
}

fn range() -> impl Strategy<Value = (f32, f32)> {
    (-50.0f32..50.0, 0.0f32..100.0).prop_map(|(lo, w)| (lo, lo + w))
}

/// Codes survive dequantize-then-quantize, fake quantization is idempotent
/// and zero is exact.
pub fn quantizer_round_trip() -> Result<(), String> {
    let case = (2u32..=8, any::<bool>(), range(), prop::collection::vec(-200.0f32..200.0, 1..50));
    run(case, |(bits, symmetric, (lo, hi), xs)| {
        let qp = qparams_for_range(&config(bits, symmetric), lo, hi);
        for q in qp.q_min..=qp.q_max {
            prop_assert_eq!(qp.quantize(qp.dequantize(q)), q);
        }
        for x in xs {
            let once = qp.fake(x);
            prop_assert_eq!(qp.fake(once).to_bits(), once.to_bits(), "x = {}", x);
        }
        prop_assert_eq!(qp.fake(0.0), 0.0);
        prop_assert!(qp.zero_point >= qp.q_min && qp.zero_point <= qp.q_max);
        Ok(())
    })
}

/// Inside the tracked range the rounding error is at most half a step.
pub fn rounding_error_bound() -> Result<(), String> {
    let case = (2u32..=8, any::<bool>(), range(), prop::collection::vec(0.0f32..=1.0, 1..50));
    run(case, |(bits, symmetric, (lo, hi), ts)| {
        let qp = qparams_for_range(&config(bits, symmetric), lo, hi);
        for t in ts {
            let x = lo + t * (hi - lo);
            let err = (qp.fake(x) - x).abs();
            prop_assert!(err <= 0.5 * qp.scale * (1.0 + 1e-4), "x {x}: error {err} scale {}", qp.scale);
        }
        Ok(())
    })
}

/// A percentile observer never tracks a wider maximum than min/max on the
/// same stream.
pub fn percentile_within_minmax() -> Result<(), String> {
    let batches = prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 1..200), 1..10);
    run((batches, any::<bool>()), |(batches, momentum)| {
        let (base, pct) = if momentum {
            (ObserverKind::Momentum, ObserverKind::PercentileMomentum)
        } else {
            (ObserverKind::MinMax, ObserverKind::Percentile)
        };
        let mut a = QuantModule::new(QuantConfig::activation(8, Ste::Vanilla, base));
        let mut b = QuantModule::new(QuantConfig::activation(8, Ste::Vanilla, pct));
        for batch in &batches {
            a.observe(batch);
            b.observe(batch);
            prop_assert!(b.x_max <= a.x_max + 1e-5, "{} > {}", b.x_max, a.x_max);
            prop_assert!(b.x_min >= a.x_min - 1e-5, "{} < {}", b.x_min, a.x_min);
        }
        Ok(())
    })
}

/// Vanilla STE passes the upstream gradient unchanged, even for values
/// outside the frozen range; the clipped variant zeroes those.
pub fn straight_through_gradients() -> Result<(), String> {
    let case = prop::collection::vec(-20.0f32..20.0, 2..30);
    run(case, |xs| {
        for ste in [Ste::Vanilla, Ste::GradClip] {
            let spec = QuantSpec::new(4, ste, ObserverKind::MinMax);
            let mut sites = SiteSet::build(&["features".to_string()], &spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut nrng = ChaCha8Rng::seed_from_u64(0);
            sites.get_mut("features").unwrap().observe(&[-1.0, 1.0]);
            let mut ctx = Ctx::new(false, &mut rng, &mut nrng);
            let tape = Tape::new();
            let x = tape.param(Tensor::from_vec(1, xs.len(), xs.clone()).unwrap());
            let y = quant_act(x, &mut sites, "features", None, &mut ctx).unwrap();
            let g = tape.backward(y.sum()).unwrap();
            let qp = sites.get("features").unwrap().qparams().unwrap();
            for (&v, &d) in xs.iter().zip(g.get(x).unwrap().data()) {
                let want = if ste == Ste::Vanilla || qp.in_range(v) { 1.0 } else { 0.0 };
                prop_assert_eq!(d, want, "{:?} at {}", ste, v);
            }
        }
        Ok(())
    })
}

/// Higher in-degree never gets a lower protection probability, and the
/// top degree class gets exactly `p_max`.
pub fn mask_monotonicity() -> Result<(), String> {
    let case = (prop::collection::vec(0usize..50, 1..200), 0.0f32..=1.0, 0.0f32..=1.0);
    run(case, |(deg, a, b)| {
        let (p_min, p_max) = (a.min(b), a.max(b));
        let p = build_prob_mask(&deg, p_min, p_max).unwrap();
        let max_deg = *deg.iter().max().unwrap();
        for i in 0..deg.len() {
            prop_assert!(p[i] >= p_min && p[i] <= p_max);
            if deg[i] == max_deg {
                prop_assert_eq!(p[i], p_max);
            }
            for j in 0..deg.len() {
                if deg[i] > deg[j] {
                    prop_assert!(p[i] >= p[j], "deg {} -> {}, deg {} -> {}", deg[i], p[i], deg[j], p[j]);
                }
            }
        }
        Ok(())
    })
}

/// Over 10k draws the protection frequency of every node lies within
/// three binomial standard deviations of its probability.
pub fn mask_frequency() -> Result<(), String> {
    let deg: Vec<usize> = (0..60).map(|i| (i * i) % 23).collect();
    let p = build_prob_mask(&deg, 0.05, 0.6).map_err(|e| e.to_string())?;
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut hits = vec![0usize; p.len()];
    for _ in 0..draws {
        for (h, m) in hits.iter_mut().zip(sample_mask(&p, &mut rng)) {
            *h += m as usize;
        }
    }
    for (i, (&h, &pi)) in hits.iter().zip(&p).enumerate() {
        let pi = pi as f64;
        let sigma = (pi * (1.0 - pi) / draws as f64).sqrt();
        let freq = h as f64 / draws as f64;
        if (freq - pi).abs() > 3.0 * sigma {
            return Err(format!("node {i}: frequency {freq} for probability {pi} (sigma {sigma})"));
        }
    }
    Ok(())
}
