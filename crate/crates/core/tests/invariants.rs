mod common;

use common::oracle::{self, MODEL_TOL, PRIMITIVE_TOL};
use common::{props, regimes};

#[test]
fn primitive_gradients_match_finite_differences() {
    for (name, err) in oracle::primitive_errors() {
        assert!(err <= PRIMITIVE_TOL, "{name}: relative error {err}");
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for arch in regimes::ARCHS {
        let c = oracle::model_check(arch);
        eprintln!("{arch}: grad {:.2e} forward {:.2e}", c.max_grad_err, c.max_forward_err);
        assert!(c.max_grad_err <= MODEL_TOL, "{arch}: gradient error {}", c.max_grad_err);
    }
}

#[test]
fn full_precision_layers_follow_textbook_rules() {
    for arch in regimes::ARCHS {
        let c = oracle::model_check(arch);
        assert!(c.max_forward_err <= 1e-6, "{arch}: forward error {}", c.max_forward_err);
    }
}

#[test]
fn gin_gradients_match_closed_form() {
    let err = oracle::gin_closed_form_error();
    assert!(err <= PRIMITIVE_TOL, "relative error {err}");
}

#[test]
fn scatter_add_ignores_row_order() {
    props::scatter_permutation_invariance().unwrap();
}

#[test]
fn segment_softmax_is_normalized() {
    props::segment_softmax_normalization().unwrap();
}

#[test]
fn quantizer_round_trips() {
    props::quantizer_round_trip().unwrap();
}

#[test]
fn rounding_error_is_at_most_half_a_step() {
    props::rounding_error_bound().unwrap();
}

#[test]
fn percentile_range_is_inside_minmax_range() {
    props::percentile_within_minmax().unwrap();
}

#[test]
fn straight_through_estimators() {
    props::straight_through_gradients().unwrap();
}

#[test]
fn protection_is_monotone_in_degree() {
    props::mask_monotonicity().unwrap();
}

#[test]
fn protection_frequency_matches_probability() {
    props::mask_frequency().unwrap();
}

#[test]
fn mask_extremes() {
    for arch in regimes::ARCHS {
        regimes::all_false_mask_is_qat(arch).unwrap();
        regimes::all_true_mask_is_fp32_activations(arch).unwrap();
    }
}

#[test]
fn bypass_width_is_full_precision() {
    for arch in regimes::ARCHS {
        regimes::bypass_forward_is_fp32(arch).unwrap();
    }
}

#[test]
fn regime_reductions() {
    let g = regimes::small_graph();
    for arch in regimes::ARCHS {
        regimes::dq_zero_is_qat(&g, arch).unwrap();
        regimes::nqat_one_is_qat(&g, arch).unwrap();
        regimes::bypass_is_fp32(&g, arch).unwrap();
    }
}

#[test]
fn runs_are_reproducible() {
    let g = regimes::small_graph();
    for arch in regimes::ARCHS {
        regimes::seed_determinism(&g, arch).unwrap();
    }
}
