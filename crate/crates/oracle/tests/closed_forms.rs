//! Hand-derived values the references must reproduce.

use mimic_core::interaction::InteractionWeights;
use mimic_oracle::fixtures::{self, SMALL_DIMS};
use mimic_oracle::*;
use ndarray::arr1;

#[test]
fn zero_attention_weights_leave_bias_product() {
    let mut w = InteractionWeights::zeros(mimic_core::interaction::InteractionDims {
        text_dim: 4,
        image_dim: 3,
        tglu_dim: 2,
        cmfu_dim: 2,
    });
    w.tglu.proj_bias = arr1(&[0.5, -1.0]);
    w.tglu.norm_gain = arr1(&[1.0, 1.0]);
    w.tglu.norm_bias = arr1(&[2.0, 0.25]);
    let f = fixtures::pair(3, w.dims);
    let r = ref_tglu(&f.mention, &f.entity, &w.tglu);
    // Zero Q/K/V make the pooled context zero, so LayerNorm returns its bias
    // and the projection returns its bias: 0.5·2 + (−1)·0.25.
    assert!((r.g2l - 0.75).abs() < 1e-12);
}

#[test]
fn g2g_special_cases() {
    let v = [0.3, -1.2, 2.0];
    assert!((ref_g2g(&v, &v) - 1.0).abs() < 1e-12);
    assert!((ref_g2g(&v, &[3.0 * 0.3, -3.6, 6.0]) - 1.0).abs() < 1e-12);
    assert_eq!(ref_g2g(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
    assert_eq!(ref_g2g(&[0.0, 0.0], &[0.0, 2.0]), 0.0);
}

#[test]
fn uniform_scores_cost_ln_batch() {
    let s: Matrix = vec![vec![0.7; 4]; 4];
    assert!((ref_info_nce(&s, &[0, 1, 2, 3], 1.0) - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn metrics_example() {
    let r = ref_metrics(&[1, 2, 4], &[1, 3, 5]);
    assert!((r.hits[&1] - 1.0 / 3.0).abs() < 1e-12);
    assert!((r.hits[&3] - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.hits[&5], 1.0);
    assert!((r.mrr - 0.583_333_333_333_333_3).abs() < 1e-12);
    assert!((r.mr - 7.0 / 3.0).abs() < 1e-12);
}

#[test]
fn zero_gate_collapses_vdlu_direction() {
    let mut w = fixtures::weights(1, SMALL_DIMS).vdlu.e2m;
    w.gate.fill(0.0);
    w.gate_bias.fill(0.0);
    let v_a = vec![0.2, -0.4, 1.0, 0.0, 0.5, -0.1];
    let v_b = vec![1.0, 2.0, -1.0, 0.5, 0.0, 0.3];
    let local: Matrix = vec![vec![0.3; 6], vec![-0.9; 6]];
    let mean = v_b.iter().sum::<f64>() / 6.0;
    let var = v_b.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 6.0;
    let expected: f64 = (0..6)
        .map(|i| ((v_b[i] - mean) / (var + 1e-5).sqrt() * w.out_norm_gain[i] + w.out_norm_bias[i]) * v_a[i])
        .sum();
    assert!((ref_vdlu_dual(&v_a, &v_b, &local, &w) - expected).abs() < 1e-12);
}

#[test]
fn identical_rows_make_attention_irrelevant() {
    let w = fixtures::weights(2, SMALL_DIMS).cmfu;
    let r = vec![0.4, -0.2, 0.9, 0.1];
    let h_v: Matrix = vec![r.clone(); 3];
    let a = ref_cmfu_fuse(&[1.0, 2.0, 3.0, 4.0], &h_v, &w);
    let b = ref_cmfu_fuse(&[1.0, 2.0, 3.0, 4.0], &vec![r; 1], &w);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn pessimistic_rank() {
    let s = |v: &[(&str, f64)]| v.iter().map(|(a, b)| (a.to_string(), *b)).collect::<Vec<_>>();
    assert_eq!(ref_rank(&s(&[("a", 0.1), ("g", 0.9), ("b", 0.2)]), "g"), 1);
    assert_eq!(ref_rank(&s(&[("a", 0.5), ("g", 0.5), ("b", 0.2)]), "g"), 2);
}
