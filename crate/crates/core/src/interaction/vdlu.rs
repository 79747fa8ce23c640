//! Vision-based dual interaction unit.
//!
//! `dual(A → B)` fuses the mean-pooled local image features of B with A's
//! global feature, gates the fused vector with a scalar tanh gate, adds B's
//! global feature, normalizes, and scores against A's global feature. The
//! unit averages the entity→mention and mention→entity directions, each with
//! its own parameters.

use ndarray::{Array1, ArrayView1, ArrayView2};

use super::weights::{DualWeights, VdluWeights};
use crate::encoders::FeatureBundle;
use crate::nn;

#[derive(Debug, Clone)]
pub struct DualForward {
    in_cache: nn::LayerNormCache,
    normed: Array1<f64>,
    pub fused: Array1<f64>,
    pub gate: f64,
    out_cache: nn::LayerNormCache,
    pub output: Array1<f64>,
    pub score: f64,
}

pub fn dual_forward(
    global_a: ArrayView1<f64>,
    global_b: ArrayView1<f64>,
    pooled_b: ArrayView1<f64>,
    w: &DualWeights,
) -> DualForward {
    let mixed = &pooled_b + &global_a;
    let (normed, in_cache) = nn::layer_norm(mixed.view(), w.in_norm_gain.view(), w.in_norm_bias.view());
    let fused = nn::linear(normed.view(), w.fuse.view(), w.fuse_bias.view());
    let gate = (fused.dot(&w.gate) + w.gate_bias[0]).tanh();
    let gated = &fused * gate + global_b;
    let (output, out_cache) = nn::layer_norm(gated.view(), w.out_norm_gain.view(), w.out_norm_bias.view());
    let score = output.dot(&global_a);
    DualForward {
        in_cache,
        normed,
        fused,
        gate,
        out_cache,
        output,
        score,
    }
}

/// Gradients of one direction with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct DualInputGrad {
    pub global_a: Array1<f64>,
    pub global_b: Array1<f64>,
    pub pooled_b: Array1<f64>,
}

pub fn dual_backward(
    global_a: ArrayView1<f64>,
    global_b: ArrayView1<f64>,
    pooled_b: ArrayView1<f64>,
    w: &DualWeights,
    dscore: f64,
    dw: &mut DualWeights,
) -> DualInputGrad {
    let fwd = dual_forward(global_a, global_b, pooled_b, w);
    let mut dglobal_a = &fwd.output * dscore;
    let doutput = &global_a * dscore;
    let dgated = nn::layer_norm_backward(
        &fwd.out_cache,
        w.out_norm_gain.view(),
        doutput.view(),
        dw.out_norm_gain.view_mut(),
        dw.out_norm_bias.view_mut(),
    );
    let dglobal_b = dgated.clone();
    let dgate = dgated.dot(&fwd.fused);
    let dpre = dgate * (1.0 - fwd.gate * fwd.gate);
    let mut dfused = &dgated * fwd.gate;
    dw.gate.scaled_add(dpre, &fwd.fused);
    dw.gate_bias[0] += dpre;
    dfused.scaled_add(dpre, &w.gate);
    let dnormed = nn::linear_backward(
        fwd.normed.view(),
        w.fuse.view(),
        dfused.view(),
        dw.fuse.view_mut(),
        dw.fuse_bias.view_mut(),
    );
    let dmixed = nn::layer_norm_backward(
        &fwd.in_cache,
        w.in_norm_gain.view(),
        dnormed.view(),
        dw.in_norm_gain.view_mut(),
        dw.in_norm_bias.view_mut(),
    );
    dglobal_a += &dmixed;
    DualInputGrad {
        global_a: dglobal_a,
        global_b: dglobal_b,
        pooled_b: dmixed,
    }
}

/// `DUAL_{A2B}(v_A^G, v_B^G, V_B^L)`.
pub fn vdlu_dual(
    global_a: ArrayView1<f64>,
    global_b: ArrayView1<f64>,
    local_b: ArrayView2<f64>,
    w: &DualWeights,
) -> f64 {
    let pooled = nn::mean_rows(local_b);
    dual_forward(global_a, global_b, pooled.view(), w).score
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VdluScore {
    pub score: f64,
    pub e2m: f64,
    pub m2e: f64,
}

pub fn vdlu_score(mention: &FeatureBundle, entity: &FeatureBundle, w: &VdluWeights) -> VdluScore {
    let e2m = vdlu_dual(
        entity.image_global.view(),
        mention.image_global.view(),
        mention.image_local.view(),
        &w.e2m,
    );
    let m2e = vdlu_dual(
        mention.image_global.view(),
        entity.image_global.view(),
        entity.image_local.view(),
        &w.m2e,
    );
    VdluScore {
        score: (e2m + m2e) / 2.0,
        e2m,
        m2e,
    }
}
