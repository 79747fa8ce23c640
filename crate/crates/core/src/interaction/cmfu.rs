//! Cross-modal fusion interaction unit.
//!
//! Each side projects its global text feature and its local image features
//! into d_c, aggregates image rows with text-guided attention, adds the
//! tanh-gated text vector and layer-normalizes. The unit score is the dot
//! product of the entity and mention fused vectors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::weights::CmfuWeights;
use crate::encoders::FeatureBundle;
use crate::nn;

#[derive(Debug, Clone)]
pub struct FuseForward {
    pub alpha: Array1<f64>,
    pub attended: Array1<f64>,
    pub gate: Array1<f64>,
    norm_cache: nn::LayerNormCache,
    pub output: Array1<f64>,
}

pub fn fuse_forward(text: ArrayView1<f64>, image: ArrayView2<f64>, w: &CmfuWeights) -> FuseForward {
    let alpha = nn::softmax(image.dot(&text).view());
    let attended = alpha.dot(&image);
    let gate = nn::linear(text, w.gate.view(), w.gate_bias.view()).mapv(f64::tanh);
    let mixed = &gate * &text + &attended;
    let (output, norm_cache) = nn::layer_norm(mixed.view(), w.norm_gain.view(), w.norm_bias.view());
    FuseForward {
        alpha,
        attended,
        gate,
        norm_cache,
        output,
    }
}

/// `FUSE(h_ot, H_ov)`.
pub fn cmfu_fuse(text: ArrayView1<f64>, image: ArrayView2<f64>, w: &CmfuWeights) -> Array1<f64> {
    fuse_forward(text, image, w).output
}

/// Returns (d text, d image).
pub fn fuse_backward(
    text: ArrayView1<f64>,
    image: ArrayView2<f64>,
    w: &CmfuWeights,
    doutput: ArrayView1<f64>,
    dw: &mut CmfuWeights,
) -> (Array1<f64>, Array2<f64>) {
    let fwd = fuse_forward(text, image, w);
    let dmixed = nn::layer_norm_backward(
        &fwd.norm_cache,
        w.norm_gain.view(),
        doutput,
        dw.norm_gain.view_mut(),
        dw.norm_bias.view_mut(),
    );
    let mut dtext = &dmixed * &fwd.gate;
    let dgate_pre = &dmixed * &text * fwd.gate.mapv(|g| 1.0 - g * g);
    dtext += &nn::linear_backward(
        text,
        w.gate.view(),
        dgate_pre.view(),
        dw.gate.view_mut(),
        dw.gate_bias.view_mut(),
    );
    // attended = Σ α_i H_i
    let mut dimage = Array2::zeros(image.raw_dim());
    nn::outer_add(dimage.view_mut(), fwd.alpha.view(), dmixed.view());
    let dalpha = image.dot(&dmixed);
    let dlogits = nn::softmax_backward(fwd.alpha.view(), dalpha.view());
    dtext += &dlogits.dot(&image);
    nn::outer_add(dimage.view_mut(), dlogits.view(), text);
    (dtext, dimage)
}

/// One side (entity or mention) of the unit after projection and fusion.
#[derive(Debug, Clone)]
pub struct CmfuSide {
    pub text: Array1<f64>,
    pub image: Array2<f64>,
    pub fused: Array1<f64>,
}

impl CmfuSide {
    pub fn new(text_global: ArrayView1<f64>, image_local: ArrayView2<f64>, w: &CmfuWeights) -> Self {
        let text = nn::linear(text_global, w.text_proj.view(), w.text_bias.view());
        let image = nn::linear_rows(image_local, w.image_proj.view(), w.image_bias.view());
        let fused = cmfu_fuse(text.view(), image.view(), w);
        Self { text, image, fused }
    }

    /// Returns (d global text, d local image).
    pub fn backward(
        &self,
        text_global: ArrayView1<f64>,
        image_local: ArrayView2<f64>,
        w: &CmfuWeights,
        dfused: ArrayView1<f64>,
        dw: &mut CmfuWeights,
    ) -> (Array1<f64>, Array2<f64>) {
        let (dtext, dimage) = fuse_backward(self.text.view(), self.image.view(), w, dfused, dw);
        let dglobal = nn::linear_backward(
            text_global,
            w.text_proj.view(),
            dtext.view(),
            dw.text_proj.view_mut(),
            dw.text_bias.view_mut(),
        );
        dw.image_proj += &image_local.t().dot(&dimage);
        dw.image_bias += &dimage.sum_axis(Axis(0));
        let dlocal = dimage.dot(&w.image_proj.t());
        (dglobal, dlocal)
    }
}

pub fn cmfu_score(mention: &FeatureBundle, entity: &FeatureBundle, w: &CmfuWeights) -> f64 {
    let e = CmfuSide::new(entity.text_global.view(), entity.image_local.view(), w);
    let m = CmfuSide::new(mention.text_global.view(), mention.image_local.view(), w);
    e.fused.dot(&m.fused)
}
