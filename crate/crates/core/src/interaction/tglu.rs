//! Text-based global-local interaction unit.
//!
//! G2G is the dot product of the L2-normalized `[CLS]` text states. G2L runs
//! single-head attention with queries from the entity tokens and keys/values
//! from the mention tokens, mean-pools and layer-normalizes the attended rows,
//! and scores the result against a projection of the entity's global state.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::weights::TgluWeights;
use crate::encoders::FeatureBundle;
use crate::nn;

/// Per-entity quantities reused across every mention it is paired with.
#[derive(Debug, Clone)]
pub struct EntityText {
    pub unit: Array1<f64>,
    pub norm: f64,
    pub query: Array2<f64>,
    pub proj: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MentionText {
    pub unit: Array1<f64>,
    pub norm: f64,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct EntityTextGrad {
    pub unit: Array1<f64>,
    pub query: Array2<f64>,
    pub proj: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MentionTextGrad {
    pub unit: Array1<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

impl EntityText {
    pub fn new(global: ArrayView1<f64>, local: ArrayView2<f64>, w: &TgluWeights) -> Self {
        let (unit, norm) = nn::l2_normalize(global);
        if norm == 0.0 {
            log::warn!("entity text global feature has zero norm; G2G treats it as zero");
        }
        Self {
            unit,
            norm,
            query: local.dot(&w.query),
            proj: nn::linear(global, w.proj.view(), w.proj_bias.view()),
        }
    }

    pub fn zero_grad(&self) -> EntityTextGrad {
        EntityTextGrad {
            unit: Array1::zeros(self.unit.len()),
            query: Array2::zeros(self.query.raw_dim()),
            proj: Array1::zeros(self.proj.len()),
        }
    }

    /// Pushes side gradients into the weights and returns (d global, d local).
    pub fn backward(
        &self,
        global: ArrayView1<f64>,
        local: ArrayView2<f64>,
        w: &TgluWeights,
        grad: &EntityTextGrad,
        dw: &mut TgluWeights,
    ) -> (Array1<f64>, Array2<f64>) {
        dw.query += &local.t().dot(&grad.query);
        let dlocal = grad.query.dot(&w.query.t());
        let mut dglobal = nn::linear_backward(
            global,
            w.proj.view(),
            grad.proj.view(),
            dw.proj.view_mut(),
            dw.proj_bias.view_mut(),
        );
        dglobal += &nn::l2_normalize_backward(self.unit.view(), self.norm, grad.unit.view());
        (dglobal, dlocal)
    }
}

impl MentionText {
    pub fn new(global: ArrayView1<f64>, local: ArrayView2<f64>, w: &TgluWeights) -> Self {
        let (unit, norm) = nn::l2_normalize(global);
        if norm == 0.0 {
            log::warn!("mention text global feature has zero norm; G2G treats it as zero");
        }
        Self {
            unit,
            norm,
            key: local.dot(&w.key),
            value: local.dot(&w.value),
        }
    }

    pub fn zero_grad(&self) -> MentionTextGrad {
        MentionTextGrad {
            unit: Array1::zeros(self.unit.len()),
            key: Array2::zeros(self.key.raw_dim()),
            value: Array2::zeros(self.value.raw_dim()),
        }
    }

    pub fn backward(
        &self,
        local: ArrayView2<f64>,
        w: &TgluWeights,
        grad: &MentionTextGrad,
        dw: &mut TgluWeights,
    ) -> (Array1<f64>, Array2<f64>) {
        let lt = local.t();
        dw.key += &lt.dot(&grad.key);
        dw.value += &lt.dot(&grad.value);
        let dlocal = grad.key.dot(&w.key.t()) + grad.value.dot(&w.value.t());
        let dglobal = nn::l2_normalize_backward(self.unit.view(), self.norm, grad.unit.view());
        (dglobal, dlocal)
    }
}

pub fn g2g(entity: &EntityText, mention: &MentionText) -> f64 {
    entity.unit.dot(&mention.unit)
}

pub fn g2g_backward(
    entity: &EntityText,
    mention: &MentionText,
    dscore: f64,
    de: &mut EntityTextGrad,
    dm: &mut MentionTextGrad,
) {
    de.unit.scaled_add(dscore, &mention.unit);
    dm.unit.scaled_add(dscore, &entity.unit);
}

struct G2lForward {
    attention: Array2<f64>,
    norm_cache: nn::LayerNormCache,
    context: Array1<f64>,
    score: f64,
}

fn g2l_forward(entity: &EntityText, mention: &MentionText, w: &TgluWeights) -> G2lForward {
    let scale = 1.0 / (entity.query.ncols() as f64).sqrt();
    let logits = entity.query.dot(&mention.key.t()) * scale;
    let attention = nn::softmax_rows(logits.view());
    let attended = attention.dot(&mention.value);
    let pooled = nn::mean_rows(attended.view());
    let (context, norm_cache) = nn::layer_norm(pooled.view(), w.norm_gain.view(), w.norm_bias.view());
    let score = entity.proj.dot(&context);
    G2lForward {
        attention,
        norm_cache,
        context,
        score,
    }
}

pub fn g2l(entity: &EntityText, mention: &MentionText, w: &TgluWeights) -> f64 {
    g2l_forward(entity, mention, w).score
}

/// Attention weights of one pair (rows: entity tokens, cols: mention tokens).
pub fn g2l_attention(entity: &EntityText, mention: &MentionText) -> Array2<f64> {
    let scale = 1.0 / (entity.query.ncols() as f64).sqrt();
    nn::softmax_rows((entity.query.dot(&mention.key.t()) * scale).view())
}

pub fn g2l_backward(
    entity: &EntityText,
    mention: &MentionText,
    w: &TgluWeights,
    dscore: f64,
    dw: &mut TgluWeights,
    de: &mut EntityTextGrad,
    dm: &mut MentionTextGrad,
) {
    let fwd = g2l_forward(entity, mention, w);
    de.proj.scaled_add(dscore, &fwd.context);
    let dcontext = &entity.proj * dscore;
    let dpooled = nn::layer_norm_backward(
        &fwd.norm_cache,
        w.norm_gain.view(),
        dcontext.view(),
        dw.norm_gain.view_mut(),
        dw.norm_bias.view_mut(),
    );
    let rows = fwd.attention.nrows() as f64;
    // Every attended row receives dpooled / rows.
    let drow = dpooled / rows;
    let col_mass = fwd.attention.sum_axis(Axis(0));
    nn::outer_add(dm.value.view_mut(), col_mass.view(), drow.view());
    let da_row = mention.value.dot(&drow);
    let da = Array2::from_shape_fn(fwd.attention.raw_dim(), |(_, j)| da_row[j]);
    let scale = 1.0 / (entity.query.ncols() as f64).sqrt();
    let dlogits = nn::softmax_rows_backward(fwd.attention.view(), da.view()) * scale;
    de.query += &dlogits.dot(&mention.key);
    dm.key += &dlogits.t().dot(&entity.query);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TgluScore {
    pub score: f64,
    pub g2g: f64,
    pub g2l: f64,
}

pub fn tglu_score(mention: &FeatureBundle, entity: &FeatureBundle, w: &TgluWeights) -> TgluScore {
    let e = EntityText::new(entity.text_global.view(), entity.text_local.view(), w);
    let m = MentionText::new(mention.text_global.view(), mention.text_local.view(), w);
    let g2g = g2g(&e, &m);
    let g2l = g2l(&e, &m, w);
    TgluScore {
        score: (g2g + g2l) / 2.0,
        g2g,
        g2l,
    }
}
