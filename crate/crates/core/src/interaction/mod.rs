//! Interaction layer: three parallel units and their averaged
//! mention-entity score.

mod batch;
pub mod cmfu;
pub mod tglu;
pub mod vdlu;
mod weights;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::FeatureBundle;
use crate::error::{Error, Result};
use crate::nn;

pub use self::batch::{pairwise_backward, BatchGradients, ScoreGradients};
pub use self::cmfu::{cmfu_fuse, cmfu_score, CmfuSide};
pub use self::tglu::{tglu_score, EntityText, MentionText, TgluScore};
pub use self::vdlu::{vdlu_dual, vdlu_score, VdluScore};
pub use self::weights::{CmfuWeights, DualWeights, InteractionDims, InteractionWeights, TgluWeights, VdluWeights};

/// Which interaction units contribute to the combined score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitMask {
    pub tglu: bool,
    pub vdlu: bool,
    pub cmfu: bool,
}

impl Default for UnitMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl UnitMask {
    pub const ALL: Self = Self {
        tglu: true,
        vdlu: true,
        cmfu: true,
    };

    pub fn count(&self) -> usize {
        self.tglu as usize + self.vdlu as usize + self.cmfu as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::Config("at least one interaction unit must be enabled".into()));
        }
        Ok(())
    }

    /// Mean of the enabled unit scores.
    pub fn combine(&self, s_t: f64, s_v: f64, s_c: f64) -> f64 {
        let mut sum = 0.0;
        if self.tglu {
            sum += s_t;
        }
        if self.vdlu {
            sum += s_v;
        }
        if self.cmfu {
            sum += s_c;
        }
        sum / self.count() as f64
    }
}

/// Per-pair scores. Sub-scores of disabled units are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub s_t_g2g: f64,
    pub s_t_g2l: f64,
    pub s_t: f64,
    pub s_v_e2m: f64,
    pub s_v_m2e: f64,
    pub s_v: f64,
    pub s_c: f64,
    pub s: f64,
}

/// Mention-side quantities shared across all entities it is scored against.
#[derive(Debug, Clone)]
pub struct PreparedMention {
    pub text: MentionText,
    pub image_global: Array1<f64>,
    pub pooled_image: Array1<f64>,
    pub cmfu: CmfuSide,
}

#[derive(Debug, Clone)]
pub struct PreparedEntity {
    pub text: EntityText,
    pub image_global: Array1<f64>,
    pub pooled_image: Array1<f64>,
    pub cmfu: CmfuSide,
}

fn check_bundle(b: &FeatureBundle, dims: &InteractionDims) -> Result<()> {
    let ok = b.text_global.len() == dims.text_dim
        && b.text_local.ncols() == dims.text_dim
        && b.text_local.nrows() >= 1
        && b.image_global.len() == dims.image_dim
        && b.image_local.ncols() == dims.image_dim
        && b.image_local.nrows() >= 1;
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "feature bundle (text {}/{}x{}, image {}/{}x{}) does not fit interaction dims {:?}",
            b.text_global.len(),
            b.text_local.nrows(),
            b.text_local.ncols(),
            b.image_global.len(),
            b.image_local.nrows(),
            b.image_local.ncols(),
            dims
        )))
    }
}

impl PreparedMention {
    pub fn new(b: &FeatureBundle, w: &InteractionWeights) -> Result<Self> {
        check_bundle(b, &w.dims)?;
        Ok(Self {
            text: MentionText::new(b.text_global.view(), b.text_local.view(), &w.tglu),
            image_global: b.image_global.clone(),
            pooled_image: nn::mean_rows(b.image_local.view()),
            cmfu: CmfuSide::new(b.text_global.view(), b.image_local.view(), &w.cmfu),
        })
    }
}

impl PreparedEntity {
    pub fn new(b: &FeatureBundle, w: &InteractionWeights) -> Result<Self> {
        check_bundle(b, &w.dims)?;
        Ok(Self {
            text: EntityText::new(b.text_global.view(), b.text_local.view(), &w.tglu),
            image_global: b.image_global.clone(),
            pooled_image: nn::mean_rows(b.image_local.view()),
            cmfu: CmfuSide::new(b.text_global.view(), b.image_local.view(), &w.cmfu),
        })
    }
}

/// Scores one prepared pair, skipping units the mask disables.
pub fn score_prepared(
    m: &PreparedMention,
    e: &PreparedEntity,
    w: &InteractionWeights,
    mask: UnitMask,
) -> ScoreBreakdown {
    let mut out = ScoreBreakdown::default();
    if mask.tglu {
        out.s_t_g2g = tglu::g2g(&e.text, &m.text);
        out.s_t_g2l = tglu::g2l(&e.text, &m.text, &w.tglu);
        out.s_t = (out.s_t_g2g + out.s_t_g2l) / 2.0;
    }
    if mask.vdlu {
        out.s_v_e2m = vdlu::dual_forward(
            e.image_global.view(),
            m.image_global.view(),
            m.pooled_image.view(),
            &w.vdlu.e2m,
        )
        .score;
        out.s_v_m2e = vdlu::dual_forward(
            m.image_global.view(),
            e.image_global.view(),
            e.pooled_image.view(),
            &w.vdlu.m2e,
        )
        .score;
        out.s_v = (out.s_v_e2m + out.s_v_m2e) / 2.0;
    }
    if mask.cmfu {
        out.s_c = e.cmfu.fused.dot(&m.cmfu.fused);
    }
    out.s = mask.combine(out.s_t, out.s_v, out.s_c);
    out
}

/// Full three-unit score of one mention-entity pair.
pub fn combined_score(m: &FeatureBundle, e: &FeatureBundle, w: &InteractionWeights) -> Result<ScoreBreakdown> {
    combined_score_masked(m, e, w, UnitMask::ALL)
}

pub fn combined_score_masked(
    m: &FeatureBundle,
    e: &FeatureBundle,
    w: &InteractionWeights,
    mask: UnitMask,
) -> Result<ScoreBreakdown> {
    mask.validate()?;
    check_bundle(m, &w.dims)?;
    check_bundle(e, &w.dims)?;
    let mut out = ScoreBreakdown::default();
    if mask.tglu {
        let t = tglu_score(m, e, &w.tglu);
        out.s_t_g2g = t.g2g;
        out.s_t_g2l = t.g2l;
        out.s_t = t.score;
    }
    if mask.vdlu {
        let v = vdlu_score(m, e, &w.vdlu);
        out.s_v_e2m = v.e2m;
        out.s_v_m2e = v.m2e;
        out.s_v = v.score;
    }
    if mask.cmfu {
        out.s_c = cmfu_score(m, e, &w.cmfu);
    }
    out.s = mask.combine(out.s_t, out.s_v, out.s_c);
    Ok(out)
}

/// Mentions × entities score matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrices {
    pub s_t: Array2<f64>,
    pub s_v: Array2<f64>,
    pub s_c: Array2<f64>,
    pub s: Array2<f64>,
}

pub fn prepare_mentions(ms: &[&FeatureBundle], w: &InteractionWeights) -> Result<Vec<PreparedMention>> {
    ms.par_iter().map(|b| PreparedMention::new(b, w)).collect()
}

pub fn prepare_entities(es: &[&FeatureBundle], w: &InteractionWeights) -> Result<Vec<PreparedEntity>> {
    es.par_iter().map(|b| PreparedEntity::new(b, w)).collect()
}

pub fn score_matrices_prepared(
    ms: &[PreparedMention],
    es: &[PreparedEntity],
    w: &InteractionWeights,
    mask: UnitMask,
) -> ScoreMatrices {
    let rows: Vec<Vec<ScoreBreakdown>> = ms
        .par_iter()
        .map(|m| es.iter().map(|e| score_prepared(m, e, w, mask)).collect())
        .collect();
    let shape = (ms.len(), es.len());
    let pick = |f: fn(&ScoreBreakdown) -> f64| Array2::from_shape_fn(shape, |(i, j)| f(&rows[i][j]));
    ScoreMatrices {
        s_t: pick(|b| b.s_t),
        s_v: pick(|b| b.s_v),
        s_c: pick(|b| b.s_c),
        s: pick(|b| b.s),
    }
}

/// Batched scoring: entry (i, j) scores mention i against entity j.
pub fn pairwise_score_matrix(
    ms: &[&FeatureBundle],
    es: &[&FeatureBundle],
    w: &InteractionWeights,
    mask: UnitMask,
) -> Result<ScoreMatrices> {
    mask.validate()?;
    let pm = prepare_mentions(ms, w)?;
    let pe = prepare_entities(es, w)?;
    Ok(score_matrices_prepared(&pm, &pe, w, mask))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn small_dims() -> InteractionDims {
        InteractionDims {
            text_dim: 8,
            image_dim: 6,
            tglu_dim: 4,
            cmfu_dim: 4,
        }
    }

    /// Random bundle at `small_dims()` with the given local row counts.
    pub fn bundle(seed: u64, text_rows: usize, image_rows: usize) -> FeatureBundle {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = || rng.gen_range(-1.0..1.0);
        let text_local = Array2::from_shape_simple_fn((text_rows, d.text_dim), &mut r);
        let image_local = Array2::from_shape_simple_fn((image_rows, d.image_dim), &mut r);
        FeatureBundle {
            text_global: text_local.row(0).to_owned(),
            text_local,
            image_global: image_local.row(0).to_owned(),
            image_local,
        }
    }
}
