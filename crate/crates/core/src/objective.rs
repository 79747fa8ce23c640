//! In-batch contrastive objective: one InfoNCE term on the combined score
//! plus one per interaction unit.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{ScoreGradients, ScoreMatrices, UnitMask};
use crate::nn;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_o: f64,
    pub l_t: f64,
    pub l_v: f64,
    pub l_c: f64,
    pub total: f64,
}

/// Which per-unit terms join the overall term. A unit term only counts when
/// its unit is enabled too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_t: bool,
    pub l_v: bool,
    pub l_c: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::ALL
    }
}

impl LossTerms {
    pub const ALL: Self = Self {
        l_t: true,
        l_v: true,
        l_c: true,
    };

    pub fn effective(self, units: UnitMask) -> Self {
        Self {
            l_t: self.l_t && units.tglu,
            l_v: self.l_v && units.vdlu,
            l_c: self.l_c && units.cmfu,
        }
    }
}

fn check(scores: ArrayView2<f64>, targets: &[usize]) -> Result<()> {
    if scores.nrows() == 0 || scores.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} targets",
            scores.nrows(),
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= scores.ncols()) {
        return Err(Error::Shape(format!("target column {t} out of {}", scores.ncols())));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score matrix contains NaN or infinity".into()));
    }
    Ok(())
}

/// Mean over rows of `-log softmax(row / temperature)[target]`, together with
/// its gradient w.r.t. the raw scores.
pub fn info_nce_with_grad(scores: ArrayView2<f64>, targets: &[usize], temperature: f64) -> Result<(f64, Array2<f64>)> {
    check(scores, targets)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let rows = scores.nrows() as f64;
    let mut grad = Array2::zeros(scores.raw_dim());
    let mut loss = 0.0;
    for (i, (row, mut g)) in scores.outer_iter().zip(grad.outer_iter_mut()).enumerate() {
        let logits = row.mapv(|v| v / temperature);
        let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let log_sum = logits.mapv(|v| (v - max).exp()).sum().ln() + max;
        loss += log_sum - logits[targets[i]];
        let mut p = nn::softmax(logits.view());
        p[targets[i]] -= 1.0;
        g.assign(&(p / (rows * temperature)));
    }
    Ok((loss / rows, grad))
}

/// InfoNCE with unit temperature.
pub fn info_nce_loss(scores: ArrayView2<f64>, targets: &[usize]) -> Result<f64> {
    Ok(info_nce_with_grad(scores, targets, 1.0)?.0)
}

/// Loss terms and the gradient each unit score matrix receives.
pub fn objective_with_grads(
    mats: &ScoreMatrices,
    targets: &[usize],
    units: UnitMask,
    terms: LossTerms,
    temperature: f64,
) -> Result<(LossBreakdown, ScoreGradients)> {
    units.validate()?;
    let terms = terms.effective(units);
    let (l_o, d_s) = info_nce_with_grad(mats.s.view(), targets, temperature)?;
    let share = 1.0 / units.count() as f64;
    let zeros = || Array2::zeros(mats.s.raw_dim());
    let mut out = LossBreakdown {
        l_o,
        ..LossBreakdown::default()
    };
    let unit_grad = |enabled: bool, with_term: bool, m: &Array2<f64>, slot: &mut f64| -> Result<Array2<f64>> {
        if !enabled {
            return Ok(zeros());
        }
        let mut g = &d_s * share;
        if with_term {
            let (l, d) = info_nce_with_grad(m.view(), targets, temperature)?;
            *slot = l;
            g += &d;
        }
        Ok(g)
    };
    let g_t = unit_grad(units.tglu, terms.l_t, &mats.s_t, &mut out.l_t)?;
    let g_v = unit_grad(units.vdlu, terms.l_v, &mats.s_v, &mut out.l_v)?;
    let g_c = unit_grad(units.cmfu, terms.l_c, &mats.s_c, &mut out.l_c)?;
    out.total = out.l_o + out.l_t + out.l_v + out.l_c;
    Ok((
        out,
        ScoreGradients {
            s_t: g_t,
            s_v: g_v,
            s_c: g_c,
        },
    ))
}

/// `L = L_O + L_T + L_V + L_C`, with disabled terms reported as zero.
pub fn total_objective(
    mats: &ScoreMatrices,
    targets: &[usize],
    units: UnitMask,
    terms: LossTerms,
) -> Result<LossBreakdown> {
    Ok(objective_with_grads(mats, targets, units, terms, 1.0)?.0)
}
