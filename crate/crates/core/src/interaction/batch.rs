//! Reverse pass through the batched interaction layer.
//!
//! Pair gradients are accumulated over fixed-size mention chunks and summed
//! in chunk order, so results are bit-identical regardless of thread count.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use super::tglu::{self, EntityTextGrad, MentionTextGrad};
use super::{prepare_entities, prepare_mentions, vdlu, InteractionWeights, UnitMask};
use crate::encoders::FeatureBundle;
use crate::error::{Error, Result};

const CHUNK: usize = 4;

/// d(loss)/d(unit score matrix) for each unit, mentions × entities.
#[derive(Debug, Clone)]
pub struct ScoreGradients {
    pub s_t: Array2<f64>,
    pub s_v: Array2<f64>,
    pub s_c: Array2<f64>,
}

/// Gradients w.r.t. interaction weights and every input feature. Feature
/// gradients reuse `FeatureBundle` as a same-shaped container.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub weights: InteractionWeights,
    pub mentions: Vec<FeatureBundle>,
    pub entities: Vec<FeatureBundle>,
}

#[derive(Clone)]
struct SideAcc<T> {
    text: T,
    image_global: Array1<f64>,
    pooled: Array1<f64>,
    fused: Array1<f64>,
}

impl<T> SideAcc<T> {
    fn new(text: T, dv: usize, dc: usize) -> Self {
        Self {
            text,
            image_global: Array1::zeros(dv),
            pooled: Array1::zeros(dv),
            fused: Array1::zeros(dc),
        }
    }
}

fn add_entity_acc(into: &mut SideAcc<EntityTextGrad>, from: &SideAcc<EntityTextGrad>) {
    into.text.unit += &from.text.unit;
    into.text.query += &from.text.query;
    into.text.proj += &from.text.proj;
    into.image_global += &from.image_global;
    into.pooled += &from.pooled;
    into.fused += &from.fused;
}

fn zero_feature_grad(b: &FeatureBundle) -> FeatureBundle {
    FeatureBundle {
        text_global: Array1::zeros(b.text_global.raw_dim()),
        text_local: Array2::zeros(b.text_local.raw_dim()),
        image_global: Array1::zeros(b.image_global.raw_dim()),
        image_local: Array2::zeros(b.image_local.raw_dim()),
    }
}

pub fn pairwise_backward(
    ms: &[&FeatureBundle],
    es: &[&FeatureBundle],
    w: &InteractionWeights,
    mask: UnitMask,
    grads: &ScoreGradients,
) -> Result<BatchGradients> {
    mask.validate()?;
    let shape = (ms.len(), es.len());
    for (name, g) in [("s_t", &grads.s_t), ("s_v", &grads.s_v), ("s_c", &grads.s_c)] {
        if g.dim() != shape {
            return Err(Error::Shape(format!(
                "gradient {name} is {:?}, expected {:?}",
                g.dim(),
                shape
            )));
        }
    }
    let pm = prepare_mentions(ms, w)?;
    let pe = prepare_entities(es, w)?;
    let dv = w.dims.image_dim;
    let dc = w.dims.cmfu_dim;

    let chunk_results: Vec<_> = (0..ms.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|rows| {
            let mut dw = w.zeros_like();
            let mut ents: Vec<SideAcc<EntityTextGrad>> =
                pe.iter().map(|e| SideAcc::new(e.text.zero_grad(), dv, dc)).collect();
            let mut mens: Vec<SideAcc<MentionTextGrad>> = Vec::with_capacity(rows.len());
            for &i in rows {
                let m = &pm[i];
                let mut macc = SideAcc::new(m.text.zero_grad(), dv, dc);
                for (j, e) in pe.iter().enumerate() {
                    let eacc = &mut ents[j];
                    let dt = grads.s_t[[i, j]];
                    if mask.tglu && dt != 0.0 {
                        tglu::g2g_backward(&e.text, &m.text, dt / 2.0, &mut eacc.text, &mut macc.text);
                        tglu::g2l_backward(
                            &e.text,
                            &m.text,
                            &w.tglu,
                            dt / 2.0,
                            &mut dw.tglu,
                            &mut eacc.text,
                            &mut macc.text,
                        );
                    }
                    let dvs = grads.s_v[[i, j]];
                    if mask.vdlu && dvs != 0.0 {
                        let g = vdlu::dual_backward(
                            e.image_global.view(),
                            m.image_global.view(),
                            m.pooled_image.view(),
                            &w.vdlu.e2m,
                            dvs / 2.0,
                            &mut dw.vdlu.e2m,
                        );
                        eacc.image_global += &g.global_a;
                        macc.image_global += &g.global_b;
                        macc.pooled += &g.pooled_b;
                        let g = vdlu::dual_backward(
                            m.image_global.view(),
                            e.image_global.view(),
                            e.pooled_image.view(),
                            &w.vdlu.m2e,
                            dvs / 2.0,
                            &mut dw.vdlu.m2e,
                        );
                        macc.image_global += &g.global_a;
                        eacc.image_global += &g.global_b;
                        eacc.pooled += &g.pooled_b;
                    }
                    let dcs = grads.s_c[[i, j]];
                    if mask.cmfu && dcs != 0.0 {
                        eacc.fused.scaled_add(dcs, &m.cmfu.fused);
                        macc.fused.scaled_add(dcs, &e.cmfu.fused);
                    }
                }
                mens.push(macc);
            }
            (dw, ents, mens)
        })
        .collect();

    let mut dw = w.zeros_like();
    let mut ent_acc: Vec<SideAcc<EntityTextGrad>> =
        pe.iter().map(|e| SideAcc::new(e.text.zero_grad(), dv, dc)).collect();
    let mut men_acc: Vec<SideAcc<MentionTextGrad>> = Vec::with_capacity(ms.len());
    for (cdw, ents, mens) in chunk_results {
        dw.add_assign(&cdw);
        for (into, from) in ent_acc.iter_mut().zip(&ents) {
            add_entity_acc(into, from);
        }
        men_acc.extend(mens);
    }

    let mut mention_grads = Vec::with_capacity(ms.len());
    for ((b, p), acc) in ms.iter().zip(&pm).zip(&men_acc) {
        let mut g = zero_feature_grad(b);
        let (dtg, dtl) = p.text.backward(b.text_local.view(), &w.tglu, &acc.text, &mut dw.tglu);
        g.text_global += &dtg;
        g.text_local += &dtl;
        side_image_backward(b, &mut g, &acc.image_global, &acc.pooled);
        let (dtg, dil) = p.cmfu.backward(
            b.text_global.view(),
            b.image_local.view(),
            &w.cmfu,
            acc.fused.view(),
            &mut dw.cmfu,
        );
        g.text_global += &dtg;
        g.image_local += &dil;
        mention_grads.push(g);
    }

    let mut entity_grads = Vec::with_capacity(es.len());
    for ((b, p), acc) in es.iter().zip(&pe).zip(&ent_acc) {
        let mut g = zero_feature_grad(b);
        let (dtg, dtl) = p.text.backward(
            b.text_global.view(),
            b.text_local.view(),
            &w.tglu,
            &acc.text,
            &mut dw.tglu,
        );
        g.text_global += &dtg;
        g.text_local += &dtl;
        side_image_backward(b, &mut g, &acc.image_global, &acc.pooled);
        let (dtg, dil) = p.cmfu.backward(
            b.text_global.view(),
            b.image_local.view(),
            &w.cmfu,
            acc.fused.view(),
            &mut dw.cmfu,
        );
        g.text_global += &dtg;
        g.image_local += &dil;
        entity_grads.push(g);
    }

    Ok(BatchGradients {
        weights: dw,
        mentions: mention_grads,
        entities: entity_grads,
    })
}

fn side_image_backward(b: &FeatureBundle, g: &mut FeatureBundle, dglobal: &Array1<f64>, dpooled: &Array1<f64>) {
    g.image_global += dglobal;
    let rows = b.image_local.nrows() as f64;
    let share = dpooled / rows;
    for mut row in g.image_local.axis_iter_mut(Axis(0)) {
        row += &share;
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{bundle, small_dims};
    use super::super::{pairwise_score_matrix, ScoreMatrices};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Σ_ij G_t∘S_t + G_v∘S_v + G_c∘S_c; its gradient is exactly what
    /// `pairwise_backward` computes for upstream gradients G.
    fn probe(ms: &[&FeatureBundle], es: &[&FeatureBundle], w: &InteractionWeights, g: &ScoreGradients) -> f64 {
        let ScoreMatrices { s_t, s_v, s_c, .. } = pairwise_score_matrix(ms, es, w, UnitMask::ALL).unwrap();
        (&s_t * &g.s_t).sum() + (&s_v * &g.s_v).sum() + (&s_c * &g.s_c).sum()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn weight_and_feature_gradients_match_finite_differences() {
        let w = InteractionWeights::init(small_dims(), 21);
        let ms: Vec<_> = (0..2).map(|i| bundle(i, 3, 3)).collect();
        let es: Vec<_> = (0..3).map(|i| bundle(10 + i, 2 + i as usize, 3)).collect();
        let mr: Vec<_> = ms.iter().collect();
        let er: Vec<_> = es.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = || Array2::from_shape_simple_fn((2, 3), || rng.gen_range(-1.0..1.0));
        let g = ScoreGradients {
            s_t: r(),
            s_v: r(),
            s_c: r(),
        };
        let out = pairwise_backward(&mr, &er, &w, UnitMask::ALL, &g).unwrap();
        let h = 1e-5;

        let flat = w.flatten();
        let analytic = out.weights.flatten();
        for k in 0..flat.len() {
            let mut p = flat.clone();
            p[k] += h;
            let mut m = flat.clone();
            m[k] -= h;
            let fp = probe(&mr, &er, &InteractionWeights::from_flat(w.dims, &p).unwrap(), &g);
            let fm = probe(&mr, &er, &InteractionWeights::from_flat(w.dims, &m).unwrap(), &g);
            let num = (fp - fm) / (2.0 * h);
            assert!(rel_err(analytic[k], num) < 1e-5, "param {k}: {} vs {num}", analytic[k]);
        }

        // One entry of each feature tensor of mention 1 and entity 2.
        let mut ms2 = ms.clone();
        let mut es2 = es.clone();
        type Pick = fn(&mut FeatureBundle) -> &mut f64;
        let picks: [(&str, Pick); 4] = [
            ("text_global", |b| &mut b.text_global[3]),
            ("text_local", |b| &mut b.text_local[[1, 2]]),
            ("image_global", |b| &mut b.image_global[4]),
            ("image_local", |b| &mut b.image_local[[2, 1]]),
        ];
        for (name, pick) in picks {
            for side in 0..2 {
                let base = if side == 0 {
                    *pick(&mut ms2[1])
                } else {
                    *pick(&mut es2[2])
                };
                let eval = |v: f64, ms2: &mut Vec<FeatureBundle>, es2: &mut Vec<FeatureBundle>| {
                    if side == 0 {
                        *pick(&mut ms2[1]) = v;
                    } else {
                        *pick(&mut es2[2]) = v;
                    }
                    let mr: Vec<_> = ms2.iter().collect();
                    let er: Vec<_> = es2.iter().collect();
                    probe(&mr, &er, &w, &g)
                };
                let fp = eval(base + h, &mut ms2, &mut es2);
                let fm = eval(base - h, &mut ms2, &mut es2);
                eval(base, &mut ms2, &mut es2);
                let num = (fp - fm) / (2.0 * h);
                let mut grad = if side == 0 {
                    out.mentions[1].clone()
                } else {
                    out.entities[2].clone()
                };
                let a = *pick(&mut grad);
                assert!(rel_err(a, num) < 1e-5, "{name} side {side}: {a} vs {num}");
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let w = InteractionWeights::init(small_dims(), 2);
        let ms: Vec<_> = (0..9).map(|i| bundle(i, 3, 3)).collect();
        let es: Vec<_> = (0..9).map(|i| bundle(30 + i, 3, 3)).collect();
        let mr: Vec<_> = ms.iter().collect();
        let er: Vec<_> = es.iter().collect();
        let g = ScoreGradients {
            s_t: Array2::from_elem((9, 9), 0.3),
            s_v: Array2::from_elem((9, 9), -0.2),
            s_c: Array2::from_elem((9, 9), 0.1),
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| pairwise_backward(&mr, &er, &w, UnitMask::ALL, &g).unwrap());
        let b = many.install(|| pairwise_backward(&mr, &er, &w, UnitMask::ALL, &g).unwrap());
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.entities, b.entities);
    }
}
