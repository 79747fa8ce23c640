//! Plain-loop reference implementations of every scoring, loss and metric
//! formula. Inputs are copied into nested `Vec`s and all arithmetic is
//! written out element by element, so nothing here reuses the production
//! kernels. Single-threaded and slow by design; meant for small fixtures.

pub mod fixtures;

use std::collections::BTreeMap;

use mimic_core::encoders::FeatureBundle;
use mimic_core::evaluator::MetricsReport;
use mimic_core::interaction::{
    CmfuWeights, DualWeights, InteractionWeights, ScoreBreakdown, ScoreMatrices, TgluWeights, UnitMask, VdluWeights,
};
use mimic_core::objective::{LossBreakdown, LossTerms};
use ndarray::Array2;

pub type Vector = Vec<f64>;
pub type Matrix = Vec<Vec<f64>>;

const LN_EPS: f64 = 1e-5;

fn vector<'a>(it: impl IntoIterator<Item = &'a f64>) -> Vector {
    it.into_iter().copied().collect()
}

fn matrix(rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) -> Matrix {
    (0..rows).map(|i| (0..cols).map(|j| at(i, j)).collect()).collect()
}

macro_rules! to_matrix {
    ($a:expr) => {{
        let a = &$a;
        matrix(a.nrows(), a.ncols(), |i, j| a[[i, j]])
    }};
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot of mismatched lengths");
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// `x · W + b` for a row vector `x` and `W` stored (in × out).
fn affine(x: &[f64], w: &Matrix, b: Option<&[f64]>) -> Vector {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for j in 0..cols {
        let mut s = 0.0;
        for i in 0..x.len() {
            s += x[i] * w[i][j];
        }
        out[j] = s + b.map_or(0.0, |b| b[j]);
    }
    out
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn softmax(x: &[f64]) -> Vector {
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut e = vec![0.0; x.len()];
    let mut total = 0.0;
    for i in 0..x.len() {
        e[i] = (x[i] - max).exp();
        total += e[i];
    }
    for v in e.iter_mut() {
        *v /= total;
    }
    e
}

fn mean_pool(m: &Matrix) -> Vector {
    let mut out = vec![0.0; m[0].len()];
    for row in m {
        for j in 0..row.len() {
            out[j] += row[j];
        }
    }
    for v in out.iter_mut() {
        *v /= m.len() as f64;
    }
    out
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vector {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let denom = (var + LN_EPS).sqrt();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        out[i] = (x[i] - mean) / denom * gain[i] + bias[i];
    }
    out
}

fn norm(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for &v in x {
        s += v * v;
    }
    s.sqrt()
}

/// TGLU score parts: `(s_T, G2G, G2L)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefTglu {
    pub s_t: f64,
    pub g2g: f64,
    pub g2l: f64,
}

pub fn ref_g2g(t_e: &[f64], t_m: &[f64]) -> f64 {
    let (ne, nm) = (norm(t_e), norm(t_m));
    if ne == 0.0 || nm == 0.0 {
        return 0.0;
    }
    dot(t_e, t_m) / (ne * nm)
}

pub fn ref_tglu(m: &FeatureBundle, e: &FeatureBundle, w: &TgluWeights) -> RefTglu {
    let t_e = vector(&e.text_global);
    let t_m = vector(&m.text_global);
    let g2g = ref_g2g(&t_e, &t_m);

    let (wq, wk, wv, w1) = (
        to_matrix!(w.query),
        to_matrix!(w.key),
        to_matrix!(w.value),
        to_matrix!(w.proj),
    );
    let q = matmul(&to_matrix!(e.text_local), &wq);
    let k = matmul(&to_matrix!(m.text_local), &wk);
    let v = matmul(&to_matrix!(m.text_local), &wv);
    let d_t = wq[0].len() as f64;
    let mut attended = Vec::with_capacity(q.len());
    for qi in &q {
        let logits: Vector = k.iter().map(|kj| dot(qi, kj) / d_t.sqrt()).collect();
        let a = softmax(&logits);
        let mut row = vec![0.0; v[0].len()];
        for j in 0..v.len() {
            for c in 0..row.len() {
                row[c] += a[j] * v[j][c];
            }
        }
        attended.push(row);
    }
    let h = layer_norm(&mean_pool(&attended), &vector(&w.norm_gain), &vector(&w.norm_bias));
    let g2l = dot(&affine(&t_e, &w1, Some(&vector(&w.proj_bias))), &h);
    RefTglu {
        s_t: (g2g + g2l) / 2.0,
        g2g,
        g2l,
    }
}

/// One VDLU direction: interaction from `A` to `B`.
pub fn ref_vdlu_dual(v_a: &[f64], v_b: &[f64], local_b: &Matrix, w: &DualWeights) -> f64 {
    let pooled = mean_pool(local_b);
    let mixed: Vector = (0..v_a.len()).map(|i| pooled[i] + v_a[i]).collect();
    let normed = layer_norm(&mixed, &vector(&w.in_norm_gain), &vector(&w.in_norm_bias));
    let h_vc = affine(&normed, &to_matrix!(w.fuse), Some(&vector(&w.fuse_bias)));
    let gate = (dot(&h_vc, &vector(&w.gate)) + w.gate_bias[0]).tanh();
    let gated: Vector = (0..h_vc.len()).map(|i| gate * h_vc[i] + v_b[i]).collect();
    let h_v = layer_norm(&gated, &vector(&w.out_norm_gain), &vector(&w.out_norm_bias));
    dot(&h_v, v_a)
}

/// VDLU score parts: `(s_V, E2M, M2E)`.
pub fn ref_vdlu(m: &FeatureBundle, e: &FeatureBundle, w: &VdluWeights) -> (f64, f64, f64) {
    let (v_e, v_m) = (vector(&e.image_global), vector(&m.image_global));
    let e2m = ref_vdlu_dual(&v_e, &v_m, &to_matrix!(m.image_local), &w.e2m);
    let m2e = ref_vdlu_dual(&v_m, &v_e, &to_matrix!(e.image_local), &w.m2e);
    ((e2m + m2e) / 2.0, e2m, m2e)
}

/// Text-guided fusion of projected image rows.
pub fn ref_cmfu_fuse(h_t: &[f64], h_v: &Matrix, w: &CmfuWeights) -> Vector {
    let logits: Vector = h_v.iter().map(|row| dot(row, h_t)).collect();
    let alpha = softmax(&logits);
    let mut h_c = vec![0.0; h_t.len()];
    for i in 0..h_v.len() {
        for c in 0..h_c.len() {
            h_c[c] += alpha[i] * h_v[i][c];
        }
    }
    let gate: Vector = affine(h_t, &to_matrix!(w.gate), Some(&vector(&w.gate_bias)))
        .into_iter()
        .map(f64::tanh)
        .collect();
    let mixed: Vector = (0..h_t.len()).map(|i| gate[i] * h_t[i] + h_c[i]).collect();
    layer_norm(&mixed, &vector(&w.norm_gain), &vector(&w.norm_bias))
}

fn ref_cmfu_side(b: &FeatureBundle, w: &CmfuWeights) -> Vector {
    let h_t = affine(
        &vector(&b.text_global),
        &to_matrix!(w.text_proj),
        Some(&vector(&w.text_bias)),
    );
    let wc2 = to_matrix!(w.image_proj);
    let bc2 = vector(&w.image_bias);
    let h_v: Matrix = to_matrix!(b.image_local)
        .iter()
        .map(|row| affine(row, &wc2, Some(&bc2)))
        .collect();
    ref_cmfu_fuse(&h_t, &h_v, w)
}

pub fn ref_cmfu(m: &FeatureBundle, e: &FeatureBundle, w: &CmfuWeights) -> f64 {
    dot(&ref_cmfu_side(e, w), &ref_cmfu_side(m, w))
}

/// Every sub-score of one pair; disabled units report zero.
pub fn ref_combined(m: &FeatureBundle, e: &FeatureBundle, w: &InteractionWeights, mask: UnitMask) -> ScoreBreakdown {
    let mut out = ScoreBreakdown::default();
    let mut sum = 0.0;
    let mut count = 0.0;
    if mask.tglu {
        let t = ref_tglu(m, e, &w.tglu);
        (out.s_t_g2g, out.s_t_g2l, out.s_t) = (t.g2g, t.g2l, t.s_t);
        sum += t.s_t;
        count += 1.0;
    }
    if mask.vdlu {
        (out.s_v, out.s_v_e2m, out.s_v_m2e) = ref_vdlu(m, e, &w.vdlu);
        sum += out.s_v;
        count += 1.0;
    }
    if mask.cmfu {
        out.s_c = ref_cmfu(m, e, &w.cmfu);
        sum += out.s_c;
        count += 1.0;
    }
    out.s = sum / count;
    out
}

/// Mean over rows of `-log(exp(s_ii/τ) / Σ_j exp(s_ij/τ))` with the target
/// column in place of `i`.
pub fn ref_info_nce(scores: &Matrix, targets: &[usize], temperature: f64) -> f64 {
    let mut total = 0.0;
    for (i, row) in scores.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            max = max.max(v / temperature);
        }
        let mut denom = 0.0;
        for &v in row {
            denom += (v / temperature - max).exp();
        }
        total += -(row[targets[i]] / temperature - max) + denom.ln();
    }
    total / scores.len() as f64
}

/// `L = L_O + L_T + L_V + L_C`; a term counts only when both its unit and
/// its loss flag are on.
pub fn ref_loss(
    mats: &ScoreMatrices,
    targets: &[usize],
    units: UnitMask,
    terms: LossTerms,
    temperature: f64,
) -> LossBreakdown {
    let m = |a: &Array2<f64>| to_matrix!(a);
    let mut out = LossBreakdown {
        l_o: ref_info_nce(&m(&mats.s), targets, temperature),
        ..LossBreakdown::default()
    };
    if units.tglu && terms.l_t {
        out.l_t = ref_info_nce(&m(&mats.s_t), targets, temperature);
    }
    if units.vdlu && terms.l_v {
        out.l_v = ref_info_nce(&m(&mats.s_v), targets, temperature);
    }
    if units.cmfu && terms.l_c {
        out.l_c = ref_info_nce(&m(&mats.s_c), targets, temperature);
    }
    out.total = out.l_o + out.l_t + out.l_v + out.l_c;
    out
}

/// H@k (rank ≤ k), MRR and MR by direct summation.
pub fn ref_metrics(ranks: &[usize], ks: &[usize]) -> MetricsReport {
    let n = ranks.len() as f64;
    let mut hits = BTreeMap::new();
    for &k in ks {
        let mut c = 0.0;
        for &r in ranks {
            if r <= k {
                c += 1.0;
            }
        }
        hits.insert(k, c / n);
    }
    let (mut rr, mut rsum) = (0.0, 0.0);
    for &r in ranks {
        rr += 1.0 / r as f64;
        rsum += r as f64;
    }
    MetricsReport {
        n: ranks.len(),
        hits,
        mrr: rr / n,
        mr: rsum / n,
        checkpoint: String::new(),
        ranks: ranks.to_vec(),
    }
}

/// Pessimistic 1-based rank of `gt`: one plus the number of other entities
/// scoring at least as high.
pub fn ref_rank(scores: &[(String, f64)], gt: &str) -> usize {
    let s_gt = scores.iter().find(|(id, _)| id == gt).expect("gt present").1;
    let mut rank = 1;
    for (id, s) in scores {
        if id != gt && *s >= s_gt {
            rank += 1;
        }
    }
    rank
}
