//! Small differentiable building blocks shared by the interaction units.
//!
//! Every forward function that needs state for its backward pass returns a
//! cache; backward functions accumulate parameter gradients in place and
//! return the gradient with respect to their input.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine layer: `x · W + b` with `W` stored as (in × out).
pub fn linear(x: ArrayView1<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    x.dot(&w) + b
}

/// Row-wise affine layer over a matrix of inputs.
pub fn linear_rows(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w) + b
}

/// Accumulates gradients of `linear` and returns d/dx.
pub fn linear_backward(
    x: ArrayView1<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView1<f64>,
    dw: ArrayViewMut2<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array1<f64> {
    outer_add(dw, x, dy);
    db += &dy;
    w.dot(&dy)
}

/// `acc += a ⊗ b`
pub fn outer_add(mut acc: ArrayViewMut2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        acc.row_mut(i).scaled_add(ai, &b);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Array1<f64>,
    pub inv_std: f64,
}

/// LayerNorm over the feature axis (biased variance, eps = 1e-5).
pub fn layer_norm(x: ArrayView1<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> (Array1<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let centered = &x - mean;
    let var = centered.mapv(|v| v * v).sum() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat = centered * inv_std;
    let y = &xhat * &gain + bias;
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: ArrayView1<f64>,
    dy: ArrayView1<f64>,
    mut dgain: ArrayViewMut1<f64>,
    mut dbias: ArrayViewMut1<f64>,
) -> Array1<f64> {
    let n = dy.len() as f64;
    dgain += &(&dy * &cache.xhat);
    dbias += &dy;
    let dxhat = &dy * &gain;
    let sum_dxhat = dxhat.sum();
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum();
    (dxhat * n - sum_dxhat - &cache.xhat * sum_dxhat_xhat) * (cache.inv_std / n)
}

/// Numerically stable softmax of a vector.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.outer_iter().zip(out.outer_iter_mut()) {
        dst.assign(&softmax(src));
    }
    out
}

/// Gradient of the logits given the softmax output and its upstream gradient.
pub fn softmax_backward(p: ArrayView1<f64>, dp: ArrayView1<f64>) -> Array1<f64> {
    let dot = p.dot(&dp);
    &p * &(&dp - dot)
}

pub fn softmax_rows_backward(p: ArrayView2<f64>, dp: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    for ((pr, dr), mut o) in p.outer_iter().zip(dp.outer_iter()).zip(out.outer_iter_mut()) {
        o.assign(&softmax_backward(pr, dr));
    }
    out
}

/// Mean over rows (the pooled feature vector).
pub fn mean_rows(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("mean over an empty matrix")
}

/// Unit-length copy of `x`; zero vectors map to zero (norm reported as 0).
pub fn l2_normalize(x: ArrayView1<f64>) -> (Array1<f64>, f64) {
    let norm = x.dot(&x).sqrt();
    if norm == 0.0 {
        (Array1::zeros(x.len()), 0.0)
    } else {
        (x.mapv(|v| v / norm), norm)
    }
}

pub fn l2_normalize_backward(unit: ArrayView1<f64>, norm: f64, dunit: ArrayView1<f64>) -> Array1<f64> {
    if norm == 0.0 {
        return Array1::zeros(unit.len());
    }
    (&dunit - &(&unit * unit.dot(&dunit))) / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Array1<f64>) -> f64, x: &Array1<f64>) -> Array1<f64> {
        let h = 1e-6;
        let mut g = Array1::zeros(x.len());
        for i in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            g[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = array![1.0, 2.0, 4.0, 7.0];
        let (y, _) = layer_norm(x.view(), Array1::ones(4).view(), Array1::zeros(4).view());
        assert!(y.sum().abs() < 1e-12);
        let var = y.mapv(|v| v * v).sum() / 4.0;
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_of_constant_is_bias() {
        let x = array![3.0, 3.0, 3.0];
        let bias = array![0.1, 0.2, 0.3];
        let (y, _) = layer_norm(x.view(), Array1::ones(3).view(), bias.view());
        assert_eq!(y, bias);
    }

    #[test]
    fn layer_norm_backward_matches_numeric() {
        let x = array![0.3, -1.2, 2.5, 0.7];
        let gain = array![1.1, 0.9, -0.4, 2.0];
        let bias = array![0.0, 0.5, -0.5, 0.1];
        let up = array![0.2, -0.7, 1.3, 0.4];
        let f = |x: &Array1<f64>| layer_norm(x.view(), gain.view(), bias.view()).0.dot(&up);
        let (_, cache) = layer_norm(x.view(), gain.view(), bias.view());
        let mut dg = Array1::zeros(4);
        let mut db = Array1::zeros(4);
        let dx = layer_norm_backward(&cache, gain.view(), up.view(), dg.view_mut(), db.view_mut());
        let num = numeric_grad(f, &x);
        for i in 0..4 {
            assert!((dx[i] - num[i]).abs() < 1e-7, "{i}: {} vs {}", dx[i], num[i]);
        }
        assert_eq!(db, up);
    }

    #[test]
    fn softmax_sums_to_one_and_backward_matches() {
        let z = array![1000.0, 999.0, -5.0];
        let p = softmax(z.view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
        let z = array![0.1, -0.4, 0.9];
        let up = array![1.0, 2.0, -3.0];
        let f = |z: &Array1<f64>| softmax(z.view()).dot(&up);
        let dz = softmax_backward(softmax(z.view()).view(), up.view());
        let num = numeric_grad(f, &z);
        for i in 0..3 {
            assert!((dz[i] - num[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn l2_normalize_backward_matches_numeric() {
        let x = array![0.5, -2.0, 1.5];
        let up = array![0.3, 0.1, -0.8];
        let f = |x: &Array1<f64>| l2_normalize(x.view()).0.dot(&up);
        let (u, n) = l2_normalize(x.view());
        let dx = l2_normalize_backward(u.view(), n, up.view());
        let num = numeric_grad(f, &x);
        for i in 0..3 {
            assert!((dx[i] - num[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_vector_normalizes_to_zero() {
        let (u, n) = l2_normalize(Array1::<f64>::zeros(3).view());
        assert_eq!(n, 0.0);
        assert!(u.iter().all(|&v| v == 0.0));
    }
}
