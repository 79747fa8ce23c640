//! Seeded random inputs shared by cross-implementation tests.

use mimic_core::encoders::FeatureBundle;
use mimic_core::interaction::{InteractionDims, InteractionWeights};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Widths small enough for loop oracles and finite differences.
pub const SMALL_DIMS: InteractionDims = InteractionDims {
    text_dim: 8,
    image_dim: 6,
    tglu_dim: 4,
    cmfu_dim: 4,
};

/// Random bundle with `text_rows` tokens and `image_rows` patch rows; the
/// global vectors are independent of the local rows.
pub fn bundle(rng: &mut ChaCha8Rng, dims: InteractionDims, text_rows: usize, image_rows: usize) -> FeatureBundle {
    let mut u = || rng.gen_range(-1.0..1.0);
    FeatureBundle {
        text_global: Array1::from_shape_simple_fn(dims.text_dim, &mut u),
        text_local: Array2::from_shape_simple_fn((text_rows, dims.text_dim), &mut u),
        image_global: Array1::from_shape_simple_fn(dims.image_dim, &mut u),
        image_local: Array2::from_shape_simple_fn((image_rows, dims.image_dim), &mut u),
    }
}

/// Seeded weights with every tensor, LayerNorm affines included, perturbed
/// away from its initial value.
pub fn weights(seed: u64, dims: InteractionDims) -> InteractionWeights {
    let mut w = InteractionWeights::init(dims, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1);
    for (_, mut t) in w.tensors_mut() {
        t.mapv_inplace(|v| v + rng.gen_range(-0.5..0.5));
    }
    w
}

/// One pair of bundles plus weights for fixture number `seed`.
pub struct PairFixture {
    pub mention: FeatureBundle,
    pub entity: FeatureBundle,
    pub weights: InteractionWeights,
}

pub fn pair(seed: u64, dims: InteractionDims) -> PairFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tm = rng.gen_range(1..=4);
    let te = rng.gen_range(1..=4);
    let im = rng.gen_range(1..=5);
    let ie = rng.gen_range(1..=5);
    PairFixture {
        mention: bundle(&mut rng, dims, tm, im),
        entity: bundle(&mut rng, dims, te, ie),
        weights: weights(seed, dims),
    }
}

/// `count` bundles with varying row counts.
pub fn bundles(seed: u64, dims: InteractionDims, count: usize) -> Vec<FeatureBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let t = rng.gen_range(1..=4);
            let i = rng.gen_range(1..=5);
            bundle(&mut rng, dims, t, i)
        })
        .collect()
}

/// Random `rows × cols` score matrix with entries in `[-scale, scale)`.
pub fn score_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
}
