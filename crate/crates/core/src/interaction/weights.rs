use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widths of the interaction layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionDims {
    /// Encoder text width (d_T).
    pub text_dim: usize,
    /// Encoder image width (d_v).
    pub image_dim: usize,
    /// Attention width inside TGLU (d_t).
    pub tglu_dim: usize,
    /// Fusion width inside CMFU (d_c).
    pub cmfu_dim: usize,
}

impl Default for InteractionDims {
    fn default() -> Self {
        Self {
            text_dim: 512,
            image_dim: 96,
            tglu_dim: 96,
            cmfu_dim: 96,
        }
    }
}

impl InteractionDims {
    pub fn validate(&self) -> Result<()> {
        if self.text_dim == 0 || self.image_dim == 0 || self.tglu_dim == 0 || self.cmfu_dim == 0 {
            return Err(Error::Config("interaction dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TgluWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    /// FC applied to the entity's global text feature.
    pub proj: Array2<f64>,
    pub proj_bias: Array1<f64>,
    pub norm_gain: Array1<f64>,
    pub norm_bias: Array1<f64>,
}

/// Parameters of one direction of the dual-gated visual unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DualWeights {
    pub in_norm_gain: Array1<f64>,
    pub in_norm_bias: Array1<f64>,
    pub fuse: Array2<f64>,
    pub fuse_bias: Array1<f64>,
    /// d_v → 1 gate projection.
    pub gate: Array1<f64>,
    /// Length-1 gate bias.
    pub gate_bias: Array1<f64>,
    pub out_norm_gain: Array1<f64>,
    pub out_norm_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VdluWeights {
    pub e2m: DualWeights,
    pub m2e: DualWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmfuWeights {
    pub text_proj: Array2<f64>,
    pub text_bias: Array1<f64>,
    pub image_proj: Array2<f64>,
    pub image_bias: Array1<f64>,
    pub gate: Array2<f64>,
    pub gate_bias: Array1<f64>,
    pub norm_gain: Array1<f64>,
    pub norm_bias: Array1<f64>,
}

/// All learnable interaction-layer parameters. FC weights are stored
/// (in × out) so a layer reads `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionWeights {
    pub dims: InteractionDims,
    pub tglu: TgluWeights,
    pub vdlu: VdluWeights,
    pub cmfu: CmfuWeights,
}

struct Init {
    rng: Option<ChaCha8Rng>,
}

impl Init {
    fn fc(&mut self, fan_in: usize, rows: usize, cols: usize) -> Array2<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        match &mut self.rng {
            Some(rng) => Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound)),
            None => Array2::zeros((rows, cols)),
        }
    }

    fn bias(&mut self, fan_in: usize, len: usize) -> Array1<f64> {
        self.fc(fan_in, 1, len).into_shape_with_order(len).unwrap()
    }

    fn gain(&self, len: usize) -> Array1<f64> {
        if self.rng.is_some() {
            Array1::ones(len)
        } else {
            Array1::zeros(len)
        }
    }

    fn dual(&mut self, dv: usize) -> DualWeights {
        DualWeights {
            in_norm_gain: self.gain(dv),
            in_norm_bias: Array1::zeros(dv),
            fuse: self.fc(dv, dv, dv),
            fuse_bias: self.bias(dv, dv),
            gate: self.bias(dv, dv),
            gate_bias: self.bias(dv, 1),
            out_norm_gain: self.gain(dv),
            out_norm_bias: Array1::zeros(dv),
        }
    }

    fn build(mut self, dims: InteractionDims) -> InteractionWeights {
        let InteractionDims {
            text_dim: dt_enc,
            image_dim: dv,
            tglu_dim: dt,
            cmfu_dim: dc,
        } = dims;
        let tglu = TgluWeights {
            query: self.fc(dt_enc, dt_enc, dt),
            key: self.fc(dt_enc, dt_enc, dt),
            value: self.fc(dt_enc, dt_enc, dt),
            proj: self.fc(dt_enc, dt_enc, dt),
            proj_bias: self.bias(dt_enc, dt),
            norm_gain: self.gain(dt),
            norm_bias: Array1::zeros(dt),
        };
        let vdlu = VdluWeights {
            e2m: self.dual(dv),
            m2e: self.dual(dv),
        };
        let cmfu = CmfuWeights {
            text_proj: self.fc(dt_enc, dt_enc, dc),
            text_bias: self.bias(dt_enc, dc),
            image_proj: self.fc(dv, dv, dc),
            image_bias: self.bias(dv, dc),
            gate: self.fc(dc, dc, dc),
            gate_bias: self.bias(dc, dc),
            norm_gain: self.gain(dc),
            norm_bias: Array1::zeros(dc),
        };
        InteractionWeights { dims, tglu, vdlu, cmfu }
    }
}

impl InteractionWeights {
    /// FC layers uniform in ±1/√fan_in, LayerNorm gain 1 and bias 0.
    pub fn init(dims: InteractionDims, seed: u64) -> Self {
        Init {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
        .build(dims)
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros(dims: InteractionDims) -> Self {
        Init { rng: None }.build(dims)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        let t = &self.tglu;
        let c = &self.cmfu;
        let mut out = vec![
            ("tglu.query", t.query.view().into_dyn()),
            ("tglu.key", t.key.view().into_dyn()),
            ("tglu.value", t.value.view().into_dyn()),
            ("tglu.proj", t.proj.view().into_dyn()),
            ("tglu.proj_bias", t.proj_bias.view().into_dyn()),
            ("tglu.norm_gain", t.norm_gain.view().into_dyn()),
            ("tglu.norm_bias", t.norm_bias.view().into_dyn()),
        ];
        for (prefix, d) in [("vdlu.e2m", &self.vdlu.e2m), ("vdlu.m2e", &self.vdlu.m2e)] {
            let names = dual_names(prefix);
            out.extend([
                (names[0], d.in_norm_gain.view().into_dyn()),
                (names[1], d.in_norm_bias.view().into_dyn()),
                (names[2], d.fuse.view().into_dyn()),
                (names[3], d.fuse_bias.view().into_dyn()),
                (names[4], d.gate.view().into_dyn()),
                (names[5], d.gate_bias.view().into_dyn()),
                (names[6], d.out_norm_gain.view().into_dyn()),
                (names[7], d.out_norm_bias.view().into_dyn()),
            ]);
        }
        out.extend([
            ("cmfu.text_proj", c.text_proj.view().into_dyn()),
            ("cmfu.text_bias", c.text_bias.view().into_dyn()),
            ("cmfu.image_proj", c.image_proj.view().into_dyn()),
            ("cmfu.image_bias", c.image_bias.view().into_dyn()),
            ("cmfu.gate", c.gate.view().into_dyn()),
            ("cmfu.gate_bias", c.gate_bias.view().into_dyn()),
            ("cmfu.norm_gain", c.norm_gain.view().into_dyn()),
            ("cmfu.norm_bias", c.norm_bias.view().into_dyn()),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        let t = &mut self.tglu;
        let c = &mut self.cmfu;
        let mut out = vec![
            ("tglu.query", t.query.view_mut().into_dyn()),
            ("tglu.key", t.key.view_mut().into_dyn()),
            ("tglu.value", t.value.view_mut().into_dyn()),
            ("tglu.proj", t.proj.view_mut().into_dyn()),
            ("tglu.proj_bias", t.proj_bias.view_mut().into_dyn()),
            ("tglu.norm_gain", t.norm_gain.view_mut().into_dyn()),
            ("tglu.norm_bias", t.norm_bias.view_mut().into_dyn()),
        ];
        for (prefix, d) in [("vdlu.e2m", &mut self.vdlu.e2m), ("vdlu.m2e", &mut self.vdlu.m2e)] {
            let names = dual_names(prefix);
            out.extend([
                (names[0], d.in_norm_gain.view_mut().into_dyn()),
                (names[1], d.in_norm_bias.view_mut().into_dyn()),
                (names[2], d.fuse.view_mut().into_dyn()),
                (names[3], d.fuse_bias.view_mut().into_dyn()),
                (names[4], d.gate.view_mut().into_dyn()),
                (names[5], d.gate_bias.view_mut().into_dyn()),
                (names[6], d.out_norm_gain.view_mut().into_dyn()),
                (names[7], d.out_norm_bias.view_mut().into_dyn()),
            ]);
        }
        out.extend([
            ("cmfu.text_proj", c.text_proj.view_mut().into_dyn()),
            ("cmfu.text_bias", c.text_bias.view_mut().into_dyn()),
            ("cmfu.image_proj", c.image_proj.view_mut().into_dyn()),
            ("cmfu.image_bias", c.image_bias.view_mut().into_dyn()),
            ("cmfu.gate", c.gate.view_mut().into_dyn()),
            ("cmfu.gate_bias", c.gate_bias.view_mut().into_dyn()),
            ("cmfu.norm_gain", c.norm_gain.view_mut().into_dyn()),
            ("cmfu.norm_bias", c.norm_bias.view_mut().into_dyn()),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters concatenated in `tensors()` order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for (_, mut t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn from_flat(dims: InteractionDims, flat: &[f64]) -> Result<Self> {
        let mut w = Self::zeros(dims);
        w.assign_flat(flat)?;
        Ok(w)
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn dual_names(prefix: &str) -> [&'static str; 8] {
    if prefix == "vdlu.e2m" {
        [
            "vdlu.e2m.in_norm_gain",
            "vdlu.e2m.in_norm_bias",
            "vdlu.e2m.fuse",
            "vdlu.e2m.fuse_bias",
            "vdlu.e2m.gate",
            "vdlu.e2m.gate_bias",
            "vdlu.e2m.out_norm_gain",
            "vdlu.e2m.out_norm_bias",
        ]
    } else {
        [
            "vdlu.m2e.in_norm_gain",
            "vdlu.m2e.in_norm_bias",
            "vdlu.m2e.fuse",
            "vdlu.m2e.fuse_bias",
            "vdlu.m2e.gate",
            "vdlu.m2e.gate_bias",
            "vdlu.m2e.out_norm_gain",
            "vdlu.m2e.out_norm_bias",
        ]
    }
}
