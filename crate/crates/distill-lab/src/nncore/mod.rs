//! The toy denoiser: a fixed-topology conv net with one self-attention
//! block, hand-written forward and reverse passes.
//!
//! Topology for `[3, S, S]` inputs (S = `image_size`, C = `base_channels`):
//!
//! ```text
//! concat(image, depth)            [4, S, S]
//! conv 3x3 -> C, silu             [C, S, S]        (skip a0)
//! conv 3x3 /2 -> 2C, silu         [2C, S/2, S/2]   (skip a1)
//! conv 3x3 /2 -> 4C, silu         [4C, S/4, S/4]
//! + time bias + class bias       (broadcast per channel)
//! self-attention block, residual  [4C, S/4, S/4]
//! upsample x2, concat a1, conv 3x3 -> 2C, silu
//! upsample x2, concat a0, conv 3x3 -> C, silu
//! conv 3x3 -> 3 (zero-initialized)
//! ```
//!
//! The attention block exposes its K/V: every forward returns them as an
//! [`AttentionCache`], and a forward may *inject* a cache recorded elsewhere,
//! in which case queries still come from the current input but keys/values
//! are the injected ones. Injecting a cache computed from the same input is
//! bit-identical to not injecting: the replacement values equal the computed
//! ones, and both paths run the same arithmetic in the same order.
//!
//! The timestep input is the normalized ladder position `t/T`, so one model
//! drives schedules of different lengths.

mod io;
mod net;
mod train;

pub use io::{load_params, save_params};
pub use net::{backward, forward, forward_train, ForwardOutput, Tape};
pub use train::{train, TrainOptions, TrainReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{rng, Error, Result};

/// Sinusoidal time-embedding width (fixed; projected to 4C by `time_proj`).
pub const TIME_EMB_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Square input side; must be divisible by 4 (two stride-2 stages).
    pub image_size: usize,
    pub base_channels: usize,
    pub attn_heads: usize,
    /// Side of the attention grid; the fixed topology pins it to
    /// `image_size / 4`, kept explicit so configs are self-describing.
    pub attn_resolution: usize,
    pub num_classes: usize,
    /// Probability that training replaces the condition with the null
    /// condition (null class token + zero depth), for guidance readiness.
    pub cond_drop_prob: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            base_channels: 16,
            attn_heads: 2,
            attn_resolution: 8,
            num_classes: crate::toyworld::NUM_CLASSES,
            cond_drop_prob: 0.1,
        }
    }
}

impl DenoiserConfig {
    /// Bottleneck width 4C, which is also the attention model dimension.
    pub fn bottleneck(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size must be >= 8 and divisible by 4, got {}",
                self.image_size
            )));
        }
        if self.attn_resolution != self.image_size / 4 {
            return Err(Error::Config(format!(
                "attn_resolution must be image_size/4 = {}, got {}",
                self.image_size / 4,
                self.attn_resolution
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.attn_heads == 0 || self.bottleneck() % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "attn_heads ({}) must divide the bottleneck width ({})",
                self.attn_heads,
                self.bottleneck()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(format!(
                "cond_drop_prob must be in [0, 1], got {}",
                self.cond_drop_prob
            )));
        }
        Ok(())
    }
}

/// Conditioning input: a depth map in [-1, 1] plus a class token
/// (`None` = the null token, i.e. unconditional).
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub depth: Tensor,
    pub class_id: Option<usize>,
}

impl Condition {
    pub fn new(depth: Tensor, class_id: usize) -> Condition {
        let mut depth = depth;
        depth.clamp_inplace(-1.0, 1.0);
        Condition {
            depth,
            class_id: Some(class_id),
        }
    }

    /// The unconditional branch: zero depth, null class token.
    pub fn null(image_size: usize) -> Condition {
        Condition {
            depth: Tensor::zeros(&[image_size, image_size]),
            class_id: None,
        }
    }

    /// Same class token, depth zeroed (the no-depth ablation).
    pub fn without_depth(&self) -> Condition {
        Condition {
            depth: Tensor::zeros(self.depth.shape()),
            class_id: self.class_id,
        }
    }
}

/// K/V captured at the attention block, tagged with the ladder step the
/// pipeline recorded it at. Shapes are `[tokens, bottleneck]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCache {
    pub t: usize,
    pub k: Tensor,
    pub v: Tensor,
}

/// One conv layer's parameters; weight `[out, in, 3, 3]`, bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub w: Tensor,
    pub b: Tensor,
}

/// One linear layer's parameters; weight `[out, in]`, bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

/// All learnable arrays. Doubles as the gradient container (same schema);
/// gradients carry the same config tag as the parameters they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub cfg: DenoiserConfig,
    pub conv_in: Conv,
    pub down1: Conv,
    pub down2: Conv,
    pub time_proj: Linear,
    /// `[num_classes + 1, 4C]`; the extra final row is the null token.
    pub class_embed: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub up1: Conv,
    pub up2: Conv,
    pub conv_out: Conv,
}

impl DenoiserParams {
    /// Named views over every array, in the canonical (serialization) order.
    pub fn arrays(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv_in.weight", &self.conv_in.w),
            ("conv_in.bias", &self.conv_in.b),
            ("down1.weight", &self.down1.w),
            ("down1.bias", &self.down1.b),
            ("down2.weight", &self.down2.w),
            ("down2.bias", &self.down2.b),
            ("time_proj.weight", &self.time_proj.w),
            ("time_proj.bias", &self.time_proj.b),
            ("class_embed", &self.class_embed),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("up1.weight", &self.up1.w),
            ("up1.bias", &self.up1.b),
            ("up2.weight", &self.up2.w),
            ("up2.bias", &self.up2.b),
            ("conv_out.weight", &self.conv_out.w),
            ("conv_out.bias", &self.conv_out.b),
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv_in.weight", &mut self.conv_in.w),
            ("conv_in.bias", &mut self.conv_in.b),
            ("down1.weight", &mut self.down1.w),
            ("down1.bias", &mut self.down1.b),
            ("down2.weight", &mut self.down2.w),
            ("down2.bias", &mut self.down2.b),
            ("time_proj.weight", &mut self.time_proj.w),
            ("time_proj.bias", &mut self.time_proj.b),
            ("class_embed", &mut self.class_embed),
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("up1.weight", &mut self.up1.w),
            ("up1.bias", &mut self.up1.b),
            ("up2.weight", &mut self.up2.w),
            ("up2.bias", &mut self.up2.b),
            ("conv_out.weight", &mut self.conv_out.w),
            ("conv_out.bias", &mut self.conv_out.b),
        ]
    }

    /// Zero-filled gradient container with matching shapes.
    pub fn zeros_like(&self) -> DenoiserParams {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        DenoiserParams {
            cfg: self.cfg,
            conv_in: Conv {
                w: z(&self.conv_in.w),
                b: z(&self.conv_in.b),
            },
            down1: Conv {
                w: z(&self.down1.w),
                b: z(&self.down1.b),
            },
            down2: Conv {
                w: z(&self.down2.w),
                b: z(&self.down2.b),
            },
            time_proj: Linear {
                w: z(&self.time_proj.w),
                b: z(&self.time_proj.b),
            },
            class_embed: z(&self.class_embed),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            up1: Conv {
                w: z(&self.up1.w),
                b: z(&self.up1.b),
            },
            up2: Conv {
                w: z(&self.up2.w),
                b: z(&self.up2.b),
            },
            conv_out: Conv {
                w: z(&self.conv_out.w),
                b: z(&self.conv_out.b),
            },
        }
    }

    /// `self += k * other` across every array (optimizer/grad accumulation).
    pub fn axpy(&mut self, k: f64, other: &DenoiserParams) {
        let others = other.arrays();
        for ((_, a), (_, b)) in self.arrays_mut().into_iter().zip(others) {
            a.axpy(k, b);
        }
    }

    /// Sum over arrays of the squared entry sums (grad-norm diagnostics).
    pub fn sqnorm(&self) -> f64 {
        self.arrays().iter().map(|(_, t)| t.sqnorm()).sum()
    }

    /// Round every array to f32 values (on-disk precision); keeps save/load
    /// bitwise lossless.
    pub fn quantize_f32(&mut self) {
        for (_, t) in self.arrays_mut() {
            t.quantize_f32();
        }
    }

    /// SHA-256 over all arrays in canonical order (change detection).
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, t) in self.arrays() {
            hasher.update(name.as_bytes());
            for &v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Fresh parameters: scaled-uniform fan-in init for weights, zero biases,
/// zero output conv (so an untrained model predicts exactly zero noise).
pub fn init_params(cfg: &DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let d = cfg.bottleneck();
    let k = cfg.num_classes;

    let mut array_idx = 0u64;
    let mut uniform = |shape: &[usize], fan_in: usize| {
        let mut r = rng::stream(seed, "init", array_idx);
        array_idx += 1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut t = Tensor::from_fn(shape, |_| 0.0);
        for v in t.data_mut() {
            *v = r.gen_range(-bound..bound);
        }
        t
    };
    let conv = |u: &mut dyn FnMut(&[usize], usize) -> Tensor, out: usize, inp: usize| Conv {
        w: u(&[out, inp, 3, 3], inp * 9),
        b: Tensor::zeros(&[out]),
    };

    let mut p = DenoiserParams {
        cfg: *cfg,
        conv_in: conv(&mut uniform, c, 4),
        down1: conv(&mut uniform, 2 * c, c),
        down2: conv(&mut uniform, 4 * c, 2 * c),
        time_proj: Linear {
            w: uniform(&[d, TIME_EMB_DIM], TIME_EMB_DIM),
            b: Tensor::zeros(&[d]),
        },
        class_embed: uniform(&[k + 1, d], d),
        wq: uniform(&[d, d], d),
        wk: uniform(&[d, d], d),
        wv: uniform(&[d, d], d),
        wo: uniform(&[d, d], d),
        up1: conv(&mut uniform, 2 * c, 6 * c),
        up2: conv(&mut uniform, c, 3 * c),
        conv_out: Conv {
            w: Tensor::zeros(&[3, c, 3, 3]),
            b: Tensor::zeros(&[3]),
        },
    };
    p.quantize_f32();
    Ok(p)
}

#[cfg(test)]
pub(crate) fn test_config() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 8,
        base_channels: 4,
        attn_heads: 2,
        attn_resolution: 2,
        num_classes: 3,
        cond_drop_prob: 0.1,
    }
}
