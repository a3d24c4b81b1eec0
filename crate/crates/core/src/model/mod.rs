//! A small anchor-free detector: backbone, PAN neck and per-scale heads.
//!
//! Anchors are ordered P3 row-major, then P4, then P5.

mod decode;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use decode::{
    assemble_masks, box_iou, contrast, decode_and_nms, decode_candidates, detection_mask, nms, rle_decode, rle_encode,
    Detection,
};
pub use forward::{
    backbone_pan, box_head, class_logits_fused, coefficient_head, embedding_head, flatten_anchors, prototype_head,
    Detector, FeaturePyramid, Predictions,
};
pub(crate) use forward::{conv_act, conv_linear, head_features};

/// Strides of the three pyramid levels.
pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const LEVELS: [&str; 3] = ["p3", "p4", "p5"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input extent in pixels; a multiple of 32.
    pub image_size: usize,
    /// Embedding dimension D shared by object and prompt embeddings.
    pub embed_dim: usize,
    /// Head width D' (channels of the feature map fed to the last 1×1 conv).
    pub head_channels: usize,
    /// Number of activation groups A in the visual prompt encoder.
    pub savpe_groups: usize,
    pub stem_width: usize,
    /// Output widths of the four stride-2 stages (strides 4, 8, 16, 32).
    pub stage_widths: [usize; 4],
    /// Widths of P3, P4, P5 after the neck.
    pub pan_widths: [usize; 3],
    /// Number of mask prototypes k.
    pub proto_count: usize,
    /// Hidden width of the SwiGLU block in the text-embedding adapter.
    pub aux_hidden: usize,
}

impl ModelConfig {
    /// Default desk-scale preset.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            embed_dim: 64,
            head_channels: 32,
            savpe_groups: 16,
            stem_width: 8,
            stage_widths: [16, 32, 64, 128],
            pan_widths: [32, 64, 64],
            proto_count: 8,
            aux_hidden: 128,
        }
    }

    /// A very small preset for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            embed_dim: 8,
            head_channels: 4,
            savpe_groups: 2,
            stem_width: 2,
            stage_widths: [3, 3, 4, 4],
            pan_widths: [3, 4, 4],
            proto_count: 2,
            aux_hidden: 16,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.savpe_groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return bad(format!(
                "image size {} is not a positive multiple of 32",
                self.image_size
            ));
        }
        let widths = [
            self.embed_dim,
            self.head_channels,
            self.savpe_groups,
            self.stem_width,
            self.proto_count,
            self.aux_hidden,
        ];
        if widths
            .iter()
            .chain(&self.stage_widths)
            .chain(&self.pan_widths)
            .any(|&w| w == 0)
        {
            return bad("all widths must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.savpe_groups) {
            return bad(format!(
                "embedding dim {} not divisible by {} groups",
                self.embed_dim, self.savpe_groups
            ));
        }
        Ok(())
    }

    pub fn grid_sizes(&self) -> [usize; 3] {
        STRIDES.map(|s| self.image_size / s)
    }

    /// Total anchor count N = Σ (imageSize/stride)².
    pub fn num_anchors(&self) -> usize {
        self.grid_sizes().iter().map(|g| g * g).sum()
    }

    /// Prototype resolution (P3 upsampled by 2).
    pub fn proto_size(&self) -> usize {
        self.image_size / 4
    }

    /// Anchor centres in pixels, N×2 as (x, y), and the stride of each anchor.
    pub fn anchors(&self) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut centers = Vec::with_capacity(self.num_anchors());
        let mut strides = Vec::with_capacity(self.num_anchors());
        for (&stride, &g) in STRIDES.iter().zip(&self.grid_sizes()) {
            for y in 0..g {
                for x in 0..g {
                    centers.push([(x as f64 + 0.5) * stride as f64, (y as f64 + 0.5) * stride as f64]);
                    strides.push(stride);
                }
            }
        }
        (centers, strides)
    }
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±1/√fan_in.
    Uniform {
        fan_in: usize,
    },
    Zeros,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_spec(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) {
    let fan_in = cin * k * k;
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![cout, cin, k, k],
        init: Init::Uniform { fan_in },
    });
    if bias {
        out.push(ParamSpec {
            name: format!("{prefix}.b"),
            shape: vec![cout],
            init: Init::Uniform { fan_in },
        });
    }
}

/// Every parameter of the detector, the visual prompt encoder, the text
/// adapter and the specialized prompt, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    let [s1, s2, s3, s4] = cfg.stage_widths;
    let [p3, p4, p5] = cfg.pan_widths;
    let (d, dh, a, k) = (cfg.embed_dim, cfg.head_channels, cfg.savpe_groups, cfg.proto_count);

    conv_spec(&mut v, "backbone.stem", 3, cfg.stem_width, 3, true);
    conv_spec(&mut v, "backbone.stage1", cfg.stem_width, s1, 3, true);
    conv_spec(&mut v, "backbone.stage2", s1, s2, 3, true);
    conv_spec(&mut v, "backbone.stage3", s2, s3, 3, true);
    conv_spec(&mut v, "backbone.stage4", s3, s4, 3, true);

    conv_spec(&mut v, "pan.td4", s4 + s3, p4, 3, true);
    conv_spec(&mut v, "pan.td3", p4 + s2, p3, 3, true);
    conv_spec(&mut v, "pan.down3", p3, p3, 3, true);
    conv_spec(&mut v, "pan.bu4", p3 + p4, p4, 3, true);
    conv_spec(&mut v, "pan.down4", p4, p4, 3, true);
    conv_spec(&mut v, "pan.bu5", p4 + s4, p5, 3, true);

    for (level, cin) in LEVELS.iter().zip(cfg.pan_widths) {
        conv_spec(&mut v, &format!("head.embed.{level}.conv1"), cin, dh, 3, true);
        conv_spec(&mut v, &format!("head.embed.{level}.conv2"), dh, dh, 3, true);
        conv_spec(&mut v, &format!("head.embed.{level}.proj"), dh, d, 1, false);

        conv_spec(&mut v, &format!("head.box.{level}.conv1"), cin, dh, 3, true);
        conv_spec(&mut v, &format!("head.box.{level}.conv2"), dh, dh, 3, true);
        conv_spec(&mut v, &format!("head.box.{level}.proj"), dh, 4, 1, true);

        conv_spec(&mut v, &format!("head.coef.{level}.conv1"), cin, dh, 3, true);
        conv_spec(&mut v, &format!("head.coef.{level}.proj"), dh, k, 1, true);
    }
    conv_spec(&mut v, "head.proto.conv1", p3, dh, 3, true);
    conv_spec(&mut v, "head.proto.conv2", dh, dh, 3, true);
    conv_spec(&mut v, "head.proto.proj", dh, k, 1, true);

    for (level, cin) in LEVELS.iter().zip(cfg.pan_widths) {
        conv_spec(&mut v, &format!("savpe.sem.{level}.conv1"), cin, dh, 3, true);
        conv_spec(&mut v, &format!("savpe.sem.{level}.conv2"), dh, dh, 3, true);
        conv_spec(&mut v, &format!("savpe.act.{level}"), cin, a, 3, true);
    }
    conv_spec(&mut v, "savpe.sem.proj", 3 * dh, d, 1, true);
    conv_spec(&mut v, "savpe.act.mask", 1, a, 3, true);
    conv_spec(&mut v, "savpe.act.fuse", 2 * a, a, 3, true);

    v.push(ParamSpec {
        name: crate::reprta::W_GATE.into(),
        shape: vec![d, cfg.aux_hidden],
        init: Init::Uniform { fan_in: d },
    });
    v.push(ParamSpec {
        name: crate::reprta::W_UP.into(),
        shape: vec![d, cfg.aux_hidden],
        init: Init::Uniform { fan_in: d },
    });
    // zero output projection: the adapter starts as the identity
    v.push(ParamSpec {
        name: crate::reprta::W_DOWN.into(),
        shape: vec![cfg.aux_hidden, d],
        init: Init::Zeros,
    });
    v.push(ParamSpec {
        name: crate::lrpc::SPECIALIZED.into(),
        shape: vec![1, d],
        init: Init::Uniform { fan_in: d },
    });
    v
}

/// Seeded initialisation of every parameter in [`param_specs`].
pub fn init_weights<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let numel: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..numel)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    .collect()
            }
            Init::Zeros => vec![T::zero(); numel],
        };
        store.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_count_from_config() {
        let cfg = ModelConfig::toy();
        assert_eq!(cfg.grid_sizes(), [8, 4, 2]);
        assert_eq!(cfg.num_anchors(), 84);
        let (centers, strides) = cfg.anchors();
        assert_eq!(centers.len(), 84);
        assert_eq!(centers[0], [4.0, 4.0]);
        assert_eq!(centers[64], [8.0, 8.0]);
        assert_eq!(centers[83], [48.0, 48.0]);
        assert_eq!(strides[83], 32);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::toy().validate().is_ok());
        assert!(ModelConfig::toy().with_groups(32).validate().is_ok());
        assert!(ModelConfig::toy().with_groups(1).validate().is_ok());
        assert!(ModelConfig::toy().with_groups(24).validate().is_err());
        let mut c = ModelConfig::toy();
        c.image_size = 48;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::tiny();
        let a = init_weights::<f32>(&cfg, 3).unwrap();
        let b = init_weights::<f32>(&cfg, 3).unwrap();
        assert_eq!(a.values(), b.values());
        let w = a.get("backbone.stem.w").unwrap();
        let bound = 1.0 / 27f32.sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.get(crate::reprta::W_DOWN).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
