use super::{ModelConfig, LEVELS};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Multi-scale neck outputs at strides 8, 16 and 32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T: Scalar> {
    pub p3: Tensor<T>,
    pub p4: Tensor<T>,
    pub p5: Tensor<T>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn levels(&self) -> [&Tensor<T>; 3] {
        [&self.p3, &self.p4, &self.p5]
    }

    /// Records the three levels as constants on `g`.
    pub fn to_graph(&self, g: &mut Graph<T>) -> [Var; 3] {
        [
            g.constant(self.p3.clone()),
            g.constant(self.p4.clone()),
            g.constant(self.p5.clone()),
        ]
    }

    pub fn from_graph(g: &Graph<T>, vars: [Var; 3]) -> Self {
        Self {
            p3: g.value(vars[0]).clone(),
            p4: g.value(vars[1]).clone(),
            p5: g.value(vars[2]).clone(),
        }
    }
}

/// Per-anchor outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Predictions<T: Scalar> {
    /// Object embeddings O (N×D). Absent for a fused model.
    pub embeddings: Option<Tensor<T>>,
    /// Class logits emitted directly by a fused head (N×C).
    pub fused_logits: Option<Tensor<T>>,
    /// Left/top/right/bottom distances in stride units (N×4).
    pub box_offsets: Tensor<T>,
    pub mask_coeffs: Tensor<T>,
    /// k×Hm×Wm.
    pub prototypes: Tensor<T>,
    pub anchor_centers: Vec<[f64; 2]>,
    pub anchor_strides: Vec<usize>,
    pub image_size: usize,
}

impl<T: Scalar> Predictions<T> {
    pub fn num_anchors(&self) -> usize {
        self.anchor_centers.len()
    }

    pub fn embeddings(&self) -> Result<&Tensor<T>> {
        self.embeddings
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("fused model has no object embeddings".into()))
    }
}

pub(crate) fn conv_act<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let pad = g.shape(w)[2] / 2;
    let y = g.conv2d(x, w, stride, pad)?;
    let y = g.add_channel_bias(y, b)?;
    Ok(g.silu(y))
}

pub(crate) fn conv_linear<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    bias: bool,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let pad = g.shape(w)[2] / 2;
    let y = g.conv2d(x, w, 1, pad)?;
    if bias {
        let b = g.param(store, &format!("{prefix}.b"))?;
        g.add_channel_bias(y, b)
    } else {
        Ok(y)
    }
}

/// Backbone and PAN: image (3×S×S) → [P3, P4, P5].
pub fn backbone_pan<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    image: Var,
) -> Result<[Var; 3]> {
    let shape = g.shape(image);
    if shape != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::shape(
            "backbone_pan",
            format!("image {shape:?}, expected [3, {s}, {s}]", s = cfg.image_size),
        ));
    }
    let stem = conv_act(g, store, "backbone.stem", image, 2)?;
    let c2 = conv_act(g, store, "backbone.stage1", stem, 2)?;
    let c3 = conv_act(g, store, "backbone.stage2", c2, 2)?;
    let c4 = conv_act(g, store, "backbone.stage3", c3, 2)?;
    let c5 = conv_act(g, store, "backbone.stage4", c4, 2)?;

    let up5 = g.upsample(c5, 2)?;
    let cat = g.concat(&[up5, c4], 0)?;
    let t4 = conv_act(g, store, "pan.td4", cat, 1)?;
    let up4 = g.upsample(t4, 2)?;
    let cat = g.concat(&[up4, c3], 0)?;
    let p3 = conv_act(g, store, "pan.td3", cat, 1)?;

    let d3 = conv_act(g, store, "pan.down3", p3, 2)?;
    let cat = g.concat(&[d3, t4], 0)?;
    let p4 = conv_act(g, store, "pan.bu4", cat, 1)?;
    let d4 = conv_act(g, store, "pan.down4", p4, 2)?;
    let cat = g.concat(&[d4, c5], 0)?;
    let p5 = conv_act(g, store, "pan.bu5", cat, 1)?;
    Ok([p3, p4, p5])
}

/// Flattens per-level C×H×W maps into one N×C matrix in anchor order.
pub fn flatten_anchors<T: Scalar>(g: &mut Graph<T>, levels: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(levels.len());
    for &v in levels {
        let shape = g.shape(v).to_vec();
        let flat = g.reshape(v, [shape[0], shape[1] * shape[2]])?;
        rows.push(g.transpose(flat)?);
    }
    g.concat(&rows, 0)
}

fn check_pyramid<T: Scalar>(g: &Graph<T>, cfg: &ModelConfig, pyr: &[Var; 3]) -> Result<()> {
    for ((&v, &c), grid) in pyr.iter().zip(&cfg.pan_widths).zip(cfg.grid_sizes()) {
        if g.shape(v) != [c, grid, grid] {
            return Err(Error::shape(
                "pyramid",
                format!("level {:?}, expected [{c}, {grid}, {grid}]", g.shape(v)),
            ));
        }
    }
    Ok(())
}

/// Object embedding head. Returns O (N×D) and, per level, the D'-channel
/// feature map I that feeds the final bias-free 1×1 conv.
pub fn embedding_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    pyr: [Var; 3],
) -> Result<(Var, [Var; 3])> {
    let features = head_features(g, store, cfg, pyr)?;
    let mut outs = Vec::with_capacity(3);
    for (level, &i) in LEVELS.iter().zip(&features) {
        outs.push(conv_linear(g, store, &format!("head.embed.{level}.proj"), i, false)?);
    }
    Ok((flatten_anchors(g, &outs)?, features))
}

/// The two 3×3 convs of the embedding head, per level.
pub(crate) fn head_features<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    pyr: [Var; 3],
) -> Result<[Var; 3]> {
    check_pyramid(g, cfg, &pyr)?;
    let mut features = [pyr[0]; 3];
    for (idx, level) in LEVELS.iter().enumerate() {
        let h = conv_act(g, store, &format!("head.embed.{level}.conv1"), pyr[idx], 1)?;
        features[idx] = conv_act(g, store, &format!("head.embed.{level}.conv2"), h, 1)?;
    }
    Ok(features)
}

/// Logits of a fused head: `I ⊛ K'` per level, flattened to N×C.
pub fn class_logits_fused<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, features: [Var; 3]) -> Result<Var> {
    let mut outs = Vec::with_capacity(3);
    for (level, &i) in LEVELS.iter().zip(&features) {
        outs.push(conv_linear(g, store, &format!("head.cls.{level}"), i, false)?);
    }
    flatten_anchors(g, &outs)
}

/// Box regression head: N×4 ltrb distances in stride units.
pub fn box_head<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ModelConfig, pyr: [Var; 3]) -> Result<Var> {
    check_pyramid(g, cfg, &pyr)?;
    let mut outs = Vec::with_capacity(3);
    for (idx, level) in LEVELS.iter().enumerate() {
        let h = conv_act(g, store, &format!("head.box.{level}.conv1"), pyr[idx], 1)?;
        let h = conv_act(g, store, &format!("head.box.{level}.conv2"), h, 1)?;
        outs.push(conv_linear(g, store, &format!("head.box.{level}.proj"), h, true)?);
    }
    flatten_anchors(g, &outs)
}

/// Mask coefficient head: N×k.
pub fn coefficient_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    pyr: [Var; 3],
) -> Result<Var> {
    check_pyramid(g, cfg, &pyr)?;
    let mut outs = Vec::with_capacity(3);
    for (idx, level) in LEVELS.iter().enumerate() {
        let h = conv_act(g, store, &format!("head.coef.{level}.conv1"), pyr[idx], 1)?;
        outs.push(conv_linear(g, store, &format!("head.coef.{level}.proj"), h, true)?);
    }
    flatten_anchors(g, &outs)
}

/// Prototype masks from P3: k×(S/4)×(S/4).
pub fn prototype_head<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p3: Var) -> Result<Var> {
    let h = conv_act(g, store, "head.proto.conv1", p3, 1)?;
    let h = g.upsample(h, 2)?;
    let h = conv_act(g, store, "head.proto.conv2", h, 1)?;
    conv_linear(g, store, "head.proto.proj", h, true)
}

/// Inference entry points over a fixed parameter store.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
}

impl Detector {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// A fused store carries `head.cls.*` kernels instead of embedding projections.
    pub fn is_fused<T: Scalar>(store: &ParamStore<T>) -> bool {
        store.contains("head.cls.p3.w")
    }

    pub fn pyramid<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let pyr = backbone_pan(&mut g, store, &self.config, x)?;
        Ok(FeaturePyramid::from_graph(&g, pyr))
    }

    /// Object embeddings O for a given pyramid.
    pub fn object_embeddings<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let pyr = pyramid.to_graph(&mut g);
        let (o, _) = embedding_head(&mut g, store, &self.config, pyr)?;
        Ok(g.value(o).clone())
    }

    /// Full forward pass.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Predictions<T>> {
        let pyramid = self.pyramid(store, image)?;
        self.predict_from_pyramid(store, &pyramid)
    }

    pub fn predict_from_pyramid<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid<T>,
    ) -> Result<Predictions<T>> {
        let cfg = &self.config;
        let mut g = Graph::inference();
        let pyr = pyramid.to_graph(&mut g);
        let (embeddings, fused_logits) = if Self::is_fused(store) {
            let features = head_features(&mut g, store, cfg, pyr)?;
            let logits = class_logits_fused(&mut g, store, features)?;
            (None, Some(g.value(logits).clone()))
        } else {
            let (o, _) = embedding_head(&mut g, store, cfg, pyr)?;
            (Some(g.value(o).clone()), None)
        };
        let boxes = box_head(&mut g, store, cfg, pyr)?;
        let coeffs = coefficient_head(&mut g, store, cfg, pyr)?;
        let protos = prototype_head(&mut g, store, pyr[0])?;
        let (anchor_centers, anchor_strides) = cfg.anchors();
        Ok(Predictions {
            embeddings,
            fused_logits,
            box_offsets: g.value(boxes).clone(),
            mask_coeffs: g.value(coeffs).clone(),
            prototypes: g.value(protos).clone(),
            anchor_centers,
            anchor_strides,
            image_size: cfg.image_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn zeroed(cfg: &ModelConfig) -> ParamStore<f64> {
        let mut store = init_weights::<f64>(cfg, 0).unwrap();
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set_value(&name, Tensor::zeros(shape)).unwrap();
        }
        store
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = ModelConfig::toy();
        let det = Detector::new(cfg.clone()).unwrap();
        let store = init_weights::<f32>(&cfg, 1).unwrap();
        let img = Tensor::full([3, 64, 64], 0.5f32);
        let pyr = det.pyramid(&store, &img).unwrap();
        assert_eq!(pyr.p3.shape(), &[32, 8, 8]);
        assert_eq!(pyr.p4.shape(), &[64, 4, 4]);
        assert_eq!(pyr.p5.shape(), &[64, 2, 2]);
        let pred = det.predict(&store, &img).unwrap();
        assert_eq!(pred.embeddings.unwrap().shape(), &[84, 64]);
        assert_eq!(pred.box_offsets.shape(), &[84, 4]);
        assert_eq!(pred.mask_coeffs.shape(), &[84, 8]);
        assert_eq!(pred.prototypes.shape(), &[8, 16, 16]);
    }

    #[test]
    fn zero_everything_gives_zero_pyramid_and_embeddings() {
        let cfg = ModelConfig::tiny();
        let det = Detector::new(cfg.clone()).unwrap();
        let store = zeroed(&cfg);
        let pyr = det.pyramid(&store, &Tensor::zeros([3, 32, 32])).unwrap();
        for level in pyr.levels() {
            assert!(level.data().iter().all(|&v| v == 0.0));
        }
        let o = det.object_embeddings(&store, &pyr).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let cfg = ModelConfig::tiny();
        let det = Detector::new(cfg.clone()).unwrap();
        let store = init_weights::<f32>(&cfg, 0).unwrap();
        assert!(det.pyramid(&store, &Tensor::zeros([3, 64, 64])).is_err());
        assert!(det.pyramid(&store, &Tensor::zeros([1, 32, 32])).is_err());
    }

    #[test]
    fn identity_projection_exposes_features() {
        let mut cfg = ModelConfig::tiny();
        cfg.head_channels = cfg.embed_dim;
        let det = Detector::new(cfg.clone()).unwrap();
        let mut store = init_weights::<f64>(&cfg, 5).unwrap();
        let d = cfg.embed_dim;
        for level in LEVELS {
            let eye = Tensor::eye(d).reshape([d, d, 1, 1]).unwrap();
            store.set_value(&format!("head.embed.{level}.proj.w"), eye).unwrap();
        }
        let img = Tensor::from_fn([3, 32, 32], |i| (i % 17) as f64 / 17.0);
        let pyr = det.pyramid(&store, &img).unwrap();
        let mut g = Graph::inference();
        let vars = pyr.to_graph(&mut g);
        let (o, feats) = embedding_head(&mut g, &store, &cfg, vars).unwrap();
        let flat = flatten_anchors(&mut g, &feats).unwrap();
        assert_eq!(g.value(o), g.value(flat));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let cfg = ModelConfig::toy();
        let det = Detector::new(cfg.clone()).unwrap();
        let store = init_weights::<f32>(&cfg, 9).unwrap();
        let img = Tensor::from_fn([3, 64, 64], |i| ((i * 7919) % 255) as f32 / 255.0);
        let a = det.predict(&store, &img).unwrap();
        let b = det.predict(&store, &img).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.box_offsets, b.box_offsets);
        assert_eq!(a.prototypes, b.prototypes);
    }
}
