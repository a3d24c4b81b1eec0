//! Re-parameterizable region-text alignment.
//!
//! Cached text embeddings P pass through a residual SwiGLU adapter whose
//! output is L2-normalized:
//!
//! ```text
//! 𝒫 = normalize(P + (silu(P·Wg) ⊙ (P·Wu)) · Wd)
//! ```
//!
//! After training, 𝒫 is folded into the last 1×1 conv of the object
//! embedding head: `K'[c, d'] = Σ_d 𝒫[c, d] · K[d, d']`. The fused head
//! emits class logits directly and carries no trace of the adapter.

use std::path::Path;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::io::{normalize_rows_report, AnyTensor, Archive, TEXT_EMBEDDINGS_KEY};
use crate::model::{backbone_pan, class_logits_fused, contrast, embedding_head, head_features, ModelConfig, LEVELS};
use crate::tensor::{self, l2_normalize_rows, s, Scalar, Tensor, NORM_EPS};

pub const W_GATE: &str = "reprta.w_gate";
pub const W_UP: &str = "reprta.w_up";
pub const W_DOWN: &str = "reprta.w_down";

/// Text embeddings produced offline by an external encoder.
#[derive(Debug, Clone)]
pub struct CachedTextEmbeddings<T: Scalar> {
    pub names: Vec<String>,
    /// C×D, unit rows.
    pub embeddings: Tensor<T>,
    /// Rows that were not unit-norm on load and had to be rescaled.
    pub renormalized_rows: usize,
}

impl<T: Scalar> CachedTextEmbeddings<T> {
    pub fn new(names: Vec<String>, embeddings: Tensor<T>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.dim(0) != names.len() {
            return Err(Error::shape(
                "text embeddings",
                format!("{} names for matrix {:?}", names.len(), embeddings.shape()),
            ));
        }
        let (embeddings, renormalized_rows) = normalize_rows_report(&embeddings)?;
        Ok(Self {
            names,
            embeddings,
            renormalized_rows,
        })
    }

    pub fn load(embeds_path: impl AsRef<Path>, names_path: impl AsRef<Path>) -> Result<Self> {
        let names = crate::io::load_names(names_path)?;
        let archive = Archive::load(embeds_path)?;
        Self::new(names, archive.tensor(TEXT_EMBEDDINGS_KEY)?)
    }

    pub fn save(&self, embeds_path: impl AsRef<Path>, names_path: impl AsRef<Path>) -> Result<()>
    where
        AnyTensor: From<Tensor<T>>,
    {
        crate::io::save_names(&self.names, names_path)?;
        let mut archive = Archive::new();
        archive.insert(TEXT_EMBEDDINGS_KEY, self.embeddings.clone());
        archive.save(embeds_path)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// The adapter weights, borrowed from a parameter store.
#[derive(Debug, Clone)]
pub struct AuxNetParams<T: Scalar> {
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Scalar> AuxNetParams<T> {
    pub fn from_store(store: &ParamStore<T>) -> Result<Self> {
        Ok(Self {
            w_gate: store.get(W_GATE)?.clone(),
            w_up: store.get(W_UP)?.clone(),
            w_down: store.get(W_DOWN)?.clone(),
        })
    }
}

/// `normalize(P + swiglu_ffn(P))`.
///
/// A row whose adapter output is exactly zero and which is already unit
/// length up to rounding is returned bit-for-bit, so a zero-initialized
/// down projection is an exact identity.
pub fn enhance<T: Scalar>(prompts: &Tensor<T>, aux: &AuxNetParams<T>) -> Result<Tensor<T>> {
    let delta = tensor::swiglu_ffn(prompts, &aux.w_gate, &aux.w_up, &aux.w_down)?;
    let mut out = l2_normalize_rows(&tensor::add(prompts, &delta)?, s(NORM_EPS))?;
    let d = prompts.dim(1);
    let tol = T::epsilon() * s(16.0);
    for r in 0..prompts.dim(0) {
        let row = prompts.row(r);
        let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if delta.row(r).iter().all(|v| *v == T::zero()) && (norm - T::one()).abs() <= tol {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(row);
        }
    }
    Ok(out)
}

/// [`enhance`] recorded on a tape, reading the adapter from `store`.
pub fn enhance_var<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prompts: Var) -> Result<Var> {
    let wg = g.param(store, W_GATE)?;
    let wu = g.param(store, W_UP)?;
    let wd = g.param(store, W_DOWN)?;
    let gate = g.matmul(prompts, wg)?;
    let gate = g.silu(gate);
    let up = g.matmul(prompts, wu)?;
    let hidden = g.mul(gate, up)?;
    let delta = g.matmul(hidden, wd)?;
    let sum = g.add(prompts, delta)?;
    g.l2_normalize_rows(sum)
}

/// Folds enhanced prompts (C×D) into the embedding projection kernel
/// (D×D'×1×1), giving a C×D'×1×1 classification kernel.
pub fn fuse<T: Scalar>(enhanced: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    if kernel.rank() != 4 || kernel.dim(2) != 1 || kernel.dim(3) != 1 {
        return Err(Error::shape("fuse", format!("kernel {:?} is not 1×1", kernel.shape())));
    }
    let (d, dp) = (kernel.dim(0), kernel.dim(1));
    if enhanced.rank() != 2 || enhanced.dim(1) != d {
        return Err(Error::shape(
            "fuse",
            format!("prompts {:?} vs kernel {:?}", enhanced.shape(), kernel.shape()),
        ));
    }
    let k = kernel.reshape([d, dp])?;
    let fused = tensor::matmul(enhanced, &k)?;
    fused.reshape([enhanced.dim(0), dp, 1, 1])
}

fn is_prompt_machinery(name: &str) -> bool {
    name.starts_with("reprta.")
        || name.starts_with("savpe.")
        || name.starts_with("lrpc.")
        || (name.starts_with("head.embed.") && name.contains(".proj."))
}

/// Builds a closed-set store: the embedding projections are replaced by
/// fused `head.cls.*` kernels for the given raw text embeddings, and all
/// prompt machinery (adapter, visual encoder, specialized prompt) is dropped.
pub fn fuse_weights<T: Scalar>(store: &ParamStore<T>, text: &Tensor<T>) -> Result<ParamStore<T>> {
    let enhanced = enhance(text, &AuxNetParams::from_store(store)?)?;
    let mut fused = ParamStore::new();
    for (name, entry) in store.iter() {
        if !is_prompt_machinery(name) {
            fused.insert(name, entry.value.clone());
        }
    }
    for level in LEVELS {
        let kernel = store.get(&format!("head.embed.{level}.proj.w"))?;
        fused.insert(format!("head.cls.{level}.w"), fuse(&enhanced, kernel)?);
    }
    Ok(fused)
}

/// Logits of both paths for one image: eager `(I ⊛ K)·𝒫ᵀ` and fused `I ⊛ K'`.
pub fn eager_and_fused_logits<T: Scalar>(
    store: &ParamStore<T>,
    fused: &ParamStore<T>,
    cfg: &ModelConfig,
    text: &Tensor<T>,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::inference();
    let x = g.constant(image.clone());
    let pyr = backbone_pan(&mut g, store, cfg, x)?;
    let (o, _) = embedding_head(&mut g, store, cfg, pyr)?;
    let enhanced = enhance(text, &AuxNetParams::from_store(store)?)?;
    let eager = contrast(g.value(o), &enhanced)?;

    let mut g = Graph::inference();
    let x = g.constant(image.clone());
    let pyr = backbone_pan(&mut g, fused, cfg, x)?;
    let features = head_features(&mut g, fused, cfg, pyr)?;
    let logits = class_logits_fused(&mut g, fused, features)?;
    Ok((eager, g.value(logits).clone()))
}

/// Max |eager − fused| over all N×C logits.
pub fn verify_equivalence<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    text: &Tensor<T>,
    image: &Tensor<T>,
) -> Result<T> {
    let fused = fuse_weights(store, text)?;
    let (eager, fused) = eager_and_fused_logits(store, &fused, cfg, text, image)?;
    Ok(eager.max_abs_diff(&fused))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn random_aux(d: usize, h: usize, rng: &mut ChaCha8Rng) -> AuxNetParams<f64> {
        AuxNetParams {
            w_gate: random(&[d, h], rng),
            w_up: random(&[d, h], rng),
            w_down: random(&[h, d], rng),
        }
    }

    #[test]
    fn zero_down_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = l2_normalize_rows(&random(&[5, 8], &mut rng), NORM_EPS).unwrap();
        let mut aux = random_aux(8, 16, &mut rng);
        aux.w_down = Tensor::zeros([16, 8]);
        assert_eq!(enhance(&p, &aux).unwrap(), p);
    }

    #[test]
    fn enhance_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, d, h) = (5, 8, 16);
        let p = l2_normalize_rows(&random(&[c, d], &mut rng), NORM_EPS).unwrap();
        let aux = random_aux(d, h, &mut rng);
        let got = enhance(&p, &aux).unwrap();
        for r in 0..c {
            let mut hidden = vec![0.0; h];
            for (j, hv) in hidden.iter_mut().enumerate() {
                let (mut gsum, mut usum) = (0.0, 0.0);
                for i in 0..d {
                    gsum += p.at(&[r, i]) * aux.w_gate.at(&[i, j]);
                    usum += p.at(&[r, i]) * aux.w_up.at(&[i, j]);
                }
                *hv = gsum / (1.0 + (-gsum).exp()) * usum;
            }
            let mut out = vec![0.0; d];
            for (i, ov) in out.iter_mut().enumerate() {
                *ov = p.at(&[r, i]) + (0..h).map(|j| hidden[j] * aux.w_down.at(&[j, i])).sum::<f64>();
            }
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (i, v) in out.iter().enumerate() {
                assert!((got.at(&[r, i]) - v / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_basis_row_and_identity() {
        let p = Tensor::<f64>::new([1, 2], vec![1., 0.]).unwrap();
        let k = Tensor::<f64>::new([2, 2, 1, 1], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(fuse(&p, &k).unwrap().data(), &[1., 2.]);
        assert_eq!(fuse(&Tensor::eye(2), &k).unwrap(), k);
        assert!(fuse(&Tensor::<f64>::ones([1, 3]), &k).is_err());
    }

    #[test]
    fn fused_conv_equals_conv_then_contrast() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random(&[3, 4], &mut rng).cast::<f32>();
        let k = random(&[4, 6, 1, 1], &mut rng).cast::<f32>();
        let i = random(&[6, 2, 2], &mut rng).cast::<f32>();
        let eager_o = tensor::conv2d(&i, &k, 1, 0).unwrap().reshape([4, 4]).unwrap();
        let eager = tensor::matmul(&p, &eager_o).unwrap();
        let fused = tensor::conv2d(&i, &fuse(&p, &k).unwrap(), 1, 0).unwrap();
        assert!(eager.max_abs_diff(&fused.reshape([3, 4]).unwrap()) <= 1e-5);
    }

    #[test]
    fn fused_store_drops_prompt_machinery() {
        let cfg = ModelConfig::tiny();
        let store = init_weights::<f32>(&cfg, 4).unwrap();
        let text = Tensor::<f32>::ones([3, cfg.embed_dim]);
        let fused = fuse_weights(&store, &text).unwrap();
        assert!(fused.names().all(|n| !is_prompt_machinery(n)));
        assert_eq!(
            fused.get("head.cls.p4.w").unwrap().shape(),
            &[3, cfg.head_channels, 1, 1]
        );
    }

    #[test]
    fn zero_model_has_zero_deviation() {
        let cfg = ModelConfig::tiny();
        let mut store = init_weights::<f64>(&cfg, 0).unwrap();
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set_value(&name, Tensor::zeros(shape)).unwrap();
        }
        let text = Tensor::<f64>::ones([2, cfg.embed_dim]);
        let img = Tensor::full([3, 32, 32], 0.3);
        assert_eq!(verify_equivalence(&store, &cfg, &text, &img).unwrap(), 0.0);
    }
}
