//! Finite-difference checks of the three stage losses at a random state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::assign::assign_targets;
use super::data::{gen_sample, synthetic_embeddings};
use super::loss::{savpe_loss, specialized_loss, text_loss};
use super::stages::{sample_prompt_masks, Stage};
use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, ParamStore};
use crate::error::Result;
use crate::model::{init_weights, Detector, ModelConfig};
use crate::reprta::W_DOWN;
use crate::tensor::Tensor;

/// Runs `grad_check` on one stage's loss for a seeded random model, image,
/// prompt set and state. Only the stage's trainable parameters are checked;
/// `max_entries` caps the sampled entries per parameter.
pub fn stage_grad_check(
    stage: Stage,
    cfg: &ModelConfig,
    seed: u64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store: ParamStore<f64> = init_weights(cfg, seed)?;
    // a non-zero down projection so the adapter path carries gradient
    let wd_shape = store.get(W_DOWN)?.shape().to_vec();
    store.set_value(W_DOWN, Tensor::from_fn(wd_shape, |_| rng.gen_range(-0.2..0.2)))?;
    let num_classes = 3;
    let sample = gen_sample(rng.gen(), cfg.image_size, num_classes);
    let (centers, strides) = cfg.anchors();
    let targets = assign_targets(&centers, &strides, &sample.objects);
    let image = sample.image.cast::<f64>();
    let opts = GradCheckOptions {
        max_entries,
        seed,
        ..Default::default()
    };
    store.freeze_all_except(stage.trainable_prefixes());
    match stage {
        Stage::Text => {
            // present classes first, then one negative
            let prompts: Tensor<f64> = synthetic_embeddings(rng.gen(), num_classes + 1, cfg.embed_dim, 0.5)?;
            let columns: Vec<Option<usize>> = (0..num_classes).map(Some).collect();
            grad_check(
                |g, p| text_loss(g, p, cfg, &image, &prompts, &targets, &columns),
                &store,
                &opts,
            )
        }
        Stage::Savpe => {
            let det = Detector::new(cfg.clone())?;
            let pyramid = det.pyramid(&store, &image)?;
            let o = det.object_embeddings(&store, &pyramid)?;
            let (masks, columns) = sample_prompt_masks::<f64>(&sample, cfg.image_size, num_classes)?;
            grad_check(
                |g, p| savpe_loss(g, p, cfg, &pyramid, &o, &masks, &targets, &columns),
                &store,
                &opts,
            )
        }
        Stage::Specialized => {
            let det = Detector::new(cfg.clone())?;
            let pyramid = det.pyramid(&store, &image)?;
            let o = det.object_embeddings(&store, &pyramid)?;
            grad_check(|g, p| specialized_loss(g, p, &o, &targets), &store, &opts)
        }
    }
}
