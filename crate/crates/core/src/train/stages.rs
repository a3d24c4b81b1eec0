use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::assign::{assign_targets, Targets};
use super::data::{sample_seed, SyntheticSample};
use super::loss::{savpe_loss, specialized_loss, text_loss};
use crate::autodiff::{Graph, ParamGrads, ParamStore, Sgd};
use crate::error::{Error, Result};
use crate::lrpc::SPECIALIZED;
use crate::model::{Detector, FeaturePyramid, ModelConfig};
use crate::savpe::{rasterize, VisualPrompt};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Text,
    Savpe,
    Specialized,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Text => "text",
            Stage::Savpe => "savpe",
            Stage::Specialized => "specialized",
        }
    }

    /// Name prefixes of the parameters a stage trains by default.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Text => &["backbone.", "pan.", "head.", "reprta."],
            Stage::Savpe => &["savpe."],
            Stage::Specialized => &[SPECIALIZED],
        }
    }

    fn index(self) -> u64 {
        match self {
            Stage::Text => 1,
            Stage::Savpe => 2,
            Stage::Specialized => 3,
        }
    }
}

/// Which parameters a stage may update.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum FreezeSpec {
    #[default]
    StageDefault,
    All,
    /// Only parameters whose names start with one of these prefixes.
    Only(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct StageOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Upper bound on sampled negative prompts per batch (text stage).
    pub negatives: usize,
    pub freeze: FreezeSpec,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.05,
            batch_size: 8,
            seed: 0,
            negatives: 8,
            freeze: FreezeSpec::StageDefault,
        }
    }
}

/// Raw prompt embeddings available during training. The first
/// `num_classes` rows belong to the toy classes, the rest are names that
/// only ever act as negatives.
#[derive(Debug, Clone)]
pub struct PromptBank<T: Scalar> {
    pub names: Vec<String>,
    pub embeddings: Tensor<T>,
    pub num_classes: usize,
}

impl<T: Scalar> PromptBank<T> {
    pub fn new(names: Vec<String>, embeddings: Tensor<T>, num_classes: usize) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.dim(0) != names.len() || num_classes > names.len() {
            return Err(Error::InvalidArgument(format!(
                "prompt bank: {} names, {num_classes} classes, embeddings {:?}",
                names.len(),
                embeddings.shape()
            )));
        }
        Ok(Self {
            names,
            embeddings,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Rows of the toy classes only.
    pub fn class_embeddings(&self) -> Tensor<T> {
        self.rows(&(0..self.num_classes).collect::<Vec<_>>())
    }

    pub fn rows(&self, idx: &[usize]) -> Tensor<T> {
        let d = self.embeddings.dim(1);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.embeddings.row(i));
        }
        Tensor::new([idx.len(), d], data).expect("gathered rows")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    /// Mean batch loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub records: Vec<MetricRecord>,
}

/// The online vocabulary of one batch: present classes (ascending), then up
/// to `negatives` other bank rows sampled without replacement.
pub fn batch_vocabulary(
    present: &BTreeSet<usize>,
    bank_size: usize,
    negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut rows: Vec<usize> = present.iter().copied().collect();
    let others: Vec<usize> = (0..bank_size).filter(|i| !present.contains(i)).collect();
    let take = negatives.min(others.len());
    let mut picked: Vec<usize> = sample(rng, others.len(), take).into_iter().map(|i| others[i]).collect();
    picked.sort_unstable();
    rows.extend(picked);
    rows
}

fn columns_for(rows: &[usize], num_classes: usize) -> Vec<Option<usize>> {
    let mut cols = vec![None; num_classes];
    for (col, &r) in rows.iter().enumerate() {
        if r < num_classes {
            cols[r] = Some(col);
        }
    }
    cols
}

/// Masks plus the class → prompt column map.
pub type PromptMasks<T> = (Vec<Tensor<T>>, Vec<Option<usize>>);

/// Prompt masks for a sample: one box prompt per present class (its first
/// object), ordered by class id, plus the class → prompt column map.
pub fn sample_prompt_masks<T: Scalar>(
    sample: &SyntheticSample,
    image_size: usize,
    num_classes: usize,
) -> Result<PromptMasks<T>> {
    let mut masks = Vec::new();
    let mut cols = vec![None; num_classes];
    for (class, col) in cols.iter_mut().enumerate() {
        if let Some(o) = sample.objects.iter().find(|o| o.class_id == class) {
            *col = Some(masks.len());
            masks.push(rasterize(&VisualPrompt::<T>::Box(o.bbox), image_size)?);
        }
    }
    Ok((masks, cols))
}

struct Frozen {
    pyramid: FeaturePyramid<f32>,
    o: Tensor<f32>,
}

fn apply_freeze(store: &mut ParamStore<f32>, stage: Stage, spec: &FreezeSpec) {
    match spec {
        FreezeSpec::StageDefault => store.freeze_all_except(stage.trainable_prefixes()),
        FreezeSpec::All => store.freeze_all(),
        FreezeSpec::Only(prefixes) => {
            let p: Vec<&str> = prefixes.iter().map(String::as_str).collect();
            store.freeze_all_except(&p);
        }
    }
}

/// Trains one stage with SGD. Per-sample gradients are computed in parallel
/// and summed in sample order, so results do not depend on thread count.
/// All parameters are left unfrozen on return.
pub fn run_stage(
    stage: Stage,
    store: &mut ParamStore<f32>,
    cfg: &ModelConfig,
    data: &[SyntheticSample],
    bank: &PromptBank<f32>,
    opts: &StageOptions,
) -> Result<StageReport> {
    if data.is_empty() || opts.batch_size == 0 {
        return Err(Error::InvalidArgument("empty dataset or zero batch size".into()));
    }
    let (centers, strides) = cfg.anchors();
    let targets: Vec<Targets> = data
        .iter()
        .map(|s| assign_targets(&centers, &strides, &s.objects))
        .collect();

    let det = Detector::new(cfg.clone())?;
    let frozen: Vec<Frozen> = if stage == Stage::Text || opts.epochs == 0 {
        Vec::new()
    } else {
        data.par_iter()
            .map(|s| {
                let pyramid = det.pyramid(store, &s.image)?;
                let o = det.object_embeddings(store, &pyramid)?;
                Ok(Frozen { pyramid, o })
            })
            .collect::<Result<_>>()?
    };

    apply_freeze(store, stage, &opts.freeze);
    let sgd = Sgd::new(opts.lr);
    let mut report = StageReport {
        stage,
        epoch_losses: Vec::with_capacity(opts.epochs),
        records: Vec::new(),
    };
    let mut step = 0;
    let result = (|| -> Result<()> {
        for epoch in 0..opts.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(opts.seed ^ stage.index() << 56, epoch));
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_total = 0.0;
            let mut batches = 0;
            for batch in order.chunks(opts.batch_size) {
                let loss = train_step(
                    stage, store, cfg, data, &targets, &frozen, bank, batch, opts, &mut rng, &sgd,
                )
                .and_then(|l| {
                    if l.is_finite() {
                        Ok(l)
                    } else {
                        Err(Error::NonFinite("loss"))
                    }
                })
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        stage: stage.as_str().into(),
                        step,
                    },
                    other => other,
                })?;
                report.records.push(MetricRecord { step, stage, loss });
                epoch_total += loss;
                batches += 1;
                step += 1;
            }
            report.epoch_losses.push(epoch_total / batches as f64);
        }
        Ok(())
    })();
    store.unfreeze_all();
    store.zero_grad();
    result.map(|_| report)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    stage: Stage,
    store: &mut ParamStore<f32>,
    cfg: &ModelConfig,
    data: &[SyntheticSample],
    targets: &[Targets],
    frozen: &[Frozen],
    bank: &PromptBank<f32>,
    batch: &[usize],
    opts: &StageOptions,
    rng: &mut ChaCha8Rng,
    sgd: &Sgd,
) -> Result<f64> {
    let prompts = if stage == Stage::Text {
        let present: BTreeSet<usize> = batch
            .iter()
            .flat_map(|&i| data[i].objects.iter().map(|o| o.class_id))
            .collect();
        let rows = batch_vocabulary(&present, bank.len(), opts.negatives, rng);
        Some((bank.rows(&rows), columns_for(&rows, bank.num_classes)))
    } else {
        None
    };

    let shared: &ParamStore<f32> = store;
    let per_sample: Vec<(f64, ParamGrads<f32>)> = batch
        .par_iter()
        .map(|&i| {
            let mut g = Graph::new();
            let loss = match stage {
                Stage::Text => {
                    let (p, cols) = prompts.as_ref().expect("text prompts");
                    text_loss(&mut g, shared, cfg, &data[i].image, p, &targets[i], cols)?
                }
                Stage::Savpe => {
                    let (masks, cols) = sample_prompt_masks(&data[i], cfg.image_size, bank.num_classes)?;
                    let f = &frozen[i];
                    savpe_loss(&mut g, shared, cfg, &f.pyramid, &f.o, &masks, &targets[i], &cols)?
                }
                Stage::Specialized => specialized_loss(&mut g, shared, &frozen[i].o, &targets[i])?,
            };
            let value = g.value(loss).data()[0] as f64;
            Ok((value, g.gradients(loss)?))
        })
        .collect::<Result<_>>()?;

    store.zero_grad();
    let mut total = 0.0;
    for (loss, grads) in &per_sample {
        total += loss;
        store.accumulate(grads)?;
    }
    let inv = 1.0 / batch.len() as f64;
    store.scale_grads(inv as f32);
    if store.iter().any(|(_, e)| !e.grad.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    sgd.step(store);
    Ok(total * inv)
}

/// Sets P_s to the normalized mean of the given (enhanced) class prompts.
pub fn init_specialized<T: Scalar>(store: &mut ParamStore<T>, class_prompts: &Tensor<T>) -> Result<()> {
    let c = class_prompts.dim(0);
    let d = class_prompts.dim(1);
    let mean = Tensor::from_fn([1, d], |j| {
        (0..c).map(|r| class_prompts.at(&[r, j])).sum::<T>() / T::from_usize(c).unwrap()
    });
    let unit = crate::tensor::l2_normalize_rows(&mean, T::from_f64_lossy(crate::tensor::NORM_EPS))?;
    store.set_value(SPECIALIZED, unit)
}
