//! The three-stage toy run: text prompts, then the visual prompt encoder on
//! a frozen detector, then the specialized prompt alone.

use serde::{Deserialize, Serialize};

use super::data::{class_names, gen_dataset, sample_seed, synthetic_embeddings, SyntheticSample};
use super::stages::{init_specialized, run_stage, PromptBank, Stage, StageOptions, StageReport};
use crate::autodiff::ParamStore;
use crate::error::Result;
use crate::lrpc::Vocabulary;
use crate::model::{init_weights, ModelConfig};
use crate::reprta::{enhance, AuxNetParams, CachedTextEmbeddings};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEpochs {
    pub text: usize,
    pub savpe: usize,
    pub specialized: usize,
}

impl StageEpochs {
    pub fn all(n: usize) -> Self {
        Self {
            text: n,
            savpe: n,
            specialized: n,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub samples: usize,
    pub num_classes: usize,
    pub distractors: usize,
    /// Weight of the component shared by all synthetic text embeddings.
    pub shared_component: f64,
    pub epochs: StageEpochs,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub model: ModelConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 512,
            num_classes: 4,
            distractors: 512,
            shared_component: 0.65,
            epochs: StageEpochs {
                text: 30,
                savpe: 2,
                specialized: 1,
            },
            lr: 0.05,
            batch_size: 8,
            negatives: 8,
            model: ModelConfig::toy(),
        }
    }
}

impl ToyConfig {
    pub fn train_data(&self) -> Result<Vec<SyntheticSample>> {
        gen_dataset(self.seed, self.samples, self.model.image_size, self.num_classes)
    }

    /// Images never seen in training, generated from a derived seed.
    pub fn held_out(&self, count: usize) -> Result<Vec<SyntheticSample>> {
        gen_dataset(
            sample_seed(self.seed, usize::MAX),
            count,
            self.model.image_size,
            self.num_classes,
        )
    }

    /// Exemplar images for visual prompts, disjoint from train and held-out.
    pub fn support(&self, count: usize) -> Result<Vec<SyntheticSample>> {
        gen_dataset(
            sample_seed(self.seed, usize::MAX - 1),
            count,
            self.model.image_size,
            self.num_classes,
        )
    }

    /// Raw text embeddings of the toy classes followed by the distractors.
    pub fn prompt_bank(&self) -> Result<PromptBank<f32>> {
        let mut names = class_names(self.num_classes);
        names.extend((0..self.distractors).map(|i| format!("distractor {i:04}")));
        let emb = synthetic_embeddings(
            sample_seed(self.seed, usize::MAX - 2),
            names.len(),
            self.model.embed_dim,
            self.shared_component,
        )?;
        PromptBank::new(names, emb, self.num_classes)
    }
}

/// Everything a toy run produces.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub store: ParamStore<f32>,
    /// Raw (pre-adapter) text embeddings of the toy classes.
    pub text: CachedTextEmbeddings<f32>,
    /// Toy classes and distractors, mapped through the trained adapter.
    pub vocab: Vocabulary<f32>,
    pub reports: Vec<StageReport>,
}

impl ToyRun {
    /// Enhanced class prompts for eager text-prompt inference.
    pub fn text_prompts(&self) -> Result<Tensor<f32>> {
        enhance(&self.text.embeddings, &AuxNetParams::from_store(&self.store)?)
    }
}

/// Runs the stages in order, reporting each to `on_stage` as it finishes.
pub fn run_toy(cfg: &ToyConfig, mut on_stage: impl FnMut(&StageReport)) -> Result<ToyRun> {
    let data = cfg.train_data()?;
    let bank = cfg.prompt_bank()?;
    let mut store = init_weights::<f32>(&cfg.model, cfg.seed)?;
    let mut reports = Vec::with_capacity(3);
    let plan = [
        (Stage::Text, cfg.epochs.text),
        (Stage::Savpe, cfg.epochs.savpe),
        (Stage::Specialized, cfg.epochs.specialized),
    ];
    for (stage, epochs) in plan {
        if stage == Stage::Specialized {
            let enhanced = enhance(&bank.class_embeddings(), &AuxNetParams::from_store(&store)?)?;
            init_specialized(&mut store, &enhanced)?;
        }
        let opts = StageOptions {
            epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            negatives: cfg.negatives,
            ..Default::default()
        };
        let report = run_stage(stage, &mut store, &cfg.model, &data, &bank, &opts)?;
        on_stage(&report);
        reports.push(report);
    }
    let aux = AuxNetParams::from_store(&store)?;
    let vocab = Vocabulary::new(bank.names.clone(), enhance(&bank.embeddings, &aux)?)?;
    let text = CachedTextEmbeddings::new(bank.names[..bank.num_classes].to_vec(), bank.class_embeddings())?;
    Ok(ToyRun {
        store,
        text,
        vocab,
        reports,
    })
}
