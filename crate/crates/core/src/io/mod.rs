//! File formats: tensor archives, name lists, vocabularies and images.

mod archive;
mod image;

use std::collections::HashSet;
use std::path::Path;

pub use archive::{
    decode, encode, load_archive, save_archive, AnyTensor, Archive, ArchiveError, MAGIC, METADATA_KEY, VERSION,
};
pub use image::{load_image, parse_ppm, resize_nearest, write_ppm};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::lrpc::Vocabulary;
use crate::model::ModelConfig;
use crate::tensor::{l2_normalize_rows, s, Scalar, Tensor, NORM_EPS};

/// Archive key holding a vocabulary's embedding matrix.
pub const VOCAB_EMBEDDINGS_KEY: &str = "vocab_embeddings";
/// Archive key holding cached text embeddings.
pub const TEXT_EMBEDDINGS_KEY: &str = "text_embeddings";

/// Metadata key holding the model configuration as JSON.
pub const CONFIG_META: &str = "config";
/// Metadata key holding the class names baked into a fused model (JSON array).
pub const PROMPT_NAMES_META: &str = "prompt_names";

/// A weights archive: parameters, the model configuration and, for fused
/// models, the names of the baked-in prompts.
#[derive(Debug, Clone)]
pub struct WeightsFile<T: Scalar> {
    pub store: ParamStore<T>,
    pub config: ModelConfig,
    pub prompt_names: Option<Vec<String>>,
}

impl<T: Scalar> WeightsFile<T>
where
    AnyTensor: From<Tensor<T>>,
{
    pub fn to_archive(&self) -> Result<Archive> {
        let mut archive = Archive::new();
        for (name, entry) in self.store.iter() {
            archive.insert(name, entry.value.clone());
        }
        archive
            .metadata
            .insert(CONFIG_META.into(), serde_json::to_string(&self.config)?);
        if let Some(names) = &self.prompt_names {
            archive
                .metadata
                .insert(PROMPT_NAMES_META.into(), serde_json::to_string(names)?);
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)?;
        Ok(())
    }
}

impl<T: Scalar> WeightsFile<T> {
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let config: ModelConfig = match archive.metadata.get(CONFIG_META) {
            Some(json) => serde_json::from_str(json)?,
            None => return Err(Error::InvalidArgument("weights archive has no model config".into())),
        };
        config.validate()?;
        let prompt_names = match archive.metadata.get(PROMPT_NAMES_META) {
            Some(json) => Some(serde_json::from_str(json)?),
            None => None,
        };
        let mut store = ParamStore::new();
        for (name, t) in &archive.tensors {
            store.insert(name.clone(), t.to_scalar::<T>());
        }
        Ok(Self {
            store,
            config,
            prompt_names,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

pub fn load_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_names(names: &[String], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(names)?)?;
    Ok(())
}

/// Rows of `matrix` rescaled to unit norm, plus how many rows needed it.
pub fn normalize_rows_report<T: Scalar>(matrix: &Tensor<T>) -> Result<(Tensor<T>, usize)> {
    let normalized = l2_normalize_rows(matrix, s(NORM_EPS))?;
    let tol: T = s(1e-6);
    let d = matrix.dim(1);
    let changed = matrix
        .data()
        .chunks_exact(d)
        .filter(|row| {
            let n: T = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            (n - T::one()).abs() > tol
        })
        .count();
    Ok((normalized, changed))
}

/// Builds a [`Vocabulary`] from a names list and an embedding matrix,
/// normalizing rows and rejecting duplicates.
pub fn vocabulary_from_parts<T: Scalar>(names: Vec<String>, embeddings: Tensor<T>) -> Result<Vocabulary<T>> {
    if embeddings.rank() != 2 || embeddings.dim(0) != names.len() {
        return Err(Error::Vocabulary(format!(
            "{} names but embedding matrix has shape {:?}",
            names.len(),
            embeddings.shape()
        )));
    }
    let mut seen = HashSet::new();
    for n in &names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Vocabulary(format!("duplicate name `{n}`")));
        }
    }
    let (embeddings, _) = normalize_rows_report(&embeddings)?;
    Vocabulary::new(names, embeddings)
}

pub fn load_vocab<T: Scalar>(names_path: impl AsRef<Path>, embeds_path: impl AsRef<Path>) -> Result<Vocabulary<T>> {
    let names = load_names(names_path)?;
    let archive = Archive::load(embeds_path)?;
    let embeddings = archive.tensor::<T>(VOCAB_EMBEDDINGS_KEY)?;
    vocabulary_from_parts(names, embeddings)
}

pub fn save_vocab<T: Scalar>(
    vocab: &Vocabulary<T>,
    names_path: impl AsRef<Path>,
    embeds_path: impl AsRef<Path>,
) -> Result<()>
where
    AnyTensor: From<Tensor<T>>,
{
    save_names(vocab.names(), names_path)?;
    let mut archive = Archive::new();
    archive.insert(VOCAB_EMBEDDINGS_KEY, vocab.embeddings().clone());
    archive.save(embeds_path)?;
    Ok(())
}
