//! Lazy region-prompt contrast for prompt-free detection.
//!
//! A single specialized embedding P_s scores every anchor; only anchors with
//! `O[n]·P_s > δ` are matched against the full vocabulary.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{decode_candidates, Detection, Predictions};
use crate::tensor::{dot, sigmoid_scalar, Scalar, Tensor};

/// Parameter name of the specialized prompt embedding (1×D).
pub const SPECIALIZED: &str = "lrpc.specialized";
/// Default filtering threshold δ.
pub const DEFAULT_DELTA: f64 = 0.001;

/// Category names paired with unit-norm embeddings (V×D).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary<T: Scalar> {
    names: Vec<String>,
    embeddings: Tensor<T>,
}

impl<T: Scalar> Vocabulary<T> {
    /// Takes rows as given; use [`crate::io::vocabulary_from_parts`] to
    /// normalize and validate untrusted input.
    pub fn new(names: Vec<String>, embeddings: Tensor<T>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Vocabulary("empty vocabulary".into()));
        }
        if embeddings.rank() != 2 || embeddings.dim(0) != names.len() {
            return Err(Error::Vocabulary(format!(
                "{} names but embedding matrix has shape {:?}",
                names.len(),
                embeddings.shape()
            )));
        }
        Ok(Self { names, embeddings })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim(1)
    }
}

/// Counts D-dimensional dot products performed by the filter and retrieval.
#[derive(Debug, Default)]
pub struct DotCounter(AtomicU64);

impl DotCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn add(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::Relaxed);
    }
}

/// Best vocabulary entry for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval {
    pub anchor: usize,
    pub class_id: usize,
    pub logit: f64,
    pub score: f64,
}

fn check_dims<T: Scalar>(o: &Tensor<T>, d: usize, what: &str) -> Result<()> {
    if o.rank() != 2 || o.dim(1) != d {
        return Err(Error::shape(
            "lrpc",
            format!("O {:?} against {what} of dim {d}", o.shape()),
        ));
    }
    Ok(())
}

/// Anchors whose specialized score `O[n]·P_s` strictly exceeds `delta`, ascending.
pub fn filter_anchors<T: Scalar>(
    o: &Tensor<T>,
    specialized: &Tensor<T>,
    delta: f64,
    counter: &DotCounter,
) -> Result<Vec<usize>> {
    if specialized.rank() != 2 || specialized.dim(0) != 1 {
        return Err(Error::shape("filter_anchors", format!("P_s {:?}", specialized.shape())));
    }
    check_dims(o, specialized.dim(1), "P_s")?;
    let ps = specialized.data();
    let n = o.dim(0);
    counter.add(n);
    Ok((0..n)
        .filter(|&i| dot(o.row(i), ps).to_f64().unwrap() > delta)
        .collect())
}

fn best_match<T: Scalar>(row: &[T], vocab: &Vocabulary<T>) -> (usize, T) {
    let mut best = (0, dot(row, vocab.embeddings.row(0)));
    for v in 1..vocab.len() {
        let logit = dot(row, vocab.embeddings.row(v));
        if logit > best.1 {
            best = (v, logit);
        }
    }
    best
}

fn retrieval<T: Scalar>(anchor: usize, class_id: usize, logit: T) -> Retrieval {
    Retrieval {
        anchor,
        class_id,
        logit: logit.to_f64().unwrap(),
        score: sigmoid_scalar(logit).to_f64().unwrap(),
    }
}

/// Argmax over the vocabulary (ties → lowest index) for the listed anchors
/// only. Work is split across threads and merged in anchor order.
pub fn retrieve<T: Scalar>(
    o: &Tensor<T>,
    indices: &[usize],
    vocab: &Vocabulary<T>,
    counter: &DotCounter,
) -> Result<Vec<Retrieval>> {
    check_dims(o, vocab.dim(), "vocabulary")?;
    if let Some(&bad) = indices.iter().find(|&&n| n >= o.dim(0)) {
        return Err(Error::InvalidArgument(format!("anchor {bad} out of range")));
    }
    counter.add(indices.len() * vocab.len());
    Ok(indices
        .par_iter()
        .map(|&n| {
            let (c, logit) = best_match(o.row(n), vocab);
            retrieval(n, c, logit)
        })
        .collect())
}

/// Full N×V contrast with per-anchor argmax: the correctness oracle.
pub fn brute_force_full<T: Scalar>(
    o: &Tensor<T>,
    vocab: &Vocabulary<T>,
    counter: &DotCounter,
) -> Result<Vec<Retrieval>> {
    check_dims(o, vocab.dim(), "vocabulary")?;
    counter.add(o.dim(0) * vocab.len());
    Ok((0..o.dim(0))
        .into_par_iter()
        .map(|n| {
            let (c, logit) = best_match(o.row(n), vocab);
            retrieval(n, c, logit)
        })
        .collect())
}

/// A detection labelled with its vocabulary name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedDetection {
    pub detection: Detection,
    pub name: String,
}

fn name_all<T: Scalar>(dets: Vec<Detection>, vocab: &Vocabulary<T>) -> Vec<NamedDetection> {
    dets.into_iter()
        .map(|d| NamedDetection {
            name: vocab.names[d.class_id].clone(),
            detection: d,
        })
        .collect()
}

/// Filter, retrieve, then threshold and NMS.
pub fn prompt_free_detect<T: Scalar>(
    pred: &Predictions<T>,
    specialized: &Tensor<T>,
    vocab: &Vocabulary<T>,
    delta: f64,
    score_thresh: f64,
    iou_thresh: f64,
    counter: &DotCounter,
) -> Result<Vec<NamedDetection>> {
    let o = pred.embeddings()?;
    let kept = filter_anchors(o, specialized, delta, counter)?;
    let hits = retrieve(o, &kept, vocab, counter)?;
    let dets = decode_candidates(
        pred,
        hits.iter().map(|r| (r.anchor, r.class_id, r.score)),
        score_thresh,
        iou_thresh,
    );
    Ok(name_all(dets, vocab))
}

/// The same pipeline without filtering: every anchor is matched.
pub fn brute_force_detect<T: Scalar>(
    pred: &Predictions<T>,
    vocab: &Vocabulary<T>,
    score_thresh: f64,
    iou_thresh: f64,
    counter: &DotCounter,
) -> Result<Vec<NamedDetection>> {
    let hits = brute_force_full(pred.embeddings()?, vocab, counter)?;
    let dets = decode_candidates(
        pred,
        hits.iter().map(|r| (r.anchor, r.class_id, r.score)),
        score_thresh,
        iou_thresh,
    );
    Ok(name_all(dets, vocab))
}
