//! Corpus evaluation: decode every video of a split, score the captions
//! with BLEU-4 / ROUGE-L / CIDEr, and tune the fusion weight on the
//! validation split.

use alloc::string::String;
use alloc::vec::Vec;

use serde::Serialize;

use crate::basis::BasisParams;
use crate::data::{Dataset, Split};
use crate::decode::{beam_decode, greedy_decode, VideoStepper};
use crate::error::{CoreError, Result};
use crate::memdec::{FusionConfig, MemDecParams};
use crate::memory::MemoryBank;
use crate::metrics::{bleu4, cider, rouge_l, Pair};

#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
pub struct DecodeConfig {
    pub max_len: usize,
    /// 1 = greedy.
    pub beam_width: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_len: 20,
            beam_width: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VideoResult {
    pub id: String,
    pub caption: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub lambda: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub videos: Vec<VideoResult>,
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Decode one video with the basis decoder, optionally fused with the
/// memory decoder at weight lambda.
pub fn decode_video(
    params: &BasisParams,
    memdec: Option<(&MemDecParams, &MemoryBank)>,
    lambda: f64,
    video: &crate::data::VideoFeatures,
    decode: DecodeConfig,
) -> Result<Vec<usize>> {
    let mut stepper = match memdec {
        Some((mp, bank)) => {
            VideoStepper::fused(params, mp, bank, FusionConfig::new(lambda)?, video)?
        }
        None => VideoStepper::basis(params, video)?,
    };
    if decode.beam_width <= 1 {
        greedy_decode(&mut stepper, decode.max_len)
    } else {
        beam_decode(&mut stepper, decode.beam_width, decode.max_len)
    }
}

/// Decode every video of a split and compute all three corpus metrics.
pub fn evaluate_corpus(
    dataset: &Dataset,
    split: Split,
    params: &BasisParams,
    memdec: Option<(&MemDecParams, &MemoryBank)>,
    lambda: f64,
    decode: DecodeConfig,
) -> Result<EvalReport> {
    let refs = dataset.references_in(split)?;
    if refs.is_empty() {
        return Err(CoreError::Contract(alloc::format!(
            "split {} has no videos",
            split_name(split)
        )));
    }
    let mut pairs: Vec<Pair> = Vec::with_capacity(refs.len());
    let mut videos = Vec::with_capacity(refs.len());
    for (id, references) in &refs {
        let video = dataset.video(id)?;
        let ids = decode_video(params, memdec, lambda, video, decode)?;
        let words = dataset.vocab.decode(&ids)?;
        videos.push(VideoResult {
            id: id.clone(),
            caption: words.join(" "),
            references: references.iter().map(|r| r.join(" ")).collect(),
        });
        pairs.push((words, references.clone()));
    }
    Ok(EvalReport {
        split: String::from(split_name(split)),
        lambda,
        bleu4: bleu4(&pairs)?,
        rouge_l: rouge_l(&pairs)?,
        cider: cider(&pairs)?,
        videos,
    })
}

/// Validation-split grid search for the fusion weight, maximizing CIDEr.
/// Ties keep the smallest lambda. Returns the winner and the full grid.
pub fn tune_lambda(
    dataset: &Dataset,
    params: &BasisParams,
    memdec: &MemDecParams,
    bank: &MemoryBank,
    decode: DecodeConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut grid = Vec::with_capacity(11);
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..=10 {
        let lambda = i as f64 / 10.0;
        let report = evaluate_corpus(
            dataset,
            Split::Val,
            params,
            Some((memdec, bank)),
            lambda,
            decode,
        )?;
        grid.push((lambda, report.cider));
        if report.cider > best.1 {
            best = (lambda, report.cider);
        }
    }
    Ok((best.0, grid))
}
