//! In-memory dataset model: video features, vocabulary, tokenized captions,
//! and splits. Persistence lives in the companion crate.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// One video's precomputed features: per-frame 2D vectors and per-clip 3D
/// vectors, plus an optional category id.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub id: String,
    /// [L, d] frame features.
    pub f2d: Tensor,
    /// [N, c] clip features.
    pub f3d: Tensor,
    pub category: Option<u32>,
}

impl VideoFeatures {
    pub fn new(id: String, f2d: Tensor, f3d: Tensor, category: Option<u32>) -> Result<Self> {
        if !f2d.is_matrix() || !f3d.is_matrix() {
            return Err(CoreError::Contract(alloc::format!(
                "features for {id} must be [L, d] and [N, c] matrices"
            )));
        }
        if !f2d.all_finite() || !f3d.all_finite() {
            return Err(CoreError::Numeric(alloc::format!(
                "features for {id} contain non-finite values"
            )));
        }
        Ok(VideoFeatures {
            id,
            f2d,
            f3d,
            category,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.f2d.shape()[0]
    }

    pub fn clip_count(&self) -> usize {
        self.f3d.shape()[0]
    }

    pub fn frame_dim(&self) -> usize {
        self.f2d.shape()[1]
    }

    pub fn clip_dim(&self) -> usize {
        self.f3d.shape()[1]
    }
}

/// Token list with reserved entries at fixed indices 0-3 and a reverse map.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Build from an explicit token list that already starts with the four
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 5 {
            return Err(CoreError::Contract(
                "vocabulary needs the 4 reserved tokens plus at least one word".into(),
            ));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens[i] != *want {
                return Err(CoreError::Contract(alloc::format!(
                    "reserved token {want} missing at index {i}"
                )));
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CoreError::Contract(alloc::format!("duplicate token {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Never true: construction requires the reserved tokens plus one word.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| CoreError::Lookup(alloc::format!("token id {id} >= K={}", self.len())))
    }

    /// Wrap with `<bos>`/`<eos>`, mapping out-of-vocabulary words to `<unk>`.
    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        for w in words {
            ids.push(self.id_of(w).unwrap_or(UNK));
        }
        ids.push(EOS);
        ids
    }

    /// Inverse of [`encode`](Self::encode) for in-vocabulary sentences:
    /// reserved tokens are stripped.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut words = Vec::new();
        for &id in ids {
            let tok = self.token(id)?;
            if id >= RESERVED.len() {
                words.push(tok.to_string());
            }
        }
        Ok(words)
    }
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let cleaned: String = w
                .chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(|c| c.to_lowercase())
                .collect();
            if cleaned.is_empty() {
                None
            } else {
                Some(cleaned)
            }
        })
        .collect()
}

/// Keep tokens with corpus frequency >= `min_count`, ordered by descending
/// frequency then lexicographically; everything else maps to `<unk>`.
pub fn build_vocabulary(corpus: &[Vec<String>], min_count: u32) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(CoreError::Config("min_count must be >= 1".into()));
    }
    if corpus.iter().all(|c| c.is_empty()) {
        return Err(CoreError::Contract("empty caption corpus".into()));
    }
    let mut freq: BTreeMap<&str, u32> = BTreeMap::new();
    for caption in corpus {
        for w in caption {
            *freq.entry(w.as_str()).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, u32)> = freq.into_iter().filter(|&(_, n)| n >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if kept.is_empty() {
        return Err(CoreError::Contract(alloc::format!(
            "no token reaches min_count={min_count}"
        )));
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens)
}

/// A tokenized caption: `<bos> ... <eos>` indices tied to a video.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSample {
    pub video_id: String,
    pub token_ids: Vec<usize>,
}

impl CaptionSample {
    pub fn new(video_id: String, token_ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if token_ids.len() < 3 {
            return Err(CoreError::Contract(alloc::format!(
                "caption for {video_id} has {} tokens, need >= 3",
                token_ids.len()
            )));
        }
        if token_ids[0] != BOS || *token_ids.last().unwrap() != EOS {
            return Err(CoreError::Contract(alloc::format!(
                "caption for {video_id} must start <bos> and end <eos>"
            )));
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= vocab_size) {
            return Err(CoreError::Lookup(alloc::format!(
                "caption for {video_id} uses id {bad} >= K={vocab_size}"
            )));
        }
        Ok(CaptionSample {
            video_id,
            token_ids,
        })
    }

    /// Number of prediction steps (targets at positions 1..=T-1).
    pub fn steps(&self) -> usize {
        self.token_ids.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Fully resolved in-memory dataset: features, tokenized captions,
/// vocabulary, and a disjoint-exhaustive split assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<VideoFeatures>,
    pub captions: Vec<CaptionSample>,
    pub vocab: Vocabulary,
    splits: BTreeMap<String, Split>,
    by_id: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn new(
        videos: Vec<VideoFeatures>,
        captions: Vec<CaptionSample>,
        vocab: Vocabulary,
        splits: BTreeMap<String, Split>,
    ) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, v) in videos.iter().enumerate() {
            if by_id.insert(v.id.clone(), i).is_some() {
                return Err(CoreError::Contract(alloc::format!(
                    "duplicate video id {}",
                    v.id
                )));
            }
        }
        if let Some(v) = videos.first() {
            let (d, c) = (v.frame_dim(), v.clip_dim());
            for w in &videos {
                if w.frame_dim() != d || w.clip_dim() != c {
                    return Err(CoreError::Contract(alloc::format!(
                        "video {} has feature dims {}x{}, dataset uses {d}x{c}",
                        w.id,
                        w.frame_dim(),
                        w.clip_dim()
                    )));
                }
            }
        }
        for c in &captions {
            if !by_id.contains_key(&c.video_id) {
                return Err(CoreError::Lookup(alloc::format!(
                    "caption references unknown video {}",
                    c.video_id
                )));
            }
        }
        let assigned: BTreeSet<&String> = splits.keys().collect();
        for v in &videos {
            if !assigned.contains(&v.id) {
                return Err(CoreError::Contract(alloc::format!(
                    "video {} has no split assignment",
                    v.id
                )));
            }
        }
        Ok(Dataset {
            videos,
            captions,
            vocab,
            splits,
            by_id,
        })
    }

    pub fn video(&self, id: &str) -> Result<&VideoFeatures> {
        self.by_id
            .get(id)
            .map(|&i| &self.videos[i])
            .ok_or_else(|| CoreError::Lookup(alloc::format!("unknown video {id}")))
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.splits.get(id).copied()
    }

    pub fn videos_in(&self, split: Split) -> Vec<&VideoFeatures> {
        self.videos
            .iter()
            .filter(|v| self.splits.get(&v.id) == Some(&split))
            .collect()
    }

    /// Caption indices whose video belongs to `split`, in manifest order.
    pub fn caption_indices(&self, split: Split) -> Vec<usize> {
        self.captions
            .iter()
            .enumerate()
            .filter(|(_, c)| self.splits.get(&c.video_id) == Some(&split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Reference captions per video id (decoded words) for a split.
    pub fn references_in(&self, split: Split) -> Result<BTreeMap<String, Vec<Vec<String>>>> {
        let mut refs: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        for v in self.videos_in(split) {
            refs.entry(v.id.clone()).or_default();
        }
        for c in &self.captions {
            if self.splits.get(&c.video_id) == Some(&split) {
                refs.entry(c.video_id.clone())
                    .or_default()
                    .push(self.vocab.decode(&c.token_ids)?);
            }
        }
        Ok(refs)
    }

    /// Number of categories (max id + 1) when every video carries one;
    /// zero when categories are absent anywhere.
    pub fn category_count(&self) -> usize {
        let mut max: Option<u32> = None;
        for v in &self.videos {
            match v.category {
                Some(c) => max = Some(max.map_or(c, |m| m.max(c))),
                None => return 0,
            }
        }
        max.map_or(0, |m| m as usize + 1)
    }
}
