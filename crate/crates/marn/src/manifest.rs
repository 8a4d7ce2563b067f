//! Dataset manifest (UTF-8 JSON) and vocabulary files, plus loading a
//! manifest into the in-memory dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use marn_core::data::{
    build_vocabulary, tokenize, CaptionSample, Dataset, Split, Vocabulary,
};

use crate::error::{MarnError, Result};
use crate::formats::load_features;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    /// Feature file path, relative to the manifest's directory.
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCaption {
    pub video_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSplits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<ManifestVideo>,
    pub captions: Vec<ManifestCaption>,
    pub splits: ManifestSplits,
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let json =
        serde_json::to_string_pretty(manifest).map_err(|e| MarnError::json(path, e))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MarnError::io(path, e))?;
    }
    fs::write(path, json).map_err(|e| MarnError::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| MarnError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MarnError::json(path, e))
}

/// Vocabulary file: one token per line, line number = index.
pub fn save_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| MarnError::io(path, e))
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| MarnError::io(path, e))?;
    let tokens: Vec<String> = text.lines().map(String::from).collect();
    Vocabulary::from_tokens(tokens).map_err(MarnError::Core)
}

/// Where the vocabulary for a manifest comes from.
pub enum VocabSource<'a> {
    /// Build from the train split's captions with this frequency floor.
    BuildFromTrain { min_count: u32 },
    /// Load a previously saved vocabulary file.
    File(&'a Path),
}

/// Resolve a manifest into a fully loaded dataset: feature files read,
/// captions tokenized and encoded, splits checked.
pub fn load_dataset(manifest_path: &Path, vocab: VocabSource) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in &manifest.videos {
        let full: PathBuf = base.join(&mv.path);
        let video = load_features(&full)?;
        if video.id != mv.id {
            return Err(MarnError::Format {
                path: full,
                msg: format!("manifest id {} but file holds {}", mv.id, video.id),
            });
        }
        videos.push(video);
    }

    let mut splits = BTreeMap::new();
    for (names, split) in [
        (&manifest.splits.train, Split::Train),
        (&manifest.splits.val, Split::Val),
        (&manifest.splits.test, Split::Test),
    ] {
        for id in names {
            if splits.insert(id.clone(), split).is_some() {
                return Err(MarnError::Format {
                    path: manifest_path.to_path_buf(),
                    msg: format!("video {id} assigned to more than one split"),
                });
            }
        }
    }

    let tokenized: Vec<(String, Vec<String>)> = manifest
        .captions
        .iter()
        .map(|c| (c.video_id.clone(), tokenize(&c.text)))
        .collect();
    let vocabulary = match vocab {
        VocabSource::File(path) => load_vocabulary(path)?,
        VocabSource::BuildFromTrain { min_count } => {
            let train_corpus: Vec<Vec<String>> = tokenized
                .iter()
                .filter(|(id, _)| splits.get(id) == Some(&Split::Train))
                .map(|(_, words)| words.clone())
                .collect();
            build_vocabulary(&train_corpus, min_count)?
        }
    };
    let captions: Vec<CaptionSample> = tokenized
        .iter()
        .map(|(id, words)| {
            CaptionSample::new(id.clone(), vocabulary.encode(words), vocabulary.len())
                .map_err(MarnError::Core)
        })
        .collect::<Result<_>>()?;

    Dataset::new(videos, captions, vocabulary, splits).map_err(MarnError::Core)
}
