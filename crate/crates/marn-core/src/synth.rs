//! Synthetic dataset generation: concept-segment videos whose frame and
//! clip features are noisy prototype draws, with captions naming the
//! segment concepts in order. Each concept owns several visual prototypes
//! and its occurrences cycle through them, so no single video shows a
//! word's full visual spectrum.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{build_vocabulary, CaptionSample, Dataset, Split, VideoFeatures};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub n_concepts: usize,
    /// Raw 2D feature dimension.
    pub d: usize,
    /// Raw 3D feature dimension.
    pub c: usize,
    pub noise_sigma: f64,
    pub prototypes_per_concept: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub frames_per_segment: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub min_count: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_videos: 40,
            n_concepts: 10,
            d: 16,
            c: 12,
            noise_sigma: 0.1,
            prototypes_per_concept: 2,
            min_segments: 2,
            max_segments: 4,
            frames_per_segment: 3,
            val_videos: 5,
            test_videos: 5,
            min_count: 1,
        }
    }
}

/// The word naming concept `j`.
pub fn concept_word(j: usize) -> String {
    alloc::format!("w{j:02}")
}

/// Generated dataset plus the (concept, prototype) assignment per video
/// segment, for diversity verification.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub segments: Vec<Vec<(usize, usize)>>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_concepts < 4 {
        return Err(CoreError::Config("need at least 4 concepts".into()));
    }
    if cfg.prototypes_per_concept < 2 {
        return Err(CoreError::Config(
            "each concept needs >= 2 distinct prototypes".into(),
        ));
    }
    if cfg.n_videos < cfg.n_concepts {
        return Err(CoreError::Config(alloc::format!(
            "{} videos cannot cover {} concepts",
            cfg.n_videos,
            cfg.n_concepts
        )));
    }
    if cfg.min_segments < 1 || cfg.max_segments < cfg.min_segments {
        return Err(CoreError::Config("bad segment range".into()));
    }
    if cfg.val_videos + cfg.test_videos >= cfg.n_videos {
        return Err(CoreError::Config(
            "val + test must leave a non-empty train split".into(),
        ));
    }
    if cfg.d < 1 || cfg.c < 1 || cfg.frames_per_segment < 1 || cfg.noise_sigma < 0.0 {
        return Err(CoreError::Config("bad feature parameters".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = cfg.prototypes_per_concept;
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let proto2d: Vec<Vec<Vec<f64>>> = (0..cfg.n_concepts)
        .map(|_| (0..protos).map(|_| draw(&mut rng, cfg.d)).collect())
        .collect();
    let proto3d: Vec<Vec<Vec<f64>>> = (0..cfg.n_concepts)
        .map(|_| (0..protos).map(|_| draw(&mut rng, cfg.c)).collect())
        .collect();

    // Cycling per-concept counters guarantee every concept that occurs
    // at least `protos` times is drawn from all of its prototypes.
    let mut usage = vec![0usize; cfg.n_concepts];
    let mut videos = Vec::with_capacity(cfg.n_videos);
    let mut raw_captions: Vec<(String, Vec<String>)> = Vec::with_capacity(cfg.n_videos);
    let mut segments_out = Vec::with_capacity(cfg.n_videos);
    for v in 0..cfg.n_videos {
        let id = alloc::format!("v{v:04}");
        let n_segments = rng.gen_range(cfg.min_segments..=cfg.max_segments);
        let mut segs = Vec::with_capacity(n_segments);
        for s in 0..n_segments {
            // Round-robin first segments cover every concept across videos.
            let concept = if s == 0 {
                v % cfg.n_concepts
            } else {
                rng.gen_range(0..cfg.n_concepts)
            };
            let proto = usage[concept] % protos;
            usage[concept] += 1;
            segs.push((concept, proto));
        }
        let mut f2d = Vec::with_capacity(n_segments * cfg.frames_per_segment * cfg.d);
        let mut f3d = Vec::with_capacity(n_segments * cfg.c);
        for &(concept, proto) in &segs {
            for _ in 0..cfg.frames_per_segment {
                for &base in &proto2d[concept][proto] {
                    let noise: f64 = rng.sample(StandardNormal);
                    f2d.push(base + cfg.noise_sigma * noise);
                }
            }
            for &base in &proto3d[concept][proto] {
                let noise: f64 = rng.sample(StandardNormal);
                f3d.push(base + cfg.noise_sigma * noise);
            }
        }
        // Dominant concept by segment count, ties to the smallest id.
        let mut seg_count = vec![0usize; cfg.n_concepts];
        for &(concept, _) in &segs {
            seg_count[concept] += 1;
        }
        let category = seg_count
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(j, _)| j as u32)
            .unwrap();
        let words: Vec<String> = segs.iter().map(|&(c, _)| concept_word(c)).collect();
        videos.push(VideoFeatures::new(
            id.clone(),
            Tensor::new(
                vec![n_segments * cfg.frames_per_segment, cfg.d],
                f2d,
            )?,
            Tensor::new(vec![n_segments, cfg.c], f3d)?,
            Some(category),
        )?);
        raw_captions.push((id, words));
        segments_out.push(segs);
    }

    let n_train = cfg.n_videos - cfg.val_videos - cfg.test_videos;
    let mut splits = BTreeMap::new();
    for (v, video) in videos.iter().enumerate() {
        let split = if v < n_train {
            Split::Train
        } else if v < n_train + cfg.val_videos {
            Split::Val
        } else {
            Split::Test
        };
        splits.insert(video.id.clone(), split);
    }

    let train_corpus: Vec<Vec<String>> = raw_captions
        .iter()
        .take(n_train)
        .map(|(_, words)| words.clone())
        .collect();
    let vocab = build_vocabulary(&train_corpus, cfg.min_count)?;
    let captions: Vec<CaptionSample> = raw_captions
        .iter()
        .map(|(id, words)| CaptionSample::new(id.clone(), vocab.encode(words), vocab.len()))
        .collect::<Result<_>>()?;

    let dataset = Dataset::new(videos, captions, vocab, splits)?;
    Ok(SynthDataset {
        dataset,
        segments: segments_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset.videos.len(), b.dataset.videos.len());
        for (va, vb) in a.dataset.videos.iter().zip(&b.dataset.videos) {
            assert_eq!(va, vb);
        }
        assert_eq!(a.dataset.captions, b.dataset.captions);
        assert_eq!(a.segments, b.segments);
    }

    #[test]
    fn zero_noise_reproduces_prototypes_exactly() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        // All frames of one segment must be identical under sigma = 0.
        for (video, segs) in out.dataset.videos.iter().zip(&out.segments) {
            for (si, _) in segs.iter().enumerate() {
                let first = video.f2d.row(si * cfg.frames_per_segment);
                for f in 1..cfg.frames_per_segment {
                    assert_eq!(video.f2d.row(si * cfg.frames_per_segment + f), first);
                }
            }
        }
    }

    #[test]
    fn every_concept_word_spans_multiple_prototypes() {
        let cfg = SynthConfig {
            n_videos: 30,
            n_concepts: 10,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        // Manifest scan: per concept, collect (video, prototype) pairs.
        let mut protos_seen: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        let mut videos_seen: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (v, segs) in out.segments.iter().enumerate() {
            for &(concept, proto) in segs {
                protos_seen.entry(concept).or_default().insert(proto);
                videos_seen.entry(concept).or_default().insert(v);
            }
        }
        for concept in 0..cfg.n_concepts {
            assert!(
                protos_seen[&concept].len() >= 2,
                "concept {concept} uses a single prototype"
            );
            assert!(videos_seen[&concept].len() >= 2);
        }
    }

    #[test]
    fn captions_name_segment_concepts_in_order() {
        let out = generate(&SynthConfig::default()).unwrap();
        let ds = &out.dataset;
        for (caption, segs) in ds.captions.iter().zip(&out.segments) {
            let words = ds.vocab.decode(&caption.token_ids).unwrap();
            assert_eq!(words.len(), segs.len());
            for (w, &(concept, _)) in words.iter().zip(segs) {
                assert_eq!(*w, concept_word(concept));
            }
        }
    }

    #[test]
    fn category_is_dominant_concept() {
        let out = generate(&SynthConfig::default()).unwrap();
        for (video, segs) in out.dataset.videos.iter().zip(&out.segments) {
            let cat = video.category.unwrap() as usize;
            let count = |c: usize| segs.iter().filter(|&&(j, _)| j == c).count();
            for j in 0..10 {
                assert!(count(cat) >= count(j));
            }
        }
    }

    #[test]
    fn degenerate_parameters_are_rejected() {
        let bad = SynthConfig {
            n_videos: 5,
            n_concepts: 10,
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            n_concepts: 3,
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            prototypes_per_concept: 1,
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let cfg = SynthConfig::default();
        let out = generate(&cfg).unwrap();
        let ds = &out.dataset;
        let train = ds.videos_in(Split::Train).len();
        let val = ds.videos_in(Split::Val).len();
        let test = ds.videos_in(Split::Test).len();
        assert_eq!(train + val + test, cfg.n_videos);
        assert_eq!(val, cfg.val_videos);
        assert_eq!(test, cfg.test_videos);
    }
}
