//! Per-word memory construction from a trained basis decoder: attended
//! visual contexts across every occurrence of each word, copied embeddings,
//! and category histograms as auxiliary features.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::basis::{forward_teacher_forced, project_features_plain, AttentionMap, BasisParams};
use crate::data::{Dataset, Split, BOS, PAD};
use crate::error::{CoreError, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// The attention rows captured at one step that predicted `word_id`.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub word_id: usize,
    pub video_id: String,
    pub weights2d: Vec<f64>,
    pub weights3d: Vec<f64>,
}

/// One word's memory: visual context g, embedding e, auxiliary u.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub word_id: usize,
    pub g: Vec<f64>,
    pub e: Vec<f64>,
    pub u: Vec<f64>,
    pub occurrence_count: u32,
}

/// Exactly one entry per vocabulary word.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub entries: Vec<MemoryEntry>,
    pub k: usize,
    pub m: usize,
    pub embed: usize,
    pub u_dim: usize,
}

impl MemoryBank {
    /// Column-major matrices [m, K], [embed, K], and (when u_dim > 0)
    /// [u_dim, K] for batched relevance scoring.
    pub fn matrices(&self) -> (Tensor, Tensor, Option<Tensor>) {
        let kk = self.entries.len();
        let mut g = vec![0.0; self.m * kk];
        let mut e = vec![0.0; self.embed * kk];
        let mut u = vec![0.0; self.u_dim * kk];
        for (col, entry) in self.entries.iter().enumerate() {
            for (row, &x) in entry.g.iter().enumerate() {
                g[row * kk + col] = x;
            }
            for (row, &x) in entry.e.iter().enumerate() {
                e[row * kk + col] = x;
            }
            for (row, &x) in entry.u.iter().enumerate() {
                u[row * kk + col] = x;
            }
        }
        let g = Tensor::new(vec![self.m, kk], g).expect("g matrix");
        let e = Tensor::new(vec![self.embed, kk], e).expect("e matrix");
        let u = if self.u_dim > 0 {
            Some(Tensor::new(vec![self.u_dim, kk], u).expect("u matrix"))
        } else {
            None
        };
        (g, e, u)
    }
}

/// Teacher-forced pass over every training caption, emitting one record per
/// prediction step. `<pad>`/`<bos>` targets are skipped; `<eos>`/`<unk>`
/// count as ordinary words.
pub fn collect_attention_records(
    params: &BasisParams,
    dataset: &Dataset,
) -> Result<Vec<AttentionRecord>> {
    let mut records = Vec::new();
    for &ci in &dataset.caption_indices(Split::Train) {
        let caption = &dataset.captions[ci];
        let video = dataset.video(&caption.video_id)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let pass = forward_teacher_forced(&mut tape, &vars, video, caption)?;
        let map = AttentionMap::from_pass(&tape, &pass);
        for (t, &target) in pass.targets.iter().enumerate() {
            if target == PAD || target == BOS {
                continue;
            }
            records.push(AttentionRecord {
                word_id: target,
                video_id: caption.video_id.clone(),
                weights2d: map.a2d[t].clone(),
                weights3d: map.a3d[t].clone(),
            });
        }
    }
    Ok(records)
}

/// Indices of the top-k weights, by descending weight then ascending index.
fn top_k_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Weight-normalized top-k sum of projected features for one word:
/// g = (sum a f') / (sum a) + (sum a' v') / (sum a'), summed over all
/// occurrences and their top-k frames, each stream normalized by its own
/// weight mass. A `k` larger than a row is truncated with a warning.
pub fn build_visual_context(
    records: &[AttentionRecord],
    projections: &BTreeMap<String, (Tensor, Tensor)>,
    m: usize,
    k: usize,
) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(CoreError::Config("top-k must be >= 1".into()));
    }
    if records.is_empty() {
        return Ok(vec![0.0; m]);
    }
    let mut num2 = vec![0.0; m];
    let mut num3 = vec![0.0; m];
    let mut den2 = 0.0;
    let mut den3 = 0.0;
    for rec in records {
        let (proj2, proj3) = projections.get(&rec.video_id).ok_or_else(|| {
            CoreError::Lookup(alloc::format!("no projected features for {}", rec.video_id))
        })?;
        for (weights, proj, num, den) in [
            (&rec.weights2d, proj2, &mut num2, &mut den2),
            (&rec.weights3d, proj3, &mut num3, &mut den3),
        ] {
            let avail = weights.len();
            let kk = if k > avail {
                log::warn!(
                    "top-k {k} exceeds {avail} frames for {}; truncating",
                    rec.video_id
                );
                avail
            } else {
                k
            };
            for j in top_k_indices(weights, kk) {
                let a = weights[j];
                *den += a;
                for (s, &f) in num.iter_mut().zip(proj.row(j)) {
                    *s += a * f;
                }
            }
        }
    }
    Ok((0..m)
        .map(|i| num2[i] / den2 + num3[i] / den3)
        .collect())
}

/// Category histogram over the word's occurrences, normalized to sum 1.
/// Empty when the dataset has no categories; zero for unseen words.
pub fn build_auxiliary(
    records: &[AttentionRecord],
    categories: &BTreeMap<String, u32>,
    n_categories: usize,
) -> Vec<f64> {
    if n_categories == 0 {
        return Vec::new();
    }
    let mut hist = vec![0.0; n_categories];
    let mut total = 0.0;
    for rec in records {
        if let Some(&c) = categories.get(&rec.video_id) {
            hist[c as usize] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        for h in &mut hist {
            *h /= total;
        }
    }
    hist
}

/// Build the full memory bank from a trained basis decoder over the train
/// split. Every vocabulary word gets an entry; e is copied verbatim from
/// the embedding column.
pub fn assemble_memory(params: &BasisParams, dataset: &Dataset, k: usize) -> Result<MemoryBank> {
    let dims = params.dims;
    let mut projections = BTreeMap::new();
    let mut categories = BTreeMap::new();
    for video in dataset.videos_in(Split::Train) {
        projections.insert(video.id.clone(), project_features_plain(params, video)?);
        if let Some(c) = video.category {
            categories.insert(video.id.clone(), c);
        }
    }
    let n_categories = dataset.category_count();
    let records = collect_attention_records(params, dataset)?;
    let mut by_word: BTreeMap<usize, Vec<AttentionRecord>> = BTreeMap::new();
    for rec in records {
        by_word.entry(rec.word_id).or_default().push(rec);
    }
    let empty: Vec<AttentionRecord> = Vec::new();
    let mut entries = Vec::with_capacity(dims.vocab);
    for word_id in 0..dims.vocab {
        let recs = by_word.get(&word_id).unwrap_or(&empty);
        let g = build_visual_context(recs, &projections, dims.m, k)?;
        let u = build_auxiliary(recs, &categories, n_categories);
        let e: Vec<f64> = (0..dims.embed)
            .map(|row| params.embed.data()[row * dims.vocab + word_id])
            .collect();
        entries.push(MemoryEntry {
            word_id,
            g,
            e,
            u,
            occurrence_count: recs.len() as u32,
        });
    }
    Ok(MemoryBank {
        entries,
        k,
        m: dims.m,
        embed: dims.embed,
        u_dim: n_categories,
    })
}
