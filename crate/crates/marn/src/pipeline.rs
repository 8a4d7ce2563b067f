//! Pipeline stages behind the CLI subcommands. Every stage writes the
//! resolved run configuration and its digest chain into the output
//! directory so a run can be replayed exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use marn_core::basis::{BasisParams, Dims};
use marn_core::data::{Dataset, Split};
use marn_core::eval::{evaluate_corpus, tune_lambda, EvalReport};
use marn_core::gradcheck::micro_max_error;
use marn_core::memdec::MemDecParams;
use marn_core::memory::{assemble_memory, MemoryBank};
use marn_core::synth::generate;
use marn_core::train::{train_basis, train_memory_decoder, TrainReport};

use crate::config::RunConfig;
use crate::error::{MarnError, Result};
use crate::formats::{
    load_basis, load_memdec, load_memory, save_basis, save_features, save_memdec, save_memory,
};
use crate::manifest::{
    load_dataset, save_manifest, save_vocabulary, Manifest, ManifestCaption, ManifestSplits,
    ManifestVideo, VocabSource,
};

/// Digest chain recorded next to every produced artifact.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DigestChain {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub basis: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memdec: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub digests: DigestChain,
    pub config: RunConfig,
}

pub fn hex(digest: u64) -> String {
    format!("{digest:016x}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| MarnError::json(path, e))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MarnError::io(path, e))?;
    }
    fs::write(path, json).map_err(|e| MarnError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| MarnError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MarnError::json(path, e))
}

fn write_run_record(out: &Path, command: &str, cfg: &RunConfig, digests: DigestChain) -> Result<()> {
    write_json(
        &out.join("run.json"),
        &RunRecord {
            command: command.into(),
            seed: cfg.seed,
            digests,
            config: cfg.clone(),
        },
    )
}

/// Sidecar metadata tying an artifact to the digests it was derived from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub digests: DigestChain,
}

fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".meta.json");
    artifact.with_file_name(name)
}

pub fn write_meta(artifact: &Path, digests: &DigestChain) -> Result<()> {
    write_json(
        &meta_path(artifact),
        &ArtifactMeta {
            digests: digests.clone(),
        },
    )
}

pub fn read_meta(artifact: &Path) -> Result<ArtifactMeta> {
    read_json(&meta_path(artifact))
}

fn expect_digest(what: &str, expected_hex: &str, actual: u64) -> Result<()> {
    let expected = u64::from_str_radix(expected_hex, 16).map_err(|_| MarnError::Format {
        path: PathBuf::from(what),
        msg: format!("unparseable digest {expected_hex}"),
    })?;
    if expected != actual {
        return Err(MarnError::Digest {
            what: what.into(),
            expected,
            actual,
        });
    }
    Ok(())
}

/// The vocabulary saved next to a basis checkpoint.
pub fn vocab_path_for(basis: &Path) -> PathBuf {
    basis.with_file_name("vocab.txt")
}

// ── synth ───────────────────────────────────────────────────────────

/// Generate a synthetic dataset under `out`: feature files, manifest,
/// and the run record.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let synth = generate(&cfg.synth)?;
    let ds = &synth.dataset;
    let mut videos = Vec::new();
    for video in &ds.videos {
        let rel = format!("features/{}.marnf", video.id);
        save_features(&out.join(&rel), video)?;
        videos.push(ManifestVideo {
            id: video.id.clone(),
            path: rel,
        });
    }
    let captions = ds
        .captions
        .iter()
        .map(|c| {
            Ok(ManifestCaption {
                video_id: c.video_id.clone(),
                text: ds.vocab.decode(&c.token_ids)?.join(" "),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let split_ids = |split: Split| -> Vec<String> {
        ds.videos_in(split).iter().map(|v| v.id.clone()).collect()
    };
    let manifest = Manifest {
        videos,
        captions,
        splits: ManifestSplits {
            train: split_ids(Split::Train),
            val: split_ids(Split::Val),
            test: split_ids(Split::Test),
        },
    };
    save_manifest(&out.join("manifest.json"), &manifest)?;
    write_run_record(out, "synth", cfg, DigestChain::default())?;
    Ok(manifest)
}

// ── train-basis ─────────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainBasisOutcome {
    pub basis_path: PathBuf,
    pub digest: u64,
    pub report: TrainReport,
}

pub fn run_train_basis(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<TrainBasisOutcome> {
    let dataset = load_dataset(
        manifest,
        VocabSource::BuildFromTrain {
            min_count: cfg.min_count,
        },
    )?;
    let first = dataset
        .videos
        .first()
        .ok_or_else(|| MarnError::Core(marn_core::CoreError::Contract("empty dataset".into())))?;
    let dims = Dims {
        m: cfg.dims.m,
        hidden: cfg.dims.hidden,
        attn: cfg.dims.attn,
        embed: cfg.dims.embed,
        vocab: dataset.vocab.len(),
        feat2d: first.frame_dim(),
        feat3d: first.clip_dim(),
    };
    let (params, report) = train_basis(&dataset, dims, &cfg.train)?;
    fs::create_dir_all(out).map_err(|e| MarnError::io(out, e))?;
    let basis_path = out.join("basis.marnc");
    let digest = save_basis(&basis_path, &params)?;
    save_vocabulary(&vocab_path_for(&basis_path), &dataset.vocab)?;
    write_json(&out.join("train_report.json"), &report)?;
    let digests = DigestChain {
        basis: Some(hex(digest)),
        ..DigestChain::default()
    };
    write_meta(&basis_path, &digests)?;
    write_run_record(out, "train-basis", cfg, digests)?;
    Ok(TrainBasisOutcome {
        basis_path,
        digest,
        report,
    })
}

/// Load a basis checkpoint together with its vocabulary and dataset.
fn load_stage_inputs(manifest: &Path, basis: &Path) -> Result<(Dataset, BasisParams, u64)> {
    let vocab = vocab_path_for(basis);
    let dataset = load_dataset(manifest, VocabSource::File(&vocab))?;
    let (params, digest) = load_basis(basis)?;
    if params.dims.vocab != dataset.vocab.len() {
        return Err(MarnError::Format {
            path: basis.to_path_buf(),
            msg: format!(
                "checkpoint vocabulary {} != dataset vocabulary {}",
                params.dims.vocab,
                dataset.vocab.len()
            ),
        });
    }
    Ok((dataset, params, digest))
}

// ── build-memory ────────────────────────────────────────────────────

#[derive(Debug)]
pub struct BuildMemoryOutcome {
    pub memory_path: PathBuf,
    pub basis_digest: u64,
    pub memory_digest: u64,
}

pub fn run_build_memory(
    manifest: &Path,
    basis: &Path,
    cfg: &RunConfig,
    out: &Path,
) -> Result<BuildMemoryOutcome> {
    let (dataset, params, basis_digest) = load_stage_inputs(manifest, basis)?;
    let bank = assemble_memory(&params, &dataset, cfg.k)?;
    fs::create_dir_all(out).map_err(|e| MarnError::io(out, e))?;
    let memory_path = out.join("memory.marnm");
    let memory_digest = save_memory(&memory_path, &bank)?;
    let digests = DigestChain {
        basis: Some(hex(basis_digest)),
        memory: Some(hex(memory_digest)),
        ..DigestChain::default()
    };
    write_meta(&memory_path, &digests)?;
    write_run_record(out, "build-memory", cfg, digests)?;
    Ok(BuildMemoryOutcome {
        memory_path,
        basis_digest,
        memory_digest,
    })
}

// ── train-memory ────────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainMemDecOutcome {
    pub memdec_path: PathBuf,
    pub digest: u64,
    pub report: TrainReport,
}

/// Train the memory decoder. Refuses to run when the memory file was not
/// built from the given basis checkpoint (digest check).
pub fn run_train_memdec(
    manifest: &Path,
    basis: &Path,
    memory: &Path,
    cfg: &RunConfig,
    out: &Path,
) -> Result<TrainMemDecOutcome> {
    let (dataset, params, basis_digest) = load_stage_inputs(manifest, basis)?;
    let meta = read_meta(memory)?;
    let recorded = meta.digests.basis.as_deref().ok_or_else(|| MarnError::Format {
        path: meta_path(memory),
        msg: "memory metadata lacks a basis digest".into(),
    })?;
    expect_digest("memory's basis checkpoint", recorded, basis_digest)?;
    let (bank, memory_digest) = load_memory(memory)?;
    if let Some(mem_hex) = &meta.digests.memory {
        expect_digest("memory file", mem_hex, memory_digest)?;
    }
    let (memdec, report) = train_memory_decoder(&params, &bank, &dataset, &cfg.train)?;
    fs::create_dir_all(out).map_err(|e| MarnError::io(out, e))?;
    let memdec_path = out.join("memdec.marnc");
    let digest = save_memdec(&memdec_path, &memdec)?;
    write_json(&out.join("train_report.json"), &report)?;
    let digests = DigestChain {
        basis: Some(hex(basis_digest)),
        memory: Some(hex(memory_digest)),
        memdec: Some(hex(digest)),
    };
    write_meta(&memdec_path, &digests)?;
    write_run_record(out, "train-memory", cfg, digests)?;
    Ok(TrainMemDecOutcome {
        memdec_path,
        digest,
        report,
    })
}

// ── caption / eval ──────────────────────────────────────────────────

pub struct FusedModel {
    pub dataset: Dataset,
    pub basis: BasisParams,
    pub memdec: Option<(MemDecParams, MemoryBank)>,
    pub digests: DigestChain,
}

/// Load everything needed for decoding, verifying the digest chain when a
/// memory decoder is supplied.
pub fn load_fused(
    manifest: &Path,
    basis: &Path,
    memory_and_memdec: Option<(&Path, &Path)>,
) -> Result<FusedModel> {
    let (dataset, params, basis_digest) = load_stage_inputs(manifest, basis)?;
    let mut digests = DigestChain {
        basis: Some(hex(basis_digest)),
        ..DigestChain::default()
    };
    let memdec = match memory_and_memdec {
        Some((memory, memdec)) => {
            let mem_meta = read_meta(memory)?;
            if let Some(recorded) = mem_meta.digests.basis.as_deref() {
                expect_digest("memory's basis checkpoint", recorded, basis_digest)?;
            }
            let (bank, memory_digest) = load_memory(memory)?;
            let dec_meta = read_meta(memdec)?;
            if let Some(recorded) = dec_meta.digests.basis.as_deref() {
                expect_digest("memory decoder's basis checkpoint", recorded, basis_digest)?;
            }
            if let Some(recorded) = dec_meta.digests.memory.as_deref() {
                expect_digest("memory decoder's memory file", recorded, memory_digest)?;
            }
            let (dec, dec_digest) = load_memdec(memdec, params.dims.vocab)?;
            digests.memory = Some(hex(memory_digest));
            digests.memdec = Some(hex(dec_digest));
            Some((dec, bank))
        }
        None => None,
    };
    Ok(FusedModel {
        dataset,
        basis: params,
        memdec,
        digests,
    })
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(MarnError::Usage(format!(
            "unknown split {other}; expected train, val, or test"
        ))),
    }
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub lambda: f64,
    /// Populated when lambda was tuned on the validation split.
    pub lambda_grid: Option<Vec<(f64, f64)>>,
}

/// Evaluate a split. `tune` selects lambda on the validation split by
/// CIDEr grid search (requires a memory decoder).
pub fn run_eval(
    model: &FusedModel,
    split: &str,
    lambda: f64,
    tune: bool,
    cfg: &RunConfig,
    out: &Path,
) -> Result<EvalOutcome> {
    let split = parse_split(split)?;
    let (lambda, grid) = match (&model.memdec, tune) {
        (Some((dec, bank)), true) => {
            let (best, grid) = tune_lambda(&model.dataset, &model.basis, dec, bank, cfg.decode)?;
            (best, Some(grid))
        }
        (None, true) => {
            return Err(MarnError::Usage(
                "--tune-lambda needs a memory decoder".into(),
            ))
        }
        _ => (lambda, None),
    };
    let memdec = model.memdec.as_ref().map(|(d, b)| (d, b));
    let report = evaluate_corpus(&model.dataset, split, &model.basis, memdec, lambda, cfg.decode)?;
    fs::create_dir_all(out).map_err(|e| MarnError::io(out, e))?;
    write_json(&out.join("eval_report.json"), &report)?;
    write_captions_tsv(&out.join("captions.tsv"), &report)?;
    if let Some(grid) = &grid {
        let grid_map: BTreeMap<String, f64> = grid
            .iter()
            .map(|(l, c)| (format!("{l:.1}"), *c))
            .collect();
        write_json(&out.join("lambda_grid.json"), &grid_map)?;
    }
    let mut cfg_out = cfg.clone();
    cfg_out.lambda = lambda;
    write_run_record(out, "eval", &cfg_out, model.digests.clone())?;
    Ok(EvalOutcome {
        report,
        lambda,
        lambda_grid: grid,
    })
}

/// Decode a split and write `id<TAB>caption` lines.
pub fn run_caption(
    model: &FusedModel,
    split: &str,
    lambda: f64,
    cfg: &RunConfig,
    out: &Path,
) -> Result<PathBuf> {
    let split = parse_split(split)?;
    let memdec = model.memdec.as_ref().map(|(d, b)| (d, b));
    let report = evaluate_corpus(&model.dataset, split, &model.basis, memdec, lambda, cfg.decode)?;
    fs::create_dir_all(out).map_err(|e| MarnError::io(out, e))?;
    let path = out.join("captions.tsv");
    write_captions_tsv(&path, &report)?;
    let mut cfg_out = cfg.clone();
    cfg_out.lambda = lambda;
    write_run_record(out, "caption", &cfg_out, model.digests.clone())?;
    Ok(path)
}

fn write_captions_tsv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = String::new();
    for video in &report.videos {
        text.push_str(&video.id);
        text.push('\t');
        text.push_str(&video.caption);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| MarnError::io(path, e))
}

// ── gradcheck ───────────────────────────────────────────────────────

/// Micro-model gradient check; the CLI exits non-zero when the error is
/// not below 1e-4.
pub fn run_gradcheck(seed: u64) -> Result<f64> {
    Ok(micro_max_error(seed)?)
}
