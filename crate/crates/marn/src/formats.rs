//! Binary containers (little-endian throughout):
//!
//! - MARNF feature files: magic "MARN", version, id, category, dims, then
//!   f32 frame and clip features.
//! - MARNC checkpoints: named parameter blocks with rank + extents and f32
//!   payloads; the 64-bit FNV-1a digest of the block section identifies a
//!   checkpoint in the pipeline's digest chain.
//! - MARNM memory files: per-word occurrence count, g, e, u runs.
//!
//! Values are stored as f32 and widened back to f64 on load, so round
//! trips are bit-exact at 32-bit precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use marn_core::basis::{BasisParams, Dims};
use marn_core::data::VideoFeatures;
use marn_core::memdec::{MemDecDims, MemDecParams};
use marn_core::memory::{MemoryBank, MemoryEntry};
use marn_core::tensor::Tensor;
use marn_core::CoreError;

use crate::error::{MarnError, Result};

pub const FEATURES_MAGIC: &[u8; 4] = b"MARN";
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MARNC";
pub const MEMORY_MAGIC: &[u8; 5] = b"MARNM";
pub const FORMAT_VERSION: u32 = 1;

// ── byte-level reader with offset tracking ──────────────────────────

struct Reader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| MarnError::io(path, e))?;
        Ok(Reader {
            path,
            bytes,
            pos: 0,
        })
    }

    fn corrupt(&self, msg: impl Into<String>) -> MarnError {
        MarnError::Corrupt {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn format(&self, msg: impl Into<String>) -> MarnError {
        MarnError::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(format!(
                "wanted {n} bytes of {what}, only {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?.to_vec();
        String::from_utf8(b).map_err(|_| self.corrupt(format!("{what} is not UTF-8")))
    }

    fn f32_run(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32_run(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MarnError::io(path, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| MarnError::io(path, e))
}

// ── MARNF feature files ─────────────────────────────────────────────

pub fn save_features(path: &Path, video: &VideoFeatures) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURES_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_string(&mut out, &video.id);
    let category = video.category.map_or(-1, |c| c as i32);
    out.extend_from_slice(&category.to_le_bytes());
    put_u32(&mut out, video.frame_dim() as u32);
    put_u32(&mut out, video.frame_count() as u32);
    put_u32(&mut out, video.clip_dim() as u32);
    put_u32(&mut out, video.clip_count() as u32);
    put_f32_run(&mut out, video.f2d.data());
    put_f32_run(&mut out, video.f3d.data());
    write_file(path, &out)
}

pub fn load_features(path: &Path) -> Result<VideoFeatures> {
    let mut r = Reader::open(path)?;
    let magic = r.take(4, "magic")?;
    if magic != FEATURES_MAGIC {
        return Err(r.format("bad magic, not a MARNF feature file"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(r.format(format!("unsupported version {version}")));
    }
    let id = r.string("video id")?;
    let category = r.i32("category")?;
    let d = r.u32("d")? as usize;
    let l = r.u32("L")? as usize;
    let c = r.u32("c")? as usize;
    let n = r.u32("N")? as usize;
    if d == 0 || l == 0 || c == 0 || n == 0 {
        return Err(r.format(format!(
            "empty feature section (d={d}, L={l}, c={c}, N={n}); all must be >= 1"
        )));
    }
    let f2d = r.f32_run(l * d, "frame features")?;
    let f3d = r.f32_run(n * c, "clip features")?;
    r.finish()?;
    let category = if category < 0 {
        None
    } else {
        Some(category as u32)
    };
    let video = VideoFeatures::new(
        id,
        Tensor::new(vec![l, d], f2d).map_err(MarnError::Core)?,
        Tensor::new(vec![n, c], f3d).map_err(MarnError::Core)?,
        category,
    )?;
    Ok(video)
}

// ── FNV-1a ──────────────────────────────────────────────────────────

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

// ── MARNC checkpoint containers ─────────────────────────────────────

fn encode_blocks(blocks: &[(&'static str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, tensor) in blocks {
        put_string(&mut out, name);
        put_u32(&mut out, tensor.shape().len() as u32);
        for &e in tensor.shape() {
            put_u32(&mut out, e as u32);
        }
        put_f32_run(&mut out, tensor.data());
    }
    out
}

/// Write a checkpoint container; returns the FNV-1a digest of its block
/// section.
pub fn save_checkpoint(path: &Path, blocks: &[(&'static str, &Tensor)]) -> Result<u64> {
    let payload = encode_blocks(blocks);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, blocks.len() as u32);
    out.extend_from_slice(&payload);
    write_file(path, &out)?;
    Ok(fnv1a(&payload))
}

/// Named blocks of a checkpoint container plus the digest of the block
/// section.
pub fn load_checkpoint_blocks(path: &Path) -> Result<(Vec<(String, Tensor)>, u64)> {
    let mut r = Reader::open(path)?;
    let magic = r.take(5, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(r.format("bad magic, not a MARNC checkpoint"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(r.format(format!("unsupported version {version}")));
    }
    let count = r.u32("block count")? as usize;
    let digest_start = r.pos;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("block name")?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f32_run(len, "block payload")?;
        blocks.push((
            name,
            Tensor::new(shape, data).map_err(MarnError::Core)?,
        ));
    }
    r.finish()?;
    let digest = fnv1a(&r.bytes[digest_start..]);
    Ok((blocks, digest))
}

fn block_map(blocks: Vec<(String, Tensor)>) -> std::collections::BTreeMap<String, Tensor> {
    blocks.into_iter().collect()
}

pub fn save_basis(path: &Path, params: &BasisParams) -> Result<u64> {
    save_checkpoint(path, &params.blocks())
}

/// Load basis parameters, rebuilding dims from block shapes.
pub fn load_basis(path: &Path) -> Result<(BasisParams, u64)> {
    let (blocks, digest) = load_checkpoint_blocks(path)?;
    let mut map = block_map(blocks);
    let shape_of = |map: &std::collections::BTreeMap<String, Tensor>, name: &str| -> Result<Vec<usize>> {
        map.get(name)
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| MarnError::Format {
                path: path.to_path_buf(),
                msg: format!("missing parameter block {name}"),
            })
    };
    let m_f = shape_of(&map, "enc/m_f")?;
    let m_v = shape_of(&map, "enc/m_v")?;
    let embed = shape_of(&map, "embed")?;
    let att_b1 = shape_of(&map, "att/b1")?;
    let b_z = shape_of(&map, "gru/b_z")?;
    let dims = Dims {
        m: m_f[0],
        hidden: b_z[0],
        attn: att_b1[0],
        embed: embed[0],
        vocab: embed[1],
        feat2d: m_f[1],
        feat3d: m_v[1],
    };
    let params = BasisParams::from_blocks(dims, |name| {
        map.remove(name)
            .ok_or_else(|| CoreError::Lookup(format!("missing parameter block {name}")))
    })?;
    for (name, tensor) in params.blocks() {
        if !tensor.all_finite() {
            return Err(MarnError::Format {
                path: path.to_path_buf(),
                msg: format!("block {name} holds non-finite values"),
            });
        }
    }
    Ok((params, digest))
}

pub fn save_memdec(path: &Path, params: &MemDecParams) -> Result<u64> {
    save_checkpoint(path, &params.blocks())
}

/// Load memory-decoder parameters; `vocab` comes from the basis checkpoint.
pub fn load_memdec(path: &Path, vocab: usize) -> Result<(MemDecParams, u64)> {
    let (blocks, digest) = load_checkpoint_blocks(path)?;
    let mut map = block_map(blocks);
    let need = |map: &std::collections::BTreeMap<String, Tensor>, name: &str| -> Result<Vec<usize>> {
        map.get(name)
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| MarnError::Format {
                path: path.to_path_buf(),
                msg: format!("missing parameter block {name}"),
            })
    };
    let b = need(&map, "memdec/b")?;
    let w_c = need(&map, "memdec/w_c")?;
    let w_g = need(&map, "memdec/w_g")?;
    let w_e = need(&map, "memdec/w_e")?;
    let w_h = need(&map, "memdec/w_h")?;
    let u_dim = map.get("memdec/w_u").map_or(0, |t| t.shape()[1]);
    let dims = MemDecDims {
        attn: b[0],
        m: w_g[1],
        hidden: w_h[1],
        embed: w_e[1],
        vocab,
        u_dim,
    };
    if w_c[1] != 2 * dims.m {
        return Err(MarnError::Format {
            path: path.to_path_buf(),
            msg: format!("memdec/w_c wants {} columns, found {}", 2 * dims.m, w_c[1]),
        });
    }
    let params = MemDecParams::from_blocks(dims, |name| {
        map.remove(name)
            .ok_or_else(|| CoreError::Lookup(format!("missing parameter block {name}")))
    })?;
    Ok((params, digest))
}

// ── MARNM memory files ──────────────────────────────────────────────

/// Write a memory bank; returns the FNV-1a digest of the entry section.
pub fn save_memory(path: &Path, bank: &MemoryBank) -> Result<u64> {
    let mut payload = Vec::new();
    for entry in &bank.entries {
        put_u32(&mut payload, entry.occurrence_count);
        put_f32_run(&mut payload, &entry.g);
        put_f32_run(&mut payload, &entry.e);
        put_f32_run(&mut payload, &entry.u);
    }
    let mut out = Vec::new();
    out.extend_from_slice(MEMORY_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, bank.entries.len() as u32);
    put_u32(&mut out, bank.m as u32);
    put_u32(&mut out, bank.embed as u32);
    put_u32(&mut out, bank.u_dim as u32);
    put_u32(&mut out, bank.k as u32);
    out.extend_from_slice(&payload);
    write_file(path, &out)?;
    Ok(fnv1a(&payload))
}

pub fn load_memory(path: &Path) -> Result<(MemoryBank, u64)> {
    let mut r = Reader::open(path)?;
    let magic = r.take(5, "magic")?;
    if magic != MEMORY_MAGIC {
        return Err(r.format("bad magic, not a MARNM memory file"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(r.format(format!("unsupported version {version}")));
    }
    let k_words = r.u32("K")? as usize;
    let m = r.u32("m")? as usize;
    let embed = r.u32("embed dim")? as usize;
    let u_dim = r.u32("u dim")? as usize;
    let top_k = r.u32("top-k")? as usize;
    if k_words == 0 || top_k == 0 {
        return Err(r.format("K and top-k must be >= 1"));
    }
    let digest_start = r.pos;
    let mut entries = Vec::with_capacity(k_words);
    for word_id in 0..k_words {
        let occurrence_count = r.u32("occurrence count")?;
        let g = r.f32_run(m, "visual context")?;
        let e = r.f32_run(embed, "embedding")?;
        let u = r.f32_run(u_dim, "auxiliary")?;
        entries.push(MemoryEntry {
            word_id,
            g,
            e,
            u,
            occurrence_count,
        });
    }
    r.finish()?;
    let digest = fnv1a(&r.bytes[digest_start..]);
    Ok((
        MemoryBank {
            entries,
            k: top_k,
            m,
            embed,
            u_dim,
        },
        digest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use marn_core::basis::BasisParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn f32_video(id: &str, l: usize, d: usize, n: usize, c: usize, seed: u64) -> VideoFeatures {
        // Values representable exactly in f32 so round trips are bitwise.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |count: usize| -> Vec<f64> {
            (0..count)
                .map(|_| rng.gen_range(-2.0f32..2.0) as f64)
                .collect()
        };
        VideoFeatures::new(
            id.into(),
            Tensor::new(vec![l, d], gen(l * d)).unwrap(),
            Tensor::new(vec![n, c], gen(n * c)).unwrap(),
            Some(3),
        )
        .unwrap()
    }

    #[test]
    fn features_round_trip_bit_exactly() {
        let dir = tempdir().unwrap();
        for i in 0..100 {
            let video = f32_video(&format!("vid{i}"), 3 + i % 4, 6, 1 + i % 3, 4, i as u64);
            let path = dir.path().join(format!("{i}.marnf"));
            save_features(&path, &video).unwrap();
            let back = load_features(&path).unwrap();
            assert_eq!(back, video);
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.marnf");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        match load_features(&path) {
            Err(MarnError::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_byte_offset() {
        let dir = tempdir().unwrap();
        let video = f32_video("v", 4, 6, 1, 4, 9);
        let path = dir.path().join("v.marnf");
        save_features(&path, &video).unwrap();
        // Drop one frame row (claimed L=4, payload holds 3).
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() - 4 * 4 - 6 * 4; // one clip row + one frame row
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match load_features(&path) {
            Err(MarnError::Corrupt { offset, .. }) => assert!(offset > 0),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn empty_clip_section_is_rejected() {
        let dir = tempdir().unwrap();
        let video = f32_video("v", 2, 3, 1, 2, 10);
        let path = dir.path().join("v.marnf");
        save_features(&path, &video).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Header layout: magic(4) version(4) idlen(4) id(1) cat(4) d(4) L(4) c(4) N(4).
        let n_offset = 4 + 4 + 4 + 1 + 4 + 4 + 4 + 4;
        bytes[n_offset..n_offset + 4].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(n_offset + 4 + 2 * 3 * 4); // keep only the 2D payload
        std::fs::write(&path, &bytes).unwrap();
        match load_features(&path) {
            Err(MarnError::Format { msg, .. }) => assert!(msg.contains("N=0")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_params_and_digest() {
        let dims = Dims {
            m: 6,
            hidden: 5,
            attn: 4,
            embed: 7,
            vocab: 9,
            feat2d: 8,
            feat3d: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Narrow to f32 before saving so equality is exact.
        let mut params = BasisParams::init(dims, &mut rng);
        for (_, t) in params.blocks_mut() {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        let dir = tempdir().unwrap();
        let path = dir.path().join("basis.marnc");
        let digest = save_basis(&path, &params).unwrap();
        let (back, load_digest) = load_basis(&path).unwrap();
        assert_eq!(digest, load_digest);
        assert_eq!(back.dims, dims);
        assert_eq!(back, params);
        // Re-saving produces the identical digest.
        let again = save_basis(&dir.path().join("b2.marnc"), &back).unwrap();
        assert_eq!(again, digest);
    }

    #[test]
    fn memory_round_trip_is_exact_at_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let entries: Vec<MemoryEntry> = (0..9)
            .map(|w| MemoryEntry {
                word_id: w,
                g: (0..6).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect(),
                e: (0..7).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect(),
                u: (0..3).map(|_| rng.gen_range(0.0f32..1.0) as f64).collect(),
                occurrence_count: rng.gen_range(0..40),
            })
            .collect();
        let bank = MemoryBank {
            entries,
            k: 3,
            m: 6,
            embed: 7,
            u_dim: 3,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("memory.marnm");
        let digest = save_memory(&path, &bank).unwrap();
        let (back, load_digest) = load_memory(&path).unwrap();
        assert_eq!(digest, load_digest);
        assert_eq!(back, bank);
    }

    #[test]
    fn fnv1a_reference_values() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }
}
