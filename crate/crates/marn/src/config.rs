//! Run configuration: defaults, JSON config files, and flag overrides.
//! The fully resolved config is serialized into every output directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use marn_core::eval::DecodeConfig;
use marn_core::synth::SynthConfig;
use marn_core::train::TrainConfig;

use crate::error::{MarnError, Result};

/// Model widths (feature dims come from the data).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DimsConfig {
    pub m: usize,
    pub hidden: usize,
    pub attn: usize,
    pub embed: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        // Desk-scale defaults; the "paper" preset switches to 512-wide.
        DimsConfig {
            m: 64,
            hidden: 64,
            attn: 64,
            embed: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// "desk" (default) or "paper" (512-wide dims, attention tunable over
    /// {256, 384, 512}).
    pub preset: Option<String>,
    pub dims: DimsConfig,
    pub train: TrainConfig,
    pub lambda: f64,
    /// Top-k truncation for memory construction.
    pub k: usize,
    pub min_count: u32,
    pub decode: DecodeConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            preset: None,
            dims: DimsConfig::default(),
            train: TrainConfig::default(),
            lambda: 0.5,
            k: 3,
            min_count: 1,
            decode: DecodeConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub k: Option<usize>,
    pub dims: Option<(usize, usize, usize, usize)>,
    pub epochs: Option<u32>,
    pub beam: Option<usize>,
    pub preset: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MarnError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| MarnError::json(path, e))
    }

    /// Resolve: optional config file, then preset, then flag overrides.
    pub fn resolve(config_path: Option<&Path>, over: &Overrides) -> Result<Self> {
        let mut cfg = match config_path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(preset) = over.preset.clone().or(cfg.preset.clone()) {
            match preset.as_str() {
                "desk" => {}
                "paper" => {
                    cfg.dims = DimsConfig {
                        m: 512,
                        hidden: 512,
                        attn: 512,
                        embed: 512,
                    };
                    cfg.min_count = 3;
                }
                other => {
                    return Err(MarnError::Usage(format!(
                        "unknown preset {other}; expected desk or paper"
                    )))
                }
            }
            cfg.preset = Some(preset);
        }
        if let Some(seed) = over.seed {
            cfg.seed = seed;
            cfg.train.seed = seed;
            cfg.synth.seed = seed;
        }
        if let Some(lambda) = over.lambda {
            cfg.lambda = lambda;
        }
        if let Some(beta) = over.beta {
            cfg.train.beta = beta;
        }
        if let Some(k) = over.k {
            cfg.k = k;
        }
        if let Some((m, hidden, attn, embed)) = over.dims {
            cfg.dims = DimsConfig {
                m,
                hidden,
                attn,
                embed,
            };
        }
        if let Some(epochs) = over.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(beam) = over.beam {
            cfg.decode.beam_width = beam;
        }
        if !(0.0..=1.0).contains(&cfg.lambda) {
            return Err(MarnError::Usage(format!(
                "lambda {} outside [0, 1]",
                cfg.lambda
            )));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| MarnError::json(path, e))?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| MarnError::io(path, e))?;
        }
        fs::write(path, json).map_err(|e| MarnError::io(path, e))
    }
}

/// Parse the `--dims m,H,A,d'` flag.
pub fn parse_dims(s: &str) -> std::result::Result<(usize, usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected m,H,A,d' (4 integers), got {s}"));
    }
    let mut vals = [0usize; 4];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .map_err(|_| format!("{p} is not a positive integer"))?;
        if *v == 0 {
            return Err("dims must be positive".into());
        }
    }
    Ok((vals[0], vals[1], vals[2], vals[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn overrides_take_precedence_over_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let file_cfg = RunConfig {
            seed: 5,
            lambda: 0.2,
            ..RunConfig::default()
        };
        file_cfg.save(&path).unwrap();
        let over = Overrides {
            seed: Some(9),
            lambda: Some(0.7),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(Some(&path), &over).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.lambda, 0.7);
    }

    #[test]
    fn paper_preset_sets_wide_dims() {
        let over = Overrides {
            preset: Some("paper".into()),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(None, &over).unwrap();
        assert_eq!(cfg.dims.m, 512);
        assert_eq!(cfg.dims.hidden, 512);
        assert_eq!(cfg.min_count, 3);
    }

    #[test]
    fn dims_flag_parses_four_parts() {
        assert_eq!(parse_dims("8,16,4,32").unwrap(), (8, 16, 4, 32));
        assert!(parse_dims("8,16,4").is_err());
        assert!(parse_dims("8,16,4,x").is_err());
        assert!(parse_dims("8,0,4,2").is_err());
    }

    #[test]
    fn bad_lambda_is_a_usage_error() {
        let over = Overrides {
            lambda: Some(1.5),
            ..Overrides::default()
        };
        match RunConfig::resolve(None, &over) {
            Err(MarnError::Usage(_)) => {}
            other => panic!("expected usage error, got {other:?}"),
        }
    }
}
