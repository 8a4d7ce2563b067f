//! Two-stage training: the basis decoder minimizes L_c + beta * L_a with
//! Adam, gradient value clipping, and the stepped LR schedule; the memory
//! decoder then minimizes the P_m negative log likelihood with the basis
//! and the memory bank frozen. Both stages retain the checkpoint that
//! scores best on validation CIDEr.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{first_non_finite, forward_teacher_forced, AttentionMap, BasisParams, Dims};
use crate::data::{Dataset, Split};
use crate::error::{CoreError, Result};
use crate::eval::{evaluate_corpus, DecodeConfig};
use crate::loss::{attention_coherent_loss, caption_nll, combined_loss, row_total_variation};
use crate::memdec::{MemDecDims, MemDecParams, MemoryVars};
use crate::memory::MemoryBank;
use crate::optim::{lr_at_epoch, AdamState};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_every: u32,
    pub clip: (f64, f64),
    /// AC-loss weight.
    pub beta: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many epochs (the final epoch always validates).
    pub val_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            base_lr: 1e-3,
            lr_decay: 0.5,
            decay_every: 50,
            clip: (-5.0, 5.0),
            beta: 0.1,
            batch_size: 16,
            seed: 0,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.decay_every < 1 || self.val_every < 1 {
            return Err(CoreError::Config("epochs/decay_every/val_every must be >= 1".into()));
        }
        if self.base_lr <= 0.0 || self.batch_size < 1 {
            return Err(CoreError::Config("base_lr and batch_size must be positive".into()));
        }
        if self.beta < 0.0 {
            return Err(CoreError::Config("beta must be >= 0".into()));
        }
        if self.clip.0 >= self.clip.1 {
            return Err(CoreError::Config("empty clip interval".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    /// Mean per-caption caption NLL.
    pub loss_caption: f64,
    /// Mean per-caption AC loss.
    pub loss_attention: f64,
    /// Mean per-caption combined loss.
    pub loss_total: f64,
    pub val_cider: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were retained (latest maximizer of
    /// validation CIDEr).
    pub selected_epoch: u32,
    pub selected_val_cider: f64,
}

fn non_finite_diagnostic(blocks: &[(&'static str, &Tensor)], loss: f64) -> CoreError {
    let which = first_non_finite(blocks).unwrap_or_else(|| String::from("loss"));
    CoreError::Numeric(alloc::format!(
        "non-finite training state at {which} (batch loss {loss})"
    ))
}

/// Train the basis decoder on the train split, minimizing
/// L_c + beta * L_a. Deterministic for a fixed config.
pub fn train_basis(
    dataset: &Dataset,
    dims: Dims,
    config: &TrainConfig,
) -> Result<(BasisParams, TrainReport)> {
    config.validate()?;
    let train_captions = dataset.caption_indices(Split::Train);
    if train_captions.is_empty() || dataset.videos_in(Split::Val).len() < 2 {
        return Err(CoreError::Contract(
            "need a non-empty train split and >= 2 val videos (CIDEr selection)".into(),
        ));
    }
    if dims.vocab != dataset.vocab.len() {
        return Err(CoreError::Config(alloc::format!(
            "dims.vocab {} != dataset vocabulary {}",
            dims.vocab,
            dataset.vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = BasisParams::init(dims, &mut rng);
    let sizes: Vec<usize> = params.blocks().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::new(&sizes, config.base_lr)?;

    let mut report = TrainReport {
        epochs: Vec::with_capacity(config.epochs as usize),
        selected_epoch: 0,
        selected_val_cider: f64::NEG_INFINITY,
    };
    let mut best: Option<BasisParams> = None;
    let mut order = train_captions;

    for epoch in 1..=config.epochs {
        adam.learning_rate = lr_at_epoch(config.base_lr, config.lr_decay, config.decay_every, epoch);
        order.shuffle(&mut rng);
        let mut sum_lc = 0.0;
        let mut sum_la = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &ci in chunk {
                let caption = &dataset.captions[ci];
                let video = dataset.video(&caption.video_id)?;
                let mut tape = Tape::new();
                let vars = params.register(&mut tape, true);
                let pass = forward_teacher_forced(&mut tape, &vars, video, caption)?;
                let lc = caption_nll(&mut tape, &pass.pb, &pass.targets)?;
                let la = attention_coherent_loss(&mut tape, &pass.w2d)?;
                let total = combined_loss(&mut tape, lc, la, config.beta)?;
                let loss_value = tape.value(total).item();
                if !loss_value.is_finite() {
                    return Err(non_finite_diagnostic(&params.blocks(), loss_value));
                }
                sum_lc += tape.value(lc).item();
                sum_la += tape.value(la).item();
                let sample_grads = tape.backward(total)?;
                let vars_order = params.register_order(&vars);
                for (acc, &var) in grads.iter_mut().zip(&vars_order) {
                    for (a, &g) in acc.iter_mut().zip(sample_grads.get(var)) {
                        *a += g;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
            let mut blocks = params.blocks_mut();
            let mut tensors: Vec<&mut Tensor> = blocks.iter_mut().map(|(_, t)| &mut **t).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut tensors, &grad_refs, config.clip)?;
        }
        let n = order.len() as f64;
        let (mean_lc, mean_la) = (sum_lc / n, sum_la / n);
        let mut record = EpochRecord {
            epoch,
            lr: adam.learning_rate,
            loss_caption: mean_lc,
            loss_attention: mean_la,
            loss_total: mean_lc + config.beta * mean_la,
            val_cider: None,
        };
        if epoch % config.val_every == 0 || epoch == config.epochs {
            let val = evaluate_corpus(
                dataset,
                Split::Val,
                &params,
                None,
                0.0,
                DecodeConfig::default(),
            )?;
            record.val_cider = Some(val.cider);
            // >= keeps the latest maximizer.
            if val.cider >= report.selected_val_cider {
                report.selected_val_cider = val.cider;
                report.selected_epoch = epoch;
                best = Some(params.clone());
            }
        }
        report.epochs.push(record);
    }
    Ok((best.unwrap_or(params), report))
}

impl BasisParams {
    /// The vars of a registration, in block order (gradient bookkeeping).
    pub fn register_order(&self, vars: &crate::basis::BasisVars) -> Vec<crate::tape::Var> {
        vec![
            vars.m_f, vars.b_f, vars.m_v, vars.b_v, vars.embed, vars.gru_w_z, vars.gru_u_z,
            vars.gru_b_z, vars.gru_w_r, vars.gru_u_r, vars.gru_b_r, vars.gru_w_c, vars.gru_u_c,
            vars.gru_b_c, vars.att_w1, vars.att_b1, vars.att_w2, vars.out_w, vars.out_b,
        ]
    }
}

impl MemDecParams {
    pub fn register_order(&self, vars: &crate::memdec::MemDecVars) -> Vec<crate::tape::Var> {
        let mut out = vec![
            vars.v,
            vars.w_c,
            vars.w_g,
            vars.w_e_prev,
            vars.w_e,
            vars.w_h,
        ];
        if let Some(w_u) = vars.w_u {
            out.push(w_u);
        }
        out.push(vars.b);
        out
    }
}

/// Frozen per-step inputs to the memory decoder for one caption, computed
/// once from the trained basis decoder.
struct FrozenSteps {
    targets: Vec<usize>,
    ctx: Vec<Vec<f64>>,
    e_prev: Vec<Vec<f64>>,
    h_prev: Vec<Vec<f64>>,
}

/// Train the memory decoder by minimizing -sum log P_m(w_t) with the basis
/// decoder and memory bank held fixed. Validation decodes with lambda = 1.
pub fn train_memory_decoder(
    basis: &BasisParams,
    bank: &MemoryBank,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(MemDecParams, TrainReport)> {
    config.validate()?;
    let train_captions = dataset.caption_indices(Split::Train);
    if train_captions.is_empty() || dataset.videos_in(Split::Val).len() < 2 {
        return Err(CoreError::Contract(
            "need a non-empty train split and >= 2 val videos (CIDEr selection)".into(),
        ));
    }
    if bank.entries.len() != basis.dims.vocab || bank.m != basis.dims.m {
        return Err(CoreError::Contract(
            "memory bank does not match the basis decoder".into(),
        ));
    }

    // The basis is frozen, so its per-step contexts are constants of the
    // whole stage: compute them once.
    let mut frozen: Vec<FrozenSteps> = Vec::with_capacity(train_captions.len());
    for &ci in &train_captions {
        let caption = &dataset.captions[ci];
        let video = dataset.video(&caption.video_id)?;
        let mut tape = Tape::new();
        let vars = basis.register(&mut tape, false);
        let pass = forward_teacher_forced(&mut tape, &vars, video, caption)?;
        frozen.push(FrozenSteps {
            targets: pass.targets.clone(),
            ctx: pass.ctx.iter().map(|&v| tape.data(v).to_vec()).collect(),
            e_prev: pass.e_prev.iter().map(|&v| tape.data(v).to_vec()).collect(),
            h_prev: pass.h_prev.iter().map(|&v| tape.data(v).to_vec()).collect(),
        });
    }

    let mdims = MemDecDims {
        attn: basis.dims.attn,
        m: basis.dims.m,
        hidden: basis.dims.hidden,
        embed: basis.dims.embed,
        vocab: basis.dims.vocab,
        u_dim: bank.u_dim,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = MemDecParams::init(mdims, &mut rng);
    let sizes: Vec<usize> = params.blocks().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::new(&sizes, config.base_lr)?;

    let mut report = TrainReport {
        epochs: Vec::with_capacity(config.epochs as usize),
        selected_epoch: 0,
        selected_val_cider: f64::NEG_INFINITY,
    };
    let mut best: Option<MemDecParams> = None;
    let mut order: Vec<usize> = (0..frozen.len()).collect();

    for epoch in 1..=config.epochs {
        adam.learning_rate = lr_at_epoch(config.base_lr, config.lr_decay, config.decay_every, epoch);
        order.shuffle(&mut rng);
        let mut sum_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &fi in chunk {
                let steps = &frozen[fi];
                let mut tape = Tape::new();
                let vars = params.register(&mut tape, true);
                let mem = MemoryVars::register(&mut tape, bank, false);
                let static_mat = crate::memdec::word_static(&mut tape, &vars, &mem)?;
                let mut pm = Vec::with_capacity(steps.targets.len());
                for t in 0..steps.targets.len() {
                    let c = tape.constant(Tensor::vector(steps.ctx[t].clone()));
                    let e = tape.constant(Tensor::vector(steps.e_prev[t].clone()));
                    let h = tape.constant(Tensor::vector(steps.h_prev[t].clone()));
                    let q = crate::memdec::step_scores(&mut tape, &vars, static_mat, c, e, h)?;
                    pm.push(tape.softmax(q)?);
                }
                let loss = caption_nll(&mut tape, &pm, &steps.targets)?;
                let loss_value = tape.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(non_finite_diagnostic(&params.blocks(), loss_value));
                }
                sum_loss += loss_value;
                let sample_grads = tape.backward(loss)?;
                let vars_order = params.register_order(&vars);
                for (acc, &var) in grads.iter_mut().zip(&vars_order) {
                    for (a, &g) in acc.iter_mut().zip(sample_grads.get(var)) {
                        *a += g;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
            let mut blocks = params.blocks_mut();
            let mut tensors: Vec<&mut Tensor> = blocks.iter_mut().map(|(_, t)| &mut **t).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut tensors, &grad_refs, config.clip)?;
        }
        let mut record = EpochRecord {
            epoch,
            lr: adam.learning_rate,
            loss_caption: sum_loss / order.len() as f64,
            loss_attention: 0.0,
            loss_total: sum_loss / order.len() as f64,
            val_cider: None,
        };
        if epoch % config.val_every == 0 || epoch == config.epochs {
            let val = evaluate_corpus(
                dataset,
                Split::Val,
                basis,
                Some((&params, bank)),
                1.0,
                DecodeConfig::default(),
            )?;
            record.val_cider = Some(val.cider);
            if val.cider >= report.selected_val_cider {
                report.selected_val_cider = val.cider;
                report.selected_epoch = epoch;
                best = Some(params.clone());
            }
        }
        report.epochs.push(record);
    }
    Ok((best.unwrap_or(params), report))
}

/// Teacher-forced mean per-token NLL of a split under fixed parameters.
pub fn mean_token_nll(dataset: &Dataset, split: Split, params: &BasisParams) -> Result<f64> {
    let mut total = 0.0;
    let mut steps = 0usize;
    for &ci in &dataset.caption_indices(split) {
        let caption = &dataset.captions[ci];
        let video = dataset.video(&caption.video_id)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let pass = forward_teacher_forced(&mut tape, &vars, video, caption)?;
        let lc = caption_nll(&mut tape, &pass.pb, &pass.targets)?;
        total += tape.value(lc).item();
        steps += pass.targets.len();
    }
    if steps == 0 {
        return Err(CoreError::Contract("split has no captions".into()));
    }
    Ok(total / steps as f64)
}

/// Mean per-row total variation of 2D attention over a split's
/// teacher-forced passes (the statistic the AC loss pushes down).
pub fn mean_attention_tv(dataset: &Dataset, split: Split, params: &BasisParams) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for &ci in &dataset.caption_indices(split) {
        let caption = &dataset.captions[ci];
        let video = dataset.video(&caption.video_id)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let pass = forward_teacher_forced(&mut tape, &vars, video, caption)?;
        let map = AttentionMap::from_pass(&tape, &pass);
        for row in &map.a2d {
            total += row_total_variation(row);
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(CoreError::Contract("split has no captions".into()));
    }
    Ok(total / rows as f64)
}
