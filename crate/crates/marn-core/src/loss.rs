//! Caption negative log likelihood, the attention-coherent penalty on
//! adjacent 2D attention weights, and their weighted combination.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};

/// L_c = -sum_t log P(w_t): natural log, summed over the caption's steps.
pub fn caption_nll(tape: &mut Tape, probs: &[Var], targets: &[usize]) -> Result<Var> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(CoreError::Contract(alloc::format!(
            "caption_nll wants aligned non-empty steps, got {} probs / {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let mut logs = Vec::with_capacity(probs.len());
    for (&p, &t) in probs.iter().zip(targets) {
        logs.push(tape.pick_log(p, t)?);
    }
    let stacked = tape.stack(&logs)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, -1.0))
}

/// L_a = sum_t sum_{i=2..L} |a_{i,t} - a_{i-1,t}| over the 2D rows only.
/// Rows with fewer than 2 entries contribute 0.
pub fn attention_coherent_loss(tape: &mut Tape, rows2d: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(rows2d.len());
    for &row in rows2d {
        if tape.value(row).len() < 2 {
            terms.push(tape.scalar(0.0));
            continue;
        }
        let diff = tape.adjacent_diff(row)?;
        let mag = tape.abs(diff);
        terms.push(tape.sum(mag));
    }
    if terms.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let stacked = tape.stack(&terms)?;
    Ok(tape.sum(stacked))
}

/// L = L_c + beta * L_a.
pub fn combined_loss(tape: &mut Tape, l_c: Var, l_a: Var, beta: f64) -> Result<Var> {
    if beta < 0.0 {
        return Err(CoreError::Config(alloc::format!("beta {beta} must be >= 0")));
    }
    let weighted = tape.scale(l_a, beta);
    tape.add(l_c, weighted)
}

/// Plain total variation sum_i |a_i - a_{i-1}| of one attention row.
pub fn row_total_variation(row: &[f64]) -> f64 {
    row.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}
