//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare analytic gradients of a deterministic scalar function against
/// central differences with step `h`, returning the max relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates of all parameters.
///
/// The builder receives one leaf var per parameter, in order.
pub fn grad_check<F>(build: F, params: &mut [Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(CoreError::Config(alloc::format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }

    let eval = |params: &[Tensor], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p, grad)).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss);
        if !value.is_scalar() {
            return Err(CoreError::Contract("grad_check loss must be scalar".into()));
        }
        let value = value.item();
        if !grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        Ok((
            value,
            Some(vars.iter().map(|&v| grads.get(v).to_vec()).collect()),
        ))
    };

    let (l0, analytic) = eval(params, true)?;
    let (l1, _) = eval(params, false)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(CoreError::Contract(
            "function is not deterministic: two evaluations differ".into(),
        ));
    }
    let analytic = analytic.expect("grad pass");

    let mut max_err = 0.0f64;
    for pi in 0..params.len() {
        #[allow(clippy::needless_range_loop)] // ci indexes both the perturbed param and analytic
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            params[pi].data_mut()[ci] = orig + h;
            let (lp, _) = eval(params, false)?;
            params[pi].data_mut()[ci] = orig - h;
            let (lm, _) = eval(params, false)?;
            params[pi].data_mut()[ci] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[pi][ci];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Finite-difference check of the combined basis loss and the memory loss
/// on the standard micro model (m = H = A = d' = 8, K = 12, L = 6, N = 2,
/// k = 2), returning the worse of the two max relative errors.
pub fn micro_max_error(seed: u64) -> Result<f64> {
    use crate::basis::{forward_teacher_forced, BasisParams, BasisVars, Dims};
    use crate::data::Split;
    use crate::loss::{attention_coherent_loss, caption_nll, combined_loss};
    use crate::memdec::{relevance_scores, MemDecDims, MemDecParams, MemDecVars, MemoryVars};
    use crate::memory::assemble_memory;
    use crate::synth::{generate, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let synth = generate(&SynthConfig {
        seed,
        n_videos: 10,
        n_concepts: 8,
        d: 10,
        c: 7,
        min_segments: 2,
        max_segments: 2,
        frames_per_segment: 3,
        val_videos: 1,
        test_videos: 1,
        min_count: 1,
        ..SynthConfig::default()
    })?;
    let ds = synth.dataset;
    let dims = Dims {
        m: 8,
        hidden: 8,
        attn: 8,
        embed: 8,
        vocab: ds.vocab.len(),
        feat2d: 10,
        feat3d: 7,
    };
    debug_assert_eq!(dims.vocab, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6172);
    let basis = BasisParams::init(dims, &mut rng);
    let ci = ds.caption_indices(Split::Train)[0];
    let caption = ds.captions[ci].clone();
    let video = ds.video(&caption.video_id)?.clone();

    let mut tensors: Vec<Tensor> = basis.blocks().into_iter().map(|(_, t)| t.clone()).collect();
    let combined_err = grad_check(
        |tape, vars| {
            let bvars = BasisVars::from_slice(vars);
            let pass = forward_teacher_forced(tape, &bvars, &video, &caption)?;
            let lc = caption_nll(tape, &pass.pb, &pass.targets)?;
            let la = attention_coherent_loss(tape, &pass.w2d)?;
            combined_loss(tape, lc, la, 0.1)
        },
        &mut tensors,
        1e-5,
    )?;

    let bank = assemble_memory(&basis, &ds, 2)?;
    let mut tape = Tape::new();
    let bvars = basis.register(&mut tape, false);
    let pass = forward_teacher_forced(&mut tape, &bvars, &video, &caption)?;
    let ctx: Vec<Vec<f64>> = pass.ctx.iter().map(|&v| tape.data(v).to_vec()).collect();
    let e_prev: Vec<Vec<f64>> = pass.e_prev.iter().map(|&v| tape.data(v).to_vec()).collect();
    let h_prev: Vec<Vec<f64>> = pass.h_prev.iter().map(|&v| tape.data(v).to_vec()).collect();
    let targets = pass.targets.clone();

    let memdec = MemDecParams::init(
        MemDecDims {
            attn: dims.attn,
            m: dims.m,
            hidden: dims.hidden,
            embed: dims.embed,
            vocab: dims.vocab,
            u_dim: bank.u_dim,
        },
        &mut rng,
    );
    let has_u = memdec.w_u.is_some();
    let mut mem_tensors: Vec<Tensor> =
        memdec.blocks().into_iter().map(|(_, t)| t.clone()).collect();
    let memory_err = grad_check(
        |tape, vars| {
            let expected = if has_u { 8 } else { 7 };
            debug_assert_eq!(vars.len(), expected);
            let mvars = MemDecVars {
                v: vars[0],
                w_c: vars[1],
                w_g: vars[2],
                w_e_prev: vars[3],
                w_e: vars[4],
                w_h: vars[5],
                w_u: has_u.then(|| vars[6]),
                b: vars[expected - 1],
            };
            let mem = MemoryVars::register(tape, &bank, false);
            let mut pm = Vec::new();
            for t in 0..targets.len() {
                let c = tape.constant(Tensor::vector(ctx[t].clone()));
                let e = tape.constant(Tensor::vector(e_prev[t].clone()));
                let h = tape.constant(Tensor::vector(h_prev[t].clone()));
                let q = relevance_scores(tape, &mvars, &mem, c, e, h)?;
                pm.push(tape.softmax(q)?);
            }
            caption_nll(tape, &pm, &targets)
        },
        &mut mem_tensors,
        1e-5,
    )?;
    Ok(combined_err.max(memory_err))
}
