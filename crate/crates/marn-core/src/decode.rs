//! Greedy and beam caption generation over the fused next-word
//! distribution.

use alloc::vec;
use alloc::vec::Vec;

use crate::basis::{
    build_context, gru_step, predict_word, project_features, BasisParams, BasisVars,
    ProjectedFeatures,
};
use crate::data::{VideoFeatures, BOS, EOS};
use crate::error::{CoreError, Result};
use crate::memdec::{
    check_distribution, fuse_probabilities, step_scores, word_static, FusionConfig, MemDecParams,
    MemDecVars, MemoryVars,
};
use crate::memory::MemoryBank;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One next-token distribution source. `step` consumes the previous token
/// and returns the distribution over the next one plus the advanced state.
pub trait StepModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn start(&mut self) -> Result<Self::State>;
    fn step(&mut self, state: &Self::State, prev_token: usize) -> Result<(Vec<f64>, Self::State)>;
}

/// Argmax with ties broken by the lowest index.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate().skip(1) {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `<bos>`: repeatedly take the argmax of the fused
/// distribution, stopping at `<eos>` or when the sequence (including
/// `<bos>`) reaches `max_len` tokens.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<Vec<usize>> {
    if max_len < 2 {
        return Err(CoreError::Config("max_len must be >= 2".into()));
    }
    let mut state = model.start()?;
    let mut seq = vec![BOS];
    while seq.len() < max_len {
        let (p, next_state) = model.step(&state, *seq.last().unwrap())?;
        let next = argmax(&p);
        seq.push(next);
        state = next_state;
        if next == EOS {
            break;
        }
    }
    Ok(seq)
}

/// A partial or finished beam candidate.
#[derive(Clone)]
pub struct BeamHypothesis<S> {
    pub tokens: Vec<usize>,
    /// Sum of per-step natural-log probabilities; non-increasing in length.
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

/// Length-unnormalized beam search; `beam_width` = 1 reproduces
/// [`greedy_decode`] exactly, including tie-breaking.
pub fn beam_decode<M: StepModel>(
    model: &mut M,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if beam_width < 1 {
        return Err(CoreError::Config("beam_width must be >= 1".into()));
    }
    if max_len < 2 {
        return Err(CoreError::Config("max_len must be >= 2".into()));
    }
    let start = model.start()?;
    let mut beam = vec![BeamHypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        state: start,
        finished: false,
    }];
    loop {
        let expandable = beam
            .iter()
            .any(|h| !h.finished && h.tokens.len() < max_len);
        if !expandable {
            break;
        }
        let mut candidates: Vec<BeamHypothesis<M::State>> = Vec::new();
        for hyp in &beam {
            if hyp.finished || hyp.tokens.len() >= max_len {
                candidates.push(hyp.clone());
                continue;
            }
            let (p, next_state) = model.step(&hyp.state, *hyp.tokens.last().unwrap())?;
            for (tok, &prob) in p.iter().enumerate() {
                if prob <= 0.0 {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(BeamHypothesis {
                    tokens,
                    log_prob: hyp.log_prob + libm::log(prob),
                    state: next_state.clone(),
                    finished: tok == EOS,
                });
            }
        }
        // Stable sort keeps enumeration order on ties, matching greedy's
        // lowest-index rule at width 1.
        candidates.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        candidates.truncate(beam_width);
        beam = candidates;
    }
    Ok(beam
        .into_iter()
        .next()
        .map(|h| h.tokens)
        .unwrap_or_else(|| vec![BOS, EOS]))
}

/// Decoder state carried between steps of the model-backed steppers.
#[derive(Clone)]
pub struct HiddenState {
    h: Vec<f64>,
}

/// Fused captioning model over one video: the basis decoder plus an
/// optional attended memory decoder mixed with weight lambda.
pub struct VideoStepper<'a> {
    params: &'a BasisParams,
    lambda: f64,
    tape: Tape,
    vars: BasisVars,
    proj: ProjectedFeatures,
    memory: Option<MemStepper>,
}

struct MemStepper {
    vars: MemDecVars,
    static_mat: Var,
}

impl<'a> VideoStepper<'a> {
    /// Basis-only decoding (P_b).
    pub fn basis(params: &'a BasisParams, video: &VideoFeatures) -> Result<Self> {
        Self::build(params, None, 0.0, video)
    }

    /// Fused decoding: P = (1 - lambda) P_b + lambda P_m.
    pub fn fused(
        params: &'a BasisParams,
        memdec: &MemDecParams,
        bank: &MemoryBank,
        fusion: FusionConfig,
        video: &VideoFeatures,
    ) -> Result<Self> {
        Self::build(params, Some((memdec, bank)), fusion.lambda, video)
    }

    fn build(
        params: &'a BasisParams,
        memdec: Option<(&MemDecParams, &MemoryBank)>,
        lambda: f64,
        video: &VideoFeatures,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let proj = project_features(&mut tape, &vars, video)?;
        let memory = match memdec {
            Some((mp, bank)) => {
                let mvars = mp.register(&mut tape, false);
                let mem = MemoryVars::register(&mut tape, bank, false);
                let static_mat = word_static(&mut tape, &mvars, &mem)?;
                Some(MemStepper {
                    vars: mvars,
                    static_mat,
                })
            }
            None => None,
        };
        Ok(VideoStepper {
            params,
            lambda,
            tape,
            vars,
            proj,
            memory,
        })
    }
}

impl StepModel for VideoStepper<'_> {
    type State = HiddenState;

    fn vocab_size(&self) -> usize {
        self.params.dims.vocab
    }

    fn start(&mut self) -> Result<HiddenState> {
        Ok(HiddenState {
            h: vec![0.0; self.params.dims.hidden],
        })
    }

    fn step(&mut self, state: &HiddenState, prev_token: usize) -> Result<(Vec<f64>, HiddenState)> {
        let tape = &mut self.tape;
        let h_prev = tape.constant(Tensor::vector(state.h.clone()));
        let ctx = build_context(tape, &self.vars, h_prev, &self.proj)?;
        let e_prev = tape.column(self.vars.embed, prev_token)?;
        let h_next = gru_step(tape, &self.vars, h_prev, ctx.c, e_prev)?;
        let pb_var = predict_word(tape, &self.vars, h_next)?;
        let p_b = tape.data(pb_var).to_vec();
        let probs = match &self.memory {
            Some(mem) => {
                let q = step_scores(
                    tape,
                    &mem.vars,
                    mem.static_mat,
                    ctx.c,
                    e_prev,
                    h_prev,
                )?;
                let pm_var = tape.softmax(q)?;
                let p_m = tape.data(pm_var).to_vec();
                fuse_probabilities(&p_b, &p_m, FusionConfig::new(self.lambda)?)?
            }
            None => {
                check_distribution("P_b", &p_b)?;
                p_b
            }
        };
        Ok((
            probs,
            HiddenState {
                h: tape.data(h_next).to_vec(),
            },
        ))
    }
}
