use super::{Dropout, EncodedInput, EncodedValues, Model, PreparedInput};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::UNK;
use crate::{Error, Result};

/// Decoder recurrence on a tape: LSTM hidden and cell state plus the
/// previous context vector(s).
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub contexts: Vec<Var>,
}

/// Tape-free decoder state, carried between inference steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StateValues {
    pub h: Tensor,
    pub c: Tensor,
    pub contexts: Vec<Tensor>,
}

impl StateValues {
    pub fn capture(tape: &Tape<'_>, s: &DecoderState) -> Self {
        Self {
            h: tape.value(s.h).clone(),
            c: tape.value(s.c).clone(),
            contexts: s.contexts.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }

    pub fn load(&self, tape: &mut Tape<'_>) -> Result<DecoderState> {
        Ok(DecoderState {
            h: tape.constant(self.h.clone())?,
            c: tape.constant(self.c.clone())?,
            contexts: self
                .contexts
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect::<std::result::Result<_, _>>()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: DecoderState,
    /// Attention weights per memory, `[1 x len]` each.
    pub attention: Vec<Var>,
    /// `[1 x 1]`.
    pub gate: Var,
    /// `[1 x vocab]`.
    pub p_vocab: Var,
    /// `[1 x source positions]`, in copy order.
    pub copy: Var,
    /// `[1 x extended vocab]`.
    pub final_dist: Var,
}

/// Values of one inference step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepValues {
    pub state: StateValues,
    pub gate: f64,
    pub p_vocab: Vec<f64>,
    pub copy: Vec<f64>,
    pub final_dist: Vec<f64>,
}

/// `g * [p_vocab; 0] + (1 - g) * scatter(copy)`, where copy position `i`
/// adds its mass to extended id `copy_ids[i]`.
pub fn mixture(
    tape: &mut Tape<'_>,
    p_vocab: Var,
    gate: Var,
    copy: Var,
    copy_ids: &[usize],
    width: usize,
) -> Result<Var> {
    let v = tape.shape(p_vocab).last().copied().unwrap_or(0);
    let vocab_index: Vec<usize> = (0..v).collect();
    let gen = tape.scatter_cols(p_vocab, &vocab_index, width)?;
    let cp = tape.scatter_cols(copy, copy_ids, width)?;
    let neg = tape.scale(gate, -1.0)?;
    let one = tape.constant(Tensor::scalar(1.0))?;
    let rest = tape.add(neg, one)?;
    let a = tape.mul(gen, gate)?;
    let b = tape.mul(cp, rest)?;
    Ok(tape.add(a, b)?)
}

impl Model {
    /// Initial decoder state: `h = s0`, zero cell and zero contexts.
    pub fn init_decoder(&self, tape: &mut Tape<'_>, enc: &EncodedInput) -> Result<DecoderState> {
        let s = self.config().dims.state();
        let c = tape.zeros(1, s)?;
        let contexts = (0..self.mode().contexts())
            .map(|_| tape.zeros(1, s))
            .collect::<std::result::Result<_, _>>()?;
        Ok(DecoderState {
            h: enc.init_state,
            c,
            contexts,
        })
    }

    /// One decoder step consuming the previous token `prev` (an extended
    /// id; ids outside the vocabulary are fed as UNK).
    pub fn decode_step(
        &self,
        tape: &mut Tape<'_>,
        input: &PreparedInput,
        enc: &EncodedInput,
        state: &DecoderState,
        prev: usize,
        dropout: &mut Dropout,
    ) -> Result<StepOutput> {
        if enc.memories.len() != state.contexts.len() {
            return Err(Error::Model(
                "decoder state and encoding disagree on context count".into(),
            ));
        }
        let ids = self.ids();
        let y = if prev < self.vocab_size() { prev } else { UNK };
        let table = tape.param(ids.word)?;
        let y = tape.embedding(table, &[y])?;
        let y = dropout.apply(tape, y)?;
        let mut parts = vec![y];
        parts.extend(&state.contexts);
        let x = tape.concat_cols(&parts)?;

        let mut gates = [x; 4];
        for (k, gate) in gates.iter_mut().enumerate() {
            let wx = tape.param(ids.dec.wx[k])?;
            let wh = tape.param(ids.dec.wh[k])?;
            let b = tape.param(ids.dec.b[k])?;
            let xw = tape.matmul(x, wx)?;
            let hw = tape.matmul(state.h, wh)?;
            let pre = tape.add(xw, hw)?;
            let pre = tape.add(pre, b)?;
            *gate = if k == 2 { tape.tanh(pre)? } else { tape.sigmoid(pre)? };
        }
        let [i, f, g, o] = gates;
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        // Dropout on the step output only; the recurrence carries `h`.
        let s = dropout.apply(tape, h)?;

        let mut attention = Vec::with_capacity(enc.memories.len());
        let mut contexts = Vec::with_capacity(enc.memories.len());
        for m in &enc.memories {
            let scores = tape.matmul(s, m.keys)?;
            let w = tape.row_softmax(scores)?;
            contexts.push(tape.matmul(w, m.states)?);
            attention.push(w);
        }
        let mut feat = vec![s];
        feat.extend(&contexts);
        let feat = tape.concat_cols(&feat)?;

        let wv = tape.param(ids.out_w)?;
        let bv = tape.param(ids.out_b)?;
        let logits = tape.matmul(feat, wv)?;
        let logits = tape.add(logits, bv)?;
        let p_vocab = tape.row_softmax(logits)?;

        let wg = tape.param(ids.gate_w)?;
        let bg = tape.param(ids.gate_b)?;
        let z = tape.matmul(feat, wg)?;
        let z = tape.add(z, bg)?;
        let gate = tape.sigmoid(z)?;

        let copy_scores = tape.matmul(s, enc.copy_keys)?;
        let copy = tape.row_softmax(copy_scores)?;
        let final_dist = mixture(tape, p_vocab, gate, copy, &input.copy_ext_ids, input.extended_size())?;

        Ok(StepOutput {
            state: DecoderState { h, c, contexts },
            attention,
            gate,
            p_vocab,
            copy,
            final_dist,
        })
    }

    pub fn initial_state_values(&self, enc: &EncodedValues) -> StateValues {
        let s = self.config().dims.state();
        StateValues {
            h: enc.init_state.clone(),
            c: Tensor::zeros(vec![1, s]),
            contexts: vec![Tensor::zeros(vec![1, s]); self.mode().contexts()],
        }
    }

    /// One inference step on a fresh tape, dropout disabled.
    pub fn step_values(
        &self,
        input: &PreparedInput,
        enc: &EncodedValues,
        state: &StateValues,
        prev: usize,
    ) -> Result<StepValues> {
        let mut tape = Tape::with_params(self.params());
        let e = enc.load(&mut tape)?;
        let st = state.load(&mut tape)?;
        let out = self.decode_step(&mut tape, input, &e, &st, prev, &mut Dropout::disabled())?;
        Ok(StepValues {
            state: StateValues::capture(&tape, &out.state),
            gate: tape.scalar(out.gate),
            p_vocab: tape.value(out.p_vocab).values.clone(),
            copy: tape.value(out.copy).values.clone(),
            final_dist: tape.value(out.final_dist).values.clone(),
        })
    }
}
