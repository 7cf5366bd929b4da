use super::{Dropout, LstmIds, Mode, Model, PreparedInput, Segment};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Bidirectional encoder output for one segment, before dropout.
#[derive(Debug, Clone, Copy)]
pub struct EncoderStates {
    /// `[len x 2*hidden]`, forward states then backward states per row.
    pub states: Var,
    /// Forward state at the last position and backward state at the first,
    /// concatenated, `[1 x 2*hidden]`.
    pub summary: Var,
}

/// Interaction-layer intermediates of a pair2seq encoding.
#[derive(Debug, Clone, Copy)]
pub struct Interaction {
    /// `[|p| x |q|]`, rows sum to one.
    pub alpha: Var,
    /// `[|p| x |q|]`, columns sum to one.
    pub beta: Var,
    pub paragraph: Var,
    pub question: Var,
}

/// States one attention reads, with the bilinear keys `W h^T` precomputed.
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    pub states: Var,
    /// `[decoder x len]`.
    pub keys: Var,
}

/// Everything the decoder needs from the encoder, recorded on a tape.
#[derive(Debug, Clone)]
pub struct EncodedInput {
    /// Pre-interaction encoder states, one per segment.
    pub raw: Vec<EncoderStates>,
    pub interaction: Option<Interaction>,
    /// One memory per decoder context: the packed sequence for seq2seq,
    /// paragraph then question for pair2seq.
    pub memories: Vec<Memory>,
    /// Copy keys over every source position, in copy order.
    pub copy_keys: Var,
    pub init_state: Var,
}

/// Tape-free copy of an [`EncodedInput`], used to decode step by step
/// without re-running the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedValues {
    pub memories: Vec<(Tensor, Tensor)>,
    pub copy_keys: Tensor,
    pub init_state: Tensor,
}

impl EncodedValues {
    pub fn capture(tape: &Tape<'_>, enc: &EncodedInput) -> Self {
        Self {
            memories: enc
                .memories
                .iter()
                .map(|m| (tape.value(m.states).clone(), tape.value(m.keys).clone()))
                .collect(),
            copy_keys: tape.value(enc.copy_keys).clone(),
            init_state: tape.value(enc.init_state).clone(),
        }
    }

    /// Records the values as constants on `tape`.
    pub fn load(&self, tape: &mut Tape<'_>) -> Result<EncodedInput> {
        let mut memories = Vec::with_capacity(self.memories.len());
        for (s, k) in &self.memories {
            memories.push(Memory {
                states: tape.constant(s.clone())?,
                keys: tape.constant(k.clone())?,
            });
        }
        Ok(EncodedInput {
            raw: Vec::new(),
            interaction: None,
            memories,
            copy_keys: tape.constant(self.copy_keys.clone())?,
            init_state: tape.constant(self.init_state.clone())?,
        })
    }
}

impl Model {
    /// Input embeddings `word + maxpool(chars) + type`, `[len x embed]`,
    /// without dropout.
    pub fn embed_segment(&self, tape: &mut Tape<'_>, seg: &Segment) -> Result<Var> {
        if seg.is_empty() {
            return Err(Error::Model("empty input sequence".into()));
        }
        if seg.char_ids.len() != seg.len() || seg.type_ids.len() != seg.len() {
            return Err(Error::Model(
                "word, character and type id sequences differ in length".into(),
            ));
        }
        let ids = self.ids();
        let word_table = tape.param(ids.word)?;
        let words = tape.embedding(word_table, &seg.word_ids)?;
        let type_table = tape.param(ids.types)?;
        let types = tape.embedding(type_table, &seg.type_ids)?;
        let mut e = tape.add(words, types)?;

        let flat: Vec<usize> = seg.char_ids.iter().flatten().copied().collect();
        if !flat.is_empty() {
            let mut segments = Vec::with_capacity(seg.len());
            let mut offset = 0;
            for c in &seg.char_ids {
                segments.push((offset, c.len()));
                offset += c.len();
            }
            let char_table = tape.param(ids.chars)?;
            let chars = tape.embedding(char_table, &flat)?;
            let pooled = tape.max_pool_rows(chars, &segments)?;
            e = tape.add(e, pooled)?;
        }
        Ok(e)
    }

    /// Runs one direction of the encoder LSTM over `x` (`[len x embed]`) and
    /// returns the hidden state per position, in position order.
    fn run_lstm(&self, tape: &mut Tape<'_>, cell: &LstmIds, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let len = tape.shape(x)[0];
        let mut proj = Vec::with_capacity(4);
        for k in 0..4 {
            let wx = tape.param(cell.wx[k])?;
            let b = tape.param(cell.b[k])?;
            let xw = tape.matmul(x, wx)?;
            proj.push(tape.add(xw, b)?);
        }
        let wh: Vec<Var> = cell
            .wh
            .iter()
            .map(|&id| tape.param(id))
            .collect::<std::result::Result<_, _>>()?;
        let mut out = vec![None; len];
        let mut prev: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let mut gates = [x; 4];
            for k in 0..4 {
                let mut pre = tape.slice_rows(proj[k], t, 1)?;
                if let Some((h, _)) = prev {
                    let hw = tape.matmul(h, wh[k])?;
                    pre = tape.add(pre, hw)?;
                }
                gates[k] = if k == 2 { tape.tanh(pre)? } else { tape.sigmoid(pre)? };
            }
            let [i, f, g, o] = gates;
            let mut c = tape.mul(i, g)?;
            if let Some((_, c_prev)) = prev {
                let fc = tape.mul(f, c_prev)?;
                c = tape.add(fc, c)?;
            }
            let tc = tape.tanh(c)?;
            let h = tape.mul(o, tc)?;
            out[t] = Some(h);
            prev = Some((h, c));
        }
        Ok(out.into_iter().map(|h| h.expect("every position visited")).collect())
    }

    /// Embeds and encodes one segment with the shared bidirectional LSTM.
    pub fn encode_segment(&self, tape: &mut Tape<'_>, seg: &Segment, dropout: &mut Dropout) -> Result<EncoderStates> {
        let e = self.embed_segment(tape, seg)?;
        let e = dropout.apply(tape, e)?;
        let ids = self.ids();
        let fwd = self.run_lstm(tape, &ids.enc_fwd, e, false)?;
        let bwd = self.run_lstm(tape, &ids.enc_bwd, e, true)?;
        let f = tape.stack_rows(&fwd)?;
        let b = tape.stack_rows(&bwd)?;
        let states = tape.concat_cols(&[f, b])?;
        let summary = tape.concat_cols(&[*fwd.last().unwrap(), bwd[0]])?;
        Ok(EncoderStates { states, summary })
    }

    /// Question-aware paragraph states and paragraph-aware question states.
    pub fn interact(&self, tape: &mut Tape<'_>, hp: Var, hq: Var) -> Result<Interaction> {
        let inter = self
            .ids()
            .inter
            .clone()
            .ok_or_else(|| Error::Model("interaction layer requires a pair2seq model".into()))?;
        let w = tape.param(inter.score)?;
        let hq_t = tape.transpose(hq)?;
        let hpw = tape.matmul(hp, w)?;
        let scores = tape.matmul(hpw, hq_t)?;
        let alpha = tape.row_softmax(scores)?;
        let scores_t = tape.transpose(scores)?;
        let beta_t = tape.row_softmax(scores_t)?;
        let beta = tape.transpose(beta_t)?;

        let hp_att = tape.matmul(alpha, hq)?;
        let hq_att = tape.matmul(beta_t, hp)?;
        let paragraph = self.project(tape, hp, hp_att, inter.wp, inter.bp)?;
        let question = self.project(tape, hq, hq_att, inter.wq, inter.bq)?;
        Ok(Interaction {
            alpha,
            beta,
            paragraph,
            question,
        })
    }

    fn project(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        attended: Var,
        w: crate::tensor::ParamId,
        b: crate::tensor::ParamId,
    ) -> Result<Var> {
        let cat = tape.concat_cols(&[h, attended])?;
        let w = tape.param(w)?;
        let b = tape.param(b)?;
        let z = tape.matmul(cat, w)?;
        let z = tape.add(z, b)?;
        Ok(tape.tanh(z)?)
    }

    fn memory(&self, tape: &mut Tape<'_>, w: Var, states: Var) -> Result<Memory> {
        let st = tape.transpose(states)?;
        let keys = tape.matmul(w, st)?;
        Ok(Memory { states, keys })
    }

    /// Encodes the input and computes the initial decoder state.
    pub fn encode(&self, tape: &mut Tape<'_>, input: &PreparedInput, dropout: &mut Dropout) -> Result<EncodedInput> {
        if input.mode != self.mode() {
            return Err(Error::Model(format!(
                "{} input given to a {} model",
                input.mode,
                self.mode()
            )));
        }
        if input.vocab_size != self.vocab_size() {
            return Err(Error::Model(format!(
                "input prepared for vocabulary of {} entries, model has {}",
                input.vocab_size,
                self.vocab_size()
            )));
        }
        let expected = match input.mode {
            Mode::Seq2Seq => 1,
            Mode::Pair2Seq => 2,
        };
        if input.segments.len() != expected {
            return Err(Error::Model(format!(
                "{} input needs {expected} segments, found {}",
                input.mode,
                input.segments.len()
            )));
        }
        let total: usize = input.segments.iter().map(Segment::len).sum();
        if input.copy_ext_ids.len() != total {
            return Err(Error::Model("copy positions do not cover the source".into()));
        }

        let mut raw = Vec::with_capacity(input.segments.len());
        for seg in &input.segments {
            raw.push(self.encode_segment(tape, seg, dropout)?);
        }
        let ids = self.ids();
        let attn = tape.param(ids.attn)?;
        let copy = tape.param(ids.copy)?;

        let (interaction, memories, copy_states) = match input.mode {
            Mode::Seq2Seq => {
                let h = dropout.apply(tape, raw[0].states)?;
                (None, vec![self.memory(tape, attn, h)?], h)
            }
            Mode::Pair2Seq => {
                let hp = dropout.apply(tape, raw[0].states)?;
                let hq = dropout.apply(tape, raw[1].states)?;
                let inter = self.interact(tape, hp, hq)?;
                let mp = self.memory(tape, attn, inter.paragraph)?;
                let mq = self.memory(tape, attn, inter.question)?;
                let copy_states = tape.stack_rows(&[inter.question, inter.paragraph])?;
                (Some(inter), vec![mp, mq], copy_states)
            }
        };
        let cst = tape.transpose(copy_states)?;
        let copy_keys = tape.matmul(copy, cst)?;

        // The decoder starts from the question encoder in pair2seq and from
        // the packed sequence in seq2seq.
        let summary = raw.last().unwrap().summary;
        let w = tape.param(ids.init_w)?;
        let b = tape.param(ids.init_b)?;
        let z = tape.matmul(summary, w)?;
        let z = tape.add(z, b)?;
        let init_state = tape.tanh(z)?;

        Ok(EncodedInput {
            raw,
            interaction,
            memories,
            copy_keys,
            init_state,
        })
    }

    /// Value-level encoding with dropout disabled.
    pub fn encode_values(&self, input: &PreparedInput) -> Result<EncodedValues> {
        let mut tape = Tape::with_params(self.params());
        let enc = self.encode(&mut tape, input, &mut Dropout::disabled())?;
        Ok(EncodedValues::capture(&tape, &enc))
    }
}
