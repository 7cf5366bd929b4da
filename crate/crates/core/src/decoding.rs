//! Beam search and greedy decoding over the mixture distribution.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::DatasetError;
use crate::model::{EncodedValues, Model, PreparedInput, StateValues};
use crate::text::{Vocab, BOS, EOS, PAD, SEP, UNK};
use crate::{Error, Result};

/// Vocabulary ids that are never emitted.
pub const SUPPRESSED: [usize; 4] = [PAD, UNK, BOS, SEP];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Longest output, EOS included.
    pub max_len: usize,
    /// Final ranking by `log_prob / len^alpha` when set.
    pub length_penalty: Option<f64>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len: 50,
            length_penalty: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Extended ids; ends with EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
    pub state: StateValues,
}

impl Hypothesis {
    /// Surface tokens without the trailing EOS.
    pub fn words(&self, vocab: &Vocab, input: &PreparedInput) -> Vec<String> {
        self.tokens
            .iter()
            .filter(|&&t| t != EOS)
            .map(|&t| input.surface(vocab, t).to_string())
            .collect()
    }

    fn ranking_score(&self, penalty: Option<f64>) -> f64 {
        match penalty {
            Some(alpha) if !self.tokens.is_empty() => self.log_prob / (self.tokens.len() as f64).powf(alpha),
            _ => self.log_prob,
        }
    }
}

/// Log-probabilities of one step with the suppressed ids set to `-inf`.
pub fn step_log_probs(dist: &[f64]) -> Vec<f64> {
    let mut lp: Vec<f64> = dist
        .iter()
        .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
        .collect();
    for id in SUPPRESSED {
        if id < lp.len() {
            lp[id] = f64::NEG_INFINITY;
        }
    }
    lp
}

fn start(model: &Model, input: &PreparedInput) -> Result<(EncodedValues, StateValues)> {
    let enc = model.encode_values(input)?;
    let state = model.initial_state_values(&enc);
    Ok((enc, state))
}

/// Beam search returning finished hypotheses best first. Expansion stops
/// once `beam_size` hypotheses have finished or after `max_len` tokens;
/// when nothing finished, the surviving partial hypotheses are returned.
pub fn beam_search(model: &Model, input: &PreparedInput, config: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if config.beam_size == 0 {
        return Err(Error::Invalid("beam size must be at least 1".into()));
    }
    if config.max_len == 0 {
        return Err(Error::Invalid("maximum length must be at least 1".into()));
    }
    let (enc, state) = start(model, input)?;
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        state,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..config.max_len {
        // (score, hypothesis index, token id)
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut states = Vec::with_capacity(alive.len());
        for (h, hyp) in alive.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let out = model.step_values(input, &enc, &hyp.state, prev)?;
            for (t, lp) in step_log_probs(&out.final_dist).into_iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    candidates.push((hyp.log_prob + lp, h, t));
                }
            }
            states.push(out.state);
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::new();
        let slots = config.beam_size.saturating_sub(finished.len()).max(1);
        for &(score, h, t) in candidates.iter().take(slots) {
            let mut tokens = alive[h].tokens.clone();
            tokens.push(t);
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
                finished: t == EOS,
                state: states[h].clone(),
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if finished.len() >= config.beam_size || alive.is_empty() {
            break;
        }
    }

    let mut out = if finished.is_empty() { alive } else { finished };
    out.sort_by(|a, b| {
        b.ranking_score(config.length_penalty)
            .partial_cmp(&a.ranking_score(config.length_penalty))
            .unwrap_or(Ordering::Equal)
    });
    Ok(out)
}

/// Argmax decoding after suppression, ties to the lowest id. Stops at EOS
/// or after `max_len` tokens.
pub fn greedy_decode(model: &Model, input: &PreparedInput, max_len: usize) -> Result<Hypothesis> {
    let (enc, mut state) = start(model, input)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < max_len {
        let prev = tokens.last().copied().unwrap_or(BOS);
        let out = model.step_values(input, &enc, &state, prev)?;
        let lp = step_log_probs(&out.final_dist);
        let mut best = 0;
        for (t, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = t;
            }
        }
        log_prob += lp[best];
        tokens.push(best);
        state = out.state;
        if best == EOS {
            break;
        }
    }
    let finished = tokens.last() == Some(&EOS);
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished,
        state,
    })
}

/// Sum of teacher-forced log mixture probabilities of `tokens`.
pub fn score_sequence(model: &Model, input: &PreparedInput, tokens: &[usize]) -> Result<f64> {
    let (enc, mut state) = start(model, input)?;
    let mut prev = BOS;
    let mut total = 0.0;
    for &t in tokens {
        let out = model.step_values(input, &enc, &state, prev)?;
        total += out.final_dist.get(t).copied().unwrap_or(0.0).ln();
        state = out.state;
        prev = t;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Generations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<String>,
    pub log_prob: f64,
}

pub fn to_generations(hyps: &[Hypothesis], vocab: &Vocab, input: &PreparedInput) -> Vec<Generation> {
    hyps.iter()
        .map(|h| Generation {
            tokens: h.words(vocab, input),
            log_prob: h.log_prob,
        })
        .collect()
}

/// Drops generations identical to the source question (lowercased token
/// equality), keeping order.
pub fn filter_outputs(gens: Vec<Generation>, source: &[String]) -> Vec<Generation> {
    let source: Vec<String> = source.iter().map(|t| t.to_lowercase()).collect();
    gens.into_iter()
        .filter(|g| g.tokens.len() != source.len() || g.tokens.iter().zip(&source).any(|(a, b)| a.to_lowercase() != *b))
        .collect()
}

/// One generated question for a source question.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub log_prob: f64,
}

/// `id<TAB>question<TAB>log_prob` lines.
pub fn write_generation_file(records: &[GenerationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}",
            r.id.replace(['\t', '\n'], " "),
            r.tokens.join(" "),
            r.log_prob
        );
    }
    s
}

pub fn read_generation_file(path: &Path) -> std::result::Result<Vec<GenerationRecord>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let err = |line: usize, msg: String| DatasetError::PairFile {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(
                i + 1,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let log_prob = fields[2]
            .parse()
            .map_err(|_| err(i + 1, format!("bad log-probability {:?}", fields[2])))?;
        out.push(GenerationRecord {
            id: fields[0].to_string(),
            tokens: fields[1]
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect(),
            log_prob,
        });
    }
    Ok(out)
}
