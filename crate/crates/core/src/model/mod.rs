//! Sequence-to-sequence and pair-to-sequence generators.
//!
//! Both share the input embedding (word + max-pooled characters + token
//! type), a single-layer bidirectional LSTM encoder and an LSTM decoder
//! with bilinear attention, a vocabulary distribution, a copy distribution
//! over source positions and a sigmoid gate mixing the two.
//!
//! The pair-to-sequence variant encodes paragraph and question separately
//! with the same encoder weights, lets them attend to each other in an
//! interaction layer, and decodes with one context per side.

mod decoder;
mod encoder;
mod input;

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::{Vocab, CHAR_VOCAB_SIZE};
use crate::{Error, Result};

pub use decoder::{mixture, DecoderState, StateValues, StepOutput, StepValues};
pub use encoder::{EncodedInput, EncodedValues, EncoderStates, Interaction, Memory};
pub use input::{map_targets, prepare_input, PreparedInput, Segment, UNREACHABLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Seq2Seq,
    Pair2Seq,
}

impl Mode {
    /// Number of encoder contexts the decoder consumes.
    pub fn contexts(self) -> usize {
        match self {
            Mode::Seq2Seq => 1,
            Mode::Pair2Seq => 2,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Seq2Seq => "seq2seq",
            Mode::Pair2Seq => "pair2seq",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq2seq" => Ok(Mode::Seq2Seq),
            "pair2seq" => Ok(Mode::Pair2Seq),
            _ => Err(Error::Invalid(format!(
                "unknown mode {s:?} (expected seq2seq or pair2seq)"
            ))),
        }
    }
}

/// Embedding size and per-direction encoder hidden size. Encoder states
/// and the decoder state are both `2 * hidden` wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub embed: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embed: 300,
            hidden: 150,
        }
    }
}

impl ModelDims {
    pub fn state(&self) -> usize {
        2 * self.hidden
    }
}

impl FromStr for ModelDims {
    type Err = Error;

    /// Parses `"<embed>/<hidden>"`, e.g. `8/4`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("bad dims {s:?} (expected <embed>/<hidden>)"));
        let (e, h) = s.split_once('/').ok_or_else(bad)?;
        let dims = Self {
            embed: e.trim().parse().map_err(|_| bad())?,
            hidden: h.trim().parse().map_err(|_| bad())?,
        };
        if dims.embed == 0 || dims.hidden == 0 {
            return Err(bad());
        }
        Ok(dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub dims: ModelDims,
    pub vocab_size: usize,
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

/// Gate order: input, forget, cell candidate, output.
const GATES: [&str; 4] = ["i", "f", "g", "o"];

#[derive(Debug, Clone)]
pub(crate) struct LstmIds {
    pub wx: [ParamId; 4],
    pub wh: [ParamId; 4],
    pub b: [ParamId; 4],
}

#[derive(Debug, Clone)]
pub(crate) struct InteractionIds {
    pub score: ParamId,
    pub wp: ParamId,
    pub bp: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIds {
    pub word: ParamId,
    pub chars: ParamId,
    pub types: ParamId,
    pub enc_fwd: LstmIds,
    pub enc_bwd: LstmIds,
    pub dec: LstmIds,
    /// Attention bilinear, stored `[decoder x state]`: score = s W h^T.
    pub attn: ParamId,
    pub copy: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub inter: Option<InteractionIds>,
}

/// Every parameter name with its shape, in registration order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let e = cfg.dims.embed;
    let h = cfg.dims.hidden;
    let s = cfg.dims.state();
    let v = cfg.vocab_size;
    let feat = s + cfg.mode.contexts() * s;
    let dec_in = e + cfg.mode.contexts() * s;
    let mut out = vec![
        ("embed.word".to_string(), vec![v, e]),
        ("embed.char".to_string(), vec![CHAR_VOCAB_SIZE, e]),
        ("embed.type".to_string(), vec![crate::text::TokenType::COUNT, e]),
    ];
    let lstm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, hidden: usize| {
        for g in GATES {
            out.push((format!("{prefix}.{g}.wx"), vec![input, hidden]));
            out.push((format!("{prefix}.{g}.wh"), vec![hidden, hidden]));
            out.push((format!("{prefix}.{g}.b"), vec![1, hidden]));
        }
    };
    lstm(&mut out, "encoder.fwd", e, h);
    lstm(&mut out, "encoder.bwd", e, h);
    lstm(&mut out, "decoder", dec_in, s);
    out.extend([
        ("attention.w".to_string(), vec![s, s]),
        ("copy.w".to_string(), vec![s, s]),
        ("output.w".to_string(), vec![feat, v]),
        ("output.b".to_string(), vec![1, v]),
        ("gate.w".to_string(), vec![feat, 1]),
        ("gate.b".to_string(), vec![1, 1]),
        ("init.w".to_string(), vec![s, s]),
        ("init.b".to_string(), vec![1, s]),
    ]);
    if cfg.mode == Mode::Pair2Seq {
        out.extend([
            ("interaction.score".to_string(), vec![s, s]),
            ("interaction.wp".to_string(), vec![2 * s, s]),
            ("interaction.bp".to_string(), vec![1, s]),
            ("interaction.wq".to_string(), vec![2 * s, s]),
            ("interaction.bq".to_string(), vec![1, s]),
        ]);
    }
    out
}

fn resolve(params: &ParamStore, cfg: &ModelConfig) -> Result<ParamIds> {
    let expected = layout(cfg);
    if params.len() != expected.len() {
        return Err(Error::Model(format!(
            "expected {} parameter tensors for {} model, found {}",
            expected.len(),
            cfg.mode,
            params.len()
        )));
    }
    for (name, shape) in &expected {
        let id = params
            .id(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))?;
        if &params.get(id).shape != shape {
            return Err(Error::Model(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                params.get(id).shape
            )));
        }
    }
    let id = |n: &str| params.id(n).unwrap();
    let lstm = |prefix: &str| LstmIds {
        wx: GATES.map(|g| id(&format!("{prefix}.{g}.wx"))),
        wh: GATES.map(|g| id(&format!("{prefix}.{g}.wh"))),
        b: GATES.map(|g| id(&format!("{prefix}.{g}.b"))),
    };
    Ok(ParamIds {
        word: id("embed.word"),
        chars: id("embed.char"),
        types: id("embed.type"),
        enc_fwd: lstm("encoder.fwd"),
        enc_bwd: lstm("encoder.bwd"),
        dec: lstm("decoder"),
        attn: id("attention.w"),
        copy: id("copy.w"),
        out_w: id("output.w"),
        out_b: id("output.b"),
        gate_w: id("gate.w"),
        gate_b: id("gate.b"),
        init_w: id("init.w"),
        init_b: id("init.b"),
        inter: (cfg.mode == Mode::Pair2Seq).then(|| InteractionIds {
            score: id("interaction.score"),
            wp: id("interaction.wp"),
            bp: id("interaction.bp"),
            wq: id("interaction.wq"),
            bq: id("interaction.bq"),
        }),
    })
}

/// Default range of the uniform parameter initialization.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
}

impl Model {
    /// Fresh model with every parameter drawn from uniform(-0.1, 0.1).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init_range(config, seed, INIT_RANGE)
    }

    pub fn with_init_range(config: ModelConfig, seed: u64, range: f64) -> Result<Self> {
        if config.vocab_size < crate::text::SPECIAL_TOKENS.len() {
            return Err(Error::Model(format!(
                "vocabulary of {} entries is too small",
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in layout(&config) {
            let n = shape.iter().product();
            let values = (0..n).map(|_| rng.gen_range(-range..=range)).collect();
            params.add(name, Tensor::new(shape, values)?);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let ids = resolve(&params, &config)?;
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub(crate) fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    /// Overwrites word-embedding rows from a text file of
    /// `token v1 .. v_embed` lines. A vocabulary token takes the vector of
    /// an exact match, otherwise of the first line whose lowercased token
    /// matches. Returns how many rows were set.
    pub fn load_pretrained<R: BufRead>(&mut self, vocab: &Vocab, reader: R) -> Result<usize> {
        let dim = self.config.dims.embed;
        let id = self.ids.word;
        let mut assigned = vec![0u8; vocab.len()]; // 0 unset, 1 case-folded, 2 exact
        for line in reader.lines() {
            let line = line?;
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() <= dim {
                continue;
            }
            let token = fields[..fields.len() - dim].join(" ");
            let Ok(values) = fields[fields.len() - dim..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
            else {
                continue;
            };
            if values.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let (row, rank) = match vocab.id(&token) {
                Some(r) => (r, 2),
                None => match vocab.id(&token.to_lowercase()) {
                    Some(r) => (r, 1),
                    None => continue,
                },
            };
            if assigned[row] >= rank || (rank == 1 && assigned[row] != 0) {
                continue;
            }
            assigned[row] = rank;
            self.params.get_mut(id).values[row * dim..(row + 1) * dim].copy_from_slice(&values);
        }
        Ok(assigned.iter().filter(|&&a| a > 0).count())
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Dropout applied to embedding outputs and hidden outputs. Each call draws
/// its mask from a seed derived from the base seed and a call counter, so a
/// forward pass is reproducible given the base seed.
#[derive(Debug, Clone)]
pub struct Dropout {
    keep: f64,
    seed: u64,
    calls: u64,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self {
            keep: 1.0,
            seed: 0,
            calls: 0,
        }
    }

    /// `rate` is the drop probability.
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            keep: 1.0 - rate,
            seed,
            calls: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.keep < 1.0
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if !self.is_active() {
            return Ok(x);
        }
        self.calls += 1;
        let seed = mix_seed(self.seed, self.calls);
        Ok(tape.dropout(x, self.keep, seed)?)
    }
}

/// SplitMix64 finalizer over the pair.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: Mode) -> ModelConfig {
        ModelConfig {
            mode,
            dims: ModelDims {
                embed: 300,
                hidden: 150,
            },
            vocab_size: 50,
        }
    }

    #[test]
    fn default_shapes() {
        let m = Model::new(cfg(Mode::Pair2Seq), 1).unwrap();
        let p = m.params();
        let shape = |n: &str| p.get(p.id(n).unwrap()).shape.clone();
        assert_eq!(shape("embed.word"), vec![50, 300]);
        assert_eq!(shape("embed.char"), vec![97, 300]);
        assert_eq!(shape("embed.type"), vec![3, 300]);
        assert_eq!(shape("encoder.fwd.i.wx"), vec![300, 150]);
        assert_eq!(shape("decoder.o.wh"), vec![300, 300]);
        assert_eq!(shape("attention.w"), vec![300, 300]);
        assert_eq!(shape("copy.w"), vec![300, 300]);
        assert_eq!(shape("interaction.wp"), vec![600, 300]);
        assert_eq!(shape("interaction.wq"), vec![600, 300]);
        assert_eq!(shape("output.w"), vec![900, 50]);
        assert_eq!(shape("gate.w"), vec![900, 1]);
        let s = Model::new(cfg(Mode::Seq2Seq), 1).unwrap();
        assert!(s.param_id("interaction.wp").is_none());
        assert_eq!(s.params().get(s.param_id("output.w").unwrap()).shape, vec![600, 50]);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = Model::new(cfg(Mode::Seq2Seq), 3).unwrap();
        let b = Model::new(cfg(Mode::Seq2Seq), 3).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a
            .params()
            .iter()
            .all(|(_, _, t)| t.values.iter().all(|v| v.abs() <= 0.1)));
    }

    #[test]
    fn from_params_checks_shapes() {
        let a = Model::new(cfg(Mode::Seq2Seq), 3).unwrap();
        let mut other = cfg(Mode::Seq2Seq);
        other.vocab_size = 51;
        assert!(Model::from_params(other, a.params().clone()).is_err());
        assert!(Model::from_params(cfg(Mode::Pair2Seq), a.params().clone()).is_err());
    }

    #[test]
    fn dims_parse() {
        assert_eq!("8/4".parse::<ModelDims>().unwrap(), ModelDims { embed: 8, hidden: 4 });
        assert!("8".parse::<ModelDims>().is_err());
        assert!("0/4".parse::<ModelDims>().is_err());
    }

    #[test]
    fn pretrained_rows_overwrite() {
        let vocab = Vocab::build([vec!["the".to_string(), "cat".to_string()]], 1);
        let config = ModelConfig {
            mode: Mode::Seq2Seq,
            dims: ModelDims { embed: 2, hidden: 2 },
            vocab_size: vocab.len(),
        };
        let mut m = Model::new(config, 1).unwrap();
        let text = "The 9 9\nthe 1.5 -2\n. . . 3 3\ncat 0.25 x\nCat 7 8\n";
        let n = m.load_pretrained(&vocab, text.as_bytes()).unwrap();
        assert_eq!(n, 2);
        let word = m.params().get(m.param_id("embed.word").unwrap());
        let the = vocab.id("the").unwrap();
        let cat = vocab.id("cat").unwrap();
        assert_eq!(&word.values[the * 2..the * 2 + 2], &[1.5, -2.0]);
        assert_eq!(&word.values[cat * 2..cat * 2 + 2], &[7.0, 8.0]);
    }
}
