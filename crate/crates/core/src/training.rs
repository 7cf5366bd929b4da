//! Teacher-forced NLL training with Adagrad and holdout-perplexity model
//! selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::PairExample;
use crate::model::{map_targets, mix_seed, prepare_input, Dropout, Mode, Model, ModelConfig, ModelDims, PreparedInput};
use crate::tensor::{Checkpoint, Gradient, GradientMap, ParamStore, Tape, Tensor, Var};
use crate::text::{Vocab, BOS};
use crate::{Error, Result};

/// Added to every target probability before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub dims: ModelDims,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Drop probability.
    pub dropout: f64,
    pub epochs: usize,
    /// Global gradient norm cap; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub adagrad_init: f64,
    /// Batches per length-sorting window.
    pub bucket_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pair2Seq,
            dims: ModelDims::default(),
            batch_size: 32,
            learning_rate: 0.15,
            dropout: 0.2,
            epochs: 10,
            clip_norm: 5.0,
            seed: 13,
            adagrad_init: 0.1,
            bucket_window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be a non-negative number",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if !(self.adagrad_init > 0.0 && self.adagrad_init.is_finite()) {
            return bad(format!(
                "adagrad accumulator init {} must be positive",
                self.adagrad_init
            ));
        }
        if self.bucket_window == 0 {
            return bad("bucket window must be at least 1".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode={}", self.mode);
        let _ = writeln!(s, "dims={}/{}", self.dims.embed, self.dims.hidden);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "clip_norm={}", self.clip_norm);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "adagrad_init={}", self.adagrad_init);
        let _ = writeln!(s, "bucket_window={}", self.bucket_window);
        s
    }
}

// ---------------------------------------------------------------------------
// Examples and loss
// ---------------------------------------------------------------------------

/// A prepared input with its teacher-forcing targets (ending in EOS).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: PreparedInput,
    pub targets: Vec<usize>,
}

impl Example {
    /// Length used for bucketing.
    pub fn source_len(&self) -> usize {
        self.input.copy_ext_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSet {
    pub examples: Vec<Example>,
    /// Targets cut to the decode cap.
    pub truncated: usize,
}

pub fn prepare_examples(vocab: &Vocab, mode: Mode, pairs: &[PairExample]) -> Result<PreparedSet> {
    let mut examples = Vec::with_capacity(pairs.len());
    let mut truncated = 0;
    for p in pairs {
        let input = prepare_input(vocab, mode, &p.paragraph, (p.answer_start, p.answer_end), &p.answerable)?;
        let (targets, cut) = map_targets(vocab, &input, &p.unanswerable);
        truncated += usize::from(cut);
        examples.push(Example { input, targets });
    }
    Ok(PreparedSet { examples, truncated })
}

/// `-sum_t ln(P_t(target_t) + 1e-12)` over per-step distributions. Targets
/// outside a distribution (tokens neither in the vocabulary nor the
/// source) have probability zero.
pub fn sequence_nll(step_dists: &[Vec<f64>], targets: &[usize]) -> f64 {
    step_dists
        .iter()
        .zip(targets)
        .map(|(d, &t)| -(d.get(t).copied().unwrap_or(0.0) + PROB_FLOOR).ln())
        .sum()
}

/// Records the teacher-forced NLL of one example on `tape`.
pub fn example_loss(model: &Model, tape: &mut Tape<'_>, ex: &Example, dropout: &mut Dropout) -> Result<Var> {
    let enc = model.encode(tape, &ex.input, dropout)?;
    let mut state = model.init_decoder(tape, &enc)?;
    let mut prev = BOS;
    let mut probs = Vec::with_capacity(ex.targets.len());
    let mut unreachable = 0usize;
    let width = ex.input.extended_size();
    for &t in &ex.targets {
        let out = model.decode_step(tape, &ex.input, &enc, &state, prev, dropout)?;
        if t < width {
            probs.push(tape.gather_cols(out.final_dist, &[t])?);
        } else {
            unreachable += 1;
        }
        state = out.state;
        prev = t;
    }
    let constant = unreachable as f64 * -PROB_FLOOR.ln();
    let floor = tape.constant(Tensor::scalar(PROB_FLOOR))?;
    let loss = if probs.is_empty() {
        tape.constant(Tensor::scalar(constant))?
    } else {
        let p = tape.concat_cols(&probs)?;
        let p = tape.add(p, floor)?;
        let lp = tape.log(p)?;
        let s = tape.sum(lp)?;
        let nll = tape.scale(s, -1.0)?;
        let c = tape.constant(Tensor::scalar(constant))?;
        tape.add(nll, c)?
    };
    Ok(loss)
}

/// Total NLL and target token count, dropout disabled.
pub fn total_nll(model: &Model, examples: &[Example]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let mut tape = Tape::with_params(model.params());
        let loss = example_loss(model, &mut tape, ex, &mut Dropout::disabled())?;
        total += tape.scalar(loss);
        tokens += ex.targets.len();
    }
    Ok((total, tokens))
}

/// `exp(total NLL / target tokens)` with dropout disabled.
pub fn perplexity(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Training("perplexity of an empty example set".into()));
    }
    let (nll, tokens) = total_nll(model, examples)?;
    Ok((nll / tokens as f64).exp())
}

// ---------------------------------------------------------------------------
// Adagrad
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// Update applied; the gradient norm before clipping.
    Applied { norm: f64 },
    /// Non-finite gradient, parameters untouched.
    Skipped,
}

/// Per-coordinate squared-gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Adagrad {
    acc: Vec<Vec<f64>>,
}

impl Adagrad {
    pub fn new(params: &ParamStore, init: f64) -> Self {
        Self {
            acc: params.iter().map(|(_, _, t)| vec![init; t.len()]).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.acc
    }

    /// Clips `grads` to global norm `clip`, then for every coordinate
    /// `acc += g^2; theta -= lr * g / sqrt(acc)`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradientMap, lr: f64, clip: f64) -> StepOutcome {
        if !grads.is_finite() {
            return StepOutcome::Skipped;
        }
        let norm = grads.global_norm();
        let factor = if norm > clip { clip / norm } else { 1.0 };
        for (id, g) in grads.iter() {
            let acc = &mut self.acc[id.0];
            let theta = &mut params.get_mut(id).values;
            let mut update = |i: usize, g: f64| {
                let g = g * factor;
                acc[i] += g * g;
                theta[i] -= lr * g / acc[i].sqrt();
            };
            match g {
                Gradient::Dense(v) => v.iter().enumerate().for_each(|(i, &g)| update(i, g)),
                rows @ Gradient::Rows { .. } => rows.for_each_entry(update),
            }
        }
        StepOutcome::Applied { norm }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Shuffles example indices, sorts each window of `window * batch_size`
/// examples by length, cuts batches and shuffles the batch order.
pub fn make_batches(lengths: &[usize], batch_size: usize, window: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size * window) {
        let mut chunk = chunk.to_vec();
        chunk.sort_by_key(|&i| lengths[i]);
        batches.extend(chunk.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-token NLL over the epoch's training batches.
    pub train_loss: f64,
    pub holdout_perplexity: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6} holdout_ppl={:.6} time={:.1}s",
            self.epoch, self.train_loss, self.holdout_perplexity, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest holdout perplexity.
    pub best: Model,
    pub best_epoch: usize,
    pub best_perplexity: f64,
    pub initial_perplexity: f64,
    /// The model after the last epoch.
    pub last: Model,
    pub history: Vec<EpochLog>,
    pub skipped_steps: usize,
}

/// Gradient of the mean example loss over one batch, accumulated in batch
/// order, and the summed loss.
fn batch_gradients(
    model: &Model,
    examples: &[Example],
    batch: &[usize],
    dropout_rate: f64,
    seed: u64,
) -> Result<(GradientMap, f64)> {
    let mut grads = GradientMap::new();
    let mut loss_sum = 0.0;
    let weight = 1.0 / batch.len() as f64;
    for &i in batch {
        let mut dropout = if dropout_rate > 0.0 {
            Dropout::new(dropout_rate, mix_seed(seed, i as u64))
        } else {
            Dropout::disabled()
        };
        let mut tape = Tape::with_params(model.params());
        let loss = example_loss(model, &mut tape, &examples[i], &mut dropout)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite loss on example {i}")));
        }
        loss_sum += value;
        tape.backward_into(loss, weight, &mut grads)?;
    }
    Ok((grads, loss_sum))
}

pub fn train(
    config: &TrainConfig,
    model: Model,
    train_set: &[Example],
    holdout: &[Example],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    if holdout.is_empty() {
        return Err(Error::Training("no holdout examples".into()));
    }
    if model.mode() != config.mode {
        return Err(Error::Training(format!(
            "config mode {} does not match {} model",
            config.mode,
            model.mode()
        )));
    }
    let mut model = model;
    let initial_perplexity = perplexity(&model, holdout)?;
    let mut optimizer = Adagrad::new(model.params(), config.adagrad_init);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_perplexity = initial_perplexity;
    let mut history = Vec::with_capacity(config.epochs);
    let mut skipped_steps = 0;
    let lengths: Vec<usize> = train_set.iter().map(Example::source_len).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let epoch_seed = mix_seed(config.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let batches = make_batches(&lengths, config.batch_size, config.bucket_window, &mut rng);
        let mut loss_sum = 0.0;
        let mut tokens = 0;
        for (b, batch) in batches.iter().enumerate() {
            let batch_seed = mix_seed(epoch_seed, b as u64);
            let (grads, loss) = batch_gradients(&model, train_set, batch, config.dropout, batch_seed)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += loss;
            tokens += batch.iter().map(|&i| train_set[i].targets.len()).sum::<usize>();
            let outcome = optimizer.step(model.params_mut(), &grads, config.learning_rate, config.clip_norm);
            if outcome == StepOutcome::Skipped {
                skipped_steps += 1;
            }
        }
        let holdout_perplexity = perplexity(&model, holdout)
            .map_err(|e| Error::Training(format!("epoch {epoch}, holdout evaluation: {e}")))?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / tokens as f64,
            holdout_perplexity,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        history.push(log);
        if holdout_perplexity < best_perplexity || best_epoch == 0 {
            best = model.clone();
            best_epoch = epoch;
            best_perplexity = holdout_perplexity;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_perplexity,
        initial_perplexity,
        last: model,
        history,
        skipped_steps,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Checkpoint of `model` with its configuration and vocabulary fingerprint
/// in the metadata, plus any `extra` entries.
pub fn model_checkpoint(model: &Model, vocab: &Vocab, extra: &[(&str, String)]) -> Checkpoint {
    let cfg = model.config();
    let mut meta = BTreeMap::new();
    meta.insert("mode".to_string(), cfg.mode.to_string());
    meta.insert("embed".to_string(), cfg.dims.embed.to_string());
    meta.insert("hidden".to_string(), cfg.dims.hidden.to_string());
    meta.insert("vocab_size".to_string(), cfg.vocab_size.to_string());
    meta.insert("vocab_fingerprint".to_string(), vocab.fingerprint());
    for (k, v) in extra {
        meta.insert(k.to_string(), v.clone());
    }
    Checkpoint {
        meta,
        params: model.params().clone(),
    }
}

/// Rebuilds a model, refusing a checkpoint trained with another vocabulary.
pub fn model_from_checkpoint(ckpt: Checkpoint, vocab: &Vocab) -> Result<Model> {
    let get = |k: &str| {
        ckpt.meta
            .get(k)
            .ok_or_else(|| Error::Model(format!("checkpoint metadata lacks {k}")))
    };
    let expected = get("vocab_fingerprint")?;
    let found = vocab.fingerprint();
    if *expected != found {
        return Err(Error::Model(format!(
            "checkpoint was trained with vocabulary {expected}, but the given vocabulary is {found}"
        )));
    }
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Model(format!("checkpoint metadata {k} is not a number")))
    };
    let config = ModelConfig {
        mode: get("mode")?.parse()?,
        dims: ModelDims {
            embed: num("embed")?,
            hidden: num("hidden")?,
        },
        vocab_size: num("vocab_size")?,
    };
    if config.vocab_size != vocab.len() {
        return Err(Error::Model(format!(
            "checkpoint vocabulary has {} entries, given vocabulary has {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    Model::from_params(config, ckpt.params)
}
