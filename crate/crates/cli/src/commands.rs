use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use unansq::dataset::{
    align_pairs, answerable_sources, build_augmentation, locate_answer, parse_squad, read_pair_file, split_holdout,
    write_pair_file, PairExample, ParsedSquad,
};
use unansq::decoding::{
    beam_search, filter_outputs, read_generation_file, to_generations, write_generation_file, BeamConfig,
    GenerationRecord,
};
use unansq::metrics::{evaluate, EvalTriple, MetricsReport};
use unansq::model::{prepare_input, Dropout, Mode, Model, ModelConfig, PreparedInput};
use unansq::tensor::{grad_check, read_checkpoint, write_checkpoint, TensorError};
use unansq::text::{tokenize, Vocab};
use unansq::training::{
    example_loss, model_checkpoint, model_from_checkpoint, prepare_examples, train, Example, TrainConfig,
};

use crate::output::Staged;
use crate::{sub_seed, AlignArgs, AugmentArgs, EvaluateArgs, GenerateArgs, GradcheckArgs, TrainArgs};

pub const TRAIN_PAIRS_FILE: &str = "pairs.train.tsv";
pub const HOLDOUT_PAIRS_FILE: &str = "pairs.holdout.tsv";
pub const DEV_PAIRS_FILE: &str = "pairs.dev.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const STATS_FILE: &str = "stats.txt";

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_file(), "{what} {} does not exist", path.display());
    Ok(())
}

fn require_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure!(p.is_dir(), "output directory {} does not exist", p.display());
    }
    Ok(())
}

fn load_squad(path: &Path) -> Result<ParsedSquad> {
    Ok(parse_squad(path)?)
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<Model> {
    let file = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    let ckpt =
        read_checkpoint(BufReader::new(file)).with_context(|| format!("reading checkpoint {}", path.display()))?;
    model_from_checkpoint(ckpt, vocab).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn key_values(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

// ---------------------------------------------------------------------------
// align
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AlignStats {
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub dev_pairs: usize,
    pub mean_distance: f64,
    pub expanded_spans: usize,
    pub unmappable: usize,
    pub dropped_records: usize,
    pub vocab_size: usize,
    /// Question ids used by more than one pair (always 0 for a valid
    /// alignment).
    pub reused_questions: usize,
}

impl AlignStats {
    pub fn total_pairs(&self) -> usize {
        self.train_pairs + self.holdout_pairs + self.dev_pairs
    }

    /// Share of the training-file pairs held out.
    pub fn holdout_fraction(&self) -> f64 {
        let n = self.train_pairs + self.holdout_pairs;
        if n == 0 {
            0.0
        } else {
            self.holdout_pairs as f64 / n as f64
        }
    }

    pub fn to_text(&self) -> String {
        key_values(&[
            ("total_pairs", self.total_pairs().to_string()),
            ("train_pairs", self.train_pairs.to_string()),
            ("holdout_pairs", self.holdout_pairs.to_string()),
            ("dev_pairs", self.dev_pairs.to_string()),
            ("holdout_fraction", format!("{:.4}", self.holdout_fraction())),
            ("mean_distance", format!("{:.4}", self.mean_distance)),
            ("expanded_spans", self.expanded_spans.to_string()),
            ("unmappable_pivots", self.unmappable.to_string()),
            ("dropped_records", self.dropped_records.to_string()),
            ("reused_questions", self.reused_questions.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
        ])
    }
}

/// Aligns the training (and optional development) file, splits a holdout
/// from the training pairs by article and builds the vocabulary from the
/// training file.
pub fn cmd_align(args: &AlignArgs) -> Result<AlignStats> {
    require_file(&args.train, "training file")?;
    if let Some(dev) = &args.dev {
        require_file(dev, "development file")?;
    }
    ensure!(
        (0.0..1.0).contains(&args.holdout_fraction),
        "holdout fraction {} outside [0, 1)",
        args.holdout_fraction
    );
    ensure!(
        !args.out.is_file(),
        "output {} is a file, expected a directory",
        args.out.display()
    );

    let train_file = load_squad(&args.train)?;
    let dev_file = args.dev.as_deref().map(load_squad).transpose()?;

    let train_report = align_pairs(&train_file.paragraphs);
    let dev_report = dev_file
        .as_ref()
        .map(|d| align_pairs(&d.paragraphs))
        .unwrap_or_default();

    let mut seen: HashSet<&str> = HashSet::new();
    let mut reused = 0;
    for p in train_report.pairs.iter().chain(&dev_report.pairs) {
        for id in [p.answerable_id.as_str(), p.unanswerable_id.as_str()] {
            reused += usize::from(!seen.insert(id));
        }
    }
    let total = train_report.pairs.len() + dev_report.pairs.len();
    let distance_sum: usize = train_report
        .pairs
        .iter()
        .chain(&dev_report.pairs)
        .map(|p| p.distance)
        .sum();
    let mean_distance = if total == 0 {
        0.0
    } else {
        distance_sum as f64 / total as f64
    };

    let train_examples: Vec<PairExample> = train_report.pairs.iter().map(|p| p.example.clone()).collect();
    let dev_examples: Vec<PairExample> = dev_report.pairs.iter().map(|p| p.example.clone()).collect();
    let (train_side, holdout) = split_holdout(
        train_examples,
        |p| p.title.as_str(),
        args.holdout_fraction,
        sub_seed(args.seed, "holdout"),
    );

    let mut corpora: Vec<Vec<String>> = Vec::new();
    for para in &train_file.paragraphs {
        corpora.push(tokenize(&para.context));
        corpora.extend(para.qas.iter().map(|q| tokenize(&q.question)));
    }
    let vocab = Vocab::build(&corpora, args.min_freq);

    let stats = AlignStats {
        train_pairs: train_side.len(),
        holdout_pairs: holdout.len(),
        dev_pairs: dev_examples.len(),
        mean_distance,
        expanded_spans: train_report.expanded_spans + dev_report.expanded_spans,
        unmappable: train_report.unmappable + dev_report.unmappable,
        dropped_records: train_file.dropped + dev_file.as_ref().map_or(0, |d| d.dropped),
        vocab_size: vocab.len(),
        reused_questions: reused,
    };

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut staged = Staged::new();
    staged.add(
        &args.out.join(TRAIN_PAIRS_FILE),
        write_pair_file(&train_side).as_bytes(),
    )?;
    staged.add(&args.out.join(HOLDOUT_PAIRS_FILE), write_pair_file(&holdout).as_bytes())?;
    if args.dev.is_some() {
        staged.add(
            &args.out.join(DEV_PAIRS_FILE),
            write_pair_file(&dev_examples).as_bytes(),
        )?;
    }
    staged.add(&args.out.join(VOCAB_FILE), vocab.to_file_string().as_bytes())?;
    staged.add(&args.out.join(STATS_FILE), stats.to_text().as_bytes())?;
    staged.commit()?;
    Ok(stats)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub train_examples: usize,
    pub holdout_examples: usize,
    pub truncated_targets: usize,
    pub pretrained_rows: Option<usize>,
    pub initial_perplexity: f64,
    pub best_epoch: usize,
    pub best_perplexity: f64,
    pub skipped_steps: usize,
}

impl TrainStats {
    pub fn to_text(&self) -> String {
        let mut entries = vec![
            ("train_examples", self.train_examples.to_string()),
            ("holdout_examples", self.holdout_examples.to_string()),
            ("truncated_targets", self.truncated_targets.to_string()),
        ];
        if let Some(n) = self.pretrained_rows {
            entries.push(("pretrained_rows", n.to_string()));
        }
        entries.extend([
            ("initial_holdout_ppl", format!("{:.6}", self.initial_perplexity)),
            ("best_epoch", self.best_epoch.to_string()),
            ("best_holdout_ppl", format!("{:.6}", self.best_perplexity)),
            ("skipped_steps", self.skipped_steps.to_string()),
        ]);
        key_values(&entries)
    }
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            dims: self.dims_override.unwrap_or_default(),
            batch_size: self.batch_size,
            learning_rate: self.lr,
            dropout: self.dropout,
            epochs: self.epochs,
            clip_norm: self.clip,
            seed: sub_seed(self.seed, "train"),
            ..TrainConfig::default()
        }
    }
}

/// Trains from pair files and writes the best-holdout checkpoint, a
/// `<out>.config` record and a `<out>.log` of epoch lines. `on_line`
/// receives each log line as it is produced.
pub fn cmd_train(args: &TrainArgs, mut on_line: impl FnMut(&str)) -> Result<TrainStats> {
    require_file(&args.train_pairs, "training pairs")?;
    require_file(&args.holdout_pairs, "holdout pairs")?;
    require_file(&args.vocab, "vocabulary")?;
    if let Some(p) = &args.pretrained {
        require_file(p, "pretrained vectors")?;
    }
    require_parent(&args.out)?;
    let config = args.train_config();
    config.validate()?;

    let vocab = load_vocab(&args.vocab)?;
    let train_pairs = read_pair_file(&args.train_pairs)?;
    let holdout_pairs = read_pair_file(&args.holdout_pairs)?;
    let train_set = prepare_examples(&vocab, config.mode, &train_pairs)?;
    let holdout_set = prepare_examples(&vocab, config.mode, &holdout_pairs)?;

    let model_config = ModelConfig {
        mode: config.mode,
        dims: config.dims,
        vocab_size: vocab.len(),
    };
    let mut model = Model::new(model_config, sub_seed(args.seed, "init"))?;
    let pretrained_rows = match &args.pretrained {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Some(
                model
                    .load_pretrained(&vocab, BufReader::new(f))
                    .with_context(|| format!("reading {}", p.display()))?,
            )
        }
        None => None,
    };

    let mut log = String::new();
    let outcome = train(&config, model, &train_set.examples, &holdout_set.examples, |e| {
        let line = e.line();
        on_line(&line);
        log.push_str(&line);
        log.push('\n');
    })?;

    let extra = [
        ("best_epoch", outcome.best_epoch.to_string()),
        ("holdout_ppl", format!("{:.6}", outcome.best_perplexity)),
    ];
    let ckpt = model_checkpoint(&outcome.best, &vocab, &extra);
    let mut bytes = Vec::new();
    write_checkpoint(&ckpt, &mut bytes)?;

    let mut record = config.to_record();
    let _ = writeln!(record, "train_pairs={}", args.train_pairs.display());
    let _ = writeln!(record, "holdout_pairs={}", args.holdout_pairs.display());
    let _ = writeln!(record, "vocab={}", args.vocab.display());
    let _ = writeln!(record, "vocab_fingerprint={}", vocab.fingerprint());
    let _ = writeln!(record, "base_seed={}", args.seed);

    let side = |ext: &str| {
        let mut p = args.out.clone().into_os_string();
        p.push(ext);
        std::path::PathBuf::from(p)
    };
    let mut staged = Staged::new();
    staged.add(&args.out, &bytes)?;
    staged.add(&side(".config"), record.as_bytes())?;
    staged.add(&side(".log"), log.as_bytes())?;
    staged.commit()?;

    Ok(TrainStats {
        train_examples: train_set.examples.len(),
        holdout_examples: holdout_set.examples.len(),
        truncated_targets: train_set.truncated + holdout_set.truncated,
        pretrained_rows,
        initial_perplexity: outcome.initial_perplexity,
        best_epoch: outcome.best_epoch,
        best_perplexity: outcome.best_perplexity,
        skipped_steps: outcome.skipped_steps,
    })
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateStats {
    pub inputs: usize,
    pub generations: usize,
    /// Inputs whose every candidate was filtered out.
    pub empty_inputs: usize,
    /// SQuAD sources without a locatable answer or question.
    pub skipped_sources: usize,
}

impl GenerateStats {
    pub fn to_text(&self) -> String {
        key_values(&[
            ("inputs", self.inputs.to_string()),
            ("generations", self.generations.to_string()),
            ("empty_inputs", self.empty_inputs.to_string()),
            ("skipped_sources", self.skipped_sources.to_string()),
        ])
    }
}

struct Source {
    id: String,
    paragraph: Vec<String>,
    span: (usize, usize),
    question: Vec<String>,
}

fn sources_from_pairs(path: &Path) -> Result<Vec<Source>> {
    Ok(read_pair_file(path)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| Source {
            id: i.to_string(),
            paragraph: p.paragraph,
            span: (p.answer_start, p.answer_end),
            question: p.answerable,
        })
        .collect())
}

fn sources_from_squad(path: &Path) -> Result<(Vec<Source>, usize)> {
    let parsed = load_squad(path)?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for src in answerable_sources(&parsed.paragraphs) {
        let question = tokenize(&src.record.question);
        let located = src.record.answers.first().and_then(|a| locate_answer(&src.context, a));
        match located {
            Some((paragraph, start, end)) if !question.is_empty() => out.push(Source {
                id: src.record.id.clone(),
                paragraph,
                span: (start, end),
                question,
            }),
            _ => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// Beam-decodes every input and keeps the best `nbest` generations that
/// differ from the source question.
pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerateStats> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.vocab, "vocabulary")?;
    let (source_path, from_pairs) = match (&args.pairs, &args.squad) {
        (Some(p), None) => (p, true),
        (None, Some(s)) => (s, false),
        _ => bail!("exactly one of --pairs and --squad is required"),
    };
    require_file(source_path, "input")?;
    require_parent(&args.out)?;
    ensure!(args.beam >= 1, "beam size must be at least 1");
    ensure!(args.nbest >= 1, "nbest must be at least 1");
    ensure!(
        args.nbest <= args.beam,
        "nbest {} exceeds beam size {}",
        args.nbest,
        args.beam
    );
    ensure!(args.max_len >= 1, "max length must be at least 1");

    let vocab = load_vocab(&args.vocab)?;
    let model = load_model(&args.checkpoint, &vocab)?;
    let (mut sources, skipped_sources) = if from_pairs {
        (sources_from_pairs(source_path)?, 0)
    } else {
        sources_from_squad(source_path)?
    };
    if let Some(n) = args.limit {
        sources.truncate(n);
    }

    let beam = BeamConfig {
        beam_size: args.beam,
        max_len: args.max_len,
        length_penalty: None,
    };
    let mut records = Vec::new();
    let mut empty_inputs = 0;
    for src in &sources {
        let input: PreparedInput = prepare_input(&vocab, model.mode(), &src.paragraph, src.span, &src.question)
            .with_context(|| format!("input {}", src.id))?;
        let hyps = beam_search(&model, &input, &beam).with_context(|| format!("decoding input {}", src.id))?;
        let kept = filter_outputs(to_generations(&hyps, &vocab, &input), &src.question);
        if kept.is_empty() {
            empty_inputs += 1;
        }
        records.extend(kept.into_iter().take(args.nbest).map(|g| GenerationRecord {
            id: src.id.clone(),
            tokens: g.tokens,
            log_prob: g.log_prob,
        }));
    }

    let mut staged = Staged::new();
    staged.add(&args.out, write_generation_file(&records).as_bytes())?;
    staged.commit()?;
    Ok(GenerateStats {
        inputs: sources.len(),
        generations: records.len(),
        empty_inputs,
        skipped_sources,
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Scores the first generation of every pair that has one. Generation ids
/// are line indices into the pair file.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricsReport> {
    require_file(&args.generations, "generations")?;
    require_file(&args.pairs, "pairs")?;
    if let Some(out) = &args.out {
        require_parent(out)?;
    }
    let pairs = read_pair_file(&args.pairs)?;
    let records = read_generation_file(&args.generations)?;
    let mut first: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for r in records {
        let i: usize = r.id.parse().ok().filter(|&i| i < pairs.len()).with_context(|| {
            format!(
                "generation id {:?} is not a line index of {}",
                r.id,
                args.pairs.display()
            )
        })?;
        first.entry(i).or_insert(r.tokens);
    }
    let corpus: Vec<EvalTriple> = first
        .into_iter()
        .map(|(i, hypothesis)| EvalTriple {
            source: pairs[i].answerable.clone(),
            hypothesis,
            reference: pairs[i].unanswerable.clone(),
        })
        .collect();
    let report = evaluate(&corpus)?;
    if let Some(out) = &args.out {
        let mut staged = Staged::new();
        staged.add(out, report.to_text().as_bytes())?;
        staged.commit()?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentStats {
    pub records: usize,
    pub skipped: usize,
}

impl AugmentStats {
    pub fn to_text(&self) -> String {
        key_values(&[
            ("records", self.records.to_string()),
            ("skipped", self.skipped.to_string()),
        ])
    }
}

/// Writes the generations as SQuAD 2.0 unanswerable records. Generation
/// ids must be answerable question ids of `--squad`.
pub fn cmd_augment(args: &AugmentArgs) -> Result<AugmentStats> {
    require_file(&args.generations, "generations")?;
    require_file(&args.squad, "SQuAD file")?;
    require_parent(&args.out)?;
    let parsed = load_squad(&args.squad)?;
    let sources: HashMap<String, _> = answerable_sources(&parsed.paragraphs)
        .into_iter()
        .map(|s| (s.record.id.clone(), s))
        .collect();
    let records = read_generation_file(&args.generations)?;
    let mut generated = Vec::with_capacity(records.len());
    for r in records {
        let src = sources.get(&r.id).with_context(|| {
            format!(
                "generation id {:?} is not an answerable question of {}",
                r.id,
                args.squad.display()
            )
        })?;
        generated.push((src.clone(), r.tokens));
    }
    let aug = build_augmentation(&generated);
    let mut staged = Staged::new();
    staged.add(&args.out, aug.file.to_json().as_bytes())?;
    staged.commit()?;
    Ok(AugmentStats {
        records: aug.records,
        skipped: aug.skipped,
    })
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub mode: Mode,
    pub max_relative_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub seconds: f64,
}

impl GradcheckResult {
    pub fn to_text(&self) -> String {
        let worst = match &self.worst {
            Some((name, i)) => format!("{name}[{i}]"),
            None => "none".into(),
        };
        key_values(&[
            ("mode", self.mode.to_string()),
            ("max_relative_error", format!("{:.3e}", self.max_relative_error)),
            ("worst", worst),
            ("coordinates", self.coordinates.to_string()),
            ("seconds", format!("{:.2}", self.seconds)),
        ])
    }
}

/// A 20-entry vocabulary: the five special tokens and fifteen words.
pub fn miniature_vocab() -> Vocab {
    let words: Vec<String> = "the a schools are run by department who what runs ? of in victoria public"
        .split(' ')
        .map(String::from)
        .collect();
    Vocab::build([words], 1)
}

/// One-step teacher-forced NLL of a miniature model, checked coordinate by
/// coordinate against central differences. Fails when the largest relative
/// error reaches the tolerance.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckResult> {
    let started = Instant::now();
    let vocab = miniature_vocab();
    let config = ModelConfig {
        mode: args.mode,
        dims: args.dims_override,
        vocab_size: vocab.len(),
    };
    ensure!(
        args.init_range > 0.0 && args.init_range.is_finite(),
        "init range {} must be positive",
        args.init_range
    );
    let model = Model::with_init_range(config, sub_seed(args.seed, "gradcheck"), args.init_range)?;
    let paragraph = tokenize("public schools in victoria are run by zorgon department");
    let question = tokenize("who runs the public schools ?");
    let input = prepare_input(&vocab, args.mode, &paragraph, (6, 8), &question)?;
    // The source-only word exercises both the generation and copy paths.
    let target = input
        .extended_id(&vocab, "zorgon")
        .context("miniature input lacks its copy word")?;
    let example = Example {
        input,
        targets: vec![target],
    };
    let mut params = model.params().clone();
    let report = grad_check(
        |tape| {
            example_loss(&model, tape, &example, &mut Dropout::disabled()).map_err(|e| TensorError::Invalid {
                op: "loss",
                msg: e.to_string(),
            })
        },
        &mut params,
        args.step,
    )?;
    let result = GradcheckResult {
        mode: args.mode,
        max_relative_error: report.max_relative_error,
        worst: report.worst,
        coordinates: report.coordinates,
        seconds: started.elapsed().as_secs_f64(),
    };
    ensure!(
        result.max_relative_error < args.tolerance,
        "{} gradient check failed: max relative error {:.3e} at {} is not below {:.1e}",
        args.mode,
        result.max_relative_error,
        result
            .worst
            .as_ref()
            .map_or("-".to_string(), |(n, i)| format!("{n}[{i}]")),
        args.tolerance
    );
    Ok(result)
}
