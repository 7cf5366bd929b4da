mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unansq::dataset::{read_pair_file, write_pair_file, PairExample, SquadFile};
use unansq::decoding::read_generation_file;
use unansq::model::{Mode, Model, ModelConfig, ModelDims};
use unansq::tensor::{write_checkpoint, CHECKPOINT_MAGIC};
use unansq::text::Vocab;
use unansq::training::model_checkpoint;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unansq")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(
        text.trim_end().lines().count(),
        1,
        "diagnostic is not one line: {text:?}"
    );
    text.trim().to_string()
}

fn stdout_value(out: &Output, key: &str) -> String {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(String::from))
        .unwrap_or_else(|| panic!("{key} missing from output"))
}

/// Aligned synthetic data plus an untrained checkpoint.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let squad = common::write_squad(dir.path(), "squad.json", &common::synthetic_squad(20, 1, 3));
        let out = run(&[
            "align",
            "--train",
            s(&squad),
            "--out",
            s(&dir.path().join("data")),
            "--min-freq",
            "1",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let vocab = Vocab::load(&dir.path().join("data/vocab.txt")).unwrap();
        let model = Model::new(
            ModelConfig {
                mode: Mode::Pair2Seq,
                dims: ModelDims { embed: 12, hidden: 6 },
                vocab_size: vocab.len(),
            },
            3,
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model_checkpoint(&model, &vocab, &[]), &mut bytes).unwrap();
        std::fs::write(dir.path().join("model.ckpt"), bytes).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck"));
}

#[test]
fn missing_input_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&["align", "--train", s(&missing), "--out", s(&dir.path().join("out"))]);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.contains("nope.json"), "{line}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_flag_is_a_one_line_error() {
    let out = run(&["train", "--epochs", "many"]);
    assert!(!out.status.success());
    stderr_line(&out);
}

#[test]
fn empty_dataset_gives_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let squad = common::write_squad(dir.path(), "empty.json", &SquadFile::empty());
    let data = dir.path().join("data");
    let out = run(&["align", "--train", s(&squad), "--dev", s(&squad), "--out", s(&data)]);
    assert!(out.status.success());
    assert_eq!(stdout_value(&out, "total_pairs"), "0");
    for f in ["pairs.train.tsv", "pairs.holdout.tsv", "pairs.dev.tsv"] {
        assert_eq!(std::fs::read_to_string(data.join(f)).unwrap(), "");
    }
    let vocab = Vocab::load(&data.join("vocab.txt")).unwrap();
    assert_eq!(vocab.len(), unansq::text::SPECIAL_TOKENS.len());
}

#[test]
fn align_statistics_and_stable_split() {
    let dir = tempfile::tempdir().unwrap();
    let squad = common::write_squad(dir.path(), "squad.json", &common::synthetic_squad(20, 2, 9));
    let mut splits = Vec::new();
    for name in ["a", "b"] {
        let out = run(&[
            "align",
            "--train",
            s(&squad),
            "--out",
            s(&dir.path().join(name)),
            "--seed",
            "4",
        ]);
        assert!(out.status.success());
        let total: usize = stdout_value(&out, "total_pairs").parse().unwrap();
        let holdout: usize = stdout_value(&out, "holdout_pairs").parse().unwrap();
        assert!(total > 50 && holdout > 0 && holdout < total, "{total} {holdout}");
        assert_eq!(stdout_value(&out, "reused_questions"), "0");
        assert_eq!(
            std::fs::read_to_string(dir.path().join(name).join("stats.txt")).unwrap(),
            String::from_utf8_lossy(&out.stdout)
        );
        splits.push(std::fs::read(dir.path().join(name).join("pairs.holdout.tsv")).unwrap());
    }
    assert_eq!(splits[0], splits[1]);

    // Whole articles go to one side.
    let train = read_pair_file(&dir.path().join("a/pairs.train.tsv")).unwrap();
    let holdout = read_pair_file(&dir.path().join("a/pairs.holdout.tsv")).unwrap();
    assert!(holdout.iter().all(|h| train.iter().all(|t| t.title != h.title)));
}

#[test]
fn config_file_supplies_flags_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "mode = seq2seq\ndims_override = 8/4\n").unwrap();
    let out = run(&["gradcheck", "--config", s(&conf)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_value(&out, "mode"), "seq2seq");

    // Flags win over the file.
    let out = run(&["gradcheck", "--config", s(&conf), "--mode", "pair2seq"]);
    assert_eq!(stdout_value(&out, "mode"), "pair2seq");

    std::fs::write(&conf, "beams = 3\n").unwrap();
    let out = run(&["gradcheck", "--config", s(&conf)]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("unknown key beams"));
}

#[test]
fn gradcheck_passes_for_seq2seq() {
    let out = run(&["gradcheck", "--mode", "seq2seq", "--dims-override", "8/4"]);
    assert!(out.status.success());
    let err: f64 = stdout_value(&out, "max_relative_error").parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn generate_respects_nbest_and_filters_sources() {
    let fx = Fixture::new();
    let gens = fx.path("gens.tsv");
    let pairs = fx.path("data/pairs.train.tsv");
    let out = run(&[
        "generate",
        "--checkpoint",
        s(&fx.path("model.ckpt")),
        "--vocab",
        s(&fx.path("data/vocab.txt")),
        "--pairs",
        s(&pairs),
        "--out",
        s(&gens),
        "--nbest",
        "2",
        "--beam",
        "3",
        "--max-len",
        "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let inputs = read_pair_file(&pairs).unwrap();
    let records = read_generation_file(&gens).unwrap();
    assert!(records.len() <= 2 * inputs.len());
    assert_eq!(stdout_value(&out, "generations"), records.len().to_string());
    for (id, input) in inputs.iter().enumerate() {
        let mine: Vec<_> = records.iter().filter(|r| r.id == id.to_string()).collect();
        assert!(mine.len() <= 2);
        assert!(mine.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
        assert!(mine.iter().all(|r| r.tokens != input.answerable));
    }
}

#[test]
fn nbest_above_beam_is_rejected() {
    let fx = Fixture::new();
    let out = run(&[
        "generate",
        "--checkpoint",
        s(&fx.path("model.ckpt")),
        "--vocab",
        s(&fx.path("data/vocab.txt")),
        "--pairs",
        s(&fx.path("data/pairs.train.tsv")),
        "--out",
        s(&fx.path("gens.tsv")),
        "--nbest",
        "4",
        "--beam",
        "3",
    ]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("nbest 4 exceeds beam size 3"));
    assert!(!fx.path("gens.tsv").exists());
}

#[test]
fn evaluate_perfect_generations_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = vec![
        PairExample {
            title: "t".into(),
            paragraph: "the museum was built by marlowe".split(' ').map(String::from).collect(),
            answer_start: 5,
            answer_end: 6,
            answerable: "who built the museum ?".split(' ').map(String::from).collect(),
            unanswerable: "who never built the old museum ?"
                .split(' ')
                .map(String::from)
                .collect(),
        },
        PairExample {
            title: "t".into(),
            paragraph: "the bridge was restored by okafor in 1850"
                .split(' ')
                .map(String::from)
                .collect(),
            answer_start: 5,
            answer_end: 6,
            answerable: "who restored the bridge in 1850 ?"
                .split(' ')
                .map(String::from)
                .collect(),
            unanswerable: "who restored the bridge after 2150 ?"
                .split(' ')
                .map(String::from)
                .collect(),
        },
    ];
    let pair_path = dir.path().join("pairs.tsv");
    std::fs::write(&pair_path, write_pair_file(&pairs)).unwrap();
    let gens: String = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{i}\t{}\t-1.0\n", p.unanswerable.join(" ")))
        .collect();
    let gen_path = dir.path().join("gens.tsv");
    std::fs::write(&gen_path, gens).unwrap();
    let report = dir.path().join("report.txt");
    let out = run(&[
        "evaluate",
        "--generations",
        s(&gen_path),
        "--pairs",
        s(&pair_path),
        "--out",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_value(&out, "bleu4"), "1.0000");
    assert_eq!(stdout_value(&out, "gleu4"), "1.0000");
    assert_eq!(stdout_value(&out, "rougeL_f1"), "1.0000");
    assert_eq!(
        std::fs::read_to_string(&report).unwrap(),
        String::from_utf8_lossy(&out.stdout)
    );

    std::fs::write(&gen_path, "7\twho ?\t-1.0\n").unwrap();
    let out = run(&["evaluate", "--generations", s(&gen_path), "--pairs", s(&pair_path)]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("\"7\""));
}

#[test]
fn checkpoint_from_another_vocabulary_names_both() {
    let fx = Fixture::new();
    let other = Vocab::build([vec!["alpha".to_string(), "beta".to_string()]], 1);
    let other_path = fx.path("other_vocab.txt");
    other.save(&other_path).unwrap();
    let out = run(&[
        "generate",
        "--checkpoint",
        s(&fx.path("model.ckpt")),
        "--vocab",
        s(&other_path),
        "--pairs",
        s(&fx.path("data/pairs.train.tsv")),
        "--out",
        s(&fx.path("gens.tsv")),
    ]);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    let trained = Vocab::load(&fx.path("data/vocab.txt")).unwrap().fingerprint();
    assert!(line.contains(&trained) && line.contains(&other.fingerprint()), "{line}");
    assert!(!fx.path("gens.tsv").exists());
}

#[test]
fn checkpoint_format_version_mismatch_names_both() {
    let fx = Fixture::new();
    let mut bytes = CHECKPOINT_MAGIC.to_vec();
    bytes.extend_from_slice(&99u32.to_le_bytes());
    std::fs::write(fx.path("model.ckpt"), bytes).unwrap();
    let out = run(&[
        "generate",
        "--checkpoint",
        s(&fx.path("model.ckpt")),
        "--vocab",
        s(&fx.path("data/vocab.txt")),
        "--pairs",
        s(&fx.path("data/pairs.train.tsv")),
        "--out",
        s(&fx.path("gens.tsv")),
    ]);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.contains("99") && line.contains("expected 1"), "{line}");
}

#[test]
fn train_writes_checkpoint_config_and_log() {
    let fx = Fixture::new();
    let ckpt = fx.path("trained.ckpt");
    let out = run(&[
        "train",
        "--train-pairs",
        s(&fx.path("data/pairs.train.tsv")),
        "--holdout-pairs",
        s(&fx.path("data/pairs.holdout.tsv")),
        "--vocab",
        s(&fx.path("data/vocab.txt")),
        "--out",
        s(&ckpt),
        "--mode",
        "seq2seq",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--lr",
        "0.1",
        "--dropout",
        "0.1",
        "--dims-override",
        "12/6",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    let log = std::fs::read_to_string(fx.path("trained.ckpt.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let config = std::fs::read_to_string(fx.path("trained.ckpt.config")).unwrap();
    for line in [
        "mode=seq2seq",
        "dims=12/6",
        "batch_size=8",
        "learning_rate=0.1",
        "dropout=0.1",
        "epochs=2",
    ] {
        assert!(config.lines().any(|l| l == line), "{line} missing from {config}");
    }
    let ckpt = unansq::tensor::load_checkpoint(&ckpt).unwrap();
    assert_eq!(ckpt.meta["mode"], "seq2seq");
    assert_eq!(ckpt.meta["hidden"], "6");
}

#[test]
fn failed_training_leaves_no_outputs() {
    let fx = Fixture::new();
    let empty = fx.path("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    let ckpt = fx.path("trained.ckpt");
    let out = run(&[
        "train",
        "--train-pairs",
        s(&fx.path("data/pairs.train.tsv")),
        "--holdout-pairs",
        s(&empty),
        "--vocab",
        s(&fx.path("data/vocab.txt")),
        "--out",
        s(&ckpt),
        "--dims-override",
        "8/4",
        "--epochs",
        "1",
    ]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("no holdout examples"));
    let leftovers: Vec<_> = std::fs::read_dir(fx.dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("trained") || n.starts_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn augment_round_trips_through_the_parser() {
    let fx = Fixture::new();
    let squad = fx.path("squad.json");
    let gens = fx.path("gens.tsv");
    let out = run(&[
        "generate",
        "--checkpoint",
        s(&fx.path("model.ckpt")),
        "--vocab",
        s(&fx.path("data/vocab.txt")),
        "--squad",
        s(&squad),
        "--out",
        s(&gens),
        "--max-len",
        "6",
        "--limit",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_value(&out, "inputs"), "10");
    let aug = fx.path("aug.json");
    let out = run(&[
        "augment",
        "--generations",
        s(&gens),
        "--squad",
        s(&squad),
        "--out",
        s(&aug),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records: usize = stdout_value(&out, "records").parse().unwrap();
    let parsed = unansq::dataset::parse_squad(&aug).unwrap();
    assert_eq!(parsed.dropped, 0);
    let qas: Vec<_> = parsed.paragraphs.iter().flat_map(|p| &p.qas).collect();
    assert_eq!(qas.len(), records);
    assert!(qas.iter().all(|q| q.is_impossible && !q.answers.is_empty()));

    // Unknown ids fail without leaving the output behind.
    std::fs::write(&gens, "nope\twho ?\t-1.0\n").unwrap();
    let aug2 = fx.path("aug2.json");
    let out = run(&[
        "augment",
        "--generations",
        s(&gens),
        "--squad",
        s(&squad),
        "--out",
        s(&aug2),
    ]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("\"nope\""));
    assert!(!aug2.exists());
}
