//! SQuAD 2.0 ingestion, answer-pivot alignment of answerable/unanswerable
//! question pairs, holdout splitting and augmentation output.

mod align;
mod augment;
mod pairs;
mod squad;

use std::path::PathBuf;

pub use align::{align_pairs, levenshtein, locate_answer, split_holdout, AlignedPair, AlignmentReport};
pub use augment::{answerable_sources, build_augmentation, Augmentation, SourceQuestion};
pub use pairs::{cap_paragraph, read_pair_file, write_pair_file, PairExample, PARAGRAPH_TOKEN_CAP, QUESTION_TOKEN_CAP};
pub use squad::{
    parse_squad, parse_squad_str, ParsedSquad, SquadAnswer, SquadArticle, SquadFile, SquadParagraph, SquadQa,
};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: malformed SQuAD file: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{path}:{line}: {msg}")]
    PairFile { path: PathBuf, line: usize, msg: String },
}

/// An answer or plausible-answer span; `char_start` counts Unicode scalar
/// values from the start of the context.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Answer {
    pub text: String,
    pub char_start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub is_impossible: bool,
    /// Answers for answerable questions, plausible answers otherwise.
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParagraphRecord {
    pub article_title: String,
    pub context: String,
    pub qas: Vec<QuestionRecord>,
}

/// Number of answerable question records.
pub fn count_answerable(paragraphs: &[ParagraphRecord]) -> usize {
    paragraphs
        .iter()
        .flat_map(|p| &p.qas)
        .filter(|q| !q.is_impossible)
        .count()
}
