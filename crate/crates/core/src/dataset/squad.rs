use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Answer, DatasetError, ParagraphRecord, QuestionRecord};

// SQuAD v2.0 JSON schema.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadFile {
    #[serde(default = "default_version")]
    pub version: String,
    pub data: Vec<SquadArticle>,
}

fn default_version() -> String {
    "v2.0".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadArticle {
    pub title: String,
    pub paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadParagraph {
    pub context: String,
    pub qas: Vec<SquadQa>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadQa {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub is_impossible: bool,
    #[serde(default)]
    pub answers: Vec<SquadAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plausible_answers: Option<Vec<SquadAnswer>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquadAnswer {
    pub text: String,
    pub answer_start: usize,
}

impl SquadFile {
    pub fn empty() -> Self {
        Self {
            version: default_version(),
            data: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("SQuAD structures always serialize")
    }
}

/// Parsed records plus the number of question records dropped because a
/// span did not match its context (or an answerable record had no answer).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedSquad {
    pub paragraphs: Vec<ParagraphRecord>,
    pub dropped: usize,
}

pub fn parse_squad(path: &Path) -> Result<ParsedSquad, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_squad_at(&text, path)
}

pub fn parse_squad_str(text: &str) -> Result<ParsedSquad, DatasetError> {
    parse_squad_at(text, Path::new("<memory>"))
}

fn parse_squad_at(text: &str, path: &Path) -> Result<ParsedSquad, DatasetError> {
    let file: SquadFile = serde_json::from_str(text).map_err(|e| DatasetError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    Ok(from_squad(file))
}

fn from_squad(file: SquadFile) -> ParsedSquad {
    let mut out = ParsedSquad::default();
    for article in file.data {
        for para in article.paragraphs {
            if para.context.is_empty() {
                out.dropped += para.qas.len();
                continue;
            }
            let chars: Vec<char> = para.context.chars().collect();
            let mut qas = Vec::with_capacity(para.qas.len());
            for qa in para.qas {
                let spans = if qa.is_impossible {
                    qa.plausible_answers.unwrap_or_default()
                } else {
                    qa.answers
                };
                let answers: Vec<Answer> = spans
                    .into_iter()
                    .map(|a| Answer {
                        text: a.text,
                        char_start: a.answer_start,
                    })
                    .collect();
                let spans_ok = answers.iter().all(|a| span_matches(&chars, a));
                if !spans_ok || (!qa.is_impossible && answers.is_empty()) {
                    out.dropped += 1;
                    continue;
                }
                qas.push(QuestionRecord {
                    id: qa.id,
                    question: qa.question,
                    is_impossible: qa.is_impossible,
                    answers,
                });
            }
            out.paragraphs.push(ParagraphRecord {
                article_title: article.title.clone(),
                context: para.context,
                qas,
            });
        }
    }
    out
}

fn span_matches(context: &[char], a: &Answer) -> bool {
    let n = a.text.chars().count();
    n > 0
        && a.char_start + n <= context.len()
        && context[a.char_start..a.char_start + n]
            .iter()
            .copied()
            .eq(a.text.chars())
}
