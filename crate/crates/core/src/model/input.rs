use super::Mode;
use crate::dataset::{cap_paragraph, PARAGRAPH_TOKEN_CAP, QUESTION_TOKEN_CAP};
use crate::text::{char_ids, TokenType, Vocab, EOS, SEP, SPECIAL_TOKENS};
use crate::{Error, Result};

/// One encoder input sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub word_ids: Vec<usize>,
    /// Character ids per token; special tokens have none.
    pub char_ids: Vec<Vec<usize>>,
    pub type_ids: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }

    fn push(&mut self, vocab: &Vocab, token: &str, ty: TokenType) {
        self.word_ids.push(vocab.id_or_unk(token));
        self.char_ids.push(if SPECIAL_TOKENS.contains(&token) {
            Vec::new()
        } else {
            char_ids(token)
        });
        self.type_ids.push(ty.id());
    }
}

/// Model input for one example.
///
/// Seq2seq has a single packed segment `[paragraph, <sep>, question]`;
/// pair2seq has a paragraph segment and a question segment. The copy
/// positions follow the packed order for seq2seq and `[question;
/// paragraph]` for pair2seq. Source tokens outside the vocabulary get
/// extended ids `vocab_size + k`, with `oov_tokens[k]` their surface form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedInput {
    pub mode: Mode,
    pub segments: Vec<Segment>,
    pub copy_ext_ids: Vec<usize>,
    pub copy_tokens: Vec<String>,
    pub oov_tokens: Vec<String>,
    pub vocab_size: usize,
    /// The (capped) source question.
    pub question: Vec<String>,
}

impl PreparedInput {
    /// Size of the output distribution: vocabulary plus source-only tokens.
    pub fn extended_size(&self) -> usize {
        self.vocab_size + self.oov_tokens.len()
    }

    /// Extended id of `token`, if it can be produced at all.
    pub fn extended_id(&self, vocab: &Vocab, token: &str) -> Option<usize> {
        vocab.id(token).or_else(|| {
            self.oov_tokens
                .iter()
                .position(|t| t == token)
                .map(|k| self.vocab_size + k)
        })
    }

    pub fn surface<'a>(&'a self, vocab: &'a Vocab, id: usize) -> &'a str {
        if id < self.vocab_size {
            vocab.token(id).unwrap_or(SPECIAL_TOKENS[crate::text::UNK])
        } else {
            &self.oov_tokens[id - self.vocab_size]
        }
    }
}

/// Builds the model input from a paragraph, its answer token span
/// `[answer_start, answer_end)` and the answerable question. The paragraph
/// is windowed to 300 tokens around the answer and the question is cut to
/// 50 tokens.
pub fn prepare_input(
    vocab: &Vocab,
    mode: Mode,
    paragraph: &[String],
    answer: (usize, usize),
    question: &[String],
) -> Result<PreparedInput> {
    let (start, end) = answer;
    if paragraph.is_empty() || question.is_empty() {
        return Err(Error::Invalid("empty paragraph or question".into()));
    }
    if !(start < end && end <= paragraph.len()) {
        return Err(Error::Invalid(format!(
            "answer span [{start}, {end}) outside paragraph of {} tokens",
            paragraph.len()
        )));
    }
    let (paragraph, start, end) = cap_paragraph(paragraph, start, end, PARAGRAPH_TOKEN_CAP);
    let question: Vec<String> = question.iter().take(QUESTION_TOKEN_CAP).cloned().collect();

    let mut para = Segment {
        word_ids: Vec::new(),
        char_ids: Vec::new(),
        type_ids: Vec::new(),
    };
    for (i, tok) in paragraph.iter().enumerate() {
        let ty = if (start..end).contains(&i) {
            TokenType::Answer
        } else {
            TokenType::Paragraph
        };
        para.push(vocab, tok, ty);
    }
    let mut ques = Segment {
        word_ids: Vec::new(),
        char_ids: Vec::new(),
        type_ids: Vec::new(),
    };
    for tok in &question {
        ques.push(vocab, tok, TokenType::Question);
    }

    let (segments, copy_tokens): (Vec<Segment>, Vec<String>) = match mode {
        Mode::Seq2Seq => {
            let mut packed = para;
            packed.push(vocab, SPECIAL_TOKENS[SEP], TokenType::Paragraph);
            packed.word_ids.extend(ques.word_ids);
            packed.char_ids.extend(ques.char_ids);
            packed.type_ids.extend(ques.type_ids);
            let tokens = paragraph
                .iter()
                .cloned()
                .chain(std::iter::once(SPECIAL_TOKENS[SEP].to_string()))
                .chain(question.iter().cloned())
                .collect();
            (vec![packed], tokens)
        }
        Mode::Pair2Seq => {
            let tokens = question.iter().chain(paragraph.iter()).cloned().collect();
            (vec![para, ques], tokens)
        }
    };

    let vocab_size = vocab.len();
    let mut oov_tokens: Vec<String> = Vec::new();
    let copy_ext_ids = copy_tokens
        .iter()
        .map(|t| match vocab.id(t) {
            Some(id) => id,
            None => match oov_tokens.iter().position(|o| o == t) {
                Some(k) => vocab_size + k,
                None => {
                    oov_tokens.push(t.clone());
                    vocab_size + oov_tokens.len() - 1
                }
            },
        })
        .collect();

    Ok(PreparedInput {
        mode,
        segments,
        copy_ext_ids,
        copy_tokens,
        oov_tokens,
        vocab_size,
        question,
    })
}

/// Extended id for targets that are neither in the vocabulary nor in the
/// source; they always get probability zero.
pub const UNREACHABLE: usize = usize::MAX;

/// Target ids for teacher forcing: at most 49 tokens followed by EOS.
/// Returns the ids and whether the target was truncated.
pub fn map_targets(vocab: &Vocab, input: &PreparedInput, target: &[String]) -> (Vec<usize>, bool) {
    let keep = QUESTION_TOKEN_CAP - 1;
    let truncated = target.len() > keep;
    let mut ids: Vec<usize> = target
        .iter()
        .take(keep)
        .map(|t| input.extended_id(vocab, t).unwrap_or(UNREACHABLE))
        .collect();
    ids.push(EOS);
    (ids, truncated)
}
