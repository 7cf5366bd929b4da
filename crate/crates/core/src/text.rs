//! Tokenization, vocabulary and character ids.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<sep>"];

/// Longest token prefix that is fed to the character path.
pub const MAX_TOKEN_CHARS: usize = 16;
pub const CHAR_PAD: usize = 0;
pub const CHAR_UNK: usize = 1;
/// Padding id, unknown-character id, then the 95 printable ASCII characters.
pub const CHAR_VOCAB_SIZE: usize = 97;

const CONTRACTIONS: [&str; 7] = ["n't", "'s", "'re", "'ve", "'ll", "'d", "'m"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenType {
    Answer = 0,
    Paragraph = 1,
    Question = 2,
}

impl TokenType {
    pub const COUNT: usize = 3;

    pub fn id(self) -> usize {
        self as usize
    }
}

/// A token and the `[start, end)` character (code point) range it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}

/// Lowercases, splits on whitespace, detaches leading and trailing
/// punctuation one character at a time and splits English contractions.
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().map(normalize_apostrophe).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_chunk(&chars, start, i, &mut out);
    }
    out
}

fn normalize_apostrophe(c: char) -> char {
    match c {
        '\u{2019}' | '\u{2018}' => '\'',
        c => c,
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn lower(chars: &[char]) -> String {
    chars.iter().collect::<String>().to_lowercase()
}

fn is_contraction(chars: &[char]) -> bool {
    let s = lower(chars);
    CONTRACTIONS.contains(&s.as_str())
}

fn split_chunk(chars: &[char], mut start: usize, mut end: usize, out: &mut Vec<Token>) {
    let push = |out: &mut Vec<Token>, s: usize, e: usize| {
        out.push(Token {
            text: lower(&chars[s..e]),
            start: s,
            end: e,
        })
    };
    while start < end && !is_word_char(chars[start]) && !is_contraction(&chars[start..end]) {
        push(out, start, start + 1);
        start += 1;
    }
    let mut trailing = Vec::new();
    while end > start && !is_word_char(chars[end - 1]) {
        trailing.push(end - 1);
        end -= 1;
    }
    if start < end {
        let core = &chars[start..end];
        let split = CONTRACTIONS.iter().find_map(|c| {
            let n = c.chars().count();
            (core.len() > n && is_word_char(core[core.len() - n - 1]) && lower(&core[core.len() - n..]) == *c)
                .then(|| end - n)
        });
        match split {
            Some(at) => {
                push(out, start, at);
                push(out, at, end);
            }
            None => push(out, start, end),
        }
    }
    for &p in trailing.iter().rev() {
        push(out, p, p + 1);
    }
}

/// Character ids of the first [`MAX_TOKEN_CHARS`] characters of `token`.
pub fn char_ids(token: &str) -> Vec<usize> {
    token
        .chars()
        .take(MAX_TOKEN_CHARS)
        .map(|c| match c {
            ' '..='~' => c as usize - ' ' as usize + 2,
            _ => CHAR_UNK,
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("vocabulary file line {line}: expected special token {expected:?}, found {found:?}")]
    BadHeader {
        line: usize,
        expected: &'static str,
        found: String,
    },
    #[error("vocabulary file line {line}: duplicate token {token:?}")]
    Duplicate { line: usize, token: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    min_frequency: usize,
}

impl Vocab {
    fn with_specials(min_frequency: usize) -> Self {
        let mut v = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            min_frequency,
        };
        for s in SPECIAL_TOKENS {
            v.push(s.to_string());
        }
        v
    }

    fn push(&mut self, token: String) {
        self.token_to_id.insert(token.clone(), self.id_to_token.len());
        self.id_to_token.push(token);
    }

    /// Keeps tokens seen at least `min_frequency` times; ids follow
    /// descending count, ties broken lexicographically.
    pub fn build<I, T>(corpora: I, min_frequency: usize) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[String]>,
    {
        let min_frequency = min_frequency.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let corpora: Vec<T> = corpora.into_iter().collect();
        for seq in &corpora {
            for tok in seq.as_ref() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_frequency && !SPECIAL_TOKENS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut v = Self::with_specials(min_frequency);
        for (t, _) in kept {
            v.push(t.to_string());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    /// One token per line in id order; the first five lines are the
    /// special tokens.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_file_str(text: &str) -> Result<Self, VocabError> {
        let mut v = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            min_frequency: 1,
        };
        for (i, line) in text.lines().enumerate() {
            if let Some(&expected) = SPECIAL_TOKENS.get(i) {
                if line != expected {
                    return Err(VocabError::BadHeader {
                        line: i + 1,
                        expected,
                        found: line.to_string(),
                    });
                }
            } else if line.is_empty() || v.contains(line) {
                return Err(VocabError::Duplicate {
                    line: i + 1,
                    token: line.to_string(),
                });
            }
            v.push(line.to_string());
        }
        if v.len() < SPECIAL_TOKENS.len() {
            return Err(VocabError::BadHeader {
                line: v.len() + 1,
                expected: SPECIAL_TOKENS[v.len()],
                found: String::new(),
            });
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::from_file_str(&std::fs::read_to_string(path)?)
    }

    /// Short content hash used to tie checkpoints to the vocabulary they
    /// were trained with.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenizes_question() {
        assert_eq!(
            tokenize("What organization runs the public schools?"),
            toks(&["what", "organization", "runs", "the", "public", "schools", "?"])
        );
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t\n").is_empty());
    }

    #[test]
    fn splits_contractions() {
        assert_eq!(tokenize("don't"), toks(&["do", "n't"]));
        assert_eq!(tokenize("Victoria's schools"), toks(&["victoria", "'s", "schools"]));
        assert_eq!(tokenize("they're, I'm"), toks(&["they", "'re", ",", "i", "'m"]));
        assert_eq!(tokenize("n't 's"), toks(&["n't", "'s"]));
        assert_eq!(tokenize("don\u{2019}t"), toks(&["do", "n't"]));
    }

    #[test]
    fn detaches_punctuation_and_keeps_inner() {
        assert_eq!(tokenize("(U.S.)"), toks(&["(", "u.s", ".", ")"]));
        assert_eq!(tokenize("\"hi\"..."), toks(&["\"", "hi", "\"", ".", ".", "."]));
        assert_eq!(tokenize("1,000 well-known"), toks(&["1,000", "well-known"]));
    }

    #[test]
    fn offsets_point_into_original_text() {
        let text = "Run by the Victoria Department.";
        let chars: Vec<char> = text.chars().collect();
        for t in tokenize_with_offsets(text) {
            let s: String = chars[t.start..t.end].iter().collect();
            assert_eq!(s.to_lowercase(), t.text);
        }
    }

    #[test]
    fn vocab_threshold_boundary() {
        let mut corpus = vec!["a".to_string(); 9];
        corpus.extend(vec!["b".to_string(); 8]);
        let v = Vocab::build([corpus.clone()], 9);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(5));
        assert!(!v.contains("b"));
        let all = Vocab::build([corpus], 1);
        assert_eq!(all.tokens()[5..], toks(&["a", "b"]));
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let corpus = toks(&["y", "x", "y", "x", "y", "x"]);
        let v = Vocab::build([corpus], 3);
        assert_eq!(v.tokens()[5..], toks(&["x", "y"]));
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::build(Vec::<Vec<String>>::new(), 1);
        assert_eq!(v.tokens(), &toks(&SPECIAL_TOKENS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<sep>"), Some(SEP));
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let v = Vocab::build([toks(&["a"])], 1);
        assert_eq!(v.encode(&["a", "zzz"]), vec![5, UNK]);
    }

    #[test]
    fn char_ids_truncate_and_map_unknown() {
        assert_eq!(char_ids("ab"), vec!['a' as usize - 30, 'b' as usize - 30]);
        assert_eq!(char_ids("abcdefghijklmnopq").len(), 16);
        assert_eq!(char_ids("é"), vec![CHAR_UNK]);
        assert!(char_ids("~ ").iter().all(|&c| (2..CHAR_VOCAB_SIZE).contains(&c)));
    }

    #[test]
    fn vocab_file_round_trip_and_header_check() {
        let v = Vocab::build([toks(&["b", "a", "a"])], 1);
        let text = v.to_file_string();
        assert!(text.starts_with("<pad>\n<unk>\n<s>\n</s>\n<sep>\na\nb\n"));
        let back = Vocab::from_file_str(&text).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert!(matches!(
            Vocab::from_file_str("<unk>\n<pad>\n"),
            Err(VocabError::BadHeader { line: 1, .. })
        ));
        assert!(Vocab::from_file_str("<pad>\n<unk>\n<s>\n</s>\n<sep>\na\na\n").is_err());
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(s in "[ a-zA-Z0-9'.,?!()\"-]{0,40}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once.clone(), twice);
            prop_assert!(once.iter().all(|t| !t.is_empty() && !t.contains(' ')));
        }

        #[test]
        fn vocab_is_bijective(words in proptest::collection::vec("[a-e]{1,3}", 0..40), k in 1usize..4) {
            let v = Vocab::build([words.clone()], k);
            for (id, tok) in v.tokens().iter().enumerate() {
                prop_assert_eq!(v.id(tok), Some(id));
            }
            for w in &words {
                if v.contains(w) {
                    prop_assert_eq!(v.decode(&v.encode(&[w])), vec![w.clone()]);
                    prop_assert!(words.iter().filter(|x| *x == w).count() >= k);
                }
            }
        }
    }
}
