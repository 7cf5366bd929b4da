use std::fmt::Write as _;
use std::path::Path;

use super::DatasetError;

pub const PARAGRAPH_TOKEN_CAP: usize = 300;
pub const QUESTION_TOKEN_CAP: usize = 50;

/// One aligned training instance as stored in a pair file: the paragraph,
/// the answer token span `[answer_start, answer_end)`, the answerable
/// question and its aligned unanswerable question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub title: String,
    pub paragraph: Vec<String>,
    pub answer_start: usize,
    pub answer_end: usize,
    pub answerable: Vec<String>,
    pub unanswerable: Vec<String>,
}

fn clean_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

impl PairExample {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            clean_field(&self.title),
            self.paragraph.join(" "),
            self.answer_start,
            self.answer_end,
            self.answerable.join(" "),
            self.unanswerable.join(" ")
        )
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(format!("expected 6 tab-separated fields, found {}", fields.len()));
        }
        let toks = |s: &str| -> Vec<String> { s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect() };
        let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad token index {s:?}: {e}"));
        let pair = Self {
            title: fields[0].to_string(),
            paragraph: toks(fields[1]),
            answer_start: num(fields[2])?,
            answer_end: num(fields[3])?,
            answerable: toks(fields[4]),
            unanswerable: toks(fields[5]),
        };
        if !(pair.answer_start < pair.answer_end && pair.answer_end <= pair.paragraph.len()) {
            return Err(format!(
                "answer span [{}, {}) outside paragraph of {} tokens",
                pair.answer_start,
                pair.answer_end,
                pair.paragraph.len()
            ));
        }
        if pair.answerable.is_empty() || pair.unanswerable.is_empty() {
            return Err("empty question".into());
        }
        Ok(pair)
    }
}

pub fn write_pair_file(pairs: &[PairExample]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "{}", p.to_line());
    }
    s
}

pub fn read_pair_file(path: &Path) -> Result<Vec<PairExample>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            PairExample::from_line(l).map_err(|msg| DatasetError::PairFile {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

/// Window of at most `cap` paragraph tokens that keeps the answer span,
/// returned as `(tokens, answer_start, answer_end)` relative to the window.
/// The window starts at 0 when the answer fits, otherwise it ends at the
/// answer's last token (or starts at the answer when the answer alone
/// exceeds the cap).
pub fn cap_paragraph(tokens: &[String], start: usize, end: usize, cap: usize) -> (Vec<String>, usize, usize) {
    if tokens.len() <= cap {
        return (tokens.to_vec(), start, end);
    }
    let offset = if end <= cap {
        0
    } else if end - start >= cap {
        start
    } else {
        end - cap
    };
    let stop = (offset + cap).min(tokens.len());
    let new_end = end.min(stop) - offset;
    (tokens[offset..stop].to_vec(), start - offset, new_end)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(words: &str) -> Vec<String> {
        words.split(' ').map(str::to_string).collect()
    }

    #[test]
    fn line_round_trip() {
        let p = PairExample {
            title: "Victoria\t(Australia)".into(),
            paragraph: s("run by the victoria department of education ."),
            answer_start: 3,
            answer_end: 7,
            answerable: s("what organization runs the public schools in victoria ?"),
            unanswerable: s("what organization runs the waste management in victoria ?"),
        };
        let back = PairExample::from_line(&p.to_line()).unwrap();
        assert_eq!(back.title, "Victoria (Australia)");
        assert_eq!(back.paragraph, p.paragraph);
        assert_eq!((back.answer_start, back.answer_end), (3, 7));
        assert_eq!(back.unanswerable, p.unanswerable);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(PairExample::from_line("a\tb").is_err());
        assert!(PairExample::from_line("t\ta b\t1\t5\tq\tu").is_err());
        assert!(PairExample::from_line("t\ta b\tx\t1\tq\tu").is_err());
    }

    #[test]
    fn cap_keeps_answer() {
        let toks: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        assert_eq!(cap_paragraph(&toks, 2, 4, 20).0.len(), 10);
        let (w, a, b) = cap_paragraph(&toks, 1, 3, 5);
        assert_eq!((w.len(), a, b), (5, 1, 3));
        let (w, a, b) = cap_paragraph(&toks, 7, 9, 5);
        assert_eq!(w, s("4 5 6 7 8"));
        assert_eq!(w[a..b].to_vec(), s("7 8"));
        let (w, a, b) = cap_paragraph(&toks, 2, 9, 3);
        assert_eq!((w, a, b), (s("2 3 4"), 0, 3));
    }
}
