use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Answer, PairExample, ParagraphRecord};
use crate::text::{tokenize, tokenize_with_offsets, Token};

/// Unit-cost edit distance (insert, delete, substitute) between two
/// sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedPair {
    pub example: PairExample,
    pub answerable_id: String,
    pub unanswerable_id: String,
    pub pivot: Answer,
    /// Token-level edit distance between the two questions.
    pub distance: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentReport {
    pub pairs: Vec<AlignedPair>,
    /// Pivots whose character span did not fall on token boundaries and was
    /// widened to the covering tokens.
    pub expanded_spans: usize,
    /// Pivots covering no token at all (skipped).
    pub unmappable: usize,
}

impl AlignmentReport {
    pub fn mean_distance(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.distance as f64).sum::<f64>() / self.pairs.len() as f64
    }
}

/// Token span covering the character range of `pivot`; the flag tells
/// whether the span had to be widened.
fn token_span(tokens: &[Token], pivot: &Answer) -> Option<(usize, usize, bool)> {
    let start = pivot.char_start;
    let end = start + pivot.text.chars().count();
    let first = tokens.iter().position(|t| t.end > start && t.start < end)?;
    let last = tokens.iter().rposition(|t| t.end > start && t.start < end)?;
    let exact = tokens[first].start == start && tokens[last].end == end;
    Some((first, last + 1, !exact))
}

/// Tokenizes `context` and locates `answer` in it, returning the tokens and
/// the covering token span `[start, end)`.
pub fn locate_answer(context: &str, answer: &Answer) -> Option<(Vec<String>, usize, usize)> {
    let tokens = tokenize_with_offsets(context);
    let (start, end, _) = token_span(&tokens, answer)?;
    Some((tokens.into_iter().map(|t| t.text).collect(), start, end))
}

struct Candidate {
    distance: usize,
    answerable: usize,
    unanswerable: usize,
    paragraph: usize,
    pivot: Answer,
}

/// Pairs answerable and unanswerable questions of the same paragraph that
/// share an identical (plausible) answer span. Candidates are accepted
/// greedily in ascending edit distance (ties by dataset order of the
/// answerable, then the unanswerable question) while both questions are
/// still unpaired.
pub fn align_pairs(paragraphs: &[ParagraphRecord]) -> AlignmentReport {
    let mut report = AlignmentReport::default();
    let mut candidates = Vec::new();
    let mut q_tokens: Vec<Vec<String>> = Vec::new();
    let mut q_ids: Vec<&str> = Vec::new();
    let mut para_tokens: Vec<Vec<Token>> = Vec::with_capacity(paragraphs.len());
    let mut unmappable: HashSet<(usize, Answer)> = HashSet::new();

    for (pi, para) in paragraphs.iter().enumerate() {
        let tokens = tokenize_with_offsets(&para.context);
        let mut answerable = Vec::new();
        let mut unanswerable = Vec::new();
        for qa in &para.qas {
            let order = q_tokens.len();
            q_tokens.push(tokenize(&qa.question));
            q_ids.push(&qa.id);
            if qa.is_impossible {
                unanswerable.push((order, qa));
            } else {
                answerable.push((order, qa));
            }
        }
        for &(ai, a) in &answerable {
            for &(ui, u) in &unanswerable {
                let Some(pivot) = a.answers.iter().find(|x| u.answers.contains(x)) else {
                    continue;
                };
                if token_span(&tokens, pivot).is_none() {
                    unmappable.insert((pi, pivot.clone()));
                    continue;
                }
                candidates.push(Candidate {
                    distance: levenshtein(&q_tokens[ai], &q_tokens[ui]),
                    answerable: ai,
                    unanswerable: ui,
                    paragraph: pi,
                    pivot: pivot.clone(),
                });
            }
        }
        para_tokens.push(tokens);
    }
    report.unmappable = unmappable.len();

    candidates.sort_by_key(|c| (c.distance, c.answerable, c.unanswerable));
    let mut used = vec![false; q_tokens.len()];
    let mut accepted = Vec::new();
    for c in candidates {
        if used[c.answerable] || used[c.unanswerable] {
            continue;
        }
        used[c.answerable] = true;
        used[c.unanswerable] = true;
        accepted.push(c);
    }
    accepted.sort_by_key(|c| (c.paragraph, c.answerable));

    for c in accepted {
        let tokens = &para_tokens[c.paragraph];
        let (start, end, widened) = token_span(tokens, &c.pivot).expect("checked above");
        report.expanded_spans += usize::from(widened);
        report.pairs.push(AlignedPair {
            example: PairExample {
                title: paragraphs[c.paragraph].article_title.clone(),
                paragraph: tokens.iter().map(|t| t.text.clone()).collect(),
                answer_start: start,
                answer_end: end,
                answerable: q_tokens[c.answerable].clone(),
                unanswerable: q_tokens[c.unanswerable].clone(),
            },
            answerable_id: q_ids[c.answerable].to_string(),
            unanswerable_id: q_ids[c.unanswerable].to_string(),
            pivot: c.pivot,
            distance: c.distance,
        });
    }
    report
}

/// Splits whole articles into a holdout side holding roughly `fraction` of
/// the items. Articles are visited in a seeded random order and added while
/// the holdout is below target, skipping any article that would push it
/// past `1.2 * fraction`.
pub fn split_holdout<T>(items: Vec<T>, title_of: impl Fn(&T) -> &str, fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut titles: Vec<String> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for it in &items {
        let t = title_of(it);
        let c = counts.entry(t.to_string()).or_insert_with(|| {
            titles.push(t.to_string());
            0
        });
        *c += 1;
    }
    titles.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = items.len() as f64;
    let target = fraction * n;
    let ceiling = (1.2 * fraction * n).floor() as usize;
    let mut chosen: HashSet<String> = HashSet::new();
    let mut held = 0usize;
    for t in titles {
        if held as f64 >= target {
            break;
        }
        let c = counts[&t];
        if held + c <= ceiling {
            held += c;
            chosen.insert(t);
        }
    }
    items.into_iter().partition(|it| !chosen.contains(title_of(it)))
}
