//! Corpus BLEU, source-penalized GLEU, ROUGE-N and ROUGE-L.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::{Error, Result};

/// Source question, generated hypothesis and gold reference, all tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalTriple {
    pub source: Vec<String>,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

fn ngrams<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    out
}

fn clipped_overlap(hyp: &HashMap<Vec<&str>, usize>, reference: &HashMap<Vec<&str>, usize>) -> usize {
    hyp.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    }
}

/// Geometric mean of `num[n] / den[n]`; zero when any precision is zero.
fn geometric_mean(num: &[f64], den: &[f64]) -> f64 {
    let mut log_sum = 0.0;
    for (&a, &b) in num.iter().zip(den) {
        if a <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        log_sum += (a / b).ln();
    }
    (log_sum / num.len() as f64).exp()
}

fn check(len: usize, max_n: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Invalid("cannot score an empty corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::Invalid("n-gram order must be at least 1".into()));
    }
    Ok(())
}

/// Corpus BLEU with clipped n-gram precisions pooled over the corpus,
/// uniform weights and the brevity penalty.
pub fn bleu<S: AsRef<str>>(corpus: &[(Vec<S>, Vec<S>)], max_n: usize) -> Result<f64> {
    check(corpus.len(), max_n)?;
    let mut num = vec![0.0; max_n];
    let mut den = vec![0.0; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (hyp, reference) in corpus {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let h = ngrams(hyp, n);
            num[n - 1] += clipped_overlap(&h, &ngrams(reference, n)) as f64;
            den[n - 1] += h.values().sum::<usize>() as f64;
        }
    }
    Ok(brevity_penalty(hyp_len, ref_len) * geometric_mean(&num, &den))
}

/// BLEU whose per-order matches are reduced by hypothesis n-grams copied
/// from the source but absent from the reference. For each n-gram `g` with
/// no reference occurrence the penalty is `min(count_hyp(g),
/// count_source(g))`; the per-sentence numerator is clipped at zero.
pub fn gleu(corpus: &[EvalTriple], max_n: usize) -> Result<f64> {
    check(corpus.len(), max_n)?;
    let mut num = vec![0.0; max_n];
    let mut den = vec![0.0; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for t in corpus {
        hyp_len += t.hypothesis.len();
        ref_len += t.reference.len();
        for n in 1..=max_n {
            let h = ngrams(&t.hypothesis, n);
            let r = ngrams(&t.reference, n);
            let s = ngrams(&t.source, n);
            let matches = clipped_overlap(&h, &r);
            let penalty: usize = h
                .iter()
                .filter(|(g, _)| !r.contains_key(*g))
                .map(|(g, &c)| c.min(s.get(g).copied().unwrap_or(0)))
                .sum();
            num[n - 1] += matches.saturating_sub(penalty) as f64;
            den[n - 1] += h.values().sum::<usize>() as f64;
        }
    }
    Ok(brevity_penalty(hyp_len, ref_len) * geometric_mean(&num, &den))
}

/// Recall, precision and F1.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rouge {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl Rouge {
    fn from_counts(overlap: usize, ref_total: usize, hyp_total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let recall = ratio(overlap, ref_total);
        let precision = ratio(overlap, hyp_total);
        let f1 = if recall + precision == 0.0 {
            0.0
        } else {
            2.0 * recall * precision / (recall + precision)
        };
        Self { recall, precision, f1 }
    }

    /// Arithmetic mean of each component.
    pub fn mean(scores: &[Rouge]) -> Rouge {
        if scores.is_empty() {
            return Rouge::default();
        }
        let n = scores.len() as f64;
        Rouge {
            recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
            precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
            f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
        }
    }
}

pub fn rouge_n<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> Rouge {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    Rouge::from_counts(clipped_overlap(&h, &r), r.values().sum(), h.values().sum())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Rouge {
    let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    Rouge::from_counts(lcs_len(&h, &r), r.len(), h.len())
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// `name=value` lines with four decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, value) in &self.entries {
            let _ = writeln!(s, "{name}={value:.4}");
        }
        s
    }
}

/// BLEU-3/4, GLEU-3/4, ROUGE-2/3 and ROUGE-L over the corpus.
pub fn evaluate(corpus: &[EvalTriple]) -> Result<MetricsReport> {
    let pairs: Vec<(Vec<String>, Vec<String>)> = corpus
        .iter()
        .map(|t| (t.hypothesis.clone(), t.reference.clone()))
        .collect();
    let mut entries = vec![
        ("bleu3".to_string(), bleu(&pairs, 3)?),
        ("bleu4".to_string(), bleu(&pairs, 4)?),
        ("gleu3".to_string(), gleu(corpus, 3)?),
        ("gleu4".to_string(), gleu(corpus, 4)?),
    ];
    let mut push_rouge = |name: &str, scores: Vec<Rouge>| {
        let m = Rouge::mean(&scores);
        entries.push((format!("{name}_f1"), m.f1));
        entries.push((format!("{name}_recall"), m.recall));
        entries.push((format!("{name}_precision"), m.precision));
    };
    for n in [2, 3] {
        push_rouge(
            &format!("rouge{n}"),
            corpus.iter().map(|t| rouge_n(&t.hypothesis, &t.reference, n)).collect(),
        );
    }
    push_rouge(
        "rougeL",
        corpus.iter().map(|t| rouge_l(&t.hypothesis, &t.reference)).collect(),
    );
    Ok(MetricsReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
    }

    fn triple(src: &str, hyp: &str, reference: &str) -> EvalTriple {
        EvalTriple {
            source: toks(src),
            hypothesis: toks(hyp),
            reference: toks(reference),
        }
    }

    /// Independent n-gram counting over joined strings.
    fn oracle_bleu(hyps: &[&str], refs: &[&str], max_n: usize) -> f64 {
        let grams = |s: &str, n: usize| -> Vec<String> {
            let w: Vec<&str> = s.split(' ').collect();
            if w.len() < n {
                return vec![];
            }
            (0..=w.len() - n).map(|i| w[i..i + n].join("\u{1}")).collect()
        };
        let mut logp = 0.0;
        for n in 1..=max_n {
            let (mut m, mut t) = (0usize, 0usize);
            for (h, r) in hyps.iter().zip(refs) {
                let hg = grams(h, n);
                let mut rg = grams(r, n);
                t += hg.len();
                for g in hg {
                    if let Some(pos) = rg.iter().position(|x| *x == g) {
                        rg.remove(pos);
                        m += 1;
                    }
                }
            }
            logp += (m as f64 / t as f64).ln() / max_n as f64;
        }
        let c: usize = hyps.iter().map(|h| h.split(' ').count()).sum();
        let r: usize = refs.iter().map(|h| h.split(' ').count()).sum();
        let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
        bp * logp.exp()
    }

    #[test]
    fn bleu_examples() {
        let same = vec![(toks("who runs the schools ?"), toks("who runs the schools ?"))];
        assert!((bleu(&same, 4).unwrap() - 1.0).abs() < 1e-12);
        let short = vec![(toks("the cat"), toks("the cat sat"))];
        let b = bleu(&short, 2).unwrap();
        assert!((b - (-0.5f64).exp()).abs() < 1e-12);
        assert!((b - 0.6065).abs() < 5e-5);
        assert!((b - oracle_bleu(&["the cat"], &["the cat sat"], 2)).abs() < 1e-12);
        let disjoint = vec![(toks("a b c"), toks("d e f"))];
        assert_eq!(bleu(&disjoint, 3).unwrap(), 0.0);
        assert!(bleu::<String>(&[], 4).is_err());
    }

    #[test]
    fn bleu_matches_oracle_on_corpus() {
        let hyps = [
            "what do dogs eat at night ?",
            "where does the lake flow",
            "who never runs the public schools ?",
        ];
        let refs = [
            "what do dogs eat ?",
            "where does the lake flow to ?",
            "who never runs the schools ?",
        ];
        let corpus: Vec<_> = hyps.iter().zip(&refs).map(|(h, r)| (toks(h), toks(r))).collect();
        for n in [3, 4] {
            assert!((bleu(&corpus, n).unwrap() - oracle_bleu(&hyps, &refs, n)).abs() < 1e-12);
        }
    }

    #[test]
    fn gleu_examples() {
        let exact = [triple(
            "who runs the schools ?",
            "who never runs the schools ?",
            "who never runs the schools ?",
        )];
        assert!((gleu(&exact, 4).unwrap() - 1.0).abs() < 1e-12);

        let copy1 = [triple(
            "who runs the public schools ?",
            "who runs the public schools ?",
            "who runs the public pools ?",
        )];
        let pairs1 = vec![(copy1[0].hypothesis.clone(), copy1[0].reference.clone())];
        assert!(bleu(&pairs1, 3).unwrap() > 0.0);
        assert!(gleu(&copy1, 3).unwrap() < bleu(&pairs1, 3).unwrap());

        let fresh = [triple(
            "alpha beta gamma",
            "who runs the pools ?",
            "who runs the public pools ?",
        )];
        let pairs2 = vec![(fresh[0].hypothesis.clone(), fresh[0].reference.clone())];
        assert_eq!(gleu(&fresh, 3).unwrap(), bleu(&pairs2, 3).unwrap());
    }

    #[test]
    fn gleu_penalty_by_hand() {
        // Unigrams: hyp {a, b, x}, ref {a, b, c}, source {x}: matches 2,
        // penalty 1 (x), numerator 1 of 3.
        let t = [triple("x", "a b x", "a b c")];
        assert!((gleu(&t, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let pairs = vec![(t[0].hypothesis.clone(), t[0].reference.clone())];
        assert!((bleu(&pairs, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        let r = rouge_l(&toks("a c d"), &toks("a b c d"));
        assert!((r.recall - 0.75).abs() < 1e-12);
        assert!((r.precision - 1.0).abs() < 1e-12);
        assert!((r.f1 - 6.0 / 7.0).abs() < 1e-12);
        assert!((r.f1 - 0.857).abs() < 5e-4);
        let same = toks("who runs it ?");
        assert_eq!(
            rouge_l(&same, &same),
            Rouge {
                recall: 1.0,
                precision: 1.0,
                f1: 1.0
            }
        );
        assert_eq!(
            rouge_n(&same, &same, 2),
            Rouge {
                recall: 1.0,
                precision: 1.0,
                f1: 1.0
            }
        );
        assert_eq!(rouge_n(&toks("a b"), &toks("c d"), 2), Rouge::default());
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")), Rouge::default());
        assert_eq!(rouge_n(&toks("a b"), &toks("a b"), 3), Rouge::default());
        let r2 = rouge_n(&toks("a b c a b"), &toks("a b d"), 2);
        assert!((r2.recall - 0.5).abs() < 1e-12 && (r2.precision - 0.25).abs() < 1e-12);
    }

    /// Longest common subsequence by enumerating subsequences of `a`.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let is_subseq = |s: &[u8]| {
            let mut it = b.iter();
            s.iter().all(|c| it.any(|x| x == c))
        };
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let s: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
            if s.len() > best && is_subseq(&s) {
                best = s.len();
            }
        }
        best
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in proptest::collection::vec(0u8..4, 0..=8), b in proptest::collection::vec(0u8..4, 0..=8)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn scores_are_bounded_and_order_free(
            corpus in proptest::collection::vec(
                (proptest::collection::vec(0u8..5, 0..7), proptest::collection::vec(0u8..5, 1..7), proptest::collection::vec(0u8..5, 1..7)),
                1..6,
            )
        ) {
            let s = |v: &Vec<u8>| v.iter().map(|x| format!("w{x}")).collect::<Vec<_>>();
            let triples: Vec<EvalTriple> = corpus
                .iter()
                .map(|(src, h, r)| EvalTriple { source: s(src), hypothesis: s(h), reference: s(r) })
                .collect();
            let pairs: Vec<_> = triples.iter().map(|t| (t.hypothesis.clone(), t.reference.clone())).collect();
            let b = bleu(&pairs, 3).unwrap();
            let g = gleu(&triples, 3).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!((0.0..=1.0).contains(&g));
            prop_assert!(g <= b + 1e-12);
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert!((bleu(&rev, 3).unwrap() - b).abs() < 1e-12);
            for t in &triples {
                for r in [rouge_l(&t.hypothesis, &t.reference), rouge_n(&t.hypothesis, &t.reference, 2)] {
                    prop_assert!((0.0..=1.0).contains(&r.f1));
                    prop_assert!((0.0..=1.0).contains(&r.recall));
                    prop_assert!((0.0..=1.0).contains(&r.precision));
                }
            }
            // Identical corpora score one.
            let same: Vec<_> = pairs.iter().map(|(_, r)| (r.clone(), r.clone())).collect();
            if same.iter().all(|(r, _)| r.len() >= 3) {
                prop_assert!((bleu(&same, 3).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn report_format() {
        let c = [triple("who runs it ?", "who never runs it ?", "who never runs it ?")];
        let r = evaluate(&c).unwrap();
        let text = r.to_text();
        assert!(text.starts_with("bleu3=1.0000\nbleu4=1.0000\ngleu3=1.0000\n"));
        assert!(text.contains("rougeL_f1=1.0000\n"));
        assert_eq!(r.get("rouge2_recall"), Some(1.0));
    }
}
