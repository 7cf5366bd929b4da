use std::collections::HashMap;

use super::{ParagraphRecord, QuestionRecord, SquadAnswer, SquadArticle, SquadFile, SquadParagraph, SquadQa};
use crate::text::tokenize;

/// An answerable question together with the paragraph it was asked about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceQuestion {
    pub title: String,
    pub context: String,
    pub record: QuestionRecord,
}

/// Every answerable question in dataset order.
pub fn answerable_sources(paragraphs: &[ParagraphRecord]) -> Vec<SourceQuestion> {
    paragraphs
        .iter()
        .flat_map(|p| {
            p.qas.iter().filter(|q| !q.is_impossible).map(move |q| SourceQuestion {
                title: p.article_title.clone(),
                context: p.context.clone(),
                record: q.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub file: SquadFile,
    pub records: usize,
    /// Generations dropped for being empty or identical to their source.
    pub skipped: usize,
}

/// Turns generated questions into SQuAD 2.0 unanswerable records: the source
/// paragraph, the generated text, `is_impossible = true` and the source
/// answers as plausible answers. Ids are `<source_id>-unansq-<k>` with `k`
/// counting kept generations per source from 0.
pub fn build_augmentation(generated: &[(SourceQuestion, Vec<String>)]) -> Augmentation {
    let mut file = SquadFile::empty();
    let mut article_index: HashMap<String, usize> = HashMap::new();
    let mut paragraph_index: HashMap<(usize, String), usize> = HashMap::new();
    let mut per_source: HashMap<String, usize> = HashMap::new();
    let mut skipped = 0;
    let mut records = 0;

    for (src, tokens) in generated {
        if tokens.is_empty() || *tokens == tokenize(&src.record.question) {
            skipped += 1;
            continue;
        }
        let ai = *article_index.entry(src.title.clone()).or_insert_with(|| {
            file.data.push(SquadArticle {
                title: src.title.clone(),
                paragraphs: Vec::new(),
            });
            file.data.len() - 1
        });
        let pi = *paragraph_index.entry((ai, src.context.clone())).or_insert_with(|| {
            file.data[ai].paragraphs.push(SquadParagraph {
                context: src.context.clone(),
                qas: Vec::new(),
            });
            file.data[ai].paragraphs.len() - 1
        });
        let k = per_source.entry(src.record.id.clone()).or_insert(0);
        let plausible = src
            .record
            .answers
            .iter()
            .map(|a| SquadAnswer {
                text: a.text.clone(),
                answer_start: a.char_start,
            })
            .collect();
        file.data[ai].paragraphs[pi].qas.push(SquadQa {
            id: format!("{}-unansq-{}", src.record.id, k),
            question: tokens.join(" "),
            is_impossible: true,
            answers: Vec::new(),
            plausible_answers: Some(plausible),
        });
        *k += 1;
        records += 1;
    }
    Augmentation { file, records, skipped }
}
