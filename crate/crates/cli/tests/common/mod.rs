#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unansq::dataset::{SquadAnswer, SquadArticle, SquadFile, SquadParagraph, SquadQa};

const PLACES: &[&str] = &[
    "museum",
    "railway",
    "harbor",
    "library",
    "bridge",
    "cathedral",
    "university",
    "observatory",
    "market",
    "theater",
    "canal",
    "stadium",
];
const VERBS: &[(&str, &str)] = &[
    ("founded", "found"),
    ("built", "build"),
    ("expanded", "expand"),
    ("renamed", "rename"),
    ("funded", "fund"),
    ("restored", "restore"),
];
const NAMES: &[&str] = &[
    "Marlowe",
    "Okafor",
    "Lindqvist",
    "Petrescu",
    "Tanaka",
    "Oyelaran",
    "Castell",
    "Vasquez",
    "Brennan",
    "Halvorsen",
];
const CITIES: &[&str] = &["Aldmere", "Brisk", "Corvale", "Dunmore", "Estrel", "Fairhaven"];

/// Variants turning an answerable question about `place` into one the
/// paragraph cannot answer, with the same plausible answer.
fn unanswerable_variant(rng: &mut ChaCha8Rng, verb: &str, place: &str, city: &str, year: u32) -> String {
    match rng.gen_range(0..4) {
        0 => format!("Who never {verb} the {place} in {city} in {year}?"),
        1 => format!("Who {verb} the {place} in {city} after {}?", year + 300),
        2 => format!("Who {verb} the old {place} in {city} in {year}?"),
        _ => format!("Who did not help when someone {verb} the {place} in {city}?"),
    }
}

/// A SQuAD 2.0 file whose paragraphs describe who built what and when,
/// with answerable questions and unanswerable edits of them that share
/// their (plausible) answers.
pub fn synthetic_squad(articles: usize, paragraphs_per_article: usize, seed: u64) -> SquadFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut file = SquadFile::empty();
    let mut next_id = 0usize;
    let mut id = || {
        next_id += 1;
        format!("q{next_id:06}")
    };
    for a in 0..articles {
        let city = CITIES[a % CITIES.len()];
        let mut article = SquadArticle {
            title: format!("{city}_{a}"),
            paragraphs: Vec::new(),
        };
        for _ in 0..paragraphs_per_article {
            let mut context = String::new();
            let mut facts = Vec::new();
            let mut places: Vec<&str> = PLACES.to_vec();
            places.shuffle(&mut rng);
            for &place in places.iter().take(rng.gen_range(3..6)) {
                let (verb, _) = VERBS[rng.gen_range(0..VERBS.len())];
                let name = NAMES[rng.gen_range(0..NAMES.len())];
                let year = rng.gen_range(1700..1990u32);
                if !context.is_empty() {
                    context.push(' ');
                }
                context.push_str(&format!("The {place} in {city} was {verb} by "));
                let start = context.chars().count();
                context.push_str(name);
                context.push_str(&format!(" in {year}."));
                facts.push((place, verb, name, year, start));
            }
            let mut qas = Vec::new();
            for &(place, verb, name, year, start) in &facts {
                let answer = SquadAnswer {
                    text: name.to_string(),
                    answer_start: start,
                };
                qas.push(SquadQa {
                    id: id(),
                    question: format!("Who {verb} the {place} in {city} in {year}?"),
                    is_impossible: false,
                    answers: vec![answer.clone()],
                    plausible_answers: None,
                });
                if rng.gen_bool(0.8) {
                    qas.push(SquadQa {
                        id: id(),
                        question: unanswerable_variant(&mut rng, verb, place, city, year),
                        is_impossible: true,
                        answers: Vec::new(),
                        plausible_answers: Some(vec![answer]),
                    });
                }
            }
            article.paragraphs.push(SquadParagraph { context, qas });
        }
        file.data.push(article);
    }
    file
}

pub fn write_squad(dir: &Path, name: &str, file: &SquadFile) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, file.to_json()).unwrap();
    path
}

pub fn count_answerable(file: &SquadFile) -> usize {
    file.data
        .iter()
        .flat_map(|a| &a.paragraphs)
        .flat_map(|p| &p.qas)
        .filter(|q| !q.is_impossible)
        .count()
}
