//! Templated two-document corpus with bridge-entity questions, used for
//! overfitting and ablation runs.
//!
//! Document 0 describes a person born in a city; document 1 describes
//! that city. The city is the bridge entity. Which sentences support the
//! question follows from where the answer sits, so the supporting facts
//! are recoverable from the context and answer alone.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Answer, AnnotatedExample, CorefDoc, CorefMention, Document, EntityMention, Level, QType,
};
use crate::error::Result;
use crate::tokenizer::Vocabulary;

const PERSONS: &[&str] = &[
    "alma", "boris", "celia", "dmitri", "edith", "farid", "greta", "hugo", "ines", "jonas",
    "kira", "lorenzo", "mara", "nils", "olga", "pavel", "quinn", "rosa", "stefan", "tilda",
    "ulrich", "vera", "willem", "yara",
];
const CITIES: &[&str] = &[
    "arden", "belmar", "corvel", "dunmore", "elston", "farrow", "glenhaven", "harlow", "ivesby",
    "jarrow", "kelso", "lindale", "marlow", "norcross", "oakham", "pellham", "ravensby",
    "selwick", "thornbury", "upton", "valcourt", "westerly", "yarmouth", "zennor",
];
const COUNTRIES: &[&str] = &[
    "aldonia", "brevia", "carmona", "delmark", "estoria", "fennland", "galdor", "hestia",
];
const JOBS: &[&str] = &[
    "painter", "banker", "sculptor", "chemist", "poet", "architect", "surgeon", "composer",
];
const LANDMARKS: &[&str] = &[
    "cathedral", "lighthouse", "bridge", "museum", "tower", "harbour", "library", "castle",
];
const HOBBIES: &[&str] = &["chess", "sailing", "music", "gardening", "cycling", "poetry"];
const PADDING: &[&str] = &[
    "and", "please", "note", "that", "this", "question", "is", "asked", "with", "some", "extra",
    "words", "added", "for", "length",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub examples: usize,
    pub seed: u64,
    /// Fraction of examples whose question is padded to `long_words`.
    pub long_fraction: f64,
    pub long_words: usize,
    pub include_yes_no: bool,
    pub shuffle_sentences: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            examples: 64,
            seed: 0,
            long_fraction: 0.0,
            long_words: 70,
            include_yes_no: true,
            shuffle_sentences: true,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Born,
    Job,
    Hobby,
    Country,
    Landmark,
    Border,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

struct Facts<'a> {
    person: &'a str,
    city: &'a str,
    country: &'a str,
    other: &'a str,
    job: &'a str,
    landmark: &'a str,
    hobby: &'a str,
}

impl Facts<'_> {
    fn sentence(&self, k: Kind) -> Vec<String> {
        match k {
            Kind::Born => words(&format!("{} was born in {} .", self.person, self.city)),
            Kind::Job => words(&format!("he worked as a {} for many years .", self.job)),
            Kind::Hobby => words(&format!("{} enjoyed {} .", self.person, self.hobby)),
            Kind::Country => words(&format!("{} is a city in {} .", self.city, self.country)),
            Kind::Landmark => words(&format!("it has a famous {} .", self.landmark)),
            Kind::Border => words(&format!("{} lies near the border with {} .", self.city, self.other)),
        }
    }
}

pub fn synthetic_corpus(cfg: &SyntheticConfig) -> Vec<AnnotatedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let long_count = (cfg.examples as f64 * cfg.long_fraction).round() as usize;
    let mut long: Vec<bool> = (0..cfg.examples).map(|i| i < long_count).collect();
    long.shuffle(&mut rng);
    (0..cfg.examples)
        .map(|i| make_example(i, long[i], cfg, &mut rng))
        .collect()
}

fn make_example(i: usize, long: bool, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> AnnotatedExample {
    let countries: Vec<&str> = COUNTRIES.choose_multiple(rng, 2).copied().collect();
    let f = Facts {
        person: PERSONS.choose(rng).unwrap(),
        city: CITIES.choose(rng).unwrap(),
        country: countries[0],
        other: countries[1],
        job: JOBS.choose(rng).unwrap(),
        landmark: LANDMARKS.choose(rng).unwrap(),
        hobby: HOBBIES.choose(rng).unwrap(),
    };
    let mut d0 = vec![Kind::Born, Kind::Job, Kind::Hobby];
    let mut d1 = vec![Kind::Country, Kind::Landmark, Kind::Border];
    if cfg.shuffle_sentences {
        d0.shuffle(rng);
        d1.shuffle(rng);
    }
    let at = |doc: &[Kind], k: Kind| doc.iter().position(|&x| x == k).unwrap();
    let (born, job, hobby) = (at(&d0, Kind::Born), at(&d0, Kind::Job), at(&d0, Kind::Hobby));
    let (country, landmark, border) = (
        at(&d1, Kind::Country),
        at(&d1, Kind::Landmark),
        at(&d1, Kind::Border),
    );

    let templates = if cfg.include_yes_no { 5 } else { 3 };
    let (question, answer, qtype, sf) = match rng.random_range(0..templates) {
        0 => (
            format!("which country is the birthplace of {} in ?", f.person),
            Answer::Span { doc: 1, sentence: country, start: 5, end: 6 },
            QType::Bridge,
            vec![(0, born), (1, country)],
        ),
        1 => (
            format!("what famous landmark is in the city where {} was born ?", f.person),
            Answer::Span { doc: 1, sentence: landmark, start: 4, end: 5 },
            QType::Bridge,
            vec![(0, born), (1, landmark)],
        ),
        2 => (
            format!("which {} was born in the city with the famous {} ?", f.job, f.landmark),
            Answer::Span { doc: 0, sentence: born, start: 0, end: 1 },
            QType::Bridge,
            vec![(0, born), (0, job), (1, landmark)],
        ),
        3 => (
            format!("was {} born in {} ?", f.person, f.country),
            Answer::Yes,
            QType::Comparison,
            vec![(0, born), (1, country)],
        ),
        _ => (
            format!("was {} born in {} ?", f.person, f.other),
            Answer::No,
            QType::Comparison,
            vec![(0, born), (1, country), (1, border)],
        ),
    };
    let mut question = words(&question);
    if long {
        let mut k = 0;
        while question.len() < cfg.long_words {
            question.insert(question.len() - 1, PADDING[k % PADDING.len()].to_string());
            k += 1;
        }
    }

    let mention = |doc, sentence, start, label: &str| EntityMention {
        doc,
        sentence,
        start,
        end: start + 1,
        label: label.into(),
        norm: String::new(),
    };
    let entities = vec![
        mention(0, born, 0, "PERSON"),
        mention(0, born, 4, "GPE"),
        mention(0, hobby, 0, "PERSON"),
        mention(1, country, 0, "GPE"),
        mention(1, country, 5, "GPE"),
        mention(1, border, 0, "GPE"),
        mention(1, border, 6, "GPE"),
    ];
    let cm = |sentence, start| CorefMention { sentence, start, end: start + 1 };
    let coref = vec![
        CorefDoc {
            doc: 0,
            clusters: vec![vec![cm(born, 0), cm(job, 0), cm(hobby, 0)]],
        },
        CorefDoc {
            doc: 1,
            clusters: vec![vec![cm(country, 0), cm(landmark, 0), cm(border, 0)]],
        },
    ];
    let level = if long { Level::Easy } else { [Level::Medium, Level::Hard][i % 2] };
    AnnotatedExample {
        id: format!("synth-{i:05}"),
        documents: vec![
            Document {
                title: f.person.into(),
                sentences: d0.iter().map(|&k| f.sentence(k)).collect(),
            },
            Document {
                title: f.city.into(),
                sentences: d1.iter().map(|&k| f.sentence(k)).collect(),
            },
        ],
        answer,
        question,
        supporting_facts: sf,
        qtype,
        level,
        entities,
        coref,
    }
}

/// Whitespace vocabulary covering every word the generator can emit.
pub fn synthetic_vocabulary() -> Result<Vocabulary> {
    let fixed = "was born in . he worked as a for many years enjoyed is city it has famous \
                 lies near the border with which country birthplace of what landmark where \
                 ? yes no";
    let lines: Vec<String> = [PERSONS, CITIES, COUNTRIES, JOBS, LANDMARKS, HOBBIES, PADDING]
        .iter()
        .map(|p| p.join(" "))
        .chain([fixed.to_string()])
        .collect();
    Vocabulary::build(lines.iter().map(String::as_str), 1000)
}
