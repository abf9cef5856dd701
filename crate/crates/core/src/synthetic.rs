//! A toy two-language corpus for end-to-end checks: parallel template
//! sentences in `en` and `fr` whose slots are filled with a shared set of
//! entities that have different surface forms in each language.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::SpanItem;
use crate::corpus::{self, AnnotatedDocument, Annotation};
use crate::entity_vocab::{EntityVocab, EntityVocabError, InterLanguageLinks};
use crate::linker::EntityMention;
use crate::vocab::WordVocab;

pub const LANGUAGES: [&str; 2] = ["en", "fr"];

/// Parallel templates; `P` slots take people, `L` slots places.
const TEMPLATES: [(&str, &str); 6] = [
    ("P was born in L .", "P est ne a L ."),
    ("P lives in L .", "P habite a L ."),
    ("P visited L last year .", "P a visite L l' an dernier ."),
    ("L is the home town of P .", "L est la ville natale de P ."),
    ("P met P in L .", "P a rencontre P a L ."),
    ("the friend of P moved to L .", "l' ami de P a demenage a L ."),
];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    /// Parallel pairs used for training; each yields one sequence per language.
    pub pairs: usize,
    pub heldout_pairs: usize,
    /// Number of shared entities; the first half are people.
    pub entities: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            pairs: 250,
            heldout_pairs: 50,
            entities: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Vec<AnnotatedDocument>,
    pub heldout: Vec<AnnotatedDocument>,
    pub links: InterLanguageLinks,
    pub words: WordVocab,
    pub entities: EntityVocab,
}

fn surface(lang: &str, entity: usize, people: usize) -> String {
    match (lang, entity < people) {
        ("en", true) => format!("person{entity}"),
        ("en", false) => format!("city{entity}"),
        (_, true) => format!("personne{entity}"),
        (_, false) => format!("ville{entity}"),
    }
}

fn title(lang: &str, entity: usize) -> String {
    format!("{}_{entity}", lang.to_uppercase())
}

fn fill(template: &str, lang: &str, fillers: &[usize], people: usize, name: String) -> AnnotatedDocument {
    let mut tokens = Vec::new();
    let mut annotations = Vec::new();
    let mut next = fillers.iter();
    for t in template.split(' ') {
        if t == "P" || t == "L" {
            let e = *next.next().expect("one filler per slot");
            annotations.push(Annotation {
                start: tokens.len(),
                end: tokens.len() + 1,
                title: title(lang, e),
            });
            tokens.push(surface(lang, e, people));
        } else {
            tokens.push(t.to_string());
        }
    }
    AnnotatedDocument {
        lang: lang.to_string(),
        title: name,
        tokens,
        sentence_breaks: Vec::new(),
        annotations,
    }
}

impl SyntheticCorpus {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self, EntityVocabError> {
        let people = spec.entities / 2;
        if people == 0 || spec.entities - people == 0 {
            return Err(EntityVocabError::Argument("need at least two entities".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut links = InterLanguageLinks::new();
        for e in 0..spec.entities {
            for lang in LANGUAGES {
                links.insert(lang, &title(lang, e), &format!("Q{e}"))?;
            }
        }
        let mut make = |count: usize, offset: usize| {
            let mut docs = Vec::with_capacity(2 * count);
            for k in 0..count {
                let (en, fr) = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
                let mut fillers = Vec::new();
                for slot in en.split(' ').filter(|t| *t == "P" || *t == "L") {
                    let e = if slot == "P" {
                        rng.random_range(0..people)
                    } else {
                        rng.random_range(people..spec.entities)
                    };
                    fillers.push(e);
                }
                let id = format!("pair-{}", offset + k);
                docs.push(fill(en, "en", &fillers, people, id.clone()));
                docs.push(fill(fr, "fr", &fillers, people, id));
            }
            docs
        };
        let train = make(spec.pairs, 0);
        let heldout = make(spec.heldout_pairs, spec.pairs);
        let words = WordVocab::build(
            train.iter().chain(&heldout).flat_map(|d| d.tokens.iter().map(String::as_str)),
            1,
        );
        let entities = EntityVocab::build(&train, &links, 2, usize::MAX)?;
        Ok(SyntheticCorpus {
            train,
            heldout,
            links,
            words,
            entities,
        })
    }

    /// One span item per entity mention, with every resolvable mention of the
    /// sentence attached as an entity. Ids are `{doc title}-{slot}` so that
    /// parallel mentions share an id.
    pub fn mention_items(&self, docs: &[AnnotatedDocument]) -> Vec<SpanItem> {
        let mut out = Vec::new();
        for d in docs {
            let mentions: Vec<EntityMention> = d
                .annotations
                .iter()
                .filter_map(|a| {
                    self.entities.resolve(&d.lang, &a.title).map(|entity| EntityMention {
                        start: a.start,
                        end: a.end,
                        entity,
                    })
                })
                .collect();
            for (slot, a) in d.annotations.iter().enumerate() {
                out.push(SpanItem {
                    id: format!("{}-{slot}", d.title),
                    lang: d.lang.clone(),
                    tokens: d.tokens.clone(),
                    start: a.start,
                    end: a.end,
                    entities: mentions.clone(),
                });
            }
        }
        out
    }

    /// Write `train.jsonl`, `heldout.jsonl`, `links.tsv`, `words.txt` and
    /// `entities.tsv` under `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let create = |name: &str| std::fs::File::create(dir.join(name)).map(std::io::BufWriter::new);
        corpus::write_corpus(create("train.jsonl")?, &self.train)?;
        corpus::write_corpus(create("heldout.jsonl")?, &self.heldout)?;
        let mut w = create("links.tsv")?;
        self.links.write_tsv(&mut w)?;
        w.flush()?;
        let mut w = create("words.txt")?;
        self.words.write(&mut w)?;
        w.flush()?;
        let mut w = create("entities.tsv")?;
        self.entities.write(&mut w)?;
        w.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape() {
        let c = SyntheticCorpus::generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(c.train.len(), 500);
        assert_eq!(c.heldout.len(), 100);
        for d in c.train.iter().chain(&c.heldout) {
            d.validate().unwrap();
        }
        assert!(c.entities.len() <= 30 + crate::entity_vocab::NUM_SPECIAL);
        let en = &c.train[0];
        let fr = &c.train[1];
        assert_eq!(en.title, fr.title);
        assert_eq!(en.annotations.len(), fr.annotations.len());
        for (a, b) in en.annotations.iter().zip(&fr.annotations) {
            assert_eq!(c.entities.resolve("en", &a.title), c.entities.resolve("fr", &b.title));
        }
        let again = SyntheticCorpus::generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(again.train, c.train);
    }

    #[test]
    fn mention_items_pair_up() {
        let c = SyntheticCorpus::generate(&SyntheticSpec {
            pairs: 3,
            heldout_pairs: 2,
            ..Default::default()
        })
        .unwrap();
        let items = c.mention_items(&c.heldout);
        let en: Vec<_> = items.iter().filter(|i| i.lang == "en").map(|i| &i.id).collect();
        let fr: Vec<_> = items.iter().filter(|i| i.lang == "fr").map(|i| &i.id).collect();
        assert_eq!(en, fr);
    }
}
