//! Dictionary-based entity detection for downstream inputs.
//!
//! A page's own hyperlinks give a surface-to-entity map; text is then
//! scanned for those surfaces with longest-match-first string matching, and
//! matches whose link probability is too low are discarded.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedDocument;
use crate::entity_vocab::{EntityVocab, InterLanguageLinks, MentionStats, DEFAULT_MIN_LINK_PROB};

/// Surface (as a token sequence) to entity id. Surfaces that referred to
/// more than one entity are kept only as blocked entries so that later
/// merges cannot reintroduce them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MentionMap {
    entries: BTreeMap<Vec<String>, BTreeSet<usize>>,
}

impl MentionMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record that `surface` refers to `entity`; a second distinct entity
    /// makes the surface ambiguous.
    pub fn add(&mut self, surface: &[String], entity: usize) {
        if surface.is_empty() {
            return;
        }
        self.entries.entry(surface.to_vec()).or_default().insert(entity);
    }

    /// The entity for an unambiguous surface.
    pub fn get(&self, surface: &[String]) -> Option<usize> {
        match self.entries.get(surface) {
            Some(s) if s.len() == 1 => s.iter().next().copied(),
            _ => None,
        }
    }

    pub fn get_str(&self, surface: &str) -> Option<usize> {
        let toks: Vec<String> = surface.split(' ').map(String::from).collect();
        self.get(&toks)
    }

    /// Unambiguous `(surface, entity)` pairs in surface order.
    pub fn iter(&self) -> impl Iterator<Item = (&[String], usize)> {
        self.entries
            .iter()
            .filter(|(_, s)| s.len() == 1)
            .map(|(k, s)| (k.as_slice(), *s.iter().next().expect("non-empty")))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn max_len(&self) -> usize {
        self.entries.keys().map(Vec::len).max().unwrap_or(0)
    }

    /// `{"surface words": entity_id}` for the unambiguous entries.
    pub fn to_json(&self) -> serde_json::Value {
        let m: BTreeMap<String, usize> = self.iter().map(|(k, v)| (k.join(" "), v)).collect();
        serde_json::to_value(m).expect("string keys")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, serde_json::Error> {
        let m: BTreeMap<String, usize> = serde_json::from_value(v.clone())?;
        let mut out = MentionMap::new();
        for (k, id) in m {
            let toks: Vec<String> = k.split(' ').map(String::from).collect();
            out.add(&toks, id);
        }
        Ok(out)
    }
}

/// A detected mention; serialises as `[start, end, entity_id]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, usize)", into = "(usize, usize, usize)")]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    pub entity: usize,
}

impl From<(usize, usize, usize)> for EntityMention {
    fn from((start, end, entity): (usize, usize, usize)) -> Self {
        EntityMention { start, end, entity }
    }
}

impl From<EntityMention> for (usize, usize, usize) {
    fn from(m: EntityMention) -> Self {
        (m.start, m.end, m.entity)
    }
}

/// Mention map of a page from its hyperlinks. Targets outside the vocabulary
/// are skipped; surfaces linking to several entities are dropped.
pub fn build_mention_map(page: &AnnotatedDocument, vocab: &EntityVocab) -> MentionMap {
    let mut map = MentionMap::new();
    for a in &page.annotations {
        if let Some(id) = vocab.resolve(&page.lang, &a.title) {
            map.add(&page.tokens[a.start..a.end], id);
        }
    }
    map
}

/// Scan `tokens` left to right, taking the longest known surface at each
/// position, then drop matches whose link probability in `language` is below
/// `min_link_prob` (or unknown). A dropped match still consumes its tokens,
/// so raising the threshold never adds annotations.
pub fn detect_entities(
    tokens: &[String],
    map: &MentionMap,
    stats: &MentionStats,
    language: &str,
    min_link_prob: f64,
) -> Vec<EntityMention> {
    let max_len = map.max_len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let matched = (1..=max_len.min(tokens.len() - i))
            .rev()
            .find_map(|len| map.get(&tokens[i..i + len]).map(|entity| (len, entity)));
        match matched {
            Some((len, entity)) => {
                let p = stats
                    .link_probability(language, &tokens[i..i + len].join(" "))
                    .unwrap_or(0.0);
                if p >= min_link_prob {
                    out.push(EntityMention {
                        start: i,
                        end: i + len,
                        entity,
                    });
                }
                i += len;
            }
            None => i += 1,
        }
    }
    out
}

/// Detection with the default 1% link-probability threshold.
pub fn detect_entities_default(
    tokens: &[String],
    map: &MentionMap,
    stats: &MentionStats,
    language: &str,
) -> Vec<EntityMention> {
    detect_entities(tokens, map, stats, language, DEFAULT_MIN_LINK_PROB)
}

/// Anchor texts pointing at each `(language, title)` in a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnchorIndex {
    anchors: HashMap<(String, String), BTreeSet<Vec<String>>>,
}

impl AnchorIndex {
    pub fn from_corpus(docs: &[AnnotatedDocument]) -> Self {
        let mut idx = AnchorIndex::default();
        for d in docs {
            for a in &d.annotations {
                idx.anchors
                    .entry((d.lang.clone(), a.title.clone()))
                    .or_default()
                    .insert(d.tokens[a.start..a.end].to_vec());
            }
        }
        idx
    }

    pub fn surfaces(&self, lang: &str, title: &str) -> Option<&BTreeSet<Vec<String>>> {
        self.anchors.get(&(lang.to_string(), title.to_string()))
    }
}

/// Carry a source-language mention map over to `target_lang`: each entity is
/// mapped to its target article through the inter-language links, and every
/// anchor text of that article in the target corpus becomes a surface.
/// Entities without a target article are omitted.
pub fn translate_mention_map(
    source: &MentionMap,
    vocab: &EntityVocab,
    links: &InterLanguageLinks,
    target_anchors: &AnchorIndex,
    target_lang: &str,
) -> MentionMap {
    let entities: BTreeSet<usize> = source.iter().map(|(_, e)| e).collect();
    let mut out = MentionMap::new();
    for e in entities {
        let Some(entry) = vocab.entry(e) else { continue };
        let Some(title) = links.title_in(&entry.key, target_lang) else {
            continue;
        };
        if let Some(surfaces) = target_anchors.surfaces(target_lang, title) {
            for s in surfaces {
                out.add(s, e);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Annotation;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    fn map(entries: &[(&str, usize)]) -> MentionMap {
        let mut m = MentionMap::new();
        for (s, e) in entries {
            m.add(&toks(s), *e);
        }
        m
    }

    fn stats(entries: &[(&str, u64, u64)]) -> MentionStats {
        let mut st = MentionStats::new();
        for (s, a, b) in entries {
            st.set("en", s, *a, *b).unwrap();
        }
        st
    }

    #[test]
    fn longest_match_wins() {
        let m = map(&[("New York", 5), ("New York City", 6)]);
        let st = stats(&[("New York", 50, 100), ("New York City", 40, 100)]);
        let found = detect_entities(&toks("I love New York City today"), &m, &st, "en", 0.01);
        assert_eq!(found, vec![EntityMention { start: 2, end: 5, entity: 6 }]);
    }

    #[test]
    fn low_link_probability_dropped() {
        let m = map(&[("the", 5), ("Paris", 7)]);
        let st = stats(&[("the", 5, 1000), ("Paris", 30, 100)]);
        let found = detect_entities(&toks("the Paris"), &m, &st, "en", 0.01);
        assert_eq!(found, vec![EntityMention { start: 1, end: 2, entity: 7 }]);
        assert!(detect_entities(&toks("the Paris"), &MentionMap::new(), &st, "en", 0.01).is_empty());
    }

    #[test]
    fn dropped_match_still_consumes_tokens() {
        let m = map(&[("New York", 5), ("New York City", 6), ("City", 7)]);
        let st = stats(&[("New York", 50, 100), ("New York City", 1, 1000), ("City", 50, 100)]);
        let found = detect_entities(&toks("New York City"), &m, &st, "en", 0.01);
        assert!(found.is_empty());
        let found = detect_entities(&toks("New York City"), &m, &st, "en", 0.001);
        assert_eq!(found, vec![EntityMention { start: 0, end: 3, entity: 6 }]);
    }

    #[test]
    fn ambiguous_surface_removed() {
        let mut m = map(&[("U.S.", 3)]);
        assert_eq!(m.get_str("U.S."), Some(3));
        m.add(&toks("Mercury"), 8);
        m.add(&toks("Mercury"), 9);
        assert_eq!(m.get_str("Mercury"), None);
        assert_eq!(m.len(), 1);
        m.add(&toks("Mercury"), 8);
        assert_eq!(m.get_str("Mercury"), None);
    }

    #[test]
    fn mention_json_shapes() {
        let m = EntityMention { start: 1, end: 3, entity: 9 };
        assert_eq!(serde_json::to_string(&m).unwrap(), "[1,3,9]");
        let mm = map(&[("New York", 5)]);
        assert_eq!(MentionMap::from_json(&mm.to_json()).unwrap(), mm);
    }

    #[test]
    fn page_map_skips_unknown_targets() {
        let vocab = EntityVocab::default();
        let page = AnnotatedDocument {
            lang: "en".into(),
            title: "P".into(),
            tokens: toks("a b"),
            sentence_breaks: vec![],
            annotations: vec![Annotation { start: 0, end: 1, title: "Nowhere".into() }],
        };
        assert!(build_mention_map(&page, &vocab).is_empty());
    }
}
