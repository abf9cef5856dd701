//! Corpus ingestion, sequence generation, language-balanced sampling and
//! MLM/MEP masking.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::de::{self, SeqAccess, Visitor};
use serde::ser::SerializeTuple;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::encoder::EncodedSequence;
use crate::entity_vocab::{self, EntityVocab};
use crate::seeding::{rng_for, Stream};
use crate::vocab::{self, WordVocab};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("invalid document {title:?}: {reason}")]
    Document { title: String, reason: String },
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// A hyperlink span `[start, end)` over document tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    pub title: String,
}

impl Serialize for Annotation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut t = s.serialize_tuple(3)?;
        t.serialize_element(&self.start)?;
        t.serialize_element(&self.end)?;
        t.serialize_element(&self.title)?;
        t.end()
    }
}

impl<'de> Deserialize<'de> for Annotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Annotation;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("[start, end, title]")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut a: A) -> std::result::Result<Annotation, A::Error> {
                let start = a.next_element()?.ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let end = a.next_element()?.ok_or_else(|| de::Error::invalid_length(1, &self))?;
                let title = a.next_element()?.ok_or_else(|| de::Error::invalid_length(2, &self))?;
                Ok(Annotation { start, end, title })
            }
        }
        d.deserialize_tuple(3, V)
    }
}

/// One corpus line: a page (or part of one) with its hyperlinks.
///
/// `sentence_breaks` holds the exclusive end offsets of sentences; the last
/// sentence always runs to the end of `tokens`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub lang: String,
    pub title: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub sentence_breaks: Vec<usize>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl AnnotatedDocument {
    pub fn surface(&self, a: &Annotation) -> String {
        self.tokens[a.start..a.end].join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(CorpusError::Document {
                title: self.title.clone(),
                reason,
            })
        };
        let n = self.tokens.len();
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(self.annotations.len());
        for a in &self.annotations {
            if !(a.start < a.end && a.end <= n) {
                return bad(format!("annotation [{}, {}) outside 0..{n}", a.start, a.end));
            }
            spans.push((a.start, a.end));
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return bad("overlapping annotations".into());
        }
        if self.sentence_breaks.windows(2).any(|w| w[1] <= w[0])
            || self.sentence_breaks.iter().any(|&b| b == 0 || b > n)
        {
            return bad("sentence breaks must be increasing offsets in 1..=len".into());
        }
        Ok(())
    }
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<AnnotatedDocument>> {
    let mut docs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: AnnotatedDocument =
            serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?;
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus<W: Write>(mut w: W, docs: &[AnnotatedDocument]) -> std::io::Result<()> {
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

const TERMINAL_PUNCT: [&str; 6] = [".", "!", "?", "。", "！", "？"];

/// Sentence end offsets: the explicit markers if present, otherwise a split
/// after terminal punctuation tokens.
pub fn sentence_ends(doc: &AnnotatedDocument) -> Vec<usize> {
    let n = doc.tokens.len();
    let mut ends: Vec<usize> = if doc.sentence_breaks.is_empty() {
        doc.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| TERMINAL_PUNCT.contains(&t.as_str()))
            .map(|(i, _)| i + 1)
            .collect()
    } else {
        doc.sentence_breaks.clone()
    };
    if ends.last() != Some(&n) && n > 0 {
        ends.push(n);
    }
    ends
}

/// Greedily pack whole sentences into sequences of at most `max_words` tokens.
///
/// Sentences longer than `max_words` are hard-split. Annotations are kept
/// only if they fall entirely inside one output sequence.
pub fn split_sequences(doc: &AnnotatedDocument, max_words: usize) -> Result<Vec<AnnotatedDocument>> {
    if max_words == 0 {
        return Err(CorpusError::Argument("max_words must be >= 1".into()));
    }
    let mut pieces: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for end in sentence_ends(doc) {
        let mut s = start;
        while end - s > max_words {
            pieces.push((s, s + max_words));
            s += max_words;
        }
        if end > s {
            pieces.push((s, end));
        }
        start = end;
    }

    let mut cuts: Vec<(usize, usize)> = Vec::new();
    for (s, e) in pieces {
        match cuts.last_mut() {
            Some(cur) if e - cur.0 <= max_words => cur.1 = e,
            _ => cuts.push((s, e)),
        }
    }

    Ok(cuts
        .into_iter()
        .map(|(s, e)| AnnotatedDocument {
            lang: doc.lang.clone(),
            title: doc.title.clone(),
            tokens: doc.tokens[s..e].to_vec(),
            sentence_breaks: doc
                .sentence_breaks
                .iter()
                .filter(|&&b| b > s && b <= e)
                .map(|b| b - s)
                .collect(),
            annotations: doc
                .annotations
                .iter()
                .filter(|a| a.start >= s && a.end <= e)
                .map(|a| Annotation {
                    start: a.start - s,
                    end: a.end - s,
                    title: a.title.clone(),
                })
                .collect(),
        })
        .collect())
}

/// Per-language item counts and the smoothing exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageSamplingSpec {
    pub counts: Vec<f64>,
    pub alpha: f64,
}

pub const DEFAULT_ALPHA: f64 = 0.7;

/// `p_i = n_i^alpha / sum_k n_k^alpha`.
pub fn language_distribution(spec: &LanguageSamplingSpec) -> Result<Vec<f64>> {
    if !(spec.alpha > 0.0 && spec.alpha <= 1.0) {
        return Err(CorpusError::Argument(format!("alpha {} outside (0, 1]", spec.alpha)));
    }
    if spec.counts.is_empty() || spec.counts.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(CorpusError::Argument("language counts must be positive".into()));
    }
    // Scale by the largest count first so huge n_i cannot overflow.
    let max = spec.counts.iter().cloned().fold(0.0, f64::max);
    let weights: Vec<f64> = spec.counts.iter().map(|n| (n / max).powf(spec.alpha)).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Draws a language by `p_i`, then an item uniformly within that language.
#[derive(Debug, Clone)]
pub struct LanguageSampler {
    languages: Vec<usize>,
    cumulative: Vec<f64>,
    pools: Vec<Vec<usize>>,
}

impl LanguageSampler {
    /// `item_languages[k]` is the language index of item `k`. Languages with no
    /// items get probability zero.
    pub fn new(item_languages: &[usize], num_languages: usize, alpha: f64) -> Result<Self> {
        let mut pools = vec![Vec::new(); num_languages];
        for (k, &l) in item_languages.iter().enumerate() {
            pools
                .get_mut(l)
                .ok_or_else(|| CorpusError::Argument(format!("language index {l} out of range")))?
                .push(k);
        }
        let languages: Vec<usize> = (0..num_languages).filter(|&l| !pools[l].is_empty()).collect();
        let probs = language_distribution(&LanguageSamplingSpec {
            counts: languages.iter().map(|&l| pools[l].len() as f64).collect(),
            alpha,
        })?;
        let cumulative = probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(LanguageSampler {
            languages,
            cumulative,
            pools,
        })
    }

    /// Sampling probability of every language index.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.pools.len()];
        let mut prev = 0.0;
        for (&l, &c) in self.languages.iter().zip(&self.cumulative) {
            out[l] = c - prev;
            prev = c;
        }
        out
    }

    pub fn sample_language<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty sampler");
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u);
        self.languages[k.min(self.languages.len() - 1)]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let pool = &self.pools[self.sample_language(rng)];
        pool[rng.random_range(0..pool.len())]
    }
}

/// Probabilities for MLM/MEP masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub word_p: f64,
    pub word_random_p: f64,
    pub word_keep_p: f64,
    pub entity_p: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            word_p: 0.15,
            word_random_p: 0.10,
            word_keep_p: 0.10,
            entity_p: 0.15,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.word_p) && unit(self.word_random_p) && unit(self.word_keep_p) && unit(self.entity_p)) {
            return Err(CorpusError::Argument("masking probabilities must lie in [0, 1]".into()));
        }
        if self.word_random_p + self.word_keep_p > 1.0 {
            return Err(CorpusError::Argument(
                "word_random_p + word_keep_p must not exceed 1".into(),
            ));
        }
        Ok(())
    }
}

/// A masked input plus labels (`None` = ignored by the loss).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub input: EncodedSequence,
    pub word_labels: Vec<Option<usize>>,
    pub entity_labels: Vec<Option<usize>>,
}

/// Apply MLM/MEP masking to one sequence.
///
/// Selected words become `[MASK]`, a random non-special word, or stay as they
/// are, in proportion `1 - random - keep : random : keep`. Selected entities
/// always become the entity `[MASK]`. Special and padding tokens are never
/// selected.
pub fn mask_sequence<R: Rng + ?Sized>(
    seq: &EncodedSequence,
    word_vocab_size: usize,
    config: &MaskingConfig,
    rng: &mut R,
) -> MaskedBatch {
    let mut input = seq.clone();
    let mut word_labels = vec![None; seq.word_ids.len()];
    let mask_share = 1.0 - config.word_random_p - config.word_keep_p;
    for (i, id) in input.word_ids.iter_mut().enumerate() {
        if *id < vocab::NUM_SPECIAL || !seq.word_attention[i] {
            continue;
        }
        if rng.random::<f64>() >= config.word_p {
            continue;
        }
        word_labels[i] = Some(*id);
        let r: f64 = rng.random();
        if r < mask_share {
            *id = vocab::MASK;
        } else if r < mask_share + config.word_random_p {
            if word_vocab_size > vocab::NUM_SPECIAL {
                *id = rng.random_range(vocab::NUM_SPECIAL..word_vocab_size);
            } else {
                *id = vocab::MASK;
            }
        }
    }
    let mut entity_labels = vec![None; seq.entity_ids.len()];
    for (k, id) in input.entity_ids.iter_mut().enumerate() {
        if *id < entity_vocab::NUM_SPECIAL || !seq.entity_attention[k] {
            continue;
        }
        if rng.random::<f64>() < config.entity_p {
            entity_labels[k] = Some(*id);
            *id = entity_vocab::MASK;
        }
    }
    MaskedBatch {
        input,
        word_labels,
        entity_labels,
    }
}

/// Masking with the per-sequence generator derived from `(seed, sequence_id)`.
pub fn mask_batch(
    seq: &EncodedSequence,
    word_vocab_size: usize,
    config: &MaskingConfig,
    seed: u64,
    sequence_id: u64,
) -> MaskedBatch {
    let mut rng = rng_for(seed, Stream::Masking, sequence_id);
    mask_sequence(seq, word_vocab_size, config, &mut rng)
}

/// Map a text sequence onto vocabulary ids. Hyperlinks whose target does not
/// resolve are dropped; at most `max_entities` entities are kept, in order of
/// first occurrence.
pub fn encode_document(
    doc: &AnnotatedDocument,
    words: &WordVocab,
    entities: &EntityVocab,
    max_entities: usize,
) -> EncodedSequence {
    let mut seq = EncodedSequence::words(words.encode(&doc.tokens));
    let mut anns: Vec<&Annotation> = doc.annotations.iter().collect();
    anns.sort_by_key(|a| (a.start, a.end));
    for a in anns {
        if seq.num_entities() >= max_entities {
            break;
        }
        if let Some(id) = entities.resolve(&doc.lang, &a.title) {
            seq.push_entity(id, (a.start..a.end).collect());
        }
    }
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(tokens: usize, breaks: Vec<usize>, anns: Vec<(usize, usize)>) -> AnnotatedDocument {
        AnnotatedDocument {
            lang: "en".into(),
            title: "Page".into(),
            tokens: (0..tokens).map(|i| format!("w{i}")).collect(),
            sentence_breaks: breaks,
            annotations: anns
                .into_iter()
                .map(|(s, e)| Annotation {
                    start: s,
                    end: e,
                    title: format!("T{s}"),
                })
                .collect(),
        }
    }

    #[test]
    fn corpus_line_format() {
        let line = r#"{"lang":"ja","title":"東京","tokens":["東京","は","首都","。"],"sentence_breaks":[4],"annotations":[[0,1,"東京"]]}"#;
        let docs = read_corpus(line.as_bytes()).unwrap();
        assert_eq!(docs[0].annotations[0], Annotation { start: 0, end: 1, title: "東京".into() });
        let mut out = Vec::new();
        write_corpus(&mut out, &docs).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().trim(), line);
    }

    #[test]
    fn overlapping_annotations_rejected() {
        let d = doc(10, vec![], vec![(0, 3), (2, 4)]);
        assert!(d.validate().is_err());
        let d = doc(10, vec![], vec![(0, 11)]);
        assert!(d.validate().is_err());
    }

    #[test]
    fn greedy_packing_of_three_sentences() {
        let d = doc(600, vec![200, 400, 600], vec![]);
        let seqs = split_sequences(&d, 512).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].tokens.len(), 400);
        assert_eq!(seqs[1].tokens.len(), 200);
        assert_eq!(seqs[1].tokens[0], "w400");
        assert_eq!(seqs[0].sentence_breaks, vec![200, 400]);
    }

    #[test]
    fn short_doc_is_returned_unchanged() {
        let d = doc(20, vec![7, 20], vec![(2, 4), (10, 11)]);
        assert_eq!(split_sequences(&d, 512).unwrap(), vec![d]);
    }

    #[test]
    fn annotation_crossing_cut_is_dropped() {
        let d = doc(10, vec![5, 10], vec![(1, 2), (4, 6), (7, 9)]);
        let seqs = split_sequences(&d, 5).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].annotations.len(), 1);
        assert_eq!(seqs[1].annotations, vec![Annotation { start: 2, end: 4, title: "T7".into() }]);
    }

    #[test]
    fn long_sentence_is_hard_split() {
        let d = doc(12, vec![], vec![(4, 6)]);
        let seqs = split_sequences(&d, 5).unwrap();
        let lens: Vec<usize> = seqs.iter().map(|s| s.tokens.len()).collect();
        assert_eq!(lens, vec![5, 5, 2]);
        assert!(seqs.iter().all(|s| s.annotations.is_empty()));
        assert!(split_sequences(&d, 0).is_err());
    }

    #[test]
    fn fallback_splitter_uses_terminal_punctuation() {
        let mut d = doc(0, vec![], vec![]);
        d.tokens = "a b . c d e ! f".split(' ').map(String::from).collect();
        assert_eq!(sentence_ends(&d), vec![3, 7, 8]);
        let seqs = split_sequences(&d, 4).unwrap();
        let lens: Vec<usize> = seqs.iter().map(|s| s.tokens.len()).collect();
        assert_eq!(lens, vec![3, 4, 1]);
    }

    #[test]
    fn language_distribution_examples() {
        let p = language_distribution(&LanguageSamplingSpec { counts: vec![100.0, 100.0], alpha: 0.7 }).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = language_distribution(&LanguageSamplingSpec { counts: vec![1000.0, 100.0], alpha: 0.7 }).unwrap();
        assert!((p[0] - 0.8337).abs() < 5e-5 && (p[1] - 0.1663).abs() < 5e-5, "{p:?}");
        let p = language_distribution(&LanguageSamplingSpec { counts: vec![3.0, 1.0], alpha: 1.0 }).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15);
        assert!(language_distribution(&LanguageSamplingSpec { counts: vec![1.0], alpha: 0.0 }).is_err());
        assert!(language_distribution(&LanguageSamplingSpec { counts: vec![0.0], alpha: 0.5 }).is_err());
    }

    #[test]
    fn no_masking_leaves_input_alone() {
        let seq = EncodedSequence::words(vec![5, 6, 7]).with_entity(4, vec![0]);
        let cfg = MaskingConfig { word_p: 0.0, entity_p: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = mask_sequence(&seq, 10, &cfg, &mut rng);
        assert_eq!(b.input, seq);
        assert!(b.word_labels.iter().chain(&b.entity_labels).all(Option::is_none));
    }

    #[test]
    fn full_entity_masking() {
        let seq = EncodedSequence::words(vec![5, 6, 7])
            .with_entity(4, vec![0])
            .with_entity(9, vec![1, 2]);
        let cfg = MaskingConfig { entity_p: 1.0, ..Default::default() };
        let b = mask_batch(&seq, 10, &cfg, 1, 2);
        assert_eq!(b.input.entity_ids, vec![entity_vocab::MASK; 2]);
        assert_eq!(b.entity_labels, vec![Some(4), Some(9)]);
    }

    #[test]
    fn padding_and_specials_are_never_masked() {
        let mut seq = EncodedSequence::words(vec![vocab::CLS, 8, 9, vocab::SEP, vocab::PAD]);
        seq.word_attention[4] = false;
        let cfg = MaskingConfig { word_p: 1.0, ..Default::default() };
        for id in 0..50 {
            let b = mask_batch(&seq, 20, &cfg, 3, id);
            assert_eq!(b.word_labels[0], None);
            assert_eq!(b.word_labels[3], None);
            assert_eq!(b.word_labels[4], None);
            assert_eq!(b.input.word_ids[4], vocab::PAD);
        }
    }

    #[test]
    fn sampler_respects_smoothed_probabilities() {
        let langs: Vec<usize> = std::iter::repeat_n(0, 1000).chain(std::iter::repeat_n(1, 100)).collect();
        let s = LanguageSampler::new(&langs, 2, 0.7).unwrap();
        let p = s.probabilities();
        assert!((p[0] - 0.8337).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = s.sample(&mut rng);
        assert!(k < 1100);
    }
}
