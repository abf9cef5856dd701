//! Typed cloze-prompt evaluation.
//!
//! A query fills `[X]` with the subject and asks which of a fixed candidate
//! set belongs at `[Y]`. Candidates are scored either by the mean MLM
//! log-probability of their tokens at word `[MASK]`s placed at `[Y]`, or by
//! the MEP log-probability of their entity at an entity `[MASK]` attached to
//! those positions.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{self, EncodedSequence, EncoderError, Model};
use crate::entity_vocab::{self, EntityVocab};
use crate::tensor::{log_softmax_rows, Graph, TensorError};
use crate::vocab::{self, WordVocab};

#[derive(Debug, Error)]
pub enum ClozeError {
    #[error("invalid query: {0}")]
    Contract(String),
    #[error("line {line}: {reason}")]
    Data { line: usize, reason: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ClozeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub surface: String,
    /// Entity id, if the candidate matched an entity title.
    pub entity: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypedQuery {
    pub lang: String,
    pub template: String,
    pub sub_surface: String,
    pub sub_entity: Option<usize>,
    pub candidates: Vec<Candidate>,
    pub gold_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClozeMode {
    Word,
    EntityY,
    EntityXy,
}

fn slot_tokens(template: &str) -> Vec<String> {
    template
        .replace("[X]", " [X] ")
        .replace("[Y]", " [Y] ")
        .split_whitespace()
        .map(String::from)
        .collect()
}

impl TypedQuery {
    pub fn validate(&self) -> Result<()> {
        let toks = slot_tokens(&self.template);
        let count = |s: &str| toks.iter().filter(|t| *t == s).count();
        if count("[X]") != 1 || count("[Y]") != 1 {
            return Err(ClozeError::Contract(format!(
                "template {:?} needs exactly one [X] and one [Y]",
                self.template
            )));
        }
        if self.candidates.is_empty() {
            return Err(ClozeError::Contract("no candidates".into()));
        }
        if self.gold_index >= self.candidates.len() {
            return Err(ClozeError::Contract("gold index out of range".into()));
        }
        Ok(())
    }
}

/// Word input for a query with `k` masks at `[Y]`; returns the sequence and
/// the word positions of `[X]` and `[Y]`.
pub fn build_input(query: &TypedQuery, words: &WordVocab, k: usize) -> Result<(EncodedSequence, Vec<usize>, Vec<usize>)> {
    query.validate()?;
    if k == 0 {
        return Err(ClozeError::Contract("candidate has no tokens".into()));
    }
    let mut ids = vec![vocab::CLS];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for t in slot_tokens(&query.template) {
        match t.as_str() {
            "[X]" => {
                for s in query.sub_surface.split_whitespace() {
                    x.push(ids.len());
                    ids.push(words.id(s));
                }
            }
            "[Y]" => {
                for _ in 0..k {
                    y.push(ids.len());
                    ids.push(vocab::MASK);
                }
            }
            _ => ids.push(words.id(&t)),
        }
    }
    ids.push(vocab::SEP);
    if x.is_empty() {
        return Err(ClozeError::Contract("empty subject".into()));
    }
    Ok((EncodedSequence::words(ids), x, y))
}

/// Arithmetic mean of per-token log-probabilities.
pub fn mean_log_prob(log_probs: &[f64]) -> f64 {
    log_probs.iter().sum::<f64>() / log_probs.len() as f64
}

/// Mean MLM log-probability of the candidate's tokens, all masks presented
/// in one pass.
pub fn score_candidate_words(model: &Model, words: &WordVocab, query: &TypedQuery, surface: &str) -> Result<f64> {
    let cand: Vec<usize> = surface.split_whitespace().map(|t| words.id(t)).collect();
    let (seq, _, y) = build_input(query, words, cand.len())?;
    let mut g = Graph::new(&model.params);
    let out = encoder::encode(&mut g, &model.config, &seq)?;
    let rows = g.gather_rows(out.words, &y)?;
    let logits = encoder::mlm_logits(&mut g, rows)?;
    let lp = log_softmax_rows(g.value(logits));
    let per_token: Vec<f64> = cand.iter().enumerate().map(|(i, &id)| lp.row(i)[id]).collect();
    Ok(mean_log_prob(&per_token))
}

/// MEP log-probability of the candidate entity at an entity `[MASK]` over
/// the `[Y]` masks. Falls back to word scoring (flag `false`) when the
/// candidate has no entity in the model's vocabulary. In `[X]`+`[Y]` mode
/// the subject entity is attached too when known.
pub fn score_candidate_entity(
    model: &Model,
    words: &WordVocab,
    query: &TypedQuery,
    candidate: &Candidate,
    with_subject: bool,
) -> Result<(f64, bool)> {
    let n_ent = model.config.entity_vocab_size;
    let entity = match candidate.entity {
        Some(e) if e >= entity_vocab::NUM_SPECIAL && e < n_ent => e,
        _ => return Ok((score_candidate_words(model, words, query, &candidate.surface)?, false)),
    };
    let k = candidate.surface.split_whitespace().count();
    let (mut seq, x, y) = build_input(query, words, k)?;
    seq.push_entity(entity_vocab::MASK, y);
    if with_subject {
        if let Some(s) = query.sub_entity.filter(|&s| s >= entity_vocab::NUM_SPECIAL && s < n_ent) {
            seq.push_entity(s, x);
        }
    }
    let mut g = Graph::new(&model.params);
    let out = encoder::encode(&mut g, &model.config, &seq)?;
    let ents = out.entities.expect("entity attached");
    let first = g.slice_rows(ents, 0, 1)?;
    let logits = encoder::mep_logits(&mut g, first)?;
    let lp = log_softmax_rows(g.value(logits));
    Ok((lp.row(0)[entity], true))
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub lang: String,
    pub template: String,
    pub predicted: usize,
    pub correct: bool,
    pub scores: Vec<f64>,
    /// Per candidate: whether the entity path was used.
    pub used_entity: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Most frequent wrong answer among the false predictions of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum FpRatio {
    Undefined,
    Defined {
        prediction: String,
        count: usize,
        total: usize,
        ratio: f64,
    },
}

/// Ratio of the most common false prediction to all false predictions; ties
/// pick the lexicographically smallest answer.
pub fn top1_fp_ratio<S: AsRef<str>>(false_predictions: &[S]) -> FpRatio {
    if false_predictions.is_empty() {
        return FpRatio::Undefined;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in false_predictions {
        *counts.entry(p.as_ref()).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (p, c) in counts {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((p, c));
        }
    }
    let (prediction, count) = best.expect("non-empty");
    FpRatio::Defined {
        prediction: prediction.to_string(),
        count,
        total: false_predictions.len(),
        ratio: count as f64 / false_predictions.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClozeReport {
    pub overall: Accuracy,
    pub per_language: BTreeMap<String, Accuracy>,
    /// Keyed `"{lang}\t{template}"`.
    pub false_positives: BTreeMap<String, FpRatio>,
    pub results: Vec<QueryResult>,
}

fn accuracy(correct: usize, total: usize) -> Accuracy {
    Accuracy {
        correct,
        total,
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
    }
}

/// Score every candidate with `scorer` and aggregate.
pub fn evaluate_with<F>(queries: &[TypedQuery], scorer: F) -> Result<ClozeReport>
where
    F: Fn(&TypedQuery, &Candidate) -> Result<(f64, bool)> + Sync + Send,
{
    let results = crate::par::map(queries, |q| -> Result<QueryResult> {
        q.validate()?;
        let mut scores = Vec::with_capacity(q.candidates.len());
        let mut used = Vec::with_capacity(q.candidates.len());
        for c in &q.candidates {
            let (s, u) = scorer(q, c)?;
            scores.push(s);
            used.push(u);
        }
        let predicted = argmax_first(&scores);
        Ok(QueryResult {
            lang: q.lang.clone(),
            template: q.template.clone(),
            predicted,
            correct: predicted == q.gold_index,
            scores,
            used_entity: used,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut per_lang: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut wrong: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (q, r) in queries.iter().zip(&results) {
        let e = per_lang.entry(q.lang.clone()).or_default();
        e.1 += 1;
        let key = format!("{}\t{}", q.lang, q.template);
        let w = wrong.entry(key).or_default();
        if r.correct {
            e.0 += 1;
        } else {
            w.push(q.candidates[r.predicted].surface.clone());
        }
    }
    let correct = results.iter().filter(|r| r.correct).count();
    Ok(ClozeReport {
        overall: accuracy(correct, results.len()),
        per_language: per_lang
            .into_iter()
            .map(|(l, (c, t))| (l, accuracy(c, t)))
            .collect(),
        false_positives: wrong
            .into_iter()
            .map(|(k, v)| (k, top1_fp_ratio(&v)))
            .collect(),
        results,
    })
}

pub fn evaluate(model: &Model, words: &WordVocab, queries: &[TypedQuery], mode: ClozeMode) -> Result<ClozeReport> {
    evaluate_with(queries, |q, c| match mode {
        ClozeMode::Word => Ok((score_candidate_words(model, words, q, &c.surface)?, false)),
        ClozeMode::EntityY => score_candidate_entity(model, words, q, c, false),
        ClozeMode::EntityXy => score_candidate_entity(model, words, q, c, true),
    })
}

/// Entity id for a title: the query language's titles first, then English.
pub fn match_entity(vocab: &EntityVocab, lang: &str, title: &str) -> Option<usize> {
    vocab.resolve(lang, title).or_else(|| vocab.resolve("en", title))
}

#[derive(Debug, Deserialize, Serialize)]
struct RawCandidate {
    surface: String,
    /// Entity title to match; the surface is used when absent.
    #[serde(default)]
    entity: Option<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawQuery {
    lang: String,
    template: String,
    sub_surface: String,
    #[serde(default)]
    sub_entity: Option<String>,
    candidates: Vec<RawCandidate>,
    gold_index: usize,
}

/// Read JSON-lines queries, matching subject and candidate titles against
/// the entity vocabulary.
pub fn read_queries<R: BufRead>(r: R, vocab: &EntityVocab) -> Result<Vec<TypedQuery>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| ClozeError::Data { line: i + 1, reason };
        let raw: RawQuery = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let q = TypedQuery {
            sub_entity: match_entity(vocab, &raw.lang, raw.sub_entity.as_deref().unwrap_or(&raw.sub_surface)),
            candidates: raw
                .candidates
                .iter()
                .map(|c| Candidate {
                    surface: c.surface.clone(),
                    entity: match_entity(vocab, &raw.lang, c.entity.as_deref().unwrap_or(&c.surface)),
                })
                .collect(),
            lang: raw.lang,
            template: raw.template,
            sub_surface: raw.sub_surface,
            gold_index: raw.gold_index,
        };
        q.validate().map_err(|e| bad(e.to_string()))?;
        out.push(q);
    }
    Ok(out)
}

pub fn write_report<W: Write>(w: W, report: &ClozeReport) -> Result<()> {
    serde_json::to_writer_pretty(w, report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (WordVocab, Model) {
        let v = WordVocab::from_tokens("Tokyo is the capital of Japan France Paris New York".split(' '));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::init(EncoderConfig::tiny(v.len(), 9), 0.2, &mut rng).unwrap();
        (v, m)
    }

    fn query() -> TypedQuery {
        TypedQuery {
            lang: "en".into(),
            template: "[X] is the capital of [Y].".into(),
            sub_surface: "Tokyo".into(),
            sub_entity: Some(5),
            candidates: vec![
                Candidate { surface: "Japan".into(), entity: Some(6) },
                Candidate { surface: "France".into(), entity: None },
                Candidate { surface: "New York".into(), entity: Some(7) },
            ],
            gold_index: 0,
        }
    }

    #[test]
    fn mean_of_token_log_probs() {
        assert_eq!(mean_log_prob(&[-1.0, -3.0]), -2.0);
        assert_eq!(mean_log_prob(&[-0.25]), -0.25);
    }

    #[test]
    fn input_layout() {
        let (v, _) = setup();
        let (seq, x, y) = build_input(&query(), &v, 2).unwrap();
        assert_eq!(x, vec![1]);
        assert_eq!(y, vec![6, 7]);
        assert_eq!(seq.word_ids[6], vocab::MASK);
        assert_eq!(seq.word_ids.len(), 10);
        let mut bad = query();
        bad.template = "[X] is the capital".into();
        assert!(build_input(&bad, &v, 1).is_err());
    }

    #[test]
    fn word_score_matches_manual_pass() {
        let (v, m) = setup();
        let q = query();
        let s = score_candidate_words(&m, &v, &q, "New York").unwrap();
        let (seq, _, y) = build_input(&q, &v, 2).unwrap();
        let out = m.encode(&seq).unwrap();
        let mut g = Graph::new(&m.params);
        let x = g.input(out.word_vectors.select_rows(&y));
        let l = encoder::mlm_logits(&mut g, x).unwrap();
        let lp = log_softmax_rows(g.value(l));
        let manual = (lp.row(0)[v.id("New")] + lp.row(1)[v.id("York")]) / 2.0;
        assert_eq!(s, manual);
    }

    #[test]
    fn uniform_head_ties() {
        let (v, mut m) = setup();
        for n in ["mlm.decoder.weight", "mlm.decoder.bias"] {
            let id = m.params.id(n).unwrap();
            let shape = m.params.get(id).shape().to_vec();
            *m.params.get_mut(id) = Tensor::zeros(&shape);
        }
        let q = query();
        let a = score_candidate_words(&m, &v, &q, "Japan").unwrap();
        let b = score_candidate_words(&m, &v, &q, "France").unwrap();
        assert_eq!(a, b);
        assert_eq!(evaluate(&m, &v, &[q], ClozeMode::Word).unwrap().results[0].predicted, 0);
    }

    #[test]
    fn fallback_equals_word_score() {
        let (v, m) = setup();
        let q = query();
        let (s, used) = score_candidate_entity(&m, &v, &q, &q.candidates[1], true).unwrap();
        assert!(!used);
        assert_eq!(s, score_candidate_words(&m, &v, &q, "France").unwrap());
        let (_, used) = score_candidate_entity(&m, &v, &q, &q.candidates[0], true).unwrap();
        assert!(used);
    }

    #[test]
    fn single_candidate_and_oracle() {
        let (v, m) = setup();
        let mut q = query();
        q.candidates.truncate(1);
        for mode in [ClozeMode::Word, ClozeMode::EntityY, ClozeMode::EntityXy] {
            assert_eq!(evaluate(&m, &v, &[q.clone()], mode).unwrap().overall.accuracy, 1.0);
        }
        let full = query();
        let r = evaluate_with(&[full], |q, c| {
            let gold = &q.candidates[q.gold_index];
            Ok((if c == gold { f64::INFINITY } else { 0.0 }, false))
        })
        .unwrap();
        assert_eq!(r.overall.accuracy, 1.0);
    }

    #[test]
    fn fp_ratio() {
        let spread: Vec<String> = (0..515).map(|i| format!("c{}", i % 200)).collect();
        let mut all: Vec<String> = vec!["The Bahamas".to_string(); 355];
        all.extend(spread);
        match top1_fp_ratio(&all) {
            FpRatio::Defined { prediction, count, total, ratio } => {
                assert_eq!((prediction.as_str(), count, total), ("The Bahamas", 355, 870));
                assert_eq!(format!("{:.0}%", ratio * 100.0), "41%");
            }
            FpRatio::Undefined => panic!(),
        }
        assert!(matches!(top1_fp_ratio::<&str>(&[]), FpRatio::Undefined));
        match top1_fp_ratio(&["b", "a"]) {
            FpRatio::Defined { prediction, ratio, .. } => assert_eq!((prediction.as_str(), ratio), ("a", 0.5)),
            FpRatio::Undefined => panic!(),
        }
    }

    #[test]
    fn jsonl_queries_resolve_titles() {
        use crate::corpus::{AnnotatedDocument, Annotation};
        use crate::entity_vocab::InterLanguageLinks;
        let mut links = InterLanguageLinks::new();
        links.insert("en", "Japan", "Q17").unwrap();
        links.insert("ja", "日本", "Q17").unwrap();
        let doc = |lang: &str, t: &str| AnnotatedDocument {
            lang: lang.into(),
            title: "p".into(),
            tokens: vec![t.into()],
            sentence_breaks: vec![],
            annotations: vec![Annotation { start: 0, end: 1, title: t.into() }],
        };
        let ev = EntityVocab::build(&[doc("en", "Japan"), doc("ja", "日本")], &links, 1, 10).unwrap();
        let line = r#"{"lang":"ja","template":"[X] は [Y] の 首都","sub_surface":"東京","candidates":[{"surface":"日本"},{"surface":"Japan"},{"surface":"France"}],"gold_index":0}"#;
        let qs = read_queries(line.as_bytes(), &ev).unwrap();
        let id = ev.resolve("en", "Japan");
        assert!(id.is_some());
        assert_eq!(qs[0].candidates[0].entity, id);
        assert_eq!(qs[0].candidates[1].entity, id);
        assert_eq!(qs[0].candidates[2].entity, None);
        assert_eq!(qs[0].sub_entity, None);
    }
}
