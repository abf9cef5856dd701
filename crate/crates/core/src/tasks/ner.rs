//! Span-enumeration named entity recognition.
//!
//! Every span of up to `max_span_len` tokens is a candidate. The word
//! variant classifies the concatenated vectors of a span's first and last
//! tokens; the entity variant attaches one entity `[MASK]` token per span
//! and classifies its contextual vector. Class 0 is "not an entity".

use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{self, Prf};
use super::{init_linear_head, linear_head, Result, Task, TaskError};
use crate::encoder::{self, EncodedSequence, Model};
use crate::entity_vocab;
use crate::tensor::{log_softmax_rows, Graph, Var};
use crate::vocab::{self, WordVocab};

pub const MAX_SPAN_LEN: usize = 16;
pub const HEAD: &str = "ner.classifier";
pub const OUTSIDE: &str = "O";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NerVariant {
    WordEndpoints,
    EntityMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerInstance {
    pub tokens: Vec<String>,
    /// Gold `[start, end)` spans with their type.
    pub spans: Vec<(usize, usize, String)>,
    #[serde(default)]
    pub lang: String,
}

/// All `[start, end)` spans of at most `max_len` tokens, by start then length.
pub fn enumerate_spans(n: usize, max_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for s in 0..n {
        for e in s + 1..=n.min(s + max_len) {
            out.push((s, e));
        }
    }
    out
}

/// `sum_{l=1}^{min(max_len, n)} (n - l + 1)`.
pub fn candidate_count(n: usize, max_len: usize) -> usize {
    (1..=max_len.min(n)).map(|l| n - l + 1).sum()
}

/// A scored candidate: `(start, end, class, score)`.
pub type Candidate = (usize, usize, usize, f64);

/// Drop non-entity candidates, then keep spans in order of decreasing score
/// (ties: earlier start, then shorter) unless they overlap a kept span.
/// The result is sorted by start.
pub fn decode_greedy(mut candidates: Vec<Candidate>) -> Vec<Candidate> {
    candidates.retain(|c| c.2 != 0);
    candidates.sort_by(|a, b| {
        b.3.total_cmp(&a.3)
            .then(a.0.cmp(&b.0))
            .then((a.1 - a.0).cmp(&(b.1 - b.0)))
    });
    let mut kept: Vec<Candidate> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| c.1 <= k.0 || k.1 <= c.0) {
            kept.push(c);
        }
    }
    kept.sort_by_key(|c| (c.0, c.1));
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerSpec {
    pub variant: NerVariant,
    /// Entity types; class `i + 1` is `types[i]`.
    pub types: Vec<String>,
    pub max_span_len: usize,
    /// Entity-variant spans per encoder pass.
    pub chunk_size: usize,
}

#[derive(Debug, Clone)]
pub struct NerTask {
    pub vocab: WordVocab,
    pub spec: NerSpec,
}

impl NerTask {
    pub fn attach<R: Rng>(
        model: &mut Model,
        vocab: WordVocab,
        variant: NerVariant,
        types: Vec<String>,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if types.is_empty() || types.iter().any(|t| t == OUTSIDE) {
            return Err(TaskError::Contract("entity types must be non-empty and exclude O".into()));
        }
        let h = model.config.hidden_size;
        let input = match variant {
            NerVariant::WordEndpoints => 2 * h,
            NerVariant::EntityMask => h,
        };
        init_linear_head(model, HEAD, input, types.len() + 1, std, rng);
        let chunk_size = model.config.max_entities;
        Ok(NerTask {
            vocab,
            spec: NerSpec {
                variant,
                types,
                max_span_len: MAX_SPAN_LEN,
                chunk_size,
            },
        })
    }

    pub fn from_spec(vocab: WordVocab, spec: NerSpec) -> Self {
        NerTask { vocab, spec }
    }

    fn class_of(&self, ty: &str) -> Result<usize> {
        self.spec
            .types
            .iter()
            .position(|t| t == ty)
            .map(|i| i + 1)
            .ok_or_else(|| TaskError::Contract(format!("unknown entity type {ty:?}")))
    }

    /// Candidate spans and, per encoder pass, a `spans x classes` logit node.
    fn span_logits(&self, g: &mut Graph<'_>, model: &Model, inst: &NerInstance) -> Result<(Vec<(usize, usize)>, Vec<Var>)> {
        let n = inst.tokens.len();
        if n + 2 > model.config.max_positions {
            return Err(TaskError::Contract(format!("sentence of {n} tokens exceeds the encoder")));
        }
        let spans = enumerate_spans(n, self.spec.max_span_len);
        let mut ids = vec![vocab::CLS];
        ids.extend(self.vocab.encode(&inst.tokens));
        ids.push(vocab::SEP);
        let base = EncodedSequence::words(ids);
        let mut out = Vec::new();
        if spans.is_empty() {
            return Ok((spans, out));
        }
        match self.spec.variant {
            NerVariant::WordEndpoints => {
                let enc = encoder::encode(g, &model.config, &base)?;
                let firsts: Vec<usize> = spans.iter().map(|&(s, _)| s + 1).collect();
                let lasts: Vec<usize> = spans.iter().map(|&(_, e)| e).collect();
                let a = g.gather_rows(enc.words, &firsts)?;
                let b = g.gather_rows(enc.words, &lasts)?;
                let f = g.concat_cols(&[a, b])?;
                out.push(linear_head(g, f, HEAD)?);
            }
            NerVariant::EntityMask => {
                let chunk = self.spec.chunk_size.clamp(1, model.config.max_entities.max(1));
                for part in spans.chunks(chunk) {
                    let mut seq = base.clone();
                    for &(s, e) in part {
                        seq.push_entity(entity_vocab::MASK, (s + 1..e + 1).collect());
                    }
                    let enc = encoder::encode(g, &model.config, &seq)?;
                    let ents = enc.entities.expect("entities attached");
                    out.push(linear_head(g, ents, HEAD)?);
                }
            }
        }
        Ok((spans, out))
    }

    /// Scored candidates (argmax class and its log-probability) for every span.
    pub fn candidates(&self, model: &Model, inst: &NerInstance) -> Result<Vec<Candidate>> {
        let mut g = Graph::new(&model.params);
        let (spans, parts) = self.span_logits(&mut g, model, inst)?;
        let mut out = Vec::with_capacity(spans.len());
        let mut k = 0;
        for v in parts {
            let lp = log_softmax_rows(g.value(v));
            for r in 0..lp.rows() {
                let row = lp.row(r);
                let mut best = 0;
                for (c, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = c;
                    }
                }
                let (s, e) = spans[k];
                out.push((s, e, best, row[best]));
                k += 1;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, model: &Model, inst: &NerInstance) -> Result<Vec<(usize, usize, String)>> {
        Ok(decode_greedy(self.candidates(model, inst)?)
            .into_iter()
            .map(|(s, e, c, _)| (s, e, self.spec.types[c - 1].clone()))
            .collect())
    }

    pub fn prf(&self, model: &Model, data: &[NerInstance]) -> Result<Prf> {
        let pred = crate::par::map(data, |x| self.predict(model, x))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let gold: Vec<_> = data.iter().map(|x| x.spans.clone()).collect();
        Ok(metrics::span_prf(&gold, &pred))
    }
}

impl Task for NerTask {
    type Example = NerInstance;

    /// Mean cross-entropy over every candidate span.
    fn loss(&self, g: &mut Graph<'_>, model: &Model, inst: &NerInstance) -> Result<Option<Var>> {
        let (spans, parts) = self.span_logits(g, model, inst)?;
        if spans.is_empty() {
            return Ok(None);
        }
        let mut labels = vec![0usize; spans.len()];
        for (s, e, ty) in &inst.spans {
            let c = self.class_of(ty)?;
            if let Some(i) = spans.iter().position(|&x| x == (*s, *e)) {
                labels[i] = c;
            }
        }
        let total = spans.len() as f64;
        let mut acc: Option<Var> = None;
        let mut k = 0;
        for v in parts {
            let rows = g.value(v).rows();
            let lab: Vec<Option<usize>> = labels[k..k + rows].iter().map(|&c| Some(c)).collect();
            k += rows;
            let (l, _) = g.cross_entropy(v, &lab)?;
            let l = g.scale(l, rows as f64 / total);
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        Ok(acc)
    }

    fn evaluate(&self, model: &Model, data: &[NerInstance]) -> Result<f64> {
        Ok(self.prf(model, data)?.f1)
    }
}

/// Spans of a BIO tag sequence. An `I-` tag that does not continue a span of
/// the same type opens a new one.
pub fn bio_to_spans(tags: &[String]) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (kind, ty) = match tag.split_once('-') {
            Some((k, t)) => (k, t),
            None => ("O", ""),
        };
        let continues = kind == "I" && open.as_ref().is_some_and(|(_, t)| t == ty);
        if !continues {
            if let Some((s, t)) = open.take() {
                out.push((s, i, t));
            }
            if kind == "B" || kind == "I" {
                open = Some((i, ty.to_string()));
            }
        }
    }
    if let Some((s, t)) = open {
        out.push((s, tags.len(), t));
    }
    out
}

/// CoNLL layout: one token per line with its BIO tag in the last column,
/// blank lines between sentences, `-DOCSTART-` lines ignored.
pub fn read_conll<R: BufRead>(r: R, lang: &str) -> Result<Vec<NerInstance>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| {
        if !tokens.is_empty() {
            out.push(NerInstance {
                tokens: std::mem::take(tokens),
                spans: bio_to_spans(tags),
                lang: lang.to_string(),
            });
            tags.clear();
        }
    };
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            flush(&mut tokens, &mut tags);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(TaskError::Data {
                line: i + 1,
                reason: "expected a token and a tag".into(),
            });
        }
        tokens.push(cols[0].to_string());
        tags.push(cols[cols.len() - 1].to_string());
    }
    flush(&mut tokens, &mut tags);
    Ok(out)
}

/// Sorted distinct entity types.
pub fn type_set(data: &[NerInstance]) -> Vec<String> {
    let s: std::collections::BTreeSet<&str> = data
        .iter()
        .flat_map(|x| x.spans.iter().map(|s| s.2.as_str()))
        .collect();
    s.into_iter().map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts() {
        assert_eq!(candidate_count(20, 16), 200);
        assert_eq!(enumerate_spans(20, 16).len(), 200);
        assert_eq!(candidate_count(3, 16), 6);
        assert_eq!(enumerate_spans(0, 16).len(), 0);
    }

    #[test]
    fn greedy_prefers_high_scores() {
        let c = vec![(0, 3, 1, -0.1), (1, 2, 2, -0.05), (2, 4, 1, -0.5), (4, 5, 0, -0.01), (4, 5, 1, -0.9)];
        let d = decode_greedy(c);
        assert_eq!(d, vec![(1, 2, 2, -0.05), (2, 4, 1, -0.5), (4, 5, 1, -0.9)]);
    }

    #[test]
    fn bio_conversion() {
        let tags: Vec<String> = "B-PER I-PER O B-LOC I-ORG O I-LOC".split(' ').map(String::from).collect();
        assert_eq!(
            bio_to_spans(&tags),
            vec![
                (0, 2, "PER".to_string()),
                (3, 4, "LOC".to_string()),
                (4, 5, "ORG".to_string()),
                (6, 7, "LOC".to_string())
            ]
        );
    }

    #[test]
    fn conll_reader() {
        let text = "-DOCSTART- O\n\nAlice B-PER\nlives O\nin O\nParis B-LOC\n\nBob B-PER\n";
        let d = read_conll(text.as_bytes(), "en").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].spans, vec![(0, 1, "PER".into()), (3, 4, "LOC".into())]);
        assert_eq!(type_set(&d), vec!["LOC".to_string(), "PER".to_string()]);
    }

    fn fixture() -> (WordVocab, Model, NerInstance) {
        let v = WordVocab::from_tokens("Alice lives in Paris".split(' '));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cfg = EncoderConfig::tiny(v.len(), 6);
        cfg.max_entities = 4;
        let m = Model::init(cfg, 0.2, &mut rng).unwrap();
        let inst = NerInstance {
            tokens: "Alice lives in Paris".split(' ').map(String::from).collect(),
            spans: vec![(0, 1, "PER".into()), (3, 4, "LOC".into())],
            lang: "en".into(),
        };
        (v, m, inst)
    }

    #[test]
    fn entity_variant_chunks_all_spans() {
        let (v, mut m, inst) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let task = NerTask::attach(&mut m, v, NerVariant::EntityMask, vec!["LOC".into(), "PER".into()], 0.1, &mut rng).unwrap();
        let c = task.candidates(&m, &inst).unwrap();
        assert_eq!(c.len(), 10);
        let mut g = Graph::new(&m.params);
        let (_, parts) = task.span_logits(&mut g, &m, &inst).unwrap();
        assert_eq!(parts.len(), 3);
    }

    #[test]
    fn both_variants_learn_fixture() {
        for variant in [NerVariant::WordEndpoints, NerVariant::EntityMask] {
            let (v, mut m, inst) = fixture();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let task = NerTask::attach(&mut m, v, variant, vec!["LOC".into(), "PER".into()], 0.1, &mut rng).unwrap();
            let cfg = super::super::FinetuneConfig {
                learning_rate: 1e-2,
                epochs: 40,
                batch_size: 1,
                ..super::super::FinetuneConfig::re_ner()
            };
            let data = vec![inst.clone()];
            super::super::finetune(&mut m, &task, &data, None, &cfg).unwrap();
            let mut p = task.predict(&m, &inst).unwrap();
            p.sort();
            let mut gold = inst.spans.clone();
            gold.sort();
            assert_eq!(p, gold, "{variant:?}");
        }
    }
}
