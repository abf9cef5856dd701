//! Cross-lingual alignment diagnostics: contextual word retrieval and the
//! language modularity of a k-nearest-neighbour graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncodedSequence, Model};
use crate::linker::EntityMention;
use crate::par;
use crate::tasks::re::{ReInstance, ReTask, ReVariant};
use crate::tasks::TaskError;
use crate::tensor::{Graph, Tensor};
use crate::vocab::{self, WordVocab};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("invalid input: {0}")]
    Contract(String),
    #[error("line {line}: {reason}")]
    Data { line: usize, reason: String },
    #[error("unknown feature spec {0:?} (expected span-mean, re-word or re-entity)")]
    UnknownSpec(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AlignError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanEmbedding {
    pub id: String,
    pub lang: String,
    pub text: String,
    pub vector: Vec<f64>,
}

/// Mean of the rows `start..end` of a `[n, H]` word-vector matrix.
pub fn span_embed(word_vectors: &Tensor, start: usize, end: usize) -> Result<Vec<f64>> {
    if start >= end {
        return Err(AlignError::Contract(format!("empty span [{start}, {end})")));
    }
    if end > word_vectors.rows() {
        return Err(AlignError::Contract(format!(
            "span [{start}, {end}) outside {} rows",
            word_vectors.rows()
        )));
    }
    let mut out = vec![0.0; word_vectors.cols()];
    for r in start..end {
        for (o, v) in out.iter_mut().zip(word_vectors.row(r)) {
            *o += v;
        }
    }
    let n = (end - start) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

fn norm(v: &[f64]) -> Result<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(AlignError::Contract("zero-norm or non-finite vector".into()));
    }
    Ok(n)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AlignError::Contract(format!("dimension mismatch {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (norm(a)? * norm(b)?))
}

/// Mean reciprocal rank of `gold[i]` in `pool` for each query under cosine
/// similarity. Ties rank the lower pool index first.
pub fn cwr_mrr(queries: &[Vec<f64>], pool: &[Vec<f64>], gold: &[usize]) -> Result<f64> {
    if queries.is_empty() || queries.len() != gold.len() {
        return Err(AlignError::Contract("need one gold index per query".into()));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= pool.len()) {
        return Err(AlignError::Contract(format!("gold index {g} outside pool of {}", pool.len())));
    }
    let rr = par::map_range(queries.len(), |i| -> Result<f64> {
        let sims = pool.iter().map(|p| cosine(&queries[i], p)).collect::<Result<Vec<_>>>()?;
        let g = gold[i];
        let ahead = sims
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > sims[g] || (s == sims[g] && j < g))
            .count();
        Ok(1.0 / (ahead + 1) as f64)
    });
    let mut total = 0.0;
    for r in rr {
        total += r?;
    }
    Ok(total / queries.len() as f64)
}

/// Retrieval MRR with `query_lang` as queries against every other
/// language. Records pair up by id; queries without a parallel record in a
/// target language are dropped for that language.
pub fn cwr_by_language(embeddings: &[SpanEmbedding], query_lang: &str) -> Result<BTreeMap<String, f64>> {
    let mut by_lang: BTreeMap<&str, Vec<&SpanEmbedding>> = BTreeMap::new();
    for e in embeddings {
        by_lang.entry(e.lang.as_str()).or_default().push(e);
    }
    let queries = by_lang
        .get(query_lang)
        .ok_or_else(|| AlignError::Contract(format!("no records in query language {query_lang:?}")))?;
    let mut out = BTreeMap::new();
    for (lang, pool) in &by_lang {
        if *lang == query_lang {
            continue;
        }
        let index: HashMap<&str, usize> = pool.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
        let (qs, gold): (Vec<Vec<f64>>, Vec<usize>) = queries
            .iter()
            .filter_map(|q| index.get(q.id.as_str()).map(|&g| (q.vector.clone(), g)))
            .unzip();
        if qs.is_empty() {
            continue;
        }
        let pool_vecs: Vec<Vec<f64>> = pool.iter().map(|e| e.vector.clone()).collect();
        out.insert(lang.to_string(), cwr_mrr(&qs, &pool_vecs, &gold)?);
    }
    Ok(out)
}

/// Undirected k-NN graph; edges are stored as `(u, v)` with `u < v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub labels: Vec<String>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl KnnGraph {
    pub fn from_edges(labels: Vec<String>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let n = labels.len();
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u == v || u >= n || v >= n {
                return Err(AlignError::Contract(format!("bad edge ({u}, {v})")));
            }
            set.insert((u.min(v), u.max(v)));
        }
        Ok(KnnGraph { labels, edges: set })
    }

    /// Cosine k-NN over `vectors`, symmetrised by union. Neighbours are
    /// ranked by similarity, then by index.
    pub fn build(vectors: &[Vec<f64>], labels: Vec<String>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(AlignError::Contract("k must be at least 1".into()));
        }
        if vectors.len() != labels.len() {
            return Err(AlignError::Contract("one label per vector required".into()));
        }
        let neighbours = par::map_range(vectors.len(), |i| -> Result<Vec<usize>> {
            let mut sims = Vec::with_capacity(vectors.len());
            for (j, v) in vectors.iter().enumerate() {
                if j != i {
                    sims.push((cosine(&vectors[i], v)?, j));
                }
            }
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            Ok(sims.into_iter().take(k).map(|(_, j)| j).collect())
        });
        let mut edges = Vec::new();
        for (i, ns) in neighbours.into_iter().enumerate() {
            edges.extend(ns?.into_iter().map(|j| (i, j)));
        }
        Self::from_edges(labels, edges)
    }
}

/// Newman modularity with the node labels as communities:
/// `sum_c (e_cc - a_c^2)`. `None` when fewer than two labels occur or the
/// graph has no edges.
pub fn graph_modularity(graph: &KnnGraph) -> Option<f64> {
    let langs: BTreeSet<&str> = graph.labels.iter().map(String::as_str).collect();
    if langs.len() < 2 || graph.edges.is_empty() {
        return None;
    }
    let m = graph.edges.len() as f64;
    let mut inside: BTreeMap<&str, f64> = BTreeMap::new();
    let mut ends: BTreeMap<&str, f64> = BTreeMap::new();
    for &(u, v) in &graph.edges {
        let (lu, lv) = (graph.labels[u].as_str(), graph.labels[v].as_str());
        if lu == lv {
            *inside.entry(lu).or_default() += 1.0;
        }
        *ends.entry(lu).or_default() += 1.0;
        *ends.entry(lv).or_default() += 1.0;
    }
    Some(
        langs
            .iter()
            .map(|c| {
                let e = inside.get(c).copied().unwrap_or(0.0) / m;
                let a = ends.get(c).copied().unwrap_or(0.0) / (2.0 * m);
                e - a * a
            })
            .sum(),
    )
}

/// Language modularity of the symmetrised cosine k-NN graph.
pub fn modularity(embeddings: &[SpanEmbedding], k: usize) -> Result<Option<f64>> {
    let vectors: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let labels = embeddings.iter().map(|e| e.lang.clone()).collect();
    Ok(graph_modularity(&KnnGraph::build(&vectors, labels, k)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSpec {
    SpanMean,
    ReConcat(ReVariant),
}

impl std::str::FromStr for FeatureSpec {
    type Err = AlignError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span-mean" => Ok(FeatureSpec::SpanMean),
            "re-word" => Ok(FeatureSpec::ReConcat(ReVariant::WordMarkers)),
            "re-entity" => Ok(FeatureSpec::ReConcat(ReVariant::EntityMask)),
            _ => Err(AlignError::UnknownSpec(s.to_string())),
        }
    }
}

/// One span to embed: `[start, end)` over `tokens`, with optional entity
/// mentions attached to the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanItem {
    pub id: String,
    pub lang: String,
    pub tokens: Vec<String>,
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
}

/// Mean-pooled contextual vectors of each item's span.
pub fn span_features(model: &Model, words: &WordVocab, items: &[SpanItem]) -> Result<Vec<SpanEmbedding>> {
    par::map(items, |it| -> Result<SpanEmbedding> {
        if it.start >= it.end || it.end > it.tokens.len() {
            return Err(AlignError::Contract(format!("item {}: bad span [{}, {})", it.id, it.start, it.end)));
        }
        let mut ids = vec![vocab::CLS];
        ids.extend(words.encode(&it.tokens));
        ids.push(vocab::SEP);
        let mut seq = EncodedSequence::words(ids);
        for m in &it.entities {
            seq.push_entity(m.entity, (m.start + 1..m.end + 1).collect());
        }
        let out = model.encode(&seq)?;
        Ok(SpanEmbedding {
            id: it.id.clone(),
            lang: it.lang.clone(),
            text: it.tokens[it.start..it.end].join(" "),
            vector: span_embed(&out.word_vectors, it.start + 1, it.end + 1)?,
        })
    })
    .into_iter()
    .collect()
}

/// Head and tail features concatenated (`2H`), taken from an un-tuned copy
/// of `model` prepared for `variant`. Ids are the instance's line index.
pub fn re_features(
    model: &Model,
    words: &WordVocab,
    data: &[ReInstance],
    variant: ReVariant,
    seed: u64,
) -> Result<Vec<SpanEmbedding>> {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = ReTask::attach(&mut m, words.clone(), variant, vec!["_".into()], 0.02, &mut rng)?;
    par::map_range(data.len(), |i| -> Result<SpanEmbedding> {
        let inst = &data[i];
        let mut g = Graph::new(&m.params);
        let f = task.features(&mut g, &m, inst)?;
        Ok(SpanEmbedding {
            id: i.to_string(),
            lang: inst.lang.clone(),
            text: inst.tokens.join(" "),
            vector: g.value(f).data().to_vec(),
        })
    })
    .into_iter()
    .collect()
}

pub fn write_embeddings<W: Write>(mut w: W, embeddings: &[SpanEmbedding]) -> Result<()> {
    for e in embeddings {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_embeddings<R: BufRead>(r: R) -> Result<Vec<SpanEmbedding>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: SpanEmbedding = serde_json::from_str(&line).map_err(|err| AlignError::Data {
            line: i + 1,
            reason: err.to_string(),
        })?;
        if e.vector.iter().any(|x| !x.is_finite()) {
            return Err(AlignError::Data {
                line: i + 1,
                reason: "non-finite vector".into(),
            });
        }
        out.push(e);
    }
    Ok(out)
}

pub fn read_span_items<R: BufRead>(r: R) -> Result<Vec<SpanItem>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|err| AlignError::Data {
            line: i + 1,
            reason: err.to_string(),
        })?);
    }
    Ok(out)
}
