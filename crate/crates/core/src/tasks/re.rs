//! Relation classification between a head and a tail mention.
//!
//! Two feature extractors: marker tokens `<ent>` / `<ent2>` wrapped around
//! the mentions (the feature is the contextual vector of each opening
//! marker), or the `[HEAD]` / `[TAIL]` entity tokens attached to the mention
//! spans. Either way the two vectors are concatenated and fed to a linear
//! classifier.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics;
use super::{init_linear_head, linear_head, Result, Task, TaskError};
use crate::encoder::{self, names, EncodedSequence, Model};
use crate::entity_vocab;
use crate::tensor::{Graph, Var};
use crate::vocab::{self, WordVocab};

pub const HEAD: &str = "re.classifier";
pub const MARKER_HEAD: &str = "<ent>";
pub const MARKER_TAIL: &str = "<ent2>";
/// Relation inventory size of the cross-lingual benchmark the heads target.
pub const BENCHMARK_RELATIONS: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReVariant {
    WordMarkers,
    EntityMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReInstance {
    pub label: String,
    pub tokens: Vec<String>,
    /// `[start, end)` token ranges.
    pub head: (usize, usize),
    pub tail: (usize, usize),
    #[serde(default)]
    pub lang: String,
}

impl ReInstance {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        for (name, (s, e)) in [("head", self.head), ("tail", self.tail)] {
            if s >= e || e > n {
                return Err(TaskError::Contract(format!("{name} span [{s}, {e}) outside {n} tokens")));
            }
        }
        if self.head.0 < self.tail.1 && self.tail.0 < self.head.1 {
            return Err(TaskError::Contract("head and tail spans overlap".into()));
        }
        Ok(())
    }
}

/// Task state persisted with a fine-tuned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReSpec {
    pub variant: ReVariant,
    pub labels: Vec<String>,
    /// Word ids of `<ent>` and `<ent2>` for the marker variant.
    pub markers: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct ReTask {
    pub vocab: WordVocab,
    pub spec: ReSpec,
}

/// Where the two feature vectors come from.
enum Features {
    Words(usize, usize),
    Entities(usize, usize),
}

impl ReTask {
    /// Prepare `model` for the variant and add the classifier.
    ///
    /// Marker variant: `<ent>` and `<ent2>` are appended to the word
    /// vocabulary with random embeddings. Entity variant: the `[HEAD]` and
    /// `[TAIL]` rows are overwritten with the entity `[MASK]` row.
    pub fn attach<R: Rng>(
        model: &mut Model,
        mut vocab: WordVocab,
        variant: ReVariant,
        labels: Vec<String>,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(TaskError::Contract("relation label set is empty".into()));
        }
        let markers = match variant {
            ReVariant::WordMarkers => Some(add_markers(model, &mut vocab, std, rng)?),
            ReVariant::EntityMask => {
                init_head_tail_from_mask(model)?;
                None
            }
        };
        let h = model.config.hidden_size;
        init_linear_head(model, HEAD, 2 * h, labels.len(), std, rng);
        Ok(ReTask {
            vocab,
            spec: ReSpec {
                variant,
                labels,
                markers,
            },
        })
    }

    /// Rebuild from a fine-tuned model's saved spec; `vocab` must already
    /// contain the markers when the spec has them.
    pub fn from_spec(vocab: WordVocab, spec: ReSpec) -> Self {
        ReTask { vocab, spec }
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.spec
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| TaskError::Contract(format!("unknown relation label {label:?}")))
    }

    fn encode_instance(&self, inst: &ReInstance) -> Result<(EncodedSequence, Features)> {
        inst.validate()?;
        match (self.spec.variant, self.spec.markers) {
            (ReVariant::WordMarkers, Some((m_head, m_tail))) => {
                let mut ids = vec![vocab::CLS];
                let (mut fh, mut ft) = (0, 0);
                for (i, tok) in inst.tokens.iter().enumerate() {
                    if i == inst.head.0 {
                        fh = ids.len();
                        ids.push(m_head);
                    }
                    if i == inst.tail.0 {
                        ft = ids.len();
                        ids.push(m_tail);
                    }
                    ids.push(self.vocab.id(tok));
                    if i + 1 == inst.head.1 {
                        ids.push(m_head);
                    }
                    if i + 1 == inst.tail.1 {
                        ids.push(m_tail);
                    }
                }
                ids.push(vocab::SEP);
                Ok((EncodedSequence::words(ids), Features::Words(fh, ft)))
            }
            (ReVariant::WordMarkers, None) => Err(TaskError::Contract("marker ids missing".into())),
            (ReVariant::EntityMask, _) => {
                let mut ids = vec![vocab::CLS];
                ids.extend(self.vocab.encode(&inst.tokens));
                ids.push(vocab::SEP);
                let mut seq = EncodedSequence::words(ids);
                let head = (entity_vocab::HEAD, inst.head);
                let tail = (entity_vocab::TAIL, inst.tail);
                // entity tokens in text order, so the input does not depend on role order
                let (first, second, head_slot) = if inst.head.0 < inst.tail.0 {
                    (head, tail, 0)
                } else {
                    (tail, head, 1)
                };
                for (id, (s, e)) in [first, second] {
                    seq.push_entity(id, (s + 1..e + 1).collect());
                }
                Ok((seq, Features::Entities(head_slot, 1 - head_slot)))
            }
        }
    }

    /// `1 x 2H` concatenated head/tail feature.
    pub fn features(&self, g: &mut Graph<'_>, model: &Model, inst: &ReInstance) -> Result<Var> {
        let (seq, which) = self.encode_instance(inst)?;
        let out = encoder::encode(g, &model.config, &seq)?;
        let (src, a, b) = match which {
            Features::Words(a, b) => (out.words, a, b),
            Features::Entities(a, b) => (
                out.entities
                    .ok_or_else(|| TaskError::Contract("entity tokens missing".into()))?,
                a,
                b,
            ),
        };
        let ha = g.slice_rows(src, a, 1)?;
        let hb = g.slice_rows(src, b, 1)?;
        Ok(g.concat_cols(&[ha, hb])?)
    }

    pub fn logits(&self, g: &mut Graph<'_>, model: &Model, inst: &ReInstance) -> Result<Var> {
        let f = self.features(g, model, inst)?;
        linear_head(g, f, HEAD)
    }

    pub fn predict(&self, model: &Model, inst: &ReInstance) -> Result<usize> {
        let mut g = Graph::new(&model.params);
        let l = self.logits(&mut g, model, inst)?;
        let row = g.value(l).row(0);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn predict_all(&self, model: &Model, data: &[ReInstance]) -> Result<Vec<usize>> {
        crate::par::map(data, |x| self.predict(model, x))
            .into_iter()
            .collect()
    }

    pub fn accuracy(&self, model: &Model, data: &[ReInstance]) -> Result<f64> {
        let pred = self.predict_all(model, data)?;
        let mut right = 0;
        for (p, x) in pred.iter().zip(data) {
            if *p == self.label_index(&x.label)? {
                right += 1;
            }
        }
        Ok(right as f64 / data.len().max(1) as f64)
    }

    pub fn macro_f1(&self, model: &Model, data: &[ReInstance]) -> Result<f64> {
        let pred = self.predict_all(model, data)?;
        let gold = data
            .iter()
            .map(|x| self.label_index(&x.label))
            .collect::<Result<Vec<_>>>()?;
        metrics::macro_f1(&gold, &pred)
    }
}

impl Task for ReTask {
    type Example = ReInstance;

    fn loss(&self, g: &mut Graph<'_>, model: &Model, inst: &ReInstance) -> Result<Option<Var>> {
        let y = self.label_index(&inst.label)?;
        let l = self.logits(g, model, inst)?;
        Ok(Some(g.cross_entropy(l, &[Some(y)])?.0))
    }

    fn evaluate(&self, model: &Model, data: &[ReInstance]) -> Result<f64> {
        self.macro_f1(model, data)
    }
}

fn add_markers<R: Rng>(model: &mut Model, vocab: &mut WordVocab, std: f64, rng: &mut R) -> Result<(usize, usize)> {
    if vocab.len() != model.config.word_vocab_size {
        return Err(TaskError::Contract(format!(
            "word vocabulary has {} entries, model expects {}",
            vocab.len(),
            model.config.word_vocab_size
        )));
    }
    let first = model.add_word_tokens(2, std, rng)?;
    let a = vocab.push(MARKER_HEAD);
    let b = vocab.push(MARKER_TAIL);
    if (a, b) != (first, first + 1) {
        return Err(TaskError::Contract("marker tokens already present in vocabulary".into()));
    }
    Ok((a, b))
}

/// Copy the entity `[MASK]` embedding into the `[HEAD]` and `[TAIL]` rows.
pub fn init_head_tail_from_mask(model: &mut Model) -> Result<()> {
    let id = model.params.expect_id(names::ENTITY_EMB)?;
    let table = model.params.get_mut(id);
    if table.rows() <= entity_vocab::TAIL {
        return Err(TaskError::Contract("entity table lacks [HEAD]/[TAIL] rows".into()));
    }
    let mask = table.row(entity_vocab::MASK).to_vec();
    table.row_mut(entity_vocab::HEAD).copy_from_slice(&mask);
    table.row_mut(entity_vocab::TAIL).copy_from_slice(&mask);
    Ok(())
}

/// One JSON object per line: `label`, `tokens`, `head`, `tail`, `lang`.
pub fn read_re<R: BufRead>(r: R) -> Result<Vec<ReInstance>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: ReInstance = serde_json::from_str(&line).map_err(|e| TaskError::Data {
            line: i + 1,
            reason: e.to_string(),
        })?;
        inst.validate().map_err(|e| TaskError::Data {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_re<W: Write>(mut w: W, data: &[ReInstance]) -> Result<()> {
    for x in data {
        serde_json::to_writer(&mut w, x)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Sorted distinct labels.
pub fn label_set(data: &[ReInstance]) -> Vec<String> {
    let s: std::collections::BTreeSet<&str> = data.iter().map(|x| x.label.as_str()).collect();
    s.into_iter().map(String::from).collect()
}
