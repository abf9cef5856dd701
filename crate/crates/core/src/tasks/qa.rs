//! Extractive question answering over `[CLS] question [SEP] context [SEP]`.
//!
//! Every context token gets a start and an end logit; a span scores the sum
//! of its start and end logits. Detected entities of the question and the
//! context can be attached as extra entity tokens.

use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{self, QaOutcome, QaReport};
use super::{init_linear_head, linear_head, whitespace_tokens, Result, Task, TaskError};
use crate::encoder::{self, EncodedSequence, EncoderConfig, Model};
use crate::linker::EntityMention;
use crate::tensor::{Graph, Var};
use crate::vocab::{self, WordVocab};

pub const MAX_ANSWER_LEN: usize = 30;
pub const DOC_STRIDE: usize = 128;
pub const HEAD: &str = "qa.span";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub question: Vec<String>,
    pub context: Vec<String>,
    /// Gold answers as context token ranges `[start, end)`.
    pub answers: Vec<(usize, usize)>,
    pub answer_texts: Vec<String>,
    pub question_lang: String,
    pub context_lang: String,
    #[serde(default)]
    pub question_entities: Vec<EntityMention>,
    #[serde(default)]
    pub context_entities: Vec<EntityMention>,
}

impl QaInstance {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(TaskError::Contract(format!("{}: empty context", self.id)));
        }
        for &(s, e) in &self.answers {
            if s >= e || e > self.context.len() {
                return Err(TaskError::Contract(format!(
                    "{}: answer span [{s}, {e}) outside context of {} tokens",
                    self.id,
                    self.context.len()
                )));
            }
        }
        for (m, n) in [(&self.question_entities, self.question.len()), (&self.context_entities, self.context.len())] {
            if m.iter().any(|x| x.start >= x.end || x.end > n) {
                return Err(TaskError::Contract(format!("{}: entity mention out of range", self.id)));
            }
        }
        Ok(())
    }

    pub fn gold_texts(&self) -> Vec<String> {
        if !self.answer_texts.is_empty() {
            return self.answer_texts.clone();
        }
        self.answers
            .iter()
            .map(|&(s, e)| self.context[s..e].join(" "))
            .collect()
    }
}

/// One encoder pass over a slice of the context.
#[derive(Debug, Clone, PartialEq)]
pub struct QaWindow {
    pub sequence: EncodedSequence,
    /// First context token covered.
    pub context_start: usize,
    pub context_len: usize,
    /// Word position of the first context token.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPrediction {
    pub id: String,
    /// Context token range `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct QaTask {
    pub vocab: WordVocab,
    pub use_entities: bool,
    pub max_answer_len: usize,
    pub stride: usize,
}

impl QaTask {
    pub fn new(vocab: WordVocab, use_entities: bool) -> Self {
        QaTask {
            vocab,
            use_entities,
            max_answer_len: MAX_ANSWER_LEN,
            stride: DOC_STRIDE,
        }
    }

    /// Add the span head (`hidden x 2`).
    pub fn attach<R: Rng>(model: &mut Model, std: f64, rng: &mut R) {
        let h = model.config.hidden_size;
        init_linear_head(model, HEAD, h, 2, std, rng);
    }

    /// Split the context into windows that fit the encoder, `stride` tokens apart.
    pub fn windows(&self, config: &EncoderConfig, inst: &QaInstance) -> Result<Vec<QaWindow>> {
        inst.validate()?;
        let q = inst.question.len();
        let budget = config
            .max_positions
            .checked_sub(q + 3)
            .filter(|&b| b > 0)
            .ok_or_else(|| TaskError::Contract(format!("{}: question too long", inst.id)))?;
        let step = self.stride.clamp(1, budget);
        let n = inst.context.len();
        let mut starts = vec![0];
        while starts.last().expect("non-empty") + budget < n {
            starts.push(starts.last().expect("non-empty") + step);
        }
        let q_ids = self.vocab.encode(&inst.question);
        let mut out = Vec::new();
        for s in starts {
            let len = budget.min(n - s);
            let mut ids = Vec::with_capacity(q + len + 3);
            ids.push(vocab::CLS);
            ids.extend(&q_ids);
            ids.push(vocab::SEP);
            let offset = ids.len();
            ids.extend(self.vocab.encode(&inst.context[s..s + len]));
            ids.push(vocab::SEP);
            let mut seq = EncodedSequence::words(ids);
            if self.use_entities {
                for m in &inst.question_entities {
                    if seq.num_entities() < config.max_entities {
                        seq.push_entity(m.entity, (m.start + 1..m.end + 1).collect());
                    }
                }
                for m in &inst.context_entities {
                    if m.start >= s && m.end <= s + len && seq.num_entities() < config.max_entities {
                        seq.push_entity(m.entity, (offset + m.start - s..offset + m.end - s).collect());
                    }
                }
            }
            out.push(QaWindow {
                sequence: seq,
                context_start: s,
                context_len: len,
                offset,
            });
        }
        Ok(out)
    }

    /// `context_len x 2` start/end logits of one window.
    fn window_logits(&self, g: &mut Graph<'_>, model: &Model, w: &QaWindow) -> Result<Var> {
        let out = encoder::encode(g, &model.config, &w.sequence)?;
        let ctx = g.slice_rows(out.words, w.offset, w.context_len)?;
        linear_head(g, ctx, HEAD)
    }

    /// Highest-scoring span across windows; ties go to the earliest start,
    /// then the shortest span.
    pub fn predict(&self, model: &Model, inst: &QaInstance) -> Result<QaPrediction> {
        let mut best: Option<(f64, usize, usize)> = None;
        for w in self.windows(&model.config, inst)? {
            let mut g = Graph::new(&model.params);
            let logits = self.window_logits(&mut g, model, &w)?;
            let t = g.value(logits);
            for i in 0..w.context_len {
                for j in i..w.context_len.min(i + self.max_answer_len) {
                    let score = t.row(i)[0] + t.row(j)[1];
                    let (s, e) = (w.context_start + i, w.context_start + j + 1);
                    let better = match best {
                        None => true,
                        Some((bs, b0, b1)) => {
                            score > bs || (score == bs && (s < b0 || (s == b0 && e - s < b1 - b0)))
                        }
                    };
                    if better {
                        best = Some((score, s, e));
                    }
                }
            }
        }
        let (score, start, end) = best.ok_or_else(|| TaskError::Contract(format!("{}: no candidate span", inst.id)))?;
        Ok(QaPrediction {
            id: inst.id.clone(),
            start,
            end,
            score,
            text: inst.context[start..end].join(" "),
        })
    }

    pub fn evaluate_report(&self, model: &Model, data: &[QaInstance]) -> Result<(Vec<QaPrediction>, QaReport)> {
        let preds = crate::par::map(data, |inst| self.predict(model, inst))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let outcomes: Vec<QaOutcome> = data
            .iter()
            .zip(&preds)
            .map(|(inst, p)| QaOutcome {
                question_lang: inst.question_lang.clone(),
                context_lang: inst.context_lang.clone(),
                prediction: p.text.clone(),
                golds: inst.gold_texts(),
            })
            .collect();
        let report = metrics::qa_metrics(&outcomes)?;
        Ok((preds, report))
    }
}

impl Task for QaTask {
    type Example = QaInstance;

    /// Start/end cross-entropy on the first window holding the first answer.
    fn loss(&self, g: &mut Graph<'_>, model: &Model, inst: &QaInstance) -> Result<Option<Var>> {
        let Some(&(s, e)) = inst.answers.first() else {
            return Ok(None);
        };
        let windows = self.windows(&model.config, inst)?;
        let Some(w) = windows
            .into_iter()
            .find(|w| s >= w.context_start && e <= w.context_start + w.context_len)
        else {
            return Ok(None);
        };
        let logits = self.window_logits(g, model, &w)?;
        let by_kind = g.transpose(logits);
        let labels = [Some(s - w.context_start), Some(e - 1 - w.context_start)];
        let (loss, _) = g.cross_entropy(by_kind, &labels)?;
        Ok(Some(loss))
    }

    fn evaluate(&self, model: &Model, data: &[QaInstance]) -> Result<f64> {
        Ok(self.evaluate_report(model, data)?.1.overall.f1)
    }
}

#[derive(Deserialize)]
struct RawAnswer {
    text: String,
    answer_start: usize,
}

#[derive(Deserialize)]
struct RawQa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<RawAnswer>,
    #[serde(default)]
    question_lang: Option<String>,
    #[serde(default)]
    lang: Option<String>,
    #[serde(default)]
    question_entities: Vec<EntityMention>,
}

#[derive(Deserialize)]
struct RawParagraph {
    context: String,
    qas: Vec<RawQa>,
    #[serde(default)]
    lang: Option<String>,
    #[serde(default)]
    context_entities: Vec<EntityMention>,
}

#[derive(Deserialize)]
struct RawArticle {
    paragraphs: Vec<RawParagraph>,
    #[serde(default)]
    lang: Option<String>,
}

#[derive(Deserialize)]
struct RawDataset {
    data: Vec<RawArticle>,
    #[serde(default)]
    lang: Option<String>,
}

/// Context tokens covering the character range of an answer.
fn char_span_to_tokens(context: &str, tokens: &[(String, usize, usize)], char_start: usize, text: &str) -> Option<(usize, usize)> {
    let byte_start = context.char_indices().nth(char_start).map(|(b, _)| b)?;
    let byte_end = byte_start + text.len();
    let s = tokens.iter().position(|t| t.2 > byte_start)?;
    let e = tokens.iter().rposition(|t| t.1 < byte_end)?;
    (s <= e).then_some((s, e + 1))
}

/// Read a SQuAD-shaped JSON dataset (`data -> paragraphs -> qas`). Language
/// fields (`lang`, `question_lang`) may sit on the dataset, article,
/// paragraph or question; missing languages default to `"en"`.
pub fn read_qa<R: BufRead>(r: R) -> Result<Vec<QaInstance>> {
    let raw: RawDataset = serde_json::from_reader(r)?;
    let mut out = Vec::new();
    for art in raw.data {
        for para in art.paragraphs {
            let ctx_lang = para
                .lang
                .clone()
                .or(art.lang.clone())
                .or(raw.lang.clone())
                .unwrap_or_else(|| "en".into());
            let toks = whitespace_tokens(&para.context);
            let context: Vec<String> = toks.iter().map(|t| t.0.clone()).collect();
            for qa in para.qas {
                let mut answers = Vec::new();
                for a in &qa.answers {
                    let span = char_span_to_tokens(&para.context, &toks, a.answer_start, &a.text)
                        .ok_or_else(|| TaskError::Contract(format!("{}: answer not on token boundaries", qa.id)))?;
                    answers.push(span);
                }
                let inst = QaInstance {
                    id: qa.id,
                    question: whitespace_tokens(&qa.question).into_iter().map(|t| t.0).collect(),
                    context: context.clone(),
                    answers,
                    answer_texts: qa.answers.into_iter().map(|a| a.text).collect(),
                    question_lang: qa.question_lang.or(qa.lang).unwrap_or_else(|| ctx_lang.clone()),
                    context_lang: ctx_lang.clone(),
                    question_entities: qa.question_entities,
                    context_entities: para.context_entities.clone(),
                };
                inst.validate()?;
                out.push(inst);
            }
        }
    }
    Ok(out)
}
