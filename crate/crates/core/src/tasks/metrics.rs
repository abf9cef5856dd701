//! Evaluation metrics: answer-overlap F1/EM with language-pair grouping,
//! macro-F1 for classification and span-level F1 for NER.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Result, TaskError};

/// Lowercase, replace punctuation by spaces, drop English articles and split
/// on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() || c.is_ascii_control() { ' ' } else { c })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(String::from)
        .collect()
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

/// Harmonic mean of bag-of-token precision and recall.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best score of `prediction` against any of the gold answers.
pub fn best_over_golds(prediction: &str, golds: &[String], f: fn(&str, &str) -> f64) -> f64 {
    golds.iter().map(|g| f(prediction, g)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaScore {
    pub f1: f64,
    pub em: f64,
    pub count: usize,
}

/// One scored QA prediction with its question and context languages.
#[derive(Debug, Clone, PartialEq)]
pub struct QaOutcome {
    pub question_lang: String,
    pub context_lang: String,
    pub prediction: String,
    pub golds: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    /// Keyed `"{context_lang}-{question_lang}"`.
    pub pairs: BTreeMap<String, QaScore>,
    pub overall: QaScore,
    /// Mean over pairs whose two languages differ; `None` if there is none.
    pub gxlt_f1: Option<f64>,
    pub gxlt_em: Option<f64>,
}

pub fn qa_metrics(outcomes: &[QaOutcome]) -> Result<QaReport> {
    if outcomes.is_empty() {
        return Err(TaskError::Contract("no gold answers to score".into()));
    }
    let mut groups: BTreeMap<(String, String), (f64, f64, usize)> = BTreeMap::new();
    for o in outcomes {
        if o.golds.is_empty() {
            return Err(TaskError::Contract("question without gold answer".into()));
        }
        let e = groups
            .entry((o.context_lang.clone(), o.question_lang.clone()))
            .or_default();
        e.0 += best_over_golds(&o.prediction, &o.golds, token_f1);
        e.1 += best_over_golds(&o.prediction, &o.golds, exact_match);
        e.2 += 1;
    }
    let mut pairs = BTreeMap::new();
    let (mut f_all, mut e_all, mut n_all) = (0.0, 0.0, 0);
    let (mut xf, mut xe, mut xn) = (0.0, 0.0, 0);
    for ((c, q), (f, e, n)) in groups {
        let score = QaScore {
            f1: f / n as f64,
            em: e / n as f64,
            count: n,
        };
        if c != q {
            xf += score.f1;
            xe += score.em;
            xn += 1;
        }
        f_all += f;
        e_all += e;
        n_all += n;
        pairs.insert(format!("{c}-{q}"), score);
    }
    Ok(QaReport {
        pairs,
        overall: QaScore {
            f1: f_all / n_all as f64,
            em: e_all / n_all as f64,
            count: n_all,
        },
        gxlt_f1: (xn > 0).then(|| xf / xn as f64),
        gxlt_em: (xn > 0).then(|| xe / xn as f64),
    })
}

/// Unweighted mean of per-label F1 over every label that occurs in either
/// the gold or the predicted labels.
pub fn macro_f1(gold: &[usize], predicted: &[usize]) -> Result<f64> {
    if gold.len() != predicted.len() || gold.is_empty() {
        return Err(TaskError::Contract("gold and predictions must be non-empty and aligned".into()));
    }
    let labels: BTreeSet<usize> = gold.iter().chain(predicted).copied().collect();
    let mut sum = 0.0;
    for &l in &labels {
        let tp = gold.iter().zip(predicted).filter(|(g, p)| **g == l && **p == l).count() as f64;
        let fp = predicted.iter().filter(|&&p| p == l).count() as f64 - tp;
        let fn_ = gold.iter().filter(|&&g| g == l).count() as f64 - tp;
        let denom = 2.0 * tp + fp + fn_;
        sum += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    Ok(sum / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro precision/recall/F1 of exact typed-span matches.
pub fn span_prf<T: Ord + Clone>(gold: &[Vec<T>], predicted: &[Vec<T>]) -> Prf {
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(predicted) {
        let gs: BTreeSet<T> = g.iter().cloned().collect();
        let ps: BTreeSet<T> = p.iter().cloned().collect();
        tp += gs.intersection(&ps).count();
        np += ps.len();
        ng += gs.len();
    }
    let precision = if np > 0 { tp as f64 / np as f64 } else { 0.0 };
    let recall = if ng > 0 { tp as f64 / ng as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf { precision, recall, f1 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert!((token_f1("New York", "New York City") - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("Paris", "Paris"), 1.0);
        assert_eq!(exact_match("the Paris.", "Paris"), 1.0);
        assert_eq!(token_f1("Rome", "Paris"), 0.0);
        assert_eq!(exact_match("Rome", "Paris"), 0.0);
    }

    fn outcome(c: &str, q: &str, p: &str, g: &str) -> QaOutcome {
        QaOutcome {
            question_lang: q.into(),
            context_lang: c.into(),
            prediction: p.into(),
            golds: vec![g.into()],
        }
    }

    #[test]
    fn gxlt_over_off_diagonal_pairs() {
        let langs = ["en", "es", "de", "ar", "hi", "vi", "zh"];
        let mut out = Vec::new();
        for c in langs {
            for q in langs {
                let right = c == q;
                out.push(outcome(c, q, if right { "x" } else { "y" }, "x"));
            }
        }
        let r = qa_metrics(&out).unwrap();
        assert_eq!(r.pairs.len(), 49);
        assert_eq!(r.gxlt_f1, Some(0.0));
        assert!((r.overall.f1 - 7.0 / 49.0).abs() < 1e-12);
        assert_eq!(r.pairs["en-en"].em, 1.0);
        assert!(qa_metrics(&[]).is_err());
    }

    #[test]
    fn macro_f1_cases() {
        let gold: Vec<usize> = (0..18).collect();
        assert_eq!(macro_f1(&gold, &gold).unwrap(), 1.0);
        // label 0: tp1 fp1 -> 2/3, label 1: tp0 fn1 -> 0
        let f = macro_f1(&[0, 1], &[0, 0]).unwrap();
        assert!((f - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn span_micro_f1() {
        let gold = vec![vec![(0, 2, 1), (3, 4, 2)]];
        let pred = vec![vec![(0, 2, 1), (3, 4, 1)]];
        let p = span_prf(&gold, &pred);
        assert_eq!(p.precision, 0.5);
        assert_eq!(p.recall, 0.5);
        assert_eq!(p.f1, 0.5);
    }
}
