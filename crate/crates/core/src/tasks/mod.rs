//! Downstream heads (extractive QA, relation extraction, span NER) and the
//! shared fine-tuning loop.

pub mod metrics;
pub mod ner;
pub mod qa;
pub mod re;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, Model};
use crate::optim::{self, AdamConfig, AdamState, OptimError};
use crate::par;
use crate::seeding::{rng_for, Stream};
use crate::tensor::{Gradients, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid input: {0}")]
    Contract(String),
    #[error("line {line}: {reason}")]
    Data { line: usize, reason: String },
    #[error("non-finite loss in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

/// Fine-tuning hyperparameters. Defaults: lr 2e-5, weight decay 0.01,
/// warmup over the first 6% of steps followed by linear decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub threads: Option<usize>,
}

pub const QA_EPOCHS: usize = 2;
pub const RE_NER_EPOCHS: usize = 5;
/// Batch-size grids searched per task.
pub const QA_BATCH_SIZES: [usize; 2] = [16, 32];
pub const RE_NER_BATCH_SIZES: [usize; 3] = [4, 8, 16];

impl FinetuneConfig {
    pub fn qa() -> Self {
        FinetuneConfig {
            learning_rate: 2e-5,
            epochs: QA_EPOCHS,
            batch_size: QA_BATCH_SIZES[0],
            warmup_fraction: 0.06,
            adam: AdamConfig::default(),
            seed: 0,
            threads: None,
        }
    }

    pub fn re_ner() -> Self {
        FinetuneConfig {
            epochs: RE_NER_EPOCHS,
            batch_size: RE_NER_BATCH_SIZES[0],
            ..Self::qa()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TaskError::Contract("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || self.learning_rate < 0.0 {
            return Err(TaskError::Contract("bad learning rate or warmup fraction".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        self.epochs * examples.div_ceil(self.batch_size)
    }

    /// `ceil(warmup_fraction * total_steps)`.
    pub fn warmup_steps(&self, total: usize) -> usize {
        let x = self.warmup_fraction * total as f64;
        // keep products such as 0.07 * 100 = 7.000000000000001 at 7
        if (x - x.round()).abs() < 1e-9 {
            x.round() as usize
        } else {
            x.ceil() as usize
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        optim::stage_lr(step, total, self.warmup_steps(total), self.learning_rate)
    }
}

/// A fine-tunable task: a per-example loss and a development metric
/// (higher is better).
pub trait Task: Sync {
    type Example: Sync;

    fn loss(&self, g: &mut Graph<'_>, model: &Model, example: &Self::Example) -> Result<Option<Var>>;

    fn evaluate(&self, model: &Model, examples: &[Self::Example]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (the last one without dev data).
    pub best_epoch: usize,
    pub steps: usize,
}

/// AdamW fine-tuning of every parameter. With `dev` the parameters of the
/// best-scoring epoch are restored at the end.
pub fn finetune<T: Task>(
    model: &mut Model,
    task: &T,
    train: &[T::Example],
    dev: Option<&[T::Example]>,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(TaskError::Contract("no training examples".into()));
    }
    match config.threads {
        Some(n) => par::with_threads(n, move || finetune_inner(model, task, train, dev, config)),
        None => finetune_inner(model, task, train, dev, config),
    }
}

fn finetune_inner<T: Task>(
    model: &mut Model,
    task: &T,
    train: &[T::Example],
    dev: Option<&[T::Example]>,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    let total = config.total_steps(train.len());
    let mut state = AdamState::new(&model.params);
    let trainable = vec![true; model.params.len()];
    let mut step = 0;
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, crate::tensor::ParamStore)> = None;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(config.seed, Stream::Finetune, epoch as u64));
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (grads, l, n) = batch_grads(model, task, train, chunk, config.seed, step as u64)?;
            if !l.is_finite() || !grads.global_norm().is_finite() {
                return Err(TaskError::NonFinite { epoch });
            }
            loss_sum += l;
            loss_n += n;
            let lr = config.lr_at(step, total);
            optim::adamw_step(&mut model.params, &mut state, &grads, lr, &trainable, &config.adam)?;
            step += 1;
        }
        let dev_score = match dev {
            Some(d) if !d.is_empty() => Some(task.evaluate(model, d)?),
            _ => None,
        };
        if let Some(s) = dev_score {
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, epoch, model.params.clone()));
            }
        }
        records.push(EpochRecord {
            epoch,
            mean_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 },
            dev_score,
        });
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            model.params = params;
            e
        }
        None => config.epochs - 1,
    };
    Ok(FinetuneReport {
        epochs: records,
        best_epoch,
        steps: step,
    })
}

/// Mean-loss gradient over the selected examples.
fn batch_grads<T: Task>(
    model: &Model,
    task: &T,
    data: &[T::Example],
    picks: &[usize],
    seed: u64,
    step: u64,
) -> Result<(Gradients, f64, usize)> {
    let results = par::map_range(picks.len(), |j| -> Result<Option<(Gradients, f64)>> {
        let mut g = Graph::new(&model.params);
        if model.config.dropout > 0.0 {
            let id = step.wrapping_mul(1 << 20).wrapping_add(j as u64);
            g = g.with_dropout(model.config.dropout, rng_for(seed, Stream::Dropout, id));
        }
        let Some(loss) = task.loss(&mut g, model, &data[picks[j]])? else {
            return Ok(None);
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Ok(Some((Gradients::zeros_like(&model.params), value)));
        }
        Ok(Some((g.backward(loss)?, value)))
    });
    let mut grads = Gradients::zeros_like(&model.params);
    let mut total = 0.0;
    let mut n = 0;
    for r in results {
        if let Some((gr, l)) = r? {
            grads.add_assign(&gr);
            total += l;
            n += 1;
        }
    }
    if n > 0 {
        grads.scale(1.0 / n as f64);
    }
    Ok((grads, total, n))
}

/// `x W + b` with the head parameters `{prefix}.weight` / `{prefix}.bias`.
pub(crate) fn linear_head(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param_by_name(&format!("{prefix}.weight"))?;
    let b = g.param_by_name(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

/// Insert a freshly initialised `in x out` linear head.
pub(crate) fn init_linear_head<R: rand::Rng>(model: &mut Model, prefix: &str, input: usize, output: usize, std: f64, rng: &mut R) {
    model
        .params
        .insert(format!("{prefix}.weight"), Tensor::randn(&[input, output], std, rng));
    model
        .params
        .insert(format!("{prefix}.bias"), Tensor::zeros(&[1, output]));
}

/// Whitespace tokens with their byte ranges in `text`.
pub fn whitespace_tokens(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((text[s..i].to_string(), s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((text[s..].to_string(), s, text.len()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_boundary_is_ceil_six_percent() {
        let c = FinetuneConfig::qa();
        assert_eq!(c.warmup_steps(100), 6);
        assert_eq!(c.warmup_steps(101), 7);
        assert_eq!(c.warmup_steps(10), 1);
        let total = 50;
        assert_eq!(c.lr_at(0, total), 0.0);
        assert_eq!(c.lr_at(3, total), 2e-5);
        assert!(c.lr_at(2, total) < 2e-5);
        assert!(c.lr_at(49, total) > 0.0 && c.lr_at(49, total) < 1e-6);
    }

    #[test]
    fn defaults() {
        assert_eq!(FinetuneConfig::qa().epochs, 2);
        assert_eq!(FinetuneConfig::re_ner().epochs, 5);
        assert_eq!(FinetuneConfig::qa().learning_rate, 2e-5);
        assert_eq!(FinetuneConfig::qa().total_steps(33), 6);
    }

    #[test]
    fn whitespace_offsets() {
        let t = whitespace_tokens("  New  York\tCity ");
        assert_eq!(
            t,
            vec![
                ("New".to_string(), 2, 5),
                ("York".to_string(), 7, 11),
                ("City".to_string(), 12, 16)
            ]
        );
    }
}
