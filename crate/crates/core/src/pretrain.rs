//! Joint MLM + MEP pretraining with the two-stage schedule.
//!
//! Stage 1 trains only the parameters outside the frozen selector (by
//! default the entity side); stage 2 trains everything. The learning-rate
//! schedule restarts its warmup at the stage boundary.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, ModelCheckpoint, RngState, StorageDtype};
use crate::corpus::{self, CorpusError, LanguageSampler, MaskedBatch, MaskingConfig};
use crate::encoder::{self, EncodedSequence, EncoderError, Model};
use crate::optim::{self, AdamConfig, AdamState, OptimError, ParamSelector};
use crate::par;
use crate::seeding::{rng_for, Stream};
use crate::tensor::{Gradients, Graph, ParamStore, Tensor, TensorError, Var};

/// Default stage-1 frozen set: everything except the entity embeddings
/// (table, projection, type embedding, layer norm) and the MEP classifier.
pub const DEFAULT_STAGE1_FROZEN: &str = "*,!entity_embeddings.*,!mep.*";

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; last checkpoint: {last_checkpoint:?}")]
    NonFinite {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PretrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub stage1_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub stage1_peak_lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Parameters held fixed during stage 1.
    pub stage1_frozen: ParamSelector,
    pub masking: MaskingConfig,
    pub language_alpha: f64,
    pub checkpoint_every: Option<usize>,
    pub log_every: usize,
    /// Worker threads; 1 is the strict single-threaded mode.
    pub threads: Option<usize>,
}

impl TrainConfig {
    /// Full-scale settings: 1M steps of 2048 sequences split evenly into two
    /// stages, 2500 warmup steps per stage.
    pub fn paper() -> Self {
        TrainConfig {
            total_steps: 1_000_000,
            stage1_steps: 500_000,
            batch_size: 2048,
            peak_lr: 1e-4,
            stage1_peak_lr: 5e-4,
            warmup_steps: 2500,
            adam: AdamConfig::default(),
            seed: 0,
            stage1_frozen: ParamSelector::parse(DEFAULT_STAGE1_FROZEN).expect("valid default"),
            masking: MaskingConfig::default(),
            language_alpha: corpus::DEFAULT_ALPHA,
            checkpoint_every: Some(10_000),
            log_every: 100,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PretrainError::Config(m.to_string()));
        if self.stage1_steps > self.total_steps {
            return bad("stage1_steps exceeds total_steps");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.peak_lr >= 0.0 && self.stage1_peak_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam.eps < 0.0 || self.adam.weight_decay < 0.0 {
            return bad("adam eps and weight decay must be non-negative");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive");
        }
        self.masking.validate()?;
        if !(self.language_alpha > 0.0 && self.language_alpha <= 1.0) {
            return bad("language_alpha must lie in (0, 1]");
        }
        Ok(())
    }

    /// 1 or 2.
    pub fn stage_of(&self, step: usize) -> u8 {
        if step < self.stage1_steps {
            1
        } else {
            2
        }
    }
}

/// Learning rate at global `step` (0-based). Each stage warms up from zero
/// over `warmup_steps` and decays linearly to zero at its own end.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    if step < config.stage1_steps {
        optim::stage_lr(step, config.stage1_steps, config.warmup_steps, config.stage1_peak_lr)
    } else {
        optim::stage_lr(
            step - config.stage1_steps,
            config.total_steps - config.stage1_steps,
            config.warmup_steps,
            config.peak_lr,
        )
    }
}

/// A masked-prediction loss node. With no labelled position the value is a
/// constant zero and `skipped` is set.
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub value: Var,
    pub count: usize,
    pub skipped: bool,
}

fn masked_loss(
    g: &mut Graph<'_>,
    vectors: Option<Var>,
    labels: &[Option<usize>],
    head: fn(&mut Graph<'_>, Var) -> encoder::Result<Var>,
) -> Result<Loss> {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let vectors = match vectors {
        Some(v) if !rows.is_empty() => v,
        _ => {
            let value = g.input(Tensor::scalar(0.0));
            return Ok(Loss {
                value,
                count: 0,
                skipped: true,
            });
        }
    };
    if g.value(vectors).rows() != labels.len() {
        return Err(TensorError::Shape {
            kernel: "masked_loss",
            detail: format!("{} vectors, {} labels", g.value(vectors).rows(), labels.len()),
        }
        .into());
    }
    let picked = g.gather_rows(vectors, &rows)?;
    let logits = head(g, picked)?;
    let compact: Vec<Option<usize>> = rows.iter().map(|&i| labels[i]).collect();
    let (value, count) = g.cross_entropy(logits, &compact)?;
    Ok(Loss {
        value,
        count,
        skipped: false,
    })
}

/// Mean cross-entropy of the MLM classifier over labelled word positions.
pub fn mlm_loss(g: &mut Graph<'_>, word_vectors: Var, labels: &[Option<usize>]) -> Result<Loss> {
    masked_loss(g, Some(word_vectors), labels, encoder::mlm_logits)
}

/// Mean cross-entropy of the MEP classifier over labelled entity positions.
pub fn mep_loss(g: &mut Graph<'_>, entity_vectors: Option<Var>, labels: &[Option<usize>]) -> Result<Loss> {
    masked_loss(g, entity_vectors, labels, encoder::mep_logits)
}

/// Batch losses and the gradient of their sum.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub grads: Gradients,
    pub mlm: f64,
    pub mep: f64,
    pub mlm_skipped: bool,
    pub mep_skipped: bool,
}

/// Gradient of `mean MLM + mean MEP` over all labelled positions of the
/// batch. Sequences are differentiated independently (in parallel when
/// enabled) and summed in batch order.
pub fn batch_gradients(model: &Model, batch: &[MaskedBatch], dropout_seeds: &[(u64, u64)]) -> Result<BatchOutcome> {
    let words: usize = batch
        .iter()
        .map(|b| b.word_labels.iter().flatten().count())
        .sum();
    let ents: usize = batch
        .iter()
        .map(|b| b.entity_labels.iter().flatten().count())
        .sum();
    let per_seq = par::map_range(batch.len(), |i| -> Result<Option<(Gradients, f64, f64)>> {
        let b = &batch[i];
        let c_w = b.word_labels.iter().flatten().count();
        let c_e = b.entity_labels.iter().flatten().count();
        if c_w == 0 && c_e == 0 {
            return Ok(None);
        }
        let mut g = Graph::new(&model.params);
        if model.config.dropout > 0.0 {
            let (seed, id) = dropout_seeds[i];
            g = g.with_dropout(model.config.dropout, rng_for(seed, Stream::Dropout, id));
        }
        let out = encoder::encode(&mut g, &model.config, &b.input)?;
        let mlm = mlm_loss(&mut g, out.words, &b.word_labels)?;
        let mep = mep_loss(&mut g, out.entities, &b.entity_labels)?;
        let w_mlm = if words > 0 { c_w as f64 / words as f64 } else { 0.0 };
        let w_mep = if ents > 0 { c_e as f64 / ents as f64 } else { 0.0 };
        let a = g.scale(mlm.value, w_mlm);
        let e = g.scale(mep.value, w_mep);
        let total = g.add(a, e)?;
        let mlm_part = g.value(a).item();
        let mep_part = g.value(e).item();
        if !g.value(total).item().is_finite() {
            return Ok(Some((Gradients::zeros_like(&model.params), f64::NAN, f64::NAN)));
        }
        Ok(Some((g.backward(total)?, mlm_part, mep_part)))
    });
    let mut grads = Gradients::zeros_like(&model.params);
    let (mut mlm, mut mep) = (0.0, 0.0);
    for r in per_seq {
        if let Some((g, a, e)) = r? {
            grads.add_assign(&g);
            mlm += a;
            mep += e;
        }
    }
    Ok(BatchOutcome {
        grads,
        mlm,
        mep,
        mlm_skipped: words == 0,
        mep_skipped: ents == 0,
    })
}

/// A training sequence and the index of its language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    pub sequence: EncodedSequence,
    pub language: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub mlm: f64,
    pub mep: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{:.6}\t{:.6}",
            self.step, self.stage, self.lr, self.mlm, self.mep
        )
    }
}

/// Where periodic checkpoints and log lines go.
#[derive(Default)]
pub struct RunOutput<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub dtype: StorageDtype,
    pub log: Option<&'a mut dyn Write>,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub step: u64,
    pub history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            optimizer,
            config,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Resume from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: ModelCheckpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ckpt.rng.seed != config.seed {
            return Err(PretrainError::Config(format!(
                "checkpoint seed {} differs from config seed {}",
                ckpt.rng.seed, config.seed
            )));
        }
        let optimizer = ckpt
            .optimizer
            .unwrap_or_else(|| AdamState::new(&ckpt.model.params));
        Ok(Trainer {
            model: ckpt.model,
            optimizer,
            config,
            step: ckpt.step,
            history: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        let mut c = ModelCheckpoint::new(self.model.clone(), self.config.seed);
        c.optimizer = Some(self.optimizer.clone());
        c.step = self.step;
        c.rng = RngState {
            seed: self.config.seed,
            step: self.step,
        };
        if let Ok(v) = serde_json::to_value(&self.config) {
            c.metadata.insert("train_config".into(), v);
        }
        c
    }

    /// Which parameters the optimizer may touch at `step`.
    pub fn trainable_mask(&self, step: usize) -> Vec<bool> {
        if self.config.stage_of(step) == 1 {
            self.config
                .stage1_frozen
                .mask(&self.model.params)
                .into_iter()
                .map(|frozen| !frozen)
                .collect()
        } else {
            vec![true; self.model.params.len()]
        }
    }

    /// Draw and mask the batch for the current step.
    pub fn make_batch(&self, data: &[TrainItem], sampler: &LanguageSampler) -> (Vec<MaskedBatch>, Vec<(u64, u64)>) {
        let mut rng = rng_for(self.config.seed, Stream::Corpus, self.step);
        let bs = self.config.batch_size as u64;
        let picks: Vec<usize> = (0..bs).map(|_| sampler.sample(&mut rng)).collect();
        let vocab = self.model.config.word_vocab_size;
        let batch = picks
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                corpus::mask_batch(
                    &data[i].sequence,
                    vocab,
                    &self.config.masking,
                    self.config.seed,
                    self.step * bs + j as u64,
                )
            })
            .collect();
        let seeds = (0..bs).map(|j| (self.config.seed, self.step * bs + j)).collect();
        (batch, seeds)
    }

    /// One optimizer step. The model is left untouched when the loss is not
    /// finite.
    pub fn train_step(&mut self, data: &[TrainItem], sampler: &LanguageSampler) -> Result<StepRecord> {
        let step = self.step as usize;
        let (batch, seeds) = self.make_batch(data, sampler);
        let out = batch_gradients(&self.model, &batch, &seeds)?;
        if !(out.mlm.is_finite() && out.mep.is_finite() && out.grads.global_norm().is_finite()) {
            return Err(PretrainError::NonFinite {
                step: self.step,
                last_checkpoint: None,
            });
        }
        let lr = lr_at(step, &self.config);
        let mask = self.trainable_mask(step);
        optim::adamw_step(
            &mut self.model.params,
            &mut self.optimizer,
            &out.grads,
            lr,
            &mask,
            &self.config.adam,
        )?;
        let rec = StepRecord {
            step: self.step,
            stage: self.config.stage_of(step),
            lr,
            mlm: out.mlm,
            mep: out.mep,
        };
        self.step += 1;
        self.history.push(rec);
        Ok(rec)
    }

    /// Train until `total_steps`, writing checkpoints and log lines.
    pub fn run(&mut self, data: &[TrainItem], num_languages: usize, mut out: RunOutput<'_>) -> Result<()> {
        let langs: Vec<usize> = data.iter().map(|d| d.language).collect();
        let sampler = LanguageSampler::new(&langs, num_languages, self.config.language_alpha)?;
        for item in data {
            item.sequence.validate(&self.model.config)?;
        }
        let threads = self.config.threads;
        let mut last_checkpoint: Option<PathBuf> = None;
        while (self.step as usize) < self.config.total_steps {
            let res = match threads {
                Some(n) => par::with_threads(n, || self.train_step(data, &sampler)),
                None => self.train_step(data, &sampler),
            };
            let rec = match res {
                Ok(r) => r,
                Err(PretrainError::NonFinite { step, .. }) => {
                    return Err(PretrainError::NonFinite { step, last_checkpoint })
                }
                Err(e) => return Err(e),
            };
            if let Some(w) = out.log.as_deref_mut() {
                let every = self.config.log_every.max(1) as u64;
                if rec.step % every == 0 || self.step as usize == self.config.total_steps {
                    writeln!(w, "{}", rec.log_line())?;
                }
            }
            if let (Some(dir), Some(every)) = (out.checkpoint_dir, self.config.checkpoint_every) {
                if self.step % every as u64 == 0 {
                    let p = dir.join(format!("step-{:08}.ckpt", self.step));
                    self.checkpoint().save(&p, out.dtype)?;
                    last_checkpoint = Some(p);
                }
            }
        }
        Ok(())
    }
}

/// Build, run and return the final checkpoint.
pub fn train(model: Model, data: &[TrainItem], num_languages: usize, config: TrainConfig, out: RunOutput<'_>) -> Result<ModelCheckpoint> {
    let mut t = Trainer::new(model, config)?;
    t.run(data, num_languages, out)?;
    Ok(t.checkpoint())
}

/// Copy every tensor of `src` whose name and shape match a tensor in `dst`,
/// returning the copied names.
pub fn transfer_parameters(dst: &mut ParamStore, src: &ParamStore) -> Vec<String> {
    let mut copied = Vec::new();
    for (_, name, t) in src.iter() {
        if let Some(id) = dst.id(name) {
            if dst.get(id).shape() == t.shape() {
                *dst.get_mut(id) = t.clone();
                copied.push(name.to_string());
            }
        }
    }
    copied
}
