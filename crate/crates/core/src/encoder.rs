//! Bidirectional transformer over a joint sequence of word and entity tokens.
//!
//! Entity tokens carry no position of their own: each one is tied to the word
//! positions of its mention, and the position embeddings of those words are
//! pooled (summed by default) into the entity's input embedding. After the
//! embedding layers both kinds of token go through plain self-attention.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

/// Type id given to word tokens.
pub const WORD_TYPE: usize = 0;
/// Type id given to entity tokens.
pub const ENTITY_TYPE: usize = 1;

const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("{kind} id {id} out of range for vocabulary of size {size}")]
    Vocabulary {
        kind: &'static str,
        id: usize,
        size: usize,
    },
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid input: {0}")]
    Contract(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// How the position embeddings of a multi-word mention are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionPooling {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub word_vocab_size: usize,
    pub entity_vocab_size: usize,
    pub hidden_size: usize,
    pub entity_emb_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub type_count: usize,
    pub dropout: f64,
    #[serde(default)]
    pub position_pooling: PositionPooling,
    /// Upper bound on entity tokens in one pass.
    #[serde(default = "default_max_entities")]
    pub max_entities: usize,
}

fn default_max_entities() -> usize {
    256
}

impl EncoderConfig {
    /// XLM-R-base sized configuration with 256-d entity embeddings.
    pub fn base(word_vocab_size: usize, entity_vocab_size: usize) -> Self {
        EncoderConfig {
            word_vocab_size,
            entity_vocab_size,
            hidden_size: 768,
            entity_emb_size: 256,
            layers: 12,
            heads: 12,
            ffn_size: 3072,
            max_positions: 512,
            type_count: 2,
            dropout: 0.1,
            position_pooling: PositionPooling::Sum,
            max_entities: default_max_entities(),
        }
    }

    pub fn tiny(word_vocab_size: usize, entity_vocab_size: usize) -> Self {
        EncoderConfig {
            word_vocab_size,
            entity_vocab_size,
            hidden_size: 32,
            entity_emb_size: 16,
            layers: 2,
            heads: 2,
            ffn_size: 64,
            max_positions: 64,
            type_count: 2,
            dropout: 0.0,
            position_pooling: PositionPooling::Sum,
            max_entities: default_max_entities(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.heads == 0 || self.hidden_size % self.heads != 0 {
            return fail(format!(
                "hidden_size {} not divisible by heads {}",
                self.hidden_size, self.heads
            ));
        }
        if self.entity_emb_size == 0 || self.entity_emb_size > self.hidden_size {
            return fail(format!(
                "entity_emb_size {} must be in 1..={}",
                self.entity_emb_size, self.hidden_size
            ));
        }
        if self.max_positions == 0 {
            return fail("max_positions must be >= 1".into());
        }
        if self.type_count < 2 {
            return fail("type_count must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.word_vocab_size == 0 || self.entity_vocab_size == 0 {
            return fail("vocabularies must be non-empty".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.heads
    }
}

/// Encoder input: words, entities and the mention positions tying them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EncodedSequence {
    pub word_ids: Vec<usize>,
    pub word_type_ids: Vec<usize>,
    pub entity_ids: Vec<usize>,
    pub entity_positions: Vec<Vec<usize>>,
    pub entity_type_ids: Vec<usize>,
    /// `false` marks padding; padded tokens are never attended to.
    pub word_attention: Vec<bool>,
    pub entity_attention: Vec<bool>,
}

impl EncodedSequence {
    pub fn words(word_ids: Vec<usize>) -> Self {
        let m = word_ids.len();
        EncodedSequence {
            word_ids,
            word_type_ids: vec![WORD_TYPE; m],
            word_attention: vec![true; m],
            ..Default::default()
        }
    }

    pub fn push_entity(&mut self, id: usize, positions: Vec<usize>) {
        self.entity_ids.push(id);
        self.entity_positions.push(positions);
        self.entity_type_ids.push(ENTITY_TYPE);
        self.entity_attention.push(true);
    }

    pub fn with_entity(mut self, id: usize, positions: Vec<usize>) -> Self {
        self.push_entity(id, positions);
        self
    }

    /// Surround the words with `first` and `last` (e.g. `[CLS]` and `[SEP]`),
    /// shifting mention positions accordingly.
    pub fn with_boundaries(&self, first: usize, last: usize) -> Self {
        let mut out = self.clone();
        out.word_ids.insert(0, first);
        out.word_ids.push(last);
        out.word_type_ids.insert(0, WORD_TYPE);
        out.word_type_ids.push(WORD_TYPE);
        out.word_attention.insert(0, true);
        out.word_attention.push(true);
        for set in &mut out.entity_positions {
            for p in set.iter_mut() {
                *p += 1;
            }
        }
        out
    }

    pub fn num_words(&self) -> usize {
        self.word_ids.len()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        let m = self.word_ids.len();
        let n = self.entity_ids.len();
        if m == 0 {
            return Err(EncoderError::Contract("sequence has no word tokens".into()));
        }
        if m > config.max_positions {
            return Err(EncoderError::Capacity(format!(
                "{m} words exceed max_positions {}",
                config.max_positions
            )));
        }
        if n > config.max_entities {
            return Err(EncoderError::Capacity(format!(
                "{n} entities exceed max_entities {}",
                config.max_entities
            )));
        }
        if self.word_type_ids.len() != m || self.word_attention.len() != m {
            return Err(EncoderError::Contract("word side lengths disagree".into()));
        }
        if self.entity_positions.len() != n
            || self.entity_type_ids.len() != n
            || self.entity_attention.len() != n
        {
            return Err(EncoderError::Contract("entity side lengths disagree".into()));
        }
        for (k, set) in self.entity_positions.iter().enumerate() {
            if set.is_empty() {
                return Err(EncoderError::Contract(format!(
                    "entity {k} has an empty position set"
                )));
            }
            if let Some(&p) = set.iter().find(|&&p| p >= m) {
                return Err(EncoderError::Contract(format!(
                    "entity {k} position {p} outside the {m} word tokens"
                )));
            }
        }
        check_ids("word", &self.word_ids, config.word_vocab_size)?;
        check_ids("entity", &self.entity_ids, config.entity_vocab_size)?;
        check_ids("type", &self.word_type_ids, config.type_count)?;
        check_ids("type", &self.entity_type_ids, config.type_count)?;
        Ok(())
    }
}

fn check_ids(kind: &'static str, ids: &[usize], size: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= size) {
        Some(&id) => Err(EncoderError::Vocabulary { kind, id, size }),
        None => Ok(()),
    }
}

/// Contextual vectors split back into the word and entity parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualOutput {
    pub word_vectors: Tensor,
    pub entity_vectors: Tensor,
}

/// Parameter names used by the encoder and the pretraining heads.
pub mod names {
    pub const WORD_EMB: &str = "embeddings.word";
    pub const POSITION_EMB: &str = "embeddings.position";
    pub const WORD_TYPE_EMB: &str = "embeddings.token_type";
    pub const WORD_LN_GAIN: &str = "embeddings.ln.gain";
    pub const WORD_LN_BIAS: &str = "embeddings.ln.bias";
    pub const ENTITY_EMB: &str = "entity_embeddings.entity";
    pub const ENTITY_PROJ: &str = "entity_embeddings.projection";
    pub const ENTITY_TYPE_EMB: &str = "entity_embeddings.token_type";
    pub const ENTITY_LN_GAIN: &str = "entity_embeddings.ln.gain";
    pub const ENTITY_LN_BIAS: &str = "entity_embeddings.ln.bias";

    pub fn layer(i: usize, rest: &str) -> String {
        format!("layer.{i}.{rest}")
    }
}

fn ln_params(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[1, dim], 1.0));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, dim]));
}

fn linear_params<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    output: usize,
    bias: bool,
    std: f64,
    rng: &mut R,
) {
    store.insert(
        format!("{prefix}.weight"),
        Tensor::randn(&[input, output], std, rng),
    );
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, output]));
    }
}

/// Encoder parameters plus the MLM and MEP classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl Model {
    /// Gaussian initialisation (`std`) of all weights, zero biases, unit gains.
    pub fn init<R: Rng>(config: EncoderConfig, std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let mut p = ParamStore::new();
        p.insert(names::WORD_EMB, Tensor::randn(&[config.word_vocab_size, h], std, rng));
        p.insert(names::POSITION_EMB, Tensor::randn(&[config.max_positions, h], std, rng));
        p.insert(names::WORD_TYPE_EMB, Tensor::randn(&[config.type_count, h], std, rng));
        ln_params(&mut p, "embeddings.ln", h);
        p.insert(
            names::ENTITY_EMB,
            Tensor::randn(&[config.entity_vocab_size, config.entity_emb_size], std, rng),
        );
        p.insert(
            names::ENTITY_PROJ,
            Tensor::randn(&[config.entity_emb_size, h], std, rng),
        );
        p.insert(names::ENTITY_TYPE_EMB, Tensor::randn(&[config.type_count, h], std, rng));
        ln_params(&mut p, "entity_embeddings.ln", h);
        for i in 0..config.layers {
            let l = |s: &str| names::layer(i, s);
            linear_params(&mut p, &l("attention.query"), h, h, true, std, rng);
            // A key bias only shifts every score of a query row by the same
            // amount, which softmax cancels.
            linear_params(&mut p, &l("attention.key"), h, h, false, std, rng);
            linear_params(&mut p, &l("attention.value"), h, h, true, std, rng);
            linear_params(&mut p, &l("attention.output"), h, h, true, std, rng);
            ln_params(&mut p, &l("attention.ln"), h);
            linear_params(&mut p, &l("ffn.intermediate"), h, config.ffn_size, true, std, rng);
            linear_params(&mut p, &l("ffn.output"), config.ffn_size, h, true, std, rng);
            ln_params(&mut p, &l("ffn.ln"), h);
        }
        linear_params(&mut p, "mlm.transform", h, h, true, std, rng);
        ln_params(&mut p, "mlm.ln", h);
        linear_params(&mut p, "mlm.decoder", h, config.word_vocab_size, true, std, rng);
        linear_params(&mut p, "mep.transform", h, h, true, std, rng);
        ln_params(&mut p, "mep.ln", h);
        linear_params(&mut p, "mep.decoder", h, config.entity_vocab_size, true, std, rng);
        Ok(Model { config, params: p })
    }

    /// Forward pass without dropout, returning plain tensors.
    pub fn encode(&self, seq: &EncodedSequence) -> Result<ContextualOutput> {
        let mut g = Graph::new(&self.params);
        let out = encode(&mut g, &self.config, seq)?;
        let word_vectors = g.value(out.words).clone();
        let entity_vectors = match out.entities {
            Some(e) => g.value(e).clone(),
            None => Tensor::zeros(&[0, self.config.hidden_size]),
        };
        Ok(ContextualOutput {
            word_vectors,
            entity_vectors,
        })
    }

    /// Grow the word embedding table and MLM decoder by `count` rows,
    /// returning the first new id.
    pub fn add_word_tokens<R: Rng>(&mut self, count: usize, std: f64, rng: &mut R) -> Result<usize> {
        let first = self.config.word_vocab_size;
        let h = self.config.hidden_size;
        let emb = self.params.expect_id(names::WORD_EMB)?;
        self.params
            .get_mut(emb)
            .append_rows(&Tensor::randn(&[count, h], std, rng))?;
        if let Some(dec) = self.params.id("mlm.decoder.weight") {
            // decoder is h x V: widen by appending columns
            let old = self.params.get(dec).clone();
            let v = old.cols();
            let extra = Tensor::randn(&[h, count], std, rng);
            let mut data = Vec::with_capacity(h * (v + count));
            for r in 0..h {
                data.extend_from_slice(old.row(r));
                data.extend_from_slice(extra.row(r));
            }
            *self.params.get_mut(dec) = Tensor::new(vec![h, v + count], data)?;
        }
        if let Some(b) = self.params.id("mlm.decoder.bias") {
            let mut data = self.params.get(b).data().to_vec();
            data.extend(std::iter::repeat_n(0.0, count));
            *self.params.get_mut(b) = Tensor::new(vec![1, data.len()], data)?;
        }
        self.config.word_vocab_size += count;
        Ok(first)
    }
}

/// Vars returned by [`encode`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub words: Var,
    pub entities: Option<Var>,
}

fn linear(g: &mut Graph<'_>, x: Var, prefix: &str, bias: bool) -> Result<Var> {
    let w = g.param_by_name(&format!("{prefix}.weight"))?;
    let y = g.matmul(x, w)?;
    if bias {
        let b = g.param_by_name(&format!("{prefix}.bias"))?;
        Ok(g.add_row(y, b)?)
    } else {
        Ok(y)
    }
}

fn layer_norm(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param_by_name(&format!("{prefix}.gain"))?;
    let bias = g.param_by_name(&format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

/// Sum of word, position and type embeddings (before layer norm).
pub fn embed_words(
    g: &mut Graph<'_>,
    config: &EncoderConfig,
    word_ids: &[usize],
    positions: &[usize],
    type_ids: &[usize],
) -> Result<Var> {
    check_ids("word", word_ids, config.word_vocab_size)?;
    check_ids("position", positions, config.max_positions)?;
    check_ids("type", type_ids, config.type_count)?;
    let table = g.param_by_name(names::WORD_EMB)?;
    let tok = g.gather_rows(table, word_ids)?;
    let ptab = g.param_by_name(names::POSITION_EMB)?;
    let pos = g.gather_rows(ptab, positions)?;
    let ttab = g.param_by_name(names::WORD_TYPE_EMB)?;
    let typ = g.gather_rows(ttab, type_ids)?;
    let s = g.add(tok, pos)?;
    Ok(g.add(s, typ)?)
}

/// Projected entity embedding plus entity type embedding plus the pooled
/// position embeddings of the mention's word positions (before layer norm).
pub fn embed_entities(
    g: &mut Graph<'_>,
    config: &EncoderConfig,
    entity_ids: &[usize],
    entity_positions: &[Vec<usize>],
    type_ids: &[usize],
) -> Result<Var> {
    check_ids("entity", entity_ids, config.entity_vocab_size)?;
    check_ids("type", type_ids, config.type_count)?;
    for (k, set) in entity_positions.iter().enumerate() {
        if set.is_empty() {
            return Err(EncoderError::Contract(format!(
                "entity {k} has an empty position set"
            )));
        }
        check_ids("position", set, config.max_positions)?;
    }
    let table = g.param_by_name(names::ENTITY_EMB)?;
    let tok = g.gather_rows(table, entity_ids)?;
    let proj = g.param_by_name(names::ENTITY_PROJ)?;
    let tok = g.matmul(tok, proj)?;
    let ttab = g.param_by_name(names::ENTITY_TYPE_EMB)?;
    let typ = g.gather_rows(ttab, type_ids)?;
    let ptab = g.param_by_name(names::POSITION_EMB)?;
    let pos = g.bag_rows(
        ptab,
        entity_positions,
        config.position_pooling == PositionPooling::Mean,
    )?;
    let s = g.add(tok, typ)?;
    Ok(g.add(s, pos)?)
}

/// Run the full encoder, recording into `g`.
pub fn encode(g: &mut Graph<'_>, config: &EncoderConfig, seq: &EncodedSequence) -> Result<EncoderVars> {
    seq.validate(config)?;
    let m = seq.num_words();
    let n = seq.num_entities();
    let positions: Vec<usize> = (0..m).collect();
    let w = embed_words(g, config, &seq.word_ids, &positions, &seq.word_type_ids)?;
    let w = layer_norm(g, w, "embeddings.ln")?;
    let w = g.dropout(w);
    let mut x = w;
    if n > 0 {
        let e = embed_entities(
            g,
            config,
            &seq.entity_ids,
            &seq.entity_positions,
            &seq.entity_type_ids,
        )?;
        let e = layer_norm(g, e, "entity_embeddings.ln")?;
        let e = g.dropout(e);
        x = g.concat_rows(&[w, e])?;
    }

    let total = m + n;
    let mask = if seq.word_attention.iter().chain(&seq.entity_attention).all(|&a| a) {
        None
    } else {
        let keys: Vec<bool> = seq
            .word_attention
            .iter()
            .chain(&seq.entity_attention)
            .copied()
            .collect();
        let mut t = Tensor::zeros(&[total, total]);
        for i in 0..total {
            for (j, &keep) in keys.iter().enumerate() {
                if !keep {
                    t.row_mut(i)[j] = MASKED_SCORE;
                }
            }
        }
        Some(t)
    };

    for layer in 0..config.layers {
        x = transformer_layer(g, config, x, layer, mask.as_ref())?;
    }

    if n == 0 {
        return Ok(EncoderVars {
            words: x,
            entities: None,
        });
    }
    let words = g.slice_rows(x, 0, m)?;
    let entities = g.slice_rows(x, m, n)?;
    Ok(EncoderVars {
        words,
        entities: Some(entities),
    })
}

fn transformer_layer(
    g: &mut Graph<'_>,
    config: &EncoderConfig,
    x: Var,
    layer: usize,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let l = |s: &str| names::layer(layer, s);
    let q = linear(g, x, &l("attention.query"), true)?;
    let k = linear(g, x, &l("attention.key"), false)?;
    let v = linear(g, x, &l("attention.value"), true)?;
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let scores = g.matmul_bt(qh, kh)?;
        let mut scores = g.scale(scores, scale);
        if let Some(m) = mask {
            scores = g.add_const(scores, m)?;
        }
        let attn = g.softmax(scores);
        let attn = g.dropout(attn);
        heads.push(g.matmul(attn, vh)?);
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = linear(g, ctx, &l("attention.output"), true)?;
    let out = g.dropout(out);
    let res = g.add(x, out)?;
    let x1 = layer_norm(g, res, &l("attention.ln"))?;

    let hdn = linear(g, x1, &l("ffn.intermediate"), true)?;
    let hdn = g.gelu(hdn);
    let out = linear(g, hdn, &l("ffn.output"), true)?;
    let out = g.dropout(out);
    let res = g.add(x1, out)?;
    layer_norm(g, res, &l("ffn.ln"))
}

/// MLM classifier: dense + gelu + layer norm, then a projection onto the word vocabulary.
pub fn mlm_logits(g: &mut Graph<'_>, word_vectors: Var) -> Result<Var> {
    classifier_head(g, word_vectors, "mlm")
}

/// MEP classifier over the entity vocabulary.
pub fn mep_logits(g: &mut Graph<'_>, entity_vectors: Var) -> Result<Var> {
    classifier_head(g, entity_vectors, "mep")
}

fn classifier_head(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.transform"), true)?;
    let h = g.gelu(h);
    let h = layer_norm(g, h, &format!("{prefix}.ln"))?;
    linear(g, h, &format!("{prefix}.decoder"), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Model::init(EncoderConfig::tiny(20, 8), 0.1, &mut rng).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::tiny(10, 10);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::tiny(10, 10);
        c.entity_emb_size = 64;
        assert!(c.validate().is_err());
        let b = EncoderConfig::base(250_000, 1_200_000);
        assert_eq!((b.hidden_size, b.entity_emb_size, b.max_positions), (768, 256, 512));
        b.validate().unwrap();
    }

    #[test]
    fn zero_tables_give_zero_word_embeddings() {
        let mut m = tiny();
        for name in [names::WORD_EMB, names::POSITION_EMB, names::WORD_TYPE_EMB] {
            let id = m.params.id(name).unwrap();
            let shape = m.params.get(id).shape().to_vec();
            *m.params.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new(&m.params);
        let e = embed_words(&mut g, &m.config, &[1, 2, 3], &[0, 1, 2], &[0, 0, 0]).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(e).dims2(), (3, 32));
    }

    #[test]
    fn same_word_at_two_positions_differs_by_position_term() {
        let m = tiny();
        let mut g = Graph::new(&m.params);
        let e = embed_words(&mut g, &m.config, &[5, 5], &[2, 7], &[0, 0]).unwrap();
        let v = g.value(e);
        let p = m.params.by_name(names::POSITION_EMB).unwrap();
        for j in 0..32 {
            let diff = v.row(0)[j] - v.row(1)[j];
            let pdiff = p.row(2)[j] - p.row(7)[j];
            assert!((diff - pdiff).abs() < 1e-12);
        }
    }

    #[test]
    fn word_id_out_of_range() {
        let m = tiny();
        let mut g = Graph::new(&m.params);
        let err = embed_words(&mut g, &m.config, &[25], &[0], &[0]).unwrap_err();
        assert!(matches!(err, EncoderError::Vocabulary { kind: "word", id: 25, .. }));
    }

    #[test]
    fn entity_position_term_is_sum_over_mention() {
        let mut m = tiny();
        let proj = m.params.id(names::ENTITY_PROJ).unwrap();
        *m.params.get_mut(proj) = Tensor::zeros(&[16, 32]);
        let mut g = Graph::new(&m.params);
        let e = embed_entities(&mut g, &m.config, &[4], &[vec![3, 4, 5]], &[ENTITY_TYPE]).unwrap();
        let p = m.params.by_name(names::POSITION_EMB).unwrap();
        let t = m.params.by_name(names::ENTITY_TYPE_EMB).unwrap();
        for j in 0..32 {
            let expect = t.row(1)[j] + p.row(3)[j] + p.row(4)[j] + p.row(5)[j];
            assert!((g.value(e).row(0)[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_mention_and_mean_pooling() {
        let mut m = tiny();
        let proj = m.params.id(names::ENTITY_PROJ).unwrap();
        *m.params.get_mut(proj) = Tensor::zeros(&[16, 32]);
        let p = m.params.by_name(names::POSITION_EMB).unwrap().clone();
        let t = m.params.by_name(names::ENTITY_TYPE_EMB).unwrap().clone();
        let mut g = Graph::new(&m.params);
        let e = embed_entities(&mut g, &m.config, &[4], &[vec![6]], &[ENTITY_TYPE]).unwrap();
        for j in 0..32 {
            assert!((g.value(e).row(0)[j] - (t.row(1)[j] + p.row(6)[j])).abs() < 1e-12);
        }
        m.config.position_pooling = PositionPooling::Mean;
        let mut g = Graph::new(&m.params);
        let e = embed_entities(&mut g, &m.config, &[4], &[vec![1, 2]], &[ENTITY_TYPE]).unwrap();
        for j in 0..32 {
            let expect = t.row(1)[j] + 0.5 * (p.row(1)[j] + p.row(2)[j]);
            assert!((g.value(e).row(0)[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_position_set_is_rejected() {
        let m = tiny();
        let mut g = Graph::new(&m.params);
        let err = embed_entities(&mut g, &m.config, &[4], &[vec![]], &[ENTITY_TYPE]).unwrap_err();
        assert!(matches!(err, EncoderError::Contract(_)));
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = tiny();
        let seq = EncodedSequence::words(vec![1, 2, 3, 4, 5])
            .with_entity(3, vec![1, 2])
            .with_entity(5, vec![4]);
        let a = m.encode(&seq).unwrap();
        let b = m.encode(&seq).unwrap();
        assert_eq!(a.word_vectors.dims2(), (5, 32));
        assert_eq!(a.entity_vectors.dims2(), (2, 32));
        assert_eq!(a, b);
    }

    #[test]
    fn over_long_sequence_is_a_capacity_error() {
        let m = tiny();
        let seq = EncodedSequence::words(vec![1; 65]);
        assert!(matches!(m.encode(&seq), Err(EncoderError::Capacity(_))));
    }

    #[test]
    fn padding_is_excluded_from_attention() {
        let m = tiny();
        let base = EncodedSequence::words(vec![1, 2, 3]).with_entity(4, vec![0]);
        let mut padded = EncodedSequence::words(vec![1, 2, 3, 0]).with_entity(4, vec![0]);
        padded.word_attention[3] = false;
        padded.push_entity(0, vec![0]);
        padded.entity_attention[1] = false;
        let a = m.encode(&base).unwrap();
        let b = m.encode(&padded).unwrap();
        for i in 0..3 {
            for j in 0..32 {
                assert!((a.word_vectors.row(i)[j] - b.word_vectors.row(i)[j]).abs() < 1e-9);
            }
        }
        for j in 0..32 {
            assert!((a.entity_vectors.row(0)[j] - b.entity_vectors.row(0)[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn added_word_tokens_extend_tables() {
        let mut m = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = m.add_word_tokens(2, 0.02, &mut rng).unwrap();
        assert_eq!(first, 20);
        assert_eq!(m.config.word_vocab_size, 22);
        assert_eq!(m.params.by_name(names::WORD_EMB).unwrap().dims2(), (22, 32));
        assert_eq!(m.params.by_name("mlm.decoder.weight").unwrap().dims2(), (32, 22));
        let seq = EncodedSequence::words(vec![21, 20]);
        let mut g = Graph::new(&m.params);
        let out = encode(&mut g, &m.config, &seq).unwrap();
        let logits = mlm_logits(&mut g, out.words).unwrap();
        assert_eq!(g.value(logits).dims2(), (2, 22));
    }
}
