//! Desk-scale transformer models: a sequence classifier (the victim whose
//! gradients leak) and a causal language model (the reconstruction prior).
//!
//! Both share one encoder-stack implementation: token + position embeddings,
//! multi-head scaled dot-product attention with additive masking, GELU
//! feed-forward blocks, residual connections, and post-block layer norm with
//! learned gain/bias. The classifier prepends a sequence-start marker whose
//! final hidden state feeds a tanh pooler and a two-way linear head; the
//! language model applies a causal mask and projects every position onto the
//! vocabulary.
//!
//! Position handling: row 0 of the position table belongs to the
//! sequence-start marker; content slot i (1-based) uses row i. Token
//! embeddings and position vectors are summed *before* the encoder, so an
//! embedded sequence handed to the classifier directly (the attacker path)
//! stands for that sum, and embedding the true tokens reproduces the honest
//! forward pass exactly.

use crate::params::{LayoutError, ModelParams, TensorMap};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use crate::vocab::CLS_ID;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Additive attention-mask value for forbidden key positions. Large enough
/// that softmax assigns exactly zero probability in f64.
const MASK_OFF: f64 = -1e30;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("sequence length {len} exceeds capacity {cap} (one slot is reserved for the start marker)")]
    TooLong { len: usize, cap: usize },
    #[error("sequence must contain at least {need} tokens, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("label {0} out of range for binary classification")]
    BadLabel(u8),
    #[error("config invalid: {0}")]
    BadConfig(String),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters shared by both model kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    /// The default laboratory size: big enough to train on a toy corpus,
    /// small enough that thousands of reconstruction steps stay cheap.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig { vocab_size, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 64, max_positions: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_positions < 2 {
            return Err(ModelError::BadConfig("need at least two positions".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Longest content sequence both models accept (one position is
    /// reserved for the classifier's start marker).
    pub fn max_content_len(&self) -> usize {
        self.max_positions - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Classifier,
    CausalLm,
}

// ── parameter layout ─────────────────────────────────────────────────────

/// Canonical (name, shape) list for a model. Initialization, checkpoint
/// validation, and gradient bookkeeping all derive from this single table.
pub fn param_shapes(kind: ModelKind, cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("embed.word".to_string(), vec![cfg.vocab_size, d]),
        ("embed.pos".to_string(), vec![cfg.max_positions, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = format!("layer{l}");
        for m in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.attn.{m}"), vec![d, d]));
            out.push((format!("{p}.attn.{}", m.replace('w', "b")), vec![d]));
        }
        out.push((format!("{p}.attn_norm.gain"), vec![d]));
        out.push((format!("{p}.attn_norm.bias"), vec![d]));
        out.push((format!("{p}.ff.w1"), vec![d, cfg.d_ff]));
        out.push((format!("{p}.ff.b1"), vec![cfg.d_ff]));
        out.push((format!("{p}.ff.w2"), vec![cfg.d_ff, d]));
        out.push((format!("{p}.ff.b2"), vec![d]));
        out.push((format!("{p}.ff_norm.gain"), vec![d]));
        out.push((format!("{p}.ff_norm.bias"), vec![d]));
    }
    match kind {
        ModelKind::Classifier => {
            out.push(("pooler.weight".to_string(), vec![d, d]));
            out.push(("pooler.bias".to_string(), vec![d]));
            out.push(("classifier.weight".to_string(), vec![d, 2]));
            out.push(("classifier.bias".to_string(), vec![2]));
        }
        ModelKind::CausalLm => {
            out.push(("final_norm.gain".to_string(), vec![d]));
            out.push(("final_norm.bias".to_string(), vec![d]));
            out.push(("lm_head.weight".to_string(), vec![d, cfg.vocab_size]));
            out.push(("lm_head.bias".to_string(), vec![cfg.vocab_size]));
        }
    }
    out
}

/// Fresh parameters: word embeddings at scale 0.2, position rows at 0.02
/// (small relative to word rows, so vocabulary projection of an embedding
/// plus its position still lands on the right word), fan-in-scaled normal
/// weights, zero biases, identity layer norms.
pub fn init_params<R: Rng>(kind: ModelKind, cfg: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = TensorMap::new();
    for (name, shape) in param_shapes(kind, cfg) {
        let t = if name.ends_with(".gain") {
            Tensor::ones(shape)
        } else if name.ends_with("bias") || name.starts_with('b') && shape.len() == 1 {
            Tensor::zeros(shape)
        } else if name == "embed.word" {
            Tensor::randn(shape, 0.2, rng)
        } else if name == "embed.pos" {
            Tensor::randn(shape, 0.02, rng)
        } else if shape.len() == 2 {
            let std = 1.0 / (shape[0] as f64).sqrt();
            Tensor::randn(shape, std, rng)
        } else {
            // 1-d attention/ff biases.
            Tensor::zeros(shape)
        };
        params.push(name, t);
    }
    Ok(params)
}

/// Validates that `params` matches the canonical layout for `(kind, cfg)`.
pub fn check_params(kind: ModelKind, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut expected = TensorMap::new();
    for (name, shape) in param_shapes(kind, cfg) {
        expected.push(name, Tensor::zeros(shape));
    }
    expected.check_same_layout(params)?;
    Ok(())
}

// ── binding parameters onto a tape ───────────────────────────────────────

/// Model parameters as live tape nodes, in layout order.
pub struct Bound<'a> {
    pub names: Vec<&'a str>,
    pub vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn get(&self, name: &str) -> Var {
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.vars[i],
            None => panic!("model parameter {name:?} not bound"),
        }
    }
}

/// Records every parameter tensor on the tape. `trainable` decides whether
/// gradients can flow into them (training and gradient capture) or not
/// (pure inference).
pub fn bind<'a>(tape: &mut Tape, params: &'a ModelParams, trainable: bool) -> Result<Bound<'a>> {
    let mut names = Vec::with_capacity(params.len());
    let mut vars = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let v = if trainable { tape.leaf(t.clone())? } else { tape.constant(t.clone())? };
        names.push(name);
        vars.push(v);
    }
    Ok(Bound { names, vars })
}

// ── embedding ────────────────────────────────────────────────────────────

/// Token-embedding rows for content tokens: row i is `word[t_i]`. Position
/// vectors are added inside the forward pass, not here — so these rows are
/// exactly what the gradient-matching attacker's dummy variable stands for,
/// and reordering them reorders tokens without dragging positions along.
pub fn embed(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, ids: &[u32]) -> Result<Var> {
    if ids.is_empty() {
        return Err(ModelError::TooShort { need: 1, got: 0 });
    }
    if ids.len() > cfg.max_content_len() {
        return Err(ModelError::TooLong { len: ids.len(), cap: cfg.max_content_len() });
    }
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::BadToken { id, vocab: cfg.vocab_size });
        }
    }
    Ok(tape.lookup(bound.get("embed.word"), ids)?)
}

/// Adds position vectors to content rows: row i (1-based position, slot 0
/// is reserved for the start marker) gets `pos[i]`.
fn add_positions(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, rows: Var) -> Result<Var> {
    let n = tape.shape(rows)[0];
    let pos = tape.slice(bound.get("embed.pos"), 1, 1 + n, 0, cfg.d_model)?;
    Ok(tape.add(rows, pos)?)
}

/// The start-marker input row: `word[CLS] + pos[0]`.
fn cls_row(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig) -> Result<Var> {
    let w = tape.lookup(bound.get("embed.word"), &[CLS_ID])?;
    let p = tape.slice(bound.get("embed.pos"), 0, 1, 0, cfg.d_model)?;
    Ok(tape.add(w, p)?)
}

// ── encoder stack ────────────────────────────────────────────────────────

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let xw = tape.matmul(x, w)?;
    let bb = tape.broadcast_row(b, rows)?;
    Ok(tape.add(xw, bb)?)
}

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let normed = tape.layer_norm(x, LN_EPS)?;
    let g = tape.broadcast_row(gain, rows)?;
    let scaled = tape.mul(normed, g)?;
    let b = tape.broadcast_row(bias, rows)?;
    Ok(tape.add(scaled, b)?)
}

/// One residual attention + feed-forward block. `mask` is an additive
/// length-by-length matrix (0 allowed, -1e30 forbidden).
fn encoder_layer(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    mask: Var,
) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let dh = cfg.head_dim();
    let q = linear(tape, x, bound.get(&format!("{prefix}.attn.wq")), bound.get(&format!("{prefix}.attn.bq")))?;
    let k = linear(tape, x, bound.get(&format!("{prefix}.attn.wk")), bound.get(&format!("{prefix}.attn.bk")))?;
    let v = linear(tape, x, bound.get(&format!("{prefix}.attn.wv")), bound.get(&format!("{prefix}.attn.bv")))?;

    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, 0, rows, c0, c1)?;
        let kh = tape.slice(k, 0, rows, c0, c1)?;
        let vh = tape.slice(v, 0, rows, c0, c1)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let masked = tape.add(scaled, mask)?;
        let probs = tape.row_softmax(masked)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let proj = linear(tape, merged, bound.get(&format!("{prefix}.attn.wo")), bound.get(&format!("{prefix}.attn.bo")))?;
    let res1 = tape.add(x, proj)?;
    let x = affine_norm(
        tape,
        res1,
        bound.get(&format!("{prefix}.attn_norm.gain")),
        bound.get(&format!("{prefix}.attn_norm.bias")),
    )?;

    let h1 = linear(tape, x, bound.get(&format!("{prefix}.ff.w1")), bound.get(&format!("{prefix}.ff.b1")))?;
    let act = tape.gelu(h1)?;
    let h2 = linear(tape, act, bound.get(&format!("{prefix}.ff.w2")), bound.get(&format!("{prefix}.ff.b2")))?;
    let res2 = tape.add(x, h2)?;
    affine_norm(
        tape,
        res2,
        bound.get(&format!("{prefix}.ff_norm.gain")),
        bound.get(&format!("{prefix}.ff_norm.bias")),
    )
}

fn encoder_stack(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, x0: Var, mask: Var) -> Result<Var> {
    let mut x = x0;
    for l in 0..cfg.n_layers {
        x = encoder_layer(tape, bound, cfg, &format!("layer{l}"), x, mask)?;
    }
    Ok(x)
}

/// Additive mask where position j is attendable iff `key_ok[j]`.
fn padding_mask(tape: &mut Tape, key_ok: &[bool]) -> Result<Var> {
    let n = key_ok.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if !key_ok[j] {
                data[i * n + j] = MASK_OFF;
            }
        }
    }
    Ok(tape.constant(Tensor::new(vec![n, n], data))?)
}

/// Additive causal mask: queries may attend to themselves and the past.
fn causal_mask(tape: &mut Tape, n: usize) -> Result<Var> {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = MASK_OFF;
        }
    }
    Ok(tape.constant(Tensor::new(vec![n, n], data))?)
}

// ── classifier ───────────────────────────────────────────────────────────

/// Content rows for one classifier input: either token ids (embedded
/// honestly) or an already-embedded matrix, the attacker's optimization
/// variable.
pub enum SeqInput<'a> {
    Tokens(&'a [u32]),
    /// `[slots, d_model]` token-embedding rows (position vectors are added
    /// by the forward pass). `real_len` slots count as attendable; trailing
    /// padding slots are masked out of attention.
    Embedded { rows: Var, real_len: usize },
}

/// Two-way logits for one sequence. The start marker is prepended here, so
/// content inputs never include it.
pub fn classifier_logits(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    input: SeqInput,
) -> Result<Var> {
    let (rows, real_len) = match input {
        SeqInput::Tokens(ids) => (embed(tape, bound, cfg, ids)?, ids.len()),
        SeqInput::Embedded { rows, real_len } => {
            let shape = tape.shape(rows).to_vec();
            if shape.len() != 2 || shape[1] != cfg.d_model {
                return Err(ModelError::BadConfig(format!(
                    "embedded input must be [slots, {}], got {:?}",
                    cfg.d_model, shape
                )));
            }
            if shape[0] > cfg.max_content_len() {
                return Err(ModelError::TooLong { len: shape[0], cap: cfg.max_content_len() });
            }
            (rows, real_len.min(shape[0]))
        }
    };
    let slots = tape.shape(rows)[0];
    let content = add_positions(tape, bound, cfg, rows)?;
    let cls = cls_row(tape, bound, cfg)?;
    let x0 = tape.concat_rows(&[cls, content])?;

    let mut key_ok = vec![true; slots + 1];
    for j in (real_len + 1)..=slots {
        key_ok[j] = false;
    }
    let mask = padding_mask(tape, &key_ok)?;

    let h = encoder_stack(tape, bound, cfg, x0, mask)?;
    let first = tape.slice(h, 0, 1, 0, cfg.d_model)?;
    let pooled_pre = linear(tape, first, bound.get("pooler.weight"), bound.get("pooler.bias"))?;
    let pooled = tape.tanh(pooled_pre)?;
    linear(tape, pooled, bound.get("classifier.weight"), bound.get("classifier.bias"))
}

/// Cross-entropy of one sequence against its binary label.
pub fn classifier_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    input: SeqInput,
    label: u8,
) -> Result<Var> {
    if label > 1 {
        return Err(ModelError::BadLabel(label));
    }
    let logits = classifier_logits(tape, bound, cfg, input)?;
    Ok(tape.cross_entropy(logits, &[label as u32])?)
}

/// Mean per-sequence loss over a batch (ragged sequences welcome; each runs
/// its own forward pass).
pub fn classifier_batch_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    items: &mut dyn Iterator<Item = (SeqInput, u8)>,
) -> Result<Var> {
    let mut losses = Vec::new();
    for (input, label) in items {
        losses.push(classifier_loss(tape, bound, cfg, input, label)?);
    }
    if losses.is_empty() {
        return Err(ModelError::TooShort { need: 1, got: 0 });
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / losses.len() as f64)?)
}

/// Hard label prediction (0 or 1) for evaluation.
pub fn classifier_predict(params: &ModelParams, cfg: &ModelConfig, ids: &[u32]) -> Result<u8> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false)?;
    let logits = classifier_logits(&mut tape, &bound, cfg, SeqInput::Tokens(ids))?;
    let d = tape.data(logits);
    Ok(if d[1] > d[0] { 1 } else { 0 })
}

// ── causal language model ────────────────────────────────────────────────

/// Next-token logits: row l holds the distribution over token l+2 given
/// tokens 1..=l+1. Needs at least two tokens.
pub fn lm_logits(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, ids: &[u32]) -> Result<Var> {
    if ids.len() < 2 {
        return Err(ModelError::TooShort { need: 2, got: ids.len() });
    }
    let ctx = &ids[..ids.len() - 1];
    if ctx.len() > cfg.max_content_len() {
        return Err(ModelError::TooLong { len: ctx.len(), cap: cfg.max_content_len() });
    }
    let rows = embed(tape, bound, cfg, ctx)?;
    let ctx_rows = add_positions(tape, bound, cfg, rows)?;
    let mask = causal_mask(tape, ctx.len())?;
    let h = encoder_stack(tape, bound, cfg, ctx_rows, mask)?;
    let hn = affine_norm(tape, h, bound.get("final_norm.gain"), bound.get("final_norm.bias"))?;
    linear(tape, hn, bound.get("lm_head.weight"), bound.get("lm_head.bias"))
}

/// Mean next-token cross-entropy (the training objective).
pub fn lm_loss(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, ids: &[u32]) -> Result<Var> {
    let logits = lm_logits(tape, bound, cfg, ids)?;
    Ok(tape.cross_entropy(logits, &ids[1..])?)
}

// ── perplexity ───────────────────────────────────────────────────────────

/// Anything that scores token sequences by next-token log-likelihood.
pub trait NextTokenModel {
    /// `log p(t_{l+1} | t_1..t_l)` for l = 1..n-1. Errors if n < 2.
    fn next_token_log_probs(&self, ids: &[u32]) -> Result<Vec<f64>>;

    /// Length-normalized negative log-likelihood
    /// `-(1/n) * sum_{l=1}^{n-1} log p(t_{l+1} | t_1..t_l)`.
    ///
    /// Note the 1/n normalization over n-1 summands; the first token is
    /// never scored but still counts toward length.
    fn perplexity(&self, ids: &[u32]) -> Result<f64> {
        let lp = self.next_token_log_probs(ids)?;
        Ok(-lp.iter().sum::<f64>() / ids.len() as f64)
    }
}

/// Transformer language model bundled with its parameters.
pub struct TransformerLm {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl NextTokenModel for TransformerLm {
    fn next_token_log_probs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.params, false)?;
        let logits = lm_logits(&mut tape, &bound, &self.cfg, ids)?;
        let sm = tape.row_softmax(logits)?;
        let d = tape.data(sm);
        let v = self.cfg.vocab_size;
        Ok(ids[1..]
            .iter()
            .enumerate()
            .map(|(row, &t)| d[row * v + t as usize].max(f64::MIN_POSITIVE).ln())
            .collect())
    }
}

/// Table-driven bigram model: a cheap, exactly computable oracle for tests
/// and a stand-in prior where the transformer would be overkill.
pub struct BigramLm {
    /// Row t is the distribution of the next token after t.
    pub table: Tensor,
}

impl BigramLm {
    pub fn uniform(vocab: usize) -> Self {
        let p = 1.0 / vocab as f64;
        BigramLm { table: Tensor::new(vec![vocab, vocab], vec![p; vocab * vocab]) }
    }

    /// Add-one-smoothed bigram counts from a corpus.
    pub fn fit(vocab: usize, seqs: &[Vec<u32>]) -> Self {
        Self::fit_smoothed(vocab, seqs, 1.0)
    }

    /// Add-k-smoothed bigram counts. Smaller `smoothing` sharpens the prior
    /// toward transitions actually seen in the corpus; it must stay positive
    /// so unseen transitions keep finite log-probability.
    pub fn fit_smoothed(vocab: usize, seqs: &[Vec<u32>], smoothing: f64) -> Self {
        let mut counts = vec![smoothing.max(f64::MIN_POSITIVE); vocab * vocab];
        for seq in seqs {
            for w in seq.windows(2) {
                counts[w[0] as usize * vocab + w[1] as usize] += 1.0;
            }
        }
        for row in counts.chunks_mut(vocab) {
            let z: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        BigramLm { table: Tensor::new(vec![vocab, vocab], counts) }
    }
}

impl NextTokenModel for BigramLm {
    fn next_token_log_probs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if ids.len() < 2 {
            return Err(ModelError::TooShort { need: 2, got: ids.len() });
        }
        let v = self.table.shape[0];
        for &id in ids {
            if id as usize >= v {
                return Err(ModelError::BadToken { id, vocab: v });
            }
        }
        Ok(ids
            .windows(2)
            .map(|w| self.table.data[w[0] as usize * v + w[1] as usize].max(f64::MIN_POSITIVE).ln())
            .collect())
    }
}
