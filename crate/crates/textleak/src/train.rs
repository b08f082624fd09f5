//! Adam training loops for the victim classifier and the auxiliary language
//! model. Deterministic end to end: minibatch order, initialization, and any
//! fine-tuning noise all come from one seeded generator.

use crate::adam::{AdamConfig, AdamError, AdamState};
use crate::model::{
    bind, classifier_batch_loss, classifier_predict, lm_loss, ModelConfig, ModelError, SeqInput,
};
use crate::params::ModelParams;
use crate::tape::{Tape, TapeError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus is empty (or has no usable sequences)")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Adam(#[from] AdamError),
}

/// One labeled training sequence (token ids, binary label).
pub type LabeledSeq = (Vec<u32>, u8);

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to every minibatch
    /// gradient during fine-tuning (the noise-defended training regime);
    /// 0 trains honestly.
    pub noise_sigma: f64,
    /// Keep the embedding tables at their initialization and train only the
    /// encoder and head (a common small-corpus fine-tuning regime; it also
    /// preserves the isotropic vocabulary geometry).
    #[serde(default)]
    pub freeze_embeddings: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr: 5e-3,
            seed,
            noise_sigma: 0.0,
            freeze_embeddings: false,
        }
    }

    pub fn frozen_embeddings(mut self) -> Self {
        self.freeze_embeddings = true;
        self
    }
}

/// Mean minibatch loss per epoch, in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains the binary classifier. Returns the per-epoch mean minibatch loss;
/// `epochs = 0` leaves parameters untouched.
pub fn train_classifier(
    cfg: &ModelConfig,
    params: &mut ModelParams,
    corpus: &[LabeledSeq],
    tc: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    train_loop(cfg, params, tc, corpus.len(), |tape, bound_params, chunk| {
        let bound = bind(tape, bound_params, true)?;
        let mut items = chunk.iter().map(|&i| (SeqInput::Tokens(&corpus[i].0), corpus[i].1));
        let loss = classifier_batch_loss(tape, &bound, cfg, &mut items)?;
        Ok((loss, bound.vars))
    })
}

/// Trains the causal language model on the same corpus (labels ignored).
/// Sequences shorter than two tokens carry no next-token signal and are
/// skipped; an all-short corpus is rejected.
pub fn train_lm(
    cfg: &ModelConfig,
    params: &mut ModelParams,
    corpus: &[Vec<u32>],
    tc: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let usable: Vec<&Vec<u32>> = corpus.iter().filter(|ids| ids.len() >= 2).collect();
    if usable.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    train_loop(cfg, params, tc, usable.len(), |tape, bound_params, chunk| {
        let bound = bind(tape, bound_params, true)?;
        let mut total: Option<crate::tape::Var> = None;
        for &i in chunk {
            let l = lm_loss(tape, &bound, cfg, usable[i])?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let sum = total.expect("non-empty chunk");
        let mean = tape.scale(sum, 1.0 / chunk.len() as f64)?;
        Ok((mean, bound.vars))
    })
}

/// The actual minibatch-Adam loop shared by both trainers.
fn train_loop(
    _cfg: &ModelConfig,
    params: &mut ModelParams,
    tc: &TrainConfig,
    n_examples: usize,
    mut batch_objective: impl FnMut(
        &mut Tape,
        &ModelParams,
        &[usize],
    ) -> Result<(crate::tape::Var, Vec<crate::tape::Var>), TrainError>,
) -> Result<TrainReport, TrainError> {
    let mut states: Vec<AdamState> = params
        .iter()
        .map(|(_, t)| AdamState::new(t.numel(), AdamConfig::new(tc.lr, 1.0)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);

    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    for _ in 0..tc.epochs {
        let mut order: Vec<usize> = (0..n_examples).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size.max(1)) {
            let mut tape = Tape::new();
            let (loss, param_vars) = batch_objective(&mut tape, params, chunk)?;
            let grads = tape.backward(loss, &param_vars, false)?;
            total += tape.item(loss);
            batches += 1;

            let mut grad_data: Vec<Vec<f64>> =
                grads.iter().map(|&g| tape.data(g).to_vec()).collect();
            if tc.noise_sigma > 0.0 {
                let noise = Normal::new(0.0, tc.noise_sigma).expect("positive sigma");
                for g in &mut grad_data {
                    for v in g.iter_mut() {
                        *v += noise.sample(&mut rng);
                    }
                }
            }
            for (((name, t), g), st) in params.iter_mut().zip(&grad_data).zip(&mut states) {
                if tc.freeze_embeddings && name.starts_with("embed.") {
                    continue;
                }
                st.step(&mut t.data, g)?;
            }
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainReport { epoch_losses })
}

/// Fraction of sequences whose predicted label matches.
pub fn accuracy(cfg: &ModelConfig, params: &ModelParams, corpus: &[LabeledSeq]) -> Result<f64, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut hits = 0usize;
    for (ids, label) in corpus {
        if classifier_predict(params, cfg, ids)? == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.len() as f64)
}

/// Predicted labels, in corpus order.
pub fn predictions(
    cfg: &ModelConfig,
    params: &ModelParams,
    corpus: &[LabeledSeq],
) -> Result<Vec<u8>, TrainError> {
    corpus
        .iter()
        .map(|(ids, _)| classifier_predict(params, cfg, ids).map_err(TrainError::from))
        .collect()
}
