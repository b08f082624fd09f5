//! The honest-but-curious federated exchange: clients compute one gradient
//! on their private batch, the server aggregates with FedSGD, and an
//! optional Gaussian-noise defense perturbs what leaves the client.

use crate::model::{
    bind, classifier_batch_loss, ModelConfig, ModelError, SeqInput,
};
use crate::params::{GradientSet, LayoutError, ModelParams};
use crate::tape::{Tape, TapeError};
use crate::vocab::PAD_ID;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FederatedError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("no client gradients to aggregate")]
    NoClients,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

/// A client's private batch: raw sequences plus the padded view the models
/// consume. Padding slots are masked out of attention and never scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Batch {
    /// Unpadded token sequences.
    pub sequences: Vec<Vec<u32>>,
    pub labels: Vec<u8>,
    /// Common padded length (max unpadded length).
    pub padded_len: usize,
}

impl Batch {
    pub fn new(sequences: Vec<Vec<u32>>, labels: Vec<u8>) -> Result<Self, FederatedError> {
        if sequences.is_empty() || sequences.len() != labels.len() {
            return Err(FederatedError::EmptyBatch);
        }
        if sequences.iter().any(|s| s.is_empty()) {
            return Err(FederatedError::EmptyBatch);
        }
        let padded_len = sequences.iter().map(|s| s.len()).max().unwrap();
        Ok(Batch { sequences, labels, padded_len })
    }

    pub fn size(&self) -> usize {
        self.sequences.len()
    }

    /// Sequence i padded with PAD up to the common length.
    pub fn padded(&self, i: usize) -> Vec<u32> {
        let mut ids = self.sequences[i].clone();
        ids.resize(self.padded_len, PAD_ID);
        ids
    }

    /// True for real-token slots, false for padding, per sequence.
    pub fn mask(&self, i: usize) -> Vec<bool> {
        (0..self.padded_len).map(|j| j < self.sequences[i].len()).collect()
    }
}

/// The exact gradient of the mean per-sequence classifier loss over the
/// batch, with respect to every parameter tensor.
pub fn client_gradient(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &Batch,
) -> Result<GradientSet, FederatedError> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, true)?;
    // Padded slots are embedded (they occupy reconstruction positions for
    // the attacker) but masked out of attention, so they cannot influence
    // the loss.
    let padded: Vec<(Vec<u32>, usize)> =
        (0..batch.size()).map(|i| (batch.padded(i), batch.sequences[i].len())).collect();
    let mut rows = Vec::with_capacity(batch.size());
    for (ids, real_len) in &padded {
        let r = crate::model::embed(&mut tape, &bound, cfg, ids)?;
        rows.push((r, *real_len));
    }
    let mut items = rows
        .iter()
        .zip(&batch.labels)
        .map(|(&(r, real_len), &y)| (SeqInput::Embedded { rows: r, real_len }, y));
    let loss = classifier_batch_loss(&mut tape, &bound, cfg, &mut items)?;
    let grads = tape.backward(loss, &bound.vars, false)?;

    let mut out = GradientSet::new();
    for (name, &g) in bound.names.iter().zip(&grads) {
        out.push(name.to_string(), tape.to_tensor(g));
    }
    Ok(out)
}

/// Mean batch loss value (for monitoring and tests).
pub fn batch_loss_value(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &Batch,
) -> Result<f64, FederatedError> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false)?;
    let mut items = batch
        .sequences
        .iter()
        .zip(&batch.labels)
        .map(|(ids, &y)| (SeqInput::Tokens(ids), y));
    let loss = classifier_batch_loss(&mut tape, &bound, cfg, &mut items)?;
    Ok(tape.item(loss))
}

/// FedSGD server step: θ' = θ − (rate / C) Σ_c g_c.
pub fn fedsgd_aggregate(
    params: &ModelParams,
    client_grads: &[GradientSet],
    server_rate: f64,
) -> Result<ModelParams, FederatedError> {
    if client_grads.is_empty() {
        return Err(FederatedError::NoClients);
    }
    let mut mean = client_grads[0].clone();
    for g in &client_grads[1..] {
        mean = mean.zip_map(g, |a, b| a + b)?;
    }
    let c = client_grads.len() as f64;
    let mean = mean.map_values(|v| v / c);
    Ok(params.zip_map(&mean, |p, g| p - server_rate * g)?)
}

/// Gaussian-noise defense on a shared gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub sigma: f64,
    pub seed: u64,
}

impl DefenseConfig {
    pub fn off() -> Self {
        DefenseConfig { sigma: 0.0, seed: 0 }
    }
}

/// Adds i.i.d. N(0, σ²) to every gradient entry. σ = 0 returns the input
/// unchanged (exactly — no degenerate sampling).
pub fn apply_defense(grads: &GradientSet, cfg: &DefenseConfig) -> GradientSet {
    if cfg.sigma == 0.0 {
        return grads.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.sigma).expect("positive sigma");
    grads.map_values(|v| v + noise.sample(&mut rng))
}

/// Everything the attacker observes from one exchange, replayable from disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientCapture {
    pub version: u32,
    /// The private batch that produced the gradient — recorded for scoring
    /// reconstructions, never shown to the attack itself.
    pub batch: Batch,
    pub defense: DefenseConfig,
    pub gradients: GradientSet,
}

pub const CAPTURE_VERSION: u32 = 1;

impl GradientCapture {
    /// Runs one client step and applies the defense.
    pub fn capture(
        cfg: &ModelConfig,
        params: &ModelParams,
        batch: Batch,
        defense: DefenseConfig,
    ) -> Result<Self, FederatedError> {
        let honest = client_gradient(cfg, params, &batch)?;
        let gradients = apply_defense(&honest, &defense);
        Ok(GradientCapture { version: CAPTURE_VERSION, batch, defense, gradients })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{classifier_loss, init_params, ModelKind};
    use rand::SeedableRng;

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig { vocab_size: vocab, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_positions: 12 }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(31)
    }

    #[test]
    fn batch_pads_to_longest_and_masks_real_slots() {
        let b = Batch::new(vec![vec![3, 4], vec![5, 6, 7]], vec![0, 1]).unwrap();
        assert_eq!(b.padded_len, 3);
        assert_eq!(b.padded(0), vec![3, 4, PAD_ID]);
        assert_eq!(b.mask(0), vec![true, true, false]);
        assert_eq!(b.mask(1), vec![true, true, true]);
    }

    #[test]
    fn singleton_batch_gradient_equals_sequence_gradient() {
        let cfg = tiny_cfg(10);
        let params = init_params(ModelKind::Classifier, &cfg, &mut rng()).unwrap();
        let batch = Batch::new(vec![vec![3, 4, 5]], vec![1]).unwrap();
        let via_batch = client_gradient(&cfg, &params, &batch).unwrap();

        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, true).unwrap();
        let loss =
            classifier_loss(&mut tape, &bound, &cfg, SeqInput::Tokens(&[3, 4, 5]), 1).unwrap();
        let grads = tape.backward(loss, &bound.vars, false).unwrap();
        for (name, &g) in bound.names.iter().zip(&grads) {
            let direct = tape.to_tensor(g);
            let batch_g = via_batch.get(name).unwrap();
            for (a, b) in direct.data.iter().zip(&batch_g.data) {
                assert!((a - b).abs() < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn duplicating_batch_leaves_gradient_unchanged() {
        let cfg = tiny_cfg(10);
        let params = init_params(ModelKind::Classifier, &cfg, &mut rng()).unwrap();
        let once = Batch::new(vec![vec![3, 4], vec![6, 7, 8]], vec![0, 1]).unwrap();
        let twice = Batch::new(
            vec![vec![3, 4], vec![6, 7, 8], vec![3, 4], vec![6, 7, 8]],
            vec![0, 1, 0, 1],
        )
        .unwrap();
        let g1 = client_gradient(&cfg, &params, &once).unwrap();
        let g2 = client_gradient(&cfg, &params, &twice).unwrap();
        for ((n1, a), (_, b)) in g1.iter().zip(g2.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12, "{n1}");
            }
        }
    }

    #[test]
    fn ragged_batch_gradient_is_mean_of_per_sequence_gradients() {
        // Padding must not leak into the gradient: the ragged-batch result
        // equals the average of each sequence's own (unpadded) gradient.
        let cfg = tiny_cfg(10);
        let params = init_params(ModelKind::Classifier, &cfg, &mut rng()).unwrap();
        let b1 = Batch::new(vec![vec![3, 4]], vec![0]).unwrap();
        let b2 = Batch::new(vec![vec![6, 7, 8, 9]], vec![1]).unwrap();
        let joint = Batch::new(vec![vec![3, 4], vec![6, 7, 8, 9]], vec![0, 1]).unwrap();
        let g1 = client_gradient(&cfg, &params, &b1).unwrap();
        let g2 = client_gradient(&cfg, &params, &b2).unwrap();
        let gj = client_gradient(&cfg, &params, &joint).unwrap();
        let mean = g1.zip_map(&g2, |a, b| 0.5 * (a + b)).unwrap();
        for ((n, a), (_, b)) in gj.iter().zip(mean.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12, "{n}");
            }
        }
    }

    #[test]
    fn fedsgd_identities() {
        let cfg = tiny_cfg(10);
        let params = init_params(ModelKind::Classifier, &cfg, &mut rng()).unwrap();
        let batch = Batch::new(vec![vec![3, 4, 5]], vec![0]).unwrap();
        let g = client_gradient(&cfg, &params, &batch).unwrap();

        // C identical gradients → same as C=1 (up to the rounding in
        // (g+g+g)/3, which is not bitwise exact).
        let one = fedsgd_aggregate(&params, std::slice::from_ref(&g), 0.1).unwrap();
        let three = fedsgd_aggregate(&params, &[g.clone(), g.clone(), g.clone()], 0.1).unwrap();
        for ((n, a), (_, b)) in one.iter().zip(three.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-15, "{n}");
            }
        }

        // Zero gradients → unchanged.
        let zero = g.map_values(|_| 0.0);
        assert_eq!(fedsgd_aggregate(&params, &[zero.clone()], 0.1).unwrap(), params);

        // g and −g cancel.
        let neg = g.map_values(|v| -v);
        assert_eq!(fedsgd_aggregate(&params, &[g.clone(), neg], 0.1).unwrap(), params);

        assert!(matches!(fedsgd_aggregate(&params, &[], 0.1), Err(FederatedError::NoClients)));
    }

    #[test]
    fn defense_sigma_zero_is_exact_identity() {
        let cfg = tiny_cfg(10);
        let params = init_params(ModelKind::Classifier, &cfg, &mut rng()).unwrap();
        let batch = Batch::new(vec![vec![3, 4]], vec![1]).unwrap();
        let g = client_gradient(&cfg, &params, &batch).unwrap();
        let defended = apply_defense(&g, &DefenseConfig::off());
        assert_eq!(defended, g);
    }

    #[test]
    fn defense_is_seeded_and_has_requested_spread() {
        let cfg = DefenseConfig { sigma: 0.001, seed: 42 };
        let mut flat = GradientSet::new();
        flat.push("w".to_string(), crate::tensor::Tensor::zeros(vec![100_000]));
        let a = apply_defense(&flat, &cfg);
        let b = apply_defense(&flat, &cfg);
        assert_eq!(a, b);
        let noise = &a.get("w").unwrap().data;
        let mean: f64 = noise.iter().sum::<f64>() / noise.len() as f64;
        let var: f64 =
            noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / noise.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.001).abs() / 0.001 < 0.02, "empirical std {std}");
    }
}
