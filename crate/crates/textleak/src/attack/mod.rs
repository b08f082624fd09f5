//! Text reconstruction from observed gradients: alternating continuous
//! optimization of dummy embeddings against a gradient-matching loss and
//! discrete reordering search guided by a language-model prior.

pub mod losses;
pub mod project;
pub mod transform;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::{AdamConfig, AdamError, AdamState};
use crate::model::{ModelConfig, ModelError, NextTokenModel};
use crate::params::{GradientSet, LayoutError, ModelParams};
use crate::tape::{Tape, TapeError};
use crate::tensor::Tensor;

use losses::{trace_loss_rec, vocab_mean_norm, ElementSpan, LossKind};
use project::project_rows;
use transform::{permute_rows, sample_permutation, ALL_TRANSFORMS};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error("cannot transform a sequence of {0} token(s); at least 2 needed")]
    SequenceTooShort(usize),
    #[error("embedding row {0} is all zeros; cosine projection is undefined")]
    ZeroRow(usize),
    #[error("bad attack configuration: {0}")]
    BadConfig(String),
}

/// How the attacker treats the unknown binary labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Labels supplied by the caller (the strongest, standard assumption).
    Known,
    /// Rerun the attack for every assignment and keep the one with the
    /// smallest final reconstruction loss.
    Enumerate,
}

/// Full hyperparameter set for one reconstruction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct AttackConfig {
    pub loss: LossKind,
    /// Weight of the L1 term inside the L2+L1 gradient distance.
    pub alpha_tag: f64,
    /// Weight of the perplexity prior in the discrete selection rule.
    pub alpha_lm: f64,
    /// Weight of the embedding-length regularizer.
    pub alpha_reg: f64,
    /// Base Adam learning rate.
    pub lambda: f64,
    /// Learning-rate decay factor, applied once every 50 continuous steps.
    pub gamma: f64,
    /// Gaussian candidates drawn by the initializer.
    pub init_draws: usize,
    /// Reorderings of the best Gaussian candidate tried by the initializer.
    pub init_permutations: usize,
    /// Outer iterations, each one continuous phase plus one discrete phase.
    pub outer_iters: usize,
    /// Adam steps per continuous phase.
    pub continuous_steps: usize,
    /// Transformation proposals per discrete phase.
    pub discrete_proposals: usize,
    pub label_mode: LabelMode,
    pub seed: u64,
    /// Wall-clock cap checked at outer-iteration boundaries; exceeding it
    /// returns the best result so far, flagged truncated.
    pub time_budget_secs: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::lamp_cos()
    }
}

impl AttackConfig {
    /// Cosine-distance variant: the strongest configuration on small models.
    pub fn lamp_cos() -> Self {
        AttackConfig {
            loss: LossKind::Cos,
            alpha_tag: 0.0,
            alpha_lm: 0.2,
            alpha_reg: 1.0,
            lambda: 0.01,
            gamma: 0.89,
            init_draws: 500,
            init_permutations: 500,
            outer_iters: 40,
            continuous_steps: 50,
            discrete_proposals: 200,
            label_mode: LabelMode::Known,
            seed: 0,
            time_budget_secs: None,
        }
    }

    /// L2+L1 gradient-distance variant.
    pub fn lamp_l1l2() -> Self {
        AttackConfig {
            loss: LossKind::Tag,
            alpha_tag: 0.01,
            alpha_lm: 60.0,
            alpha_reg: 25.0,
            ..AttackConfig::lamp_cos()
        }
    }

    /// Plain-L2 gradient-distance variant (the L1 term dropped).
    pub fn lamp_l2() -> Self {
        AttackConfig { loss: LossKind::L2, alpha_tag: 0.0, ..AttackConfig::lamp_l1l2() }
    }

    /// L2+L1 baseline: single init, no discrete search, no priors.
    pub fn tag_baseline() -> Self {
        AttackConfig {
            loss: LossKind::Tag,
            alpha_tag: 0.01,
            alpha_lm: 0.0,
            alpha_reg: 0.0,
            lambda: 0.1,
            gamma: 1.0,
            init_draws: 1,
            init_permutations: 0,
            outer_iters: 50,
            continuous_steps: 50,
            discrete_proposals: 0,
            label_mode: LabelMode::Known,
            seed: 0,
            time_budget_secs: None,
        }
    }

    /// Plain-L2 baseline (the original dummy-gradient matching setup).
    pub fn dlg_baseline() -> Self {
        AttackConfig { loss: LossKind::L2, alpha_tag: 0.0, ..AttackConfig::tag_baseline() }
    }

    /// Ablation: drop the discrete search phase.
    pub fn no_discrete(mut self) -> Self {
        self.discrete_proposals = 0;
        self
    }

    /// Ablation: keep the discrete search but select on reconstruction loss
    /// alone.
    pub fn no_lm(mut self) -> Self {
        self.alpha_lm = 0.0;
        self
    }

    /// Ablation: drop the embedding-length regularizer.
    pub fn no_reg(mut self) -> Self {
        self.alpha_reg = 0.0;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Named preset lookup for config files and the command line.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "lamp-cos" => AttackConfig::lamp_cos(),
            "lamp-l1l2" => AttackConfig::lamp_l1l2(),
            "lamp-l2" => AttackConfig::lamp_l2(),
            "tag" => AttackConfig::tag_baseline(),
            "dlg" => AttackConfig::dlg_baseline(),
            "lamp-cos-no-discrete" => AttackConfig::lamp_cos().no_discrete(),
            "lamp-cos-no-lm" => AttackConfig::lamp_cos().no_lm(),
            "lamp-cos-no-reg" => AttackConfig::lamp_cos().no_reg(),
            _ => return None,
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &[
            "lamp-cos",
            "lamp-l1l2",
            "lamp-l2",
            "tag",
            "dlg",
            "lamp-cos-no-discrete",
            "lamp-cos-no-lm",
            "lamp-cos-no-reg",
        ]
    }

    pub fn total_continuous_steps(&self) -> usize {
        self.outer_iters * self.continuous_steps
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let nonneg = [
            ("alpha-tag", self.alpha_tag),
            ("alpha-lm", self.alpha_lm),
            ("alpha-reg", self.alpha_reg),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(AttackError::BadConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(AttackError::BadConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 || self.gamma > 1.0 {
            return Err(AttackError::BadConfig(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.init_draws == 0 {
            return Err(AttackError::BadConfig("init-draws must be at least 1".into()));
        }
        if let Some(t) = self.time_budget_secs {
            if !t.is_finite() || t <= 0.0 {
                return Err(AttackError::BadConfig(format!("time budget must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// One point of the reconstruction trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Outer iteration this snapshot belongs to.
    pub outer_iter: usize,
    /// Completed continuous steps at the time of the snapshot.
    pub step: u64,
    pub loss_rec: f64,
    pub loss_lm: f64,
    /// Projected token ids per batch element (all slots, padding included).
    pub tokens: Vec<Vec<u32>>,
}

/// Output of one attack run. Everything except the wall time is a pure
/// function of (inputs, config), so serialized results are reproducible
/// byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionResult {
    /// Projected token ids per batch element (all slots; trailing slots past
    /// the element's real length are reconstructed padding, which scoring
    /// should cut away).
    pub recovered: Vec<Vec<u32>>,
    /// Real token count per element, echoed from the run setup.
    pub lengths: Vec<usize>,
    /// Label assignment the result was produced under.
    pub labels: Vec<u8>,
    pub final_loss_rec: f64,
    pub final_loss_lm: f64,
    pub snapshots: Vec<Snapshot>,
    /// True when the wall-clock budget cut the run short.
    pub truncated: bool,
    /// Matched layers whose cosine term was pinned to zero by a zero norm at
    /// any point of the run.
    pub degenerate_layers: Vec<String>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Accept `cand` over `cur`? The rule is a strict improvement of
/// `loss_rec + alpha_lm * perplexity`, reconstruction loss measured on the
/// continuous embeddings and perplexity on their vocabulary projections.
pub fn select_candidate(
    cur_rec: f64,
    cur_lm: f64,
    cand_rec: f64,
    cand_lm: f64,
    alpha_lm: f64,
) -> bool {
    cand_rec + alpha_lm * cand_lm < cur_rec + alpha_lm * cur_lm
}

/// Shared geometry and borrowed inputs for one run.
struct Objective<'a> {
    model_cfg: &'a ModelConfig,
    victim: &'a ModelParams,
    observed: &'a GradientSet,
    spans: &'a [ElementSpan],
    labels: &'a [u8],
    attack: &'a AttackConfig,
    mean_vocab_norm: f64,
    d: usize,
    total_rows: usize,
}

impl Objective<'_> {
    /// Reconstruction loss and bare gradient-match term at `x`, values only.
    fn values(&self, x: &[f64], diag: &mut BTreeSet<String>) -> Result<(f64, f64), AttackError> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![self.total_rows, self.d], x.to_vec()))?;
        let traced = trace_loss_rec(
            &mut tape,
            self.model_cfg,
            self.victim,
            self.observed,
            xv,
            self.spans,
            self.labels,
            self.attack.loss,
            self.attack.alpha_tag,
            self.attack.alpha_reg,
            self.mean_vocab_norm,
            false,
        )?;
        diag.extend(traced.degenerate_layers);
        Ok((tape.item(traced.loss), tape.item(traced.grad_term)))
    }

    /// Reconstruction loss and its gradient with respect to `x`.
    fn value_and_gradient(
        &self,
        x: &[f64],
        diag: &mut BTreeSet<String>,
    ) -> Result<(f64, Vec<f64>), AttackError> {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(vec![self.total_rows, self.d], x.to_vec()))?;
        let traced = trace_loss_rec(
            &mut tape,
            self.model_cfg,
            self.victim,
            self.observed,
            xv,
            self.spans,
            self.labels,
            self.attack.loss,
            self.attack.alpha_tag,
            self.attack.alpha_reg,
            self.mean_vocab_norm,
            true,
        )?;
        diag.extend(traced.degenerate_layers);
        let grads = tape.backward(traced.loss, &[xv], false)?;
        Ok((tape.item(traced.loss), tape.data(grads[0]).to_vec()))
    }

    /// Cosine projection of every element's rows (all slots).
    fn project(&self, x: &[f64], w_embed: &Tensor) -> Result<Vec<Vec<u32>>, AttackError> {
        self.spans
            .iter()
            .map(|s| {
                let rows = &x[s.offset * self.d..(s.offset + s.slots) * self.d];
                project_rows(rows, self.d, w_embed).map_err(|e| match e {
                    AttackError::ZeroRow(i) => AttackError::ZeroRow(s.offset + i),
                    other => other,
                })
            })
            .collect()
    }

    /// Mean perplexity of the projected elements' real-token prefixes.
    /// Elements too short to score are left out of the mean; if none can be
    /// scored the prior is 0.
    fn mean_perplexity(
        &self,
        lm: &dyn NextTokenModel,
        tokens: &[Vec<u32>],
    ) -> Result<f64, AttackError> {
        let mut sum = 0.0;
        let mut scored = 0usize;
        for (toks, span) in tokens.iter().zip(self.spans) {
            if span.real_len >= 2 {
                sum += lm.perplexity(&toks[..span.real_len])?;
                scored += 1;
            }
        }
        Ok(if scored == 0 { 0.0 } else { sum / scored as f64 })
    }
}

/// Two-step initialization: `init_draws` standard-Gaussian candidates keep
/// the argmin of the gradient-match term; then `init_permutations` random
/// per-element reorderings of that winner compete against it on the same
/// term. Returns the winner and its gradient-match value.
pub fn init_embeddings(
    model_cfg: &ModelConfig,
    victim: &ModelParams,
    observed: &GradientSet,
    lengths: &[usize],
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<(Vec<f64>, f64), AttackError> {
    cfg.validate()?;
    let (spans, slots) = element_spans(model_cfg, lengths)?;
    check_labels(labels, lengths.len())?;
    let obj = Objective {
        model_cfg,
        victim,
        observed,
        spans: &spans,
        labels,
        attack: cfg,
        mean_vocab_norm: vocab_mean_norm(victim.require("embed.word")?),
        d: model_cfg.d_model,
        total_rows: lengths.len() * slots,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut diag = BTreeSet::new();
    init_inner(&obj, &mut rng, &mut diag)
}

fn init_inner(
    obj: &Objective,
    rng: &mut ChaCha8Rng,
    diag: &mut BTreeSet<String>,
) -> Result<(Vec<f64>, f64), AttackError> {
    let len = obj.total_rows * obj.d;
    let mut best_x = Vec::new();
    let mut best_g = f64::INFINITY;
    for _ in 0..obj.attack.init_draws {
        let cand: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let (_, g) = obj.values(&cand, diag)?;
        if g < best_g || best_x.is_empty() {
            best_g = g;
            best_x = cand;
        }
    }

    // Reorderings compete against the unpermuted winner, so the result can
    // only improve on it.
    let base = best_x.clone();
    for _ in 0..obj.attack.init_permutations {
        let mut cand = base.clone();
        for span in obj.spans {
            let mut order: Vec<usize> = (0..span.real_len).collect();
            order.shuffle(rng);
            let start = span.offset * obj.d;
            let rows = permute_rows(&base[start..start + span.real_len * obj.d], obj.d, &order);
            cand[start..start + span.real_len * obj.d].copy_from_slice(&rows);
        }
        let (_, g) = obj.values(&cand, diag)?;
        if g < best_g {
            best_g = g;
            best_x = cand;
        }
    }
    Ok((best_x, best_g))
}

fn element_spans(
    model_cfg: &ModelConfig,
    lengths: &[usize],
) -> Result<(Vec<ElementSpan>, usize), AttackError> {
    if lengths.is_empty() {
        return Err(AttackError::BadConfig("batch has no elements".into()));
    }
    let cap = model_cfg.max_content_len();
    for &n in lengths {
        if n == 0 {
            return Err(AttackError::Model(ModelError::TooShort { need: 1, got: 0 }));
        }
        if n > cap {
            return Err(AttackError::Model(ModelError::TooLong { len: n, cap }));
        }
    }
    let slots = *lengths.iter().max().expect("nonempty");
    let spans = lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| ElementSpan { offset: i * slots, slots, real_len: n })
        .collect();
    Ok((spans, slots))
}

fn check_labels(labels: &[u8], elements: usize) -> Result<(), AttackError> {
    if labels.len() != elements {
        return Err(AttackError::BadConfig(format!(
            "{} labels for {} batch elements",
            labels.len(),
            elements
        )));
    }
    for &y in labels {
        if y > 1 {
            return Err(AttackError::Model(ModelError::BadLabel(y)));
        }
    }
    Ok(())
}

/// Runs the full attack. `lengths` gives the real token count of each batch
/// element (assumed known). Under `LabelMode::Known` the true labels must be
/// supplied; under `LabelMode::Enumerate` they are ignored and every
/// assignment is tried with the same seed, keeping the smallest final
/// reconstruction loss.
pub fn run_attack(
    model_cfg: &ModelConfig,
    victim: &ModelParams,
    observed: &GradientSet,
    lm: &dyn NextTokenModel,
    lengths: &[usize],
    known_labels: Option<&[u8]>,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult, AttackError> {
    cfg.validate()?;
    match cfg.label_mode {
        LabelMode::Known => {
            let labels = known_labels.ok_or_else(|| {
                AttackError::BadConfig("known-label mode requires labels".into())
            })?;
            check_labels(labels, lengths.len())?;
            attack_with_labels(model_cfg, victim, observed, lm, lengths, labels.to_vec(), cfg)
        }
        LabelMode::Enumerate => {
            let b = lengths.len();
            if b == 0 {
                return Err(AttackError::BadConfig("batch has no elements".into()));
            }
            if b > 12 {
                return Err(AttackError::BadConfig(format!(
                    "label enumeration over {b} elements would need {} runs",
                    1u64 << b
                )));
            }
            let mut best: Option<ReconstructionResult> = None;
            for bits in 0..(1u32 << b) {
                let labels: Vec<u8> = (0..b).map(|i| ((bits >> i) & 1) as u8).collect();
                let r =
                    attack_with_labels(model_cfg, victim, observed, lm, lengths, labels, cfg)?;
                let better = best
                    .as_ref()
                    .map_or(true, |prev| r.final_loss_rec < prev.final_loss_rec);
                if better {
                    best = Some(r);
                }
            }
            Ok(best.expect("at least one assignment"))
        }
    }
}

/// Reruns the attack for every candidate length (single-element batches
/// only) and keeps the run with the smallest final reconstruction loss.
pub fn run_attack_unknown_length(
    model_cfg: &ModelConfig,
    victim: &ModelParams,
    observed: &GradientSet,
    lm: &dyn NextTokenModel,
    candidate_lengths: &[usize],
    known_labels: Option<&[u8]>,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult, AttackError> {
    if candidate_lengths.is_empty() {
        return Err(AttackError::BadConfig("no candidate lengths".into()));
    }
    let mut best: Option<ReconstructionResult> = None;
    for &n in candidate_lengths {
        let r = run_attack(model_cfg, victim, observed, lm, &[n], known_labels, cfg)?;
        let better = best.as_ref().map_or(true, |prev| r.final_loss_rec < prev.final_loss_rec);
        if better {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one length"))
}

fn attack_with_labels(
    model_cfg: &ModelConfig,
    victim: &ModelParams,
    observed: &GradientSet,
    lm: &dyn NextTokenModel,
    lengths: &[usize],
    labels: Vec<u8>,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult, AttackError> {
    let start = Instant::now();
    let (spans, slots) = element_spans(model_cfg, lengths)?;
    check_labels(&labels, lengths.len())?;
    let w_embed = victim.require("embed.word")?.clone();
    let obj = Objective {
        model_cfg,
        victim,
        observed,
        spans: &spans,
        labels: &labels,
        attack: cfg,
        mean_vocab_norm: vocab_mean_norm(&w_embed),
        d: model_cfg.d_model,
        total_rows: lengths.len() * slots,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut diag = BTreeSet::new();
    let (mut x, _) = init_inner(&obj, &mut rng, &mut diag)?;

    // One optimizer state for the whole run: the decay clock keeps counting
    // across outer iterations, and accepted reorderings do not reset or
    // permute the moment estimates.
    let mut adam = AdamState::new(x.len(), AdamConfig::new(cfg.lambda, cfg.gamma));
    let mut snapshots: Vec<Snapshot> = Vec::new();
    let mut truncated = false;

    // Elements that the discrete phase can act on at all.
    let transformable: Vec<usize> =
        (0..lengths.len()).filter(|&i| lengths[i] >= 2).collect();

    for outer in 1..=cfg.outer_iters {
        if let Some(budget) = cfg.time_budget_secs {
            if start.elapsed().as_secs_f64() > budget {
                truncated = true;
                break;
            }
        }

        // Continuous phase.
        for _ in 0..cfg.continuous_steps {
            let (_, grad) = obj.value_and_gradient(&x, &mut diag)?;
            adam.step(&mut x, &grad)?;
            if adam.steps_taken() % 500 == 0 {
                let (rec, _) = obj.values(&x, &mut diag)?;
                let tokens = obj.project(&x, &w_embed)?;
                let lm_val = obj.mean_perplexity(lm, &tokens)?;
                snapshots.push(Snapshot {
                    outer_iter: outer,
                    step: adam.steps_taken(),
                    loss_rec: rec,
                    loss_lm: lm_val,
                    tokens,
                });
            }
        }

        // Discrete phase: sequential proposals against the running state.
        let (mut cur_rec, _) = obj.values(&x, &mut diag)?;
        let mut cur_tokens = obj.project(&x, &w_embed)?;
        let mut cur_lm = obj.mean_perplexity(lm, &cur_tokens)?;
        if !transformable.is_empty() {
            for _ in 0..cfg.discrete_proposals {
                let elem = transformable[rng.gen_range(0..transformable.len())];
                let kind = ALL_TRANSFORMS[rng.gen_range(0..ALL_TRANSFORMS.len())];
                let span = spans[elem];
                let perm = sample_permutation(kind, span.real_len, &mut rng)?;

                let mut cand = x.clone();
                let a = span.offset * obj.d;
                let b = a + span.real_len * obj.d;
                let moved = permute_rows(&x[a..b], obj.d, &perm);
                cand[a..b].copy_from_slice(&moved);

                let (cand_rec, _) = obj.values(&cand, &mut diag)?;
                // Only the edited element's projection can change.
                let mut cand_elem_tokens =
                    project_rows(&cand[a..b], obj.d, &w_embed).map_err(|e| match e {
                        AttackError::ZeroRow(i) => AttackError::ZeroRow(span.offset + i),
                        other => other,
                    })?;
                cand_elem_tokens.extend_from_slice(&cur_tokens[elem][span.real_len..]);
                let mut cand_tokens_elem = cur_tokens.clone();
                cand_tokens_elem[elem] = cand_elem_tokens;
                let cand_lm = obj.mean_perplexity(lm, &cand_tokens_elem)?;

                if select_candidate(cur_rec, cur_lm, cand_rec, cand_lm, cfg.alpha_lm) {
                    x = cand;
                    cur_rec = cand_rec;
                    cur_tokens = cand_tokens_elem;
                    cur_lm = cand_lm;
                }
            }
        }

        snapshots.push(Snapshot {
            outer_iter: outer,
            step: adam.steps_taken(),
            loss_rec: cur_rec,
            loss_lm: cur_lm,
            tokens: cur_tokens.clone(),
        });
    }

    let (final_rec, _) = obj.values(&x, &mut diag)?;
    let recovered = obj.project(&x, &w_embed)?;
    let final_lm = obj.mean_perplexity(lm, &recovered)?;

    Ok(ReconstructionResult {
        recovered,
        lengths: lengths.to_vec(),
        labels,
        final_loss_rec: final_rec,
        final_loss_lm: final_lm,
        snapshots,
        truncated,
        degenerate_layers: diag.into_iter().collect(),
        wall_time: start.elapsed(),
    })
}
