//! Biencoder reidentification model.
//!
//! A note `x` and a profile `y` are scored by the dot product of two linear
//! encoders, `g(x) · f(y)`, and the probability of a profile is the softmax
//! of those scores over the candidate profiles. Training maximizes the
//! in-batch likelihood by coordinate ascent: each phase runs Adam on one
//! encoder while the other is frozen.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{ClinicalNote, PatientProfile};
use crate::encoder::{
    featurize_profile, featurize_text, EncodeError, EncoderParams, EncoderRole, FeaturizerConfig,
    SparseFeatures, HASH_VERSION,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epochs must be at least 1")]
    NoEpochs,
    #[error("batch_size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("batch_size {batch_size} exceeds the {pairs} training pairs")]
    BatchTooLarge { batch_size: usize, pairs: usize },
    #[error("note `{note_id}` has no profile for patient `{patient_id}`")]
    MissingProfile { note_id: String, patient_id: String },
    #[error("invalid training config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("model stores {found} scalars, expected {expected}")]
    ScalarMismatch { found: String, expected: &'static str },
    #[error("model uses hash `{found}`, this build uses `{expected}`")]
    HashVersion { found: String, expected: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternation {
    /// Switch the optimized encoder every epoch, note encoder first.
    PerEpoch,
    /// Switch every optimizer step, note encoder first.
    PerStep,
}

impl FromStr for Alternation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "epoch" => Ok(Alternation::PerEpoch),
            "step" => Ok(Alternation::PerStep),
            _ => Err(format!("unknown alternation `{s}` (expected epoch or step)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub alternation: Alternation,
    pub embedding_dim: usize,
    /// Half-width of the uniform initialization shared by both encoders.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 55,
            batch_size: 35,
            learning_rate: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            alternation: Alternation::PerEpoch,
            embedding_dim: 128,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for transformer fine-tuning; kept for reference.
    pub const TRANSFORMER_LEARNING_RATE: f64 = 1e-5;

    /// The `1/√H` initialization half-width, which leaves initial logits
    /// near zero for unit-norm features.
    pub fn inverse_sqrt_scale(hash_space: usize) -> f64 {
        1.0 / (hash_space as f64).sqrt()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::NoEpochs);
        }
        if self.batch_size < 2 {
            return Err(TrainError::BatchTooSmall(self.batch_size));
        }
        let finite_pos = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_pos(self.learning_rate) || !finite_pos(self.init_scale) || !finite_pos(self.epsilon) {
            return Err(TrainError::BadConfig("learning_rate, init_scale and epsilon must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::BadConfig("Adam betas must lie in [0, 1)"));
        }
        if self.embedding_dim == 0 {
            return Err(TrainError::BadConfig("embedding_dim must be at least 1"));
        }
        Ok(())
    }
}

/// Profile encoder `f`, note encoder `g` and the shared featurizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BiencoderModel<T> {
    pub profile_encoder: EncoderParams<T>,
    pub note_encoder: EncoderParams<T>,
    pub featurizer: FeaturizerConfig,
    pub train_seed: u64,
}

fn init_seed(train_seed: u64) -> u64 {
    train_seed ^ 0x9e37_79b9_7f4a_7c15
}

impl<T: Scalar> BiencoderModel<T> {
    /// Fresh model whose two encoders start from the same seeded draw, so
    /// `f` and `g` agree on every hashed feature before training.
    pub fn new(featurizer: FeaturizerConfig, dim: usize, train_seed: u64, init_scale: f64) -> Self {
        let h = featurizer.hash_space;
        let seed = init_seed(train_seed);
        Self {
            profile_encoder: EncoderParams::new(EncoderRole::Profile, dim, h, seed, init_scale),
            note_encoder: EncoderParams::new(EncoderRole::Note, dim, h, seed, init_scale),
            featurizer,
            train_seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.note_encoder.dim()
    }

    pub fn note_features(&self, note: &ClinicalNote) -> SparseFeatures<T> {
        featurize_text(note.tokens(), &self.featurizer)
    }

    pub fn profile_features(&self, profile: &PatientProfile) -> SparseFeatures<T> {
        featurize_profile(profile, &self.featurizer)
    }

    pub fn encode_note(&self, note: &ClinicalNote) -> Result<Vec<T>, EncodeError> {
        self.note_encoder.encode(&self.note_features(note))
    }

    pub fn encode_profile(&self, profile: &PatientProfile) -> Result<Vec<T>, EncodeError> {
        self.profile_encoder.encode(&self.profile_features(profile))
    }

    /// Encodes a profile database once for repeated ranking.
    pub fn index_profiles(&self, profiles: &[PatientProfile]) -> Result<ProfileIndex<T>, EncodeError> {
        let vectors = profiles.iter().map(|p| self.encode_profile(p)).collect::<Result<Vec<_>, _>>()?;
        Ok(ProfileIndex { patient_ids: profiles.iter().map(|p| p.patient_id.clone()).collect(), vectors })
    }

    fn encoder(&self, role: EncoderRole) -> &EncoderParams<T> {
        match role {
            EncoderRole::Profile => &self.profile_encoder,
            EncoderRole::Note => &self.note_encoder,
        }
    }

    fn encoder_mut(&mut self, role: EncoderRole) -> &mut EncoderParams<T> {
        match role {
            EncoderRole::Profile => &mut self.profile_encoder,
            EncoderRole::Note => &mut self.note_encoder,
        }
    }
}

/// Encoded profile database.
#[derive(Debug, Clone)]
pub struct ProfileIndex<T> {
    pub patient_ids: Vec<String>,
    pub vectors: Vec<Vec<T>>,
}

impl<T> ProfileIndex<T> {
    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }
}

fn to_array<T: Scalar>(rows: &[Vec<T>], dim: usize) -> Result<Array2<T>, EncodeError> {
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(EncodeError::DimensionMismatch { expected: dim, got: r.len() });
        }
        flat.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((rows.len(), dim), flat).expect("shape checked"))
}

/// Logit matrix with entry `(i, j) = note_i · profile_j`.
pub fn score_matrix<T: Scalar>(
    note_vectors: &[Vec<T>],
    profile_vectors: &[Vec<T>],
) -> Result<Array2<T>, EncodeError> {
    let dim = note_vectors.first().or(profile_vectors.first()).map_or(0, Vec::len);
    let notes = to_array(note_vectors, dim)?;
    let profiles = to_array(profile_vectors, dim)?;
    Ok(notes.dot(&profiles.t()))
}

/// Softmax with the row maximum subtracted first.
pub fn posterior<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&l| (l - max).exp()).sum::<T>().ln()
}

/// Gradient of the loss with respect to a subset of projection columns.
/// Columns are sorted; `data` holds one `dim`-vector per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad<T> {
    pub columns: Vec<u32>,
    pub data: Vec<T>,
    pub dim: usize,
}

impl<T: Scalar> SparseGrad<T> {
    /// Gradient entry `(row, col)`; zero for untouched columns.
    pub fn get(&self, row: usize, col: u32) -> T {
        match self.columns.binary_search(&col) {
            Ok(pos) => self.data[pos * self.dim + row],
            Err(_) => T::zero(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Forward pass over one batch: note `i` is paired with profile `i`.
struct BatchForward<T> {
    note_vecs: Vec<Vec<T>>,
    profile_vecs: Vec<Vec<T>>,
    probs: Array2<T>,
    loss: T,
}

fn forward<T: Scalar>(
    model: &BiencoderModel<T>,
    notes: &[&SparseFeatures<T>],
    profiles: &[&SparseFeatures<T>],
) -> Result<BatchForward<T>, EncodeError> {
    let note_vecs = notes.iter().map(|x| model.note_encoder.encode(x)).collect::<Result<Vec<_>, _>>()?;
    let profile_vecs = profiles.iter().map(|y| model.profile_encoder.encode(y)).collect::<Result<Vec<_>, _>>()?;
    let logits = score_matrix(&note_vecs, &profile_vecs)?;
    let b = notes.len();
    let mut probs = Array2::zeros((b, profiles.len()));
    let mut loss = T::zero();
    for (i, row) in logits.rows().into_iter().enumerate() {
        let row = row.to_vec();
        loss += log_sum_exp(&row) - row[i];
        for (j, p) in posterior(&row).into_iter().enumerate() {
            probs[[i, j]] = p;
        }
    }
    loss /= T::lit(b as f64);
    Ok(BatchForward { note_vecs, profile_vecs, probs, loss })
}

/// Mean in-batch softmax cross-entropy.
pub fn batch_loss<T: Scalar>(
    model: &BiencoderModel<T>,
    notes: &[&SparseFeatures<T>],
    profiles: &[&SparseFeatures<T>],
) -> Result<T, EncodeError> {
    Ok(forward(model, notes, profiles)?.loss)
}

fn accumulate<T: Scalar>(features: &[&SparseFeatures<T>], upstream: &[Vec<T>], dim: usize) -> SparseGrad<T> {
    let mut columns: Vec<u32> = features.iter().flat_map(|f| f.indices().iter().copied()).collect();
    columns.sort_unstable();
    columns.dedup();
    let mut data = vec![T::zero(); columns.len() * dim];
    for (f, up) in features.iter().zip(upstream) {
        for (col, w) in f.iter() {
            let pos = columns.binary_search(&col).expect("column collected above");
            for (d, &u) in data[pos * dim..(pos + 1) * dim].iter_mut().zip(up) {
                *d += w * u;
            }
        }
    }
    SparseGrad { columns, data, dim }
}

/// Loss and analytic gradients for one batch.
///
/// With `s = U Vᵀ`, `P = softmax(s)` row-wise and loss `L = mean_i CE_i`,
/// `∂L/∂s = (P − I) / b`, `∂L/∂U = (∂L/∂s) V`, `∂L/∂V = (∂L/∂s)ᵀ U`, and the
/// column gradient of an encoder is the feature-weighted sum of the
/// embedding gradients. `loss_scale` multiplies the loss (and gradients).
pub struct BatchGradients<T> {
    pub loss: T,
    pub note_grad: Option<SparseGrad<T>>,
    pub profile_grad: Option<SparseGrad<T>>,
}

pub fn batch_gradients<T: Scalar>(
    model: &BiencoderModel<T>,
    notes: &[&SparseFeatures<T>],
    profiles: &[&SparseFeatures<T>],
    loss_scale: T,
    want: &[EncoderRole],
) -> Result<BatchGradients<T>, EncodeError> {
    let fwd = forward(model, notes, profiles)?;
    let b = notes.len();
    let dim = model.dim();
    let scale = loss_scale / T::lit(b as f64);
    let mut d_scores = fwd.probs.clone();
    for i in 0..b {
        d_scores[[i, i]] -= T::one();
    }
    d_scores.mapv_inplace(|v| v * scale);

    let mut note_grad = None;
    let mut profile_grad = None;
    if want.contains(&EncoderRole::Note) {
        let v = to_array(&fwd.profile_vecs, dim)?;
        let d_u = d_scores.dot(&v);
        let upstream: Vec<Vec<T>> = d_u.rows().into_iter().map(|r| r.to_vec()).collect();
        note_grad = Some(accumulate(notes, &upstream, dim));
    }
    if want.contains(&EncoderRole::Profile) {
        let u = to_array(&fwd.note_vecs, dim)?;
        let d_v = d_scores.t().dot(&u);
        let upstream: Vec<Vec<T>> = d_v.rows().into_iter().map(|r| r.to_vec()).collect();
        profile_grad = Some(accumulate(profiles, &upstream, dim));
    }
    Ok(BatchGradients { loss: fwd.loss * loss_scale, note_grad, profile_grad })
}

/// Adam moments for the stored columns of one encoder, slot-aligned with
/// [`EncoderParams`]. Columns that never received a gradient have zero
/// moments, so their Adam update is exactly zero and they need no state.
#[derive(Debug, Clone, Default)]
struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

fn adam_step<T: Scalar>(
    params: &mut EncoderParams<T>,
    state: &mut AdamState<T>,
    grad: &SparseGrad<T>,
    cfg: &TrainConfig,
) {
    let dim = params.dim();
    let mut grad_pos: Vec<Option<usize>> = Vec::new();
    for (pos, &col) in grad.columns.iter().enumerate() {
        let slot = params.materialize(col);
        if grad_pos.len() <= slot {
            grad_pos.resize(slot + 1, None);
        }
        grad_pos[slot] = Some(pos);
    }
    let n = params.n_slots() * dim;
    state.m.resize(n, T::zero());
    state.v.resize(n, T::zero());
    grad_pos.resize(params.n_slots(), None);
    state.step += 1;

    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one_b1 = T::one() - b1;
    let one_b2 = T::one() - b2;
    let bc1 = T::one() - b1.powi(state.step);
    let bc2 = T::one() - b2.powi(state.step);
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);
    let zeros = vec![T::zero(); dim];

    let data = params.all_slot_data_mut();
    for (slot, gp) in grad_pos.iter().enumerate() {
        let g = match gp {
            Some(pos) => &grad.data[pos * dim..(pos + 1) * dim],
            None => &zeros[..],
        };
        let range = slot * dim..(slot + 1) * dim;
        let p = &mut data[range.clone()];
        let m = &mut state.m[range.clone()];
        let v = &mut state.v[range];
        for k in 0..dim {
            m[k] = b1 * m[k] + one_b1 * g[k];
            v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: EncoderRole,
    pub mean_loss: f64,
    pub train_top1: Option<f64>,
    pub validation_top1: Option<f64>,
}

/// Training log as CSV: epoch, phase (f|g), mean_loss, train_top1,
/// validation_top1. Unmonitored accuracies are empty cells.
pub fn write_train_log_csv<W: Write>(w: W, log: &[EpochLog]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["epoch", "phase", "mean_loss", "train_top1", "validation_top1"])?;
    let cell = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            (e.phase.tag() as char).to_string(),
            e.mean_loss.to_string(),
            cell(e.train_top1),
            cell(e.validation_top1),
        ])?;
    }
    w.flush()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: BiencoderModel<T>,
    pub log: Vec<EpochLog>,
}

/// Featurized (note, true profile) pairs.
pub struct TrainingSet<T> {
    pub notes: Vec<SparseFeatures<T>>,
    pub profiles: Vec<SparseFeatures<T>>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn build(
        notes: &[ClinicalNote],
        profiles: &[PatientProfile],
        featurizer: &FeaturizerConfig,
    ) -> Result<Self, TrainError> {
        let by_id: HashMap<&str, &PatientProfile> = profiles.iter().map(|p| (p.patient_id.as_str(), p)).collect();
        let mut note_feats = Vec::with_capacity(notes.len());
        let mut profile_feats = Vec::with_capacity(notes.len());
        for note in notes {
            let profile = by_id.get(note.patient_id.as_str()).ok_or_else(|| TrainError::MissingProfile {
                note_id: note.note_id.clone(),
                patient_id: note.patient_id.clone(),
            })?;
            note_feats.push(featurize_text(note.tokens(), featurizer));
            profile_feats.push(featurize_profile(profile, featurizer));
        }
        Ok(Self { notes: note_feats, profiles: profile_feats })
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }
}

fn make_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    // a trailing singleton has no in-batch negatives; fold it into the previous batch
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        batches.pop();
        let start = (batches.len() - 1) * batch_size;
        *batches.last_mut().expect("non-empty") = &order[start..];
    }
    batches
}

/// Trains a fresh model on `(note, profile)` pairs.
pub fn train<T: Scalar>(
    notes: &[ClinicalNote],
    profiles: &[PatientProfile],
    featurizer: &FeaturizerConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    train_with_monitor(notes, profiles, featurizer, cfg, |_, _| (None, None))
}

/// As [`train`], calling `monitor` after every epoch to obtain optional
/// train and validation top-1 accuracies for the log.
pub fn train_with_monitor<T: Scalar, M>(
    notes: &[ClinicalNote],
    profiles: &[PatientProfile],
    featurizer: &FeaturizerConfig,
    cfg: &TrainConfig,
    monitor: M,
) -> Result<TrainOutcome<T>, TrainError>
where
    M: FnMut(usize, &BiencoderModel<T>) -> (Option<f64>, Option<f64>),
{
    cfg.validate()?;
    featurizer.validate()?;
    let set = TrainingSet::build(notes, profiles, featurizer)?;
    train_on_set(&set, featurizer, cfg, monitor)
}

pub fn train_on_set<T: Scalar, M>(
    set: &TrainingSet<T>,
    featurizer: &FeaturizerConfig,
    cfg: &TrainConfig,
    mut monitor: M,
) -> Result<TrainOutcome<T>, TrainError>
where
    M: FnMut(usize, &BiencoderModel<T>) -> (Option<f64>, Option<f64>),
{
    cfg.validate()?;
    if cfg.batch_size > set.len() {
        return Err(TrainError::BatchTooLarge { batch_size: cfg.batch_size, pairs: set.len() });
    }
    let mut model = BiencoderModel::new(featurizer.clone(), cfg.embedding_dim, cfg.seed, cfg.init_scale);
    let mut note_state = AdamState::default();
    let mut profile_state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let batches = make_batches(&order, cfg.batch_size);
        let mut loss_sum = 0.0;
        let epoch_phase = if epoch % 2 == 0 { EncoderRole::Note } else { EncoderRole::Profile };
        for (bi, batch) in batches.iter().enumerate() {
            let role = match cfg.alternation {
                Alternation::PerEpoch => epoch_phase,
                Alternation::PerStep if global_step.is_multiple_of(2) => EncoderRole::Note,
                Alternation::PerStep => EncoderRole::Profile,
            };
            let xs: Vec<&SparseFeatures<T>> = batch.iter().map(|&i| &set.notes[i]).collect();
            let ys: Vec<&SparseFeatures<T>> = batch.iter().map(|&i| &set.profiles[i]).collect();
            let grads = batch_gradients(&model, &xs, &ys, T::one(), &[role])?;
            if !grads.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += grads.loss.as_f64();
            let (grad, state) = match role {
                EncoderRole::Note => (grads.note_grad, &mut note_state),
                EncoderRole::Profile => (grads.profile_grad, &mut profile_state),
            };
            adam_step(model.encoder_mut(role), state, &grad.expect("requested gradient"), cfg);
            global_step += 1;
        }
        let (train_top1, validation_top1) = monitor(epoch, &model);
        log.push(EpochLog {
            epoch,
            phase: epoch_phase,
            mean_loss: loss_sum / batches.len() as f64,
            train_top1,
            validation_top1,
        });
    }
    Ok(TrainOutcome { model, log })
}

/// Compares analytic gradients with central finite differences on
/// `samples` coordinates per encoder, drawn from the columns the batch
/// touches. Returns the largest relative error `|a − n| / max(|a|, |n|, s)`
/// where `s` is 1e-3 of the largest sampled `|a|` of that encoder: far
/// below that scale the central difference measures roundoff, not slope.
pub fn grad_check<T: Scalar>(
    model: &BiencoderModel<T>,
    notes: &[&SparseFeatures<T>],
    profiles: &[&SparseFeatures<T>],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, EncodeError> {
    const FLOOR_RATIO: f64 = 1e-3;
    let grads = batch_gradients(model, notes, profiles, T::one(), &[EncoderRole::Note, EncoderRole::Profile])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (role, grad) in [
        (EncoderRole::Note, grads.note_grad.expect("requested")),
        (EncoderRole::Profile, grads.profile_grad.expect("requested")),
    ] {
        if grad.columns.is_empty() {
            continue;
        }
        let mut probe = model.clone();
        let coords: Vec<(usize, u32)> = (0..samples)
            .map(|_| (rng.gen_range(0..model.dim()), grad.columns[rng.gen_range(0..grad.columns.len())]))
            .collect();
        let scale = coords.iter().map(|&(r, c)| grad.get(r, c).as_f64().abs()).fold(0.0, f64::max);
        let floor = (FLOOR_RATIO * scale).max(f64::MIN_POSITIVE);
        for (row, col) in coords {
            let original = probe.encoder(role).entry(row, col);
            let h = T::lit(epsilon);
            probe.encoder_mut(role).set_entry(row, col, original + h);
            let plus = batch_loss(&probe, notes, profiles)?.as_f64();
            probe.encoder_mut(role).set_entry(row, col, original - h);
            let minus = batch_loss(&probe, notes, profiles)?.as_f64();
            probe.encoder_mut(role).set_entry(row, col, original);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grad.get(row, col).as_f64();
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Ranked candidates for one note under the full-database posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult<T> {
    pub note_id: String,
    pub true_patient_id: String,
    pub ranked: Vec<(String, T)>,
    /// 1-based rank of the true patient, `None` when absent from the database.
    pub rank_of_true: Option<usize>,
}

impl<T: Scalar> RetrievalResult<T> {
    pub fn top_probability(&self) -> T {
        self.ranked.first().map_or(T::zero(), |r| r.1)
    }

    pub fn is_correct(&self) -> bool {
        self.rank_of_true == Some(1)
    }

    /// One JSON line with the top-10 candidates.
    pub fn to_json_line(&self) -> String {
        let top: Vec<serde_json::Value> = self
            .ranked
            .iter()
            .take(10)
            .map(|(id, p)| serde_json::json!([id, p.as_f64()]))
            .collect();
        serde_json::json!({
            "note_id": self.note_id,
            "true_patient_id": self.true_patient_id,
            "rank_of_true": self.rank_of_true,
            "top10": top,
        })
        .to_string()
    }
}

fn ranked_from_row<T: Scalar>(note: &ClinicalNote, probs: Vec<T>, db: &ProfileIndex<T>) -> RetrievalResult<T> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| db.patient_ids[a].cmp(&db.patient_ids[b]))
    });
    let rank_of_true = order.iter().position(|&j| db.patient_ids[j] == note.patient_id).map(|p| p + 1);
    RetrievalResult {
        note_id: note.note_id.clone(),
        true_patient_id: note.patient_id.clone(),
        ranked: order.into_iter().map(|j| (db.patient_ids[j].clone(), probs[j])).collect(),
        rank_of_true,
    }
}

/// Ranks every profile in `db` for one note.
pub fn rank<T: Scalar>(
    model: &BiencoderModel<T>,
    note: &ClinicalNote,
    db: &ProfileIndex<T>,
) -> Result<RetrievalResult<T>, EncodeError> {
    Ok(rank_all(model, std::slice::from_ref(note), db)?.remove(0))
}

pub fn rank_all<T: Scalar>(
    model: &BiencoderModel<T>,
    notes: &[ClinicalNote],
    db: &ProfileIndex<T>,
) -> Result<Vec<RetrievalResult<T>>, EncodeError> {
    let note_vecs = notes.iter().map(|n| model.encode_note(n)).collect::<Result<Vec<_>, _>>()?;
    let logits = score_matrix(&note_vecs, &db.vectors)?;
    Ok(notes
        .iter()
        .zip(logits.rows())
        .map(|(note, row)| ranked_from_row(note, posterior(&row.to_vec()), db))
        .collect())
}

/// Fraction of results whose true patient ranks within the top `k`.
pub fn top_k_from_results<T>(results: &[RetrievalResult<T>], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results.iter().filter(|r| r.rank_of_true.is_some_and(|rank| rank <= k)).count();
    hits as f64 / results.len() as f64
}

pub fn top_k_accuracy<T: Scalar>(
    model: &BiencoderModel<T>,
    notes: &[ClinicalNote],
    db: &ProfileIndex<T>,
    k: usize,
) -> Result<f64, EncodeError> {
    Ok(top_k_from_results(&rank_all(model, notes, db)?, k))
}

/// Probability table computed one (note, profile) pair at a time with plain
/// scalar loops: the quadratic formulation the factored path must agree with.
pub fn oracle_pairwise<T: Scalar>(
    model: &BiencoderModel<T>,
    notes: &[ClinicalNote],
    profiles: &[PatientProfile],
) -> Vec<Vec<T>> {
    let dim = model.dim();
    let embed = |params: &EncoderParams<T>, feats: &SparseFeatures<T>| {
        let mut out = vec![T::zero(); dim];
        let mut column = vec![T::zero(); dim];
        for (col, w) in feats.iter() {
            params.column_into(col, &mut column);
            for r in 0..dim {
                out[r] += column[r] * w;
            }
        }
        out
    };
    let profile_vecs: Vec<Vec<T>> =
        profiles.iter().map(|p| embed(&model.profile_encoder, &model.profile_features(p))).collect();
    notes
        .iter()
        .map(|note| {
            let u = embed(&model.note_encoder, &model.note_features(note));
            let logits: Vec<T> = profile_vecs
                .iter()
                .map(|v| {
                    let mut s = T::zero();
                    for r in 0..dim {
                        s += u[r] * v[r];
                    }
                    s
                })
                .collect();
            let mut max = T::neg_infinity();
            for &l in &logits {
                if l > max {
                    max = l;
                }
            }
            let mut z = T::zero();
            for &l in &logits {
                z += (l - max).exp();
            }
            logits.iter().map(|&l| (l - max).exp() / z).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

const MAGIC: &[u8] = b"REIDMODEL1\n";

fn write_encoder<T: Scalar>(out: &mut Vec<u8>, params: &EncoderParams<T>) {
    for slot in 0..params.n_slots() {
        out.extend_from_slice(&params.slot_column(slot).to_le_bytes());
    }
    for slot in 0..params.n_slots() {
        for &v in params.slot_data(slot) {
            v.write_le(out);
        }
    }
}

impl<T: Scalar> BiencoderModel<T> {
    /// Serializes the model: a text header followed by the stored columns of
    /// each encoder. Unstored columns are implied by the init seed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let f = &self.featurizer;
        let header = format!(
            "scalar={}\nhash_version={}\nhash_space={}\nngram_min={}\nngram_max={}\nword_unigrams={}\nprefix_tokens={}\ndim={}\ntrain_seed={}\nprofile_init_seed={}\nnote_init_seed={}\nprofile_init_scale={}\nnote_init_scale={}\nprofile_columns={}\nnote_columns={}\n\n",
            T::TAG,
            HASH_VERSION,
            f.hash_space,
            f.ngram_min,
            f.ngram_max,
            f.word_unigrams,
            f.prefix_tokens,
            self.dim(),
            self.train_seed,
            self.profile_encoder.init_seed(),
            self.note_encoder.init_seed(),
            self.profile_encoder.init_scale(),
            self.note_encoder.init_scale(),
            self.profile_encoder.n_slots(),
            self.note_encoder.n_slots(),
        );
        let mut out = Vec::from(MAGIC);
        out.extend_from_slice(header.as_bytes());
        write_encoder(&mut out, &self.profile_encoder);
        write_encoder(&mut out, &self.note_encoder);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelFileError> {
        let fmt_err = |m: &str| ModelFileError::Format(m.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| fmt_err("bad magic"))?;
        let end = rest.windows(2).position(|w| w == b"\n\n").ok_or_else(|| fmt_err("unterminated header"))?;
        let header = std::str::from_utf8(&rest[..end]).map_err(|_| fmt_err("header is not utf-8"))?;
        let mut kv = HashMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| fmt_err("header line without `=`"))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| ModelFileError::Format(format!("missing `{k}`")));
        let num = |k: &str| -> Result<u64, ModelFileError> {
            get(k)?.parse().map_err(|_| ModelFileError::Format(format!("bad value for `{k}`")))
        };
        let scalar = get("scalar")?;
        if scalar != T::TAG {
            return Err(ModelFileError::ScalarMismatch { found: scalar.into(), expected: T::TAG });
        }
        let hv = get("hash_version")?;
        if hv != HASH_VERSION {
            return Err(ModelFileError::HashVersion { found: hv.into(), expected: HASH_VERSION });
        }
        let featurizer = FeaturizerConfig {
            hash_space: num("hash_space")? as usize,
            ngram_min: num("ngram_min")? as usize,
            ngram_max: num("ngram_max")? as usize,
            word_unigrams: get("word_unigrams")? == "true",
            prefix_tokens: num("prefix_tokens")? as usize,
        };
        featurizer.validate().map_err(|e| ModelFileError::Format(e.to_string()))?;
        let dim = num("dim")? as usize;
        let mut body = &rest[end + 2..];
        let scale = |k: &str| -> Result<f64, ModelFileError> {
            get(k)?.parse().map_err(|_| ModelFileError::Format(format!("bad value for `{k}`")))
        };
        let profile_scale = scale("profile_init_scale")?;
        let note_scale = scale("note_init_scale")?;
        let mut read_encoder = |role, seed: u64, init_scale: f64, n: usize| -> Result<EncoderParams<T>, ModelFileError> {
            let need = n * 4 + n * dim * T::BYTES;
            if body.len() < need {
                return Err(fmt_err("truncated body"));
            }
            let mut params = EncoderParams::new(role, dim, featurizer.hash_space, seed, init_scale);
            let (cols, tail) = body.split_at(n * 4);
            let (vals, tail) = tail.split_at(n * dim * T::BYTES);
            for (i, c) in cols.chunks_exact(4).enumerate() {
                let col = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if col as usize >= featurizer.hash_space || params.slot(col).is_some() {
                    return Err(fmt_err("bad column index"));
                }
                let slot = params.materialize(col);
                for (k, v) in params.slot_data_mut(slot).iter_mut().enumerate() {
                    *v = T::read_le(&vals[(i * dim + k) * T::BYTES..]);
                }
            }
            body = tail;
            Ok(params)
        };
        let profile_encoder =
            read_encoder(EncoderRole::Profile, num("profile_init_seed")?, profile_scale, num("profile_columns")? as usize)?;
        let note_encoder =
            read_encoder(EncoderRole::Note, num("note_init_seed")?, note_scale, num("note_columns")? as usize)?;
        if !body.is_empty() {
            return Err(fmt_err("trailing bytes"));
        }
        Ok(Self { profile_encoder, note_encoder, featurizer, train_seed: num("train_seed")? })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelFileError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// View of a logit matrix row-major, for callers that want plain vectors.
pub fn rows_of<T: Scalar>(m: ArrayView2<'_, T>) -> Vec<Vec<T>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_matrix_by_hand() {
        // [[1,0],[0,2]] · [[1,1],[1,0]]ᵀ: row 0 = [1·1+0·1, 1·1+0·0] = [1, 1],
        // row 1 = [0·1+2·1, 0·1+2·0] = [2, 0]
        let s = score_matrix(&[vec![1.0, 0.0], vec![0.0, 2.0]], &[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(rows_of(s.view()), vec![vec![1.0, 1.0], vec![2.0, 0.0]]);
        let eye = score_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(rows_of(eye.view()), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(score_matrix(&[vec![1.0, 0.0]], &[vec![1.0]]).is_err());
    }

    #[test]
    fn posterior_values() {
        let u = posterior(&[0.0f64, 0.0, 0.0]);
        assert!(u.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
        let e = std::f64::consts::E;
        let p = posterior(&[1.0f64, 0.0, 0.0]);
        let want = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.5761).abs() < 1e-4 && (p[1] - 0.2119).abs() < 1e-4);
        let shifted = posterior(&[101.0f64, 100.0, 100.0]);
        for (a, b) in p.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        let big = posterior(&[1000.0f64, 0.0]);
        assert!(big[0].is_finite() && (big.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batches_fold_trailing_singleton() {
        let order: Vec<usize> = (0..7).collect();
        let b = make_batches(&order, 3);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![3, 4]);
        let b = make_batches(&order, 5);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![5, 2]);
    }

    #[test]
    fn zero_feature_batch_has_zero_gradient() {
        let cfg = FeaturizerConfig { hash_space: 1 << 10, ..Default::default() };
        let model: BiencoderModel<f64> = BiencoderModel::new(cfg, 8, 1, 1.0);
        let empty = SparseFeatures::empty();
        let xs = vec![&empty, &empty, &empty];
        let g = batch_gradients(&model, &xs, &xs, 1.0, &[EncoderRole::Note, EncoderRole::Profile]).unwrap();
        assert!(g.note_grad.unwrap().columns.is_empty());
        assert!(g.profile_grad.unwrap().columns.is_empty());
        assert!((g.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn model_bytes_roundtrip() {
        let cfg = FeaturizerConfig { hash_space: 1 << 10, ..Default::default() };
        let mut model: BiencoderModel<f32> = BiencoderModel::new(cfg, 4, 9, 0.1);
        model.note_encoder.set_entry(2, 77, 0.125);
        model.profile_encoder.materialize(5);
        let bytes = model.to_bytes();
        let back = BiencoderModel::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            BiencoderModel::<f64>::from_bytes(&bytes),
            Err(ModelFileError::ScalarMismatch { .. })
        ));
        assert!(BiencoderModel::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn top_k_counting() {
        let mk = |r: usize| RetrievalResult::<f64> {
            note_id: String::new(),
            true_patient_id: String::new(),
            ranked: vec![],
            rank_of_true: Some(r),
        };
        let results = vec![mk(1), mk(1), mk(1), mk(3)];
        assert_eq!(top_k_from_results(&results, 1), 0.75);
        assert_eq!(top_k_from_results(&results, 3), 1.0);
    }
}
