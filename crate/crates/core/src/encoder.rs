//! Tokenization, hashed sparse featurization and linear projection encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{FieldName, PatientProfile};
use crate::scalar::Scalar;

/// The replacement written over every masked token.
pub const MASK_TOKEN: &str = "*****";

/// Identifies the hash function and n-gram scheme. Bump on any change that
/// alters feature indices.
pub const HASH_VERSION: &str = "fnv1a64-wc-v1";

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("feature index {index} out of range for hash space {hash_space}")]
    IndexOutOfRange { index: u32, hash_space: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid featurizer config: {0}")]
    BadConfig(String),
}

/// Byte ranges of the tokens of `text`.
///
/// Whitespace separates tokens. Letters and digits form runs that may
/// contain `-`, `/` or `:` between two alphanumerics, so dates, zip+4 codes
/// and clock times stay whole. Any other character is its own token, except
/// that five consecutive asterisks form one mask token.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let offset = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let mut spans = Vec::new();
    let mut i = 0;
    while i < n {
        let c = chars[i].1;
        if c.is_whitespace() {
            i += 1;
        } else if c == '*' {
            let run = chars[i..].iter().take(5).take_while(|(_, c)| *c == '*').count();
            let len = if run == 5 { 5 } else { 1 };
            spans.push((offset(i), offset(i + len)));
            i += len;
        } else if c.is_alphanumeric() {
            let mut j = i + 1;
            loop {
                if j < n && chars[j].1.is_alphanumeric() {
                    j += 1;
                } else if j + 1 < n
                    && matches!(chars[j].1, '-' | '/' | ':')
                    && chars[j + 1].1.is_alphanumeric()
                {
                    j += 2;
                } else {
                    break;
                }
            }
            spans.push((offset(i), offset(j)));
            i = j;
        } else {
            spans.push((offset(i), offset(i + 1)));
            i += 1;
        }
    }
    spans
}

pub fn tokenize(text: &str) -> Vec<String> {
    token_spans(text).into_iter().map(|(s, e)| text[s..e].to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturizerConfig {
    /// Number of hash buckets; a power of two, at least 1024.
    pub hash_space: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub word_unigrams: bool,
    pub prefix_tokens: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self { hash_space: 1 << 18, ngram_min: 3, ngram_max: 5, word_unigrams: true, prefix_tokens: 512 }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<(), EncodeError> {
        if !self.hash_space.is_power_of_two() || self.hash_space < 1 << 10 {
            return Err(EncodeError::BadConfig(format!(
                "hash_space {} must be a power of two >= 1024",
                self.hash_space
            )));
        }
        if self.hash_space > 1 << 31 {
            return Err(EncodeError::BadConfig("hash_space exceeds 2^31".into()));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(EncodeError::BadConfig(format!(
                "empty n-gram range [{}, {}]",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.prefix_tokens == 0 {
            return Err(EncodeError::BadConfig("prefix_tokens must be positive".into()));
        }
        Ok(())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn fnv1a(namespace: u8, parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in std::iter::once(&namespace).chain(parts.iter().flat_map(|p| p.iter())) {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable 64-bit hash of a string (FNV-1a). Also used to derive per-note seeds.
pub fn stable_hash(s: &str) -> u64 {
    fnv1a(0, &[s.as_bytes()])
}

/// Sorted sparse vector over hash buckets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseFeatures<T> {
    indices: Vec<u32>,
    values: Vec<T>,
}

impl<T: Scalar> SparseFeatures<T> {
    /// Builds from unsorted pairs, summing duplicates. No normalization.
    pub fn from_pairs(mut pairs: Vec<(u32, T)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let mut indices: Vec<u32> = Vec::with_capacity(pairs.len());
        let mut values: Vec<T> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            if indices.last() == Some(&i) {
                *values.last_mut().expect("parallel vectors") += v;
            } else {
                indices.push(i);
                values.push(v);
            }
        }
        Self { indices, values }
    }

    pub fn empty() -> Self {
        Self { indices: Vec::new(), values: Vec::new() }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, T)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn l2_norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let norm = self.l2_norm();
        if norm > T::zero() {
            for v in &mut self.values {
                *v /= norm;
            }
        }
        self
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Self) -> Self {
        Self::from_pairs(self.iter().chain(other.iter()).collect())
    }
}

fn bucket(hash: u64, hash_space: usize) -> u32 {
    (hash & (hash_space as u64 - 1)) as u32
}

/// Raw (unnormalized) occurrence counts of the hashed word unigrams and
/// boundary-marked character n-grams of the first `prefix_tokens` tokens.
pub fn raw_features<T: Scalar, S: AsRef<str>>(tokens: &[S], cfg: &FeaturizerConfig) -> SparseFeatures<T> {
    let mut pairs: Vec<(u32, T)> = Vec::new();
    for tok in tokens.iter().take(cfg.prefix_tokens) {
        let lower = tok.as_ref().to_lowercase();
        if cfg.word_unigrams {
            pairs.push((bucket(fnv1a(b'w', &[lower.as_bytes()]), cfg.hash_space), T::one()));
        }
        let mut marked = String::with_capacity(lower.len() + 2);
        marked.push('<');
        marked.push_str(&lower);
        marked.push('>');
        let bounds: Vec<usize> = marked.char_indices().map(|(i, _)| i).chain([marked.len()]).collect();
        let n_chars = bounds.len() - 1;
        for n in cfg.ngram_min..=cfg.ngram_max {
            if n > n_chars {
                break;
            }
            for start in 0..=n_chars - n {
                let gram = &marked.as_bytes()[bounds[start]..bounds[start + n]];
                pairs.push((bucket(fnv1a(b'c', &[gram]), cfg.hash_space), T::one()));
            }
        }
    }
    SparseFeatures::from_pairs(pairs)
}

/// L2-normalized hashed features of a token list.
pub fn featurize_text<T: Scalar, S: AsRef<str>>(tokens: &[S], cfg: &FeaturizerConfig) -> SparseFeatures<T> {
    raw_features(tokens, cfg).normalized()
}

/// Canonical text form of a profile: one `field_name: value` line per
/// populated field in schema order. The patient_id never appears.
pub fn serialize_profile(profile: &PatientProfile) -> String {
    FieldName::ALL
        .iter()
        .filter_map(|&f| profile.field_value(f).map(|v| format!("{}: {}", f.as_str(), v)))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn featurize_profile<T: Scalar>(profile: &PatientProfile, cfg: &FeaturizerConfig) -> SparseFeatures<T> {
    featurize_text(&tokenize(&serialize_profile(profile)), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderRole {
    /// Encodes patient profiles.
    Profile,
    /// Encodes (masked) notes.
    Note,
}

impl EncoderRole {
    pub fn tag(self) -> u8 {
        match self {
            EncoderRole::Profile => b'f',
            EncoderRole::Note => b'g',
        }
    }
}

const UNSET: u32 = u32::MAX;

/// A `dim × hash_space` projection matrix.
///
/// Columns start at a seeded uniform draw in `[-init_scale, init_scale]`
/// that is a pure function of `(init_seed, column)`. Only columns that have been written
/// are stored; every other column is regenerated on demand, so the matrix
/// is fully determined by the seed plus the stored columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    role: EncoderRole,
    dim: usize,
    hash_space: usize,
    init_seed: u64,
    init_scale: f64,
    slot_of: Vec<u32>,
    columns: Vec<u32>,
    data: Vec<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new(role: EncoderRole, dim: usize, hash_space: usize, init_seed: u64, init_scale: f64) -> Self {
        Self {
            role,
            dim,
            hash_space,
            init_seed,
            init_scale,
            slot_of: vec![UNSET; hash_space],
            columns: Vec::new(),
            data: Vec::new(),
        }
    }

    /// A fully materialized matrix given as `dim` rows of length `hash_space`.
    pub fn from_rows(role: EncoderRole, rows: &[Vec<T>]) -> Self {
        let dim = rows.len();
        let hash_space = rows.first().map_or(0, Vec::len);
        let mut p = Self::new(role, dim, hash_space, 0, 0.0);
        for col in 0..hash_space {
            let slot = p.materialize(col as u32);
            for (r, row) in rows.iter().enumerate() {
                p.data[slot * dim + r] = row[col];
            }
        }
        p
    }

    pub fn role(&self) -> EncoderRole {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hash_space(&self) -> usize {
        self.hash_space
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale
    }

    fn init_column_into(&self, col: u32, out: &mut [T]) {
        let scale = self.init_scale;
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        rng.set_stream(col as u64);
        for v in out.iter_mut() {
            let u: f64 = rng.gen();
            *v = T::lit((2.0 * u - 1.0) * scale);
        }
    }

    /// Copies column `col` into `out` (length `dim`).
    pub fn column_into(&self, col: u32, out: &mut [T]) {
        match self.slot(col) {
            Some(slot) => out.copy_from_slice(&self.data[slot * self.dim..(slot + 1) * self.dim]),
            None => self.init_column_into(col, out),
        }
    }

    pub fn slot(&self, col: u32) -> Option<usize> {
        match self.slot_of[col as usize] {
            UNSET => None,
            s => Some(s as usize),
        }
    }

    /// Stores column `col` explicitly (at its current value) and returns its slot.
    pub fn materialize(&mut self, col: u32) -> usize {
        if let Some(slot) = self.slot(col) {
            return slot;
        }
        let slot = self.columns.len();
        self.slot_of[col as usize] = slot as u32;
        self.columns.push(col);
        let start = self.data.len();
        self.data.resize(start + self.dim, T::zero());
        let mut buf = vec![T::zero(); self.dim];
        self.init_column_into(col, &mut buf);
        self.data[start..].copy_from_slice(&buf);
        slot
    }

    pub fn n_slots(&self) -> usize {
        self.columns.len()
    }

    pub fn slot_column(&self, slot: usize) -> u32 {
        self.columns[slot]
    }

    pub fn slot_data(&self, slot: usize) -> &[T] {
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn slot_data_mut(&mut self, slot: usize) -> &mut [T] {
        &mut self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub(crate) fn all_slot_data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Entry `(row, col)` of the projection.
    pub fn entry(&self, row: usize, col: u32) -> T {
        match self.slot(col) {
            Some(slot) => self.data[slot * self.dim + row],
            None => {
                let mut buf = vec![T::zero(); self.dim];
                self.init_column_into(col, &mut buf);
                buf[row]
            }
        }
    }

    pub fn set_entry(&mut self, row: usize, col: u32, value: T) {
        let slot = self.materialize(col);
        self.data[slot * self.dim + row] = value;
    }

    /// Dense copy as `dim` rows. Only sensible for small hash spaces.
    pub fn to_rows(&self) -> Vec<Vec<T>> {
        let mut rows = vec![vec![T::zero(); self.hash_space]; self.dim];
        let mut buf = vec![T::zero(); self.dim];
        for col in 0..self.hash_space {
            self.column_into(col as u32, &mut buf);
            for (r, row) in rows.iter_mut().enumerate() {
                row[col] = buf[r];
            }
        }
        rows
    }

    pub fn check_features(&self, features: &SparseFeatures<T>) -> Result<(), EncodeError> {
        match features.indices().last() {
            Some(&i) if i as usize >= self.hash_space => {
                Err(EncodeError::IndexOutOfRange { index: i, hash_space: self.hash_space })
            }
            _ => Ok(()),
        }
    }

    /// `projection · features`.
    pub fn encode(&self, features: &SparseFeatures<T>) -> Result<Vec<T>, EncodeError> {
        self.check_features(features)?;
        let mut out = vec![T::zero(); self.dim];
        let mut buf = vec![T::zero(); self.dim];
        for (col, w) in features.iter() {
            let column: &[T] = match self.slot(col) {
                Some(slot) => self.slot_data(slot),
                None => {
                    self.init_column_into(col, &mut buf);
                    &buf
                }
            };
            for (o, &c) in out.iter_mut().zip(column) {
                *o += w * c;
            }
        }
        Ok(out)
    }
}
