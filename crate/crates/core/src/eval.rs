//! Masking curves, threshold search, error-quadrant audits and linkage
//! baselines.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{
    select_note_per_patient, split_corpus, ClinicalNote, Corpus, CorpusError, FieldName, PatientProfile,
    SplitAssignment,
};
use crate::deid::{mask, tag_all, tag_rule, tag_scored, DeidError, Lexicons, MaskOrder, MaskedNote, PhiSpan};
use crate::encoder::{stable_hash, tokenize, EncodeError, FeaturizerConfig};
use crate::matching::{field_occurrences, normalize_tokens, normalize_value};
use crate::reid::{rank_all, top_k_from_results, train, BiencoderModel, RetrievalResult, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fraction list is empty")]
    NoFractions,
    #[error("fractions must lie in [0, 1] and be sorted ascending, got {0:?}")]
    BadFractions(Vec<f64>),
    #[error("cuts must satisfy 0 <= low < high <= 1, got low={low}, high={high}")]
    BadCuts { low: f64, high: f64 },
    #[error("target must lie in (0, 1], got {0}")]
    BadTarget(f64),
    #[error("grid needs 0 <= lo < hi <= 1 and resolution > 0, got lo={lo}, hi={hi}, resolution={resolution}")]
    BadGrid { lo: f64, hi: f64, resolution: f64 },
    #[error("field subset is empty")]
    EmptyFieldSubset,
    #[error("profile list is empty")]
    NoProfiles,
    #[error("{results} retrieval results but {notes} masked notes")]
    LengthMismatch { results: usize, notes: usize },
    #[error("result for note `{result}` is paired with masked note `{note}`")]
    NotePairing { result: String, note: String },
    #[error("no profile for patient `{0}`")]
    UnknownPatient(String),
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error("worker thread panicked")]
    Worker,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Deid(#[from] DeidError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Span source for masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tagger {
    /// Pattern and lexicon rules without confidences.
    Rule,
    /// Same spans as `Rule` with category confidences.
    Scored,
    /// Every token is a span; used for the perfect-masking limit.
    AllTokens,
}

impl Tagger {
    pub fn spans(self, note: &ClinicalNote, lexicons: &Lexicons) -> Vec<PhiSpan> {
        match self {
            Tagger::Rule => tag_rule(note, lexicons),
            Tagger::Scored => tag_scored(note, lexicons),
            Tagger::AllTokens => tag_all(note),
        }
    }
}

impl FromStr for Tagger {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rule" => Ok(Tagger::Rule),
            "scored" => Ok(Tagger::Scored),
            "all" => Ok(Tagger::AllTokens),
            _ => Err(format!("unknown tagger `{s}` (expected rule, scored or all)")),
        }
    }
}

impl fmt::Display for Tagger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tagger::Rule => "rule",
            Tagger::Scored => "scored",
            Tagger::AllTokens => "all",
        })
    }
}

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.0, 0.05, 0.10, 0.15, 0.20];
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Everything a curve point depends on besides the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveConfig {
    pub tagger: Tagger,
    pub order: MaskOrder,
    pub featurizer: FeaturizerConfig,
    pub train: TrainConfig,
    pub split_ratios: [f64; 3],
    /// Seeds masking directly and each point's training run via [`point_seed`].
    pub seed: u64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            tagger: Tagger::Scored,
            order: MaskOrder::ConfidenceDesc,
            featurizer: FeaturizerConfig::default(),
            train: TrainConfig::default(),
            split_ratios: crate::corpus::DEFAULT_SPLIT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub requested_fraction: f64,
    pub mean_achieved_fraction: f64,
    pub top1: f64,
    /// Accuracy for k ∈ {1, 5, 10}.
    pub topk: BTreeMap<usize, f64>,
    /// Training seed of this point.
    pub seed: u64,
}

/// Training seed for one curve point, a pure function of the base seed and
/// the fraction so that points can be computed in any order.
pub fn point_seed(base: u64, fraction: f64) -> u64 {
    stable_hash(&format!("curve:{base}:{:016x}", fraction.to_bits()))
}

/// Selected notes of each split, their tagger spans, and the test database.
/// Selection runs on unmasked text; masking happens per curve point.
#[derive(Debug, Clone)]
pub struct PreparedSplits {
    pub split: SplitAssignment,
    pub train_notes: Vec<ClinicalNote>,
    pub test_notes: Vec<ClinicalNote>,
    pub train_spans: Vec<Vec<PhiSpan>>,
    pub test_spans: Vec<Vec<PhiSpan>>,
    pub profiles: Vec<PatientProfile>,
    pub test_profiles: Vec<PatientProfile>,
}

/// Selects one note per patient, splits patients with the corpus seed and
/// tags every selected note.
pub fn prepare(corpus: &Corpus, cfg: &CurveConfig, lexicons: &Lexicons) -> Result<PreparedSplits, EvalError> {
    let selected = select_note_per_patient(corpus, cfg.featurizer.prefix_tokens);
    let split = split_corpus(corpus, cfg.split_ratios, corpus.seed)?;
    let notes = corpus.note_map();
    let pick = |ids: &std::collections::BTreeSet<String>| -> Vec<ClinicalNote> {
        ids.iter().filter_map(|p| selected.get(p)).map(|n| notes[n.as_str()].clone()).collect()
    };
    let train_notes = pick(&split.train);
    let test_notes = pick(&split.test);
    if train_notes.is_empty() {
        return Err(EvalError::EmptySplit("train"));
    }
    if test_notes.is_empty() {
        return Err(EvalError::EmptySplit("test"));
    }
    let train_spans = train_notes.iter().map(|n| cfg.tagger.spans(n, lexicons)).collect();
    let test_spans = test_notes.iter().map(|n| cfg.tagger.spans(n, lexicons)).collect();
    let test_profiles = corpus.profiles.iter().filter(|p| split.test.contains(&p.patient_id)).cloned().collect();
    Ok(PreparedSplits {
        split,
        train_notes,
        test_notes,
        train_spans,
        test_spans,
        profiles: corpus.profiles.clone(),
        test_profiles,
    })
}

/// Full output of one curve point.
#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub point: CurvePoint,
    pub model: BiencoderModel<f64>,
    pub results: Vec<RetrievalResult<f64>>,
    pub masked_test: Vec<MaskedNote>,
}

fn mask_all(
    notes: &[ClinicalNote],
    spans: &[Vec<PhiSpan>],
    fraction: f64,
    order: MaskOrder,
    seed: u64,
) -> Result<Vec<MaskedNote>, DeidError> {
    notes.iter().zip(spans).map(|(n, s)| mask(n, s, fraction, order, seed)).collect()
}

/// Masks train and test notes at `fraction`, trains a fresh model on the
/// masked train split and ranks masked test notes against all test-split
/// profiles.
pub fn run_point(prep: &PreparedSplits, fraction: f64, cfg: &CurveConfig) -> Result<PointOutcome, EvalError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(EvalError::BadFractions(vec![fraction]));
    }
    let masked_train = mask_all(&prep.train_notes, &prep.train_spans, fraction, cfg.order, cfg.seed)?;
    let masked_test = mask_all(&prep.test_notes, &prep.test_spans, fraction, cfg.order, cfg.seed)?;
    let train_notes: Vec<ClinicalNote> = masked_train.iter().map(MaskedNote::to_note).collect();
    let test_notes: Vec<ClinicalNote> = masked_test.iter().map(MaskedNote::to_note).collect();

    let seed = point_seed(cfg.seed, fraction);
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let model = train::<f64>(&train_notes, &prep.profiles, &cfg.featurizer, &train_cfg)?.model;
    let db = model.index_profiles(&prep.test_profiles)?;
    let results = rank_all(&model, &test_notes, &db)?;

    let topk: BTreeMap<usize, f64> = DEFAULT_KS.iter().map(|&k| (k, top_k_from_results(&results, k))).collect();
    let mean_achieved = masked_test.iter().map(|m| m.achieved_fraction).sum::<f64>() / masked_test.len() as f64;
    let point = CurvePoint {
        requested_fraction: fraction,
        mean_achieved_fraction: mean_achieved,
        top1: topk[&1],
        topk,
        seed,
    };
    Ok(PointOutcome { point, model, results, masked_test })
}

fn check_fractions(fractions: &[f64]) -> Result<(), EvalError> {
    if fractions.is_empty() {
        return Err(EvalError::NoFractions);
    }
    let in_range = fractions.iter().all(|f| (0.0..=1.0).contains(f));
    let sorted = fractions.windows(2).all(|w| w[0] <= w[1]);
    if !in_range || !sorted {
        return Err(EvalError::BadFractions(fractions.to_vec()));
    }
    Ok(())
}

/// One curve point per fraction, each from a freshly trained model.
pub fn masking_curve(
    corpus: &Corpus,
    fractions: &[f64],
    cfg: &CurveConfig,
    lexicons: &Lexicons,
) -> Result<Vec<CurvePoint>, EvalError> {
    Ok(masking_curve_outcomes(corpus, fractions, cfg, lexicons, 1)?.into_iter().map(|o| o.point).collect())
}

/// As [`masking_curve`], keeping models and retrievals, with points spread
/// over up to `jobs` worker threads. Output order follows `fractions`.
pub fn masking_curve_outcomes(
    corpus: &Corpus,
    fractions: &[f64],
    cfg: &CurveConfig,
    lexicons: &Lexicons,
    jobs: usize,
) -> Result<Vec<PointOutcome>, EvalError> {
    check_fractions(fractions)?;
    let prep = prepare(corpus, cfg, lexicons)?;
    let jobs = jobs.clamp(1, fractions.len());
    if jobs == 1 {
        return fractions.iter().map(|&f| run_point(&prep, f, cfg)).collect();
    }
    let mut slots: Vec<Option<Result<PointOutcome, EvalError>>> = (0..fractions.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let prep = &prep;
                scope.spawn(move || {
                    (w..fractions.len())
                        .step_by(jobs)
                        .map(|i| (i, run_point(prep, fractions[i], cfg)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            match h.join() {
                Ok(done) => {
                    for (i, r) in done {
                        slots[i] = Some(r);
                    }
                }
                Err(_) => return Err(EvalError::Worker),
            }
        }
        Ok(())
    })?;
    slots.into_iter().map(|s| s.ok_or(EvalError::Worker)?).collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

// ---------------------------------------------------------------------------
// Threshold search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearch {
    /// Smallest grid fraction with accuracy ≤ target, `None` when even the
    /// top of the grid stays above it.
    pub threshold: Option<f64>,
    pub target: f64,
    pub resolution: f64,
    /// Every evaluated (fraction, accuracy), in evaluation order.
    pub evaluated: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

struct Grid {
    lo: f64,
    hi: f64,
    steps: usize,
}

impl Grid {
    fn new(lo: f64, hi: f64, resolution: f64) -> Result<Self, EvalError> {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi || !(resolution > 0.0) {
            return Err(EvalError::BadGrid { lo, hi, resolution });
        }
        let steps = ((hi - lo) / resolution - 1e-9).ceil() as usize;
        Ok(Self { lo, hi, steps })
    }

    /// Grid value `i`, rounded to 1e-10 so `0.01 × 20` prints as `0.2`.
    fn value(&self, i: usize) -> f64 {
        let v = if i >= self.steps { self.hi } else { self.lo + (self.hi - self.lo) * i as f64 / self.steps as f64 };
        (v * 1e10).round() / 1e10
    }
}

fn check_target(target: f64) -> Result<(), EvalError> {
    if target > 0.0 && target <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::BadTarget(target))
    }
}

/// Warnings for every evaluated pair whose accuracy rises with masking.
fn monotonicity_warnings(evaluated: &[(f64, f64)]) -> Vec<String> {
    let mut sorted = evaluated.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = Vec::new();
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            if b.1 > a.1 {
                out.push(format!(
                    "non-monotone: accuracy {} at fraction {} exceeds {} at fraction {}",
                    b.1, b.0, a.1, a.0
                ));
            }
        }
    }
    out
}

/// Binary search over the grid `{lo, lo + res, ..., hi}` for the smallest
/// fraction whose accuracy is at most `target`, assuming accuracy does not
/// increase with the fraction. Each grid point is evaluated at most once.
pub fn find_threshold_binary<F, E>(
    mut evaluate: F,
    target: f64,
    resolution: f64,
    lo: f64,
    hi: f64,
) -> Result<Result<ThresholdSearch, E>, EvalError>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    check_target(target)?;
    let grid = Grid::new(lo, hi, resolution)?;
    let mut evaluated: Vec<(f64, f64)> = Vec::new();
    let mut cache: HashMap<usize, f64> = HashMap::new();
    let mut at = |i: usize| -> Result<f64, E> {
        if let Some(&a) = cache.get(&i) {
            return Ok(a);
        }
        let x = grid.value(i);
        let a = evaluate(x)?;
        cache.insert(i, a);
        evaluated.push((x, a));
        Ok(a)
    };
    let found = (|| -> Result<Option<usize>, E> {
        if at(grid.steps)? > target {
            return Ok(None);
        }
        // Invariant: accuracy(h) <= target; every index below l is above it.
        let (mut l, mut h) = (0usize, grid.steps);
        while l < h {
            let mid = l + (h - l) / 2;
            if at(mid)? <= target {
                h = mid;
            } else {
                l = mid + 1;
            }
        }
        Ok(Some(l))
    })();
    Ok(found.map(|idx| ThresholdSearch {
        threshold: idx.map(|i| grid.value(i)),
        target,
        resolution,
        warnings: monotonicity_warnings(&evaluated),
        evaluated,
    }))
}

/// Evaluates grid points in ascending order and returns the first whose
/// accuracy is at most `target`. Oracle for [`find_threshold_binary`].
pub fn find_threshold_exhaustive<F, E>(
    mut evaluate: F,
    target: f64,
    resolution: f64,
    lo: f64,
    hi: f64,
) -> Result<Result<ThresholdSearch, E>, EvalError>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    check_target(target)?;
    let grid = Grid::new(lo, hi, resolution)?;
    let mut evaluated = Vec::new();
    let mut threshold = None;
    for i in 0..=grid.steps {
        let x = grid.value(i);
        let a = match evaluate(x) {
            Ok(a) => a,
            Err(e) => return Ok(Err(e)),
        };
        evaluated.push((x, a));
        if a <= target {
            threshold = Some(x);
            break;
        }
    }
    Ok(Ok(ThresholdSearch {
        threshold,
        target,
        resolution,
        warnings: monotonicity_warnings(&evaluated),
        evaluated,
    }))
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

/// Fields of `profile` whose normalized value survives as a token-aligned
/// run in `masked_text`. Masked tokens never match.
pub fn verbatim_field_hits(masked_text: &str, profile: &PatientProfile) -> Vec<(FieldName, String)> {
    let hay = normalize_tokens(&tokenize(masked_text));
    field_occurrences(&hay, profile)
        .into_iter()
        .map(|(field, variant, _)| (field, profile.field_value(field).unwrap_or(variant)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    LowIncorrect,
    LowCorrect,
    HighCorrect,
    HighIncorrect,
    Mid,
}

impl Quadrant {
    pub const ALL: [Quadrant; 5] =
        [Quadrant::LowIncorrect, Quadrant::LowCorrect, Quadrant::HighCorrect, Quadrant::HighIncorrect, Quadrant::Mid];

    pub fn as_str(self) -> &'static str {
        match self {
            Quadrant::LowIncorrect => "low_incorrect",
            Quadrant::LowCorrect => "low_correct",
            Quadrant::HighCorrect => "high_correct",
            Quadrant::HighIncorrect => "high_incorrect",
            Quadrant::Mid => "mid",
        }
    }

    /// Low when `fraction ≤ low_cut`, high when `fraction ≥ high_cut`.
    pub fn classify(fraction: f64, correct: bool, low_cut: f64, high_cut: f64) -> Self {
        match (fraction <= low_cut, fraction >= high_cut, correct) {
            (true, _, false) => Quadrant::LowIncorrect,
            (true, _, true) => Quadrant::LowCorrect,
            (_, true, true) => Quadrant::HighCorrect,
            (_, true, false) => Quadrant::HighIncorrect,
            _ => Quadrant::Mid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub note_id: String,
    pub requested_fraction: f64,
    pub achieved_fraction: f64,
    pub correct: bool,
    pub mapped_patient_id: String,
    pub mapped_probability: f64,
    pub quadrant: Quadrant,
    /// Surviving true-profile values; filled for `low_incorrect` and
    /// `high_correct` only.
    pub verbatim_hits: Vec<(FieldName, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadrantRates {
    pub notes: usize,
    pub rates: BTreeMap<Quadrant, f64>,
}

impl QuadrantRates {
    fn from_entries<'a>(entries: impl Iterator<Item = &'a AuditEntry>) -> Self {
        let mut counts: BTreeMap<Quadrant, usize> = Quadrant::ALL.iter().map(|&q| (q, 0)).collect();
        let mut n = 0;
        for e in entries {
            *counts.entry(e.quadrant).or_default() += 1;
            n += 1;
        }
        let rates = counts.into_iter().map(|(q, c)| (q, if n == 0 { 0.0 } else { c as f64 / n as f64 })).collect();
        Self { notes: n, rates }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub low_cut: f64,
    pub high_cut: f64,
    pub entries: Vec<AuditEntry>,
    pub pooled: QuadrantRates,
    /// Rates per requested fraction, keyed by the fraction's decimal text.
    pub per_fraction: BTreeMap<String, QuadrantRates>,
}

/// Classifies each masked test note by achieved fraction and correctness.
/// `results[i]` must belong to `masked[i]`; notes from several masking
/// levels may be pooled in one call.
pub fn error_report<T: crate::Scalar>(
    results: &[RetrievalResult<T>],
    masked: &[MaskedNote],
    profiles: &[PatientProfile],
    low_cut: f64,
    high_cut: f64,
) -> Result<AuditReport, EvalError> {
    if !(0.0 <= low_cut && low_cut < high_cut && high_cut <= 1.0) {
        return Err(EvalError::BadCuts { low: low_cut, high: high_cut });
    }
    if results.len() != masked.len() {
        return Err(EvalError::LengthMismatch { results: results.len(), notes: masked.len() });
    }
    let by_id: HashMap<&str, &PatientProfile> = profiles.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let mut entries = Vec::with_capacity(results.len());
    for (r, m) in results.iter().zip(masked) {
        if r.note_id != m.note_id {
            return Err(EvalError::NotePairing { result: r.note_id.clone(), note: m.note_id.clone() });
        }
        let correct = r.is_correct();
        let quadrant = Quadrant::classify(m.achieved_fraction, correct, low_cut, high_cut);
        let verbatim_hits = match quadrant {
            Quadrant::LowIncorrect | Quadrant::HighCorrect => {
                let profile = by_id
                    .get(m.patient_id.as_str())
                    .ok_or_else(|| EvalError::UnknownPatient(m.patient_id.clone()))?;
                verbatim_field_hits(&m.masked_text, profile)
            }
            _ => Vec::new(),
        };
        let (mapped_patient_id, mapped_probability) =
            r.ranked.first().map_or((String::new(), 0.0), |(id, p)| (id.clone(), p.as_f64()));
        entries.push(AuditEntry {
            note_id: m.note_id.clone(),
            requested_fraction: m.requested_fraction,
            achieved_fraction: m.achieved_fraction,
            correct,
            mapped_patient_id,
            mapped_probability,
            quadrant,
            verbatim_hits,
        });
    }
    let pooled = QuadrantRates::from_entries(entries.iter());
    let mut per_fraction = BTreeMap::new();
    let mut fractions: Vec<f64> = entries.iter().map(|e| e.requested_fraction).collect();
    fractions.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    fractions.dedup();
    for f in fractions {
        per_fraction.insert(f.to_string(), QuadrantRates::from_entries(entries.iter().filter(|e| e.requested_fraction == f)));
    }
    Ok(AuditReport { low_cut, high_cut, entries, pooled, per_fraction })
}

// ---------------------------------------------------------------------------
// Linkage
// ---------------------------------------------------------------------------

pub const LINKAGE_KS: [usize; 3] = [2, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkageResult {
    pub field_subset: Vec<FieldName>,
    /// Fraction of profiles alone in their equivalence class.
    pub uniqueness_rate: f64,
    /// For k ∈ {2, 5, 10}, fraction of profiles in classes smaller than k.
    pub k_anonymity_violations: BTreeMap<usize, f64>,
}

/// Groups profiles by their normalized values on `fields`; an absent field
/// is its own value.
pub fn linkage_uniqueness(profiles: &[PatientProfile], fields: &[FieldName]) -> Result<LinkageResult, EvalError> {
    if fields.is_empty() {
        return Err(EvalError::EmptyFieldSubset);
    }
    if profiles.is_empty() {
        return Err(EvalError::NoProfiles);
    }
    let mut classes: HashMap<Vec<Option<Vec<String>>>, usize> = HashMap::new();
    let keys: Vec<Vec<Option<Vec<String>>>> = profiles
        .iter()
        .map(|p| fields.iter().map(|&f| p.field_value(f).map(|v| normalize_value(&v))).collect())
        .collect();
    for k in &keys {
        *classes.entry(k.clone()).or_default() += 1;
    }
    let n = profiles.len() as f64;
    let sizes: Vec<usize> = keys.iter().map(|k| classes[k]).collect();
    let uniqueness_rate = sizes.iter().filter(|&&s| s == 1).count() as f64 / n;
    let k_anonymity_violations =
        LINKAGE_KS.iter().map(|&k| (k, sizes.iter().filter(|&&s| s < k).count() as f64 / n)).collect();
    Ok(LinkageResult { field_subset: fields.to_vec(), uniqueness_rate, k_anonymity_violations })
}

// ---------------------------------------------------------------------------
// Output formats
// ---------------------------------------------------------------------------

pub fn write_curve_csv<W: Write>(w: W, points: &[CurvePoint]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["requested_fraction", "mean_achieved_fraction", "top1", "top5", "top10", "seed"])?;
    for p in points {
        let k = |k: usize| p.topk.get(&k).map_or(String::new(), |v| v.to_string());
        w.write_record([
            p.requested_fraction.to_string(),
            p.mean_achieved_fraction.to_string(),
            p.top1.to_string(),
            k(5),
            k(10),
            p.seed.to_string(),
        ])?;
    }
    w.flush()
}

pub fn write_audit_jsonl<W: Write>(mut w: W, report: &AuditReport) -> std::io::Result<()> {
    for e in &report.entries {
        let hits: Vec<serde_json::Value> =
            e.verbatim_hits.iter().map(|(f, v)| serde_json::json!([f.as_str(), v])).collect();
        let line = serde_json::json!({
            "note_id": e.note_id,
            "requested_fraction": e.requested_fraction,
            "achieved_fraction": e.achieved_fraction,
            "correct": e.correct,
            "mapped_patient_id": e.mapped_patient_id,
            "mapped_probability": e.mapped_probability,
            "quadrant": e.quadrant.as_str(),
            "verbatim_hits": hits,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Quadrant rates as CSV rows `scope,notes,quadrant,rate`, pooled first.
pub fn write_audit_rates_csv<W: Write>(w: W, report: &AuditReport) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["scope", "notes", "quadrant", "rate"])?;
    let scopes = std::iter::once(("pooled".to_string(), &report.pooled))
        .chain(report.per_fraction.iter().map(|(f, r)| (format!("fraction={f}"), r)));
    for (scope, rates) in scopes {
        for (q, r) in &rates.rates {
            w.write_record([scope.clone(), rates.notes.to_string(), q.as_str().to_string(), r.to_string()])?;
        }
    }
    w.flush()
}

pub fn write_threshold_txt<W: Write>(mut w: W, search: &ThresholdSearch, mode: &str) -> std::io::Result<()> {
    match search.threshold {
        Some(t) => writeln!(w, "threshold={t}")?,
        None => writeln!(w, "threshold=not-found")?,
    }
    writeln!(w, "target={}", search.target)?;
    writeln!(w, "resolution={}", search.resolution)?;
    writeln!(w, "mode={mode}")?;
    writeln!(w, "evaluated={}", search.evaluated.len())?;
    for (f, a) in &search.evaluated {
        writeln!(w, "point fraction={f} accuracy={a}")?;
    }
    for warning in &search.warnings {
        writeln!(w, "warning {warning}")?;
    }
    Ok(())
}

pub fn write_linkage_csv<W: Write>(w: W, results: &[LinkageResult]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["field_subset", "uniqueness_rate", "violations_k2", "violations_k5", "violations_k10"])?;
    for r in results {
        let subset: Vec<&str> = r.field_subset.iter().map(|f| f.as_str()).collect();
        let v = |k: usize| r.k_anonymity_violations.get(&k).map_or(String::new(), |x| x.to_string());
        w.write_record([subset.join("+"), r.uniqueness_rate.to_string(), v(2), v(5), v(10)])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(f: f64) -> Result<f64, ()> {
        let t = [(0.0, 0.9), (0.05, 0.4), (0.10, 0.2), (0.15, 0.05), (0.20, 0.009)];
        Ok(t.iter().rev().find(|(x, _)| f + 1e-12 >= *x).map_or(0.9, |p| p.1))
    }

    #[test]
    fn threshold_table_example() {
        let b = find_threshold_binary(table, 0.01, 0.01, 0.0, 1.0).unwrap().unwrap();
        let e = find_threshold_exhaustive(table, 0.01, 0.01, 0.0, 1.0).unwrap().unwrap();
        assert_eq!(b.threshold, Some(0.2));
        assert_eq!(e.threshold, Some(0.2));
        assert!(b.evaluated.len() <= 9, "{} evaluations", b.evaluated.len());
        assert!(b.warnings.is_empty());
    }

    #[test]
    fn threshold_degenerate_cases() {
        let b = find_threshold_binary(table, 1.0, 0.01, 0.0, 1.0).unwrap().unwrap();
        assert_eq!(b.threshold, Some(0.0));
        let flat = |_: f64| Ok::<_, ()>(0.5);
        let nf = find_threshold_binary(flat, 0.01, 0.01, 0.0, 1.0).unwrap().unwrap();
        assert_eq!(nf.threshold, None);
        assert_eq!(nf.evaluated, vec![(1.0, 0.5)]);
        assert!(find_threshold_binary(flat, 0.0, 0.01, 0.0, 1.0).is_err());
        assert!(find_threshold_exhaustive(flat, 0.5, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn non_monotone_curve_is_flagged() {
        let bumpy = |f: f64| Ok::<_, ()>(if f < 0.5 { 0.3 } else if f < 0.75 { 0.05 } else { 0.08 });
        let b = find_threshold_binary(bumpy, 0.1, 0.25, 0.0, 1.0).unwrap().unwrap();
        assert!(!b.warnings.is_empty());
        assert_eq!(b.threshold, Some(0.5));
        assert!(b.warnings[0].contains("0.08"));
    }

    #[test]
    fn quadrant_cut_logic() {
        assert_eq!(Quadrant::classify(0.02, false, 0.05, 0.15), Quadrant::LowIncorrect);
        assert_eq!(Quadrant::classify(0.05, true, 0.05, 0.15), Quadrant::LowCorrect);
        assert_eq!(Quadrant::classify(0.18, true, 0.05, 0.15), Quadrant::HighCorrect);
        assert_eq!(Quadrant::classify(0.15, false, 0.05, 0.15), Quadrant::HighIncorrect);
        assert_eq!(Quadrant::classify(0.10, true, 0.05, 0.15), Quadrant::Mid);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn point_seed_depends_on_both_inputs() {
        assert_ne!(point_seed(7, 0.05), point_seed(7, 0.10));
        assert_ne!(point_seed(7, 0.05), point_seed(8, 0.05));
        assert_eq!(point_seed(7, 0.05), point_seed(7, 0.05));
    }
}
