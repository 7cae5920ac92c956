//! Rule-based PHI tagging and token masking.
//!
//! Two taggers share one detector: [`tag_rule`] returns bare spans and
//! [`tag_scored`] attaches a per-category confidence so masking can proceed
//! from most to least likely PHI.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ClinicalNote;
use crate::encoder::{stable_hash, token_spans, MASK_TOKEN};

#[derive(Debug, Error)]
pub enum DeidError {
    #[error("requested fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("confidence ordering requires every span to carry a confidence")]
    MissingConfidence,
    #[error("span [{start}, {end}) invalid for a note of {tokens} tokens")]
    BadSpan { start: usize, end: usize, tokens: usize },
    #[error("io error reading lexicon: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PhiCategory {
    Mrn,
    Date,
    Phone,
    Zip,
    Name,
    Address,
    City,
    State,
    Other,
}

impl PhiCategory {
    pub const ALL: [PhiCategory; 9] = [
        PhiCategory::Mrn,
        PhiCategory::Date,
        PhiCategory::Phone,
        PhiCategory::Zip,
        PhiCategory::Name,
        PhiCategory::Address,
        PhiCategory::City,
        PhiCategory::State,
        PhiCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PhiCategory::Mrn => "MRN",
            PhiCategory::Date => "DATE",
            PhiCategory::Phone => "PHONE",
            PhiCategory::Zip => "ZIP",
            PhiCategory::Name => "NAME",
            PhiCategory::Address => "ADDRESS",
            PhiCategory::City => "CITY",
            PhiCategory::State => "STATE",
            PhiCategory::Other => "OTHER",
        }
    }
}

impl fmt::Display for PhiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhiCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PhiCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown PHI category `{s}`"))
    }
}

/// Tagged token range `[token_start, token_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiSpan {
    pub token_start: usize,
    pub token_end: usize,
    pub category: PhiCategory,
    pub confidence: Option<f64>,
}

impl PhiSpan {
    pub fn new(token_start: usize, token_end: usize, category: PhiCategory) -> Self {
        Self { token_start, token_end, category, confidence: None }
    }

    pub fn len(&self) -> usize {
        self.token_end - self.token_start
    }

    pub fn is_empty(&self) -> bool {
        self.token_end <= self.token_start
    }
}

/// Case-insensitive term lists. Construction removes blocklisted terms from
/// the allowlist.
#[derive(Debug, Clone, Default)]
pub struct Lexicons {
    blocklist: HashSet<String>,
    allowlist: HashSet<String>,
}

const DEFAULT_ALLOWLIST: &str = include_str!("../data/allowlist.txt");
const DEFAULT_BLOCKLIST: &str = include_str!("../data/blocklist.txt");

fn parse_terms(text: &str) -> HashSet<String> {
    text.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty()).collect()
}

impl Lexicons {
    pub fn new<I, J, S, T>(blocklist: I, allowlist: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let blocklist: HashSet<String> = blocklist.into_iter().map(|s| s.as_ref().trim().to_lowercase()).collect();
        let mut allowlist: HashSet<String> =
            allowlist.into_iter().map(|s| s.as_ref().trim().to_lowercase()).collect();
        let mut conflicts: Vec<&String> = blocklist.iter().filter(|t| allowlist.contains(*t)).collect();
        conflicts.sort();
        for term in conflicts {
            warn!("lexicon term `{term}` is in both lists; keeping it blocklisted");
            allowlist.remove(term);
        }
        Self { blocklist, allowlist }
    }

    pub fn from_files(blocklist: impl AsRef<Path>, allowlist: impl AsRef<Path>) -> Result<Self, DeidError> {
        let block = std::fs::read_to_string(blocklist)?;
        let allow = std::fs::read_to_string(allowlist)?;
        Ok(Self::new(parse_terms(&block), parse_terms(&allow)))
    }

    /// Lexicons shipped with the crate, matched to the synthetic generator.
    pub fn builtin() -> Self {
        Self::new(parse_terms(DEFAULT_BLOCKLIST), parse_terms(DEFAULT_ALLOWLIST))
    }

    pub fn is_blocked(&self, token: &str) -> bool {
        self.blocklist.contains(&token.to_lowercase())
    }

    pub fn is_allowed(&self, token: &str) -> bool {
        self.allowlist.contains(&token.to_lowercase())
    }
}

static DATE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{4}-\d{1,2}-\d{1,2}|\d{1,2}/\d{1,2}/(\d{2}|\d{4}))$").expect("regex"));
static TIME_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{1,2}:\d{2}(:\d{2})?$").expect("regex"));
static PHONE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{3}-\d{3}-\d{4}$").expect("regex"));
static PHONE_TAIL_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{3}-\d{4}$").expect("regex"));
static AREA_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{3}$").expect("regex"));
static ZIP_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{5}(-\d{4})?$").expect("regex"));
static MRN_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{6,}$").expect("regex"));
static HOUSE_NUMBER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{1,5}[A-Za-z]?$").expect("regex"));

const STREET_SUFFIXES: &[&str] = &[
    "ave", "avenue", "st", "street", "rd", "road", "blvd", "boulevard", "ln", "lane", "dr", "drive",
    "pl", "place", "ct", "court", "way", "ter", "terrace", "pkwy", "parkway", "hwy",
];
const UNIT_WORDS: &[&str] = &["apt", "apartment", "unit", "suite", "ste"];
const STATE_CODES: &[&str] = &[
    "AL", "AK", "AZ", "AR", "CA", "CO", "CT", "DE", "DC", "FL", "GA", "HI", "ID", "IL", "IN", "IA",
    "KS", "KY", "LA", "ME", "MD", "MA", "MI", "MN", "MS", "MO", "MT", "NE", "NV", "NH", "NJ", "NM",
    "NY", "NC", "ND", "OH", "OK", "OR", "PA", "RI", "SC", "SD", "TN", "TX", "UT", "VT", "VA", "WA",
    "WV", "WI", "WY",
];

fn is_capitalized(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_uppercase)
}

fn is_word(tok: &str) -> bool {
    tok.chars().all(char::is_alphabetic) && !tok.is_empty()
}

struct SpanBuilder {
    owner: Vec<bool>,
    spans: Vec<PhiSpan>,
}

impl SpanBuilder {
    fn new(n: usize) -> Self {
        Self { owner: vec![false; n], spans: Vec::new() }
    }

    fn free(&self, start: usize, end: usize) -> bool {
        !self.owner[start..end].iter().any(|&o| o)
    }

    /// Claims `[start, end)` unless an earlier rule already owns a token.
    fn claim(&mut self, start: usize, end: usize, category: PhiCategory) -> bool {
        if start >= end || end > self.owner.len() || !self.free(start, end) {
            return false;
        }
        self.owner[start..end].iter_mut().for_each(|o| *o = true);
        self.spans.push(PhiSpan::new(start, end, category));
        true
    }
}

/// Detects PHI spans with pattern rules, then the blocklist, then the
/// capitalized-token safety net. Earlier rules win overlaps. Returned spans
/// are sorted by position and carry no confidence.
pub fn tag_rule(note: &ClinicalNote, lexicons: &Lexicons) -> Vec<PhiSpan> {
    tag_tokens(note.tokens(), lexicons)
}

pub fn tag_tokens<S: AsRef<str>>(tokens: &[S], lexicons: &Lexicons) -> Vec<PhiSpan> {
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let n = toks.len();
    let mut b = SpanBuilder::new(n);

    // dates, with an optional trailing clock time
    for i in 0..n {
        if DATE_RE.is_match(toks[i]) {
            let mut end = i + 1;
            if end < n && TIME_RE.is_match(toks[end]) {
                end += 1;
                if end < n && matches!(toks[end], "AM" | "PM" | "am" | "pm") {
                    end += 1;
                }
            }
            b.claim(i, end, PhiCategory::Date);
        }
    }
    // phones: 212-555-0100 or (212)555-0100
    for i in 0..n {
        if PHONE_RE.is_match(toks[i]) {
            b.claim(i, i + 1, PhiCategory::Phone);
        } else if i + 3 < n
            && toks[i] == "("
            && AREA_RE.is_match(toks[i + 1])
            && toks[i + 2] == ")"
            && PHONE_TAIL_RE.is_match(toks[i + 3])
        {
            b.claim(i, i + 4, PhiCategory::Phone);
        }
    }
    for i in 0..n {
        if ZIP_RE.is_match(toks[i]) {
            b.claim(i, i + 1, PhiCategory::Zip);
        }
    }
    for i in 0..n {
        if MRN_RE.is_match(toks[i]) {
            b.claim(i, i + 1, PhiCategory::Mrn);
        }
    }
    // street addresses: house number, up to three words, suffix keyword
    for i in 0..n {
        if !HOUSE_NUMBER_RE.is_match(toks[i]) {
            continue;
        }
        for j in i + 2..(i + 5).min(n) {
            if !is_word(toks[j - 1]) {
                break;
            }
            if STREET_SUFFIXES.contains(&toks[j].to_lowercase().as_str()) {
                b.claim(i, j + 1, PhiCategory::Address);
                break;
            }
        }
    }
    // unit designators: APT 43D
    for i in 0..n.saturating_sub(1) {
        if UNIT_WORDS.contains(&toks[i].to_lowercase().as_str())
            && toks[i + 1].chars().any(|c| c.is_ascii_digit())
            && toks[i + 1].chars().all(char::is_alphanumeric)
        {
            b.claim(i, i + 2, PhiCategory::Address);
        }
    }
    // state codes in address context, then the city words before them
    let mut states = Vec::new();
    for i in 0..n {
        if !STATE_CODES.contains(&toks[i]) {
            continue;
        }
        let after_sep = i > 0 && matches!(toks[i - 1], "," | ":");
        let before_zip = i + 1 < n && ZIP_RE.is_match(toks[i + 1]);
        if (after_sep || before_zip) && b.claim(i, i + 1, PhiCategory::State) {
            states.push(i);
        }
    }
    for &s in &states {
        if s < 2 || toks[s - 1] != "," {
            continue;
        }
        let end = s - 1;
        let mut start = end;
        while start > 0
            && end - start < 3
            && is_capitalized(toks[start - 1])
            && is_word(toks[start - 1])
            && !lexicons.is_allowed(toks[start - 1])
        {
            start -= 1;
        }
        if start < end {
            b.claim(start, end, PhiCategory::City);
        }
    }
    for i in 0..n {
        if lexicons.is_blocked(toks[i]) {
            b.claim(i, i + 1, PhiCategory::Name);
        }
    }
    for i in 0..n {
        if is_capitalized(toks[i]) && !lexicons.is_allowed(toks[i]) {
            b.claim(i, i + 1, PhiCategory::Other);
        }
    }

    let mut spans = b.spans;
    spans.sort_by_key(|s| s.token_start);
    // adjacent word-level spans of one category form a single maximal span
    let mut merged: Vec<PhiSpan> = Vec::with_capacity(spans.len());
    for s in spans {
        match merged.last_mut() {
            Some(last)
                if last.token_end == s.token_start
                    && last.category == s.category
                    && matches!(s.category, PhiCategory::Name | PhiCategory::Other) =>
            {
                last.token_end = s.token_end;
            }
            _ => merged.push(s),
        }
    }
    merged
}

/// Fixed per-category confidences standing in for a learned tagger's scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTable {
    values: [f64; 9],
}

impl Default for ConfidenceTable {
    fn default() -> Self {
        Self { values: [0.99, 0.95, 0.92, 0.90, 0.85, 0.80, 0.70, 0.60, 0.40] }
    }
}

impl ConfidenceTable {
    pub fn get(&self, category: PhiCategory) -> f64 {
        self.values[category as usize]
    }

    pub fn set(&mut self, category: PhiCategory, value: f64) -> Result<(), String> {
        if !(0.0..=1.0).contains(&value) {
            return Err(format!("confidence {value} for {category} outside [0, 1]"));
        }
        self.values[category as usize] = value;
        Ok(())
    }
}

/// Same spans as [`tag_rule`] with table confidences, ordered by descending
/// confidence and then by position.
pub fn tag_scored(note: &ClinicalNote, lexicons: &Lexicons) -> Vec<PhiSpan> {
    tag_scored_with(note, lexicons, &ConfidenceTable::default())
}

pub fn tag_scored_with(note: &ClinicalNote, lexicons: &Lexicons, table: &ConfidenceTable) -> Vec<PhiSpan> {
    let mut spans: Vec<PhiSpan> = tag_rule(note, lexicons)
        .into_iter()
        .map(|s| PhiSpan { confidence: Some(table.get(s.category)), ..s })
        .collect();
    spans.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.token_start.cmp(&b.token_start))
    });
    spans
}

/// One single-token span per token, confidence 1. Masking with these spans
/// at fraction 1 blanks the whole note.
pub fn tag_all(note: &ClinicalNote) -> Vec<PhiSpan> {
    (0..note.tokens().len())
        .map(|i| PhiSpan { confidence: Some(1.0), ..PhiSpan::new(i, i + 1, PhiCategory::Other) })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrder {
    ConfidenceDesc,
    Random,
}

impl FromStr for MaskOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "confidence_desc" => Ok(MaskOrder::ConfidenceDesc),
            "random" => Ok(MaskOrder::Random),
            _ => Err(format!("unknown mask order `{s}` (expected confidence_desc or random)")),
        }
    }
}

impl fmt::Display for MaskOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskOrder::ConfidenceDesc => "confidence_desc",
            MaskOrder::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedNote {
    pub note_id: String,
    pub patient_id: String,
    pub masked_text: String,
    pub masked_token_indices: Vec<usize>,
    pub token_count: usize,
    pub requested_fraction: f64,
    pub achieved_fraction: f64,
}

impl MaskedNote {
    /// The masked text as a note, for featurization and auditing.
    pub fn to_note(&self) -> ClinicalNote {
        ClinicalNote::new(self.note_id.clone(), self.patient_id.clone(), self.masked_text.clone())
    }
}

pub fn achieved_fraction(masked: &MaskedNote) -> f64 {
    if masked.token_count == 0 {
        0.0
    } else {
        masked.masked_token_indices.len() as f64 / masked.token_count as f64
    }
}

/// Order in which span tokens are consumed by the masking budget.
fn masking_order(note: &ClinicalNote, spans: &[PhiSpan], order: MaskOrder, seed: u64) -> Result<Vec<usize>, DeidError> {
    let n = note.tokens().len();
    let mut best: Vec<Option<f64>> = vec![None; n];
    let mut covered = BTreeSet::new();
    for s in spans {
        if s.token_start >= s.token_end || s.token_end > n {
            return Err(DeidError::BadSpan { start: s.token_start, end: s.token_end, tokens: n });
        }
        if order == MaskOrder::ConfidenceDesc && s.confidence.is_none() {
            return Err(DeidError::MissingConfidence);
        }
        for i in s.token_start..s.token_end {
            covered.insert(i);
            if let Some(c) = s.confidence {
                best[i] = Some(best[i].map_or(c, |b: f64| b.max(c)));
            }
        }
    }
    let mut tokens: Vec<usize> = covered.into_iter().collect();
    match order {
        MaskOrder::ConfidenceDesc => {
            tokens.sort_by(|&a, &b| {
                best[b]
                    .partial_cmp(&best[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
        }
        MaskOrder::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&note.note_id));
            tokens.shuffle(&mut rng);
        }
    }
    Ok(tokens)
}

/// Masks span tokens up to `round(requested_fraction × token_count)` tokens.
///
/// The token order depends only on the spans, the order and the seed, so
/// masks at increasing fractions are nested.
pub fn mask(
    note: &ClinicalNote,
    spans: &[PhiSpan],
    requested_fraction: f64,
    order: MaskOrder,
    seed: u64,
) -> Result<MaskedNote, DeidError> {
    if !(0.0..=1.0).contains(&requested_fraction) {
        return Err(DeidError::BadFraction(requested_fraction));
    }
    let n = note.tokens().len();
    let ordered = masking_order(note, spans, order, seed)?;
    let budget = (requested_fraction * n as f64).round() as usize;
    let mut indices: Vec<usize> = ordered.into_iter().take(budget).collect();
    indices.sort_unstable();

    let text = note.text();
    let mut masked_text = String::with_capacity(text.len());
    let mut cursor = 0;
    let mut next = indices.iter().peekable();
    for (i, (start, end)) in token_spans(text).into_iter().enumerate() {
        if next.next_if(|&&m| m == i).is_some() {
            masked_text.push_str(&text[cursor..start]);
            masked_text.push_str(MASK_TOKEN);
            cursor = end;
        }
    }
    masked_text.push_str(&text[cursor..]);

    let achieved = if n == 0 { 0.0 } else { indices.len() as f64 / n as f64 };
    Ok(MaskedNote {
        note_id: note.note_id.clone(),
        patient_id: note.patient_id.clone(),
        masked_text,
        masked_token_indices: indices,
        token_count: n,
        requested_fraction,
        achieved_fraction: achieved,
    })
}

/// One JSON object per span for debugging tagger output.
pub fn span_dump_line(note_id: &str, span: &PhiSpan) -> String {
    serde_json::json!({
        "note_id": note_id,
        "token_start": span.token_start,
        "token_end": span.token_end,
        "category": span.category.as_str(),
        "confidence": span.confidence,
    })
    .to_string()
}
