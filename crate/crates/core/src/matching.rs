//! Normalized, token-aligned matching of profile values against note text.
//!
//! Shared by note relevancy scoring and the leakage audit so that "present in
//! the note" means the same thing everywhere.

use crate::corpus::{FieldName, PatientProfile};
use crate::encoder::{tokenize, MASK_TOKEN};

/// A token after case folding, with its index in the raw token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct NormToken {
    pub index: usize,
    pub text: String,
}

fn is_punctuation_only(tok: &str) -> bool {
    tok.chars().all(|c| !c.is_alphanumeric())
}

/// Case-folds tokens and drops pure-punctuation tokens. The mask token is
/// kept as an opaque barrier so values never match across a masked position.
pub(crate) fn normalize_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<NormToken> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(index, t)| {
            let t = t.as_ref();
            if t == MASK_TOKEN {
                Some(NormToken { index, text: MASK_TOKEN.to_string() })
            } else if is_punctuation_only(t) {
                None
            } else {
                Some(NormToken { index, text: t.to_lowercase() })
            }
        })
        .collect()
}

/// Normalized token sequence of a single value string.
pub(crate) fn normalize_value(value: &str) -> Vec<String> {
    normalize_tokens(&tokenize(value)).into_iter().map(|t| t.text).collect()
}

/// Raw-token index range `[start, end)` of the first occurrence of `needle`
/// in `hay`, if any.
pub(crate) fn find_occurrence(hay: &[NormToken], needle: &[String]) -> Option<(usize, usize)> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len())
        .find(|w| w.iter().zip(needle).all(|(h, n)| h.text == *n))
        .map(|w| (w[0].index, w[w.len() - 1].index + 1))
}

/// For each populated field, the first value variant found in `hay` together
/// with the raw-token range it occupies.
pub(crate) fn field_occurrences(
    hay: &[NormToken],
    profile: &PatientProfile,
) -> Vec<(FieldName, String, (usize, usize))> {
    let mut out = Vec::new();
    for field in FieldName::ALL {
        for variant in profile.field_variants(field) {
            let needle = normalize_value(&variant);
            if let Some(range) = find_occurrence(hay, &needle) {
                out.push((field, variant, range));
                break;
            }
        }
    }
    out
}
