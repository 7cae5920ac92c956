use std::collections::BTreeSet;

use proptest::prelude::*;
use reid_audit::corpus::{generate_population, Corpus, GeneratorConfig};
use reid_audit::deid::{mask, tag_all, tag_rule, tag_scored, Lexicons, MaskOrder};
use reid_audit::encoder::{tokenize, MASK_TOKEN};

fn corpus() -> &'static Corpus {
    static C: std::sync::OnceLock<Corpus> = std::sync::OnceLock::new();
    C.get_or_init(|| generate_population(60, 2, &GeneratorConfig::default(), 11).unwrap())
}

fn lexicons() -> &'static Lexicons {
    static L: std::sync::OnceLock<Lexicons> = std::sync::OnceLock::new();
    L.get_or_init(Lexicons::builtin)
}

fn order() -> impl Strategy<Value = MaskOrder> {
    prop_oneof![Just(MaskOrder::ConfidenceDesc), Just(MaskOrder::Random)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn masks_are_nested_in_fraction(idx in 0usize..120, a in 0.0f64..=1.0, b in 0.0f64..=1.0, order in order(), seed in any::<u64>()) {
        let note = &corpus().notes[idx];
        let spans = tag_scored(note, lexicons());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m1 = mask(note, &spans, lo, order, seed).unwrap();
        let m2 = mask(note, &spans, hi, order, seed).unwrap();
        let s1: BTreeSet<usize> = m1.masked_token_indices.iter().copied().collect();
        let s2: BTreeSet<usize> = m2.masked_token_indices.iter().copied().collect();
        prop_assert!(s1.is_subset(&s2));
    }

    #[test]
    fn masking_preserves_tokens_and_budget(idx in 0usize..120, f in 0.0f64..=1.0, order in order(), seed in any::<u64>()) {
        let note = &corpus().notes[idx];
        let spans = tag_scored(note, lexicons());
        let m = mask(note, &spans, f, order, seed).unwrap();
        let original = note.tokens();
        let masked = tokenize(&m.masked_text);
        let n = original.len();
        prop_assert_eq!(masked.len(), n);
        prop_assert_eq!(m.token_count, n);
        let set: BTreeSet<usize> = m.masked_token_indices.iter().copied().collect();
        prop_assert!(m.masked_token_indices.windows(2).all(|w| w[0] < w[1]));
        for (i, (o, t)) in original.iter().zip(&masked).enumerate() {
            if set.contains(&i) {
                prop_assert_eq!(t, MASK_TOKEN);
            } else {
                prop_assert_eq!(t, o);
            }
        }
        let span_tokens: BTreeSet<usize> = spans.iter().flat_map(|s| s.token_start..s.token_end).collect();
        prop_assert!(set.is_subset(&span_tokens));
        let budget = (f * n as f64).round() as usize;
        prop_assert_eq!(set.len(), budget.min(span_tokens.len()));
        prop_assert!((m.achieved_fraction - set.len() as f64 / n as f64).abs() < 1e-15);
        prop_assert!(m.achieved_fraction <= f + 1.0 / n as f64 + 1e-12);
    }

    #[test]
    fn random_order_is_deterministic_per_seed(idx in 0usize..120, f in 0.0f64..=1.0, seed in any::<u64>()) {
        let note = &corpus().notes[idx];
        let spans = tag_rule(note, lexicons());
        prop_assert_eq!(
            mask(note, &spans, f, MaskOrder::Random, seed).unwrap(),
            mask(note, &spans, f, MaskOrder::Random, seed).unwrap()
        );
    }
}

#[test]
fn scored_and_rule_taggers_find_the_same_spans() {
    for note in &corpus().notes {
        let key = |s: &reid_audit::deid::PhiSpan| (s.token_start, s.token_end, s.category);
        let rule: BTreeSet<_> = tag_rule(note, lexicons()).iter().map(key).collect();
        let scored = tag_scored(note, lexicons());
        let scored_set: BTreeSet<_> = scored.iter().map(key).collect();
        assert_eq!(rule, scored_set, "note {}", note.note_id);
        assert!(scored.iter().all(|s| s.confidence.is_some_and(|c| (0.0..=1.0).contains(&c))));
    }
}

#[test]
fn spans_are_in_bounds_and_disjoint() {
    for note in &corpus().notes {
        let n = note.tokens().len();
        let mut spans = tag_rule(note, lexicons());
        spans.sort_by_key(|s| s.token_start);
        for s in &spans {
            assert!(s.token_start < s.token_end && s.token_end <= n);
        }
        for w in spans.windows(2) {
            assert!(w[0].token_end <= w[1].token_start, "overlap in {}", note.note_id);
        }
    }
}

#[test]
fn rule_tagger_requires_no_confidence_only_for_random_order() {
    let note = &corpus().notes[0];
    let spans = tag_rule(note, lexicons());
    assert!(mask(note, &spans, 0.1, MaskOrder::Random, 1).is_ok());
    if !spans.is_empty() {
        assert!(mask(note, &spans, 0.1, MaskOrder::ConfidenceDesc, 1).is_err());
    }
}

#[test]
fn masking_every_token_leaves_only_mask_tokens() {
    for note in corpus().notes.iter().take(20) {
        let m = mask(note, &tag_all(note), 1.0, MaskOrder::Random, 3).unwrap();
        assert!(tokenize(&m.masked_text).iter().all(|t| t == MASK_TOKEN));
        assert_eq!(m.achieved_fraction, 1.0);
    }
}
