use proptest::prelude::*;
use reid_audit::corpus::{ClinicalNote, FieldName, PatientProfile};
use reid_audit::encoder::{
    featurize_profile, featurize_text, raw_features, tokenize, EncoderParams, EncoderRole, FeaturizerConfig,
    SparseFeatures, MASK_TOKEN,
};
use reid_audit::reid::BiencoderModel;
use reid_audit::scalar::dot;

fn small_cfg() -> FeaturizerConfig {
    FeaturizerConfig { hash_space: 1 << 10, ..FeaturizerConfig::default() }
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[A-Za-z0-9]{1,9}", 0..25)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_is_linear(a in words(), b in words(), seed in any::<u64>()) {
        let cfg = small_cfg();
        let p = EncoderParams::<f64>::new(EncoderRole::Note, 8, cfg.hash_space, seed, 1.0);
        let fa: SparseFeatures<f64> = raw_features(&a, &cfg);
        let fb: SparseFeatures<f64> = raw_features(&b, &cfg);
        let sum = p.encode(&fa.add(&fb)).unwrap();
        let parts: Vec<f64> = p.encode(&fa).unwrap().iter().zip(p.encode(&fb).unwrap()).map(|(x, y)| x + y).collect();
        prop_assert!(close(&sum, &parts, 1e-12));
    }

    #[test]
    fn score_is_bilinear(y in words(), a in words(), b in words(), seed in any::<u64>()) {
        let cfg = small_cfg();
        let f = EncoderParams::<f64>::new(EncoderRole::Profile, 8, cfg.hash_space, seed, 1.0);
        let g = EncoderParams::<f64>::new(EncoderRole::Note, 8, cfg.hash_space, seed ^ 1, 1.0);
        let fy = f.encode(&raw_features(&y, &cfg)).unwrap();
        let fa: SparseFeatures<f64> = raw_features(&a, &cfg);
        let fb: SparseFeatures<f64> = raw_features(&b, &cfg);
        let lhs = dot(&fy, &g.encode(&fa.add(&fb)).unwrap());
        let rhs = dot(&fy, &g.encode(&fa).unwrap()) + dot(&fy, &g.encode(&fb).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn features_are_unit_norm_sorted_and_prefix_bounded(tokens in words(), extra in words()) {
        let cfg = FeaturizerConfig { prefix_tokens: 16, ..small_cfg() };
        let f: SparseFeatures<f64> = featurize_text(&tokens, &cfg);
        if tokens.is_empty() {
            prop_assert!(f.is_empty());
        } else {
            prop_assert!((f.l2_norm() - 1.0).abs() < 1e-9);
        }
        prop_assert!(f.indices().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(f.indices().iter().all(|&i| (i as usize) < cfg.hash_space));
        let mut longer = tokens.clone();
        longer.extend(extra);
        let head = &longer[..longer.len().min(cfg.prefix_tokens)];
        prop_assert_eq!(featurize_text::<f64, _>(head, &cfg), featurize_text::<f64, _>(&longer, &cfg));
    }

    #[test]
    fn mask_token_stays_atomic(words in prop::collection::vec("[a-z]{1,6}", 1..12), masked in prop::collection::vec(any::<bool>(), 12)) {
        let original = words.join(" ");
        let replaced: Vec<&str> = words
            .iter()
            .zip(&masked)
            .map(|(w, &m)| if m { MASK_TOKEN } else { w.as_str() })
            .collect();
        let tokens = tokenize(&replaced.join(" "));
        prop_assert_eq!(tokens.len(), tokenize(&original).len());
        for (t, &m) in tokens.iter().zip(&masked) {
            prop_assert_eq!(t == MASK_TOKEN, m);
        }
    }
}

#[test]
fn patient_id_never_reaches_features() {
    let cfg = small_cfg();
    let mut a = PatientProfile::new("P0001");
    a.set_field(FieldName::Mrn, "1234943").unwrap();
    a.set_field(FieldName::City, "NEW YORK").unwrap();
    let mut b = a.clone();
    b.patient_id = "P9999".into();
    assert_eq!(featurize_profile::<f64>(&a, &cfg), featurize_profile::<f64>(&b, &cfg));

    let model = BiencoderModel::<f64>::new(cfg, 8, 3, 1.0);
    let n1 = ClinicalNote::new("N1", "P0001", "MRN: 1234943 seen in NEW YORK");
    let n2 = ClinicalNote::new("N1", "P9999", "MRN: 1234943 seen in NEW YORK");
    assert_eq!(model.encode_note(&n1).unwrap(), model.encode_note(&n2).unwrap());
    assert_eq!(model.encode_profile(&a).unwrap(), model.encode_profile(&b).unwrap());
}

#[test]
fn single_and_double_precision_agree() {
    let cfg = small_cfg();
    let tokens = tokenize("DOB: 03/30/1942 MRN 1234943 lives in NEW YORK");
    let p64 = EncoderParams::<f64>::new(EncoderRole::Note, 16, cfg.hash_space, 11, 1.0);
    let p32 = EncoderParams::<f32>::new(EncoderRole::Note, 16, cfg.hash_space, 11, 1.0);
    let v64 = p64.encode(&featurize_text(&tokens, &cfg)).unwrap();
    let v32 = p32.encode(&featurize_text(&tokens, &cfg)).unwrap();
    for (a, b) in v64.iter().zip(&v32) {
        assert!((a - *b as f64).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn empty_features_encode_to_zero() {
    let p = EncoderParams::<f64>::new(EncoderRole::Profile, 8, 1 << 10, 5, 1.0);
    assert_eq!(p.encode(&SparseFeatures::empty()).unwrap(), vec![0.0; 8]);
}
