use proptest::prelude::*;
use reid_audit::corpus::{generate_population, ClinicalNote, Corpus, GeneratorConfig, PatientProfile};
use reid_audit::encoder::{EncoderRole, FeaturizerConfig, SparseFeatures};
use reid_audit::reid::{
    batch_gradients, batch_loss, grad_check, oracle_pairwise, posterior, rank, rank_all, score_matrix, top_k_accuracy,
    train, BiencoderModel, TrainConfig, TrainError,
};

fn small_featurizer() -> FeaturizerConfig {
    FeaturizerConfig { hash_space: 1 << 12, ..FeaturizerConfig::default() }
}

fn corpus() -> &'static Corpus {
    static C: std::sync::OnceLock<Corpus> = std::sync::OnceLock::new();
    C.get_or_init(|| generate_population(60, 1, &GeneratorConfig::default(), 5).unwrap())
}

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..40)
}

proptest! {
    #[test]
    fn posterior_is_a_shift_invariant_distribution(row in logits(), c in -100.0f64..100.0) {
        let p = posterior(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
        for (a, b) in p.iter().zip(posterior(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_survives_positive_scaling(row in logits(), s in 0.01f64..100.0) {
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best });
        let scaled: Vec<f64> = row.iter().map(|x| x * s).collect();
        prop_assert_eq!(argmax(&row), argmax(&scaled));
    }

    #[test]
    fn scaling_notes_scales_logit_rows(
        notes in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..6),
        profiles in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..6),
        c in -4.0f64..4.0,
    ) {
        let base = score_matrix(&notes, &profiles).unwrap();
        let scaled_notes: Vec<Vec<f64>> = notes.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        let scaled = score_matrix(&scaled_notes, &profiles).unwrap();
        for (a, b) in base.iter().zip(scaled.iter()) {
            prop_assert!((a * c - b).abs() < 1e-9);
        }
    }
}

#[test]
fn orthonormal_vectors_give_identity_logits() {
    let e: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let m = score_matrix(&e, &e).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(m[[i, j]], if i == j { 1.0 } else { 0.0 });
        }
    }
    assert!(score_matrix(&[vec![1.0, 2.0]], &[vec![1.0]]).is_err());
}

fn perturbed_model(seed: u64) -> BiencoderModel<f64> {
    let c = corpus();
    let cfg = TrainConfig { epochs: 2, batch_size: 10, seed, learning_rate: 0.01, ..TrainConfig::default() };
    train::<f64>(&c.notes[..40], &c.profiles, &small_featurizer(), &cfg).unwrap().model
}

#[test]
fn retrieval_results_are_sorted_normalized_and_match_oracle() {
    let c = corpus();
    let model = perturbed_model(1);
    let db = model.index_profiles(&c.profiles).unwrap();
    let results = rank_all(&model, &c.notes, &db).unwrap();
    let oracle = oracle_pairwise(&model, &c.notes, &c.profiles);
    for (r, row) in results.iter().zip(&oracle) {
        assert!(r.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!((r.ranked.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-6);
        for (pid, p) in &r.ranked {
            let j = c.profiles.iter().position(|x| &x.patient_id == pid).unwrap();
            assert!((p - row[j]).abs() <= 1e-9);
        }
    }
}

#[test]
fn oracle_is_permutation_equivariant_and_row_stable() {
    let c = corpus();
    let model = perturbed_model(2);
    let notes = vec![c.notes[0].clone(), c.notes[0].clone(), c.notes[3].clone()];
    let profiles: Vec<PatientProfile> = c.profiles[..10].to_vec();
    let table = oracle_pairwise(&model, &notes, &profiles);
    assert_eq!(table[0], table[1]);
    let mut reversed = profiles.clone();
    reversed.reverse();
    let flipped = oracle_pairwise(&model, &notes, &reversed);
    for (row, frow) in table.iter().zip(&flipped) {
        let mut r = frow.clone();
        r.reverse();
        for (a, b) in row.iter().zip(&r) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn degenerate_and_duplicate_databases() {
    let c = corpus();
    let model = perturbed_model(3);
    let one = model.index_profiles(&c.profiles[..1]).unwrap();
    let r = rank(&model, &c.notes[5], &one).unwrap();
    assert_eq!(r.ranked.len(), 1);
    assert!((r.ranked[0].1 - 1.0).abs() < 1e-12);

    let mut twin = c.profiles[7].clone();
    twin.patient_id = "A-twin".into();
    let db = model.index_profiles(&[c.profiles[7].clone(), twin]).unwrap();
    let r = rank(&model, &c.notes[7], &db).unwrap();
    assert_eq!(r.ranked[0].1, r.ranked[1].1);
    assert_eq!(r.ranked[0].0, "A-twin", "ties go to the smaller patient_id");
}

#[test]
fn top_k_is_monotone_and_exhaustive_at_database_size() {
    let c = corpus();
    let model = perturbed_model(4);
    let db = model.index_profiles(&c.profiles).unwrap();
    let mut last = 0.0;
    for k in [1, 2, 5, 10, 30] {
        let a = top_k_accuracy(&model, &c.notes, &db, k).unwrap();
        assert!(a >= last);
        last = a;
    }
    assert_eq!(top_k_accuracy(&model, &c.notes, &db, c.profiles.len()).unwrap(), 1.0);
}

fn batch(model: &BiencoderModel<f64>, range: std::ops::Range<usize>) -> (Vec<SparseFeatures<f64>>, Vec<SparseFeatures<f64>>) {
    let c = corpus();
    let profiles = c.profile_map();
    let notes: Vec<&ClinicalNote> = c.notes[range].iter().collect();
    (
        notes.iter().map(|n| model.note_features(n)).collect(),
        notes.iter().map(|n| model.profile_features(profiles[n.patient_id.as_str()])).collect(),
    )
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let f = small_featurizer();
    for seed in 0..3 {
        // at 1/sqrt(H) the gradients are ~1e-7, so the step must outgrow f64 roundoff in the loss
        for (scale, step) in [(1.0, 1e-5), (TrainConfig::inverse_sqrt_scale(f.hash_space), 1e-3)] {
            let model = BiencoderModel::<f64>::new(f.clone(), 64, seed, scale);
            let (n, p) = batch(&model, 8 * seed as usize..8 * seed as usize + 8);
            let (nr, pr): (Vec<_>, Vec<_>) = (n.iter().collect(), p.iter().collect());
            let err = grad_check(&model, &nr, &pr, step, 100, seed).unwrap();
            assert!(err <= 1e-4, "seed {seed} scale {scale}: {err}");
        }
    }
}

#[test]
fn doubling_the_loss_doubles_gradients() {
    let model = perturbed_model(9);
    let (n, p) = batch(&model, 10..18);
    let (nr, pr): (Vec<_>, Vec<_>) = (n.iter().collect(), p.iter().collect());
    let both = [EncoderRole::Note, EncoderRole::Profile];
    let g1 = batch_gradients(&model, &nr, &pr, 1.0, &both).unwrap();
    let g2 = batch_gradients(&model, &nr, &pr, 2.0, &both).unwrap();
    for (a, b) in [(&g1.note_grad, &g2.note_grad), (&g1.profile_grad, &g2.profile_grad)] {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert_eq!(a.columns, b.columns);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((2.0 * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn initial_loss_is_near_log_batch_size_at_inverse_sqrt_scale() {
    let f = FeaturizerConfig::default();
    let model = BiencoderModel::<f64>::new(f.clone(), 128, 0, TrainConfig::inverse_sqrt_scale(f.hash_space));
    for (b, start) in [(10, 0), (35, 20)] {
        let (n, p) = batch(&model, start..start + b);
        let (nr, pr): (Vec<_>, Vec<_>) = (n.iter().collect(), p.iter().collect());
        let loss = batch_loss(&model, &nr, &pr).unwrap();
        let ln_b = (b as f64).ln();
        assert!((loss - ln_b).abs() <= 0.2 * ln_b, "b={b}: loss {loss} vs ln b {ln_b}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let c = corpus();
    let f = FeaturizerConfig { hash_space: 1 << 10, ..FeaturizerConfig::default() };
    let cfg = TrainConfig { epochs: 3, batch_size: 10, learning_rate: 0.0, embedding_dim: 16, seed: 4, ..TrainConfig::default() };
    let trained = train::<f64>(&c.notes, &c.profiles, &f, &cfg).unwrap().model;
    let fresh = BiencoderModel::<f64>::new(f, 16, trained.train_seed, cfg.init_scale);
    for (a, b) in [(&trained.note_encoder, &fresh.note_encoder), (&trained.profile_encoder, &fresh.profile_encoder)] {
        let (ra, rb) = (a.to_rows(), b.to_rows());
        for (x, y) in ra.iter().flatten().zip(rb.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn training_is_deterministic_and_files_round_trip() {
    let c = corpus();
    let cfg = TrainConfig { epochs: 3, batch_size: 12, seed: 21, ..TrainConfig::default() };
    let a = train::<f64>(&c.notes, &c.profiles, &small_featurizer(), &cfg).unwrap();
    let b = train::<f64>(&c.notes, &c.profiles, &small_featurizer(), &cfg).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert_eq!(a.log, b.log);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    a.model.save(&path).unwrap();
    let back = BiencoderModel::<f64>::load(&path).unwrap();
    assert_eq!(back, a.model);
    assert_eq!(back.to_bytes(), a.model.to_bytes());

    let small = train::<f32>(&c.notes, &c.profiles, &small_featurizer(), &cfg).unwrap().model;
    let back32 = BiencoderModel::<f32>::from_bytes(&small.to_bytes()).unwrap();
    assert_eq!(back32, small);
}

#[test]
fn training_rejects_bad_batches() {
    let c = corpus();
    let too_big = TrainConfig { batch_size: 1000, ..TrainConfig::default() };
    assert!(matches!(
        train::<f64>(&c.notes, &c.profiles, &small_featurizer(), &too_big),
        Err(TrainError::BatchTooLarge { .. })
    ));
    let too_small = TrainConfig { batch_size: 1, ..TrainConfig::default() };
    assert!(train::<f64>(&c.notes, &c.profiles, &small_featurizer(), &too_small).is_err());
    let no_epochs = TrainConfig { epochs: 0, ..TrainConfig::default() };
    assert!(train::<f64>(&c.notes, &c.profiles, &small_featurizer(), &no_epochs).is_err());
}

#[test]
fn same_phase_loss_descends_over_first_ten_epochs() {
    let corpus = generate_population(1000, 3, &GeneratorConfig::default(), 7).unwrap();
    let selected = reid_audit::corpus::select_note_per_patient(&corpus, 512);
    let split = reid_audit::corpus::split_corpus(&corpus, reid_audit::corpus::DEFAULT_SPLIT, corpus.seed).unwrap();
    let notes_by_id = corpus.note_map();
    let notes: Vec<ClinicalNote> = split.train.iter().map(|p| notes_by_id[selected[p].as_str()].clone()).collect();
    let cfg = TrainConfig { epochs: 12, seed: 1, ..TrainConfig::default() };
    let log = train::<f64>(&notes, &corpus.profiles, &FeaturizerConfig::default(), &cfg).unwrap().log;
    for e in 0..10 {
        assert_eq!(log[e].phase, log[e + 2].phase);
        assert!(log[e + 2].mean_loss <= log[e].mean_loss, "epoch {}: {} > {}", e + 2, log[e + 2].mean_loss, log[e].mean_loss);
    }
}
