use std::fs;
use std::path::Path;
use std::process::Command;

use reid_audit::cli::{cmd_curve, cmd_deid, cmd_generate, cmd_linkage, cmd_threshold, RunConfig};
use reid_audit::encoder::{tokenize, MASK_TOKEN};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in [
        "corpus.patients=100",
        "corpus.notes_per_patient=2",
        "encoder.hash_space=16384",
        "reid.epochs=3",
        "reid.batch_size=20",
        "reid.embedding_dim=32",
    ] {
        cfg.apply(kv).unwrap();
    }
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reid-audit"))
}

#[test]
fn curve_writes_one_row_per_fraction_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let corpus = dir.path().join("corpus");
    cmd_generate(&cfg, &corpus).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_curve(&cfg, &corpus, &a, 1, true).unwrap();
    cmd_curve(&cfg, &corpus, &b, 2, true).unwrap();

    let csv = fs::read_to_string(a.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6, "{csv}");
    assert!(csv.starts_with("requested_fraction,mean_achieved_fraction,top1,top5,top10,seed\n"));
    for name in ["curve.csv", "config.txt", "models/model_0.bin", "models/model_0.2.bin"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }

    let echoed = RunConfig::load(&a.join("config.txt")).unwrap();
    assert_eq!(echoed, cfg);
    let c = dir.path().join("c");
    cmd_curve(&echoed, &corpus, &c, 1, false).unwrap();
    assert_eq!(fs::read(a.join("curve.csv")).unwrap(), fs::read(c.join("curve.csv")).unwrap());
    assert!(!c.join("models").exists());
}

#[test]
fn generate_curve_threshold_compose_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let out = bin().args(args).current_dir(d).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let mut gen = vec!["generate", "--out", "corpus"];
    let sets: Vec<String> = small_config().render().lines().filter(|l| !l.starts_with('#')).map(String::from).collect();
    for s in &sets {
        gen.extend(["--set", s.as_str()]);
    }
    run(&gen);
    run(&["curve", "--corpus", "corpus", "--out", "curve", "--set", "eval.fractions=0,0.1"]);
    assert_eq!(fs::read_to_string(d.join("curve/curve.csv")).unwrap().lines().count(), 3);

    let out = bin()
        .args(["threshold", "--corpus", "corpus", "--out", "th", "--set", "eval.resolution=0.25"])
        .current_dir(d)
        .output()
        .unwrap();
    let text = fs::read_to_string(d.join("th/threshold.txt")).unwrap();
    assert!(text.contains("target=0.01\n"));
    match text.lines().next().unwrap() {
        "threshold=not-found" => {
            assert!(!out.status.success());
            assert!(String::from_utf8_lossy(&out.stderr).contains("unreachable"));
        }
        line => {
            assert!(out.status.success());
            assert!(line.starts_with("threshold="));
        }
    }
    assert!(d.join("th/config.txt").is_file());
}

#[test]
fn bad_inputs_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["generate", "--out", "x", "--set", "reid.epoch=3"]).current_dir(dir.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key `reid.epoch`"));

    let out = bin().args(["train", "--corpus", "missing", "--out", "m"]).current_dir(dir.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    fs::write(dir.path().join("bad.txt"), "seed=7\nnot a pair\n").unwrap();
    let out = bin().args(["config", "--config", "bad.txt"]).current_dir(dir.path()).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn deid_and_linkage_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cmd_generate(&cfg, &dir.path().join("c")).unwrap();
    cfg.set("deid.fraction", "1.0").unwrap();
    let masked = cmd_deid(&cfg, &dir.path().join("c/notes.jsonl"), &dir.path().join("d")).unwrap();
    assert!(masked.iter().any(|m| !m.masked_token_indices.is_empty()));
    for m in &masked {
        let tokens = tokenize(&m.masked_text);
        assert_eq!(tokens.len(), m.token_count);
        for &i in &m.masked_token_indices {
            assert_eq!(tokens[i], MASK_TOKEN);
        }
    }
    assert!(dir.path().join("d/spans.jsonl").is_file());

    cfg.set("deid.fraction", "1.5").unwrap();
    assert!(cmd_deid(&cfg, &dir.path().join("c/notes.jsonl"), &dir.path().join("e")).is_err());

    let rows = cmd_linkage(&cfg, &dir.path().join("c/profiles.csv"), &dir.path().join("l")).unwrap();
    let csv = fs::read_to_string(dir.path().join("l/linkage.csv")).unwrap();
    assert_eq!(csv.lines().count(), rows.len() + 1);
    assert!(csv.lines().nth(1).unwrap().starts_with("gender+date_of_birth+zip,"));
    no_temp_files(dir.path());
}

#[test]
fn unreachable_target_still_writes_the_search_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cmd_generate(&cfg, &dir.path().join("c")).unwrap();
    for kv in ["eval.target=0.0001", "eval.search_hi=0.05", "eval.resolution=0.05"] {
        cfg.apply(kv).unwrap();
    }
    let err = cmd_threshold(&cfg, &dir.path().join("c"), &dir.path().join("t")).unwrap_err();
    assert!(err.to_string().contains("unreachable"));
    let text = fs::read_to_string(dir.path().join("t/threshold.txt")).unwrap();
    assert!(text.starts_with("threshold=not-found\n"));
}

fn no_temp_files(dir: &Path) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            no_temp_files(&path);
        } else {
            assert!(!path.file_name().unwrap().to_string_lossy().ends_with(".tmp"), "{}", path.display());
        }
    }
}
