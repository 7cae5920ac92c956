//! Command layer: one flat key-value run configuration and the pipeline
//! commands built on it.
//!
//! Every command writes its outputs plus the effective `config.txt` into
//! one directory. Files are written to a temporary name and renamed into
//! place, so a directory never holds a partially written output.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    generate_population, ingest_notes, ingest_profiles, load_corpus, write_notes_jsonl, write_profiles_csv, Corpus,
    FieldName, GeneratorConfig, DEFAULT_SPLIT,
};
use crate::deid::{mask, span_dump_line, Lexicons, MaskOrder, MaskedNote};
use crate::encoder::FeaturizerConfig;
use crate::eval::{
    error_report, find_threshold_binary, find_threshold_exhaustive, linkage_uniqueness, masking_curve_outcomes,
    point_seed, prepare, run_point, write_audit_jsonl, write_audit_rates_csv, write_curve_csv, write_linkage_csv,
    write_threshold_txt, CurveConfig, Tagger, DEFAULT_FRACTIONS,
};
use crate::reid::{rank_all, top_k_from_results, train, write_train_log_csv, Alternation, BiencoderModel, TrainConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const MODEL_FILE: &str = "model.bin";

struct KeySpec {
    key: String,
    default: String,
    doc: String,
}

fn key(key: impl Into<String>, default: impl ToString, doc: impl Into<String>) -> KeySpec {
    KeySpec { key: key.into(), default: default.to_string(), doc: doc.into() }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// The documented key table. Defaults are read from each module's own
/// config type so they cannot drift.
fn key_specs() -> Vec<KeySpec> {
    let g = GeneratorConfig::default();
    let f = FeaturizerConfig::default();
    let t = TrainConfig::default();
    let mut keys = vec![
        key("seed", 7, "global seed: corpus generation, split, masking order and training seeds derive from it"),
        key("corpus.patients", 1000, "number of synthetic patients"),
        key("corpus.notes_per_patient", 3, "notes generated per patient"),
        key("corpus.template_pool_size", g.template_pool_size, "distinct note templates"),
        key("corpus.plant_probability", g.plant_probability, "probability a populated field is planted in a note"),
        key("corpus.min_planted_fields", g.min_planted_fields, "minimum planted fields per note"),
        key("corpus.min_filler_sentences", g.min_filler_sentences, "minimum clinical filler sentences per note"),
        key("corpus.max_filler_sentences", g.max_filler_sentences, "maximum clinical filler sentences per note"),
        key("corpus.split", join(&DEFAULT_SPLIT), "train,validation,test patient ratios"),
    ];
    for field in FieldName::ALL {
        keys.push(key(
            format!("corpus.presence.{}", field.as_str()),
            g.presence[field.index()],
            format!("probability that {} is populated", field.as_str()),
        ));
    }
    keys.extend([
        key("encoder.hash_space", f.hash_space, "hash buckets H, a power of two"),
        key("encoder.ngram_min", f.ngram_min, "shortest character n-gram"),
        key("encoder.ngram_max", f.ngram_max, "longest character n-gram"),
        key("encoder.word_unigrams", f.word_unigrams, "also hash whole tokens"),
        key("encoder.prefix_tokens", f.prefix_tokens, "tokens of each note that are featurized and scored for relevancy"),
        key("reid.epochs", t.epochs, "training epochs"),
        key("reid.batch_size", t.batch_size, "notes per in-batch softmax"),
        key("reid.learning_rate", t.learning_rate, "Adam step size"),
        key("reid.beta1", t.beta1, "Adam first-moment decay"),
        key("reid.beta2", t.beta2, "Adam second-moment decay"),
        key("reid.epsilon", t.epsilon, "Adam denominator floor"),
        key("reid.alternation", "epoch", "coordinate ascent granularity: epoch or step"),
        key("reid.embedding_dim", t.embedding_dim, "embedding dimension d"),
        key("reid.init_scale", t.init_scale, "half-width of the uniform projection init"),
        key("deid.tagger", "scored", "span source: rule, scored or all"),
        key("deid.order", "confidence_desc", "masking order: confidence_desc or random"),
        key("deid.fraction", 0.0, "masking fraction for deid, train, eval and audit"),
        key("deid.blocklist", "", "blocklist path, empty for the built-in list"),
        key("deid.allowlist", "", "allowlist path, empty for the built-in list"),
        key("eval.fractions", join(&DEFAULT_FRACTIONS), "curve masking fractions, ascending"),
        key("eval.k", "1,5,10", "top-k cutoffs reported by eval"),
        key("eval.target", 0.01, "threshold search target top-1 accuracy"),
        key("eval.resolution", 0.01, "threshold search grid step"),
        key("eval.search", "binary", "threshold search mode: binary or exhaustive"),
        key("eval.search_lo", 0.0, "lowest fraction searched"),
        key("eval.search_hi", 1.0, "highest fraction searched"),
        key("eval.low_cut", 0.05, "audit: achieved fraction at or below this is low"),
        key("eval.high_cut", 0.15, "audit: achieved fraction at or above this is high"),
        key(
            "eval.linkage_subsets",
            "gender+date_of_birth+zip,gender,date_of_birth,zip",
            "linkage field subsets, comma separated, fields joined by +",
        ),
    ]);
    keys
}

/// Effective configuration of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    order: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let specs = key_specs();
        Self {
            order: specs.iter().map(|s| s.key.clone()).collect(),
            values: specs.into_iter().map(|s| (s.key, s.default)).collect(),
        }
    }
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => bail!("unknown config key `{key}` (run `reid-audit config` for the key list)"),
        }
    }

    /// Applies a `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| anyhow!("expected key=value, got `{assignment}`"))?;
        self.set(k.trim(), v)
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.apply(line).with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    /// The effective config with each key's documentation.
    pub fn render(&self) -> String {
        let docs: BTreeMap<String, String> = key_specs().into_iter().map(|s| (s.key, s.doc)).collect();
        let mut out = String::new();
        for k in &self.order {
            out.push_str(&format!("# {}\n{}={}\n", docs[k], k, self.values[k]));
        }
        out
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| anyhow!("config key `{key}`: cannot parse `{v}`: {e}"))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| anyhow!("config key `{key}`: cannot parse `{s}`: {e}")))
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed")
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let mut presence = [0.0; 14];
        for field in FieldName::ALL {
            presence[field.index()] = self.parsed(&format!("corpus.presence.{}", field.as_str()))?;
        }
        let g = GeneratorConfig {
            presence,
            template_pool_size: self.parsed("corpus.template_pool_size")?,
            plant_probability: self.parsed("corpus.plant_probability")?,
            min_planted_fields: self.parsed("corpus.min_planted_fields")?,
            min_filler_sentences: self.parsed("corpus.min_filler_sentences")?,
            max_filler_sentences: self.parsed("corpus.max_filler_sentences")?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn split_ratios(&self) -> Result<[f64; 3]> {
        let v: Vec<f64> = self.list("corpus.split")?;
        <[f64; 3]>::try_from(v).map_err(|v| anyhow!("config key `corpus.split`: expected 3 ratios, got {}", v.len()))
    }

    pub fn featurizer(&self) -> Result<FeaturizerConfig> {
        let f = FeaturizerConfig {
            hash_space: self.parsed("encoder.hash_space")?,
            ngram_min: self.parsed("encoder.ngram_min")?,
            ngram_max: self.parsed("encoder.ngram_max")?,
            word_unigrams: self.parsed("encoder.word_unigrams")?,
            prefix_tokens: self.parsed("encoder.prefix_tokens")?,
        };
        f.validate()?;
        Ok(f)
    }

    /// Training config with `seed` left at the global seed; callers that
    /// train per masking level replace it with [`point_seed`].
    pub fn train(&self) -> Result<TrainConfig> {
        let alternation: Alternation = self.parsed("reid.alternation")?;
        let t = TrainConfig {
            epochs: self.parsed("reid.epochs")?,
            batch_size: self.parsed("reid.batch_size")?,
            learning_rate: self.parsed("reid.learning_rate")?,
            beta1: self.parsed("reid.beta1")?,
            beta2: self.parsed("reid.beta2")?,
            epsilon: self.parsed("reid.epsilon")?,
            alternation,
            embedding_dim: self.parsed("reid.embedding_dim")?,
            init_scale: self.parsed("reid.init_scale")?,
            seed: self.seed()?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn fraction(&self) -> Result<f64> {
        let f: f64 = self.parsed("deid.fraction")?;
        if !(0.0..=1.0).contains(&f) {
            bail!("config key `deid.fraction`: {f} outside [0, 1]");
        }
        Ok(f)
    }

    pub fn lexicons(&self) -> Result<Lexicons> {
        let (b, a) = (self.get("deid.blocklist"), self.get("deid.allowlist"));
        if b.is_empty() && a.is_empty() {
            return Ok(Lexicons::builtin());
        }
        if b.is_empty() || a.is_empty() {
            bail!("deid.blocklist and deid.allowlist must both be set or both be empty");
        }
        Ok(Lexicons::from_files(b, a)?)
    }

    pub fn curve(&self) -> Result<CurveConfig> {
        Ok(CurveConfig {
            tagger: self.parsed("deid.tagger")?,
            order: self.parsed("deid.order")?,
            featurizer: self.featurizer()?,
            train: self.train()?,
            split_ratios: self.split_ratios()?,
            seed: self.seed()?,
        })
    }

    pub fn fractions(&self) -> Result<Vec<f64>> {
        self.list("eval.fractions")
    }

    pub fn linkage_subsets(&self) -> Result<Vec<Vec<FieldName>>> {
        self.get("eval.linkage_subsets")
            .split(',')
            .map(|subset| {
                subset
                    .split('+')
                    .map(|f| f.trim().parse::<FieldName>().map_err(|e| anyhow!("config key `eval.linkage_subsets`: {e}")))
                    .collect()
            })
            .collect()
    }
}

/// Writes `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let name = path.file_name().ok_or_else(|| anyhow!("output path {} has no file name", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let file = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", tmp.display()))?;
    drop(w);
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = cfg.render();
    write_atomic(&out.join(CONFIG_FILE), |w| w.write_all(text.as_bytes()))
}

fn save_model(model: &BiencoderModel<f64>, path: &Path) -> Result<()> {
    let bytes = model.to_bytes();
    write_atomic(path, |w| w.write_all(&bytes))
}

fn load_corpus_dir(dir: &Path, cfg: &RunConfig) -> Result<Corpus> {
    load_corpus(dir, cfg.seed()?).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn load_model(path: &Path) -> Result<BiencoderModel<f64>> {
    BiencoderModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn fraction_label(f: f64) -> String {
    format!("{f}")
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Corpus> {
    let corpus = generate_population(
        cfg.parsed("corpus.patients")?,
        cfg.parsed("corpus.notes_per_patient")?,
        &cfg.generator()?,
        cfg.seed()?,
    )?;
    prepare_out(out, cfg)?;
    write_atomic(&out.join("profiles.csv"), |w| {
        write_profiles_csv(w, &corpus.profiles).map_err(std::io::Error::other)
    })?;
    write_atomic(&out.join("notes.jsonl"), |w| write_notes_jsonl(w, &corpus.notes).map_err(std::io::Error::other))?;
    Ok(corpus)
}

/// Masks every note in a notes file; writes `masked.jsonl` and the tagger
/// spans as `spans.jsonl`.
pub fn cmd_deid(cfg: &RunConfig, notes_path: &Path, out: &Path) -> Result<Vec<MaskedNote>> {
    let notes = ingest_notes(notes_path).with_context(|| format!("reading {}", notes_path.display()))?;
    let lexicons = cfg.lexicons()?;
    let tagger: Tagger = cfg.parsed("deid.tagger")?;
    let order: MaskOrder = cfg.parsed("deid.order")?;
    let fraction = cfg.fraction()?;
    let seed = cfg.seed()?;
    let mut masked = Vec::with_capacity(notes.len());
    let mut span_lines = Vec::new();
    for note in &notes {
        let spans = tagger.spans(note, &lexicons);
        span_lines.extend(spans.iter().map(|s| span_dump_line(&note.note_id, s)));
        masked.push(mask(note, &spans, fraction, order, seed)?);
    }
    prepare_out(out, cfg)?;
    write_atomic(&out.join("masked.jsonl"), |w| {
        for m in &masked {
            serde_json::to_writer(&mut *w, m)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    write_atomic(&out.join("spans.jsonl"), |w| span_lines.iter().try_for_each(|l| writeln!(w, "{l}")))?;
    Ok(masked)
}

/// Trains on the masked train split at `deid.fraction`. The training seed
/// is the one the curve uses for that fraction.
pub fn cmd_train(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<BiencoderModel<f64>> {
    let corpus = load_corpus_dir(corpus_dir, cfg)?;
    let curve = cfg.curve()?;
    let fraction = cfg.fraction()?;
    let prep = prepare(&corpus, &curve, &cfg.lexicons()?)?;
    let notes: Vec<_> = prep
        .train_notes
        .iter()
        .zip(&prep.train_spans)
        .map(|(n, s)| mask(n, s, fraction, curve.order, curve.seed).map(|m| m.to_note()))
        .collect::<Result<_, _>>()?;
    let train_cfg = TrainConfig { seed: point_seed(curve.seed, fraction), ..curve.train.clone() };
    let outcome = train::<f64>(&notes, &prep.profiles, &curve.featurizer, &train_cfg)?;
    prepare_out(out, cfg)?;
    save_model(&outcome.model, &out.join(MODEL_FILE))?;
    write_atomic(&out.join("train_log.csv"), |w| write_train_log_csv(w, &outcome.log))?;
    Ok(outcome.model)
}

/// Ranks the masked test split with a saved model; writes
/// `retrieval.jsonl` and `topk.csv`.
pub fn cmd_eval(cfg: &RunConfig, model_path: &Path, corpus_dir: &Path, out: &Path) -> Result<BTreeMap<usize, f64>> {
    let model = load_model(model_path)?;
    let corpus = load_corpus_dir(corpus_dir, cfg)?;
    let curve = CurveConfig { featurizer: model.featurizer.clone(), ..cfg.curve()? };
    let fraction = cfg.fraction()?;
    let ks: Vec<usize> = cfg.list("eval.k")?;
    if ks.is_empty() || ks.contains(&0) {
        bail!("config key `eval.k`: cutoffs must be positive");
    }
    let prep = prepare(&corpus, &curve, &cfg.lexicons()?)?;
    let notes: Vec<_> = prep
        .test_notes
        .iter()
        .zip(&prep.test_spans)
        .map(|(n, s)| mask(n, s, fraction, curve.order, curve.seed).map(|m| m.to_note()))
        .collect::<Result<_, _>>()?;
    let db = model.index_profiles(&prep.test_profiles)?;
    let results = rank_all(&model, &notes, &db)?;
    let topk: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, top_k_from_results(&results, k))).collect();
    prepare_out(out, cfg)?;
    write_atomic(&out.join("retrieval.jsonl"), |w| results.iter().try_for_each(|r| writeln!(w, "{}", r.to_json_line())))?;
    write_atomic(&out.join("topk.csv"), |w| {
        writeln!(w, "k,accuracy")?;
        topk.iter().try_for_each(|(k, a)| writeln!(w, "{k},{a}"))
    })?;
    Ok(topk)
}

/// Writes `curve.csv` and, with `save_models`, `models/model_<fraction>.bin`.
pub fn cmd_curve(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    jobs: usize,
    save_models: bool,
) -> Result<Vec<crate::eval::CurvePoint>> {
    let corpus = load_corpus_dir(corpus_dir, cfg)?;
    let outcomes = masking_curve_outcomes(&corpus, &cfg.fractions()?, &cfg.curve()?, &cfg.lexicons()?, jobs)?;
    prepare_out(out, cfg)?;
    if save_models {
        let dir = out.join("models");
        fs::create_dir_all(&dir)?;
        for o in &outcomes {
            save_model(&o.model, &dir.join(format!("model_{}.bin", fraction_label(o.point.requested_fraction))))?;
        }
    }
    let points: Vec<_> = outcomes.into_iter().map(|o| o.point).collect();
    write_atomic(&out.join("curve.csv"), |w| write_curve_csv(w, &points))?;
    Ok(points)
}

/// Searches for the smallest masking fraction whose top-1 accuracy is at
/// most `eval.target`. Writes `threshold.txt` in every case and fails when
/// the target is unreachable.
pub fn cmd_threshold(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<Option<f64>> {
    let corpus = load_corpus_dir(corpus_dir, cfg)?;
    let curve = cfg.curve()?;
    let prep = prepare(&corpus, &curve, &cfg.lexicons()?)?;
    let target: f64 = cfg.parsed("eval.target")?;
    let resolution: f64 = cfg.parsed("eval.resolution")?;
    let (lo, hi): (f64, f64) = (cfg.parsed("eval.search_lo")?, cfg.parsed("eval.search_hi")?);
    let mode = cfg.get("eval.search").to_string();
    let evaluate = |f: f64| run_point(&prep, f, &curve).map(|o| o.point.top1);
    let search = match mode.as_str() {
        "binary" => find_threshold_binary(evaluate, target, resolution, lo, hi)??,
        "exhaustive" => find_threshold_exhaustive(evaluate, target, resolution, lo, hi)??,
        other => bail!("config key `eval.search`: unknown mode `{other}` (expected binary or exhaustive)"),
    };
    prepare_out(out, cfg)?;
    write_atomic(&out.join("threshold.txt"), |w| write_threshold_txt(w, &search, &mode))?;
    match search.threshold {
        Some(t) => Ok(Some(t)),
        None => bail!("target accuracy {target} unreachable: top-1 stays above it up to fraction {hi}"),
    }
}

/// Error-quadrant audit of a saved model on the test split masked at
/// `deid.fraction`. Writes `audit.jsonl` and `audit_rates.csv`.
pub fn cmd_audit(cfg: &RunConfig, model_path: &Path, corpus_dir: &Path, out: &Path) -> Result<crate::eval::AuditReport> {
    let model = load_model(model_path)?;
    let corpus = load_corpus_dir(corpus_dir, cfg)?;
    let curve = CurveConfig { featurizer: model.featurizer.clone(), ..cfg.curve()? };
    let fraction = cfg.fraction()?;
    let prep = prepare(&corpus, &curve, &cfg.lexicons()?)?;
    let masked: Vec<MaskedNote> = prep
        .test_notes
        .iter()
        .zip(&prep.test_spans)
        .map(|(n, s)| mask(n, s, fraction, curve.order, curve.seed))
        .collect::<Result<_, _>>()?;
    let notes: Vec<_> = masked.iter().map(MaskedNote::to_note).collect();
    let db = model.index_profiles(&prep.test_profiles)?;
    let results = rank_all(&model, &notes, &db)?;
    let report =
        error_report(&results, &masked, &corpus.profiles, cfg.parsed("eval.low_cut")?, cfg.parsed("eval.high_cut")?)?;
    prepare_out(out, cfg)?;
    write_atomic(&out.join("audit.jsonl"), |w| write_audit_jsonl(w, &report))?;
    write_atomic(&out.join("audit_rates.csv"), |w| write_audit_rates_csv(w, &report))?;
    Ok(report)
}

pub fn cmd_linkage(cfg: &RunConfig, profiles_path: &Path, out: &Path) -> Result<Vec<crate::eval::LinkageResult>> {
    let profiles = ingest_profiles(profiles_path).with_context(|| format!("reading {}", profiles_path.display()))?;
    let results = cfg
        .linkage_subsets()?
        .iter()
        .map(|fields| linkage_uniqueness(&profiles, fields))
        .collect::<Result<Vec<_>, _>>()?;
    prepare_out(out, cfg)?;
    write_atomic(&out.join("linkage.csv"), |w| write_linkage_csv(w, &results))?;
    Ok(results)
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "reid-audit", version, about = "Reidentification audit for deidentified clinical notes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file; defaults to the config.txt beside the primary input.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set reid.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print every config key with its default and documentation.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic corpus (profiles.csv, notes.jsonl).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Tag and mask a notes file at deid.fraction.
    Deid {
        #[arg(long)]
        notes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a biencoder on the masked train split.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rank masked test notes with a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate one model per masking fraction.
    Curve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for curve points.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write each point's model under models/.
        #[arg(long)]
        save_models: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Find the smallest masking fraction reaching eval.target.
    Threshold {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Error-quadrant audit of a saved model.
    Audit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Quasi-identifier uniqueness over field subsets.
    Linkage {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Resolves `--config`, else `beside/config.txt` when present, else the
/// defaults; then applies `--set` overrides in order.
pub fn resolve_config(args: &ConfigArgs, beside: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, beside.map(|d| d.join(CONFIG_FILE))) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(path)) if path.is_file() => RunConfig::load(&path)?,
        _ => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply(o)?;
    }
    Ok(cfg)
}

fn parent(path: &Path) -> Option<&Path> {
    path.parent().map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { cfg } => {
            print!("{}", resolve_config(&cfg, None)?.render());
        }
        Command::Generate { out, cfg } => {
            let corpus = cmd_generate(&resolve_config(&cfg, None)?, &out)?;
            eprintln!("wrote {} profiles and {} notes to {}", corpus.profiles.len(), corpus.notes.len(), out.display());
        }
        Command::Deid { notes, out, cfg } => {
            let masked = cmd_deid(&resolve_config(&cfg, parent(&notes))?, &notes, &out)?;
            eprintln!("masked {} notes into {}", masked.len(), out.display());
        }
        Command::Train { corpus, out, cfg } => {
            cmd_train(&resolve_config(&cfg, Some(&corpus))?, &corpus, &out)?;
            eprintln!("wrote {}", out.join(MODEL_FILE).display());
        }
        Command::Eval { model, corpus, out, cfg } => {
            let topk = cmd_eval(&resolve_config(&cfg, parent(&model))?, &model, &corpus, &out)?;
            for (k, a) in topk {
                println!("top{k}={a}");
            }
        }
        Command::Curve { corpus, out, jobs, save_models, cfg } => {
            let points = cmd_curve(&resolve_config(&cfg, Some(&corpus))?, &corpus, &out, jobs, save_models)?;
            for p in points {
                println!("fraction={} achieved={:.4} top1={:.4}", p.requested_fraction, p.mean_achieved_fraction, p.top1);
            }
        }
        Command::Threshold { corpus, out, cfg } => {
            if let Some(t) = cmd_threshold(&resolve_config(&cfg, Some(&corpus))?, &corpus, &out)? {
                println!("threshold={t}");
            }
        }
        Command::Audit { model, corpus, out, cfg } => {
            let report = cmd_audit(&resolve_config(&cfg, parent(&model))?, &model, &corpus, &out)?;
            for (q, r) in &report.pooled.rates {
                println!("{}={r:.4}", q.as_str());
            }
        }
        Command::Linkage { profiles, out, cfg } => {
            for r in cmd_linkage(&resolve_config(&cfg, parent(&profiles))?, &profiles, &out)? {
                let names: Vec<&str> = r.field_subset.iter().map(|f| f.as_str()).collect();
                println!("{} uniqueness={:.4}", names.join("+"), r.uniqueness_rate);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back_to_itself() {
        let mut cfg = RunConfig::default();
        cfg.set("reid.epochs", "3").unwrap();
        cfg.set("deid.order", "random").unwrap();
        let again = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("reid.epoch=3\n").unwrap_err();
        assert!(format!("{err:#}").contains("reid.epoch"));
        assert!(RunConfig::default().apply("no_equals_sign").is_err());
    }

    #[test]
    fn every_key_is_documented_and_typed() {
        let cfg = RunConfig::default();
        for spec in key_specs() {
            assert!(!spec.doc.is_empty(), "{}", spec.key);
        }
        cfg.curve().unwrap();
        cfg.generator().unwrap();
        cfg.linkage_subsets().unwrap();
        assert_eq!(cfg.fractions().unwrap(), DEFAULT_FRACTIONS.to_vec());
    }

    #[test]
    fn out_of_range_fraction_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.set("deid.fraction", "1.5").unwrap();
        assert!(cfg.fraction().is_err());
    }
}
