//! Command-line front door.
//!
//! Five commands — `train`, `evaluate`, `dump-embeddings`, `compare`,
//! `synth` — drive the full experiment cycle from declarative TOML configs
//! and persist every analysis artifact as plot-ready CSV (plus binary
//! checkpoints and embedding stores). Exit codes are a stable contract:
//! 0 success, 2 config error, 3 training divergence, 4 artifact mismatch,
//! 5 alignment error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::frozen::FrozenStore;
use crate::data::synthetic::{generate_synthetic, GroundTruth, SyntheticSpec};
use crate::data::wordvec::load_word_embeddings;
use crate::data::{
    parse_behaviors_tsv, parse_news_tsv, parse_timestamp, temporal_split, DatasetPaths,
    Impression, NewsCatalog,
};
use crate::metrics::{
    cka_matrix, dendrogram_text, hierarchical_cluster, jaccard_matrix, mean_jaccard,
    ComparisonMatrix, EmbeddingMatrix, RecommendationList,
};
use crate::news::TextFamily;
use crate::pipeline::{
    collect_users, config_digest, manifest_path, train, Checkpoint, CheckpointManifest,
    FrozenStores, InferenceEngine, ModelConfig, RecommenderModel, TrainOutcome,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Environment variable naming the root for default output directories.
pub const OUT_ENV: &str = "NEWSLAB_OUT";

/// Top-level argument grammar.
#[derive(Debug, Parser)]
#[command(name = "newslab", version, about = "News-recommender laboratory")]
pub struct Cli {
    /// Override every config-derived seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

/// The five experiment commands.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a recommender from an experiment config.
    Train {
        /// Experiment config (TOML).
        config: PathBuf,
    },
    /// Score a checkpoint against a dataset (uses the test log when the
    /// dataset has one, the main log otherwise).
    Evaluate {
        /// Checkpoint file.
        checkpoint: PathBuf,
        /// Dataset directory.
        data: PathBuf,
        /// Ranking cutoffs.
        #[arg(long, value_delimiter = ',', default_value = "5,10")]
        k: Vec<usize>,
        /// Also write per-impression nDCG values.
        #[arg(long)]
        per_impression: bool,
        /// Output directory (default: under the output root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export test-set news or user embeddings in the embedding-store
    /// binary format.
    DumpEmbeddings {
        /// Checkpoint file.
        checkpoint: PathBuf,
        /// Dataset directory.
        data: PathBuf,
        /// Which embeddings to export.
        #[arg(long)]
        target: DumpTarget,
        /// Also write a TSV copy.
        #[arg(long)]
        tsv: bool,
        /// Output directory (default: under the output root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise model comparison from dumped artifacts.
    Compare {
        /// Two or more artifacts: embedding stores (cka) or ranking TSVs
        /// (jaccard).
        #[arg(required = true, num_args = 2..)]
        artifacts: Vec<PathBuf>,
        /// Similarity to compute.
        #[arg(long)]
        metric: CompareMetric,
        /// Cutoff for jaccard.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Emit an average-linkage dendrogram of the matrix.
        #[arg(long)]
        cluster: bool,
        /// Jaccard-vs-k sweep range `start:end` (jaccard only).
        #[arg(long)]
        sweep_k: Option<String>,
        /// Output directory (default: under the output root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a spec.
    Synth {
        /// Synthetic-data spec (TOML).
        spec: PathBuf,
        /// Output directory (default: under the output root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `dump-embeddings --target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DumpTarget {
    /// One row per article referenced by the evaluated log.
    News,
    /// One row per user, encoding their latest logged history.
    User,
}

/// `compare --metric`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompareMetric {
    /// Linear CKA over embedding dumps.
    Cka,
    /// Mean Jaccard@k over ranking dumps.
    Jaccard,
}

/// Parse arguments, run, and translate errors into the exit-code contract.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => cmd_train(&config, cli.seed),
        Command::Evaluate { checkpoint, data, k, per_impression, out } => {
            cmd_evaluate(&checkpoint, &data, &k, per_impression, out.as_deref())
        }
        Command::DumpEmbeddings { checkpoint, data, target, tsv, out } => {
            cmd_dump_embeddings(&checkpoint, &data, target, tsv, out.as_deref())
        }
        Command::Compare { artifacts, metric, k, cluster, sweep_k, out } => cmd_compare(
            &artifacts,
            metric,
            k,
            cluster,
            sweep_k.as_deref(),
            out.as_deref(),
            cli.seed,
        ),
        Command::Synth { spec, out } => cmd_synth(&spec, out.as_deref(), cli.seed),
    }
}

// ---------------------------------------------------------------------------
// Experiment config
// ---------------------------------------------------------------------------

/// Declarative experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Where the data lives.
    pub dataset: DatasetSection,
    /// Model + training description.
    #[serde(default)]
    pub model: ModelConfig,
    /// Evaluation cutoffs (positive, strictly ascending).
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    /// Run-directory name (default: the config file stem).
    #[serde(default)]
    pub run_name: Option<String>,
}

/// Dataset pointers inside an experiment config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Dataset directory (relative paths resolve against the config file).
    pub dir: PathBuf,
    /// Train/validation boundary timestamp (`MM/DD/YYYY hh:mm:ss AM`);
    /// defaults to the boundary recorded in the dataset's ground-truth
    /// file when present.
    #[serde(default)]
    pub split: Option<String>,
}

fn default_ks() -> Vec<usize> {
    vec![5, 10]
}

impl ExperimentConfig {
    /// Parse and validate, resolving `dataset.dir` against `base`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config '{}': {e}", path.display()))
        })?;
        let mut config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if config.dataset.dir.is_relative() {
            config.dataset.dir = base.join(&config.dataset.dir);
        }
        config.validate()?;
        Ok(config)
    }

    /// Field-level validation.
    pub fn validate(&self) -> Result<()> {
        if !self.dataset.dir.is_dir() {
            return Err(Error::Config(format!(
                "dataset.dir '{}' does not exist",
                self.dataset.dir.display()
            )));
        }
        if let Some(s) = &self.dataset.split {
            if parse_timestamp(s).is_none() {
                return Err(Error::Config(format!(
                    "dataset.split '{s}' is not a 'MM/DD/YYYY hh:mm:ss AM' timestamp"
                )));
            }
        }
        if self.ks.is_empty() || self.ks.iter().any(|&k| k == 0) {
            return Err(Error::Config("ks must be positive".into()));
        }
        if self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("ks must be strictly ascending, got {:?}", self.ks)));
        }
        self.model.validate()
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Root under which default output directories are created.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// First non-existing directory among `base`, `base-1`, `base-2`, …
pub fn unique_dir(base: &Path) -> PathBuf {
    if !base.exists() {
        return base.to_path_buf();
    }
    for i in 1.. {
        let candidate = base.with_file_name(format!(
            "{}-{i}",
            base.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
        ));
        if !candidate.exists() {
            return candidate;
        }
    }
    unreachable!("suffix search is unbounded")
}

fn resolve_out(explicit: Option<&Path>, default_name: &str) -> Result<PathBuf> {
    let base = match explicit {
        Some(p) => p.to_path_buf(),
        None => out_root().join(default_name),
    };
    let dir = unique_dir(&base);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Write a file atomically (temp + rename) so partial artifacts never
/// survive a crash.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load the frozen stores a config's news family needs.
fn load_frozen(config: &ModelConfig, paths: &DatasetPaths) -> Result<FrozenStores> {
    let mut stores = FrozenStores { cls: None, tokens: None };
    match config.news.family {
        TextFamily::FrozenCls => {
            let p = paths.frozen_cls.as_ref().ok_or_else(|| {
                Error::Config("news family frozen_cls needs a frozen_cls store in the dataset".into())
            })?;
            stores.cls = Some(FrozenStore::load(p)?);
        }
        TextFamily::FrozenTokensAtt => {
            let p = paths.frozen_tokens.as_ref().ok_or_else(|| {
                Error::Config(
                    "news family frozen_tokens_att needs a frozen_tokens store in the dataset"
                        .into(),
                )
            })?;
            stores.tokens = Some(FrozenStore::load(p)?);
        }
        _ => {}
    }
    Ok(stores)
}

/// Boundary for the train/validation split: explicit config timestamp, or
/// the dataset's recorded ground truth.
fn resolve_boundary(section: &DatasetSection) -> Result<i64> {
    if let Some(s) = &section.split {
        return parse_timestamp(s).ok_or_else(|| {
            Error::Config(format!("dataset.split '{s}' is not a valid timestamp"))
        });
    }
    let gt_path = section.dir.join("ground_truth.txt");
    if gt_path.is_file() {
        let text = std::fs::read_to_string(&gt_path)?;
        return Ok(GroundTruth::parse(&text, &gt_path)?.split_boundary);
    }
    Err(Error::Config(
        "dataset.split is required (the dataset has no ground_truth.txt to infer it from)".into(),
    ))
}

/// Everything needed to run a checkpoint against a dataset.
struct LoadedModel {
    catalog: NewsCatalog,
    stores: FrozenStores,
    model: RecommenderModel<f32>,
    paths: DatasetPaths,
}

fn load_model(checkpoint: &Path, data: &Path) -> Result<LoadedModel> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = ModelConfig::from_toml(&ckpt.config_toml)?;
    let paths = DatasetPaths::in_dir(data)?;
    let catalog = parse_news_tsv(&paths.news, config.data.title_len)?;
    let stores = load_frozen(&config, &paths)?;
    let model = {
        let frozen = stores.inputs();
        RecommenderModel::<f32>::from_checkpoint(&ckpt, &catalog, &frozen)?
    };
    Ok(LoadedModel { catalog, stores, model, paths })
}

/// The impressions a checkpoint is judged on: the test log when present.
fn evaluation_log(lm: &LoadedModel) -> Result<Vec<Impression>> {
    let path = lm.paths.behaviors_test.as_ref().unwrap_or(&lm.paths.behaviors);
    Ok(parse_behaviors_tsv(path, &lm.catalog)?.impressions)
}

// ---------------------------------------------------------------------------
// Ranking artifacts
// ---------------------------------------------------------------------------

/// Serialize ranked lists as a TSV: `impression_id<TAB>id:score,…`.
pub fn rankings_to_tsv(lists: &[RecommendationList]) -> String {
    let mut out = String::from("impression_id\tranking\n");
    for l in lists {
        out.push_str(&l.impression_id);
        out.push('\t');
        for (i, (id, score)) in l.items.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(id);
            out.push(':');
            out.push_str(&format!("{score:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Parse the layout written by [`rankings_to_tsv`].
pub fn rankings_from_tsv(text: &str, label: &Path) -> Result<Vec<RecommendationList>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("impression_id\tranking") => {}
        _ => {
            return Err(Error::format(label, 1, "expected header 'impression_id\\tranking'"))
        }
    }
    let mut lists = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let (imp, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(label, lineno, "missing tab"))?;
        let mut items = Vec::new();
        for part in rest.split(',') {
            let (id, score) = part.rsplit_once(':').ok_or_else(|| {
                Error::format(label, lineno, format!("bad ranked item '{part}'"))
            })?;
            let score: f64 = score.parse().map_err(|_| {
                Error::format(label, lineno, format!("bad score in '{part}'"))
            })?;
            items.push((id.to_string(), score));
        }
        lists.push(RecommendationList::new(imp, items)?);
    }
    Ok(lists)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(config_path: &Path, seed_override: Option<u64>) -> Result<()> {
    let started = Instant::now();
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        config.model.training.seed = seed;
    }
    let run_name = config.run_name.clone().unwrap_or_else(|| {
        config_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
    });
    let run_dir = {
        let base = out_root().join(&run_name);
        let dir = unique_dir(&base);
        std::fs::create_dir_all(&dir)?;
        dir
    };
    println!("run directory: {}", run_dir.display());

    let paths = DatasetPaths::in_dir(&config.dataset.dir)?;
    let catalog = parse_news_tsv(&paths.news, config.model.data.title_len)?;
    let log = parse_behaviors_tsv(&paths.behaviors, &catalog)?;
    let boundary = resolve_boundary(&config.dataset)?;
    let (train_split, val_split) = temporal_split(&log, boundary)?;
    println!(
        "data: {} articles, {} train / {} validation impressions",
        catalog.len(),
        train_split.len(),
        val_split.len()
    );

    let stores = load_frozen(&config.model, &paths)?;
    let word_vectors = if config.model.news.family.uses_word_embeddings() {
        match &paths.word_vectors {
            Some(p) => Some(load_word_embeddings(p, &catalog.vocab, config.model.training.seed)?),
            None => None,
        }
    } else {
        None
    };
    let users = collect_users(&train_split);
    let mut model = {
        let frozen = stores.inputs();
        RecommenderModel::<f32>::init(
            config.model.clone(),
            &catalog,
            &frozen,
            word_vectors.as_ref(),
            users,
        )?
    };

    let outcome = {
        let frozen = stores.inputs();
        train(&mut model, &catalog, &frozen, &train_split, &val_split)?
    };
    if outcome.skipped_impressions > 0 {
        eprintln!(
            "warning: skipped {} impression(s) with clicks but no negatives",
            outcome.skipped_impressions
        );
    }
    for rec in &outcome.epochs {
        println!(
            "epoch {}/{}: loss {:.6}, val nDCG@10 {:.6}",
            rec.epoch,
            outcome.epochs.len(),
            rec.mean_loss,
            rec.val_ndcg
        );
    }

    // Persist: normalized config, epoch CSV, checkpoint + manifest.
    let digest = config_digest(&model.config)?;
    let normalized = toml::to_string(&config)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    write_atomic(&run_dir.join("config.toml"), normalized.as_bytes())?;
    write_atomic(&run_dir.join("epochs.csv"), epochs_csv(&outcome).as_bytes())?;
    let ckpt_path = run_dir.join("checkpoint.ckpt");
    Checkpoint::from_model(&model)?.save(&ckpt_path)?;
    let manifest = CheckpointManifest {
        seed: model.config.training.seed,
        epochs_run: outcome.epochs.len(),
        best_epoch: outcome.best_epoch,
        best_val_ndcg: outcome.best_val_ndcg,
        digest: digest.clone(),
    };
    write_atomic(&manifest_path(&ckpt_path), manifest.to_text().as_bytes())?;

    // Final test metrics when the dataset has a held-out log.
    let mut test_lines = String::new();
    if lm_has_test(&paths) {
        let test_log = parse_behaviors_tsv(paths.behaviors_test.as_ref().unwrap(), &catalog)?;
        let frozen = stores.inputs();
        let engine = InferenceEngine::new(&model, &catalog, frozen);
        let report = engine.evaluate(&test_log.impressions, &config.ks)?;
        if report.excluded_no_positive > 0 {
            eprintln!(
                "warning: excluded {} test impression(s) without positives",
                report.excluded_no_positive
            );
        }
        write_atomic(&run_dir.join("test_metrics.csv"), metrics_csv(&report.per_k).as_bytes())?;
        let lists = rank_all(&engine, &test_log.impressions)?;
        write_atomic(&run_dir.join("test_rankings.tsv"), rankings_to_tsv(&lists).as_bytes())?;
        for &(k, v) in &report.per_k {
            println!("test nDCG@{k}: {v:.6}");
            test_lines.push_str(&format!("test_ndcg@{k} = {v:.6}\n"));
        }
        test_lines.push_str(&format!("test_evaluated = {}\n", report.evaluated));
        test_lines.push_str(&format!("test_excluded = {}\n", report.excluded_no_positive));
    }

    // Run manifest, written last and atomically.
    let mut rm = String::new();
    rm.push_str(&format!("config_digest = {digest}\n"));
    rm.push_str(&format!("code_version = {}\n", env!("CARGO_PKG_VERSION")));
    rm.push_str(&format!("seed = {}\n", model.config.training.seed));
    rm.push_str(&format!("wall_clock_secs = {:.3}\n", started.elapsed().as_secs_f64()));
    rm.push_str(&format!("epochs_run = {}\n", outcome.epochs.len()));
    if let Some(e) = outcome.best_epoch {
        rm.push_str(&format!("best_epoch = {e}\n"));
    }
    if let Some(v) = outcome.best_val_ndcg {
        rm.push_str(&format!("best_val_ndcg = {v:.6}\n"));
    }
    rm.push_str(&format!("samples_per_epoch = {}\n", outcome.samples));
    rm.push_str(&format!("skipped_impressions = {}\n", outcome.skipped_impressions));
    rm.push_str(&test_lines);
    write_atomic(&run_dir.join("run_manifest.txt"), rm.as_bytes())?;
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn lm_has_test(paths: &DatasetPaths) -> bool {
    paths.behaviors_test.is_some()
}

fn epochs_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("epoch,mean_loss,val_ndcg10\n");
    for r in &outcome.epochs {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.epoch, r.mean_loss, r.val_ndcg));
    }
    s
}

fn metrics_csv(per_k: &[(usize, f64)]) -> String {
    let mut s = String::from("k,ndcg\n");
    for &(k, v) in per_k {
        s.push_str(&format!("{k},{v:.6}\n"));
    }
    s
}

fn rank_all(
    engine: &InferenceEngine<'_, f32>,
    impressions: &[Impression],
) -> Result<Vec<RecommendationList>> {
    impressions.iter().map(|imp| engine.rank(imp, imp.candidates.len())).collect()
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(
    checkpoint: &Path,
    data: &Path,
    ks: &[usize],
    per_impression: bool,
    out: Option<&Path>,
) -> Result<()> {
    if ks.is_empty() || ks.iter().any(|&k| k == 0) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage(format!("--k must be positive ascending, got {ks:?}")));
    }
    let lm = load_model(checkpoint, data)?;
    let impressions = evaluation_log(&lm)?;
    let frozen = lm.stores.inputs();
    let engine = InferenceEngine::new(&lm.model, &lm.catalog, frozen);
    let report = engine.evaluate(&impressions, ks)?;
    let default_name = format!(
        "eval-{}",
        checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    );
    let dir = resolve_out(out, &default_name)?;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&report.per_k).as_bytes())?;
    let lists = rank_all(&engine, &impressions)?;
    write_atomic(&dir.join("rankings.tsv"), rankings_to_tsv(&lists).as_bytes())?;
    if per_impression {
        let mut s = String::from("impression_id");
        for &(k, _) in &report.per_k {
            s.push_str(&format!(",ndcg{k}"));
        }
        s.push('\n');
        for (id, row) in &report.per_impression {
            s.push_str(id);
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        write_atomic(&dir.join("per_impression.csv"), s.as_bytes())?;
    }
    for &(k, v) in &report.per_k {
        println!("nDCG@{k}: {v:.6}");
    }
    println!(
        "impressions evaluated: {} (excluded without positives: {})",
        report.evaluated, report.excluded_no_positive
    );
    println!("artifacts: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// dump-embeddings
// ---------------------------------------------------------------------------

fn cmd_dump_embeddings(
    checkpoint: &Path,
    data: &Path,
    target: DumpTarget,
    tsv: bool,
    out: Option<&Path>,
) -> Result<()> {
    let lm = load_model(checkpoint, data)?;
    let impressions = evaluation_log(&lm)?;
    let frozen = lm.stores.inputs();
    let engine = InferenceEngine::new(&lm.model, &lm.catalog, frozen);
    let dim = match target {
        DumpTarget::News => lm.model.news.output_dim(),
        DumpTarget::User => lm.model.user.output_dim(),
    };
    let mut store = FrozenStore::new(dim)?;
    match target {
        DumpTarget::News => {
            let mut ids: Vec<&str> = impressions
                .iter()
                .flat_map(|imp| {
                    imp.history.iter().chain(imp.candidates.iter()).map(String::as_str)
                })
                .collect();
            ids.sort_unstable();
            ids.dedup();
            for id in ids {
                let emb = engine.news_embedding(id)?;
                store.insert(id, emb.data())?;
            }
        }
        DumpTarget::User => {
            // One row per user, encoding the history of their latest
            // impression; the candidate-aware family is conditioned on a
            // zero candidate for a candidate-free dump.
            let mut latest: HashMap<&str, &Impression> = HashMap::new();
            for imp in &impressions {
                let slot = latest.entry(imp.user_id.as_str()).or_insert(imp);
                if imp.timestamp >= slot.timestamp {
                    *slot = imp;
                }
            }
            let mut users: Vec<&str> = latest.keys().copied().collect();
            users.sort_unstable();
            let zero_candidate = lm
                .model
                .user
                .config()
                .family
                .is_candidate_aware()
                .then(|| Tensor::<f32>::zeros(vec![1, lm.model.news.output_dim()]));
            for user in users {
                let imp = latest[user];
                let emb = engine.user_embedding(
                    &imp.history,
                    &imp.user_id,
                    zero_candidate.as_ref(),
                )?;
                store.insert(user, emb.data())?;
            }
        }
    }
    let name = match target {
        DumpTarget::News => "news_embeddings",
        DumpTarget::User => "user_embeddings",
    };
    let default_name = format!(
        "dump-{}",
        checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    );
    let dir = resolve_out(out, &default_name)?;
    let bin_path = dir.join(format!("{name}.bin"));
    store.save_binary(&bin_path)?;
    if tsv {
        store.save_tsv(&dir.join(format!("{name}.tsv")))?;
    }
    println!("{} rows × {dim} dims → {}", store.len(), bin_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

/// Distinct labels from artifact paths: file stems, suffixed on collision.
fn artifact_labels(paths: &[PathBuf]) -> Vec<String> {
    let mut labels = Vec::with_capacity(paths.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for p in paths {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "artifact".into());
        let n = seen.entry(stem.clone()).or_insert(0);
        let label = if *n == 0 { stem.clone() } else { format!("{stem}-{n}") };
        *n += 1;
        labels.push(label);
    }
    labels
}

/// Load an embedding store as an id-sorted f64 matrix.
fn load_embedding_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    let store = FrozenStore::load(path)?;
    let mut ids: Vec<&str> = store.ids().iter().map(String::as_str).collect();
    ids.sort_unstable();
    let dim = store.dim();
    let mut data = Vec::with_capacity(ids.len() * dim);
    for id in &ids {
        let row = store.lookup(id).expect("id listed by the store");
        data.extend(row.iter().map(|&v| v as f64));
    }
    EmbeddingMatrix::new(
        ids.iter().map(|s| s.to_string()).collect(),
        Tensor::new(vec![ids.len(), dim], data)?,
    )
}

/// Load a rankings TSV sorted by impression id.
fn load_rankings(path: &Path) -> Result<Vec<RecommendationList>> {
    let text = std::fs::read_to_string(path)?;
    let mut lists = rankings_from_tsv(&text, path)?;
    lists.sort_by(|a, b| a.impression_id.cmp(&b.impression_id));
    Ok(lists)
}

/// Parse a `start:end` sweep range.
fn parse_sweep(s: &str) -> Result<(usize, usize)> {
    let parsed = s.split_once(':').and_then(|(a, b)| {
        let a: usize = a.parse().ok()?;
        let b: usize = b.parse().ok()?;
        Some((a, b))
    });
    match parsed {
        Some((a, b)) if a >= 1 && a <= b => Ok((a, b)),
        _ => Err(Error::Usage(format!("--sweep-k expects 'start:end' with 1 <= start <= end, got '{s}'"))),
    }
}

fn cmd_compare(
    artifacts: &[PathBuf],
    metric: CompareMetric,
    k: usize,
    cluster: bool,
    sweep: Option<&str>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let _ = seed; // comparisons are exact; no seeded subsampling at the CLI
    if artifacts.len() < 2 {
        return Err(Error::Usage("compare needs at least two artifacts".into()));
    }
    let labels = artifact_labels(artifacts);
    let (matrix, sweep_csv): (ComparisonMatrix, Option<String>) = match metric {
        CompareMetric::Cka => {
            let mut models = Vec::with_capacity(artifacts.len());
            for (path, label) in artifacts.iter().zip(&labels) {
                models.push((label.clone(), load_embedding_matrix(path)?));
            }
            (cka_matrix(&models)?, None)
        }
        CompareMetric::Jaccard => {
            if k == 0 {
                return Err(Error::Usage("--k must be positive".into()));
            }
            let mut models = Vec::with_capacity(artifacts.len());
            for (path, label) in artifacts.iter().zip(&labels) {
                models.push((label.clone(), load_rankings(path)?));
            }
            let matrix = jaccard_matrix(&models, k)?;
            let sweep_csv = match sweep {
                Some(spec) => {
                    let (lo, hi) = parse_sweep(spec)?;
                    Some(sweep_csv(&models, lo, hi)?)
                }
                None => None,
            };
            (matrix, sweep_csv)
        }
    };
    let dir = resolve_out(out, &format!("compare-{}", matrix.metric.label()))?;
    write_atomic(&dir.join("comparison.csv"), matrix.to_csv().as_bytes())?;
    print!("{}", matrix.to_csv());
    if let Some(csv) = sweep_csv {
        write_atomic(&dir.join("jaccard_sweep.csv"), csv.as_bytes())?;
    }
    if cluster {
        let merges = hierarchical_cluster(&matrix)?;
        let text = dendrogram_text(&matrix, &merges);
        write_atomic(&dir.join("dendrogram.txt"), text.as_bytes())?;
        print!("{text}");
    }
    println!("artifacts: {}", dir.display());
    Ok(())
}

/// Mean Jaccard@k per model pair over a k sweep, as CSV.
fn sweep_csv(
    models: &[(String, Vec<RecommendationList>)],
    lo: usize,
    hi: usize,
) -> Result<String> {
    let mut s = String::from("k");
    for i in 0..models.len() {
        for j in (i + 1)..models.len() {
            s.push_str(&format!(",{} vs {}", models[i].0, models[j].0));
        }
    }
    s.push('\n');
    for k in lo..=hi {
        s.push_str(&k.to_string());
        for i in 0..models.len() {
            for j in (i + 1)..models.len() {
                let v = mean_jaccard(&models[i].1, &models[j].1, k)?;
                s.push_str(&format!(",{v:.6}"));
            }
        }
        s.push('\n');
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(spec_path: &Path, out: Option<&Path>, seed_override: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| {
        Error::Config(format!("cannot read spec '{}': {e}", spec_path.display()))
    })?;
    let mut spec = SyntheticSpec::from_toml(&text, spec_path)?;
    if let Some(seed) = seed_override {
        spec.seed = seed;
    }
    let dataset = generate_synthetic(&spec)?;
    let default_name = format!(
        "synth-{}",
        spec_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    );
    let dir = resolve_out(out, &default_name)?;
    dataset.write_to_dir(&dir)?;
    println!(
        "synthetic dataset: {} articles, {} users, {} topics → {}",
        spec.total_news(),
        spec.users,
        spec.topics,
        dir.display()
    );
    Ok(())
}
