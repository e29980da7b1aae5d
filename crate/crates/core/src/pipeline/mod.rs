//! Model assembly, training, ranking, and persistence.
//!
//! A recommender couples one news encoder with one user encoder over a
//! shared parameter set. Candidates are scored by the dot product of the
//! two embeddings; training minimizes negative-sampled listwise
//! cross-entropy (one positive against `K` sampled negatives) with Adam,
//! keeping the parameters from the epoch with the best validation nDCG@10.
//!
//! Checkpoints are a versioned binary container — magic, format version,
//! the normalized config plus its SHA-256 digest, the user-id table, and
//! named little-endian `f32` parameter blobs — with a human-readable
//! manifest sidecar.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::frozen::FrozenStore;
use crate::data::wordvec::WordVectorTable;
use crate::data::{Impression, NewsCatalog};
use crate::metrics::{ndcg_at_k, RecommendationList};
use crate::news::{FrozenInputs, NewsDims, NewsEncoder, NewsEncoderConfig};
use crate::tensor::param::{ParamBuilder, ParamSet};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use crate::user::{UserEncoder, UserEncoderConfig};
use crate::{seed_stream, seeds, DetRng, Error, Result};

/// The default learning-rate grid searched in the experiments.
pub const LR_GRID: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Default epoch count for encoders that train word embeddings.
pub const DEFAULT_EPOCHS_WORD: usize = 20;
/// Default epoch count for encoders over frozen stores.
pub const DEFAULT_EPOCHS_FROZEN: usize = 10;

/// Optimization hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Adam learning rate (grid default: [`LR_GRID`]).
    pub learning_rate: f64,
    /// Epoch count; `None` resolves per news family (20 trainable-word,
    /// 10 frozen).
    pub epochs: Option<usize>,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Negatives sampled per positive (`K`).
    pub negatives: usize,
    /// Master seed for initialization, sampling, and shuffling.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            epochs: None,
            batch_size: 8,
            negatives: 4,
            seed: 42,
        }
    }
}

/// Data-preparation knobs that change encodings and therefore must travel
/// with the model (they are part of the config digest).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Fixed title length in tokens; longer titles truncate, shorter pad.
    pub title_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { title_len: crate::data::DEFAULT_TITLE_LEN }
    }
}

/// Complete model + training description.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// News-encoder architecture.
    pub news: NewsEncoderConfig,
    /// User-encoder architecture.
    pub user: UserEncoderConfig,
    /// Optimization settings.
    pub training: TrainingConfig,
    /// Data-preparation knobs.
    pub data: DataConfig,
}

impl ModelConfig {
    /// Validate everything checkable without data dimensions.
    pub fn validate(&self) -> Result<()> {
        self.news.validate()?;
        if self.data.title_len == 0 {
            return Err(Error::Config("title_len must be at least 1".into()));
        }
        let t = &self.training;
        if !(t.learning_rate > 0.0) || !t.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                t.learning_rate
            )));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if t.negatives == 0 {
            return Err(Error::Config("negatives (K) must be at least 1".into()));
        }
        Ok(())
    }

    /// Epochs to run, with per-family defaults.
    pub fn resolved_epochs(&self) -> usize {
        self.training.epochs.unwrap_or(if self.news.family.uses_word_embeddings() {
            DEFAULT_EPOCHS_WORD
        } else {
            DEFAULT_EPOCHS_FROZEN
        })
    }

    /// Parse from TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Normalized TOML form — the basis for config digests, independent of
    /// the formatting of the file the config was read from.
    pub fn normalized_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }
}

/// SHA-256 hex digest of a config's normalized form.
pub fn config_digest(config: &ModelConfig) -> Result<String> {
    let text = config.normalized_toml()?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Dot product of two equal-length embedding slices (f64 accumulation).
pub fn score<R: Real>(candidate: &[R], user: &[R]) -> Result<R> {
    if candidate.len() != user.len() {
        return Err(Error::Config(format!(
            "score: candidate dim {} != user dim {}",
            candidate.len(),
            user.len()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in candidate.iter().zip(user) {
        acc += a.as_f64() * b.as_f64();
    }
    Ok(R::of(acc))
}

/// One training instance: a click plus `K` sampled negatives from the same
/// impression.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// The clicking user.
    pub user_id: String,
    /// Click history at impression time (oldest first).
    pub history: Vec<String>,
    /// The clicked candidate.
    pub positive: String,
    /// Sampled non-clicked candidates (length `K`).
    pub negatives: Vec<String>,
}

/// [`build_training_samples`] output.
#[derive(Debug, Clone)]
pub struct SampleSet {
    /// Samples in impression order (positives in slate order).
    pub samples: Vec<TrainingSample>,
    /// Impressions with clicks but no negatives, skipped entirely.
    pub skipped_no_negatives: usize,
}

/// Expand impressions into listwise training samples: one per clicked
/// candidate, each with `k` negatives drawn uniformly without replacement
/// from that impression's non-clicked candidates (with replacement only
/// when fewer than `k` exist). Deterministic under `seed`.
pub fn build_training_samples(
    impressions: &[Impression],
    k: usize,
    seed: u64,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::Usage("negative sampling needs K >= 1".into()));
    }
    let mut rng = DetRng::seed_from_u64(seed_stream(seed, seeds::SAMPLING));
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for imp in impressions {
        let pool: Vec<&str> = imp
            .candidates
            .iter()
            .zip(&imp.labels)
            .filter(|(_, &l)| !l)
            .map(|(c, _)| c.as_str())
            .collect();
        let positives = imp.positive_indices();
        if positives.is_empty() {
            continue;
        }
        if pool.is_empty() {
            skipped += 1;
            continue;
        }
        for p in positives {
            let negatives: Vec<String> = if pool.len() >= k {
                rand::seq::index::sample(&mut rng, pool.len(), k)
                    .iter()
                    .map(|i| pool[i].to_string())
                    .collect()
            } else {
                (0..k).map(|_| pool[rng.random_range(0..pool.len())].to_string()).collect()
            };
            samples.push(TrainingSample {
                user_id: imp.user_id.clone(),
                history: imp.history.clone(),
                positive: imp.candidates[p].clone(),
                negatives,
            });
        }
    }
    Ok(SampleSet { samples, skipped_no_negatives: skipped })
}

/// Users in first-seen order over a behavior stream — the long-term table
/// layout.
pub fn collect_users(impressions: &[Impression]) -> Vec<String> {
    let mut seen = HashMap::new();
    let mut users = Vec::new();
    for imp in impressions {
        if seen.insert(imp.user_id.clone(), ()).is_none() {
            users.push(imp.user_id.clone());
        }
    }
    users
}

/// A news encoder and a user encoder over one parameter set.
#[derive(Debug)]
pub struct RecommenderModel<R: Real> {
    /// The configuration the model was built from.
    pub config: ModelConfig,
    /// All trainable parameters.
    pub params: ParamSet<R>,
    /// News tower.
    pub news: NewsEncoder,
    /// User tower.
    pub user: UserEncoder,
    /// User ids in long-term-table order.
    pub users: Vec<String>,
    /// Reverse map id → table row.
    pub user_index: HashMap<String, usize>,
}

impl<R: Real> RecommenderModel<R> {
    /// Initialize a fresh model with seeded parameters.
    ///
    /// `users` fixes the long-term table layout and should list the
    /// training-split users (first-seen order); users outside it are
    /// treated as unseen at inference.
    pub fn init(
        config: ModelConfig,
        catalog: &NewsCatalog,
        frozen: &FrozenInputs,
        word_vectors: Option<&WordVectorTable>,
        users: Vec<String>,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = DetRng::seed_from_u64(seed_stream(config.training.seed, seeds::INIT));
        let mut pb = ParamBuilder::init(&mut params, &mut rng);
        let dims = NewsDims::from_data(catalog, frozen);
        let news = NewsEncoder::build(&mut pb, &config.news, &dims, word_vectors)?;
        let user = UserEncoder::build(&mut pb, &config.user, news.output_dim(), users.len())?;
        let user_index =
            users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect::<HashMap<_, _>>();
        Ok(RecommenderModel { config, params, news, user, users, user_index })
    }

    /// Rebuild a model from a checkpoint against (possibly re-parsed) data.
    ///
    /// Dimension disagreements between the checkpoint and the data surface
    /// as artifact-mismatch errors naming the parameter.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        catalog: &NewsCatalog,
        frozen: &FrozenInputs,
    ) -> Result<Self> {
        let config = ModelConfig::from_toml(&ckpt.config_toml)?;
        let mut params = ParamSet::new();
        for p in &ckpt.params {
            let data: Vec<R> = p.values.iter().map(|&v| R::of(v as f64)).collect();
            params.add(p.name.clone(), Tensor::new(p.shape.clone(), data)?, true)?;
        }
        let mut pb = ParamBuilder::load(&mut params);
        let dims = NewsDims::from_data(catalog, frozen);
        let news = NewsEncoder::build(&mut pb, &config.news, &dims, None)?;
        let user = UserEncoder::build(&mut pb, &config.user, news.output_dim(), ckpt.users.len())?;
        let users = ckpt.users.clone();
        let user_index =
            users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect::<HashMap<_, _>>();
        Ok(RecommenderModel { config, params, news, user, users, user_index })
    }

    /// Long-term-table row for a user id, `None` when unseen.
    pub fn user_row(&self, user_id: &str) -> Option<usize> {
        self.user_index.get(user_id).copied()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

/// Leading bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"NLCKPT01";
/// Current container format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter blob.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointParam {
    /// Parameter name (e.g. `news.conv.kernels`).
    pub name: String,
    /// Tensor shape.
    pub shape: Vec<usize>,
    /// Row-major values.
    pub values: Vec<f32>,
}

/// In-memory checkpoint: everything needed to rebuild a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Container format version.
    pub version: u32,
    /// Normalized config TOML.
    pub config_toml: String,
    /// SHA-256 hex digest of `config_toml`.
    pub digest: String,
    /// User ids in long-term-table order.
    pub users: Vec<String>,
    /// Named parameter blobs in construction order.
    pub params: Vec<CheckpointParam>,
}

impl Checkpoint {
    /// Snapshot a model's parameters and layout.
    pub fn from_model<R: Real>(model: &RecommenderModel<R>) -> Result<Self> {
        let config_toml = model.config.normalized_toml()?;
        let digest = config_digest(&model.config)?;
        let params = model
            .params
            .iter()
            .map(|(_, p)| CheckpointParam {
                name: p.name().to_string(),
                shape: p.value().shape().to_vec(),
                values: p.value().data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            config_toml,
            digest,
            users: model.users.clone(),
            params,
        })
    }

    /// Serialize to the binary container format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let cfg = self.config_toml.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        let digest = self.digest.as_bytes();
        out.extend_from_slice(&(digest.len() as u32).to_le_bytes());
        out.extend_from_slice(digest);
        out.extend_from_slice(&(self.users.len() as u32).to_le_bytes());
        for u in &self.users {
            let b = u.as_bytes();
            out.extend_from_slice(&(b.len() as u16).to_le_bytes());
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse and integrity-check the binary container.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::ArtifactMismatch(
                "not a checkpoint file (bad magic bytes)".into(),
            ));
        }
        let version = r.u32()?;
        if version > CHECKPOINT_VERSION {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint format version {version} is newer than supported {CHECKPOINT_VERSION}"
            )));
        }
        let cfg_len = r.u32()? as usize;
        let config_toml = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| Error::ArtifactMismatch("checkpoint config is not UTF-8".into()))?;
        let digest_len = r.u32()? as usize;
        let digest = String::from_utf8(r.take(digest_len)?.to_vec())
            .map_err(|_| Error::ArtifactMismatch("checkpoint digest is not UTF-8".into()))?;
        let mut hasher = Sha256::new();
        hasher.update(config_toml.as_bytes());
        if hex_string(&hasher.finalize()) != digest {
            return Err(Error::ArtifactMismatch(
                "checkpoint config digest does not match its config payload".into(),
            ));
        }
        let user_count = r.u32()? as usize;
        let mut users = Vec::with_capacity(user_count);
        for _ in 0..user_count {
            let len = r.u16()? as usize;
            users.push(
                String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| Error::ArtifactMismatch("checkpoint user id not UTF-8".into()))?,
            );
        }
        let param_count = r.u32()? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| {
                Error::ArtifactMismatch("checkpoint parameter name not UTF-8".into())
            })?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(CheckpointParam { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { version, config_toml, digest, users, params })
    }

    /// Write the container to disk.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Read a container from disk.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::ArtifactMismatch(msg) => {
                Error::ArtifactMismatch(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ArtifactMismatch("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Human-readable sidecar describing how a checkpoint was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    /// Training seed.
    pub seed: u64,
    /// Epochs actually run.
    pub epochs_run: usize,
    /// 1-based epoch the retained parameters come from.
    pub best_epoch: Option<usize>,
    /// Validation nDCG@10 at that epoch.
    pub best_val_ndcg: Option<f64>,
    /// Config digest, matching the checkpoint.
    pub digest: String,
}

impl CheckpointManifest {
    /// Serialize as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        use std::fmt::Write as _;
        let _ = writeln!(s, "format_version = {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "config_digest = {}", self.digest);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "epochs_run = {}", self.epochs_run);
        if let Some(e) = self.best_epoch {
            let _ = writeln!(s, "best_epoch = {e}");
        }
        if let Some(m) = self.best_val_ndcg {
            let _ = writeln!(s, "best_val_ndcg = {m:.6}");
        }
        s
    }

    /// Parse the `key = value` form.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| {
            map.get(k).cloned().ok_or_else(|| {
                Error::ArtifactMismatch(format!("manifest is missing '{k}'"))
            })
        };
        let parse_num = |k: &str, v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::ArtifactMismatch(format!("manifest '{k}' is not a number")))
        };
        Ok(CheckpointManifest {
            seed: parse_num("seed", &get("seed")?)?,
            epochs_run: parse_num("epochs_run", &get("epochs_run")?)? as usize,
            best_epoch: map.get("best_epoch").map(|v| parse_num("best_epoch", v)).transpose()?
                .map(|v| v as usize),
            best_val_ndcg: map
                .get("best_val_ndcg")
                .map(|v| {
                    v.parse::<f64>().map_err(|_| {
                        Error::ArtifactMismatch("manifest 'best_val_ndcg' is not a number".into())
                    })
                })
                .transpose()?,
            digest: get("config_digest")?,
        })
    }
}

/// Conventional sidecar path: `model.ckpt` → `model.manifest.txt`.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("manifest.txt")
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Immutable-model scorer with a per-engine news-embedding cache.
///
/// The cache is keyed by news id and valid only while the parameters do not
/// change; build a fresh engine after every optimizer step.
pub struct InferenceEngine<'a, R: Real> {
    model: &'a RecommenderModel<R>,
    catalog: &'a NewsCatalog,
    frozen: FrozenInputs<'a>,
    cache: RefCell<HashMap<String, Tensor<R>>>,
}

/// Mean nDCG over a split, with bookkeeping.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// `(k, mean nDCG@k)` over evaluated impressions, in request order.
    pub per_k: Vec<(usize, f64)>,
    /// Impressions contributing to the means.
    pub evaluated: usize,
    /// Impressions excluded for lacking any positive label.
    pub excluded_no_positive: usize,
    /// Per-impression values aligned with `per_k`'s ks.
    pub per_impression: Vec<(String, Vec<f64>)>,
}

impl<'a, R: Real> InferenceEngine<'a, R> {
    /// Wrap a model and its data context.
    pub fn new(
        model: &'a RecommenderModel<R>,
        catalog: &'a NewsCatalog,
        frozen: FrozenInputs<'a>,
    ) -> Self {
        InferenceEngine { model, catalog, frozen, cache: RefCell::new(HashMap::new()) }
    }

    /// The encoded `[1 × d]` article embedding, cached by id.
    pub fn news_embedding(&self, news_id: &str) -> Result<Tensor<R>> {
        if let Some(t) = self.cache.borrow().get(news_id) {
            return Ok(t.clone());
        }
        let article = self.catalog.require(news_id)?;
        let mut tape = Tape::inference();
        let node = self.model.news.encode(&mut tape, &self.model.params, article, &self.frozen)?;
        let value = tape.value(node).clone();
        self.cache.borrow_mut().insert(news_id.to_string(), value.clone());
        Ok(value)
    }

    /// Encode a click history (optionally candidate-conditioned) into a
    /// `[1 × d]` user embedding.
    pub fn user_embedding(
        &self,
        history: &[String],
        user_id: &str,
        candidate: Option<&Tensor<R>>,
    ) -> Result<Tensor<R>> {
        let mut tape = Tape::inference();
        let mut nodes = Vec::with_capacity(history.len());
        for id in history {
            let emb = self.news_embedding(id)?;
            nodes.push(tape.input(emb));
        }
        let mask = vec![true; nodes.len()];
        let cand_node = candidate.map(|c| tape.input(c.clone()));
        let user = self.model.user.encode_user(
            &mut tape,
            &self.model.params,
            &nodes,
            &mask,
            self.model.user_row(user_id),
            cand_node,
        )?;
        Ok(tape.value(user).clone())
    }

    /// Score every candidate in an impression.
    pub fn score_candidates(&self, imp: &Impression) -> Result<Vec<(String, f64)>> {
        let cand_aware = self.model.user.config().family.is_candidate_aware();
        let mut out = Vec::with_capacity(imp.candidates.len());
        let shared_user = if cand_aware {
            None
        } else {
            Some(self.user_embedding(&imp.history, &imp.user_id, None)?)
        };
        for cand in &imp.candidates {
            let n = self.news_embedding(cand)?;
            let u = match &shared_user {
                Some(u) => u.clone(),
                None => self.user_embedding(&imp.history, &imp.user_id, Some(&n))?,
            };
            let s = score(n.data(), u.data())?.as_f64();
            if !s.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite score for candidate '{cand}' in impression '{}'",
                    imp.id
                )));
            }
            out.push((cand.clone(), s));
        }
        Ok(out)
    }

    /// Rank an impression's candidates, descending score with ties broken
    /// by ascending news id. `k` beyond the pool returns the full list.
    pub fn rank(&self, imp: &Impression, k: usize) -> Result<RecommendationList> {
        let mut scored = self.score_candidates(imp)?;
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).expect("scores checked finite").then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(k.min(scored.len()));
        RecommendationList::new(imp.id.clone(), scored)
    }

    /// Mean nDCG@k over a split, excluding (and counting) impressions with
    /// no positive label.
    pub fn evaluate(&self, impressions: &[Impression], ks: &[usize]) -> Result<EvalReport> {
        if ks.is_empty() {
            return Err(Error::Usage("evaluate needs at least one k".into()));
        }
        let mut sums = vec![0.0; ks.len()];
        let mut evaluated = 0usize;
        let mut excluded = 0usize;
        let mut per_impression = Vec::new();
        for imp in impressions {
            if !imp.labels.iter().any(|&l| l) {
                excluded += 1;
                continue;
            }
            let ranked = self.rank(imp, imp.candidates.len())?;
            let label_of: HashMap<&str, bool> = imp
                .candidates
                .iter()
                .map(String::as_str)
                .zip(imp.labels.iter().copied())
                .collect();
            let ranked_labels: Vec<bool> =
                ranked.items.iter().map(|(id, _)| label_of[id.as_str()]).collect();
            let mut row = Vec::with_capacity(ks.len());
            for (i, &k) in ks.iter().enumerate() {
                let v = ndcg_at_k(&ranked_labels, k)?;
                sums[i] += v;
                row.push(v);
            }
            per_impression.push((imp.id.clone(), row));
            evaluated += 1;
        }
        if evaluated == 0 {
            return Err(Error::Degenerate(
                "evaluation split has no impression with a positive label".into(),
            ));
        }
        let per_k =
            ks.iter().zip(&sums).map(|(&k, &s)| (k, s / evaluated as f64)).collect();
        Ok(EvalReport { per_k, evaluated, excluded_no_positive: excluded, per_impression })
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One epoch's summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean training loss over samples.
    pub mean_loss: f64,
    /// Validation nDCG@10 after the epoch.
    pub val_ndcg: f64,
}

/// Training-run summary.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Per-epoch log, empty when epochs = 0.
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were retained.
    pub best_epoch: Option<usize>,
    /// Validation nDCG@10 of the retained parameters.
    pub best_val_ndcg: Option<f64>,
    /// Training samples per epoch.
    pub samples: usize,
    /// Impressions skipped for lacking negatives.
    pub skipped_impressions: usize,
}

/// Encode an article on the batch tape, deduplicating by id.
fn encode_cached<R: Real>(
    model: &RecommenderModel<R>,
    tape: &mut Tape<R>,
    catalog: &NewsCatalog,
    frozen: &FrozenInputs,
    cache: &mut HashMap<String, NodeId>,
    news_id: &str,
) -> Result<NodeId> {
    if let Some(&n) = cache.get(news_id) {
        return Ok(n);
    }
    let article = catalog.require(news_id)?;
    let node = model.news.encode(tape, &model.params, article, frozen)?;
    cache.insert(news_id.to_string(), node);
    Ok(node)
}

/// Graph for one sample's listwise loss: positive at index 0.
fn sample_loss<R: Real>(
    model: &RecommenderModel<R>,
    tape: &mut Tape<R>,
    catalog: &NewsCatalog,
    frozen: &FrozenInputs,
    cache: &mut HashMap<String, NodeId>,
    sample: &TrainingSample,
) -> Result<NodeId> {
    let mut hist = Vec::with_capacity(sample.history.len());
    for id in &sample.history {
        hist.push(encode_cached(model, tape, catalog, frozen, cache, id)?);
    }
    let mask = vec![true; hist.len()];
    let user_row = model.user_row(&sample.user_id);
    let mut cand_nodes = Vec::with_capacity(1 + sample.negatives.len());
    cand_nodes.push(encode_cached(model, tape, catalog, frozen, cache, &sample.positive)?);
    for id in &sample.negatives {
        cand_nodes.push(encode_cached(model, tape, catalog, frozen, cache, id)?);
    }
    let cand_aware = model.user.config().family.is_candidate_aware();
    let shared_user = if cand_aware {
        None
    } else {
        Some(model.user.encode_user(tape, &model.params, &hist, &mask, user_row, None)?)
    };
    let mut score_nodes = Vec::with_capacity(cand_nodes.len());
    for &n in &cand_nodes {
        let u = match shared_user {
            Some(u) => u,
            None => model.user.encode_user(tape, &model.params, &hist, &mask, user_row, Some(n))?,
        };
        let nt = tape.transpose(n)?;
        score_nodes.push(tape.matmul(u, nt)?);
    }
    let scores = tape.concat_cols(&score_nodes)?;
    tape.listwise_ce(scores, 0)
}

/// Train in place: seeded shuffling, mini-batch listwise cross-entropy,
/// Adam steps, per-epoch validation nDCG@10, and retention of the
/// best-validation parameters.
pub fn train<R: Real>(
    model: &mut RecommenderModel<R>,
    catalog: &NewsCatalog,
    frozen: &FrozenInputs,
    train_split: &[Impression],
    val_split: &[Impression],
) -> Result<TrainOutcome> {
    if train_split.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val_split.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let tc = model.config.training.clone();
    let built = build_training_samples(train_split, tc.negatives, tc.seed)?;
    if built.samples.is_empty() {
        return Err(Error::Degenerate(
            "no trainable samples: no impression has both a click and a negative".into(),
        ));
    }
    let epochs = model.config.resolved_epochs();
    let mut shuffle_rng = DetRng::seed_from_u64(seed_stream(tc.seed, seeds::SHUFFLE));
    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut best_snapshot: Option<Vec<Tensor<R>>> = None;
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..built.samples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(tc.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut cache = HashMap::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &si in chunk {
                losses.push(sample_loss(
                    model,
                    &mut tape,
                    catalog,
                    frozen,
                    &mut cache,
                    &built.samples[si],
                )?);
            }
            let batch_loss = tape.mean_of(&losses)?;
            let lv = tape.value(batch_loss).at(0, 0).as_f64();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!(
                    "training diverged: loss {lv} in epoch {epoch}, batch {}",
                    batch_idx + 1
                )));
            }
            loss_sum += lv * chunk.len() as f64;
            tape.backward(batch_loss)?;
            tape.apply_grads(&mut model.params)?;
            model.params.adam_step_default(tc.learning_rate)?;
        }
        let val_ndcg = {
            let engine = InferenceEngine::new(&*model, catalog, *frozen);
            engine.evaluate(val_split, &[10])?.per_k[0].1
        };
        log.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / built.samples.len() as f64,
            val_ndcg,
        });
        if best.map_or(true, |(_, b)| val_ndcg > b) {
            best = Some((epoch, val_ndcg));
            best_snapshot = Some(model.params.snapshot_values());
        }
    }
    if let Some(snapshot) = &best_snapshot {
        model.params.restore_values(snapshot)?;
    }
    Ok(TrainOutcome {
        epochs: log,
        best_epoch: best.map(|(e, _)| e),
        best_val_ndcg: best.map(|(_, v)| v),
        samples: built.samples.len(),
        skipped_impressions: built.skipped_no_negatives,
    })
}

/// Convenience: open the frozen stores a config needs, if present.
pub struct FrozenStores {
    /// Per-article store (frozen_cls).
    pub cls: Option<FrozenStore>,
    /// Per-token store (frozen_tokens_att).
    pub tokens: Option<FrozenStore>,
}

impl FrozenStores {
    /// Borrow as encode-time inputs.
    pub fn inputs(&self) -> FrozenInputs<'_> {
        FrozenInputs { cls: self.cls.as_ref(), tokens: self.tokens.as_ref() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_behaviors_str, parse_news_str, temporal_split};
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::news::TextFamily;
    use crate::user::UserFamily;
    use std::path::Path;

    fn tiny_dataset() -> (NewsCatalog, Vec<Impression>, Vec<Impression>, WordVectorTable) {
        let spec = SyntheticSpec::from_toml(
            "topics = 4\nnews_per_topic = 20\nusers = 24\nword_dim = 12\n\
             candidate_pool = 8\nhistory_len = [3, 6]\nimpressions_per_user = 3\nseed = 21\n",
            Path::new("spec.toml"),
        )
        .unwrap();
        let ds = generate_synthetic(&spec).unwrap();
        let catalog = parse_news_str(&ds.news_tsv, Path::new("news.tsv"), 12).unwrap();
        let log = parse_behaviors_str(&ds.behaviors_tsv, Path::new("behaviors.tsv"), &catalog)
            .unwrap();
        let (train, val) = temporal_split(&log, ds.split_boundary()).unwrap();
        let wv = crate::data::wordvec::load_word_embeddings_str(
            &ds.word_vectors_txt,
            Path::new("vectors.txt"),
            &catalog.vocab,
            7,
        )
        .unwrap();
        (catalog, train, val, wv)
    }

    fn small_config(seed: u64) -> ModelConfig {
        let mut config = ModelConfig::default();
        config.news.family = TextFamily::CnnAddatt;
        config.news.word_dim = 12;
        config.news.output_dim = 16;
        config.news.query_dim = 8;
        config.user.family = UserFamily::Lf;
        config.training.seed = seed;
        config.training.epochs = Some(1);
        config
    }

    fn build_tiny_model(seed: u64) -> (RecommenderModel<f32>, NewsCatalog, Vec<Impression>, Vec<Impression>) {
        let (catalog, train_imps, val_imps, wv) = tiny_dataset();
        let users = collect_users(&train_imps);
        let model = RecommenderModel::<f32>::init(
            small_config(seed),
            &catalog,
            &FrozenInputs::none(),
            Some(&wv),
            users,
        )
        .unwrap();
        (model, catalog, train_imps, val_imps)
    }

    // ---- score ----

    #[test]
    fn score_matches_loop_oracle_and_is_symmetric() {
        let a: Vec<f64> = vec![0.3, -1.2, 0.0, 2.5, -0.7, 1.1, 0.05, -3.3];
        let b: Vec<f64> = vec![1.0, 0.5, -2.0, 0.25, 0.9, -1.4, 3.0, 0.6];
        let mut oracle = 0.0;
        for i in 0..8 {
            oracle += a[i] * b[i];
        }
        assert_eq!(score(&a, &b).unwrap(), oracle);
        assert_eq!(score(&a, &b).unwrap(), score(&b, &a).unwrap());
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        assert_eq!(score(&e1, &e2).unwrap(), 0.0, "orthogonal vectors score zero");
        assert!(matches!(score(&a[..3], &b), Err(Error::Config(_))));
    }

    // ---- negative sampling ----

    fn impression(id: &str, user: &str, cands: &[(&str, bool)]) -> Impression {
        Impression {
            id: id.into(),
            user_id: user.into(),
            timestamp: 0,
            history: vec!["H1".into()],
            candidates: cands.iter().map(|(c, _)| c.to_string()).collect(),
            labels: cands.iter().map(|&(_, l)| l).collect(),
        }
    }

    #[test]
    fn forced_negative_set_is_exhaustive() {
        let imp = impression(
            "i1",
            "u1",
            &[("P", true), ("A", false), ("B", false), ("C", false), ("D", false)],
        );
        let built = build_training_samples(&[imp], 4, 1).unwrap();
        assert_eq!(built.samples.len(), 1);
        let mut negs = built.samples[0].negatives.clone();
        negs.sort();
        assert_eq!(negs, vec!["A", "B", "C", "D"]);
        assert_eq!(built.samples[0].positive, "P");
    }

    #[test]
    fn two_positives_share_the_negative_pool() {
        let imp = impression(
            "i1",
            "u1",
            &[("P1", true), ("N1", false), ("P2", true), ("N2", false)],
        );
        let built = build_training_samples(&[imp], 2, 1).unwrap();
        assert_eq!(built.samples.len(), 2);
        for s in &built.samples {
            let mut negs = s.negatives.clone();
            negs.sort();
            assert_eq!(negs, vec!["N1", "N2"]);
        }
        assert_eq!(built.samples[0].positive, "P1");
        assert_eq!(built.samples[1].positive, "P2");
    }

    #[test]
    fn sampling_is_deterministic_and_respects_pool() {
        let imps: Vec<Impression> = (0..20)
            .map(|i| {
                impression(
                    &format!("i{i}"),
                    "u1",
                    &[
                        ("P", true),
                        ("A", false),
                        ("B", false),
                        ("C", false),
                        ("D", false),
                        ("E", false),
                        ("F", false),
                    ],
                )
            })
            .collect();
        let a = build_training_samples(&imps, 4, 9).unwrap();
        let b = build_training_samples(&imps, 4, 9).unwrap();
        assert_eq!(a.samples, b.samples, "same seed, same samples");
        let c = build_training_samples(&imps, 4, 10).unwrap();
        assert_ne!(a.samples, c.samples, "different seed, different draws");
        for s in &a.samples {
            assert_eq!(s.negatives.len(), 4);
            let mut sorted = s.negatives.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), 4, "without replacement when pool suffices");
            assert!(s.negatives.iter().all(|n| n != "P"));
        }
    }

    #[test]
    fn small_pools_fall_back_to_replacement_and_empty_pools_skip() {
        let imp = impression("i1", "u1", &[("P", true), ("N", false)]);
        let built = build_training_samples(&[imp], 4, 3).unwrap();
        assert_eq!(built.samples.len(), 1);
        assert_eq!(built.samples[0].negatives, vec!["N"; 4]);

        let all_clicked = impression("i2", "u1", &[("P1", true), ("P2", true)]);
        let built = build_training_samples(&[all_clicked], 4, 3).unwrap();
        assert!(built.samples.is_empty());
        assert_eq!(built.skipped_no_negatives, 1);

        let no_clicks = impression("i3", "u1", &[("N1", false), ("N2", false)]);
        let built = build_training_samples(&[no_clicks], 4, 3).unwrap();
        assert!(built.samples.is_empty());
        assert_eq!(built.skipped_no_negatives, 0, "clickless impressions are not warnings");
    }

    // ---- listwise loss arithmetic (through the tape op) ----

    #[test]
    fn listwise_loss_worked_examples() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.input(Tensor::new(vec![1, 5], vec![0.7; 5]).unwrap());
        let loss = tape.listwise_ce(uniform, 0).unwrap();
        assert!((tape.value(loss).at(0, 0) - 5f64.ln()).abs() < 1e-12, "uniform scores → ln 5");

        let mut tape = Tape::<f64>::new();
        let gap = tape.input(Tensor::new(vec![1, 5], vec![20.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let loss = tape.listwise_ce(gap, 0).unwrap();
        assert!(tape.value(loss).at(0, 0) < 1e-8, "score gap 20 saturates");

        let mut tape = Tape::<f64>::new();
        let s = tape.input(Tensor::new(vec![1, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let loss = tape.listwise_ce(s, 0).unwrap();
        // −log( e / (e + 4) ) evaluated directly.
        let direct = -((1f64).exp() / ((1f64).exp() + 4.0)).ln();
        assert!((tape.value(loss).at(0, 0) - direct).abs() < 1e-12);
        assert!((tape.value(loss).at(0, 0) - 0.9048).abs() < 1e-4);
    }

    #[test]
    fn listwise_loss_gradient_signs() {
        let mut rng = DetRng::seed_from_u64(11);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let pos = rng.random_range(0..5);
            let mut tape = Tape::<f64>::new();
            let s = tape.input(Tensor::new(vec![1, 5], vals).unwrap());
            let loss = tape.listwise_ce(s, pos).unwrap();
            tape.backward(loss).unwrap();
            let g = tape.grad(s).unwrap();
            for j in 0..5 {
                if j == pos {
                    assert!(g.at(0, j) < 0.0, "positive-score gradient is negative");
                } else {
                    assert!(g.at(0, j) > 0.0, "negative-score gradient is positive");
                }
            }
        }
    }

    // ---- config plumbing ----

    #[test]
    fn config_digest_ignores_formatting_but_not_content() {
        let a = ModelConfig::from_toml(
            "[news]\nfamily = \"cnn_addatt\"\n\n[training]\nseed = 7\n",
        )
        .unwrap();
        let b = ModelConfig::from_toml(
            "[training]\nseed    =    7\n[news]\nfamily=\"cnn_addatt\"\n",
        )
        .unwrap();
        assert_eq!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
        let c = ModelConfig::from_toml("[training]\nseed = 8\n").unwrap();
        assert_ne!(config_digest(&a).unwrap(), config_digest(&c).unwrap());
    }

    #[test]
    fn config_rejects_bad_fields() {
        assert!(ModelConfig::from_toml("[training]\nlearning_rate = 0.0\n").is_err());
        assert!(ModelConfig::from_toml("[training]\nbananas = 3\n").is_err());
        assert!(ModelConfig::from_toml("[training]\nbatch_size = 0\n").is_err());
        assert!(ModelConfig::from_toml("[training]\nnegatives = 0\n").is_err());
        let default = ModelConfig::from_toml("").unwrap();
        assert_eq!(default.training.learning_rate, LR_GRID[0]);
        assert_eq!(default.training.batch_size, 8);
        assert_eq!(default.training.negatives, 4);
        assert_eq!(default.resolved_epochs(), DEFAULT_EPOCHS_WORD);
    }

    // ---- ranking ----

    #[test]
    fn ranking_matches_sort_oracle_and_breaks_ties_by_id() {
        let (model, catalog, train_imps, _val) = build_tiny_model(5);
        let engine = InferenceEngine::new(&model, &catalog, FrozenInputs::none());
        let imp = &train_imps[0];
        let ranked = engine.rank(imp, imp.candidates.len()).unwrap();
        assert_eq!(ranked.items.len(), imp.candidates.len());
        // Brute-force oracle: score every candidate, full sort.
        let scored = engine.score_candidates(imp).unwrap();
        let mut oracle = scored.clone();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        assert_eq!(ranked.items, oracle);
        // k beyond the pool returns the full list; k = 1 returns the head.
        let full = engine.rank(imp, 10_000).unwrap();
        assert_eq!(full.items.len(), imp.candidates.len());
        let top1 = engine.rank(imp, 1).unwrap();
        assert_eq!(top1.items[0], ranked.items[0]);
    }

    #[test]
    fn ranking_is_invariant_to_affine_score_maps() {
        // Invariance is a property of the comparator: shifting or positively
        // scaling all scores preserves the argsort with id tie-breaks.
        let scored = vec![
            ("N2".to_string(), 0.3),
            ("N1".to_string(), 0.3),
            ("N3".to_string(), 1.1),
            ("N4".to_string(), -0.4),
        ];
        let order = |sc: &[(String, f64)]| {
            let mut v = sc.to_vec();
            v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            v.into_iter().map(|(id, _)| id).collect::<Vec<_>>()
        };
        let base = order(&scored);
        assert_eq!(base, vec!["N3", "N1", "N2", "N4"], "ties broken by ascending id");
        let shifted: Vec<(String, f64)> =
            scored.iter().map(|(id, s)| (id.clone(), s + 100.0)).collect();
        let scaled: Vec<(String, f64)> =
            scored.iter().map(|(id, s)| (id.clone(), s * 7.5)).collect();
        assert_eq!(order(&shifted), base);
        assert_eq!(order(&scaled), base);
    }

    #[test]
    fn singleton_candidate_ranks_first() {
        let (model, catalog, train_imps, _val) = build_tiny_model(5);
        let engine = InferenceEngine::new(&model, &catalog, FrozenInputs::none());
        let mut imp = train_imps[0].clone();
        imp.candidates.truncate(1);
        imp.labels.truncate(1);
        let ranked = engine.rank(&imp, 5).unwrap();
        assert_eq!(ranked.items.len(), 1);
        assert_eq!(ranked.items[0].0, imp.candidates[0]);
    }

    // ---- training ----

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (mut model, catalog, train_imps, val_imps) = build_tiny_model(6);
        model.config.training.epochs = Some(0);
        let before = model.params.snapshot_values();
        let outcome =
            train(&mut model, &catalog, &FrozenInputs::none(), &train_imps, &val_imps).unwrap();
        assert!(outcome.epochs.is_empty());
        assert_eq!(outcome.best_epoch, None);
        let after = model.params.snapshot_values();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(b.data(), a.data(), "parameters untouched");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let (mut model, catalog, train_imps, val_imps) = build_tiny_model(6);
        // Bypass config validation deliberately: lr = 0 is the null step.
        model.config.training.learning_rate = 0.0;
        model.config.training.epochs = Some(1);
        let before = model.params.snapshot_values();
        train(&mut model, &catalog, &FrozenInputs::none(), &train_imps, &val_imps).unwrap();
        let after = model.params.snapshot_values();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(b.data(), a.data(), "lr = 0 must not move parameters");
        }
    }

    #[test]
    fn training_learns_the_planted_preferences() {
        let (mut model, catalog, train_imps, val_imps) = build_tiny_model(7);
        model.config.training.epochs = Some(2);
        let untrained_ndcg = {
            let engine = InferenceEngine::new(&model, &catalog, FrozenInputs::none());
            engine.evaluate(&val_imps, &[10]).unwrap().per_k[0].1
        };
        let outcome =
            train(&mut model, &catalog, &FrozenInputs::none(), &train_imps, &val_imps).unwrap();
        assert_eq!(outcome.epochs.len(), 2);
        let best = outcome.best_val_ndcg.unwrap();
        assert!(
            best > untrained_ndcg,
            "training must beat the untrained model: {best} vs {untrained_ndcg}"
        );
        // The retained parameters reproduce the best epoch's metric.
        let engine = InferenceEngine::new(&model, &catalog, FrozenInputs::none());
        let rescored = engine.evaluate(&val_imps, &[10]).unwrap().per_k[0].1;
        assert!((rescored - best).abs() < 1e-9);
    }

    #[test]
    fn nan_parameters_surface_as_divergence_naming_the_batch() {
        let (mut model, catalog, train_imps, val_imps) = build_tiny_model(8);
        let poisoned = model.params.find("news.pool.q").unwrap();
        let shape = model.params.value(poisoned).shape().to_vec();
        model
            .params
            .set_value(poisoned, Tensor::from_fn(shape[0], shape[1], |_, _| f32::NAN))
            .unwrap();
        let err = train(&mut model, &catalog, &FrozenInputs::none(), &train_imps, &val_imps)
            .unwrap_err();
        match err {
            Error::Divergence(msg) => {
                assert!(msg.contains("epoch 1"), "{msg}");
                assert!(msg.contains("batch 1"), "{msg}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_trains_to_bit_identical_parameters() {
        let run = || {
            let (mut model, catalog, train_imps, val_imps) = build_tiny_model(9);
            model.config.training.epochs = Some(1);
            train(&mut model, &catalog, &FrozenInputs::none(), &train_imps, &val_imps).unwrap();
            model.params.snapshot_values()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data(), "bit-identical parameters across runs");
        }
    }

    // ---- checkpointing ----

    #[test]
    fn checkpoint_bytes_round_trip_and_detect_corruption() {
        let (model, _catalog, _t, _v) = build_tiny_model(10);
        let ckpt = Checkpoint::from_model(&model).unwrap();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(back.to_bytes(), bytes, "serialization is stable");

        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(
            Checkpoint::from_bytes(&bad_magic),
            Err(Error::ArtifactMismatch(_))
        ));

        // Flip a config byte: the digest no longer matches.
        let mut bad_cfg = bytes.clone();
        bad_cfg[16] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bad_cfg), Err(Error::ArtifactMismatch(_))));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::ArtifactMismatch(_))));
    }

    #[test]
    fn checkpoint_reload_reproduces_identical_rankings() {
        let (mut model, catalog, train_imps, val_imps) = build_tiny_model(11);
        model.config.training.epochs = Some(1);
        train(&mut model, &catalog, &FrozenInputs::none(), &train_imps, &val_imps).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        Checkpoint::from_model(&model).unwrap().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let rebuilt =
            RecommenderModel::<f32>::from_checkpoint(&loaded, &catalog, &FrozenInputs::none())
                .unwrap();
        assert_eq!(rebuilt.users, model.users);
        let e1 = InferenceEngine::new(&model, &catalog, FrozenInputs::none());
        let e2 = InferenceEngine::new(&rebuilt, &catalog, FrozenInputs::none());
        for imp in val_imps.iter().chain(train_imps.iter().take(5)) {
            let a = e1.rank(imp, imp.candidates.len()).unwrap();
            let b = e2.rank(imp, imp.candidates.len()).unwrap();
            assert_eq!(a, b, "round-trip must preserve every list bit-for-bit");
        }
    }

    #[test]
    fn checkpoint_dimension_mismatch_is_an_artifact_error() {
        let (model, catalog, _t, _v) = build_tiny_model(12);
        let ckpt = Checkpoint::from_model(&model).unwrap();
        // Re-parse the catalog with a different title length — same vocab,
        // same dims, fine. Instead, corrupt a parameter's shape.
        let mut wrong = ckpt.clone();
        let word = wrong.params.iter_mut().find(|p| p.name == "news.word_embed").unwrap();
        word.shape[0] += 1;
        word.values.extend(std::iter::repeat(0.0).take(word.shape[1]));
        let err = RecommenderModel::<f32>::from_checkpoint(&wrong, &catalog, &FrozenInputs::none())
            .unwrap_err();
        match err {
            Error::ArtifactMismatch(msg) => assert!(msg.contains("news.word_embed"), "{msg}"),
            other => panic!("expected artifact mismatch, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trips() {
        let m = CheckpointManifest {
            seed: 42,
            epochs_run: 5,
            best_epoch: Some(4),
            best_val_ndcg: Some(0.6125),
            digest: "abc123".into(),
        };
        let text = m.to_text();
        assert!(text.contains("seed = 42"));
        assert!(text.contains("best_epoch = 4"));
        let back = CheckpointManifest::parse(&text).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.epochs_run, 5);
        assert_eq!(back.best_epoch, Some(4));
        assert!((back.best_val_ndcg.unwrap() - 0.6125).abs() < 1e-9);
        assert_eq!(back.digest, "abc123");
        assert_eq!(
            manifest_path(Path::new("runs/a/model.ckpt")),
            PathBuf::from("runs/a/model.manifest.txt")
        );
    }

    // ---- evaluation bookkeeping ----

    #[test]
    fn evaluation_counts_exclusions() {
        let (model, catalog, train_imps, _val) = build_tiny_model(13);
        let engine = InferenceEngine::new(&model, &catalog, FrozenInputs::none());
        let mut imps = train_imps[..4].to_vec();
        for l in imps[1].labels.iter_mut() {
            *l = false; // no positives → excluded
        }
        let report = engine.evaluate(&imps, &[5, 10]).unwrap();
        assert_eq!(report.evaluated, 3);
        assert_eq!(report.excluded_no_positive, 1);
        assert_eq!(report.per_k.len(), 2);
        assert_eq!(report.per_impression.len(), 3);
        for &(_, v) in &report.per_k {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn lf_user_scores_are_mean_per_click_scores() {
        // The dot product against an LF (mean) user equals the mean of the
        // per-click dot products.
        let (model, catalog, train_imps, _val) = build_tiny_model(14);
        let engine = InferenceEngine::new(&model, &catalog, FrozenInputs::none());
        let imp = &train_imps[0];
        let user = engine.user_embedding(&imp.history, &imp.user_id, None).unwrap();
        let cand = engine.news_embedding(&imp.candidates[0]).unwrap();
        let direct = score(cand.data(), user.data()).unwrap() as f64;
        let mut mean = 0.0;
        for h in &imp.history {
            let he = engine.news_embedding(h).unwrap();
            mean += score(cand.data(), he.data()).unwrap() as f64;
        }
        mean /= imp.history.len() as f64;
        assert!((direct - mean).abs() < 1e-5, "{direct} vs {mean}");
    }
}
