//! Synthetic dataset generation with planted topic structure.
//!
//! The generator builds a complete dataset directory — news catalog,
//! behaviors logs, word vectors, frozen stores, and a ground-truth file —
//! from a small declarative spec. Articles belong to topics; each topic has
//! its own token sub-vocabulary whose word vectors cluster around a random
//! unit direction, so that a working text encoder can recover topics from
//! titles alone. Users prefer one primary topic; their histories and clicked
//! candidates are drawn from preferred topics (with a configurable noise
//! rate), while unclicked candidates come from elsewhere. This gives
//! training a recoverable signal with a known ceiling: with zero noise and
//! full concentration, ranking candidates by topic match is optimal.
//!
//! Everything is driven by one seeded RNG, so a spec generates bit-identical
//! artifacts every time.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::frozen::{token_key, FrozenStore};
use super::{serialize_behaviors_tsv, Impression};
use crate::{seed_stream, seeds, DetRng, Error, Result};

/// Generation epoch: 2019-11-09 00:00:00 UTC.
const BASE_EPOCH: i64 = 1_573_257_600;
const DAY: i64 = 86_400;
/// Days covered by `behaviors.tsv`; the last one is the validation day.
const LOG_DAYS: i64 = 5;
/// Days of `behaviors.tsv` before the train/validation boundary.
const TRAIN_DAYS: i64 = 4;

fn default_history_len() -> [usize; 2] {
    [8, 20]
}
fn default_concentration() -> f64 {
    25.0
}
fn default_candidate_pool() -> usize {
    20
}
fn default_seed() -> u64 {
    42
}
fn default_word_dim() -> usize {
    24
}
fn default_tokens_per_topic() -> usize {
    40
}
fn default_shared_tokens() -> usize {
    30
}
fn default_title_len() -> [usize; 2] {
    [4, 9]
}
fn default_subtopics() -> usize {
    2
}
fn default_impressions_per_user() -> usize {
    3
}
fn default_test_impressions() -> usize {
    1
}
fn default_positives() -> [usize; 2] {
    [1, 2]
}

/// Declarative description of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of planted topics (≥ 2).
    pub topics: usize,
    /// Articles generated per topic.
    pub news_per_topic: usize,
    /// Number of users.
    pub users: usize,
    /// Inclusive `[min, max]` range of click-history lengths.
    #[serde(default = "default_history_len")]
    pub history_len: [usize; 2],
    /// Preference concentration: a user's primary topic has weight
    /// `c / (c + topics - 1)`, every other topic `1 / (c + topics - 1)`.
    /// `inf` pins users entirely to their primary topic.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    /// Candidates per impression (positives + negatives).
    #[serde(default = "default_candidate_pool")]
    pub candidate_pool: usize,
    /// Probability in `[0, 1)` that any sampled article ignores topic
    /// preferences and is drawn uniformly.
    #[serde(default)]
    pub noise: f64,
    /// Generation seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Word-vector dimension.
    #[serde(default = "default_word_dim")]
    pub word_dim: usize,
    /// Size of each topic's token sub-vocabulary.
    #[serde(default = "default_tokens_per_topic")]
    pub tokens_per_topic: usize,
    /// Size of the topic-neutral shared vocabulary.
    #[serde(default = "default_shared_tokens")]
    pub shared_tokens: usize,
    /// Inclusive `[min, max]` range of title lengths in tokens.
    #[serde(default = "default_title_len")]
    pub title_len: [usize; 2],
    /// Probability that a title token comes from the shared vocabulary.
    #[serde(default)]
    pub title_noise: f64,
    /// Subcategories generated per topic.
    #[serde(default = "default_subtopics")]
    pub subtopics_per_topic: usize,
    /// Impressions per user in `behaviors.tsv`.
    #[serde(default = "default_impressions_per_user")]
    pub impressions_per_user: usize,
    /// Impressions per user in `behaviors_test.tsv`.
    #[serde(default = "default_test_impressions")]
    pub test_impressions_per_user: usize,
    /// Inclusive `[min, max]` range of positives per impression.
    #[serde(default = "default_positives")]
    pub positives_per_impression: [usize; 2],
}

impl SyntheticSpec {
    /// Parse a spec from TOML text.
    pub fn from_toml(text: &str, label: &Path) -> Result<Self> {
        let spec: SyntheticSpec = toml::from_str(text)
            .map_err(|e| Error::format(label, None, format!("invalid synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Check field-level constraints.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.topics < 2 {
            return bad(format!("topics must be at least 2, got {}", self.topics));
        }
        if self.news_per_topic == 0 || self.users == 0 {
            return bad("news_per_topic and users must be positive".into());
        }
        if self.history_len[0] == 0 || self.history_len[0] > self.history_len[1] {
            return bad(format!("invalid history_len range {:?}", self.history_len));
        }
        if !(self.concentration >= 1.0) {
            return bad(format!("concentration must be at least 1, got {}", self.concentration));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0, 1), got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.title_noise) {
            return bad(format!("title_noise must be in [0, 1], got {}", self.title_noise));
        }
        if self.candidate_pool < 2 {
            return bad(format!("candidate_pool must be at least 2, got {}", self.candidate_pool));
        }
        if self.candidate_pool > self.topics * self.news_per_topic {
            return bad(format!(
                "candidate_pool {} exceeds total articles {}",
                self.candidate_pool,
                self.topics * self.news_per_topic
            ));
        }
        if self.positives_per_impression[0] == 0
            || self.positives_per_impression[0] > self.positives_per_impression[1]
            || self.positives_per_impression[1] >= self.candidate_pool
        {
            return bad(format!(
                "invalid positives_per_impression range {:?} for candidate_pool {}",
                self.positives_per_impression, self.candidate_pool
            ));
        }
        if self.word_dim < 2 {
            return bad(format!("word_dim must be at least 2, got {}", self.word_dim));
        }
        if self.tokens_per_topic == 0 || self.shared_tokens == 0 {
            return bad("tokens_per_topic and shared_tokens must be positive".into());
        }
        if self.title_len[0] == 0 || self.title_len[0] > self.title_len[1] {
            return bad(format!("invalid title_len range {:?}", self.title_len));
        }
        if self.subtopics_per_topic == 0 {
            return bad("subtopics_per_topic must be positive".into());
        }
        if self.impressions_per_user == 0 {
            return bad("impressions_per_user must be positive".into());
        }
        Ok(())
    }

    /// Total number of generated articles.
    pub fn total_news(&self) -> usize {
        self.topics * self.news_per_topic
    }
}

/// Planted structure of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Number of topics.
    pub topics: usize,
    /// Train/validation boundary for `behaviors.tsv` (epoch seconds).
    pub split_boundary: i64,
    /// `(news id, topic)` in catalog order.
    pub news_topics: Vec<(String, usize)>,
    /// `(user id, primary topic)` in user order.
    pub user_primary: Vec<(String, usize)>,
}

impl GroundTruth {
    /// Serialize to the `ground_truth.txt` layout.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "topics\t{}", self.topics);
        let _ = writeln!(out, "boundary\t{}", self.split_boundary);
        for (id, t) in &self.news_topics {
            let _ = writeln!(out, "news\t{id}\t{t}");
        }
        for (id, t) in &self.user_primary {
            let _ = writeln!(out, "user\t{id}\t{t}");
        }
        out
    }

    /// Parse the `ground_truth.txt` layout.
    pub fn parse(text: &str, label: &Path) -> Result<Self> {
        let mut gt = GroundTruth { topics: 0, split_boundary: 0, news_topics: Vec::new(), user_primary: Vec::new() };
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let fail = |msg: String| Error::format(label, lineno, msg);
            match fields[0] {
                "topics" if fields.len() == 2 => {
                    gt.topics = fields[1].parse().map_err(|_| fail("invalid topic count".into()))?;
                }
                "boundary" if fields.len() == 2 => {
                    gt.split_boundary =
                        fields[1].parse().map_err(|_| fail("invalid boundary".into()))?;
                }
                "news" if fields.len() == 3 => {
                    let t = fields[2].parse().map_err(|_| fail("invalid news topic".into()))?;
                    gt.news_topics.push((fields[1].to_owned(), t));
                }
                "user" if fields.len() == 3 => {
                    let t = fields[2].parse().map_err(|_| fail("invalid user topic".into()))?;
                    gt.user_primary.push((fields[1].to_owned(), t));
                }
                other => return Err(fail(format!("unrecognized record '{other}'"))),
            }
        }
        if gt.topics == 0 {
            return Err(Error::format(label, None, "ground truth lacks a topics record"));
        }
        Ok(gt)
    }

    /// Topic of a news id, if recorded.
    pub fn news_topic(&self, id: &str) -> Option<usize> {
        self.news_topics.iter().find(|(n, _)| n == id).map(|&(_, t)| t)
    }
}

/// A fully generated dataset, in memory.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    /// The generating spec.
    pub spec: SyntheticSpec,
    /// `news.tsv` content.
    pub news_tsv: String,
    /// `behaviors.tsv` content (train + validation days).
    pub behaviors_tsv: String,
    /// `behaviors_test.tsv` content (the held-out day).
    pub behaviors_test_tsv: String,
    /// `word_vectors.txt` content.
    pub word_vectors_txt: String,
    /// Per-article frozen store (unit-normalized title-token mean).
    pub frozen_cls: FrozenStore,
    /// Per-token frozen store keyed `newsid#position`.
    pub frozen_tokens: FrozenStore,
    /// Planted structure.
    pub ground_truth: GroundTruth,
}

impl SyntheticDataset {
    /// Write the conventional dataset layout into `dir` (created if needed).
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("news.tsv"), &self.news_tsv)?;
        std::fs::write(dir.join("behaviors.tsv"), &self.behaviors_tsv)?;
        std::fs::write(dir.join("behaviors_test.tsv"), &self.behaviors_test_tsv)?;
        std::fs::write(dir.join("word_vectors.txt"), &self.word_vectors_txt)?;
        self.frozen_cls.save_binary(&dir.join("frozen_cls.bin"))?;
        self.frozen_tokens.save_binary(&dir.join("frozen_tokens.bin"))?;
        std::fs::write(dir.join("ground_truth.txt"), self.ground_truth.to_text())?;
        let spec_toml = toml::to_string_pretty(&self.spec)
            .map_err(|e| Error::Config(format!("failed to serialize spec: {e}")))?;
        std::fs::write(dir.join("synth_spec.toml"), spec_toml)?;
        Ok(())
    }

    /// The boundary to pass to [`super::temporal_split`] for `behaviors.tsv`.
    pub fn split_boundary(&self) -> i64 {
        self.ground_truth.split_boundary
    }
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    rng: DetRng,
    /// Per-topic token strings.
    topic_tokens: Vec<Vec<String>>,
    shared_tokens: Vec<String>,
    /// Vector per token, keyed in the same order the tokens were created.
    vectors: Vec<(String, Vec<f32>)>,
    /// Per-article (id, topic, title tokens).
    articles: Vec<(String, usize, Vec<String>)>,
    /// Per-user (id, primary, preference weights, history article indices).
    users: Vec<UserProfile>,
}

struct UserProfile {
    id: String,
    primary: usize,
    prefs: Vec<f64>,
    history: Vec<usize>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SyntheticSpec) -> Self {
        Generator {
            spec,
            rng: DetRng::seed_from_u64(seed_stream(spec.seed, seeds::SYNTH)),
            topic_tokens: Vec::new(),
            shared_tokens: Vec::new(),
            vectors: Vec::new(),
            articles: Vec::new(),
            users: Vec::new(),
        }
    }

    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Random unit direction in `word_dim` dimensions.
    fn unit_direction(&mut self) -> Vec<f64> {
        let d = self.spec.word_dim;
        loop {
            let v: Vec<f64> = (0..d).map(|_| self.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                return v.iter().map(|x| x / norm).collect();
            }
        }
    }

    fn build_vocabulary(&mut self) {
        let jitter = 0.25;
        let mut directions = Vec::with_capacity(self.spec.topics);
        for _ in 0..self.spec.topics {
            directions.push(self.unit_direction());
        }
        for (t, dir) in directions.iter().enumerate() {
            let mut tokens = Vec::with_capacity(self.spec.tokens_per_topic);
            for i in 0..self.spec.tokens_per_topic {
                let token = format!("t{t}w{i}");
                let vec: Vec<f32> =
                    dir.iter().map(|&d| (d + jitter * self.normal()) as f32).collect();
                self.vectors.push((token.clone(), vec));
                tokens.push(token);
            }
            self.topic_tokens.push(tokens);
        }
        for i in 0..self.spec.shared_tokens {
            let token = format!("cw{i}");
            let vec: Vec<f32> = (0..self.spec.word_dim).map(|_| (jitter * self.normal()) as f32).collect();
            self.vectors.push((token.clone(), vec));
            self.shared_tokens.push(token);
        }
    }

    fn build_articles(&mut self) {
        let spec = self.spec;
        for t in 0..spec.topics {
            for _ in 0..spec.news_per_topic {
                let id = format!("N{:05}", self.articles.len() + 1);
                let len = self.rng.random_range(spec.title_len[0]..=spec.title_len[1]);
                let mut title = Vec::with_capacity(len);
                for _ in 0..len {
                    let token = if self.rng.random::<f64>() < spec.title_noise {
                        let i = self.rng.random_range(0..self.shared_tokens.len());
                        self.shared_tokens[i].clone()
                    } else {
                        let i = self.rng.random_range(0..self.topic_tokens[t].len());
                        self.topic_tokens[t][i].clone()
                    };
                    title.push(token);
                }
                self.articles.push((id, t, title));
            }
        }
    }

    fn preference_weights(&self, primary: usize) -> Vec<f64> {
        let t = self.spec.topics as f64;
        let c = self.spec.concentration;
        if c.is_infinite() {
            let mut p = vec![0.0; self.spec.topics];
            p[primary] = 1.0;
            return p;
        }
        let denom = c + t - 1.0;
        (0..self.spec.topics).map(|k| if k == primary { c / denom } else { 1.0 / denom }).collect()
    }

    fn weighted_topic(&mut self, prefs: &[f64]) -> usize {
        let r: f64 = self.rng.random();
        let mut acc = 0.0;
        for (t, &p) in prefs.iter().enumerate() {
            acc += p;
            if r < acc {
                return t;
            }
        }
        prefs.len() - 1
    }

    /// Sample an article index whose topic follows the user's preferences
    /// (or, with `positive = false`, avoids the primary topic), with the
    /// global noise rate overriding either choice.
    fn sample_article(&mut self, profile: usize, positive: bool) -> usize {
        let spec = self.spec;
        let noise_draw: f64 = self.rng.random();
        let topic = if noise_draw < spec.noise {
            self.rng.random_range(0..spec.topics)
        } else if positive {
            let prefs = self.users[profile].prefs.clone();
            self.weighted_topic(&prefs)
        } else {
            let primary = self.users[profile].primary;
            let mut t = self.rng.random_range(0..spec.topics - 1);
            if t >= primary {
                t += 1;
            }
            t
        };
        topic * spec.news_per_topic + self.rng.random_range(0..spec.news_per_topic)
    }

    /// Like [`Self::sample_article`] but avoiding indices in `used`
    /// (bounded retries, then a deterministic scan for a free slot).
    fn sample_distinct(&mut self, profile: usize, positive: bool, used: &HashSet<usize>) -> usize {
        for _ in 0..20 {
            let a = self.sample_article(profile, positive);
            if !used.contains(&a) {
                return a;
            }
        }
        let start = self.sample_article(profile, positive);
        let total = self.spec.total_news();
        (0..total)
            .map(|k| (start + k) % total)
            .find(|a| !used.contains(a))
            .expect("candidate_pool is validated against the article count")
    }

    fn build_users(&mut self) {
        let spec = self.spec;
        for u in 0..spec.users {
            let id = format!("U{:05}", u + 1);
            let primary = self.rng.random_range(0..spec.topics);
            let prefs = self.preference_weights(primary);
            self.users.push(UserProfile { id, primary, prefs, history: Vec::new() });
            let len = self.rng.random_range(spec.history_len[0]..=spec.history_len[1]);
            let mut used = HashSet::new();
            let mut history = Vec::with_capacity(len);
            for _ in 0..len {
                let a = self.sample_distinct(u, true, &used);
                used.insert(a);
                history.push(a);
            }
            self.users[u].history = history;
        }
    }

    /// Build one impression slate for a user.
    fn build_slate(&mut self, profile: usize) -> (Vec<usize>, Vec<bool>) {
        let spec = self.spec;
        let n_pos = self
            .rng
            .random_range(spec.positives_per_impression[0]..=spec.positives_per_impression[1]);
        let mut used = HashSet::new();
        let mut slate: Vec<(usize, bool)> = Vec::with_capacity(spec.candidate_pool);
        for _ in 0..n_pos {
            let a = self.sample_distinct(profile, true, &used);
            used.insert(a);
            slate.push((a, true));
        }
        for _ in 0..spec.candidate_pool - n_pos {
            let a = self.sample_distinct(profile, false, &used);
            used.insert(a);
            slate.push((a, false));
        }
        slate.shuffle(&mut self.rng);
        (slate.iter().map(|&(a, _)| a).collect(), slate.iter().map(|&(_, l)| l).collect())
    }

    fn build_impressions(&mut self, per_user: usize, window_start: i64, window_len: i64, id_offset: usize) -> Vec<Impression> {
        let total = self.spec.users * per_user;
        let step = (window_len / total.max(1) as i64).max(1);
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut self.rng);
        let mut impressions = Vec::with_capacity(total);
        for slot in 0..total {
            let u = slot / per_user;
            let (candidates, labels) = self.build_slate(u);
            let user = &self.users[u];
            impressions.push(Impression {
                id: (id_offset + slot + 1).to_string(),
                user_id: user.id.clone(),
                timestamp: window_start + order[slot] as i64 * step,
                history: user.history.iter().map(|&a| self.articles[a].0.clone()).collect(),
                candidates: candidates.iter().map(|&a| self.articles[a].0.clone()).collect(),
                labels,
            });
        }
        impressions
    }
}

/// Generate a dataset from a spec. Identical specs produce identical output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut g = Generator::new(spec);
    g.build_vocabulary();
    g.build_articles();
    g.build_users();
    let train_val =
        g.build_impressions(spec.impressions_per_user, BASE_EPOCH, LOG_DAYS * DAY, 0);
    let test = if spec.test_impressions_per_user > 0 {
        g.build_impressions(
            spec.test_impressions_per_user,
            BASE_EPOCH + LOG_DAYS * DAY,
            DAY,
            train_val.len(),
        )
    } else {
        Vec::new()
    };

    // news.tsv
    let mut news_tsv = String::new();
    for (id, t, title) in &g.articles {
        let sub = {
            // Subcategory is a deterministic function of the id so the file
            // round-trips; draw from the id's numeric suffix.
            let n: usize = id[1..].parse().unwrap_or(0);
            n % spec.subtopics_per_topic
        };
        let _ = writeln!(
            news_tsv,
            "{id}\ttopic{t:02}\ttopic{t:02}sub{sub}\t{}\t\t\t\t",
            title.join(" ")
        );
    }

    // word_vectors.txt
    let mut word_vectors_txt = String::new();
    for (token, vec) in &g.vectors {
        word_vectors_txt.push_str(token);
        for v in vec {
            let _ = write!(word_vectors_txt, " {v}");
        }
        word_vectors_txt.push('\n');
    }

    // Frozen stores derived from the word vectors.
    let mut frozen_cls = FrozenStore::new(spec.word_dim)?;
    let mut frozen_tokens = FrozenStore::new(spec.word_dim)?;
    let vec_of = |token: &str| -> &[f32] {
        let i = g.vectors.iter().position(|(t, _)| t == token).expect("every title token has a vector");
        &g.vectors[i].1
    };
    for (id, _, title) in &g.articles {
        let mut mean = vec![0.0f64; spec.word_dim];
        for (pos, token) in title.iter().enumerate() {
            let v = vec_of(token);
            frozen_tokens.insert(&token_key(id, pos), v)?;
            for (m, &x) in mean.iter_mut().zip(v) {
                *m += x as f64;
            }
        }
        for m in &mut mean {
            *m /= title.len() as f64;
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let unit: Vec<f32> = mean.iter().map(|&x| (x / norm) as f32).collect();
        frozen_cls.insert(id, &unit)?;
    }

    let ground_truth = GroundTruth {
        topics: spec.topics,
        split_boundary: BASE_EPOCH + TRAIN_DAYS * DAY,
        news_topics: g.articles.iter().map(|(id, t, _)| (id.clone(), *t)).collect(),
        user_primary: g.users.iter().map(|u| (u.id.clone(), u.primary)).collect(),
    };

    Ok(SyntheticDataset {
        spec: spec.clone(),
        news_tsv,
        behaviors_tsv: serialize_behaviors_tsv(&train_val),
        behaviors_test_tsv: serialize_behaviors_tsv(&test),
        word_vectors_txt,
        frozen_cls,
        frozen_tokens,
        ground_truth,
    })
}
