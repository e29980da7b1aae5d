//! Dataset types and file formats.
//!
//! The on-disk layout follows the MIND conventions: a `news.tsv` catalog
//! (id, category, subcategory, title, …) and a `behaviors.tsv` impression log
//! (id, user, timestamp, click history, labeled candidate slate). On top of
//! those this module provides pretrained word-vector loading, binary/TSV
//! frozen embedding stores, and a synthetic dataset generator with planted
//! topic structure.
//!
//! Parsing is strict about structure (malformed lines are format errors with
//! line numbers) but tolerant about content the pipeline ignores (abstracts,
//! URLs, entity annotations).

pub mod frozen;
pub mod synthetic;
pub mod wordvec;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Reserved vocabulary index for padding positions.
pub const PAD_INDEX: usize = 0;
/// Reserved vocabulary index for out-of-vocabulary tokens.
pub const OOV_INDEX: usize = 1;
/// Maximum click-history length; older clicks are dropped.
pub const MAX_HISTORY: usize = 50;
/// Default maximum title length in tokens; longer titles are truncated.
pub const DEFAULT_TITLE_LEN: usize = 30;
/// Timestamp format used by behaviors files, e.g. `11/15/2019 8:55:22 AM`.
pub const TIMESTAMP_FORMAT: &str = "%m/%d/%Y %I:%M:%S %p";

/// Lowercase a title and split it on non-alphanumeric characters.
///
/// `"U.S.-China Trade War!"` tokenizes to `["u", "s", "china", "trade", "war"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Token-to-index mapping with reserved padding and OOV slots.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary containing only the reserved entries.
    pub fn new() -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        v.push("<pad>");
        v.push("<unk>");
        v
    }

    fn push(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), i);
        i
    }

    /// Intern a token, assigning the next index on first sight.
    pub fn intern(&mut self, token: &str) -> usize {
        self.push(token)
    }

    /// Index of a token, or [`OOV_INDEX`] if unknown.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_INDEX)
    }

    /// Number of entries, including the reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when only the reserved entries exist.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    /// Token string at an index.
    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    /// All tokens in index order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

/// Model-facing features of one article: padded token ids with a mask plus
/// optional category/subcategory indices.
#[derive(Debug, Clone, PartialEq)]
pub struct NewsFeatures {
    /// Title token indices, padded with [`PAD_INDEX`] to the catalog's
    /// title length.
    pub tokens: Vec<usize>,
    /// `true` where `tokens` holds a real token.
    pub mask: Vec<bool>,
    /// Category index into [`NewsCatalog::categories`], if present.
    pub category: Option<usize>,
    /// Subcategory index into [`NewsCatalog::subcategories`], if present.
    pub subcategory: Option<usize>,
}

impl NewsFeatures {
    /// Number of real (unmasked) title tokens.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One article of the catalog.
#[derive(Debug, Clone)]
pub struct NewsArticle {
    /// News id, e.g. `N12345`.
    pub id: String,
    /// Raw title as read from the file.
    pub title: String,
    /// Category label (may be empty).
    pub category: String,
    /// Subcategory label (may be empty).
    pub subcategory: String,
    /// Tokenized, indexed features.
    pub features: NewsFeatures,
}

/// The full news catalog with its derived vocabulary and label sets.
#[derive(Debug, Clone)]
pub struct NewsCatalog {
    /// Articles in file order.
    pub articles: Vec<NewsArticle>,
    /// Id → position in `articles`.
    pub by_id: HashMap<String, usize>,
    /// Title-token vocabulary in first-appearance order.
    pub vocab: Vocabulary,
    /// Category labels in first-appearance order.
    pub categories: Vec<String>,
    /// Subcategory labels in first-appearance order.
    pub subcategories: Vec<String>,
    /// Title length every article is padded/truncated to.
    pub title_len: usize,
    /// Non-fatal notes produced during parsing (e.g. empty titles).
    pub warnings: Vec<String>,
}

impl NewsCatalog {
    /// Article by id.
    pub fn get(&self, id: &str) -> Option<&NewsArticle> {
        self.by_id.get(id).map(|&i| &self.articles[i])
    }

    /// Article by id, or a data error naming it.
    pub fn require(&self, id: &str) -> Result<&NewsArticle> {
        self.get(id).ok_or_else(|| Error::Data(format!("unknown news id '{id}'")))
    }

    /// Number of articles.
    pub fn len(&self) -> usize {
        self.articles.len()
    }

    /// True if the catalog has no articles.
    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }
}

/// Parse a news TSV file.
///
/// Expected columns: id, category, subcategory, title, then optional
/// abstract/url/entity columns, which are accepted and ignored. Titles are
/// tokenized, truncated to `title_len` tokens, and padded. Articles with
/// empty titles are retained (all-padding features) and noted in
/// [`NewsCatalog::warnings`].
pub fn parse_news_tsv(path: &Path, title_len: usize) -> Result<NewsCatalog> {
    let text = std::fs::read_to_string(path)?;
    parse_news_str(&text, path, title_len)
}

/// [`parse_news_tsv`] over in-memory content; `label` is used in errors.
pub fn parse_news_str(text: &str, label: &Path, title_len: usize) -> Result<NewsCatalog> {
    if title_len == 0 {
        return Err(Error::Config("title length must be positive".into()));
    }
    let mut catalog = NewsCatalog {
        articles: Vec::new(),
        by_id: HashMap::new(),
        vocab: Vocabulary::new(),
        categories: Vec::new(),
        subcategories: Vec::new(),
        title_len,
        warnings: Vec::new(),
    };
    let mut category_index: HashMap<String, usize> = HashMap::new();
    let mut subcategory_index: HashMap<String, usize> = HashMap::new();

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(Error::format(
                label,
                lineno,
                format!("expected at least 4 tab-separated columns, found {}", cols.len()),
            ));
        }
        let (id, category, subcategory, title) = (cols[0], cols[1], cols[2], cols[3]);
        if id.is_empty() {
            return Err(Error::format(label, lineno, "empty news id"));
        }
        if catalog.by_id.contains_key(id) {
            return Err(Error::format(label, lineno, format!("duplicate news id '{id}'")));
        }

        let words = tokenize(title);
        if words.is_empty() {
            catalog.warnings.push(format!("article '{id}' has an empty title after tokenization"));
        }
        let mut tokens = vec![PAD_INDEX; title_len];
        let mut mask = vec![false; title_len];
        for (i, w) in words.iter().take(title_len).enumerate() {
            tokens[i] = catalog.vocab.intern(w);
            mask[i] = true;
        }

        let cat = intern_label(category, &mut catalog.categories, &mut category_index);
        let subcat = intern_label(subcategory, &mut catalog.subcategories, &mut subcategory_index);

        catalog.by_id.insert(id.to_owned(), catalog.articles.len());
        catalog.articles.push(NewsArticle {
            id: id.to_owned(),
            title: title.to_owned(),
            category: category.to_owned(),
            subcategory: subcategory.to_owned(),
            features: NewsFeatures { tokens, mask, category: cat, subcategory: subcat },
        });
    }
    if catalog.articles.is_empty() {
        return Err(Error::format(label, None, "news file contains no articles"));
    }
    Ok(catalog)
}

fn intern_label(label: &str, labels: &mut Vec<String>, index: &mut HashMap<String, usize>) -> Option<usize> {
    if label.is_empty() {
        return None;
    }
    if let Some(&i) = index.get(label) {
        return Some(i);
    }
    let i = labels.len();
    labels.push(label.to_owned());
    index.insert(label.to_owned(), i);
    Some(i)
}

/// Serialize a catalog back to the news TSV layout (ignored columns empty).
pub fn serialize_news_tsv(catalog: &NewsCatalog) -> String {
    let mut out = String::new();
    for a in &catalog.articles {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t\t\t\t", a.id, a.category, a.subcategory, a.title);
    }
    out
}

/// One impression: a user, their click history, and a labeled candidate slate.
#[derive(Debug, Clone, PartialEq)]
pub struct Impression {
    /// Impression id (opaque string).
    pub id: String,
    /// User id.
    pub user_id: String,
    /// Epoch seconds (timestamps are treated as UTC).
    pub timestamp: i64,
    /// Clicked news ids, oldest first, truncated to the most recent
    /// [`MAX_HISTORY`].
    pub history: Vec<String>,
    /// Candidate news ids in slate order.
    pub candidates: Vec<String>,
    /// Click labels aligned with `candidates`.
    pub labels: Vec<bool>,
}

impl Impression {
    /// Indices of positively labeled candidates.
    pub fn positive_indices(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect()
    }
}

/// A chronologically sorted impression log.
#[derive(Debug, Clone)]
pub struct BehaviorLog {
    /// Impressions sorted by timestamp (file order breaks ties).
    pub impressions: Vec<Impression>,
}

/// Parse a behaviors TSV file against a catalog.
///
/// Expected columns: impression id, user id, timestamp
/// (`MM/DD/YYYY HH:MM:SS AM/PM`), space-separated click history (may be
/// empty), space-separated labeled candidates (`N1234-1` / `N1234-0`).
/// Every referenced news id must exist in the catalog.
pub fn parse_behaviors_tsv(path: &Path, catalog: &NewsCatalog) -> Result<BehaviorLog> {
    let text = std::fs::read_to_string(path)?;
    parse_behaviors_str(&text, path, catalog)
}

/// [`parse_behaviors_tsv`] over in-memory content; `label` is used in errors.
pub fn parse_behaviors_str(text: &str, label: &Path, catalog: &NewsCatalog) -> Result<BehaviorLog> {
    let mut impressions = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 5 {
            return Err(Error::format(
                label,
                lineno,
                format!("expected 5 tab-separated columns, found {}", cols.len()),
            ));
        }
        let (id, user_id, time_str, history_str, slate_str) =
            (cols[0], cols[1], cols[2], cols[3], cols[4]);
        let timestamp = parse_timestamp(time_str)
            .ok_or_else(|| Error::format(label, lineno, format!("invalid timestamp '{time_str}'")))?;

        let mut history: Vec<String> = Vec::new();
        for nid in history_str.split_whitespace() {
            catalog
                .require(nid)
                .map_err(|_| Error::Data(format!("history of impression '{id}' references unknown news id '{nid}'")))?;
            history.push(nid.to_owned());
        }
        if history.len() > MAX_HISTORY {
            history.drain(..history.len() - MAX_HISTORY);
        }

        let mut candidates = Vec::new();
        let mut labels = Vec::new();
        for entry in slate_str.split_whitespace() {
            let (nid, lab) = entry.rsplit_once('-').ok_or_else(|| {
                Error::format(label, lineno, format!("candidate '{entry}' lacks a -0/-1 label"))
            })?;
            let clicked = match lab {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::format(
                        label,
                        lineno,
                        format!("candidate '{entry}' has invalid label '{other}'"),
                    ))
                }
            };
            catalog
                .require(nid)
                .map_err(|_| Error::Data(format!("impression '{id}' references unknown news id '{nid}'")))?;
            candidates.push(nid.to_owned());
            labels.push(clicked);
        }
        if candidates.is_empty() {
            return Err(Error::format(label, lineno, "impression has no candidates"));
        }

        impressions.push(Impression {
            id: id.to_owned(),
            user_id: user_id.to_owned(),
            timestamp,
            history,
            candidates,
            labels,
        });
    }
    if impressions.is_empty() {
        return Err(Error::format(label, None, "behaviors file contains no impressions"));
    }
    // Stable sort: equal timestamps keep file order.
    impressions.sort_by_key(|imp| imp.timestamp);
    Ok(BehaviorLog { impressions })
}

/// Parse a behaviors timestamp into epoch seconds.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    chrono::NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT)
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

/// Format epoch seconds in the behaviors timestamp layout.
pub fn format_timestamp(epoch: i64) -> String {
    chrono::DateTime::from_timestamp(epoch, 0)
        .expect("epoch seconds in supported range")
        .format(TIMESTAMP_FORMAT)
        .to_string()
}

/// Serialize impressions back to the behaviors TSV layout.
pub fn serialize_behaviors_tsv(impressions: &[Impression]) -> String {
    let mut out = String::new();
    for imp in impressions {
        let slate: Vec<String> = imp
            .candidates
            .iter()
            .zip(&imp.labels)
            .map(|(c, &l)| format!("{c}-{}", if l { 1 } else { 0 }))
            .collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            imp.id,
            imp.user_id,
            format_timestamp(imp.timestamp),
            imp.history.join(" "),
            slate.join(" ")
        );
    }
    out
}

/// Split a log at a timestamp boundary: impressions strictly before it on
/// the left, the rest on the right. Either side being empty is degenerate.
pub fn temporal_split(log: &BehaviorLog, boundary: i64) -> Result<(Vec<Impression>, Vec<Impression>)> {
    let mut before = Vec::new();
    let mut after = Vec::new();
    for imp in &log.impressions {
        if imp.timestamp < boundary {
            before.push(imp.clone());
        } else {
            after.push(imp.clone());
        }
    }
    if before.is_empty() || after.is_empty() {
        return Err(Error::Degenerate(format!(
            "temporal split at {} leaves {} impressions before and {} after",
            format_timestamp(boundary),
            before.len(),
            after.len()
        )));
    }
    Ok((before, after))
}

/// Conventional file names inside a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    /// News catalog TSV.
    pub news: PathBuf,
    /// Training/validation behaviors TSV.
    pub behaviors: PathBuf,
    /// Held-out test behaviors TSV, when present.
    pub behaviors_test: Option<PathBuf>,
    /// Pretrained word vectors, when present.
    pub word_vectors: Option<PathBuf>,
    /// Frozen per-article embedding store, when present.
    pub frozen_cls: Option<PathBuf>,
    /// Frozen per-token embedding store, when present.
    pub frozen_tokens: Option<PathBuf>,
}

impl DatasetPaths {
    /// Resolve the conventional layout inside `dir`.
    ///
    /// `news.tsv` and `behaviors.tsv` are required; the rest are optional.
    pub fn in_dir(dir: &Path) -> Result<Self> {
        let need = |name: &str| -> Result<PathBuf> {
            let p = dir.join(name);
            if !p.is_file() {
                return Err(Error::Config(format!("dataset file not found: {}", p.display())));
            }
            Ok(p)
        };
        let opt = |name: &str| -> Option<PathBuf> {
            let p = dir.join(name);
            p.is_file().then_some(p)
        };
        Ok(DatasetPaths {
            news: need("news.tsv")?,
            behaviors: need("behaviors.tsv")?,
            behaviors_test: opt("behaviors_test.tsv"),
            word_vectors: opt("word_vectors.txt"),
            frozen_cls: opt("frozen_cls.bin"),
            frozen_tokens: opt("frozen_tokens.bin"),
        })
    }
}
