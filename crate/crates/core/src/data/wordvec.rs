//! Pretrained word-vector loading.
//!
//! The text format is one entry per line, `token v1 v2 … vd`, as used by
//! common pretrained tables. Loading aligns the file against a vocabulary:
//! known tokens take their pretrained vectors, the padding row is zero, and
//! every other vocabulary word (including the OOV slot) gets a seeded random
//! vector so that runs are reproducible no matter what the file covers.

use std::path::Path;

use rand::{Rng, SeedableRng};

use super::{Vocabulary, OOV_INDEX, PAD_INDEX};
use crate::tensor::{Real, Tensor};
use crate::{seed_stream, seeds, DetRng, Error, Result};

/// Range of the random init used for words missing from the file.
const MISSING_RANGE: f64 = 0.1;

/// A word-vector table aligned with a [`Vocabulary`].
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    dim: usize,
    /// Row-major `[vocab_len × dim]`.
    data: Vec<f32>,
    /// How many vocabulary words were found in the file.
    pub found: usize,
    /// How many fell back to random init (excluding padding).
    pub missing: usize,
}

impl WordVectorTable {
    /// Vector width.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rows (= vocabulary size).
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    /// True if the table has no rows.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row for a vocabulary index.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The whole table as a `[vocab_len × dim]` tensor (e.g. to initialize a
    /// trainable embedding parameter).
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        Tensor::new(
            vec![self.len(), self.dim],
            self.data.iter().map(|&x| R::of(x as f64)).collect(),
        )
        .expect("table dimensions are consistent")
    }
}

/// Load word vectors for `vocab` from a text table.
///
/// Lines whose token is not in the vocabulary are skipped; if a token occurs
/// twice, the first occurrence wins. Every line must have the same dimension
/// as the first. Missing vocabulary words draw from
/// `uniform(-0.1, 0.1)` seeded by `seed`, in vocabulary order; the padding
/// row is all zeros.
pub fn load_word_embeddings(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<WordVectorTable> {
    let text = std::fs::read_to_string(path)?;
    load_word_embeddings_str(&text, path, vocab, seed)
}

/// [`load_word_embeddings`] over in-memory content; `label` is used in errors.
pub fn load_word_embeddings_str(
    text: &str,
    label: &Path,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<WordVectorTable> {
    let mut dim: Option<usize> = None;
    let mut rows: Vec<Option<Vec<f32>>> = vec![None; vocab.len()];
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.is_empty() {
            return Err(Error::format(label, lineno, "line has a token but no vector values"));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::format(
                    label,
                    lineno,
                    format!("vector has {} values, expected {d}", values.len()),
                ));
            }
            _ => {}
        }
        let index = vocab.lookup(token);
        // OOV means the token is not in the vocabulary (or is the literal
        // "<unk>" marker); either way the file row has no place to go.
        if index == OOV_INDEX || index == PAD_INDEX {
            continue;
        }
        if rows[index].is_some() {
            continue; // first occurrence wins
        }
        let mut vec = Vec::with_capacity(values.len());
        for v in &values {
            let x: f32 = v
                .parse()
                .map_err(|_| Error::format(label, lineno, format!("invalid float '{v}'")))?;
            vec.push(x);
        }
        rows[index] = Some(vec);
    }
    let dim = dim.ok_or_else(|| Error::format(label, None, "word-vector file contains no entries"))?;

    let mut rng = DetRng::seed_from_u64(seed_stream(seed, seeds::OOV));
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut found = 0;
    let mut missing = 0;
    for (i, row) in rows.iter().enumerate() {
        match row {
            Some(v) => {
                found += 1;
                data.extend_from_slice(v);
            }
            None if i == PAD_INDEX => {
                data.extend(std::iter::repeat(0.0f32).take(dim));
            }
            None => {
                missing += 1;
                for _ in 0..dim {
                    data.push(rng.random_range(-MISSING_RANGE..MISSING_RANGE) as f32);
                }
            }
        }
    }
    Ok(WordVectorTable { dim, data, found, missing })
}
