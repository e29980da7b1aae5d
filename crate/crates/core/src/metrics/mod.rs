//! Evaluation and comparison metrics.
//!
//! Three measurement axes, all on `f64`:
//!
//! * ranking quality — binary-relevance nDCG@k per impression;
//! * behavioral similarity — Jaccard overlap of two models' top-k
//!   recommendation lists, averaged over impressions;
//! * representational similarity — linear CKA between embedding matrices,
//!   computed through the biased HSIC estimator on centered Gram matrices.
//!
//! On top of these sit pairwise comparison matrices over any number of
//! models and an average-linkage hierarchical clustering of such a matrix
//! (similarity is converted to distance as `d = 1 − s`).

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// One model's ranked output for one impression.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationList {
    /// Impression this ranking answers.
    pub impression_id: String,
    /// `(news id, score)`, scores non-increasing, ids unique.
    pub items: Vec<(String, f64)>,
}

impl RecommendationList {
    /// Validate ordering and uniqueness.
    pub fn new(impression_id: impl Into<String>, items: Vec<(String, f64)>) -> Result<Self> {
        let impression_id = impression_id.into();
        let mut seen = HashSet::new();
        for (id, _) in &items {
            if !seen.insert(id.as_str()) {
                return Err(Error::Usage(format!(
                    "recommendation list for '{impression_id}' repeats id '{id}'"
                )));
            }
        }
        for w in items.windows(2) {
            if w[0].1 < w[1].1 {
                return Err(Error::Usage(format!(
                    "recommendation list for '{impression_id}' is not score-descending"
                )));
            }
        }
        Ok(RecommendationList { impression_id, items })
    }

    /// Ids of the first `min(k, len)` entries.
    pub fn top_k(&self, k: usize) -> impl Iterator<Item = &str> {
        self.items.iter().take(k).map(|(id, _)| id.as_str())
    }

    /// Number of ranked candidates.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// Whether the list is empty.
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A set of row-identified embeddings `[n × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// Unique row identifiers (news or user ids).
    pub ids: Vec<String>,
    /// Row-major matrix, one row per id.
    pub matrix: Tensor<f64>,
}

impl EmbeddingMatrix {
    /// Validate row/id agreement and id uniqueness.
    pub fn new(ids: Vec<String>, matrix: Tensor<f64>) -> Result<Self> {
        if matrix.rows() != ids.len() {
            return Err(Error::Usage(format!(
                "embedding matrix has {} rows but {} ids",
                matrix.rows(),
                ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Usage(format!("embedding matrix repeats id '{id}'")));
            }
        }
        Ok(EmbeddingMatrix { ids, matrix })
    }

    /// Number of rows.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Whether the matrix has no rows.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Binary-relevance nDCG@k of one ranked label sequence.
///
/// `ranked_labels[i]` is the relevance of the item at rank `i + 1`. An
/// impression without any positive has no defined ideal ranking and is a
/// degenerate input — callers exclude (and count) such impressions.
pub fn ndcg_at_k(ranked_labels: &[bool], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Usage("ndcg: k must be positive".into()));
    }
    let positives = ranked_labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Degenerate("ndcg: no positive label in impression".into()));
    }
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = ranked_labels
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &l)| l)
        .map(|(i, _)| discount(i))
        .sum();
    let ideal: f64 = (0..positives.min(k)).map(discount).sum();
    Ok(dcg / ideal)
}

/// Jaccard overlap of two models' top-k sets for the same impression.
///
/// Order within the top k is irrelevant. `k` larger than a list's length
/// uses the whole list.
pub fn jaccard_at_k(a: &RecommendationList, b: &RecommendationList, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Usage("jaccard: k must be positive".into()));
    }
    if a.impression_id != b.impression_id {
        return Err(Error::Usage(format!(
            "jaccard: lists answer different impressions ('{}' vs '{}')",
            a.impression_id, b.impression_id
        )));
    }
    let sa: HashSet<&str> = a.top_k(k).collect();
    let sb: HashSet<&str> = b.top_k(k).collect();
    if sa.is_empty() && sb.is_empty() {
        return Err(Error::Degenerate("jaccard: both top-k sets are empty".into()));
    }
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    Ok(inter / union)
}

/// Biased HSIC estimator between two square kernel matrices:
/// `trace(S·H·S′·H) / (n−1)²` with the centering matrix
/// `H = I − (1/n)·𝟙𝟙ᵀ`.
pub fn hsic_linear(s: &Tensor<f64>, s_prime: &Tensor<f64>) -> Result<f64> {
    let n = s.rows();
    if s.cols() != n || s_prime.rows() != s_prime.cols() {
        return Err(Error::ShapeMismatch {
            op: "hsic",
            lhs: s.shape().to_vec(),
            rhs: s_prime.shape().to_vec(),
        });
    }
    if s_prime.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "hsic",
            lhs: s.shape().to_vec(),
            rhs: s_prime.shape().to_vec(),
        });
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("hsic needs at least 2 instances, got {n}")));
    }
    // trace(S·H·S′·H) = Σ_ij (H·S·H)_ij · S′_ji, and double-centering has a
    // closed form: (H·S·H)_ij = S_ij − rowmean_i − colmean_j + totalmean.
    let nf = n as f64;
    let mut row_mean = vec![0.0; n];
    let mut col_mean = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = s.at(i, j);
            row_mean[i] += v;
            col_mean[j] += v;
            total += v;
        }
    }
    for m in row_mean.iter_mut().chain(col_mean.iter_mut()) {
        *m /= nf;
    }
    total /= nf * nf;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let centered = s.at(i, j) - row_mean[i] - col_mean[j] + total;
            acc += centered * s_prime.at(j, i);
        }
    }
    Ok(acc / ((nf - 1.0) * (nf - 1.0)))
}

/// Column-mean-center a matrix in place.
fn center_columns(m: &mut Tensor<f64>) {
    let (r, c) = (m.rows(), m.cols());
    for j in 0..c {
        let mut mean = 0.0;
        for i in 0..r {
            mean += m.at(i, j);
        }
        mean /= r as f64;
        for i in 0..r {
            *m.at_mut(i, j) -= mean;
        }
    }
}

/// Check that two embedding matrices describe the same rows in the same
/// order, naming the first offender otherwise.
fn check_alignment(e: &EmbeddingMatrix, e_prime: &EmbeddingMatrix) -> Result<()> {
    if e.len() != e_prime.len() {
        return Err(Error::Alignment(format!(
            "embedding matrices have {} vs {} rows",
            e.len(),
            e_prime.len()
        )));
    }
    for (i, (a, b)) in e.ids.iter().zip(&e_prime.ids).enumerate() {
        if a != b {
            return Err(Error::Alignment(format!(
                "row {i} identifies '{a}' in one matrix and '{b}' in the other"
            )));
        }
    }
    Ok(())
}

/// Linear centered kernel alignment between two embedding sets over the same
/// instances (the feature dimensions may differ).
///
/// Both matrices are column-mean-centered, turned into linear Gram matrices
/// `S = E·Eᵀ`, and compared as `HSIC(S,S′) / √(HSIC(S,S)·HSIC(S′,S′))`,
/// clipped into `[0, 1]` against floating-point overshoot.
pub fn linear_cka(e: &EmbeddingMatrix, e_prime: &EmbeddingMatrix) -> Result<f64> {
    check_alignment(e, e_prime)?;
    let n = e.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("cka needs at least 2 rows, got {n}")));
    }
    let mut a = e.matrix.clone();
    let mut b = e_prime.matrix.clone();
    center_columns(&mut a);
    center_columns(&mut b);
    let s = a.matmul(&a.transpose()?)?;
    let s_prime = b.matmul(&b.transpose()?)?;
    let cross = hsic_linear(&s, &s_prime)?;
    let self_a = hsic_linear(&s, &s)?;
    let self_b = hsic_linear(&s_prime, &s_prime)?;
    let denom = (self_a * self_b).sqrt();
    if !(denom > 0.0) {
        return Err(Error::Degenerate(
            "cka undefined: an embedding matrix is constant across rows".into(),
        ));
    }
    Ok((cross / denom).clamp(0.0, 1.0))
}

/// [`linear_cka`] over a seeded row subsample of at most `max_rows`
/// instances (row order preserved). Falls back to the full computation when
/// the matrices are small enough.
pub fn linear_cka_subsampled(
    e: &EmbeddingMatrix,
    e_prime: &EmbeddingMatrix,
    max_rows: usize,
    seed: u64,
) -> Result<f64> {
    check_alignment(e, e_prime)?;
    if max_rows < 2 {
        return Err(Error::Usage("cka subsample needs at least 2 rows".into()));
    }
    if e.len() <= max_rows {
        return linear_cka(e, e_prime);
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = crate::DetRng::seed_from_u64(crate::seed_stream(seed, crate::seeds::SUBSAMPLE));
    let mut picks: Vec<usize> = (0..e.len()).collect();
    picks.shuffle(&mut rng);
    picks.truncate(max_rows);
    picks.sort_unstable();
    let take = |m: &EmbeddingMatrix| {
        let d = m.matrix.cols();
        let mut data = Vec::with_capacity(picks.len() * d);
        let mut ids = Vec::with_capacity(picks.len());
        for &i in &picks {
            ids.push(m.ids[i].clone());
            data.extend_from_slice(m.matrix.row_slice(i));
        }
        EmbeddingMatrix::new(ids, Tensor::new(vec![picks.len(), d], data).unwrap())
    };
    linear_cka(&take(e)?, &take(e_prime)?)
}

/// Which pairwise score a comparison matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricTag {
    /// Linear CKA between embedding dumps.
    Cka,
    /// Mean Jaccard@k between recommendation lists.
    JaccardAtK(usize),
    /// Absolute difference of mean nDCG@k.
    NdcgGap(usize),
}

impl MetricTag {
    /// Human-readable name, e.g. `jaccard@10`.
    pub fn label(&self) -> String {
        match self {
            MetricTag::Cka => "cka".into(),
            MetricTag::JaccardAtK(k) => format!("jaccard@{k}"),
            MetricTag::NdcgGap(k) => format!("ndcg-gap@{k}"),
        }
    }
}

/// Square matrix of pairwise model scores.
#[derive(Debug, Clone)]
pub struct ComparisonMatrix {
    /// Model labels, one per row/column.
    pub labels: Vec<String>,
    /// Pairwise values `[m × m]`.
    pub values: Tensor<f64>,
    /// What the values measure.
    pub metric: MetricTag,
}

impl ComparisonMatrix {
    /// Assemble and sanity-check a matrix: symmetric within 1e-9, and unit
    /// diagonal for the similarity metrics (CKA, Jaccard).
    pub fn new(labels: Vec<String>, values: Tensor<f64>, metric: MetricTag) -> Result<Self> {
        let m = labels.len();
        if values.rows() != m || values.cols() != m {
            return Err(Error::Usage(format!(
                "comparison matrix shape {:?} does not fit {m} labels",
                values.shape()
            )));
        }
        for i in 0..m {
            for j in 0..m {
                let (a, b) = (values.at(i, j), values.at(j, i));
                if (a - b).abs() > 1e-9 {
                    return Err(Error::Degenerate(format!(
                        "comparison matrix asymmetric at ({}, {}): {a} vs {b}",
                        labels[i], labels[j]
                    )));
                }
            }
            let d = values.at(i, i);
            let expect_unit = !matches!(metric, MetricTag::NdcgGap(_));
            if expect_unit && (d - 1.0).abs() > 1e-9 {
                return Err(Error::Degenerate(format!(
                    "comparison diagonal for '{}' is {d}, expected 1",
                    labels[i]
                )));
            }
        }
        Ok(ComparisonMatrix { labels, values, metric })
    }

    /// Render as CSV: header row and column of labels, six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(l);
            for j in 0..self.labels.len() {
                let _ = write!(out, ",{:.6}", self.values.at(i, j));
            }
            out.push('\n');
        }
        out
    }

    /// Parse the CSV layout produced by [`Self::to_csv`].
    pub fn from_csv(text: &str, metric: MetricTag) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Usage("empty comparison CSV".into()))?;
        let labels: Vec<String> = header.split(',').skip(1).map(str::to_owned).collect();
        let m = labels.len();
        if m == 0 {
            return Err(Error::Usage("comparison CSV has no model columns".into()));
        }
        let mut data = Vec::with_capacity(m * m);
        for (i, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let row_label = fields.next().unwrap_or_default();
            if i >= m || row_label != labels[i] {
                return Err(Error::Usage(format!(
                    "comparison CSV row {} is labeled '{row_label}'",
                    i + 2
                )));
            }
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::Usage(format!("bad comparison value '{f}'")))?;
                data.push(v);
            }
        }
        if data.len() != m * m {
            return Err(Error::Usage(format!(
                "comparison CSV holds {} values, expected {}",
                data.len(),
                m * m
            )));
        }
        ComparisonMatrix::new(labels, Tensor::new(vec![m, m], data)?, metric)
    }
}

/// Mean Jaccard@k between two aligned list sets.
pub fn mean_jaccard(
    a: &[RecommendationList],
    b: &[RecommendationList],
    k: usize,
) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Alignment(format!(
            "jaccard needs matching non-empty list sets, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.impression_id != y.impression_id {
            return Err(Error::Alignment(format!(
                "list sets diverge: impression '{}' vs '{}'",
                x.impression_id, y.impression_id
            )));
        }
        acc += jaccard_at_k(x, y, k)?;
    }
    Ok(acc / a.len() as f64)
}

/// Pairwise mean-Jaccard@k matrix over labeled models.
pub fn jaccard_matrix(
    models: &[(String, Vec<RecommendationList>)],
    k: usize,
) -> Result<ComparisonMatrix> {
    let m = models.len();
    if m == 0 {
        return Err(Error::Usage("comparison needs at least one model".into()));
    }
    let mut values = Tensor::zeros(vec![m, m]);
    for i in 0..m {
        for j in 0..m {
            let v = mean_jaccard(&models[i].1, &models[j].1, k).map_err(|e| {
                Error::Alignment(format!("{} vs {}: {e}", models[i].0, models[j].0))
            })?;
            *values.at_mut(i, j) = v;
        }
    }
    let labels = models.iter().map(|(l, _)| l.clone()).collect();
    ComparisonMatrix::new(labels, values, MetricTag::JaccardAtK(k))
}

/// Pairwise linear-CKA matrix over labeled embedding dumps.
pub fn cka_matrix(models: &[(String, EmbeddingMatrix)]) -> Result<ComparisonMatrix> {
    let m = models.len();
    if m == 0 {
        return Err(Error::Usage("comparison needs at least one model".into()));
    }
    let mut values = Tensor::zeros(vec![m, m]);
    for i in 0..m {
        for j in 0..m {
            let v = if i == j {
                1.0
            } else {
                linear_cka(&models[i].1, &models[j].1).map_err(|e| match e {
                    Error::Alignment(msg) => {
                        Error::Alignment(format!("{} vs {}: {msg}", models[i].0, models[j].0))
                    }
                    other => other,
                })?
            };
            *values.at_mut(i, j) = v;
        }
    }
    let labels = models.iter().map(|(l, _)| l.clone()).collect();
    ComparisonMatrix::new(labels, values, MetricTag::Cka)
}

/// Pairwise |Δ mean nDCG@k| matrix from per-model scores.
pub fn ndcg_gap_matrix(models: &[(String, f64)], k: usize) -> Result<ComparisonMatrix> {
    let m = models.len();
    if m == 0 {
        return Err(Error::Usage("comparison needs at least one model".into()));
    }
    let mut values = Tensor::zeros(vec![m, m]);
    for i in 0..m {
        for j in 0..m {
            *values.at_mut(i, j) = (models[i].1 - models[j].1).abs();
        }
    }
    let labels = models.iter().map(|(l, _)| l.clone()).collect();
    ComparisonMatrix::new(labels, values, MetricTag::NdcgGap(k))
}

/// One agglomeration step: clusters represented by their smallest original
/// item index merge at `height`.
#[derive(Debug, Clone, PartialEq)]
pub struct Merge {
    /// Representative (smallest member index) of the first cluster.
    pub a: usize,
    /// Representative of the second cluster; `a < b`.
    pub b: usize,
    /// Average-linkage distance at which they merge.
    pub height: f64,
    /// Size of the merged cluster.
    pub size: usize,
}

/// Agglomerative average-linkage clustering of a similarity matrix.
///
/// Similarities convert to distances as `d = 1 − s`. Among equally distant
/// pairs the one with the smallest representative indices merges first, so
/// the output is deterministic.
pub fn hierarchical_cluster(m: &ComparisonMatrix) -> Result<Vec<Merge>> {
    let n = m.labels.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    // Active clusters: (representative, size); `dist[i][j]` the current
    // average-linkage distance between active clusters i and j.
    let mut reps: Vec<usize> = (0..n).collect();
    let mut sizes: Vec<usize> = vec![1; n];
    let mut dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| 1.0 - m.values.at(i, j)).collect())
        .collect();
    let mut merges = Vec::with_capacity(n - 1);
    while reps.len() > 1 {
        // Find the closest pair, breaking ties on representatives.
        let (mut bi, mut bj, mut best) = (0usize, 1usize, f64::INFINITY);
        for i in 0..reps.len() {
            for j in (i + 1)..reps.len() {
                let d = dist[i][j];
                let key = (reps[i].min(reps[j]), reps[i].max(reps[j]));
                let best_key = (reps[bi].min(reps[bj]), reps[bi].max(reps[bj]));
                if d < best || (d == best && key < best_key) {
                    best = d;
                    bi = i;
                    bj = j;
                }
            }
        }
        let (sa, sb) = (sizes[bi] as f64, sizes[bj] as f64);
        merges.push(Merge {
            a: reps[bi].min(reps[bj]),
            b: reps[bi].max(reps[bj]),
            height: best,
            size: sizes[bi] + sizes[bj],
        });
        // Lance–Williams update for average linkage: the distance from the
        // merged cluster to any other is the size-weighted mean.
        for k in 0..reps.len() {
            if k == bi || k == bj {
                continue;
            }
            let d = (sa * dist[bi][k] + sb * dist[bj][k]) / (sa + sb);
            dist[bi][k] = d;
            dist[k][bi] = d;
        }
        reps[bi] = reps[bi].min(reps[bj]);
        sizes[bi] += sizes[bj];
        reps.remove(bj);
        sizes.remove(bj);
        dist.remove(bj);
        for row in &mut dist {
            row.remove(bj);
        }
    }
    Ok(merges)
}

/// Render merges as text lines `merge <a> <b> at <height>` using the
/// matrix labels of the cluster representatives.
pub fn dendrogram_text(m: &ComparisonMatrix, merges: &[Merge]) -> String {
    let mut out = String::new();
    for step in merges {
        let _ = writeln!(
            out,
            "merge {} {} at {:.6}",
            m.labels[step.a], m.labels[step.b], step.height
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::DetRng;
    use rand::{Rng, SeedableRng};

    fn list(imp: &str, ids: &[&str]) -> RecommendationList {
        let items = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), -(i as f64)))
            .collect();
        RecommendationList::new(imp, items).unwrap()
    }

    // ---- nDCG ----

    /// Oracle built from the raw definition: explicit DCG loop plus an
    /// explicitly sorted ideal ranking.
    fn ndcg_oracle(labels: &[bool], k: usize) -> f64 {
        let dcg = |ls: &[bool]| -> f64 {
            let mut acc = 0.0;
            for (i, &l) in ls.iter().enumerate().take(k) {
                if l {
                    acc += 1.0 / ((i + 2) as f64).log2();
                }
            }
            acc
        };
        let mut ideal = labels.to_vec();
        ideal.sort_by_key(|&l| !l);
        dcg(labels) / dcg(&ideal)
    }

    #[test]
    fn ndcg_worked_examples() {
        let mut labels = vec![false; 10];
        labels[0] = true;
        assert_eq!(ndcg_at_k(&labels, 10).unwrap(), 1.0);
        let mut labels = vec![false; 10];
        labels[1] = true;
        let got = ndcg_at_k(&labels, 10).unwrap();
        assert!((got - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((got - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn ndcg_matches_definition_oracle_on_random_instances() {
        let mut rng = DetRng::seed_from_u64(1);
        for _ in 0..500 {
            let n = rng.random_range(1..=10);
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            if !labels.iter().any(|&l| l) {
                assert!(ndcg_at_k(&labels, 5).is_err());
                continue;
            }
            let k = rng.random_range(1..=10);
            let got = ndcg_at_k(&labels, k).unwrap();
            let want = ndcg_oracle(&labels, k);
            assert!((got - want).abs() < 1e-12, "labels {labels:?} k {k}: {got} vs {want}");
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn ndcg_degrades_when_the_positive_moves_down() {
        let mut prev = f64::INFINITY;
        for rank in 0..8 {
            let mut labels = vec![false; 8];
            labels[rank] = true;
            let v = ndcg_at_k(&labels, 8).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    // ---- Jaccard ----

    /// Loop-based oracle with no hash sets.
    fn jaccard_oracle(a: &[&str], b: &[&str]) -> f64 {
        let mut inter = 0usize;
        for x in a {
            if b.contains(x) {
                inter += 1;
            }
        }
        let union = a.len() + b.len() - inter;
        inter as f64 / union as f64
    }

    #[test]
    fn jaccard_fraction_identities() {
        // k = 10 with 7 shared items → 7/13; 8 shared → 8/12; k = 5 with 3
        // shared → 3/7. Exact rational arithmetic in f64.
        let base: Vec<String> = (0..10).map(|i| format!("N{i}")).collect();
        let seven: Vec<String> =
            base[..7].iter().cloned().chain((0..3).map(|i| format!("X{i}"))).collect();
        let eight: Vec<String> =
            base[..8].iter().cloned().chain((0..2).map(|i| format!("X{i}"))).collect();
        let a = list("i", &base.iter().map(String::as_str).collect::<Vec<_>>());
        let b7 = list("i", &seven.iter().map(String::as_str).collect::<Vec<_>>());
        let b8 = list("i", &eight.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(jaccard_at_k(&a, &b7, 10).unwrap(), 7.0 / 13.0);
        assert_eq!(jaccard_at_k(&a, &b8, 10).unwrap(), 8.0 / 12.0);

        let five: Vec<String> = (0..5).map(|i| format!("N{i}")).collect();
        let three: Vec<String> =
            five[..3].iter().cloned().chain((0..2).map(|i| format!("X{i}"))).collect();
        let a5 = list("i", &five.iter().map(String::as_str).collect::<Vec<_>>());
        let b3 = list("i", &three.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(jaccard_at_k(&a5, &b3, 5).unwrap(), 3.0 / 7.0);
    }

    #[test]
    fn jaccard_extremes_and_errors() {
        let a = list("i", &["A", "B", "C"]);
        let b = list("i", &["C", "B", "A"]);
        assert_eq!(jaccard_at_k(&a, &b, 3).unwrap(), 1.0, "same set, different order");
        let c = list("i", &["X", "Y", "Z"]);
        assert_eq!(jaccard_at_k(&a, &c, 3).unwrap(), 0.0, "disjoint");
        let other = list("j", &["A"]);
        assert!(matches!(jaccard_at_k(&a, &other, 3), Err(Error::Usage(_))));
        assert!(matches!(jaccard_at_k(&a, &b, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn jaccard_matches_loop_oracle_on_random_instances() {
        let mut rng = DetRng::seed_from_u64(2);
        let pool: Vec<String> = (0..12).map(|i| format!("N{i}")).collect();
        for _ in 0..500 {
            let mut p1: Vec<&str> = pool.iter().map(String::as_str).collect();
            let mut p2 = p1.clone();
            use rand::seq::SliceRandom;
            p1.shuffle(&mut rng);
            p2.shuffle(&mut rng);
            let n = rng.random_range(1..=10);
            let k = rng.random_range(1..=n);
            let a = list("i", &p1[..n]);
            let b = list("i", &p2[..n]);
            let got = jaccard_at_k(&a, &b, k).unwrap();
            let want = jaccard_oracle(&p1[..k.min(n)], &p2[..k.min(n)]);
            assert!((got - want).abs() < 1e-12);
            let sym = jaccard_at_k(&b, &a, k).unwrap();
            assert_eq!(got, sym, "jaccard must be symmetric");
        }
    }

    #[test]
    fn jaccard_saturates_at_the_full_pool() {
        let mut rng = DetRng::seed_from_u64(3);
        let pool: Vec<String> = (0..8).map(|i| format!("N{i}")).collect();
        use rand::seq::SliceRandom;
        let mut p1: Vec<&str> = pool.iter().map(String::as_str).collect();
        let mut p2 = p1.clone();
        p1.shuffle(&mut rng);
        p2.shuffle(&mut rng);
        let a = list("i", &p1);
        let b = list("i", &p2);
        assert_eq!(jaccard_at_k(&a, &b, 8).unwrap(), 1.0);
        assert_eq!(jaccard_at_k(&a, &b, 100).unwrap(), 1.0, "k beyond the pool uses full lists");
    }

    // ---- HSIC / CKA ----

    /// Literal oracle: build H explicitly, two naive matrix products, trace.
    fn hsic_oracle(s: &Tensor<f64>, s2: &Tensor<f64>) -> f64 {
        let n = s.rows();
        let h = Tensor::from_fn(n, n, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) - 1.0 / n as f64
        });
        let prod = s.matmul(&h).unwrap().matmul(s2).unwrap().matmul(&h).unwrap();
        let mut tr = 0.0;
        for i in 0..n {
            tr += prod.at(i, i);
        }
        tr / ((n - 1) as f64 * (n - 1) as f64)
    }

    fn random_matrix(rng: &mut DetRng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn hsic_matches_double_product_oracle() {
        let mut rng = DetRng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(2..=8);
            let s = random_matrix(&mut rng, n, n);
            let s2 = random_matrix(&mut rng, n, n);
            let got = hsic_linear(&s, &s2).unwrap();
            let want = hsic_oracle(&s, &s2);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            let sym = hsic_linear(&s2, &s).unwrap();
            assert!((got - sym).abs() < 1e-9, "trace symmetry");
        }
    }

    #[test]
    fn hsic_annihilates_constant_kernels() {
        let mut rng = DetRng::seed_from_u64(5);
        let s = random_matrix(&mut rng, 6, 6);
        let c = Tensor::from_fn(6, 6, |_, _| 3.7);
        assert!(hsic_linear(&s, &c).unwrap().abs() < 1e-9);
        assert!(hsic_linear(&c, &s).unwrap().abs() < 1e-9);
    }

    #[test]
    fn hsic_rejects_tiny_or_mismatched_input() {
        let one = Tensor::from_fn(1, 1, |_, _| 1.0);
        assert!(matches!(hsic_linear(&one, &one), Err(Error::Degenerate(_))));
        let a = Tensor::zeros(vec![3, 3]);
        let b = Tensor::zeros(vec![4, 4]);
        assert!(matches!(hsic_linear(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    fn embedding(rng: &mut DetRng, n: usize, d: usize) -> EmbeddingMatrix {
        let ids = (0..n).map(|i| format!("N{i}")).collect();
        EmbeddingMatrix::new(ids, random_matrix(rng, n, d)).unwrap()
    }

    /// Feature-space cross-oracle on centered matrices:
    /// ‖E′ᵀE‖²_F / (‖EᵀE‖_F · ‖E′ᵀE′‖_F).
    fn cka_feature_oracle(e: &EmbeddingMatrix, e2: &EmbeddingMatrix) -> f64 {
        let mut a = e.matrix.clone();
        let mut b = e2.matrix.clone();
        center_columns(&mut a);
        center_columns(&mut b);
        let fro2 = |m: &Tensor<f64>| m.data().iter().map(|x| x * x).sum::<f64>();
        let cross = fro2(&b.transpose().unwrap().matmul(&a).unwrap());
        let na = fro2(&a.transpose().unwrap().matmul(&a).unwrap()).sqrt();
        let nb = fro2(&b.transpose().unwrap().matmul(&b).unwrap()).sqrt();
        cross / (na * nb)
    }

    #[test]
    fn cka_self_similarity_is_one() {
        let mut rng = DetRng::seed_from_u64(6);
        for _ in 0..20 {
            let e = embedding(&mut rng, 7, 4);
            assert!((linear_cka(&e, &e).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cka_matches_feature_space_oracle() {
        let mut rng = DetRng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(3..=9);
            let e = embedding(&mut rng, n, 3);
            let e2 = EmbeddingMatrix::new(e.ids.clone(), random_matrix(&mut rng, n, 4)).unwrap();
            let got = linear_cka(&e, &e2).unwrap();
            let want = cka_feature_oracle(&e, &e2);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            let sym = linear_cka(&e2, &e).unwrap();
            assert!((got - sym).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn cka_is_invariant_to_rotation_and_scale() {
        let mut rng = DetRng::seed_from_u64(8);
        let e = embedding(&mut rng, 8, 4);
        // Orthogonal map: compose Givens rotations over coordinate pairs.
        let mut rotated = e.matrix.clone();
        for (p, q, angle) in [(0usize, 1usize, 0.9f64), (2, 3, -0.4), (1, 2, 1.7)] {
            let (c, s) = (angle.cos(), angle.sin());
            for i in 0..rotated.rows() {
                let (x, y) = (rotated.at(i, p), rotated.at(i, q));
                *rotated.at_mut(i, p) = c * x - s * y;
                *rotated.at_mut(i, q) = s * x + c * y;
            }
        }
        for v in rotated.data_mut() {
            *v *= -2.5; // isotropic scaling (sign included)
        }
        let e2 = EmbeddingMatrix::new(e.ids.clone(), rotated).unwrap();
        assert!((linear_cka(&e, &e2).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cka_rejects_misalignment_and_constants() {
        let mut rng = DetRng::seed_from_u64(9);
        let e = embedding(&mut rng, 5, 3);
        let mut other = embedding(&mut rng, 5, 3);
        other.ids[2] = "stranger".into();
        let err = linear_cka(&e, &other).unwrap_err();
        assert!(matches!(&err, Error::Alignment(msg) if msg.contains("stranger")), "{err:?}");

        let constant =
            EmbeddingMatrix::new(e.ids.clone(), Tensor::from_fn(5, 3, |_, _| 1.5)).unwrap();
        assert!(matches!(linear_cka(&e, &constant), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cka_subsample_is_deterministic_and_full_when_small() {
        let mut rng = DetRng::seed_from_u64(10);
        let e = embedding(&mut rng, 30, 4);
        let e2 = EmbeddingMatrix::new(e.ids.clone(), random_matrix(&mut rng, 30, 4)).unwrap();
        let a = linear_cka_subsampled(&e, &e2, 10, 42).unwrap();
        let b = linear_cka_subsampled(&e, &e2, 10, 42).unwrap();
        assert_eq!(a, b);
        let full = linear_cka_subsampled(&e, &e2, 100, 42).unwrap();
        assert_eq!(full, linear_cka(&e, &e2).unwrap());
    }

    // ---- Comparison matrices ----

    #[test]
    fn single_model_comparison_is_a_unit_matrix() {
        let lists = vec![list("i1", &["A", "B"]), list("i2", &["C", "D"])];
        let m = jaccard_matrix(&[("solo".into(), lists)], 2).unwrap();
        assert_eq!(m.values.at(0, 0), 1.0);
        assert_eq!(m.labels, vec!["solo"]);
    }

    #[test]
    fn disjoint_models_score_zero_off_diagonal() {
        let a = vec![list("i1", &["A", "B"]), list("i2", &["C", "D"])];
        let b = vec![list("i1", &["X", "Y"]), list("i2", &["W", "Z"])];
        let m = jaccard_matrix(&[("a".into(), a), ("b".into(), b)], 2).unwrap();
        assert_eq!(m.values.at(0, 1), 0.0);
        assert_eq!(m.values.at(1, 0), 0.0);
        assert_eq!(m.values.at(0, 0), 1.0);
    }

    #[test]
    fn jaccard_matrix_matches_direct_pair_calls() {
        let mut rng = DetRng::seed_from_u64(11);
        let pool: Vec<String> = (0..9).map(|i| format!("N{i}")).collect();
        use rand::seq::SliceRandom;
        let mut models = Vec::new();
        for name in ["m1", "m2", "m3"] {
            let mut lists = Vec::new();
            for imp in ["i1", "i2", "i3", "i4"] {
                let mut p: Vec<&str> = pool.iter().map(String::as_str).collect();
                p.shuffle(&mut rng);
                lists.push(list(imp, &p[..6]));
            }
            models.push((name.to_string(), lists));
        }
        let m = jaccard_matrix(&models, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let direct = mean_jaccard(&models[i].1, &models[j].1, 3).unwrap();
                assert!((m.values.at(i, j) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn comparison_csv_round_trips() {
        let a = vec![list("i1", &["A", "B", "C"])];
        let b = vec![list("i1", &["A", "C", "X"])];
        let m = jaccard_matrix(&[("alpha".into(), a), ("beta".into(), b)], 3).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("model,alpha,beta\n"));
        let re = ComparisonMatrix::from_csv(&csv, MetricTag::JaccardAtK(3)).unwrap();
        assert_eq!(re.labels, m.labels);
        for i in 0..2 {
            for j in 0..2 {
                assert!((re.values.at(i, j) - m.values.at(i, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn misaligned_lists_name_the_pair() {
        let a = vec![list("i1", &["A"])];
        let b = vec![list("OTHER", &["A"])];
        let err = jaccard_matrix(&[("m1".into(), a), ("m2".into(), b)], 1).unwrap_err();
        assert!(matches!(&err, Error::Alignment(msg) if msg.contains("m1") && msg.contains("m2")));
    }

    #[test]
    fn ndcg_gap_matrix_has_zero_diagonal() {
        let m =
            ndcg_gap_matrix(&[("a".into(), 0.7), ("b".into(), 0.5), ("c".into(), 0.9)], 10)
                .unwrap();
        for i in 0..3 {
            assert_eq!(m.values.at(i, i), 0.0);
        }
        assert!((m.values.at(0, 1) - 0.2).abs() < 1e-12);
        assert!((m.values.at(1, 2) - 0.4).abs() < 1e-12);
    }

    // ---- Hierarchical clustering ----

    fn similarity(values: &[&[f64]]) -> ComparisonMatrix {
        let n = values.len();
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for j in 0..n {
                *t.at_mut(i, j) = values[i][j];
            }
        }
        let labels = (0..n).map(|i| format!("m{i}")).collect();
        ComparisonMatrix::new(labels, t, MetricTag::Cka).unwrap()
    }

    #[test]
    fn two_items_merge_at_one_minus_similarity() {
        let m = similarity(&[&[1.0, 0.3], &[0.3, 1.0]]);
        let merges = hierarchical_cluster(&m).unwrap();
        assert_eq!(merges.len(), 1);
        assert_eq!((merges[0].a, merges[0].b), (0, 1));
        assert!((merges[0].height - 0.7).abs() < 1e-12);
        let text = dendrogram_text(&m, &merges);
        assert_eq!(text, "merge m0 m1 at 0.700000\n");
    }

    #[test]
    fn perfect_pair_merges_first_at_zero() {
        let m = similarity(&[
            &[1.0, 1.0, 0.2],
            &[1.0, 1.0, 0.4],
            &[0.2, 0.4, 1.0],
        ]);
        let merges = hierarchical_cluster(&m).unwrap();
        assert_eq!((merges[0].a, merges[0].b), (0, 1));
        assert_eq!(merges[0].height, 0.0);
        // Remaining cluster joins at the average of its two distances.
        assert!((merges[1].height - (0.8 + 0.6) / 2.0).abs() < 1e-12);
    }

    /// Textbook oracle: clusters as explicit member sets, average linkage
    /// recomputed from the original matrix at every step.
    fn clustering_oracle(m: &ComparisonMatrix) -> Vec<Merge> {
        let n = m.labels.len();
        let d = |i: usize, j: usize| 1.0 - m.values.at(i, j);
        let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let mut merges = Vec::new();
        while clusters.len() > 1 {
            let link = |a: &[usize], b: &[usize]| -> f64 {
                let mut acc = 0.0;
                for &x in a {
                    for &y in b {
                        acc += d(x, y);
                    }
                }
                acc / (a.len() * b.len()) as f64
            };
            let (mut bi, mut bj, mut best) = (0, 1, f64::INFINITY);
            for i in 0..clusters.len() {
                for j in (i + 1)..clusters.len() {
                    let dist = link(&clusters[i], &clusters[j]);
                    let key = (
                        *clusters[i].iter().min().unwrap().min(clusters[j].iter().min().unwrap()),
                        *clusters[i].iter().min().unwrap().max(clusters[j].iter().min().unwrap()),
                    );
                    let best_key = (
                        *clusters[bi].iter().min().unwrap().min(clusters[bj].iter().min().unwrap()),
                        *clusters[bi].iter().min().unwrap().max(clusters[bj].iter().min().unwrap()),
                    );
                    if dist < best || (dist == best && key < best_key) {
                        best = dist;
                        bi = i;
                        bj = j;
                    }
                }
            }
            let a = *clusters[bi].iter().min().unwrap();
            let b = *clusters[bj].iter().min().unwrap();
            let merged: Vec<usize> =
                clusters[bi].iter().chain(clusters[bj].iter()).cloned().collect();
            merges.push(Merge {
                a: a.min(b),
                b: a.max(b),
                height: best,
                size: merged.len(),
            });
            clusters[bi] = merged;
            clusters.remove(bj);
        }
        merges
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ndcg_stays_in_unit_interval(
                labels in proptest::collection::vec(any::<bool>(), 1..20),
                k in 1usize..25,
            ) {
                match ndcg_at_k(&labels, k) {
                    Ok(v) => prop_assert!((0.0..=1.0 + 1e-12).contains(&v)),
                    Err(Error::Degenerate(_)) => {
                        prop_assert!(!labels.iter().any(|&l| l));
                    }
                    Err(e) => prop_assert!(false, "unexpected error {e:?}"),
                }
            }

            #[test]
            fn jaccard_is_symmetric_and_bounded(
                perm_seed in any::<u64>(),
                n in 1usize..10,
                k in 1usize..12,
            ) {
                use rand::seq::SliceRandom;
                let mut rng = DetRng::seed_from_u64(perm_seed);
                let pool: Vec<String> = (0..12).map(|i| format!("N{i}")).collect();
                let mut p1: Vec<&str> = pool.iter().map(String::as_str).collect();
                let mut p2 = p1.clone();
                p1.shuffle(&mut rng);
                p2.shuffle(&mut rng);
                let a = list("i", &p1[..n]);
                let b = list("i", &p2[..n]);
                let ab = jaccard_at_k(&a, &b, k).unwrap();
                let ba = jaccard_at_k(&b, &a, k).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(jaccard_at_k(&a, &a, k).unwrap(), 1.0);
            }

            #[test]
            fn cka_bounded_and_symmetric(seed in any::<u64>()) {
                let mut rng = DetRng::seed_from_u64(seed);
                let n = rng.random_range(3..=8);
                let e = embedding(&mut rng, n, 3);
                let e2 = EmbeddingMatrix::new(
                    e.ids.clone(),
                    random_matrix(&mut rng, n, 5),
                ).unwrap();
                let ab = linear_cka(&e, &e2).unwrap();
                let ba = linear_cka(&e2, &e).unwrap();
                prop_assert!((ab - ba).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&ab));
            }
        }
    }

    #[test]
    fn clustering_matches_exhaustive_oracle_on_random_matrices() {
        let mut rng = DetRng::seed_from_u64(12);
        for _ in 0..20 {
            let n = 6;
            let mut t = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                *t.at_mut(i, i) = 1.0;
                for j in (i + 1)..n {
                    let v = rng.random_range(0.0..1.0);
                    *t.at_mut(i, j) = v;
                    *t.at_mut(j, i) = v;
                }
            }
            let labels = (0..n).map(|i| format!("m{i}")).collect();
            let m = ComparisonMatrix::new(labels, t, MetricTag::Cka).unwrap();
            let got = hierarchical_cluster(&m).unwrap();
            let want = clustering_oracle(&m);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!((g.a, g.b, g.size), (w.a, w.b, w.size));
                assert!((g.height - w.height).abs() < 1e-9, "{} vs {}", g.height, w.height);
            }
        }
    }
}
