//! Within-visit co-occurrence embeddings (skip-gram with negative sampling)
//! and the entity similarity matrix derived from them.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, EntityKind};
use crate::error::{Error, Result};
use crate::par;
use crate::special::{sigmoid, softplus};

/// Ordered `(center, context)` pair of vocabulary indices.
pub type Pair = (usize, usize);

/// All ordered pairs of distinct entities sharing a visit, in
/// (patient, visit, center, context) order.
pub fn build_pairs(cohort: &Cohort) -> Vec<Pair> {
    let mut pairs = Vec::new();
    for p in cohort.patients() {
        for v in &p.visits {
            for (a, &center) in v.entities.iter().enumerate() {
                for (b, &context) in v.entities.iter().enumerate() {
                    if a != b {
                        pairs.push((center, context));
                    }
                }
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    /// Center (input) vectors only.
    Input,
    /// Mean of input and output vectors.
    InputOutputMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub dim: usize,
    /// Negative samples drawn per positive pair.
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub noise_exponent: f64,
    pub seed: u64,
    pub similarity_source: SimilaritySource,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            noise_exponent: 0.75,
            seed: 0,
            similarity_source: SimilaritySource::Input,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("embedding dim must be >= 2".into()));
        }
        if self.negatives < 1 {
            return Err(Error::Config("at least one negative sample is required".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.noise_exponent >= 0.0 && self.noise_exponent.is_finite()) {
            return Err(Error::Config("noise_exponent must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// J x d center vectors.
    pub input: Array2<f64>,
    /// J x d context vectors.
    pub output: Array2<f64>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.input.ncols()
    }

    pub fn n_entities(&self) -> usize {
        self.input.nrows()
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        cosine(self.input.row(a), self.input.row(b))
    }
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Full softmax `p(target | center)` over the entities of kind `restrict`
/// (every entity when `None`), scoring with output vectors of candidates
/// against the center's input vector.
pub fn softmax_prob(
    center: usize,
    target: usize,
    table: &EmbeddingTable,
    kinds: &[EntityKind],
    restrict: Option<EntityKind>,
) -> Result<f64> {
    let j = table.n_entities();
    if kinds.len() != j || center >= j || target >= j {
        return Err(Error::Dimension("entity index outside the embedding table".into()));
    }
    let allowed: Vec<usize> = (0..j)
        .filter(|&m| restrict.is_none_or(|k| kinds[m] == k))
        .collect();
    if allowed.is_empty() {
        return Err(Error::Precondition("restricted vocabulary is empty".into()));
    }
    if !allowed.contains(&target) {
        return Err(Error::Precondition(format!(
            "target {target} is not in the restricted vocabulary"
        )));
    }
    let v = table.input.row(center);
    let scores: Vec<f64> = allowed.iter().map(|&m| table.output.row(m).dot(&v)).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let t = allowed.iter().position(|&m| m == target).expect("checked");
    Ok((scores[t] - log_z).exp())
}

/// Negative-sampling loss of one positive pair and its gradients.
#[derive(Debug, Clone)]
pub struct PairGradient {
    pub loss: f64,
    pub center: Array1<f64>,
    pub positive: Array1<f64>,
    pub negatives: Vec<Array1<f64>>,
}

/// `-log s(u_pos . v) - sum_l log s(-u_l . v)` and its gradients with
/// respect to `v`, `u_pos` and each `u_l`.
pub fn negative_sampling_loss(
    center: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    negatives: &[ArrayView1<f64>],
) -> PairGradient {
    let s_pos = positive.dot(&center);
    let mut loss = softplus(-s_pos);
    let g_pos = -sigmoid(-s_pos);
    let mut grad_center = g_pos * &positive;
    let grad_positive = g_pos * &center;
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for u in negatives {
        let s = u.dot(&center);
        loss += softplus(s);
        let g = sigmoid(s);
        grad_center.scaled_add(g, u);
        grad_negatives.push(g * &center);
    }
    PairGradient {
        loss,
        center: grad_center,
        positive: grad_positive,
        negatives: grad_negatives,
    }
}

struct NoiseTable {
    members: Vec<usize>,
    dist: WeightedIndex<f64>,
}

fn noise_tables(pairs: &[Pair], kinds: &[EntityKind], exponent: f64) -> Vec<(EntityKind, NoiseTable)> {
    let mut counts = vec![0usize; kinds.len()];
    for &(_, ctx) in pairs {
        counts[ctx] += 1;
    }
    [EntityKind::Medication, EntityKind::Diagnosis]
        .into_iter()
        .filter_map(|kind| {
            let members: Vec<usize> = (0..kinds.len())
                .filter(|&m| kinds[m] == kind && counts[m] > 0)
                .collect();
            let weights: Vec<f64> = members.iter().map(|&m| (counts[m] as f64).powf(exponent)).collect();
            let dist = WeightedIndex::new(&weights).ok()?;
            Some((kind, NoiseTable { members, dist }))
        })
        .collect()
}

/// Seeded random initialization: input uniform in `(-0.5/d, 0.5/d)`,
/// output zero.
pub fn initial_table(n_entities: usize, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 / dim as f64;
    let input = Array2::from_shape_fn((n_entities, dim), |_| rng.random_range(-half..half));
    EmbeddingTable {
        input,
        output: Array2::zeros((n_entities, dim)),
    }
}

/// Trains skip-gram vectors by SGD on the negative-sampling objective.
///
/// Negatives for a pair are drawn from the unigram context distribution
/// raised to `noise_exponent`, restricted to the context's entity kind and
/// excluding the context itself. Pairs are visited in a per-epoch seeded
/// shuffle; the learning rate decays linearly to 1e-4 of its start.
pub fn train_skipgram(pairs: &[Pair], kinds: &[EntityKind], cfg: &SgdConfig) -> Result<EmbeddingTable> {
    cfg.validate()?;
    let j = kinds.len();
    if j < 2 {
        return Err(Error::Precondition("embedding needs at least two entities".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Precondition("no co-occurrence pairs to train on".into()));
    }
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= j || b >= j) {
        return Err(Error::Dimension(format!("pair ({a}, {b}) outside a vocabulary of {j}")));
    }
    let mut table = initial_table(j, cfg.dim, cfg.seed);
    if cfg.epochs == 0 {
        return Ok(table);
    }
    let noise = noise_tables(pairs, kinds, cfg.noise_exponent);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let total_steps = (cfg.epochs * pairs.len()) as f64;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0usize;
    let mut negs: Vec<usize> = Vec::with_capacity(cfg.negatives);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &p in &order {
            let (center, context) = pairs[p];
            let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps).max(1e-4);
            step += 1;

            negs.clear();
            if let Some((_, nt)) = noise.iter().find(|(k, _)| *k == kinds[context]) {
                if nt.members.iter().any(|&m| m != context) {
                    while negs.len() < cfg.negatives {
                        let m = nt.members[nt.dist.sample(&mut rng)];
                        if m != context {
                            negs.push(m);
                        }
                    }
                }
            }

            let neg_views: Vec<ArrayView1<f64>> = negs.iter().map(|&m| table.output.row(m)).collect();
            let g = negative_sampling_loss(table.input.row(center), table.output.row(context), &neg_views);
            if !g.loss.is_finite() || g.center.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite skip-gram loss at epoch {epoch}; lower the learning rate (currently {})",
                    cfg.learning_rate
                )));
            }
            epoch_loss += g.loss;
            table.output.row_mut(context).scaled_add(-lr, &g.positive);
            for (&m, gn) in negs.iter().zip(&g.negatives) {
                table.output.row_mut(m).scaled_add(-lr, gn);
            }
            table.input.row_mut(center).scaled_add(-lr, &g.center);
        }
        log::debug!("skip-gram epoch {epoch}: mean loss {:.5}", epoch_loss / pairs.len() as f64);
    }
    Ok(table)
}

/// Symmetric J x J matrix of non-negative cosine similarities with unit
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    /// Validates symmetry (1e-12), unit diagonal and the `[0, 1]` range.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::Dimension(format!("similarity matrix is {r}x{c}")));
        }
        for i in 0..r {
            if values[[i, i]] != 1.0 {
                return Err(Error::Validation(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..r {
                let v = values[[i, j]];
                if !(0.0..=1.0).contains(&v) || (v - values[[j, i]]).abs() > 1e-12 {
                    return Err(Error::Validation(format!(
                        "entry ({i}, {j}) = {v} breaks symmetry or the [0, 1] range"
                    )));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            values: Array2::eye(n),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }
}

/// `S[i][j] = max(0, cosine(v_i, v_j))` with the diagonal forced to 1;
/// zero-norm vectors are dissimilar to everything else.
pub fn similarity_matrix(table: &EmbeddingTable, source: SimilaritySource) -> SimilarityMatrix {
    let vectors = match source {
        SimilaritySource::Input => table.input.clone(),
        SimilaritySource::InputOutputMean => (&table.input + &table.output) * 0.5,
    };
    let j = vectors.nrows();
    let norms: Vec<f64> = vectors.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let rows = par::map_range(j, |a| {
        (0..j)
            .map(|b| {
                if a == b {
                    1.0
                } else if norms[a] == 0.0 || norms[b] == 0.0 {
                    0.0
                } else {
                    // compute on the ordered pair so S is exactly symmetric
                    let (lo, hi) = (a.min(b), a.max(b));
                    let c = vectors.row(lo).dot(&vectors.row(hi)) / (norms[lo] * norms[hi]);
                    c.clamp(0.0, 1.0)
                }
            })
            .collect::<Vec<f64>>()
    });
    let values = Array2::from_shape_vec((j, j), rows.into_iter().flatten().collect()).expect("square");
    SimilarityMatrix { values }
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl Iterator<Item = (String, Vec<f64>)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for (code, vals) in rows {
        let mut rec = vec![code];
        rec.extend(vals.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Header, row labels and values.
type Rows = (Vec<String>, Vec<String>, Vec<Vec<f64>>);

fn read_rows(path: &Path) -> Result<Rows> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
    let mut codes = Vec::new();
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut it = rec.iter();
        codes.push(it.next().unwrap_or_default().to_string());
        let vals = it
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                line: n + 2,
                message: e.to_string(),
            })?;
        if vals.len() != header.len() {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                line: n + 2,
                message: format!("expected {} values, found {}", header.len(), vals.len()),
            });
        }
        rows.push(vals);
    }
    Ok((header, codes, rows))
}

/// Writes `code,v_0,...,v_{d-1}` per entity (input vectors).
pub fn save_embeddings(table: &EmbeddingTable, codes: &[String], path: &Path) -> Result<()> {
    let header = std::iter::once("code".to_string())
        .chain((0..table.dim()).map(|k| format!("v{k}")))
        .collect();
    write_rows(
        path,
        header,
        codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), table.input.row(i).to_vec())),
    )
}

/// Reads input vectors written by [`save_embeddings`]; output vectors are
/// not persisted and come back as zeros.
pub fn load_embeddings(path: &Path) -> Result<(Vec<String>, EmbeddingTable)> {
    let (header, codes, rows) = read_rows(path)?;
    let d = header.len();
    let input = Array2::from_shape_vec((rows.len(), d), rows.into_iter().flatten().collect())
        .map_err(|e| Error::artifact(path, e.to_string()))?;
    let output = Array2::zeros(input.dim());
    Ok((codes, EmbeddingTable { input, output }))
}

/// Dense CSV: header `code,<codes...>`, then one row per entity.
pub fn save_similarity(s: &SimilarityMatrix, codes: &[String], path: &Path) -> Result<()> {
    let header = std::iter::once("code".to_string()).chain(codes.iter().cloned()).collect();
    write_rows(
        path,
        header,
        codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), s.values.row(i).to_vec())),
    )
}

pub fn load_similarity(path: &Path) -> Result<(Vec<String>, SimilarityMatrix)> {
    let (header, codes, rows) = read_rows(path)?;
    if header != codes {
        return Err(Error::artifact(path, "row and column codes differ"));
    }
    let n = codes.len();
    let values = Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect())
        .map_err(|e| Error::artifact(path, e.to_string()))?;
    Ok((codes, SimilarityMatrix::new(values)?))
}
