//! Evaluation of fitted factor models: discrimination, sparsity, overlap
//! and reconstruction metrics, per-phenotype significance, and edge-scored
//! transition graphs for display.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Entity, EntityKind, Label};
use crate::error::{Error, Result};
use crate::factorization::{cp_value, FactorModel};
use crate::logistic::{column_moments, fit_logistic, LogisticOptions};
use crate::special::normal_two_sided_ln_p;
use crate::tensor::{MeanTransitionMatrix, TransitionTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub sparsity: f64,
    pub overlap: f64,
    pub mse: f64,
}

/// Mann-Whitney form of the ROC AUC; ties count one half.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Precondition("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Precondition("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tied runs
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid = (start + end + 1) as f64 / 2.0;
        rank_sum_pos += mid * order[start..end].iter().filter(|&&i| labels[i].is_positive()).count() as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Gini index of a non-negative vector; 0 for uniform or all-zero
/// vectors, `1 - 1/N` for one-hot.
pub fn gini_index(v: ArrayView1<f64>) -> f64 {
    let n = v.len();
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if n == 0 || norm == 0.0 {
        return 0.0;
    }
    let mut sorted: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let s: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, &c)| (c / norm) * ((nf - (k + 1) as f64 + 0.5) / nf))
        .sum();
    1.0 - 2.0 * s
}

/// Mean Gini index over the 2R pattern columns of B and C.
pub fn gini_sparsity(model: &FactorModel) -> f64 {
    let cols: Vec<f64> = model
        .b
        .columns()
        .into_iter()
        .chain(model.c.columns())
        .map(gini_index)
        .collect();
    cols.iter().sum::<f64>() / cols.len() as f64
}

fn pattern(model: &FactorModel, r: usize) -> Vec<f64> {
    model.b.column(r).iter().chain(model.c.column(r).iter()).copied().collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity between the concatenated patterns `[b_r; c_r]`
/// over all unordered phenotype pairs.
pub fn overlap(model: &FactorModel) -> Result<f64> {
    let r = model.rank();
    if r < 2 {
        return Err(Error::Precondition("overlap needs at least two phenotypes".into()));
    }
    let patterns: Vec<Vec<f64>> = (0..r).map(|q| pattern(model, q)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for p in 0..r {
        for q in p + 1..r {
            total += cosine(&patterns[p], &patterns[q]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// `||O - O_hat||^2 / (I J J)` over the full grid.
pub fn mse(model: &FactorModel, tensor: &TransitionTensor) -> Result<f64> {
    model.check()?;
    let (ni, nj, nk) = tensor.shape();
    if model.a.nrows() != ni || model.b.nrows() != nj || model.c.nrows() != nk {
        return Err(Error::Dimension(format!(
            "model ({}, {}, {}) does not fit tensor ({ni}, {nj}, {nk})",
            model.a.nrows(),
            model.b.nrows(),
            model.c.nrows()
        )));
    }
    let (a, b, c) = (model.a.view(), model.b.view(), model.c.view());
    let gram = |x: ArrayView2<f64>| x.t().dot(&x);
    let recon: f64 = (gram(a) * gram(b) * gram(c)).sum();
    let mut cross = 0.0;
    for (i, s) in tensor.slices().iter().enumerate() {
        for e in s {
            cross += e.value * cp_value(a, b, c, i, e.from, e.to);
        }
    }
    let sse = (tensor.squared_norm() - 2.0 * cross + recon).max(0.0);
    Ok(sse / (ni * nj * nk) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ADLikely,
    ADUnlikely,
}

impl Direction {
    pub fn from_coefficient(c: f64) -> Self {
        if c > 0.0 {
            Direction::ADLikely
        } else {
            Direction::ADUnlikely
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    /// `None` for the intercept.
    pub phenotype: Option<usize>,
    pub coefficient: f64,
    pub std_err: f64,
    pub z: f64,
    pub p: f64,
    /// False when the predictor was constant and left out of the fit.
    pub estimable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeSignificance {
    /// One row per phenotype followed by the intercept.
    pub rows: Vec<Coefficient>,
    pub standardized: bool,
    pub penalized: bool,
}

impl PhenotypeSignificance {
    pub fn phenotypes(&self) -> impl Iterator<Item = &Coefficient> {
        self.rows.iter().filter(|c| c.phenotype.is_some())
    }

    pub fn significant(&self, alpha: f64) -> Vec<&Coefficient> {
        self.phenotypes().filter(|c| c.estimable && c.p < alpha).collect()
    }

    /// Table with columns `term,coeff,std_err,z,p`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("term,coeff,std_err,z,p\n");
        for c in &self.rows {
            let term = match c.phenotype {
                Some(r) => format!("x{r}"),
                None => "intercept".to_string(),
            };
            let _ = writeln!(out, "{term},{},{},{},{}", c.coefficient, c.std_err, c.z, c.p);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignificanceOptions {
    /// Standardize membership columns before fitting.
    pub standardize: bool,
    /// Ridge penalty; 0 gives the plain maximum-likelihood fit.
    pub l2: f64,
}

impl Default for SignificanceOptions {
    fn default() -> Self {
        Self {
            standardize: true,
            l2: 0.0,
        }
    }
}

/// Logistic regression of labels on phenotype memberships with Wald tests.
///
/// Standard errors come from the inverse observed information at the
/// optimum. Constant columns are left out and reported as non-estimable.
pub fn logit_significance(a: ArrayView2<f64>, labels: &[Label], opts: &SignificanceOptions) -> Result<PhenotypeSignificance> {
    let (n, r) = a.dim();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} membership rows for {} labels", labels.len())));
    }
    let (mean, sd) = column_moments(a);
    let kept: Vec<usize> = (0..r).filter(|&q| sd[q] > 0.0).collect();
    let mut x = Array2::<f64>::zeros((n, kept.len()));
    for (col, &q) in kept.iter().enumerate() {
        let src = a.column(q);
        let mut dst = x.column_mut(col);
        if opts.standardize {
            dst.assign(&src.mapv(|v| (v - mean[q]) / sd[q]));
        } else {
            dst.assign(&src);
        }
    }
    let y: Vec<bool> = labels.iter().map(|l| l.is_positive()).collect();
    let fit = fit_logistic(
        x.view(),
        &y,
        &LogisticOptions {
            l2: opts.l2,
            ..Default::default()
        },
    )
    ?;
    let wald = |coef: f64, var: f64, phenotype: Option<usize>| {
        let se = var.sqrt();
        let z = coef / se;
        Coefficient {
            phenotype,
            coefficient: coef,
            std_err: se,
            z,
            p: normal_two_sided_ln_p(z).exp(),
            estimable: true,
        }
    };
    let mut rows: Vec<Coefficient> = (0..r)
        .map(|q| Coefficient {
            phenotype: Some(q),
            coefficient: 0.0,
            std_err: f64::INFINITY,
            z: 0.0,
            p: 1.0,
            estimable: false,
        })
        .collect();
    for (col, &q) in kept.iter().enumerate() {
        rows[q] = wald(fit.weights[col], fit.covariance[[col, col]], Some(q));
    }
    let k = kept.len();
    rows.push(wald(fit.intercept, fit.covariance[[k, k]], None));
    Ok(PhenotypeSignificance {
        rows,
        standardized: opts.standardize,
        penalized: opts.l2 > 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    From,
    To,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub entity: usize,
    pub code: String,
    pub kind: EntityKind,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeGraph {
    pub phenotype: usize,
    pub direction: Direction,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSelection {
    /// Highest scores, ties by `(from, to)`.
    TopK,
    /// Seeded sample of `top_k` edges from the best `pool` scores.
    RandomAmongTop { pool: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeOptions {
    pub epsilon: f64,
    pub top_k: usize,
    pub selection: EdgeSelection,
}

impl Default for EdgeOptions {
    fn default() -> Self {
        Self {
            epsilon: 16.0,
            top_k: 10,
            selection: EdgeSelection::TopK,
        }
    }
}

/// Scores `B[j,r] C[k,r] (log2 M[j,k] + epsilon)` for every transition with
/// positive memberships and probability, keeping the best `top_k`.
///
/// Edges whose shifted log-probability is negative are dropped with a
/// warning.
pub fn edge_scores(
    phenotype: usize,
    b: ArrayView2<f64>,
    c: ArrayView2<f64>,
    mean: &MeanTransitionMatrix,
    vocabulary: &[Entity],
    direction: Direction,
    opts: &EdgeOptions,
) -> Result<PhenotypeGraph> {
    let nj = b.nrows();
    if c.nrows() != nj || mean.values.dim() != (nj, nj) || vocabulary.len() != nj {
        return Err(Error::Dimension("B, C, transition matrix and vocabulary disagree".into()));
    }
    if phenotype >= b.ncols() || phenotype >= c.ncols() {
        return Err(Error::Dimension(format!("phenotype {phenotype} out of range")));
    }
    if !(opts.epsilon > 0.0) {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let mut edges = Vec::new();
    let mut dropped = 0usize;
    for j in 0..nj {
        let bj = b[[j, phenotype]];
        if bj <= 0.0 {
            continue;
        }
        for k in 0..nj {
            let ck = c[[k, phenotype]];
            let m = mean.values[[j, k]];
            if ck <= 0.0 || m <= 0.0 {
                continue;
            }
            let shifted = m.log2() + opts.epsilon;
            if shifted < 0.0 {
                dropped += 1;
                continue;
            }
            let score = bj * ck * shifted;
            if score > 0.0 {
                edges.push(GraphEdge { from: j, to: k, score });
            }
        }
    }
    if dropped > 0 {
        log::warn!(
            "phenotype {phenotype}: dropped {dropped} edges with log2 probability below -{}",
            opts.epsilon
        );
    }
    edges.sort_by(|x, y| y.score.total_cmp(&x.score).then((x.from, x.to).cmp(&(y.from, y.to))));
    let edges = match opts.selection {
        EdgeSelection::TopK => {
            edges.truncate(opts.top_k);
            edges
        }
        EdgeSelection::RandomAmongTop { pool, seed } => {
            edges.truncate(pool.max(opts.top_k));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let take = opts.top_k.min(edges.len());
            let mut picked: Vec<usize> = sample(&mut rng, edges.len(), take).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| edges[i].clone()).collect()
        }
    };

    let mut nodes: Vec<GraphNode> = Vec::new();
    let mut add = |entity: usize, role: Role| {
        if !nodes.iter().any(|n| n.entity == entity && n.role == role) {
            nodes.push(GraphNode {
                entity,
                code: vocabulary[entity].code.clone(),
                kind: vocabulary[entity].kind,
                role,
            });
        }
    };
    for e in &edges {
        add(e.from, Role::From);
        add(e.to, Role::To);
    }
    Ok(PhenotypeGraph {
        phenotype,
        direction,
        nodes,
        edges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Dot,
    Json,
}

fn node_id(phenotype: usize, role: Role, entity: usize) -> String {
    let role = match role {
        Role::From => "from",
        Role::To => "to",
    };
    format!("p{phenotype}_{role}_{entity}")
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz document: medications as boxes, diagnoses as ovals, one
/// cluster per phenotype.
pub fn render_dot(graphs: &[PhenotypeGraph]) -> String {
    let mut out = String::from("digraph phenotypes {\n");
    if !graphs.is_empty() {
        out.push_str("  rankdir=LR;\n");
    }
    for g in graphs {
        let dir = match g.direction {
            Direction::ADLikely => "AD likely",
            Direction::ADUnlikely => "AD unlikely",
        };
        let _ = writeln!(out, "  subgraph cluster_{} {{", g.phenotype);
        let _ = writeln!(out, "    label=\"phenotype {} ({dir})\";", g.phenotype);
        for n in &g.nodes {
            let shape = match n.kind {
                EntityKind::Medication => "box",
                EntityKind::Diagnosis => "oval",
            };
            let _ = writeln!(
                out,
                "    \"{}\" [label=\"{}\", shape={shape}];",
                node_id(g.phenotype, n.role, n.entity),
                escape(&n.code)
            );
        }
        for e in &g.edges {
            let _ = writeln!(
                out,
                "    \"{}\" -> \"{}\" [label=\"{:.4}\"];",
                node_id(g.phenotype, Role::From, e.from),
                node_id(g.phenotype, Role::To, e.to),
                e.score
            );
        }
        out.push_str("  }\n");
    }
    out.push_str("}\n");
    out
}

pub fn render_json(graphs: &[PhenotypeGraph]) -> String {
    let mut s = serde_json::to_string_pretty(graphs).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn export_graph(graphs: &[PhenotypeGraph], format: GraphFormat, path: &Path) -> Result<()> {
    let body = match format {
        GraphFormat::Dot => render_dot(graphs),
        GraphFormat::Json => render_json(graphs),
    };
    std::fs::write(path, body)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeBins {
    pub phenotype: usize,
    /// Positive-label patients per bin.
    pub positive: Vec<usize>,
    /// Negative-label patients per bin.
    pub negative: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratificationTable {
    pub thresholds: Vec<f64>,
    pub rows: Vec<PhenotypeBins>,
}

impl StratificationTable {
    /// Long-form CSV `phenotype,bin,lower,upper,positive,negative`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phenotype,bin,lower,upper,positive,negative\n");
        for row in &self.rows {
            for b in 0..row.positive.len() {
                let lower = if b == 0 { f64::NEG_INFINITY } else { self.thresholds[b - 1] };
                let upper = self.thresholds.get(b).copied().unwrap_or(f64::INFINITY);
                let _ = writeln!(
                    out,
                    "{},{b},{lower},{upper},{},{}",
                    row.phenotype, row.positive[b], row.negative[b]
                );
            }
        }
        out
    }
}

/// Counts patients of each label per membership bin. Bin `b` holds values
/// in `(t_{b-1}, t_b]`, with open-ended first and last bins, so there are
/// `thresholds.len() + 1` bins.
pub fn membership_stratification(a: ArrayView2<f64>, labels: &[Label], thresholds: &[f64]) -> Result<StratificationTable> {
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition("thresholds must be strictly ascending".into()));
    }
    if labels.len() != a.nrows() {
        return Err(Error::Dimension("labels do not match membership rows".into()));
    }
    let bins = thresholds.len() + 1;
    let rows = a
        .axis_iter(Axis(1))
        .enumerate()
        .map(|(q, col)| {
            let mut positive = vec![0; bins];
            let mut negative = vec![0; bins];
            for (v, l) in col.iter().zip(labels) {
                let bin = thresholds.iter().filter(|&&t| t < *v).count();
                if l.is_positive() {
                    positive[bin] += 1;
                } else {
                    negative[bin] += 1;
                }
            }
            PhenotypeBins {
                phenotype: q,
                positive,
                negative,
            }
        })
        .collect();
    Ok(StratificationTable {
        thresholds: thresholds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `(estimated column, reference column, cosine)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub mean_cosine: f64,
}

/// Greedily pairs estimated and reference phenotypes by the cosine of their
/// concatenated `[b; c]` patterns (scale-free, permutation-free).
pub fn align_patterns(
    est_b: ArrayView2<f64>,
    est_c: ArrayView2<f64>,
    ref_b: ArrayView2<f64>,
    ref_c: ArrayView2<f64>,
) -> Result<Alignment> {
    if est_b.nrows() != ref_b.nrows() || est_c.nrows() != ref_c.nrows() {
        return Err(Error::Dimension("pattern lengths differ".into()));
    }
    let col = |b: ArrayView2<f64>, c: ArrayView2<f64>, r: usize| -> Vec<f64> {
        b.column(r).iter().chain(c.column(r).iter()).copied().collect()
    };
    let (re, rt) = (est_b.ncols(), ref_b.ncols());
    let mut cands = Vec::with_capacity(re * rt);
    for p in 0..re {
        let ep = col(est_b, est_c, p);
        for q in 0..rt {
            cands.push((cosine(&ep, &col(ref_b, ref_c, q)), p, q));
        }
    }
    cands.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut used_e = vec![false; re];
    let mut used_t = vec![false; rt];
    let mut pairs = Vec::new();
    for (cos, p, q) in cands {
        if !used_e[p] && !used_t[q] {
            used_e[p] = true;
            used_t[q] = true;
            pairs.push((p, q, cos));
        }
    }
    let mean_cosine = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|x| x.2).sum::<f64>() / pairs.len() as f64
    };
    Ok(Alignment { pairs, mean_cosine })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn labels(v: &[i64]) -> Vec<Label> {
        v.iter().map(|&x| Label::from_sign(x).unwrap()).collect()
    }

    #[test]
    fn auc_examples() {
        let y = labels(&[-1, -1, 1, 1]);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &y).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &y).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &labels(&[1, 1])).is_err());
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini_index(Array1::from_elem(7, 0.3).view()), 0.0);
        let mut one_hot = Array1::zeros(8);
        one_hot[3] = 2.5;
        assert!((gini_index(one_hot.view()) - (1.0 - 1.0 / 8.0)).abs() < 1e-15);
        assert_eq!(gini_index(Array1::zeros(4).view()), 0.0);
    }

    fn model(b: Array2<f64>, c: Array2<f64>) -> FactorModel {
        let r = b.ncols();
        FactorModel {
            a: Array2::zeros((1, r)),
            b,
            c,
            theta: Array1::zeros(r + 1),
            hyper: Default::default(),
        }
    }

    #[test]
    fn one_hot_columns_sparsity() {
        let j = 5;
        let m = model(Array2::eye(j), Array2::eye(j));
        assert!((gini_sparsity(&m) - (1.0 - 1.0 / j as f64)).abs() < 1e-12);
        assert!(overlap(&m).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identical_columns_fully_overlap() {
        let b = array![[0.2, 0.2], [0.5, 0.5], [0.0, 0.0]];
        let m = model(b.clone(), b);
        assert!((overlap(&m).unwrap() - 1.0).abs() < 1e-12);
        let single = model(array![[1.0], [0.0]], array![[1.0], [0.0]]);
        assert!(overlap(&single).is_err());
    }

    #[test]
    fn edge_score_hand_value() {
        let vocab: Vec<Entity> = (0..2)
            .map(|i| Entity {
                index: i,
                kind: if i == 0 { EntityKind::Medication } else { EntityKind::Diagnosis },
                code: format!("X{i}"),
            })
            .collect();
        let b = array![[0.5], [0.0]];
        let c = array![[0.0], [0.4]];
        let mean = MeanTransitionMatrix {
            values: array![[0.25, 0.25], [0.25, 0.25]],
        };
        let opts = EdgeOptions {
            epsilon: 10.0,
            top_k: 5,
            selection: EdgeSelection::TopK,
        };
        let g = edge_scores(0, b.view(), c.view(), &mean, &vocab, Direction::ADLikely, &opts).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert!((g.edges[0].score - 1.6).abs() < 1e-12);
        assert_eq!(g.nodes.len(), 2);
        let none = EdgeOptions { top_k: 0, ..opts };
        let g = edge_scores(0, b.view(), c.view(), &mean, &vocab, Direction::ADLikely, &none).unwrap();
        assert!(g.edges.is_empty() && g.nodes.is_empty());
        // entity 1 has zero from-membership, so no edge leaves it
        assert!(edge_scores(0, b.view(), c.view(), &mean, &vocab, Direction::ADLikely, &opts)
            .unwrap()
            .edges
            .iter()
            .all(|e| e.from != 1));
    }

    #[test]
    fn low_probability_edges_are_dropped() {
        let vocab: Vec<Entity> = (0..1)
            .map(|i| Entity {
                index: i,
                kind: EntityKind::Diagnosis,
                code: "D:x".into(),
            })
            .collect();
        let mean = MeanTransitionMatrix {
            values: array![[2f64.powi(-20)]],
        };
        let one = array![[1.0]];
        let g = edge_scores(0, one.view(), one.view(), &mean, &vocab, Direction::ADUnlikely, &EdgeOptions::default()).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn dot_rendering() {
        assert_eq!(render_dot(&[]), "digraph phenotypes {\n}\n");
        assert_eq!(render_json(&[]).trim(), "[]");
        let g = PhenotypeGraph {
            phenotype: 2,
            direction: Direction::ADLikely,
            nodes: vec![
                GraphNode {
                    entity: 0,
                    code: "M:a".into(),
                    kind: EntityKind::Medication,
                    role: Role::From,
                },
                GraphNode {
                    entity: 1,
                    code: "D:b".into(),
                    kind: EntityKind::Diagnosis,
                    role: Role::To,
                },
            ],
            edges: vec![GraphEdge { from: 0, to: 1, score: 1.5 }],
        };
        let dot = render_dot(std::slice::from_ref(&g));
        assert_eq!(dot.matches("->").count(), 1);
        assert!(dot.contains("shape=box") && dot.contains("shape=oval"));
        assert_eq!(dot, render_dot(&[g]));
    }

    #[test]
    fn stratification_examples() {
        let a = array![[0.0, 0.05], [0.0, 0.2], [0.0, 0.6], [0.0, 0.9]];
        let y = labels(&[1, -1, 1, 1]);
        let t = membership_stratification(a.view(), &y, &[0.0, 0.1, 0.5]).unwrap();
        assert_eq!(t.rows[0].positive, vec![3, 0, 0, 0]);
        assert_eq!(t.rows[0].negative, vec![1, 0, 0, 0]);
        assert_eq!(t.rows[1].positive, vec![0, 1, 0, 2]);
        assert_eq!(t.rows[1].negative, vec![0, 0, 1, 0]);
        assert!(membership_stratification(a.view(), &y, &[0.5, 0.1]).is_err());
    }
}
