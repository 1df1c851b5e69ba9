//! Fixtures and independent reference implementations shared by the
//! integration suites. Oracles here deliberately avoid the library's own
//! helpers: dense triple loops, explicit pair enumeration, Gauss-Jordan
//! inversion, exhaustive active sets.
#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use ndarray::{Array1, Array2, Array3};
use phenotyper_core::analysis::{align_patterns, auc, gini_sparsity};
use phenotyper_core::cohort::{generate_synthetic, Label, SynthConfig};
use phenotyper_core::embedding::{build_pairs, similarity_matrix, train_skipgram, SgdConfig, SimilarityMatrix, SimilaritySource};
use phenotyper_core::factorization::{fit, predict, project_new_patients, HyperParams, Problem};
use phenotyper_core::tensor::{build_transition_tensor, Entry, TensorMode, TransitionTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Count-mode tensor with roughly `density` of the cells filled.
pub fn random_tensor(rng: &mut ChaCha8Rng, ni: usize, nj: usize, density: f64) -> TransitionTensor {
    let slices = (0..ni)
        .map(|_| {
            let mut s = Vec::new();
            for from in 0..nj {
                for to in 0..nj {
                    if rng.random_bool(density) {
                        s.push(Entry {
                            from,
                            to,
                            value: rng.random_range(0.5..3.0),
                        });
                    }
                }
            }
            s
        })
        .collect();
    TransitionTensor::from_slices(nj, slices, TensorMode::Counts).unwrap()
}

/// Symmetric, unit-diagonal, entries in [0, 1].
pub fn random_similarity(rng: &mut ChaCha8Rng, n: usize) -> SimilarityMatrix {
    let mut s = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random_range(0.0..1.0);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    SimilarityMatrix::new(s).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Label> {
    let mut y: Vec<Label> = (0..n)
        .map(|_| if rng.random_bool(0.5) { Label::Positive } else { Label::Negative })
        .collect();
    y[0] = Label::Positive;
    y[n - 1] = Label::Negative;
    y
}

pub fn dense(t: &TransitionTensor) -> Array3<f64> {
    let (ni, nj, nk) = t.shape();
    let mut d = Array3::<f64>::zeros((ni, nj, nk));
    for i in 0..ni {
        for e in t.slice(i) {
            d[[i, e.from, e.to]] = e.value;
        }
    }
    d
}

pub fn triple_loop_cp(a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>) -> Array3<f64> {
    let (ni, nj, nk, r) = (a.nrows(), b.nrows(), c.nrows(), a.ncols());
    let mut out = Array3::<f64>::zeros((ni, nj, nk));
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                let mut v = 0.0;
                for q in 0..r {
                    v += a[[i, q]] * b[[j, q]] * c[[k, q]];
                }
                out[[i, j, k]] = v;
            }
        }
    }
    out
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// The full coupled objective, written out cell by cell.
pub struct DenseProblem {
    pub o: Array3<f64>,
    pub s: Array2<f64>,
    pub y: Vec<f64>,
    pub mu: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl DenseProblem {
    pub fn terms(&self, a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>, theta: &Array1<f64>) -> [f64; 4] {
        let (ni, nj, nk) = self.o.dim();
        let r = a.ncols();
        let mut tensor = 0.0;
        for i in 0..ni {
            for j in 0..nj {
                for k in 0..nk {
                    let mut v = 0.0;
                    for q in 0..r {
                        v += a[[i, q]] * b[[j, q]] * c[[k, q]];
                    }
                    tensor += (self.o[[i, j, k]] - v).powi(2);
                }
            }
        }
        let mut sim = 0.0;
        for m in [b, c] {
            for j in 0..nj {
                for k in 0..nj {
                    let mut v = 0.0;
                    for q in 0..r {
                        v += m[[j, q]] * m[[k, q]];
                    }
                    sim += (self.s[[j, k]] - v).powi(2);
                }
            }
        }
        let l1: f64 = a.iter().chain(b.iter()).chain(c.iter()).map(|v| v.abs()).sum();
        let mut sup = 0.0;
        for i in 0..ni {
            let mut eta = theta[r];
            for q in 0..r {
                eta += theta[q] * a[[i, q]];
            }
            sup += softplus(-self.y[i] * eta);
        }
        [tensor, self.mu * sup, self.lambda * l1, self.gamma * sim]
    }

    pub fn total(&self, a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>, theta: &Array1<f64>) -> f64 {
        self.terms(a, b, c, theta).iter().sum()
    }
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[[x, col]].abs().total_cmp(&a[[y, col]].abs()))
            .unwrap();
        for k in 0..n {
            a.swap([col, k], [pivot, k]);
            inv.swap([col, k], [pivot, k]);
        }
        let p = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = a[[row, col]];
                for k in 0..n {
                    a[[row, k]] -= f * a[[col, k]];
                    inv[[row, k]] -= f * inv[[col, k]];
                }
            }
        }
    }
    inv
}

/// Plain Newton iterations on the (optionally ridge-penalized on weights)
/// logistic likelihood, intercept last. Returns `(beta, inverse Hessian)`.
pub fn newton_logistic(x: &Array2<f64>, y: &[bool], l2: f64) -> (Array1<f64>, Array2<f64>) {
    let (n, p) = x.dim();
    let mut beta = Array1::<f64>::zeros(p + 1);
    let mut hess = Array2::<f64>::zeros((p + 1, p + 1));
    for _ in 0..100 {
        let mut grad = Array1::<f64>::zeros(p + 1);
        hess.fill(0.0);
        for i in 0..n {
            let mut row = x.row(i).to_vec();
            row.push(1.0);
            let eta: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let t = if y[i] { 1.0 } else { 0.0 };
            for a in 0..=p {
                grad[a] += (mu - t) * row[a];
                for b in 0..=p {
                    hess[[a, b]] += mu * (1.0 - mu) * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            grad[a] += l2 * beta[a];
            hess[[a, a]] += l2;
        }
        let step = invert(&hess).dot(&grad);
        beta = &beta - &step;
        if step.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-13 {
            break;
        }
    }
    (beta, invert(&hess))
}

/// Exhaustive active-set NNLS for `min a^T G a - 2 m^T a, a >= 0`.
pub fn nnls_enumerate(g: &Array2<f64>, m: &Array1<f64>) -> Array1<f64> {
    let r = m.len();
    let mut best = Array1::<f64>::zeros(r);
    let mut best_val = 0.0;
    for mask in 1u32..(1 << r) {
        let support: Vec<usize> = (0..r).filter(|&q| mask & (1 << q) != 0).collect();
        let k = support.len();
        let gs = Array2::from_shape_fn((k, k), |(x, y)| g[[support[x], support[y]]]);
        let ms = Array1::from_shape_fn(k, |x| m[support[x]]);
        let sol = invert(&gs).dot(&ms);
        if sol.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut a = Array1::<f64>::zeros(r);
        for (x, &q) in support.iter().enumerate() {
            a[q] = sol[x];
        }
        let val = a.dot(&g.dot(&a)) - 2.0 * m.dot(&a);
        if val < best_val {
            best_val = val;
            best = a;
        }
    }
    best
}

pub fn auc_pairs(scores: &[f64], labels: &[Label]) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for (sp, lp) in scores.iter().zip(labels) {
        if !lp.is_positive() {
            continue;
        }
        for (sn, ln) in scores.iter().zip(labels) {
            if ln.is_positive() {
                continue;
            }
            total += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / total
}

/// Pairwise form: `sum_ij |x_i - x_j| / (2 N sum x)`.
pub fn gini_direct(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let norm: f64 = v.iter().sum();
    if norm == 0.0 {
        return 0.0;
    }
    let mut diff = 0.0;
    for x in v {
        for y in v {
            diff += (x - y).abs();
        }
    }
    diff / (2.0 * n * norm)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn overlap_pairs(b: &Array2<f64>, c: &Array2<f64>) -> f64 {
    let r = b.ncols();
    let col = |q: usize| -> Vec<f64> { b.column(q).iter().chain(c.column(q).iter()).copied().collect() };
    let mut sum = 0.0;
    let mut n = 0.0;
    for p in 0..r {
        for q in 0..r {
            if p < q {
                sum += cosine(&col(p), &col(q));
                n += 1.0;
            }
        }
    }
    sum / n
}

/// Settings for the planted-cohort experiments: count tensors (per-patient
/// normalization shrinks the data term far below the coupling and
/// supervision terms at unit weights), three restarts.
pub fn planted_hyper(seed: u64, mu: f64, lambda: f64, gamma: f64) -> HyperParams {
    HyperParams {
        rank: 5,
        mu,
        lambda,
        gamma,
        learning_rate: 0.05,
        max_iters: 2000,
        restarts: 3,
        seed,
        ..Default::default()
    }
}

pub struct PlantedOutcome {
    pub cosine: f64,
    pub held_out_auc: f64,
    pub sparsity: f64,
}

/// Synthetic cohort (I=200, J=40, R=5, noise 0.05), last 30% held out and
/// projected, model fitted on the rest.
pub fn planted_run(seed: u64, mu: f64, lambda: f64, gamma: f64) -> PlantedOutcome {
    planted_run_with(5, &planted_hyper(seed, mu, lambda, gamma), false)
}

/// As [`planted_run`] with `true_rank` planted patterns, explicit
/// hyperparameters and optionally permuted labels.
pub fn planted_run_with(true_rank: usize, hyper: &HyperParams, shuffle_labels: bool) -> PlantedOutcome {
    let seed = hyper.seed;
    let cohort = generate_synthetic(&SynthConfig {
        patients: 200,
        entities: 40,
        rank: true_rank,
        noise_rate: 0.05,
        seed,
        ..Default::default()
    })
    .unwrap();
    let tensor = build_transition_tensor(&cohort, TensorMode::Counts, true);
    let table = train_skipgram(
        &build_pairs(&cohort),
        &cohort.kinds(),
        &SgdConfig {
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    let similarity = similarity_matrix(&table, SimilaritySource::Input);
    let mut labels = cohort.labels();
    if shuffle_labels {
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng(seed ^ 0x5eed));
    }
    let n = cohort.n_patients();
    // Patients are drawn independently, so the tail is a fair test set.
    let n_test = (n as f64 * 0.3).round() as usize;
    let order: Vec<usize> = (0..n).collect();
    let (train, test) = order.split_at(n - n_test);
    let pick = |ids: &[usize]| ids.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let train_tensor = tensor.select(train);
    let train_labels = pick(train);
    let out = fit(
        &Problem {
            tensor: &train_tensor,
            similarity: &similarity,
            labels: &train_labels,
        },
        hyper,
    )
    .unwrap();
    let m = &out.model;
    let a_test = project_new_patients(&tensor.select(test), m.b.view(), m.c.view()).unwrap();
    let scores = predict(a_test.view(), &m.theta).unwrap();
    let planted = cohort.planted().unwrap();
    PlantedOutcome {
        cosine: align_patterns(m.b.view(), m.c.view(), planted.true_b.view(), planted.true_c.view())
            .unwrap()
            .mean_cosine,
        held_out_auc: auc(scores.as_slice().unwrap(), &pick(test)).unwrap(),
        sparsity: gini_sparsity(m),
    }
}
