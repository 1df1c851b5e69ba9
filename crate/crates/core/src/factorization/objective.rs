use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use super::{check_factors, FactorModel, HyperParams};
use crate::cohort::Label;
use crate::embedding::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::par;
use crate::special::{sigmoid, softplus};
use crate::tensor::TransitionTensor;

/// Patients per work unit; fixed so reductions do not depend on the
/// number of threads.
const CHUNK: usize = 64;

/// Data side of the objective.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub tensor: &'a TransitionTensor,
    pub similarity: &'a SimilarityMatrix,
    pub labels: &'a [Label],
}

impl Problem<'_> {
    pub fn check(&self, a: ArrayView2<f64>, b: ArrayView2<f64>, c: ArrayView2<f64>, theta: ArrayView1<f64>) -> Result<()> {
        check_factors(a, b, c)?;
        let (i, j, _) = self.tensor.shape();
        if a.nrows() != i {
            return Err(Error::Dimension(format!("A has {} rows for {i} patients", a.nrows())));
        }
        if b.nrows() != j || c.nrows() != j {
            return Err(Error::Dimension(format!("B/C rows differ from {j} entities")));
        }
        if self.similarity.dim() != j {
            return Err(Error::Dimension(format!(
                "similarity is {0}x{0} for {j} entities",
                self.similarity.dim()
            )));
        }
        if self.labels.len() != i {
            return Err(Error::Dimension(format!("{} labels for {i} patients", self.labels.len())));
        }
        if theta.len() != a.ncols() + 1 {
            return Err(Error::Dimension("theta must hold R weights plus an intercept".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub total: f64,
    /// `||O - O_hat||^2` over the full grid.
    pub tensor: f64,
    /// `mu` times the logistic negative log-likelihood.
    pub supervision: f64,
    /// `lambda` times the summed L1 norms.
    pub l1: f64,
    /// `gamma` times the two similarity residuals.
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub c: Array2<f64>,
    pub theta: Array1<f64>,
}

fn gram(x: ArrayView2<f64>) -> Array2<f64> {
    x.t().dot(&x)
}

struct TensorParts {
    cross: f64,
    mttkrp_a: Array2<f64>,
    mttkrp_b: Array2<f64>,
    mttkrp_c: Array2<f64>,
}

/// Inner product with the data plus the three MTTKRP products, accumulated
/// over fixed patient chunks and reduced in chunk order.
fn tensor_parts(t: &TransitionTensor, a: ArrayView2<f64>, b: ArrayView2<f64>, c: ArrayView2<f64>, want_grad: bool) -> TensorParts {
    let (ni, nj, _) = t.shape();
    let r = a.ncols();
    let chunks = par::chunks(ni, CHUNK);
    let partials = par::map_slice(&chunks, |range| {
        let mut cross = 0.0;
        let mut ma = Array2::<f64>::zeros((range.len(), if want_grad { r } else { 0 }));
        let mut mb = Array2::<f64>::zeros(if want_grad { (nj, r) } else { (0, 0) });
        let mut mc = Array2::<f64>::zeros(if want_grad { (nj, r) } else { (0, 0) });
        for (local, i) in range.clone().enumerate() {
            let ai = a.row(i);
            for e in t.slice(i) {
                let bj = b.row(e.from);
                let ck = c.row(e.to);
                let v = e.value;
                for q in 0..r {
                    let bc = bj[q] * ck[q];
                    cross += v * ai[q] * bc;
                    if want_grad {
                        ma[[local, q]] += v * bc;
                        mb[[e.from, q]] += v * ai[q] * ck[q];
                        mc[[e.to, q]] += v * ai[q] * bj[q];
                    }
                }
            }
        }
        (cross, ma, mb, mc)
    });
    let mut out = TensorParts {
        cross: 0.0,
        mttkrp_a: Array2::zeros((if want_grad { ni } else { 0 }, r)),
        mttkrp_b: Array2::zeros((nj, r)),
        mttkrp_c: Array2::zeros((nj, r)),
    };
    for (range, (cross, ma, mb, mc)) in chunks.iter().zip(partials) {
        out.cross += cross;
        if want_grad {
            out.mttkrp_a
                .slice_mut(ndarray::s![range.clone(), ..])
                .assign(&ma);
            out.mttkrp_b += &mb;
            out.mttkrp_c += &mc;
        }
    }
    out
}

fn finite(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term })
    }
}

/// `mu * sum_i softplus(-y_i (w^T A_i + b))` with effective weights `w`.
pub(crate) fn supervision_term(a: ArrayView2<f64>, weights: ArrayView1<f64>, intercept: f64, labels: &[Label], mu: f64) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    let eta = a.dot(&weights);
    mu * eta
        .iter()
        .zip(labels)
        .map(|(&e, y)| softplus(-y.sign() * (e + intercept)))
        .sum::<f64>()
}

/// Objective value and gradient at `(a, b, c, theta)`.
///
/// `theta_mask`, when given, multiplies the logistic weights (not the
/// intercept) inside the supervision term; it is how dropout enters.
pub fn objective_and_gradient(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    c: ArrayView2<f64>,
    theta: ArrayView1<f64>,
    problem: &Problem<'_>,
    hyper: &HyperParams,
    theta_mask: Option<&[f64]>,
) -> Result<(ObjectiveTerms, Gradient)> {
    evaluate(a, b, c, theta, problem, hyper, theta_mask, true).map(|(t, g)| (t, g.expect("requested")))
}

/// Objective value of a fitted model on `problem` with its own hyperparameters.
pub fn objective(model: &FactorModel, problem: &Problem<'_>) -> Result<ObjectiveTerms> {
    evaluate(
        model.a.view(),
        model.b.view(),
        model.c.view(),
        model.theta.view(),
        problem,
        &model.hyper,
        None,
        false,
    )
    .map(|(t, _)| t)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    c: ArrayView2<f64>,
    theta: ArrayView1<f64>,
    problem: &Problem<'_>,
    hyper: &HyperParams,
    theta_mask: Option<&[f64]>,
    want_grad: bool,
) -> Result<(ObjectiveTerms, Option<Gradient>)> {
    problem.check(a, b, c, theta)?;
    let r = a.ncols();

    // tensor term via Gram identity
    let (ga, gb, gc) = (gram(a), gram(b), gram(c));
    let parts = tensor_parts(problem.tensor, a, b, c, want_grad);
    let recon_sq = (&ga * &gb * &gc).sum();
    let tensor = finite("tensor term", problem.tensor.squared_norm() - 2.0 * parts.cross + recon_sq)?;

    // similarity coupling
    let s = problem.similarity.values();
    let resid_b = b.dot(&b.t()) - s;
    let resid_c = c.dot(&c.t()) - s;
    let similarity = finite(
        "similarity term",
        hyper.gamma * (resid_b.iter().map(|v| v * v).sum::<f64>() + resid_c.iter().map(|v| v * v).sum::<f64>()),
    )?;

    let l1 = finite(
        "l1 term",
        hyper.lambda * (a.iter().chain(b.iter()).chain(c.iter()).map(|v| v.abs()).sum::<f64>()),
    )?;

    let w = theta.slice(ndarray::s![..r]);
    let intercept = theta[r];
    let eff_w: Array1<f64> = match theta_mask {
        Some(m) => Array1::from_iter(w.iter().zip(m).map(|(x, m)| x * m)),
        None => w.to_owned(),
    };
    let supervision = finite(
        "supervision term",
        supervision_term(a, eff_w.view(), intercept, problem.labels, hyper.mu),
    )?;

    let terms = ObjectiveTerms {
        total: tensor + similarity + l1 + supervision,
        tensor,
        supervision,
        l1,
        similarity,
    };
    if !want_grad {
        return Ok((terms, None));
    }

    let mut grad_a = 2.0 * (a.dot(&(&gb * &gc)) - &parts.mttkrp_a);
    let mut grad_b = 2.0 * (b.dot(&(&ga * &gc)) - &parts.mttkrp_b);
    let mut grad_c = 2.0 * (c.dot(&(&ga * &gb)) - &parts.mttkrp_c);

    if hyper.gamma != 0.0 {
        grad_b.scaled_add(4.0 * hyper.gamma, &resid_b.dot(&b));
        grad_c.scaled_add(4.0 * hyper.gamma, &resid_c.dot(&c));
    }

    if hyper.lambda != 0.0 {
        let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
        for (g, x) in [(&mut grad_a, a), (&mut grad_b, b), (&mut grad_c, c)] {
            Zip::from(g).and(x).for_each(|g, &x| *g += hyper.lambda * sign(x));
        }
    }

    let mut grad_theta = Array1::<f64>::zeros(r + 1);
    if hyper.mu != 0.0 {
        let eta = a.dot(&eff_w);
        let mut gw = Array1::<f64>::zeros(r);
        let mut g0 = 0.0;
        for (i, y) in problem.labels.iter().enumerate() {
            let ys = y.sign();
            let gi = -hyper.mu * ys * sigmoid(-ys * (eta[i] + intercept));
            grad_a.row_mut(i).scaled_add(gi, &eff_w);
            gw.scaled_add(gi, &a.row(i));
            g0 += gi;
        }
        if let Some(m) = theta_mask {
            for (g, m) in gw.iter_mut().zip(m) {
                *g *= m;
            }
        }
        grad_theta.slice_mut(ndarray::s![..r]).assign(&gw);
        grad_theta[r] = g0;
    }

    Ok((
        terms,
        Some(Gradient {
            a: grad_a,
            b: grad_b,
            c: grad_c,
            theta: grad_theta,
        }),
    ))
}
