//! Newton/IRLS logistic regression with an optional ridge penalty.
//!
//! Shared by the propensity model and the per-phenotype significance test.
//! The intercept is never penalized.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_inverse, cholesky_solve};
use crate::special::{sigmoid, softplus};

#[derive(Debug, Clone)]
pub struct LogisticOptions {
    pub l2: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Starting point: weights followed by the intercept.
    pub init: Option<Vec<f64>>,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            l2: 0.0,
            tolerance: 1e-8,
            max_iter: 100,
            init: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub weights: Array1<f64>,
    pub intercept: f64,
    /// Inverse of the (penalized) Hessian, ordered weights then intercept.
    pub covariance: Array2<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl LogisticFit {
    pub fn linear_predictor(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&self.weights) + self.intercept
    }
}

/// Penalized negative log-likelihood at `beta = [w; b]`.
pub fn penalized_nll(x: ArrayView2<f64>, y: &[bool], beta: &Array1<f64>, l2: f64) -> f64 {
    let p = x.ncols();
    let w = beta.slice(ndarray::s![..p]);
    let eta = x.dot(&w) + beta[p];
    let nll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| softplus(e) - if yi { e } else { 0.0 })
        .sum();
    nll + 0.5 * l2 * w.dot(&w)
}

fn gradient_and_hessian(
    x: ArrayView2<f64>,
    y: &[bool],
    beta: &Array1<f64>,
    l2: f64,
) -> (Array1<f64>, Array2<f64>) {
    let (n, p) = x.dim();
    let w = beta.slice(ndarray::s![..p]);
    let eta = x.dot(&w) + beta[p];
    let mut grad = Array1::<f64>::zeros(p + 1);
    let mut hess = Array2::<f64>::zeros((p + 1, p + 1));
    let mut row = Array1::<f64>::zeros(p + 1);
    for i in 0..n {
        let mu = sigmoid(eta[i]);
        let r = mu - if y[i] { 1.0 } else { 0.0 };
        let wt = mu * (1.0 - mu);
        row.slice_mut(ndarray::s![..p]).assign(&x.row(i));
        row[p] = 1.0;
        grad.scaled_add(r, &row);
        for a in 0..=p {
            let ra = wt * row[a];
            if ra == 0.0 {
                continue;
            }
            for b in a..=p {
                hess[[a, b]] += ra * row[b];
            }
        }
    }
    for a in 0..=p {
        for b in 0..a {
            hess[[a, b]] = hess[[b, a]];
        }
    }
    for j in 0..p {
        grad[j] += l2 * beta[j];
        hess[[j, j]] += l2;
    }
    (grad, hess)
}

/// Fits a logistic regression by damped Newton steps until the gradient norm
/// drops below `opts.tolerance`.
///
/// Without a penalty, perfectly separable data is reported as
/// [`Error::NonConvergence`] since the maximum-likelihood estimate does not exist.
pub fn fit_logistic(x: ArrayView2<f64>, y: &[bool], opts: &LogisticOptions) -> Result<LogisticFit> {
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} labels", y.len())));
    }
    let positives = y.iter().filter(|&&v| v).count();
    if positives == 0 || positives == n {
        return Err(Error::Precondition(
            "logistic regression needs samples from both classes".into(),
        ));
    }
    let mut beta = match &opts.init {
        Some(v) if v.len() == p + 1 => Array1::from(v.clone()),
        Some(v) => {
            return Err(Error::Dimension(format!(
                "initial point has {} entries, expected {}",
                v.len(),
                p + 1
            )))
        }
        None => Array1::zeros(p + 1),
    };

    let mut loss = penalized_nll(x, y, &beta, opts.l2);
    let mut iterations = 0;
    let mut converged = false;
    let (mut grad, mut hess) = gradient_and_hessian(x, y, &beta, opts.l2);
    for _ in 0..opts.max_iter {
        let gnorm = grad.dot(&grad).sqrt();
        if gnorm < opts.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let l = cholesky(&hess).ok_or_else(|| {
            Error::NonConvergence(
                "Hessian is singular (collinear predictors or separation); refit with l2 > 0"
                    .into(),
            )
        })?;
        let step = cholesky_solve(&l, &grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &beta - &(t * &step);
            let trial_loss = penalized_nll(x, y, &trial, opts.l2);
            if trial_loss <= loss + 1e-12 * loss.abs().max(1.0) {
                beta = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        (grad, hess) = gradient_and_hessian(x, y, &beta, opts.l2);
    }
    let gradient_norm = grad.dot(&grad).sqrt();
    if gradient_norm < opts.tolerance {
        converged = true;
    }

    if opts.l2 == 0.0 {
        let eta = x.dot(&beta.slice(ndarray::s![..p])) + beta[p];
        let separated = eta
            .iter()
            .zip(y)
            .all(|(&e, &yi)| if yi { e > 0.0 } else { e < 0.0 });
        if separated {
            return Err(Error::NonConvergence(
                "classes are completely separated; the unpenalized estimate diverges, refit with l2 > 0"
                    .into(),
            ));
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "gradient norm {gradient_norm:.3e} after {iterations} Newton iterations"
        )));
    }
    let l = cholesky(&hess)
        .ok_or_else(|| Error::NonConvergence("Hessian is singular at the optimum".into()))?;
    let covariance = cholesky_inverse(&l);
    Ok(LogisticFit {
        weights: beta.slice(ndarray::s![..p]).to_owned(),
        intercept: beta[p],
        covariance,
        iterations,
        gradient_norm,
    })
}

/// Column means and standard deviations (population form).
pub fn column_moments(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let mut sd = Array1::<f64>::zeros(x.ncols());
    for (j, col) in x.axis_iter(Axis(1)).enumerate() {
        let v = col.iter().map(|&a| (a - mean[j]).powi(2)).sum::<f64>() / n;
        sd[j] = v.sqrt();
    }
    (mean, sd)
}
