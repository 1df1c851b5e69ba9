use ndarray::{Array, Array1, Array2, Axis, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{evaluate, supervision_term, ObjectiveTerms, Problem};
use super::{FactorModel, HyperParams, TraceRecord, TrainTrace};
use crate::error::{Error, Result};
use crate::par;
use crate::logistic::{column_moments, fit_logistic, LogisticOptions};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;
const DIVERGENCE: f64 = 1e12;
const WINDOW: usize = 10;

struct Adam<D: Dimension> {
    m: Array<f64, D>,
    v: Array<f64, D>,
}

impl<D: Dimension> Adam<D> {
    fn new(shape: D) -> Self {
        Self {
            m: Array::zeros(shape.clone()),
            v: Array::zeros(shape),
        }
    }

    fn step(&mut self, param: &mut Array<f64, D>, grad: &Array<f64, D>, lr: f64, t: i32) {
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
            });
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: FactorModel,
    pub trace: TrainTrace,
    pub converged: bool,
}

fn record(iteration: usize, t: &ObjectiveTerms) -> TraceRecord {
    TraceRecord {
        iteration,
        total: t.total,
        tensor: t.tensor,
        supervision: t.supervision,
        l1: t.l1,
        similarity: t.similarity,
    }
}

/// Fits the coupled model with ADAM and projection onto `A, B, C >= 0`.
///
/// Runs `restarts` independent initializations and keeps the one with the
/// lowest final objective (ties go to the earlier restart). Factors start at
/// seeded `uniform(0, 1) / sqrt(R)`, `theta` at zero.
/// Dropout masks the logistic weights during training only; the trace
/// records the unmasked objective. Stops after `max_iters` updates or once
/// the total changes by less than `tolerance` (relative) over 10 iterations.
/// Without supervision (`mu == 0`) the logistic weights are fitted
/// afterwards on the standardized memberships so `predict` stays usable.
pub fn fit(problem: &Problem<'_>, hyper: &HyperParams) -> Result<FitOutput> {
    hyper.validate()?;
    let runs = par::map_range(hyper.restarts, |k| fit_once(problem, hyper, k as u64));
    let mut best: Option<FitOutput> = None;
    for run in runs {
        let run = run?;
        let total = |f: &FitOutput| f.trace.last().map_or(f64::INFINITY, |t| t.total);
        if best.as_ref().is_none_or(|b| total(&run) < total(b)) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn fit_once(problem: &Problem<'_>, hyper: &HyperParams, stream: u64) -> Result<FitOutput> {
    let (ni, nj, _) = problem.tensor.shape();
    let r = hyper.rank;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(stream);
    let scale = 1.0 / (r as f64).sqrt();
    let mut init = |rows: usize| Array2::from_shape_fn((rows, r), |_| rng.random::<f64>() * scale);
    let mut a = init(ni);
    let mut b = init(nj);
    let mut c = init(nj);
    let mut theta = Array1::<f64>::zeros(r + 1);
    problem.check(a.view(), b.view(), c.view(), theta.view())?;

    let mut opt_a = Adam::new(a.raw_dim());
    let mut opt_b = Adam::new(b.raw_dim());
    let mut opt_c = Adam::new(c.raw_dim());
    let mut opt_t = Adam::new(theta.raw_dim());
    let use_dropout = hyper.mu > 0.0 && hyper.dropout_rate > 0.0;
    let keep = 1.0 - hyper.dropout_rate;
    let mut mask = vec![1.0; r];

    let mut trace = TrainTrace::default();
    let mut converged = false;
    let mut steps = 0usize;
    for it in 0..hyper.max_iters {
        if use_dropout {
            for m in &mut mask {
                *m = if rng.random_bool(keep) { 1.0 / keep } else { 0.0 };
            }
        }
        let (mut terms, grad) = evaluate(
            a.view(),
            b.view(),
            c.view(),
            theta.view(),
            problem,
            hyper,
            use_dropout.then_some(mask.as_slice()),
            true,
        )?;
        let grad = grad.expect("gradient requested");
        if use_dropout {
            terms.supervision = supervision_term(
                a.view(),
                theta.slice(ndarray::s![..r]),
                theta[r],
                problem.labels,
                hyper.mu,
            );
            terms.total = terms.tensor + terms.similarity + terms.l1 + terms.supervision;
        }
        trace.records.push(record(it, &terms));
        if !terms.total.is_finite() || terms.total > DIVERGENCE {
            return Err(Error::Diverged {
                iteration: it,
                trace: Box::new(trace),
            });
        }
        if it >= WINDOW {
            let before = trace.records[it - WINDOW].total;
            if (before - terms.total).abs() <= hyper.tolerance * before.abs() {
                converged = true;
                break;
            }
        }

        let t = (it + 1) as i32;
        opt_a.step(&mut a, &grad.a, hyper.learning_rate, t);
        opt_b.step(&mut b, &grad.b, hyper.learning_rate, t);
        opt_c.step(&mut c, &grad.c, hyper.learning_rate, t);
        opt_t.step(&mut theta, &grad.theta, hyper.learning_rate, t);
        for x in [&mut a, &mut b, &mut c] {
            x.mapv_inplace(|v| v.max(0.0));
        }
        steps += 1;
    }

    if hyper.mu == 0.0 {
        theta = posthoc_theta(&a, problem)?;
    }
    let model = FactorModel {
        a,
        b,
        c,
        theta,
        hyper: hyper.clone(),
    };
    if !converged {
        let (terms, _) = evaluate(
            model.a.view(),
            model.b.view(),
            model.c.view(),
            model.theta.view(),
            problem,
            hyper,
            None,
            false,
        )?;
        if !terms.total.is_finite() || terms.total > DIVERGENCE {
            return Err(Error::Diverged {
                iteration: steps,
                trace: Box::new(trace),
            });
        }
        trace.records.push(record(steps, &terms));
    }
    Ok(FitOutput {
        model,
        trace,
        converged,
    })
}

/// Ridge logistic weights on standardized memberships, mapped back to the
/// raw membership scale.
fn posthoc_theta(a: &Array2<f64>, problem: &Problem<'_>) -> Result<Array1<f64>> {
    let r = a.ncols();
    let y: Vec<bool> = problem.labels.iter().map(|l| l.is_positive()).collect();
    let positives = y.iter().filter(|&&v| v).count();
    if positives == 0 || positives == y.len() {
        return Ok(Array1::zeros(r + 1));
    }
    let (mean, sd) = column_moments(a.view());
    let safe_sd = sd.mapv(|s| if s > 0.0 { s } else { 1.0 });
    let z = (a - &mean.clone().insert_axis(Axis(0))) / &safe_sd.clone().insert_axis(Axis(0));
    let fit = fit_logistic(
        z.view(),
        &y,
        &LogisticOptions {
            l2: 1e-2,
            ..Default::default()
        },
    )?;
    let mut theta = Array1::<f64>::zeros(r + 1);
    let mut intercept = fit.intercept;
    for q in 0..r {
        if sd[q] > 0.0 {
            theta[q] = fit.weights[q] / sd[q];
            intercept -= fit.weights[q] * mean[q] / sd[q];
        }
    }
    theta[r] = intercept;
    Ok(theta)
}
