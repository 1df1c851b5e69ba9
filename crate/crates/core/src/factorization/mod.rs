//! Supervised, similarity-coupled, non-negative CP factorization of a
//! transition tensor.
//!
//! Minimizes
//!
//! ```text
//! ||O - sum_r a_r o b_r o c_r||^2
//!   + gamma (||S - B B^T||^2 + ||S - C C^T||^2)
//!   + lambda (||A||_1 + ||B||_1 + ||C||_1)
//!   + mu sum_i log(1 + exp(-y_i (theta^T [A_i; 1])))
//! ```
//!
//! over `A, B, C >= 0` and free logistic weights `theta`.

mod fit;
mod io;
mod objective;
mod projection;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::sigmoid;

pub use fit::{fit, FitOutput};
pub use io::{load_model, read_matrix, save_model, save_trace, write_matrix};
pub use objective::{objective, objective_and_gradient, Gradient, ObjectiveTerms, Problem};
pub use projection::{project_new_patients, slice_error};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub rank: usize,
    /// Weight of the logistic supervision term.
    pub mu: f64,
    /// Weight of the L1 penalty.
    pub lambda: f64,
    /// Weight of the similarity coupling.
    pub gamma: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Dropout on the logistic weights during training.
    pub dropout_rate: f64,
    pub seed: u64,
    /// Relative loss change over 10 iterations that counts as converged.
    pub tolerance: f64,
    /// Independent initializations; the lowest final objective wins.
    pub restarts: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            rank: 30,
            mu: 1.0,
            lambda: 0.1,
            gamma: 1.0,
            learning_rate: 0.01,
            max_iters: 1000,
            dropout_rate: 0.1,
            seed: 0,
            tolerance: 1e-7,
            restarts: 1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rank < 1 {
            return bad("rank must be >= 1");
        }
        if self.restarts < 1 {
            return bad("restarts must be >= 1");
        }
        for (name, v) in [("mu", self.mu), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    /// I x R patient memberships.
    pub a: Array2<f64>,
    /// J x R from-entity memberships.
    pub b: Array2<f64>,
    /// J x R to-entity memberships.
    pub c: Array2<f64>,
    /// R logistic weights followed by the intercept.
    pub theta: Array1<f64>,
    pub hyper: HyperParams,
}

impl FactorModel {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn check(&self) -> Result<()> {
        check_factors(self.a.view(), self.b.view(), self.c.view())?;
        if self.theta.len() != self.rank() + 1 {
            return Err(Error::Dimension(format!(
                "theta has {} entries, expected {}",
                self.theta.len(),
                self.rank() + 1
            )));
        }
        Ok(())
    }
}

/// Per-iteration objective values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub total: f64,
    pub tensor: f64,
    pub supervision: f64,
    pub l1: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

pub(crate) fn check_factors(a: ArrayView2<f64>, b: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<()> {
    let r = a.ncols();
    if b.ncols() != r || c.ncols() != r {
        return Err(Error::Dimension(format!(
            "factor ranks differ: A {}, B {}, C {}",
            r,
            b.ncols(),
            c.ncols()
        )));
    }
    Ok(())
}

/// `sum_r A[i,r] B[j,r] C[k,r]`.
#[inline]
pub fn cp_value(a: ArrayView2<f64>, b: ArrayView2<f64>, c: ArrayView2<f64>, i: usize, j: usize, k: usize) -> f64 {
    let (ar, br, cr) = (a.row(i), b.row(j), c.row(k));
    (0..ar.len()).map(|r| ar[r] * br[r] * cr[r]).sum()
}

/// Reconstruction evaluated at the given `(i, j, k)` cells.
pub fn cp_reconstruct_at(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    c: ArrayView2<f64>,
    cells: &[(usize, usize, usize)],
) -> Result<Vec<f64>> {
    check_factors(a, b, c)?;
    let (ni, nj, nk) = (a.nrows(), b.nrows(), c.nrows());
    cells
        .iter()
        .map(|&(i, j, k)| {
            if i >= ni || j >= nj || k >= nk {
                Err(Error::Dimension(format!("cell ({i}, {j}, {k}) outside ({ni}, {nj}, {nk})")))
            } else {
                Ok(cp_value(a, b, c, i, j, k))
            }
        })
        .collect()
}

/// Dense I x J x K reconstruction.
pub fn cp_reconstruct(a: ArrayView2<f64>, b: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Array3<f64>> {
    check_factors(a, b, c)?;
    Ok(Array3::from_shape_fn((a.nrows(), b.nrows(), c.nrows()), |(i, j, k)| {
        cp_value(a, b, c, i, j, k)
    }))
}

/// `sigmoid(theta^T [A_i; 1])` per row.
pub fn predict(a_rows: ArrayView2<f64>, theta: &Array1<f64>) -> Result<Array1<f64>> {
    let r = a_rows.ncols();
    if theta.len() != r + 1 {
        return Err(Error::Dimension(format!(
            "theta has {} entries for {r} phenotypes",
            theta.len()
        )));
    }
    let w = theta.slice(ndarray::s![..r]);
    Ok(a_rows.dot(&w).mapv(|eta| sigmoid(eta + theta[r])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn unit_factors_give_single_cell() {
        let mut a = Array2::zeros((3, 1));
        let mut b = Array2::zeros((4, 1));
        let mut c = Array2::zeros((4, 1));
        a[[1, 0]] = 1.0;
        b[[2, 0]] = 1.0;
        c[[3, 0]] = 1.0;
        let t = cp_reconstruct(a.view(), b.view(), c.view()).unwrap();
        assert_eq!(t.sum(), 1.0);
        assert_eq!(t[[1, 2, 3]], 1.0);
    }

    #[test]
    fn zero_factor_annihilates() {
        let a = Array2::zeros((2, 2));
        let b = Array2::from_elem((3, 2), 0.7);
        let t = cp_reconstruct(a.view(), b.view(), b.view()).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_mismatch_is_error() {
        let a = Array2::<f64>::zeros((2, 2));
        let b = Array2::<f64>::zeros((3, 1));
        assert!(cp_reconstruct(a.view(), b.view(), b.view()).is_err());
        assert!(cp_reconstruct_at(a.view(), a.view(), a.view(), &[(5, 0, 0)]).is_err());
    }

    #[test]
    fn predict_examples() {
        let a = array![[0.0, 0.0], [1.0, 2.0]];
        let p = predict(a.view(), &array![0.0, 0.0, 0.0]).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
        let p = predict(a.view(), &array![0.0, 0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15);
        assert!(predict(a.view(), &array![0.0]).is_err());
    }
}
