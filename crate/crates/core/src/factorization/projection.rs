use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Entry, TransitionTensor};

const MAX_ITERS: usize = 50_000;
const TOLERANCE: f64 = 1e-10;

fn mttkrp_row(slice: &[Entry], b: ArrayView2<f64>, c: ArrayView2<f64>) -> Array1<f64> {
    let r = b.ncols();
    let mut m = Array1::<f64>::zeros(r);
    for e in slice {
        for q in 0..r {
            m[q] += e.value * b[[e.from, q]] * c[[e.to, q]];
        }
    }
    m
}

/// `||X - sum_r a_r b_r c_r^T||^2` for one patient slice.
pub fn slice_error(slice: &[Entry], membership: &[f64], b: ArrayView2<f64>, c: ArrayView2<f64>) -> f64 {
    let g = b.t().dot(&b) * c.t().dot(&c);
    let a = Array1::from(membership.to_vec());
    let m = mttkrp_row(slice, b, c);
    let norm: f64 = slice.iter().map(|e| e.value * e.value).sum();
    norm - 2.0 * a.dot(&m) + a.dot(&g.dot(&a))
}

fn largest_eigenvalue(g: &Array2<f64>) -> f64 {
    let n = g.nrows();
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = g.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda.max(0.0)
}

/// Accelerated projected gradient for `min_{a >= 0} a^T G a - 2 m^T a`.
fn nnls(g: &Array2<f64>, m: &Array1<f64>, lipschitz: f64) -> Array1<f64> {
    let r = m.len();
    let mut x = Array1::<f64>::zeros(r);
    if lipschitz == 0.0 || m.iter().all(|&v| v <= 0.0) {
        return x;
    }
    let step = 1.0 / lipschitz;
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..MAX_ITERS {
        let grad = 2.0 * (g.dot(&y) - m);
        let next = (&y - &(step * &grad)).mapv(|v| v.max(0.0));
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + &(((t - 1.0) / t_next) * (&next - &x));
        x = next;
        t = t_next;
        // projected-gradient optimality at x
        let gx = 2.0 * (g.dot(&x) - m);
        let pg = x
            .iter()
            .zip(gx.iter())
            .map(|(&xi, &gi)| if xi > 0.0 { gi.abs() } else { (-gi).max(0.0) })
            .fold(0.0, f64::max);
        if pg < TOLERANCE {
            break;
        }
    }
    x
}

/// Memberships of unseen patients against fixed `B, C`, one non-negative
/// least-squares problem per slice.
pub fn project_new_patients(tensor: &TransitionTensor, b: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (_, nj, _) = tensor.shape();
    if b.nrows() != nj || c.nrows() != nj || b.ncols() != c.ncols() {
        return Err(Error::Dimension(format!(
            "B {:?} and C {:?} do not fit {nj} entities",
            b.dim(),
            c.dim()
        )));
    }
    let r = b.ncols();
    let g = b.t().dot(&b) * c.t().dot(&c);
    let lipschitz = 2.0 * largest_eigenvalue(&g) * 1.01;
    let rows = par::map_slice(tensor.slices(), |s| nnls(&g, &mttkrp_row(s, b, c), lipschitz));
    let mut out = Array2::<f64>::zeros((tensor.n_patients(), r));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}
