//! Weighted non-negative least squares by an active-set method.
//!
//! Minimizes `1/2 (Ax - b)^T diag(w) (Ax - b) + ridge/2 |x|^2` subject to
//! `x >= 0`. Variables enter the free (passive) set one at a time, picked by
//! the largest descent direction of the gradient; each free-set subproblem
//! is solved by Householder QR, and variables driven to zero are released
//! again by interpolating back towards the feasible region.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot size below which a column is treated as dependent.
const PIVOT_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsProblem {
    a: DMatrix<f64>,
    b: DVector<f64>,
    w: DVector<f64>,
}

impl NnlsProblem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, w: DVector<f64>) -> Result<Self> {
        let (m, n) = a.shape();
        if m == 0 || n == 0 {
            return Err(Error::InvalidInput(format!("design matrix is {m}x{n}")));
        }
        if b.len() != m || w.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "design has {m} rows, response {} and weights {}",
                b.len(),
                w.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entry in NNLS problem".into()));
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput("residual weights must be positive".into()));
        }
        Ok(Self { a, b, w })
    }

    pub fn unweighted(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let m = a.nrows();
        Self::new(a, b, DVector::from_element(m, 1.0))
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn w(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    /// `1/2 (Ax - b)^T diag(w) (Ax - b)`.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let r = &self.a * x - &self.b;
        0.5 * r.iter().zip(self.w.iter()).map(|(r, w)| w * r * r).sum::<f64>()
    }

    /// `A^T diag(w) (Ax - b)`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let r = (&self.a * x - &self.b).component_mul(&self.w);
        self.a.tr_mul(&r)
    }

    /// Scaled design `[sqrt(w) A; sqrt(ridge) I]` and response.
    fn whitened(&self, ridge: f64) -> (DMatrix<f64>, DVector<f64>) {
        let (m, n) = self.a.shape();
        let extra = if ridge > 0.0 { n } else { 0 };
        let mut a = DMatrix::zeros(m + extra, n);
        let mut b = DVector::zeros(m + extra);
        for r in 0..m {
            let s = self.w[r].sqrt();
            for c in 0..n {
                a[(r, c)] = s * self.a[(r, c)];
            }
            b[r] = s * self.b[r];
        }
        if extra > 0 {
            let s = ridge.sqrt();
            for c in 0..n {
                a[(m + c, c)] = s;
            }
        }
        (a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NnlsOptions {
    /// Bound on the scaled KKT violation.
    pub tol: f64,
    /// Iteration cap; `None` means `10 * n`.
    pub max_iter: Option<usize>,
    /// Optional Tikhonov term `ridge/2 |x|^2`.
    pub ridge: f64,
}

impl Default for NnlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// `|sqrt(w) (Ax - b)|_2`.
    pub residual_norm: f64,
    /// Largest KKT violation divided by `max(1, |A~|_F |b~|_2)` (whitened
    /// design and response), so the bound is meaningful for raw counts.
    pub kkt_violation: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `x` is then the best iterate.
    pub converged: bool,
    /// Set when the design is rank deficient or a candidate column was
    /// rejected because its pivot fell below `1e-12` of the largest.
    pub ill_conditioned: bool,
}

/// Least squares restricted to `cols`; `None` when the columns are
/// numerically dependent.
fn restricted_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, cols: &[usize]) -> Option<DVector<f64>> {
    let m = a.nrows();
    let p = cols.len();
    if p > m {
        return None;
    }
    let sub = DMatrix::from_fn(m, p, |r, c| a[(r, cols[c])]);
    let qr = sub.qr();
    let r = qr.r();
    let diag_max = (0..p).map(|d| r[(d, d)].abs()).fold(0.0, f64::max);
    if diag_max == 0.0 || (0..p).any(|d| r[(d, d)].abs() <= PIVOT_RATIO * diag_max) {
        return None;
    }
    let qtb = qr.q().tr_mul(b);
    r.solve_upper_triangular(&qtb)
}

fn rank_deficient(a: &DMatrix<f64>) -> bool {
    let (m, n) = a.shape();
    if m < n {
        return true;
    }
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..n).map(|d| r[(d, d)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    max == 0.0 || diag.iter().any(|&d| d <= PIVOT_RATIO * max)
}

fn kkt_violation(grad: &DVector<f64>, x: &DVector<f64>) -> f64 {
    grad.iter()
        .zip(x.iter())
        .map(|(&g, &x)| if x > 0.0 { g.abs() } else { (-g).max(0.0) })
        .fold(0.0, f64::max)
}

pub fn solve_nnls(p: &NnlsProblem, opts: &NnlsOptions) -> Result<NnlsSolution> {
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::InvalidInput(format!("tolerance {} must be positive", opts.tol)));
    }
    if !(opts.ridge >= 0.0 && opts.ridge.is_finite()) {
        return Err(Error::InvalidInput(format!("ridge {} must be >= 0", opts.ridge)));
    }
    let n = p.cols();
    let max_iter = opts.max_iter.unwrap_or(10 * n);
    let (a, b) = p.whitened(opts.ridge);
    let scale = (a.norm() * b.norm()).max(1.0);
    // Columns enter on any gradient above rounding level; `tol` only bounds
    // the reported violation. Entering on `tol` alone stops short of the
    // optimum when the design has large entries.
    let threshold = (10.0 * a.nrows().max(n) as f64 * f64::EPSILON).min(opts.tol) * scale;

    let mut ill_conditioned = rank_deficient(&a);
    let mut x = DVector::zeros(n);
    let mut passive: Vec<usize> = Vec::new();
    let mut in_passive = vec![false; n];
    let mut rejected = vec![false; n];
    let mut iterations = 0;
    let mut converged = false;

    'outer: while iterations < max_iter {
        let descent = a.tr_mul(&(&b - &a * &x));
        let candidate = (0..n)
            .filter(|&q| !in_passive[q] && !rejected[q] && descent[q] > threshold)
            .fold(None, |best: Option<usize>, q| match best {
                Some(bq) if descent[bq] >= descent[q] => Some(bq),
                _ => Some(q),
            });
        let Some(j) = candidate else {
            converged = kkt_violation(&-descent, &x) <= opts.tol * scale;
            break;
        };
        iterations += 1;

        let mut trial = passive.clone();
        trial.push(j);
        let mut z = match restricted_lstsq(&a, &b, &trial) {
            Some(z) if z[trial.len() - 1] > 0.0 => z,
            Some(_) => {
                rejected[j] = true;
                continue;
            }
            None => {
                ill_conditioned = true;
                rejected[j] = true;
                continue;
            }
        };
        passive = trial;
        in_passive[j] = true;
        rejected.fill(false);

        loop {
            if z.iter().all(|&v| v > 0.0) {
                for (slot, &q) in passive.iter().enumerate() {
                    x[q] = z[slot];
                }
                break;
            }
            if iterations >= max_iter {
                break 'outer;
            }
            iterations += 1;
            // Step from x towards z until the first free variable hits zero.
            let mut alpha = f64::INFINITY;
            let mut blocking = passive[0];
            for (slot, &q) in passive.iter().enumerate() {
                if z[slot] <= 0.0 {
                    let t = x[q] / (x[q] - z[slot]);
                    if t < alpha {
                        alpha = t;
                        blocking = q;
                    }
                }
            }
            for (slot, &q) in passive.iter().enumerate() {
                x[q] += alpha * (z[slot] - x[q]);
            }
            x[blocking] = 0.0;
            passive.retain(|&q| {
                let keep = x[q] > 0.0;
                if !keep {
                    x[q] = 0.0;
                    in_passive[q] = false;
                }
                keep
            });
            if passive.is_empty() {
                break;
            }
            z = restricted_lstsq(&a, &b, &passive).expect("a subset of independent columns stays independent");
        }
    }

    let grad = a.tr_mul(&(&a * &x - &b));
    let residual = (p.a() * &x - p.b()).component_mul(&p.w().map(f64::sqrt));
    Ok(NnlsSolution {
        kkt_violation: kkt_violation(&grad, &x) / scale,
        residual_norm: residual.norm(),
        x,
        iterations,
        converged,
        ill_conditioned,
    })
}
