//! Simultaneous polynomial root finding (Aberth–Ehrlich).

use num_complex::Complex64;

/// Roots of a real polynomial and how the iteration ended.
#[derive(Debug, Clone, PartialEq)]
pub struct Roots {
    pub roots: Vec<Complex64>,
    /// Final Newton correction `|p(z)/p'(z)|` per root, an estimate of its
    /// absolute error for simple roots.
    pub corrections: Vec<f64>,
    pub iterations: usize,
}

/// `(p(z), p'(z))` for ascending real coefficients.
pub fn eval_with_derivative(coeffs: &[f64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

fn newton_step(coeffs: &[f64], z: Complex64) -> Complex64 {
    let (p, dp) = eval_with_derivative(coeffs, z);
    if p == Complex64::new(0.0, 0.0) {
        Complex64::new(0.0, 0.0)
    } else if dp == Complex64::new(0.0, 0.0) {
        Complex64::new(f64::INFINITY, 0.0)
    } else {
        p / dp
    }
}

/// All complex roots of `c[0] + c[1] z + ... + c[n] z^n`.
///
/// Exact zero roots are split off first (they are where Aberth converges
/// only linearly). The rest start on a circle whose radius is the geometric
/// mean of the root magnitudes, rotated off the real axis, and are refined
/// with Gauss–Seidel Aberth updates followed by Newton polishing.
pub fn aberth_roots(coeffs: &[f64], max_iter: usize) -> Roots {
    let n_full = coeffs.iter().rposition(|&c| c != 0.0).unwrap_or(0);
    let coeffs = &coeffs[..=n_full];
    let zeros = coeffs.iter().position(|&c| c != 0.0).unwrap_or(0);
    let reduced = &coeffs[zeros..];
    let degree = reduced.len() - 1;

    let mut roots = vec![Complex64::new(0.0, 0.0); zeros];
    let mut corrections = vec![0.0; zeros];
    if degree == 0 {
        return Roots {
            roots,
            corrections,
            iterations: 0,
        };
    }
    if degree == 1 {
        roots.push(Complex64::new(-reduced[0] / reduced[1], 0.0));
        corrections.push(0.0);
        return Roots {
            roots,
            corrections,
            iterations: 0,
        };
    }

    let lead = reduced[degree];
    let radius = (reduced[0] / lead).abs().powf(1.0 / degree as f64);
    let offset = std::f64::consts::PI / (2.0 * degree as f64) + 0.4;
    let mut z: Vec<Complex64> = (0..degree)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / degree as f64 + offset;
            Complex64::from_polar(radius, angle)
        })
        .collect();

    let mut done = vec![false; degree];
    let mut iterations = 0;
    while iterations < max_iter && done.iter().any(|d| !d) {
        iterations += 1;
        for i in 0..degree {
            if done[i] {
                continue;
            }
            let ratio = newton_step(reduced, z[i]);
            if ratio == Complex64::new(0.0, 0.0) {
                done[i] = true;
                continue;
            }
            let repulsion: Complex64 = (0..degree).filter(|&j| j != i).map(|j| (z[i] - z[j]).inv()).sum();
            let w = ratio / (Complex64::new(1.0, 0.0) - ratio * repulsion);
            if !w.is_finite() {
                continue;
            }
            z[i] -= w;
            if w.norm() <= 1e-15 * (1.0 + z[i].norm()) {
                done[i] = true;
            }
        }
    }

    // Polish against the full polynomial; keep a step only if it helps.
    for zi in &mut z {
        for _ in 0..3 {
            let step = newton_step(coeffs, *zi);
            if !step.is_finite() {
                break;
            }
            let candidate = *zi - step;
            if eval_with_derivative(coeffs, candidate).0.norm() <= eval_with_derivative(coeffs, *zi).0.norm() {
                *zi = candidate;
            } else {
                break;
            }
        }
    }
    for zi in z {
        let step = newton_step(reduced, zi);
        corrections.push(if step.is_finite() { step.norm() } else { f64::INFINITY });
        roots.push(zi);
    }
    Roots {
        roots,
        corrections,
        iterations,
    }
}
