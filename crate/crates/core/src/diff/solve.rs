//! Dense symmetric positive definite solves via Cholesky.
//!
//! Small systems only (class count x class count), so a plain O(n^3)
//! factorization with one iterative refinement pass is plenty.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Solve `A X = B` for SPD `A` of shape `[n, n]` and `B` of shape `[n, m]`.
///
/// Fails with a diagnostic if the factorization hits a non-positive pivot,
/// which is how near-singular normal equations surface here.
pub fn solve_spd<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let n = match a.shape() {
        [r, c] if r == c => *r,
        s => return Err(Error::shape("solve_spd", format!("A must be square, got {:?}", s))),
    };
    let m = match b.shape() {
        [r, c] if *r == n => *c,
        [r] if *r == n => 1,
        s => return Err(Error::shape("solve_spd", format!("B {:?} incompatible with A side {}", s, n))),
    };

    let l = cholesky(a.values(), n)?;
    let mut x = vec![F::ZERO; n * m];
    solve_with_factor(&l, b.values(), n, m, &mut x);

    // One refinement step: r = B - A x, x += A \ r. Cheap and tightens the
    // worked-example tolerances when lambda is tiny.
    let av = a.values();
    let mut resid = vec![F::ZERO; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b.values()[i * m + j];
            for k in 0..n {
                acc -= av[i * n + k] * x[k * m + j];
            }
            resid[i * m + j] = acc;
        }
    }
    let mut corr = vec![F::ZERO; n * m];
    solve_with_factor(&l, &resid, n, m, &mut corr);
    for (xi, ci) in x.iter_mut().zip(&corr) {
        *xi += *ci;
    }

    if b.shape().len() == 1 {
        Ok(Tensor::vector(x))
    } else {
        Tensor::new(vec![n, m], x)
    }
}

/// Lower Cholesky factor of a row-major SPD matrix.
fn cholesky<F: Scalar>(a: &[F], n: usize) -> Result<Vec<F>> {
    let mut l = vec![F::ZERO; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[i * n + j];
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if acc <= F::ZERO {
                    return Err(Error::degenerate(
                        "solve_spd",
                        format!("non-positive pivot {} at row {}; matrix is not positive definite (increase the ridge term)", acc, i),
                    ));
                }
                l[i * n + j] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve `L L^T X = B` given the factor, column by column.
fn solve_with_factor<F: Scalar>(l: &[F], b: &[F], n: usize, m: usize, x: &mut [F]) {
    let mut y = vec![F::ZERO; n];
    for j in 0..m {
        // forward: L y = b_col
        for i in 0..n {
            let mut acc = b[i * m + j];
            for k in 0..i {
                acc -= l[i * n + k] * y[k];
            }
            y[i] = acc / l[i * n + i];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in i + 1..n {
                acc -= l[k * n + i] * x[k * m + j];
            }
            x[i * m + j] = acc / l[i * n + i];
        }
    }
}
