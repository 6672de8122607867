//! Small dense solves used to fit fixture heads.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Solves `(A^T A + lambda I) X = A^T B` for `X` (`cols x outputs`), with `A`
/// given row-major as `rows x cols` and `B` as `rows x outputs`.
pub fn ridge(
    a: &[f64],
    b: &[f64],
    rows: usize,
    cols: usize,
    outputs: usize,
    lambda: f64,
) -> Result<Vec<f64>> {
    if a.len() != rows * cols || b.len() != rows * outputs {
        return Err(Error::InvalidParams(
            "ridge: operand sizes do not match".into(),
        ));
    }
    let mut gram = vec![0.0; cols * cols];
    let mut rhs = vec![0.0; cols * outputs];
    for r in 0..rows {
        let ar = &a[r * cols..(r + 1) * cols];
        let br = &b[r * outputs..(r + 1) * outputs];
        for i in 0..cols {
            for j in 0..=i {
                gram[i * cols + j] += ar[i] * ar[j];
            }
            for o in 0..outputs {
                rhs[i * outputs + o] += ar[i] * br[o];
            }
        }
    }
    for i in 0..cols {
        gram[i * cols + i] += lambda;
        for j in 0..i {
            gram[j * cols + i] = gram[i * cols + j];
        }
    }
    let l = cholesky(&gram, cols)?;
    let mut x = vec![0.0; cols * outputs];
    for o in 0..outputs {
        let mut y = vec![0.0; cols];
        for i in 0..cols {
            let s: f64 = (0..i).map(|k| l[i * cols + k] * y[k]).sum();
            y[i] = (rhs[i * outputs + o] - s) / l[i * cols + i];
        }
        for i in (0..cols).rev() {
            let s: f64 = (i + 1..cols)
                .map(|k| l[k * cols + i] * x[k * outputs + o])
                .sum();
            x[i * outputs + o] = (y[i] - s) / l[i * cols + i];
        }
    }
    Ok(x)
}

fn cholesky(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = m[i * n + i] - s;
                if d <= 0.0 {
                    return Err(Error::InvalidParams(
                        "ridge: matrix is not positive definite".into(),
                    ));
                }
                l[i * n + i] = libm::sqrt(d);
            } else {
                l[i * n + j] = (m[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}
