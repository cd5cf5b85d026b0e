use crate::error::{Error, Result};

use super::{TallMatrix, TridiagMatrix};

const MAX_SWEEPS_PER_EIGENVALUE: usize = 60;

/// Eigendecomposition of a symmetric tridiagonal matrix by implicit QL with
/// Wilkinson shifts.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as the columns of a `dim x dim` matrix.
pub fn tridiag_eig(b: &TridiagMatrix) -> Result<(Vec<f64>, TallMatrix)> {
    let n = b.dim();
    if b.diag().iter().chain(b.offdiag()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("tridiagonal matrix has non-finite entries".into()));
    }

    let mut d = b.diag().to_vec();
    // e[i] couples rows i and i+1; e[n-1] is scratch.
    let mut e = b.offdiag().to_vec();
    e.push(0.0);
    let mut z = TallMatrix::identity(n);

    for l in 0..n {
        let mut sweeps = 0;
        loop {
            // Find a negligible off-diagonal element to split the problem.
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            sweeps += 1;
            if sweeps > MAX_SWEEPS_PER_EIGENVALUE {
                return Err(Error::Numeric(format!(
                    "implicit QL failed to converge for eigenvalue {l}"
                )));
            }

            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;

            for i in (l..m).rev() {
                let mut f = s * e[i];
                let bb = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * bb;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - bb;

                for k in 0..n {
                    let zk1 = z[(k, i + 1)];
                    f = zk1;
                    let zk = z[(k, i)];
                    z[(k, i + 1)] = s * zk + c * f;
                    z[(k, i)] = c * zk - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let values = order.iter().map(|&i| d[i]).collect();
    let mut vectors = TallMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.col_mut(dst).copy_from_slice(z.col(src));
    }
    Ok((values, vectors))
}
