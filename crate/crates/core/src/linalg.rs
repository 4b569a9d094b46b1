//! Small dense linear algebra for the information matrices.
//!
//! Everything here works on `ndarray` containers for any [`Scalar`]. The
//! matrices are at most a few hundred rows, so plain loops are adequate.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Reciprocal-condition floor below which an information block is rejected.
pub const RCOND_FLOOR: f64 = 1e-12;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Array2<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn new(a: ArrayView2<T>, what: &'static str) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch(format!("{what}: not square")));
        }
        let mut l = Array2::<T>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::SingularInformation(what));
            }
            let djj = d.sqrt();
            l[[j, j]] = djj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / djj;
            }
        }
        // Squared diagonal ratio of the factor estimates the reciprocal condition.
        let (mut lo, mut hi) = (T::infinity(), T::zero());
        for j in 0..n {
            lo = lo.min(l[[j, j]]);
            hi = hi.max(l[[j, j]]);
        }
        if n > 0 && (lo / hi).powi(2) < T::lit(RCOND_FLOOR) {
            return Err(Error::SingularInformation(what));
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn solve(&self, b: ArrayView1<T>) -> Array1<T> {
        let n = self.dim();
        let l = &self.l;
        let mut y = b.to_owned();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        y
    }

    pub fn inverse(&self) -> Array2<T> {
        let n = self.dim();
        let mut inv = Array2::<T>::zeros((n, n));
        let mut e = Array1::<T>::zeros(n);
        for j in 0..n {
            e.fill(T::zero());
            e[j] = T::one();
            let col = self.solve(e.view());
            inv.column_mut(j).assign(&col);
        }
        inv
    }
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn spd_solve<T: Scalar>(a: ArrayView2<T>, b: ArrayView1<T>, what: &'static str) -> Result<Array1<T>> {
    Ok(Cholesky::new(a, what)?.solve(b))
}

pub fn spd_inverse<T: Scalar>(a: ArrayView2<T>, what: &'static str) -> Result<Array2<T>> {
    Ok(Cholesky::new(a, what)?.inverse())
}

/// General inverse by Gauss–Jordan elimination with partial pivoting.
///
/// Deliberately shares no code with [`Cholesky`]; the score-statistic
/// cross-check relies on the two routes being independent.
pub fn gauss_jordan_inverse<T: Scalar>(a: ArrayView2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch("inverse of non-square matrix".into()));
    }
    let mut m = a.to_owned();
    let mut inv = Array2::<T>::eye(n);
    let scale = m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[[i, col]].abs().partial_cmp(&m[[j, col]].abs()).unwrap()).unwrap();
        if m[[pivot, col]].abs() <= scale * T::epsilon() {
            return Err(Error::SingularInformation("gauss-jordan pivot"));
        }
        if pivot != col {
            for k in 0..n {
                m.swap([pivot, k], [col, k]);
                inv.swap([pivot, k], [col, k]);
            }
        }
        let p = m[[col, col]];
        for k in 0..n {
            m[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[[i, col]];
            if f == T::zero() {
                continue;
            }
            for k in 0..n {
                let (mk, ik) = (m[[col, k]], inv[[col, k]]);
                m[[i, k]] -= f * mk;
                inv[[i, k]] -= f * ik;
            }
        }
    }
    Ok(inv)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues<T: Scalar>(a: ArrayView2<T>) -> Vec<T> {
    let n = a.nrows();
    let mut m = a.to_owned();
    let two = T::lit(2.0);
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..n {
            diag += m[[i, i]] * m[[i, i]];
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off <= T::epsilon() * T::epsilon() * diag.max(T::min_positive_value()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| m[[i, i]]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// `Aᵀ diag(w) A` for a tall `A`.
pub fn weighted_gram<T: Scalar>(a: ArrayView2<T>, w: ArrayView1<T>) -> Array2<T> {
    let (n, p) = a.dim();
    let mut g = Array2::<T>::zeros((p, p));
    for l in 0..n {
        let wl = w[l];
        for i in 0..p {
            let ai = a[[l, i]] * wl;
            for j in 0..=i {
                g[[i, j]] += ai * a[[l, j]];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            g[[j, i]] = g[[i, j]];
        }
    }
    g
}

/// `A M Aᵀ` for symmetric `M`, the sandwich behind every projection matrix.
pub fn sandwich<T: Scalar>(a: ArrayView2<T>, m: ArrayView2<T>) -> Array2<T> {
    let am = a.dot(&m);
    am.dot(&a.t())
}
