//! Dense factorizations used by the correlation loss.
//!
//! Householder QR is only used to decide which feature columns are
//! numerically independent, so it is forward-only. Cholesky provides the
//! inverse of the (pruned, ridged) Gram matrix; its derivative lives on the
//! tape as [`Tape::chol_inverse`](crate::tape::Tape::chol_inverse).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Thin QR factorization `A = Q R` of an `N×M` matrix with `N ≥ M`.
///
/// Householder reflections; `Q` is `N×M` with orthonormal columns and `R`
/// is `M×M` upper triangular.
pub fn qr_factor<T: Real>(a: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.rank() != 2 {
        return Err(Error::dim("qr_factor", "expected a matrix"));
    }
    let (n, m) = (a.shape()[0], a.shape()[1]);
    if n < m {
        return Err(Error::dim(
            "qr_factor",
            alloc::format!("need rows >= cols, got {n}x{m}"),
        ));
    }
    // Column-major working copy: column j occupies w[j*n..(j+1)*n].
    let mut w = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            w[j * n + i] = a.at2(i, j);
        }
    }
    let mut vs: Vec<Vec<T>> = Vec::with_capacity(m);
    let two = T::one() + T::one();
    for k in 0..m {
        let col = &w[k * n..(k + 1) * n];
        let norm = col[k..].iter().map(|&x| x * x).sum::<T>().sqrt();
        let mut v: Vec<T> = col[k..].to_vec();
        if norm == T::zero() {
            vs.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= T::zero() { -norm } else { norm };
        v[0] = v[0] - alpha;
        let vnorm2: T = v.iter().map(|&x| x * x).sum();
        if vnorm2 == T::zero() {
            vs.push(Vec::new());
            continue;
        }
        for j in k..m {
            let cj = &mut w[j * n + k..(j + 1) * n];
            let dot: T = v.iter().zip(cj.iter()).map(|(&a, &b)| a * b).sum();
            let f = two * dot / vnorm2;
            for (c, &vi) in cj.iter_mut().zip(&v) {
                *c = *c - f * vi;
            }
        }
        let inv = T::one() / vnorm2.sqrt();
        v.iter_mut().for_each(|x| *x = *x * inv);
        vs.push(v);
    }
    let mut r = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in i..m {
            r.set2(i, j, w[j * n + i]);
        }
    }
    // Q = H_0 H_1 ... H_{m-1} applied to the first m columns of I.
    let mut q = vec![T::zero(); n * m];
    for j in 0..m {
        q[j * n + j] = T::one();
    }
    for k in (0..m).rev() {
        let v = &vs[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..m {
            let cj = &mut q[j * n + k..(j + 1) * n];
            let dot: T = v.iter().zip(cj.iter()).map(|(&a, &b)| a * b).sum();
            let f = two * dot;
            for (c, &vi) in cj.iter_mut().zip(v) {
                *c = *c - f * vi;
            }
        }
    }
    let q = Tensor::from_fn(&[n, m], |idx| q[(idx % m) * n + idx / m]);
    Ok((q, r))
}

/// Lower Cholesky factor `L` of a symmetric positive definite matrix
/// (only the lower triangle of `a` is read).
pub fn cholesky<T: Real>(a: &[T], m: usize) -> Result<Vec<T>> {
    let mut l = vec![T::zero(); m * m];
    for j in 0..m {
        let mut d = a[j * m + j];
        for p in 0..j {
            d = d - l[j * m + p] * l[j * m + p];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::RankDeficient {
                column: j,
                pivot: d.as_f64(),
            });
        }
        let djj = d.sqrt();
        l[j * m + j] = djj;
        for i in j + 1..m {
            let mut s = a[i * m + j];
            for p in 0..j {
                s = s - l[i * m + p] * l[j * m + p];
            }
            l[i * m + j] = s / djj;
        }
    }
    Ok(l)
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse<T: Real>(a: &[T], m: usize) -> Result<Vec<T>> {
    let l = cholesky(a, m)?;
    // Solve L X = I column by column for X = L^{-1} (lower triangular).
    let mut linv = vec![T::zero(); m * m];
    for c in 0..m {
        for i in c..m {
            let mut s = if i == c { T::one() } else { T::zero() };
            for p in c..i {
                s = s - l[i * m + p] * linv[p * m + c];
            }
            linv[i * m + c] = s / l[i * m + i];
        }
    }
    // A^{-1} = L^{-T} L^{-1}
    let mut inv = vec![T::zero(); m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = T::zero();
            for p in i..m {
                s = s + linv[p * m + i] * linv[p * m + j];
            }
            inv[i * m + j] = s;
            inv[j * m + i] = s;
        }
    }
    Ok(inv)
}
