//! Dense eigensolvers.
//!
//! * [`eig`] / [`eig_lr`]: general real matrices. Householder reduction to
//!   upper Hessenberg form, Francis double-shift QR for the spectrum, then
//!   complex inverse iteration on the Hessenberg matrix for each eigenvector.
//!   Left eigenvectors come from the transpose with the same shifts, so each
//!   left vector is paired with its right vector by construction.
//! * [`sym_eig`]: cyclic Jacobi rotations for symmetric matrices.

use crate::matrix::Matrix;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EigError {
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("QR iteration did not converge for eigenvalue {index} after {iterations} iterations")]
    NoConvergence { index: usize, iterations: usize },
    #[error("eigenvector {index} residual {residual:e} exceeds bound {bound:e}")]
    Residual { index: usize, residual: f64, bound: f64 },
}

/// Relative residual bound `||A v - lambda v|| <= RESIDUAL_TOL * ||A||_F`.
pub const RESIDUAL_TOL: f64 = 1e-8;
const MAX_QR_ITERS: usize = 60;

/// Eigenvalues sorted by modulus (descending) with unit right eigenvectors.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<Complex64>,
    pub vectors: Vec<Vec<Complex64>>,
}

/// Eigenvalues with paired right and left eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenLR {
    pub values: Vec<Complex64>,
    pub right: Vec<Vec<Complex64>>,
    /// `left[k]` satisfies `left[k]^T A = values[k] left[k]^T`.
    pub left: Vec<Vec<Complex64>>,
}

fn check_input(a: &Matrix) -> Result<usize, EigError> {
    if a.rows() != a.cols() {
        return Err(EigError::NotSquare(a.rows(), a.cols()));
    }
    if !a.is_finite() {
        return Err(EigError::NonFinite);
    }
    Ok(a.rows())
}

/// Householder reduction `A = Q H Q^T`. Returns `(H, Q)` as row-major `Vec<Vec>`.
fn hessenberg(a: &Matrix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = a.rows();
    let mut h: Vec<Vec<f64>> = (0..n).map(|r| a.row(r).to_vec()).collect();
    let mut q: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| if r == c { 1.0 } else { 0.0 }).collect()).collect();
    for k in 0..n.saturating_sub(2) {
        let alpha_norm: f64 = (k + 1..n).map(|i| h[i][k] * h[i][k]).sum::<f64>().sqrt();
        if alpha_norm == 0.0 {
            continue;
        }
        let alpha = if h[k + 1][k] > 0.0 { -alpha_norm } else { alpha_norm };
        let mut v: Vec<f64> = vec![0.0; n];
        v[k + 1] = h[k + 1][k] - alpha;
        for i in k + 2..n {
            v[i] = h[i][k];
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // H <- P H P with P = I - 2 v v^T / (v^T v)
        for j in 0..n {
            let s: f64 = (k + 1..n).map(|i| v[i] * h[i][j]).sum::<f64>() * 2.0 / vnorm2;
            for i in k + 1..n {
                h[i][j] -= s * v[i];
            }
        }
        for row in h.iter_mut() {
            let s: f64 = (k + 1..n).map(|j| row[j] * v[j]).sum::<f64>() * 2.0 / vnorm2;
            for j in k + 1..n {
                row[j] -= s * v[j];
            }
        }
        for row in q.iter_mut() {
            let s: f64 = (k + 1..n).map(|j| row[j] * v[j]).sum::<f64>() * 2.0 / vnorm2;
            for j in k + 1..n {
                row[j] -= s * v[j];
            }
        }
        for i in k + 2..n {
            h[i][k] = 0.0;
        }
    }
    (h, q)
}

/// Francis double-shift QR on an upper Hessenberg matrix (eigenvalues only).
fn hqr(mut a: Vec<Vec<f64>>) -> Result<Vec<Complex64>, EigError> {
    let n = a.len();
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let eps = f64::EPSILON;
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[i][j].abs();
        }
    }
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l >= 1 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[l][l - 1].abs() <= eps * s {
                    a[l][l - 1] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[nu][nu];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = a[nu - 1][nu - 1];
            let mut w = a[nu][nu - 1] * a[nu - 1][nu];
            if l == nu - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    z = p + z.copysign(p);
                    wr[nu - 1] = x + z;
                    wr[nu] = x + z;
                    if z != 0.0 {
                        wr[nu] = x - w / z;
                    }
                    wi[nu - 1] = 0.0;
                    wi[nu] = 0.0;
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = z;
                    wi[nu] = -z;
                }
                nn -= 2;
                break;
            }
            if its == MAX_QR_ITERS {
                return Err(EigError::NoConvergence { index: nu, iterations: its });
            }
            if its > 0 && its % 10 == 0 {
                // exceptional shift
                t += x;
                for i in 0..=nu {
                    a[i][i] -= x;
                }
                let s = a[nu][nu - 1].abs() + a[nu - 1][nu - 2].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            let mut m = nu - 2;
            let (mut p, mut q, mut r);
            loop {
                let z = a[m][m];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a[m + 1][m] + a[m][m + 1];
                q = a[m + 1][m + 1] - z - rr - ss;
                r = a[m + 2][m + 1];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                if u <= eps * v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                a[i][i - 2] = 0.0;
                if i != m + 2 {
                    a[i][i - 3] = 0.0;
                }
            }
            let mut k = m;
            while k < nu {
                if k != m {
                    p = a[k][k - 1];
                    q = a[k + 1][k - 1];
                    r = if k != nu - 1 { a[k + 2][k - 1] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = (p * p + q * q + r * r).sqrt().copysign(p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            a[k][k - 1] = -a[k][k - 1];
                        }
                    } else {
                        a[k][k - 1] = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    let z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        let mut pp = a[k][j] + q * a[k + 1][j];
                        if k != nu - 1 {
                            pp += r * a[k + 2][j];
                            a[k + 2][j] -= pp * z;
                        }
                        a[k + 1][j] -= pp * y;
                        a[k][j] -= pp * x;
                    }
                    let mmin = nu.min(k + 3);
                    for row in a.iter_mut().take(mmin + 1).skip(l) {
                        let mut pp = x * row[k] + y * row[k + 1];
                        if k != nu - 1 {
                            pp += z * row[k + 2];
                            row[k + 2] -= pp * r;
                        }
                        row[k + 1] -= pp * q;
                        row[k] -= pp;
                    }
                }
                k += 1;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).map(|(re, im)| Complex64::new(re, im)).collect())
}

fn sort_spectrum(values: &mut [Complex64]) {
    values.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.im.partial_cmp(&a.im).unwrap_or(std::cmp::Ordering::Equal))
            .then(b.re.partial_cmp(&a.re).unwrap_or(std::cmp::Ordering::Equal))
    });
}

/// Spectrum of a real square matrix, sorted by modulus (descending). Complex
/// eigenvalues come in exact conjugate pairs, positive imaginary part first.
pub fn eigenvalues(a: &Matrix) -> Result<Vec<Complex64>, EigError> {
    let n = check_input(a)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let (h, _) = hessenberg(a);
    let mut values = hqr(h)?;
    sort_spectrum(&mut values);
    Ok(values)
}

/// Solves `(H - mu I) y = rhs` for upper Hessenberg `H` by Gaussian elimination
/// with adjacent-row pivoting. Zero pivots are replaced by `tiny`.
fn hessenberg_solve(h: &[Vec<f64>], mu: Complex64, rhs: &mut [Complex64], tiny: f64) {
    let n = h.len();
    let mut u: Vec<Vec<Complex64>> = h
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &x)| if i == j { Complex64::new(x, 0.0) - mu } else { Complex64::new(x, 0.0) })
                .collect()
        })
        .collect();
    for k in 0..n.saturating_sub(1) {
        if u[k + 1][k].norm() > u[k][k].norm() {
            u.swap(k, k + 1);
            rhs.swap(k, k + 1);
        }
        if u[k][k].norm() == 0.0 {
            u[k][k] = Complex64::new(tiny, 0.0);
        }
        let l = u[k + 1][k] / u[k][k];
        if l != Complex64::new(0.0, 0.0) {
            let (top, bottom) = u.split_at_mut(k + 1);
            for (dst, &src) in bottom[0][k..].iter_mut().zip(&top[k][k..]) {
                *dst -= l * src;
            }
            let rk = rhs[k];
            rhs[k + 1] -= l * rk;
        }
    }
    if n > 0 && u[n - 1][n - 1].norm() == 0.0 {
        u[n - 1][n - 1] = Complex64::new(tiny, 0.0);
    }
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for j in i + 1..n {
            s -= u[i][j] * rhs[j];
        }
        rhs[i] = s / u[i][i];
    }
}

fn cnorm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Unit norm with the largest-modulus entry made positive real.
pub fn normalize_phase(v: &mut [Complex64]) {
    let norm = cnorm(v);
    if norm == 0.0 {
        return;
    }
    let mut best = 0;
    for (i, z) in v.iter().enumerate() {
        if z.norm() > v[best].norm() * (1.0 + 1e-12) {
            best = i;
        }
    }
    let phase = v[best].conj() / v[best].norm();
    for z in v.iter_mut() {
        *z = *z * phase / norm;
    }
    v[best] = Complex64::new(v[best].re, 0.0);
}

fn residual(a: &Matrix, lambda: Complex64, v: &[Complex64]) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let mut s = -lambda * v[i];
        for (j, &x) in a.row(i).iter().enumerate() {
            s += v[j] * x;
        }
        acc += s.norm_sqr();
    }
    acc.sqrt()
}

/// Right eigenvectors of `a` for the given (already sorted) eigenvalues.
fn eigenvectors_for(a: &Matrix, values: &[Complex64]) -> Result<Vec<Vec<Complex64>>, EigError> {
    let n = a.rows();
    let anorm = a.norm();
    let bound = RESIDUAL_TOL * anorm.max(f64::MIN_POSITIVE);
    let tiny = f64::EPSILON * anorm.max(1.0);
    let (h, q) = hessenberg(a);
    let mut vectors: Vec<Vec<Complex64>> = Vec::with_capacity(n);
    for (k, &lambda) in values.iter().enumerate() {
        // Conjugate partner of the previous value: conjugate its vector exactly.
        if k > 0 && lambda.im < 0.0 && values[k - 1] == lambda.conj() {
            let prev: Vec<Complex64> = vectors[k - 1].iter().map(|z| z.conj()).collect();
            vectors.push(prev);
            continue;
        }
        let group: Vec<usize> = (0..k)
            .filter(|&j| (values[j] - lambda).norm() <= 1e-10 * anorm.max(1.0))
            .collect();
        let mut best: Option<(f64, Vec<Complex64>)> = None;
        for orthogonalize in [true, false] {
            let mut y: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new(1.0 + 0.01 * ((i * 7 + k * 13) % 17) as f64, 0.0))
                .collect();
            for _ in 0..3 {
                hessenberg_solve(&h, lambda, &mut y, tiny);
                let norm = cnorm(&y);
                if norm == 0.0 || !norm.is_finite() {
                    break;
                }
                y.iter_mut().for_each(|z| *z /= norm);
                if orthogonalize && !group.is_empty() {
                    // Work in Hessenberg coordinates: vectors there are Q^T v.
                    for &j in &group {
                        let vj: Vec<Complex64> = (0..n)
                            .map(|i| (0..n).map(|r| vectors[j][r] * q[r][i]).sum())
                            .collect();
                        let dot: Complex64 = vj.iter().zip(&y).map(|(a, b)| a.conj() * b).sum();
                        for (yi, vi) in y.iter_mut().zip(&vj) {
                            *yi -= dot * vi;
                        }
                    }
                    let norm = cnorm(&y);
                    if norm < 1e-8 {
                        break;
                    }
                    y.iter_mut().for_each(|z| *z /= norm);
                }
            }
            let mut v: Vec<Complex64> =
                (0..n).map(|r| (0..n).map(|i| y[i] * q[r][i]).sum()).collect();
            if cnorm(&v) == 0.0 || !cnorm(&v).is_finite() {
                continue;
            }
            normalize_phase(&mut v);
            let res = residual(a, lambda, &v);
            if res <= bound || best.as_ref().map_or(true, |(r, _)| res < *r) {
                best = Some((res, v));
            }
            if best.as_ref().is_some_and(|(r, _)| *r <= bound) {
                break;
            }
            if group.is_empty() {
                break;
            }
        }
        match best {
            Some((res, v)) if res <= bound => vectors.push(v),
            Some((res, _)) => return Err(EigError::Residual { index: k, residual: res, bound }),
            None => return Err(EigError::Residual { index: k, residual: f64::INFINITY, bound }),
        }
    }
    Ok(vectors)
}

/// Eigenvalues and unit right eigenvectors (largest entry positive real).
pub fn eig(a: &Matrix) -> Result<Eigen, EigError> {
    let values = eigenvalues(a)?;
    let vectors = eigenvectors_for(a, &values)?;
    Ok(Eigen { values, vectors })
}

/// Eigenvalues with paired right and left eigenvectors.
pub fn eig_lr(a: &Matrix) -> Result<EigenLR, EigError> {
    let values = eigenvalues(a)?;
    let right = eigenvectors_for(a, &values)?;
    let left = eigenvectors_for(&a.transpose(), &values)?;
    Ok(EigenLR { values, right, left })
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns eigenvalues
/// in descending order and the matching orthonormal eigenvectors as rows.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix), EigError> {
    let n = check_input(a)?;
    let mut m: Vec<Vec<f64>> = (0..n).map(|r| a.row(r).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| if r == c { 1.0 } else { 0.0 }).collect()).collect();
    let scale = a.norm().max(f64::MIN_POSITIVE);
    for sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        if sweep == 99 {
            return Err(EigError::NoConvergence { index: 0, iterations: sweep });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p][q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[c][order[r]]);
    Ok((values, vectors))
}

/// Solves `A x = b` by LU with partial pivoting. `None` if `A` is singular to
/// working precision or not square.
pub fn solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return None;
    }
    let mut m: Vec<Vec<f64>> = (0..n).map(|r| a.row(r).to_vec()).collect();
    let mut x = b.to_vec();
    let scale = a.max_abs();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))?;
        if m[p][k].abs() <= f64::EPSILON * scale * n as f64 {
            return None;
        }
        m.swap(k, p);
        x.swap(k, p);
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                m[i][j] -= f * m[k][j];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| m[k][j] * x[j]).sum();
        x[k] = (x[k] - s) / m[k][k];
    }
    Some(x)
}

/// Modified Gram-Schmidt on the given vectors, in order. Returns `None` if a
/// vector is (numerically) dependent on the earlier ones.
pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let scale = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &out {
                let d: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in w.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-10 * scale.max(f64::MIN_POSITIVE) || norm == 0.0 {
            return None;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        out.push(w);
    }
    Some(out)
}
