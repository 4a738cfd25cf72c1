//! Dense symmetric eigensolver and orthonormalization helpers.

use crate::nn::{dot, gemm_nt, gemm_tn, Tensor};

/// Eigen-decomposition of a symmetric `n×n` row-major matrix.
///
/// Householder tridiagonalization followed by implicit QL iterations.
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors, one per row of the returned `n×n` buffer.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut v = a.to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e, n);
    // QL sweeps rotate pairs of eigenvector columns; keep them as rows.
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            z[j * n + i] = v[i * n + j];
        }
    }
    ql_implicit(&mut d, &mut e, &mut z, n);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
    let values = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &i in &order {
        vectors.extend_from_slice(&z[i * n..(i + 1) * n]);
    }
    (values, vectors)
}

fn tridiagonalize(v: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) {
    let at = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in j + 1..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    // Accumulate the Householder reflections.
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL on the tridiagonal `(d, e)`; `z` holds eigenvectors as rows.
fn ql_implicit(d: &mut [f64], e: &mut [f64], z: &mut [f64], n: usize) {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let eps = f64::EPSILON;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            loop {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = z.split_at_mut((i + 1) * n);
                    let zi = &mut lo[i * n..];
                    let zi1 = &mut hi[..n];
                    for (a, b) in zi.iter_mut().zip(zi1.iter_mut()) {
                        let hb = *b;
                        *b = s * *a + c * hb;
                        *a = c * *a - s * hb;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

/// `aᵀa` for a row-major `m×n` matrix.
pub fn gram_cols(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    gemm_tn(a, a, &mut g, m, n, n);
    symmetrize(&mut g, n);
    g
}

/// `a·aᵀ` for a row-major `m×n` matrix.
pub fn gram_rows(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; m * m];
    gemm_nt(a, a, &mut g, m, n, m);
    symmetrize(&mut g, m);
    g
}

fn symmetrize(g: &mut [f64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (g[i * n + j] + g[j * n + i]);
            g[i * n + j] = avg;
            g[j * n + i] = avg;
        }
    }
}

/// Orthonormalizes the columns of an `m×k` matrix (k ≤ m) in place with
/// twice-applied modified Gram–Schmidt. Columns that vanish are replaced by
/// standard basis vectors orthogonalized against the rest.
pub fn orthonormalize_columns(t: &mut Tensor) {
    let (m, k) = (t.shape()[0], t.cols());
    assert!(k <= m, "cannot orthonormalize {k} columns of length {m}");
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..m).map(|i| t.at(i, j)).collect()).collect();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut spare = 0;
    for mut c in cols.drain(..) {
        loop {
            let norm0 = dot(&c, &c).sqrt();
            for _ in 0..2 {
                for b in &basis {
                    let proj = dot(&c, b);
                    c.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let norm = dot(&c, &c).sqrt();
            if norm > 1e-10 * norm0.max(f64::MIN_POSITIVE) && norm > 0.0 {
                c.iter_mut().for_each(|x| *x /= norm);
                basis.push(c);
                break;
            }
            c = vec![0.0; m];
            c[spare % m] = 1.0;
            spare += 1;
        }
    }
    let data = t.data_mut();
    for (j, c) in basis.iter().enumerate() {
        for i in 0..m {
            data[i * k + j] = c[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn eigen_reconstructs_symmetric_matrices() {
        let mut rng = stream(&[11]);
        for &n in &[1usize, 2, 3, 7, 20] {
            let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = gram_cols(&b, n, n);
            let (vals, vecs) = symmetric_eigen(&a, n);
            assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            for i in 0..n {
                for j in 0..n {
                    let recon: f64 = (0..n).map(|k| vals[k] * vecs[k * n + i] * vecs[k * n + j]).sum();
                    assert!((recon - a[i * n + j]).abs() < 1e-11, "n={n}");
                    let o = dot(&vecs[i * n..(i + 1) * n], &vecs[j * n..(j + 1) * n]);
                    assert!((o - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eigen_of_diagonal_and_zero() {
        let (vals, _) = symmetric_eigen(&[3.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 2.0], 3);
        assert_eq!(vals, vec![-1.0, 2.0, 3.0]);
        let (vals, vecs) = symmetric_eigen(&[0.0; 16], 4);
        assert!(vals.iter().all(|&v| v == 0.0));
        assert_eq!(vecs.len(), 16);
    }

    #[test]
    fn orthonormalize_handles_dependent_columns() {
        let mut t = Tensor::new(vec![3, 3], vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0]).unwrap();
        orthonormalize_columns(&mut t);
        let gram = t.transpose().matmul(&t).unwrap();
        assert!(gram.max_abs_diff(&Tensor::eye(3)) < 1e-12);
    }
}
