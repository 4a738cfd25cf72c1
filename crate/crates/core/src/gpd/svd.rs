//! Singular value decompositions used by the codec.

use crate::error::{Error, Result};
use crate::linalg::{gram_cols, gram_rows, orthonormalize_columns, symmetric_eigen};
use crate::nn::{dot, gemm_nn, Tensor};

const MAX_SWEEPS: usize = 60;
const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// `M ≈ U · diag(S) · V` with `U: m×K`, `V: K×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl SvdTriple {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Keeps the leading `k` singular triplets.
    pub fn truncate(&self, k: usize) -> SvdTriple {
        let k = k.min(self.rank());
        let m = self.u.shape()[0];
        let n = self.v.cols();
        let big_k = self.rank();
        let u = Tensor::from_fn(&[m, k], |idx| self.u.data()[(idx / k) * big_k + idx % k]);
        let v = Tensor::from_fn(&[k, n], |idx| self.v.data()[idx]);
        SvdTriple { u, s: self.s[..k].to_vec(), v }
    }

    pub fn reconstruct(&self) -> Tensor {
        let m = self.u.shape()[0];
        let n = self.v.cols();
        let k = self.rank();
        let mut us = self.u.data().to_vec();
        for row in us.chunks_mut(k.max(1)) {
            row.iter_mut().zip(&self.s).for_each(|(x, s)| *x *= s);
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&us, self.v.data(), &mut out, m, k, n);
        Tensor::from_parts(vec![m, n], out)
    }

    /// Scalars needed to send this triple with `S` as a vector.
    pub fn scalar_count(&self) -> usize {
        let k = self.rank();
        self.u.shape()[0] * k + k + k * self.v.cols()
    }
}

/// Full thin SVD by one-sided Jacobi rotations.
///
/// `label` names the tensor in error messages.
pub fn svd(m: &Tensor, label: &str) -> Result<SvdTriple> {
    if m.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "svd of tensor {label} expects a matrix, got shape {:?}",
            m.shape()
        )));
    }
    m.check_finite(label)?;
    let (rows, cols) = (m.rows(), m.cols());
    if rows < cols {
        let t = jacobi(&m.transpose(), label)?;
        return Ok(SvdTriple { u: t.v.transpose(), s: t.s, v: t.u.transpose() }.canonical_signs());
    }
    Ok(jacobi(m, label)?.canonical_signs())
}

fn jacobi(a: &Tensor, label: &str) -> Result<SvdTriple> {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric {
            tensor: label.to_string(),
            msg: format!("one-sided Jacobi did not converge within {MAX_SWEEPS} sweeps"),
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);

    let mut u = Tensor::zeros(&[m, n]);
    let mut degenerate = false;
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > 0.0 && sigma > smax * 1e-13 {
            for i in 0..m {
                u.data_mut()[i * n + k] = cols[j][i] / sigma;
            }
        } else {
            degenerate = true;
        }
    }
    if degenerate {
        orthonormalize_columns(&mut u);
    }
    let mut v = Tensor::zeros(&[n, n]);
    for (k, &j) in order.iter().enumerate() {
        v.data_mut()[k * n..(k + 1) * n].copy_from_slice(&vcols[j]);
    }
    Ok(SvdTriple { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

impl SvdTriple {
    /// Flips each singular pair so the largest-magnitude entry of the `U`
    /// column is non-negative.
    fn canonical_signs(mut self) -> SvdTriple {
        let k = self.rank();
        let m = self.u.shape()[0];
        let n = self.v.cols();
        for c in 0..k {
            let mut best = 0.0f64;
            for i in 0..m {
                let x = self.u.data()[i * k + c];
                if x.abs() > best.abs() {
                    best = x;
                }
            }
            if best < 0.0 {
                for i in 0..m {
                    self.u.data_mut()[i * k + c] *= -1.0;
                }
                self.v.data_mut()[c * n..(c + 1) * n].iter_mut().for_each(|x| *x = -*x);
            }
        }
        self
    }
}

/// Leading `r` singular triplets via the eigen-decomposition of the smaller
/// Gram matrix.
pub fn truncated_svd(a: &Tensor, r: usize, label: &str) -> Result<SvdTriple> {
    let (m, n) = (a.rows(), a.cols());
    let r = r.clamp(1, m.min(n));
    a.check_finite(label)?;
    let data = a.data();
    // (sigma, left vector, right vector) per retained direction
    let mut triplets: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(r);
    if n <= m {
        let (_, vecs) = symmetric_eigen(&gram_cols(data, m, n), n);
        for k in 0..r {
            let vk = vecs[(n - 1 - k) * n..(n - k) * n].to_vec();
            let mut av: Vec<f64> = (0..m).map(|i| dot(&data[i * n..(i + 1) * n], &vk)).collect();
            let sigma = dot(&av, &av).sqrt();
            av.iter_mut().for_each(|x| *x = if sigma > 0.0 { *x / sigma } else { 0.0 });
            triplets.push((sigma, av, vk));
        }
    } else {
        let (_, vecs) = symmetric_eigen(&gram_rows(data, m, n), m);
        for k in 0..r {
            let uk = vecs[(m - 1 - k) * m..(m - k) * m].to_vec();
            let mut atu = vec![0.0; n];
            for (i, &ui) in uk.iter().enumerate() {
                atu.iter_mut().zip(&data[i * n..(i + 1) * n]).for_each(|(x, y)| *x += ui * y);
            }
            let sigma = dot(&atu, &atu).sqrt();
            atu.iter_mut().for_each(|x| *x = if sigma > 0.0 { *x / sigma } else { 0.0 });
            triplets.push((sigma, uk, atu));
        }
    }
    triplets.sort_by(|x, y| y.0.total_cmp(&x.0));

    let s: Vec<f64> = triplets.iter().map(|t| t.0).collect();
    let mut u = Tensor::zeros(&[m, r]);
    let mut v = Tensor::zeros(&[r, n]);
    for (k, (_, uk, vk)) in triplets.iter().enumerate() {
        for i in 0..m {
            u.data_mut()[i * r + k] = uk[i];
        }
        v.data_mut()[k * n..(k + 1) * n].copy_from_slice(vk);
    }
    // Directions with (numerically) zero singular value are undetermined on
    // the side computed by projection; complete them to an orthonormal set.
    if s.iter().any(|&x| x <= s[0] * 1e-13) {
        if n <= m {
            orthonormalize_columns(&mut u);
        } else {
            let mut vt = v.transpose();
            orthonormalize_columns(&mut vt);
            v = vt.transpose();
        }
    }
    Ok(SvdTriple { u, s, v }.canonical_signs())
}

/// The stage-one rank for a `P×Q` view.
pub fn split_rank_of(p: usize, q: usize) -> usize {
    let (lo, hi) = (p.min(q), p.max(q));
    (hi / lo).clamp(1, lo)
}

/// Splits `g` into `g_p · g_n`, the best rank-r approximation, with the
/// singular values shared evenly between the two factors.
pub fn split_rank(g: &Tensor, label: &str) -> Result<(Tensor, Tensor)> {
    let (p, q) = (g.rows(), g.cols());
    let r = split_rank_of(p, q);
    let t = truncated_svd(g, r, label)?;
    let roots: Vec<f64> = t.s.iter().map(|s| s.sqrt()).collect();
    let gp = Tensor::from_fn(&[p, r], |idx| t.u.data()[idx] * roots[idx % r]);
    let gn = Tensor::from_fn(&[r, q], |idx| t.v.data()[idx] * roots[idx / q]);
    Ok((gp, gn))
}

/// Smallest `K` whose leading squared singular values exceed fraction
/// `alpha` of the total.
pub fn choose_k(s: &[f64], alpha: f64) -> usize {
    let prefix: Vec<f64> = s
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x * x;
            Some(*acc)
        })
        .collect();
    let total = match prefix.last() {
        Some(&t) if t > 0.0 => t,
        _ => return s.len().min(1),
    };
    prefix
        .iter()
        .position(|&p| p / total > alpha)
        .map(|i| i + 1)
        .unwrap_or(s.len())
}
