//! Spectral norms, relative errors, dense eigenvalues and histograms.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{DeqError, Result};
use crate::kernels::KernelMatrix;
use crate::par;

pub const DEFAULT_TOL: f64 = 1e-12;
const MAX_POWER_ITERS: usize = 10_000;
const DENSE_FALLBACK_MAX: usize = 2048;
const DENSE_MAX: usize = 4096;
pub const DEFAULT_BINS: usize = 40;

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_symmetric(m: &Array2<f64>) -> Result<()> {
    let (r, c) = m.dim();
    if r != c {
        return Err(DeqError::DimensionMismatch(format!("{r}×{c} matrix is not square")));
    }
    let scale = frobenius(m);
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in 0..i {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    if worst > 1e-9 * scale {
        return Err(DeqError::NotSymmetric(worst));
    }
    Ok(())
}

fn matvec(m: &Array2<f64>, v: &[f64], out: &mut [f64], shift: f64) {
    par::for_each_chunk_mut(out, 64, |c, chunk| {
        let lo = c * 64;
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = lo + k;
            let row = m.row(i);
            let mut s = 0.0;
            for (a, b) in row.iter().zip(v) {
                s += a * b;
            }
            *o = s - shift * v[i];
        }
    });
}

/// Dominant eigenvalue of `M − shift·I` by power iteration with Rayleigh quotients.
fn power(m: &Array2<f64>, shift: f64, tol: f64) -> Option<(f64, usize)> {
    let n = m.nrows();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_75).fract()).collect();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let mut w = vec![0.0; n];
    let mut lam = 0.0f64;
    for it in 1..=MAX_POWER_ITERS {
        matvec(m, &v, &mut w, shift);
        let rq: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nw == 0.0 {
            return Some((0.0, it));
        }
        for (a, b) in v.iter_mut().zip(&w) {
            *a = b / nw;
        }
        if it > 2 && (rq - lam).abs() <= tol * rq.abs() {
            return Some((rq, it));
        }
        lam = rq;
    }
    None
}

/// Extreme eigenvalues (bottom, top) and iteration count.
pub fn extreme_eigenvalues(m: &Array2<f64>, tol: f64) -> Result<(f64, f64, usize)> {
    check_symmetric(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok((0.0, 0.0, 0));
    }
    let fallback = |iters: usize, delta: f64| -> Result<(f64, f64, usize)> {
        if n <= DENSE_FALLBACK_MAX {
            let e = eigenvalues_dense(m)?;
            Ok((e[0], e[n - 1], iters))
        } else {
            Err(DeqError::NoConvergence { what: "power iteration", iterations: iters, delta })
        }
    };
    // Three passes: the first lands near the largest |λ| (or between ±λ of equal size),
    // the second then finds one true extreme and the third the opposite one.
    let Some((l1, i1)) = power(m, 0.0, tol) else {
        return fallback(MAX_POWER_ITERS, f64::NAN);
    };
    let Some((mu, i2)) = power(m, l1, tol) else {
        return fallback(MAX_POWER_ITERS + i1, f64::NAN);
    };
    let e1 = l1 + mu;
    let Some((nu, i3)) = power(m, e1, tol) else {
        return fallback(MAX_POWER_ITERS + i1 + i2, f64::NAN);
    };
    let e2 = e1 + nu;
    let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
    if l1 < lo - 1e-8 * l1.abs().max(hi.abs()) || l1 > hi + 1e-8 * l1.abs().max(hi.abs()) {
        return fallback(i1 + i2 + i3, l1);
    }
    Ok((lo, hi, i1 + i2 + i3))
}

/// ‖M‖₂ of a symmetric matrix.
pub fn spectral_norm(m: &Array2<f64>, tol: f64) -> Result<f64> {
    let (lo, hi, _) = extreme_eigenvalues(m, tol)?;
    Ok(lo.abs().max(hi.abs()))
}

/// ‖A − B‖ / ‖A‖.
pub fn relative_spectral_error(a: &KernelMatrix, b: &KernelMatrix) -> Result<f64> {
    relative_spectral_error_raw(&a.data, &b.data)
}

pub fn relative_spectral_error_raw(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(DeqError::DimensionMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let d = a - b;
    let na = spectral_norm(a, DEFAULT_TOL)?;
    if na == 0.0 {
        return Err(DeqError::DimensionMismatch("reference matrix is zero".into()));
    }
    Ok(spectral_norm(&d, DEFAULT_TOL)? / na)
}

/// Ascending eigenvalues by Householder tridiagonalisation and implicit QL.
pub fn eigenvalues_dense(m: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(m, false)?.0)
}

/// Eigen-decomposition `M = Q diag(λ) Qᵀ`, eigenvalues ascending, eigenvectors in columns.
pub fn eigen_decomposition(m: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let (e, v) = symmetric_eigen(m, true)?;
    Ok((e, v.expect("vectors requested")))
}

fn symmetric_eigen(m: &Array2<f64>, vectors: bool) -> Result<(Vec<f64>, Option<Array2<f64>>)> {
    let n = m.nrows();
    if n > DENSE_MAX {
        return Err(DeqError::SizeGuard { n, max: DENSE_MAX });
    }
    check_symmetric(m)?;
    let mut v = m.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    if n == 0 {
        return Ok((d, vectors.then_some(v)));
    }
    tred2(&mut v, &mut d, &mut e, vectors);
    tql2(&mut v, &mut d, &mut e, vectors)?;
    Ok((d, vectors.then_some(v)))
}

// Householder reduction to tridiagonal form (EISPACK tred2, as in JAMA).
fn tred2(v: &mut Array2<f64>, d: &mut [f64], e: &mut [f64], vectors: bool) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[[n - 1, j]];
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
                d[j] = v[[i - 1, j]];
                v[[i, j]] = 0.0;
                v[[j, i]] = 0.0;
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
            for j in 0..i {
                e[j] = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[[j, i]] = f;
                g = e[j] + v[[j, j]] * f;
                for k in j + 1..i {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
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
                    v[[k, j]] -= f * e[k] + g * d[k];
                }
                d[j] = v[[i - 1, j]];
                v[[i, j]] = 0.0;
            }
        }
        d[i] = h;
    }
    // accumulate transformations
    for i in 0..n - 1 {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = 1.0;
        let h = d[i + 1];
        if h != 0.0 && vectors {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    v[[k, j]] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = 0.0;
    }
    v[[n - 1, n - 1]] = 1.0;
    e[0] = 0.0;
}

// Symmetric tridiagonal QL (EISPACK tql2, as in JAMA); sorts ascending.
fn tql2(v: &mut Array2<f64>, d: &mut [f64], e: &mut [f64], vectors: bool) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
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
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 300 {
                    return Err(DeqError::NoConvergence { what: "tridiagonal QL", iterations: iter, delta: e[l].abs() });
                }
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
                    if vectors {
                        for k in 0..n {
                            h = v[[k, i + 1]];
                            v[[k, i + 1]] = s * v[[k, i]] + c * h;
                            v[[k, i]] = c * v[[k, i]] - s * h;
                        }
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
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for j in i + 1..n {
            if d[j] < p {
                k = j;
                p = d[j];
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            if vectors {
                for j in 0..n {
                    let t = v[[j, i]];
                    v[[j, i]] = v[[j, k]];
                    v[[j, k]] = t;
                }
            }
        }
    }
    Ok(())
}

/// Equal-width histogram of eigenvalues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` equal-width bins over [min, max]; values with |λ| < `drop_below` are left out.
    pub fn new(values: &[f64], bins: usize, drop_below: Option<f64>) -> Histogram {
        let bins = bins.max(1);
        let kept: Vec<f64> = values.iter().copied().filter(|v| drop_below.is_none_or(|t| v.abs() >= t)).collect();
        let (lo, hi) = kept.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if kept.is_empty() {
            return Histogram { edges: vec![0.0; bins + 1], counts: vec![0; bins] };
        }
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0usize; bins];
        for v in kept {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Two columns: bin_center, density (integrates to one).
    pub fn to_csv(&self) -> String {
        let total = self.total().max(1) as f64;
        let mut s = String::from("bin_center,density\n");
        for (k, c) in self.counts.iter().enumerate() {
            let (a, b) = (self.edges[k], self.edges[k + 1]);
            let w = if b > a { b - a } else { 1.0 };
            s.push_str(&format!("{:?},{:?}\n", 0.5 * (a + b), *c as f64 / (total * w)));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub spectral_norm: f64,
    pub top_eigenvalue: f64,
    pub bottom_eigenvalue: f64,
    pub histogram: Option<Histogram>,
    pub iterations_used: usize,
}

/// Extreme eigenvalues by power iteration, plus a histogram of the full spectrum when
/// `bins` is given.
pub fn spectrum_report(m: &Array2<f64>, bins: Option<usize>, drop_below: Option<f64>) -> Result<SpectrumReport> {
    let (lo, hi, iters) = extreme_eigenvalues(m, DEFAULT_TOL)?;
    let histogram = match bins {
        Some(b) => Some(Histogram::new(&eigenvalues_dense(m)?, b, drop_below)),
        None => None,
    };
    Ok(SpectrumReport {
        spectral_norm: lo.abs().max(hi.abs()),
        top_eigenvalue: hi,
        bottom_eigenvalue: lo,
        histogram,
        iterations_used: iters,
    })
}

/// `Q diag(λ) Qᵀ`.
pub fn reconstruct(values: &[f64], q: &Array2<f64>) -> Array2<f64> {
    let l = Array1::from(values.to_vec());
    let ql = q * &l;
    ql.dot(&q.t())
}
