//! Closed-form high-dimensional equivalents Ḡ, K̄ and Σ̄.
//!
//! All three have the shape `c1·XᵀX + V·core·Vᵀ + shift·I` with `V = [J/√p, ψ]` and
//! `core = [[c2·ttᵀ + c3·T, c2·t], [c2·tᵀ, c2]]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DeqError, Result};
use crate::gmm::GmmStats;
use crate::kernels::{self, KernelKind, KernelMatrix, Method};
use crate::par;
use crate::scalar_system::{CkCoefficients, ExplicitCoefficients, NtkCoefficients};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalentSpec {
    /// Weight of XᵀX.
    pub coeff_linear: f64,
    /// Weight of the ttᵀ / t / ψψᵀ terms.
    pub c2: f64,
    /// Weight of T.
    pub c3: f64,
    pub identity_shift: f64,
}

impl EquivalentSpec {
    pub fn from_ck(ck: &CkCoefficients, tau0: f64) -> Self {
        EquivalentSpec {
            coeff_linear: ck.alpha1,
            c2: ck.alpha2,
            c3: ck.alpha3,
            identity_shift: ck.gamma_star * ck.gamma_star - tau0 * tau0 * ck.alpha1,
        }
    }

    pub fn from_ntk(ntk: &NtkCoefficients, tau0: f64) -> Self {
        EquivalentSpec {
            coeff_linear: ntk.beta1,
            c2: ntk.beta2,
            c3: ntk.beta3,
            identity_shift: ntk.kappa_star * ntk.kappa_star - tau0 * tau0 * ntk.beta1,
        }
    }

    pub fn from_explicit(ex: &ExplicitCoefficients, tau0: f64) -> Self {
        let a = ex.last();
        let t = ex.tau_last();
        EquivalentSpec { coeff_linear: a[0], c2: a[1], c3: a[2], identity_shift: t * t - tau0 * tau0 * a[0] }
    }

    /// The (K+1)×(K+1) core matrix.
    pub fn core(&self, stats: &GmmStats) -> Array2<f64> {
        let k = stats.k;
        let tm = stats.t_matrix();
        let mut c = Array2::zeros((k + 1, k + 1));
        for a in 0..k {
            for b in 0..k {
                c[[a, b]] = self.c2 * stats.t[a] * stats.t[b] + self.c3 * tm[[a, b]];
            }
            c[[a, k]] = self.c2 * stats.t[a];
            c[[k, a]] = self.c2 * stats.t[a];
        }
        c[[k, k]] = self.c2;
        c
    }

    /// `c1·XᵀX + V·core·Vᵀ + shift·I` as an n×n matrix.
    pub fn assemble(&self, stats: &GmmStats, x: &Array2<f64>, kind: KernelKind) -> Result<KernelMatrix> {
        let n = x.ncols();
        if stats.n() != n || stats.p != x.nrows() || stats.psi.len() != n {
            return Err(DeqError::DimensionMismatch(format!(
                "statistics describe {}×{} data, X is {}×{}",
                stats.p,
                stats.n(),
                x.nrows(),
                n
            )));
        }
        let v = design(stats);
        let w = v.dot(&self.core(stats));
        let xtx = x.t().dot(x);
        let kp1 = stats.k + 1;
        let mut out = Array2::<f64>::zeros((n, n));
        let slice = out.as_slice_mut().expect("standard layout");
        par::for_each_chunk_mut(slice, n.max(1), |i, row| {
            for j in i..n {
                let mut s = 0.0;
                for a in 0..kp1 {
                    s += w[[i, a]] * v[[j, a]];
                }
                row[j] = self.coeff_linear * xtx[[i, j]] + s + if i == j { self.identity_shift } else { 0.0 };
            }
        });
        for i in 0..n {
            for j in 0..i {
                out[[i, j]] = out[[j, i]];
            }
        }
        let mut k = KernelMatrix::new(out, kind, Method::RmtFormula);
        k.meta.n = n;
        Ok(k)
    }
}

/// V = [J/√p, ψ], n×(K+1).
pub fn design(stats: &GmmStats) -> Array2<f64> {
    let n = stats.n();
    let sp = (stats.p as f64).sqrt();
    let mut v = Array2::zeros((n, stats.k + 1));
    for (i, &a) in stats.labels.iter().enumerate() {
        v[[i, a]] = 1.0 / sp;
        v[[i, stats.k]] = stats.psi[i];
    }
    v
}

/// Ḡ = α*,1XᵀX + VC*Vᵀ + (γ*² − τ0²α*,1)I.
pub fn approx_implicit_ck(ck: &CkCoefficients, stats: &GmmStats, x: &Array2<f64>) -> Result<KernelMatrix> {
    EquivalentSpec::from_ck(ck, stats.tau0).assemble(stats, x, KernelKind::ApproxCk)
}

/// K̄ = β*,1XᵀX + VD*Vᵀ + (κ*² − τ0²β*,1)I.
pub fn approx_implicit_ntk(ntk: &NtkCoefficients, stats: &GmmStats, x: &Array2<f64>) -> Result<KernelMatrix> {
    EquivalentSpec::from_ntk(ntk, stats.tau0).assemble(stats, x, KernelKind::ApproxNtk)
}

/// Σ̄⁽ᴸ⁾ = α̃_{L,1}XᵀX + VC̃_LVᵀ + (τ̃_L² − τ0²α̃_{L,1})I.
pub fn approx_explicit_ck(ex: &ExplicitCoefficients, stats: &GmmStats, x: &Array2<f64>) -> Result<KernelMatrix> {
    EquivalentSpec::from_explicit(ex, stats.tau0).assemble(stats, x, KernelKind::ApproxCk)
}

/// The low-rank part `Ḡ − c1·XᵀX − shift·I` (for rank checks).
pub fn low_rank_part(spec: &EquivalentSpec, stats: &GmmStats, x: &Array2<f64>) -> Result<Array2<f64>> {
    let full = spec.assemble(stats, x, KernelKind::ApproxCk)?;
    let xtx = kernels::gram(x);
    let mut r = full.data - &(xtx * spec.coeff_linear);
    r.diag_mut().mapv_inplace(|v| v - spec.identity_shift);
    Ok(r)
}
