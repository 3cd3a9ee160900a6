//! Expectations against the standard normal measure.
//!
//! [`gh_expectation`] is plain Gauss–Hermite (probabilists' weight, normalised to a
//! probability measure). Everything else goes through [`for_each_gauss_node`]: composite
//! Gauss–Legendre panels on `[-TRUNCATION, TRUNCATION]` weighted by the normal density and
//! split at the kinks of the integrand.
//! Weak derivatives come from Hermite moments: `E[φ⁽ᵏ⁾(τξ)] = E[He_k(ξ) φ(τξ)] / τᵏ`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::activations::{Activation, Family};
use crate::error::{DeqError, Result};

pub const DEFAULT_NODES_1D: usize = 128;
pub const DEFAULT_NODES_2D: usize = 96;
/// Half-width of the integration window for piecewise rules, in standard deviations.
pub const TRUNCATION: f64 = 12.0;
const MAX_NODES: usize = 1024;

/// Nodes and weights of a quadrature rule.
#[derive(Debug, Clone)]
pub struct Rule {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

#[allow(clippy::declare_interior_mutable_const)]
const EMPTY: OnceLock<Rule> = OnceLock::new();
static GH: [OnceLock<Rule>; MAX_NODES + 1] = [EMPTY; MAX_NODES + 1];
static GL: [OnceLock<Rule>; MAX_NODES + 1] = [EMPTY; MAX_NODES + 1];

/// Gauss–Hermite rule for E[f(ξ)], ξ ~ N(0,1): Σ w = 1.
pub fn gh_rule(n: usize) -> Result<&'static Rule> {
    if !(1..=MAX_NODES).contains(&n) {
        return Err(DeqError::InvalidNodes(n));
    }
    Ok(GH[n].get_or_init(|| hermite_rule(n)))
}

/// Gauss–Legendre rule on [-1, 1].
pub fn gl_rule(n: usize) -> &'static Rule {
    let n = n.clamp(1, MAX_NODES);
    GL[n].get_or_init(|| legendre_rule(n))
}

// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix of He_k (off-diagonal
// √k), weights the squared first components of the normalised eigenvectors.
fn hermite_rule(n: usize) -> Rule {
    let mut d = vec![0.0; n];
    let mut e: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    e.push(0.0);
    let mut z = vec![0.0; n];
    z[0] = 1.0;
    tridiagonal_ql(&mut d, &mut e, &mut z);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap());
    let mut x: Vec<f64> = idx.iter().map(|&i| d[i]).collect();
    let w: Vec<f64> = idx.iter().map(|&i| z[i] * z[i]).collect();
    // exact symmetry
    for i in 0..n / 2 {
        let v = 0.5 * (x[n - 1 - i] - x[i]);
        x[i] = -v;
        x[n - 1 - i] = v;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let mut w2 = w.clone();
    for i in 0..n {
        w2[i] = 0.5 * (w[i] + w[n - 1 - i]);
    }
    let s: f64 = w2.iter().sum();
    Rule { x, w: w2.into_iter().map(|v| v / s).collect() }
}

/// Implicit QL on a symmetric tridiagonal matrix (diagonal `d`, sub-diagonal `e[..n-1]`),
/// carrying along only the first row `z` of the eigenvector matrix.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64], z: &mut [f64]) {
    let n = d.len();
    for l in 0..n {
        let mut iter = 0;
        loop {
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
            iter += 1;
            if iter > 60 {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let mut f = s * e[i];
                let b = c * e[i];
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
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                f = z[i + 1];
                z[i + 1] = s * z[i] + c * f;
                z[i] = c * z[i] - s * f;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

fn legendre_rule(n: usize) -> Rule {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    Rule { x, w }
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Panel edges on the positive half of the window; mirrored for the negative half.
const PANEL_EDGES: [f64; 8] = [0.0, 1.0, 2.0, 3.0, 4.5, 6.0, 8.5, TRUNCATION];

/// Visits the nodes of the rule used for E[f(ξ)], ξ ~ N(0,1), with f smooth away from
/// `breaks` (given in ξ units).
///
/// Composite Gauss–Legendre on `[-TRUNCATION, TRUNCATION]` with fixed panels refined at the
/// breaks, `nodes / 8` nodes per panel, weighted by the normal density. Gauss–Hermite
/// converges too slowly for tanh-like integrands whose poles sit near the real axis.
pub fn for_each_gauss_node<F: FnMut(f64, f64)>(breaks: &[f64], nodes: usize, mut f: F) -> Result<()> {
    if nodes < 2 {
        return Err(DeqError::InvalidNodes(nodes));
    }
    let mut cuts = [0.0f64; 2 * PANEL_EDGES.len() + 8];
    let mut k = 0;
    for e in PANEL_EDGES.iter().rev() {
        if *e > 0.0 {
            cuts[k] = -e;
            k += 1;
        }
    }
    for e in PANEL_EDGES {
        cuts[k] = e;
        k += 1;
    }
    for &b in breaks.iter().take(8) {
        if b > -TRUNCATION && b < TRUNCATION {
            cuts[k] = b;
            k += 1;
        }
    }
    let cuts = &mut cuts[..k];
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rule = gl_rule(nodes.div_ceil(8).clamp(2, 128));
    for p in 0..k - 1 {
        let (lo, hi) = (cuts[p], cuts[p + 1]);
        if hi - lo <= 1e-14 {
            continue;
        }
        let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        for (t, w) in rule.x.iter().zip(&rule.w) {
            let x = mid + half * t;
            f(x, half * w * normal_pdf(x));
        }
    }
    Ok(())
}

/// Σ w_k f(τ x_k) over Gauss–Hermite nodes: E[f(τξ)] for smooth f.
pub fn gh_expectation<F: Fn(f64) -> f64>(f: F, tau: f64, nodes: usize) -> Result<f64> {
    if !(8..=512).contains(&nodes) {
        return Err(DeqError::InvalidNodes(nodes));
    }
    let rule = gh_rule(nodes)?;
    Ok(rule.x.iter().zip(&rule.w).map(|(x, w)| w * f(tau * x)).sum())
}

/// E[f(τξ)] for `f` with kinks at `breaks` (in x units).
pub fn expectation_split<F: Fn(f64) -> f64>(f: F, breaks: &[f64], tau: f64, nodes: usize) -> Result<f64> {
    let b: Vec<f64> = breaks.iter().map(|v| v / tau).collect();
    let mut s = 0.0;
    for_each_gauss_node(&b, nodes, |x, w| s += w * f(tau * x))?;
    Ok(s)
}

/// E[g(ξ, φ_raw(τξ), φ′(τξ))] using a rule adapted to the activation's kinks.
pub fn expect_act<F: FnMut(f64, f64, f64) -> f64>(act: &Activation, tau: f64, nodes: usize, mut g: F) -> Result<f64> {
    let mut s = 0.0;
    for_each_gauss_node(&act.breakpoints_scaled(tau), nodes, |x, w| {
        let y = tau * x;
        s += w * g(x, act.raw(y), act.deriv(y));
    })?;
    Ok(s)
}

/// Probabilists' Hermite polynomial He_k.
#[inline]
pub fn hermite(k: usize, x: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => x,
        2 => x * x - 1.0,
        3 => x * (x * x - 3.0),
        4 => {
            let x2 = x * x;
            x2 * (x2 - 6.0) + 3.0
        }
        _ => {
            let (mut a, mut b) = (1.0, x);
            for j in 1..k {
                let c = x * b - j as f64 * a;
                a = b;
                b = c;
            }
            b
        }
    }
}

/// E[φ⁽ᵏ⁾(τξ)] through Gaussian integration by parts.
pub fn hermite_moment(act: &Activation, k: usize, tau: f64, nodes: usize) -> Result<f64> {
    if k > 4 {
        return Err(DeqError::InvalidOrder(k));
    }
    check_tau(tau)?;
    let shift = act.shift;
    let s = expect_act(act, tau, nodes, |x, raw, _| hermite(k, x) * (raw - shift))?;
    Ok(s / tau.powi(k as i32))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(DeqError::Config(format!("tau must be positive and finite, got {tau}")))
    }
}

/// Gaussian moments of an activation at scale τ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentBundle {
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub s2: f64,
    pub d1sq: f64,
    pub f2: f64,
    pub f4: f64,
    pub tau: f64,
}

impl MomentBundle {
    pub fn max_abs_diff(&self, o: &MomentBundle) -> f64 {
        [
            self.m0 - o.m0,
            self.m1 - o.m1,
            self.m2 - o.m2,
            self.m3 - o.m3,
            self.s2 - o.s2,
            self.d1sq - o.d1sq,
            self.f2 - o.f2,
            self.f4 - o.f4,
        ]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn moment_bundle(act: &Activation, tau: f64) -> Result<MomentBundle> {
    moment_bundle_with(act, tau, DEFAULT_NODES_1D)
}

pub fn moment_bundle_with(act: &Activation, tau: f64, nodes: usize) -> Result<MomentBundle> {
    check_tau(tau)?;
    let mut acc = [0.0f64; 8];
    for_each_gauss_node(&act.breakpoints_scaled(tau), nodes, |x, w| {
        let y = tau * x;
        let phi = act.eval(y);
        let d = act.deriv(y);
        let p2 = phi * phi;
        let h2 = hermite(2, x);
        acc[0] += w * phi;
        acc[1] += w * x * phi;
        acc[2] += w * h2 * phi;
        acc[3] += w * hermite(3, x) * phi;
        acc[4] += w * p2;
        acc[5] += w * d * d;
        acc[6] += w * h2 * p2;
        acc[7] += w * hermite(4, x) * p2;
    })?;
    let t2 = tau * tau;
    Ok(MomentBundle {
        m0: acc[0],
        m1: acc[1] / tau,
        m2: acc[2] / t2,
        m3: acc[3] / (t2 * tau),
        s2: acc[4],
        d1sq: acc[5],
        f2: acc[6] / t2,
        f4: acc[7] / (t2 * t2),
        tau,
    })
}

/// E[f(u) g(v)] for (u, v) centered Gaussian with covariance [[lam_ii, lam_ij], [lam_ij, lam_jj]].
///
/// Both functions are assumed smooth; see [`bivariate_expectation_split`] for kinks.
pub fn bivariate_expectation<F, G>(f: F, g: G, lam_ii: f64, lam_jj: f64, lam_ij: f64, nodes: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    bivariate_expectation_split(f, &[], g, &[], lam_ii, lam_jj, lam_ij, nodes)
}

/// Bivariate expectation with kinks of `f` at `f_breaks` and of `g` at `g_breaks`.
#[allow(clippy::too_many_arguments)]
pub fn bivariate_expectation_split<F, G>(
    f: F,
    f_breaks: &[f64],
    g: G,
    g_breaks: &[f64],
    lam_ii: f64,
    lam_jj: f64,
    lam_ij: f64,
    nodes: usize,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let mut acc = 0.0;
    bivariate_visit(f_breaks, g_breaks, lam_ii, lam_jj, lam_ij, nodes, |u, v, w| acc += w * f(u) * g(v))?;
    Ok(acc)
}

/// Visits (u, v, weight) triples of the bivariate rule.
///
/// The outer variable is u = √Λii ξ1, split at `u_breaks`; for each outer node the inner
/// variable ξ2 of v = c1 ξ1 + c2 ξ2 is split where v crosses `v_breaks`.
pub fn bivariate_visit<V>(
    u_breaks: &[f64],
    v_breaks: &[f64],
    lam_ii: f64,
    lam_jj: f64,
    lam_ij: f64,
    nodes: usize,
    mut visit: V,
) -> Result<()>
where
    V: FnMut(f64, f64, f64),
{
    let psd = lam_ii > 0.0 && lam_jj > 0.0 && lam_ij * lam_ij <= lam_ii * lam_jj * (1.0 + 1e-12);
    if !psd || !lam_ij.is_finite() {
        return Err(DeqError::NotPsd { lam_ii, lam_jj, lam_ij });
    }
    let su = lam_ii.sqrt();
    let c1 = lam_ij / su;
    let c2sq = lam_jj - lam_ij * lam_ij / lam_ii;
    if c2sq <= 1e-12 * lam_jj {
        let mut b: Vec<f64> = u_breaks.iter().map(|k| k / su).collect();
        if c1 != 0.0 {
            b.extend(v_breaks.iter().map(|k| k / c1));
        }
        return for_each_gauss_node(&b, nodes, |x, w| visit(su * x, c1 * x, w));
    }
    let c2 = c2sq.sqrt();
    let outer: Vec<f64> = u_breaks.iter().map(|k| k / su).collect();
    let mut inner = [0.0f64; 4];
    let nb = v_breaks.len().min(4);
    let mut err = None;
    for_each_gauss_node(&outer, nodes, |x1, w1| {
        let u = su * x1;
        let base = c1 * x1;
        for (slot, k) in inner.iter_mut().zip(v_breaks) {
            *slot = (k - base) / c2;
        }
        if let Err(e) = for_each_gauss_node(&inner[..nb], nodes, |x2, w2| visit(u, base + c2 * x2, w1 * w2)) {
            err = Some(e);
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// (E[φ(u)φ(v)], E[φ′(u)φ′(v)]) for one covariance entry, in a single pass.
pub fn pair_moments(act: &Activation, lam_ii: f64, lam_jj: f64, lam_ij: f64, nodes: usize) -> Result<(f64, f64)> {
    let b = act.breakpoints();
    let (mut g, mut gd) = (0.0, 0.0);
    bivariate_visit(&b, &b, lam_ii, lam_jj, lam_ij, nodes, |u, v, w| {
        g += w * act.eval(u) * act.eval(v);
        gd += w * act.deriv(u) * act.deriv(v);
    })?;
    Ok((g, gd))
}

/// E[φ(u)φ(v)] only.
pub fn pair_ck(act: &Activation, lam_ii: f64, lam_jj: f64, lam_ij: f64, nodes: usize) -> Result<f64> {
    let b = act.breakpoints();
    let mut g = 0.0;
    bivariate_visit(&b, &b, lam_ii, lam_jj, lam_ij, nodes, |u, v, w| g += w * act.eval(u) * act.eval(v))?;
    Ok(g)
}

/// Closed-form moments for Linear, ReLU, LeakyReLU and HardTanh.
///
/// LeakyReLU (ReLU and Linear are special cases) uses the half-Gaussian integrals; HardTanh
/// uses truncated-Gaussian integrals. The published H-Tanh expressions that ignore the
/// clipping level are available separately in [`printed_hard_tanh_moments`] and are compared
/// against quadrature here, with any disagreement logged.
pub fn closed_form_moments(act: &Activation, tau: f64) -> Option<MomentBundle> {
    if !(tau > 0.0) {
        return None;
    }
    let k = act.scale;
    if k < 0.0 {
        return None;
    }
    let t = k * tau;
    let s = act.shift;
    let sq2pi = (2.0 * PI).sqrt();
    let bundle = match act.family {
        Family::Linear | Family::Relu | Family::LeakyRelu => {
            let (a, b) = match act.family {
                Family::Linear => (1.0, 1.0),
                Family::Relu => (1.0, 0.0),
                _ => (act.p0, act.p1),
            };
            let mean = (a - b) * t / sq2pi;
            let eg2 = (a * a + b * b) * t * t / 2.0;
            MomentBundle {
                m0: mean - s,
                m1: k * (a + b) / 2.0,
                m2: if t > 0.0 { k * k * (a - b) / (sq2pi * t) } else { 0.0 },
                m3: 0.0,
                s2: eg2 - 2.0 * s * mean + s * s,
                d1sq: k * k * (a * a + b * b) / 2.0,
                f2: k * k * ((a * a + b * b) - 2.0 * s * (a - b) / (t * sq2pi)),
                f4: k.powi(4) * 2.0 * s * (a - b) / (sq2pi * t.powi(3)),
                tau,
            }
        }
        Family::HardTanh => {
            let (a, c) = (act.p0, act.p1);
            let r = c / t;
            let phi_r = (-0.5 * r * r).exp() / sq2pi;
            let p = libm::erf(r / 2f64.sqrt());
            let i2 = p - 2.0 * r * phi_r;
            let i4 = 3.0 * i2 - 2.0 * r.powi(3) * phi_r;
            let i6 = 5.0 * i4 - 2.0 * r.powi(5) * phi_r;
            let eh2 = i2 + r * r * (1.0 - p);
            let he4h2 = i6 - 6.0 * i4 + 3.0 * i2 + r * r * (-i4 + 6.0 * i2 - 3.0 * p);
            let ks = k * k;
            MomentBundle {
                m0: -s,
                m1: k * a * p,
                m2: 0.0,
                m3: -2.0 * k.powi(3) * a * r * phi_r / (t * t),
                s2: a * a * t * t * eh2 + s * s,
                d1sq: ks * a * a * p,
                f2: ks * a * a * (2.0 * p - 4.0 * r * phi_r),
                f4: ks * ks * a * a * he4h2 / (t * t),
                tau,
            }
        }
        _ => return None,
    };
    if act.family == Family::HardTanh && act.scale == 1.0 {
        let printed = printed_hard_tanh_moments(act.p0, act.p1, tau);
        if let Ok(q) = moment_bundle(act, tau) {
            for (name, pv, qv) in [("s2", printed.s2, q.s2), ("m1", printed.m1, q.m1), ("m2", printed.m2, q.m2), ("f2", printed.f2, q.f2)] {
                if (pv - qv).abs() > 1e-6 {
                    log::debug!("printed H-Tanh {name} = {pv} differs from quadrature {qv} at tau = {tau}, c = {}", act.p1);
                }
            }
        }
    }
    Some(bundle)
}

/// The published c-free H-Tanh moment expressions, for audit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrintedHardTanh {
    pub s2: f64,
    pub m1: f64,
    pub m2: f64,
    pub f2: f64,
}

pub fn printed_hard_tanh_moments(a: f64, c: f64, tau: f64) -> PrintedHardTanh {
    let t2 = tau * tau;
    PrintedHardTanh {
        s2: 0.5 * (c * c + a * a + (c * c - a * a) * (-2.0 * t2).exp() - c * c * (-t2).exp()),
        m1: a * (-t2 / 2.0).exp(),
        m2: -c * (-t2 / 2.0).exp(),
        f2: 2.0 * (-2.0 * t2).exp() * (a * a + c * c * (t2.exp() - 1.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gh_basic() {
        assert!((gh_expectation(|x| x * x, 1.0, 16).unwrap() - 1.0).abs() < 1e-14);
        assert!((gh_expectation(|_| 1.0, 3.0, 64).unwrap() - 1.0).abs() < 1e-14);
        assert!(gh_expectation(|x| x, 1.0, 4).is_err());
        assert!(gh_expectation(|x| x, 1.0, 513).is_err());
        let r = gh_expectation(|x| x.max(0.0), 2.0, 128).unwrap();
        assert!((r - 2.0 / (2.0 * PI).sqrt()).abs() < 5e-3);
    }

    #[test]
    fn gh_rule_exact_for_polynomials() {
        for n in [8, 33, 128, 256, 512] {
            let r = gh_rule(n).unwrap();
            let mom = |k: i32| r.x.iter().zip(&r.w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
            assert!((mom(0) - 1.0).abs() < 1e-13, "n={n}");
            assert!((mom(4) - 3.0).abs() < 1e-12, "n={n}");
            assert!((mom(8) - 105.0).abs() < 1e-10, "n={n}");
        }
    }

    #[test]
    fn split_rule_handles_relu() {
        let r = expectation_split(|x: f64| x.max(0.0), &[0.0], 2.0, 128).unwrap();
        assert!((r - 2.0 / (2.0 * PI).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn hermite_moment_examples() {
        let relu = Activation::relu();
        assert!((hermite_moment(&relu, 1, 1.0, 128).unwrap() - 0.5).abs() < 1e-14);
        assert!((hermite_moment(&relu, 2, 1.0, 128).unwrap() - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-14);
        assert!(hermite_moment(&Activation::linear(), 2, 1.7, 128).unwrap().abs() < 1e-13);
        assert!(hermite_moment(&relu, 5, 1.0, 128).is_err());
    }

    #[test]
    fn linear_bundle() {
        let b = moment_bundle(&Activation::linear(), 1.0).unwrap();
        let want = [0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 2.0, 0.0];
        let got = [b.m0, b.m1, b.m2, b.m3, b.s2, b.d1sq, b.f2, b.f4];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-13, "{got:?}");
        }
    }

    #[test]
    fn bivariate_examples() {
        let id = |x: f64| x;
        let v = bivariate_expectation(id, id, 2.0, 3.0, 1.1, 96).unwrap();
        assert!((v - 1.1).abs() < 1e-13);
        let t = Activation::tanh();
        let tau = 1.3;
        let s2 = moment_bundle(&t, tau).unwrap().s2;
        let d = bivariate_expectation(|x| t.eval(x), |x| t.eval(x), tau * tau, tau * tau, tau * tau, 96).unwrap();
        assert!((d - s2).abs() < 1e-13);
        assert!(bivariate_expectation(id, id, 1.0, 1.0, 1.1, 96).is_err());
    }

    #[test]
    fn leaky_closed_form_example() {
        let l = Activation::leaky_relu(1.5, 0.2).unwrap();
        let c = closed_form_moments(&l, 1.0).unwrap();
        let want = ((1.5f64 * 1.5 + 0.04) * (PI - 1.0) + 2.0 * 1.5 * 0.2) / (2.0 * PI);
        let centered = l.with_shift(0.5 * 1.3 / (2.0 * PI).sqrt() * 2.0);
        let cc = closed_form_moments(&centered, 1.0).unwrap();
        assert!((cc.s2 - want).abs() < 1e-14, "{} vs {want}", cc.s2);
        assert!((c.m1 - 0.85).abs() < 1e-15);
    }
}
