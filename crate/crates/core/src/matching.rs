//! Shallow explicit networks with the same CK equivalent as a DEQ.
//!
//! Given the DEQ coefficients (α*,1, α*,2, α*,3, γ*), find explicit layers whose
//! (α̃_{L,1}, α̃_{L,2}, α̃_{L,3}, τ̃_L) coincide. One Hard-Tanh layer `a·clip(x, −c, c)`
//! can only reach targets with α2 = α3/2; everything else needs two Leaky-ReLU layers.
//!
//! The solver is a projected Levenberg–Marquardt iteration with central-difference
//! Jacobians, started from deterministic random restarts that run in parallel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::error::{DeqError, Result};
use crate::par;
use crate::rng::{substream, Domain};
use crate::scalar_system::{explicit_coefficients, explicit_coefficients_with, CkCoefficients};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchTarget {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub gamma_star: f64,
    pub tau0: f64,
}

impl MatchTarget {
    pub fn from_ck(ck: &CkCoefficients, tau0: f64) -> Self {
        MatchTarget { alpha1: ck.alpha1, alpha2: ck.alpha2, alpha3: ck.alpha3, gamma_star: ck.gamma_star, tau0 }
    }

    /// Target reproduced by the explicit network `layers` (for round trips).
    pub fn from_layers(layers: &[Activation], tau0: f64) -> Result<Self> {
        let ex = explicit_coefficients(layers, tau0)?;
        let a = ex.last();
        Ok(MatchTarget { alpha1: a[0], alpha2: a[1], alpha3: a[2], gamma_star: ex.tau_last(), tau0 })
    }

    fn validate(&self) -> Result<()> {
        let vals = [self.alpha1, self.alpha2, self.alpha3, self.gamma_star, self.tau0];
        if vals.iter().any(|v| !v.is_finite()) || self.alpha1 < 0.0 || !(self.tau0 > 0.0) {
            return Err(DeqError::Config(format!("invalid match target {self:?}")));
        }
        Ok(())
    }
}

/// Network family being solved for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchFamily {
    /// One Hard-Tanh layer, parameters (a, c).
    HardTanh1,
    /// Two Leaky-ReLU layers, parameters (a1, b1, a2, b2).
    LeakyRelu2,
}

impl MatchFamily {
    pub fn for_depth(depth: usize) -> Result<Self> {
        match depth {
            1 => Ok(MatchFamily::HardTanh1),
            2 => Ok(MatchFamily::LeakyRelu2),
            d => Err(DeqError::Config(format!("matching depth must be 1 or 2, got {d}"))),
        }
    }

    pub fn depth(self) -> usize {
        match self {
            MatchFamily::HardTanh1 => 1,
            MatchFamily::LeakyRelu2 => 2,
        }
    }

    pub fn n_params(self) -> usize {
        2 * self.depth()
    }

    /// Builds the layers from natural parameters.
    pub fn layers(self, params: &[f64]) -> Result<Vec<Activation>> {
        if params.len() != self.n_params() {
            return Err(DeqError::DimensionMismatch(format!("{:?} takes {} parameters, got {}", self, self.n_params(), params.len())));
        }
        match self {
            MatchFamily::HardTanh1 => Ok(vec![Activation::hard_tanh(params[0], params[1])?]),
            MatchFamily::LeakyRelu2 => Ok(vec![
                Activation::leaky_relu(params[0], params[1])?,
                Activation::leaky_relu(params[2], params[3])?,
            ]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub depth: usize,
    pub family: MatchFamily,
    /// Natural parameters: (a, c) or (a1, b1, a2, b2).
    pub params: Vec<f64>,
    pub layers: Vec<Activation>,
    /// (α̃_{L,1}−α*,1, α̃_{L,2}−α*,2, α̃_{L,3}−α*,3, τ̃_L−γ*).
    pub residuals: [f64; 4],
    pub objective: f64,
    pub solver_iterations: usize,
    /// Index of the restart that produced the result.
    pub restart: usize,
    pub converged: bool,
}

impl MatchResult {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub restarts: usize,
    pub max_iters: usize,
    /// Convergence threshold on ‖residuals‖_∞.
    pub tol: f64,
    /// Tolerance of the depth rule.
    pub depth_tol: f64,
    pub seed: u64,
    /// α̃_{l,4} = `chi_factor`·E[(σ_l²)″]·α̃_{l−1,4} in the explicit recursion.
    pub chi_factor: f64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions { restarts: 100, max_iters: 200, tol: 1e-10, depth_tol: 1e-8, seed: 0, chi_factor: 0.5 }
    }
}

/// 1 iff |α*,2 − α*,3/2| ≤ tol·max(1, α*,3).
pub fn decide_depth(target: &MatchTarget, tol: f64) -> usize {
    if (target.alpha2 - target.alpha3 / 2.0).abs() <= tol * target.alpha3.abs().max(1.0) {
        1
    } else {
        2
    }
}

/// Residuals of the four matching equations at natural parameters.
pub fn match_residuals(params: &[f64], family: MatchFamily, target: &MatchTarget) -> Result<[f64; 4]> {
    residuals_with(params, family, target, 0.5)
}

fn residuals_with(params: &[f64], family: MatchFamily, target: &MatchTarget, chi_factor: f64) -> Result<[f64; 4]> {
    let layers = family.layers(params)?;
    let ex = explicit_coefficients_with(&layers, target.tau0, chi_factor)?;
    let a = ex.last();
    Ok([a[0] - target.alpha1, a[1] - target.alpha2, a[2] - target.alpha3, ex.tau_last() - target.gamma_star])
}

/// ½‖r‖².
pub fn objective(params: &[f64], family: MatchFamily, target: &MatchTarget) -> Result<f64> {
    Ok(half_norm2(&match_residuals(params, family, target)?))
}

/// Central-difference Jacobian of the residuals in natural parameters (4 × n_params).
pub fn residual_jacobian(params: &[f64], family: MatchFamily, target: &MatchTarget) -> Result<Vec<[f64; 4]>> {
    let (lo, hi) = natural_bounds(family, params);
    jacobian(|x| match_residuals(x, family, target), params, &lo, &hi)
}

/// Jᵀr, the gradient of [`objective`] as the solver sees it.
pub fn objective_gradient(params: &[f64], family: MatchFamily, target: &MatchTarget) -> Result<Vec<f64>> {
    let r = match_residuals(params, family, target)?;
    let j = residual_jacobian(params, family, target)?;
    Ok(j.iter().map(|col| dot4(col, &r)).collect())
}

pub fn match_activation(target: &MatchTarget, depth: usize) -> Result<MatchResult> {
    match_activation_with(target, depth, &MatchOptions::default())
}

pub fn match_activation_with(target: &MatchTarget, depth: usize, opts: &MatchOptions) -> Result<MatchResult> {
    target.validate()?;
    let family = MatchFamily::for_depth(depth)?;
    let needed = decide_depth(target, opts.depth_tol);
    if depth == 1 && needed == 2 {
        return Err(DeqError::DepthInsufficient { alpha2: target.alpha2, half_alpha3: target.alpha3 / 2.0 });
    }
    if depth == 2 && needed == 1 {
        return Err(DeqError::Config("target satisfies alpha2 = alpha3/2; use depth 1".into()));
    }
    let restarts = opts.restarts.max(1);
    let runs = par::map_indexed(restarts, |i| {
        let x0 = initial_point(family, opts.seed, i as u64);
        solve(family, target, x0, opts).ok()
    });
    let mut best: Option<(usize, Solve)> = None;
    for (i, run) in runs.into_iter().enumerate() {
        if let Some(s) = run {
            if best.as_ref().is_none_or(|(_, b)| s.objective < b.objective) {
                best = Some((i, s));
            }
        }
    }
    let (restart, s) = best.ok_or(DeqError::NoConvergence { what: "activation matching", iterations: opts.max_iters, delta: f64::NAN })?;
    let params = to_natural(family, &s.x);
    let residuals = residuals_with(&params, family, target, opts.chi_factor)?;
    let max_res = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(MatchResult {
        depth,
        family,
        layers: family.layers(&params)?,
        params,
        residuals,
        objective: half_norm2(&residuals),
        solver_iterations: s.iterations,
        restart,
        converged: max_res < opts.tol,
    })
}

/// As [`match_activation_with`] but fails when the best restart does not reach `opts.tol`.
pub fn match_activation_strict(target: &MatchTarget, depth: usize, opts: &MatchOptions) -> Result<MatchResult> {
    let r = match_activation_with(target, depth, opts)?;
    if !r.converged {
        return Err(DeqError::NoConvergence { what: "activation matching", iterations: r.solver_iterations, delta: r.max_residual() });
    }
    Ok(r)
}

// Solver coordinates: (a, c) for Hard-Tanh, (a1, s1, a2, s2) with b = a·s for Leaky-ReLU.

const A_MIN: f64 = 1e-8;
const A_MAX: f64 = 1e4;

fn solver_bounds(family: MatchFamily) -> (Vec<f64>, Vec<f64>) {
    match family {
        MatchFamily::HardTanh1 => (vec![A_MIN, 0.0], vec![A_MAX, 1e4]),
        MatchFamily::LeakyRelu2 => (vec![A_MIN, 0.0, A_MIN, 0.0], vec![A_MAX, 1.0, A_MAX, 1.0]),
    }
}

fn natural_bounds(family: MatchFamily, params: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match family {
        MatchFamily::HardTanh1 => solver_bounds(family),
        // b ranges over [0, a] with a held at its current value.
        MatchFamily::LeakyRelu2 => (vec![params[1], 0.0, params[3], 0.0], vec![A_MAX, params[0], A_MAX, params[2]]),
    }
}

fn to_natural(family: MatchFamily, x: &[f64]) -> Vec<f64> {
    match family {
        MatchFamily::HardTanh1 => x.to_vec(),
        MatchFamily::LeakyRelu2 => vec![x[0], x[0] * x[1], x[2], x[2] * x[3]],
    }
}

fn initial_point(family: MatchFamily, seed: u64, restart: u64) -> Vec<f64> {
    let mut rng = substream(seed, Domain::Restarts, family.depth() as u64, restart);
    let mut log_uniform = || 10f64.powf(rng.random_range(-2.0..1.0));
    match family {
        MatchFamily::HardTanh1 => {
            let a = log_uniform();
            vec![a, rng.random_range(0.0..5.0)]
        }
        MatchFamily::LeakyRelu2 => {
            let a1 = log_uniform();
            let a2 = log_uniform();
            vec![a1, rng.random_range(0.0..1.0), a2, rng.random_range(0.0..1.0)]
        }
    }
}

struct Solve {
    x: Vec<f64>,
    objective: f64,
    iterations: usize,
}

fn solve(family: MatchFamily, target: &MatchTarget, x0: Vec<f64>, opts: &MatchOptions) -> Result<Solve> {
    let (lo, hi) = solver_bounds(family);
    let f = |x: &[f64]| residuals_with(&to_natural(family, x), family, target, opts.chi_factor);
    let mut x = project(x0, &lo, &hi);
    let mut r = f(&x)?;
    let mut obj = half_norm2(&r);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let stop = (opts.tol * 1e-3).max(1e-15);
    while iterations < opts.max_iters {
        iterations += 1;
        if r.iter().all(|v| v.abs() < stop) {
            break;
        }
        let j = jacobian(f, &x, &lo, &hi)?;
        let k = x.len();
        let mut jtj = vec![vec![0.0; k]; k];
        let mut g = vec![0.0; k];
        for a in 0..k {
            g[a] = dot4(&j[a], &r);
            for b in 0..k {
                jtj[a][b] = dot4(&j[a], &j[b]);
            }
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut m = jtj.clone();
            for a in 0..k {
                m[a][a] += lambda * (jtj[a][a] + 1e-12);
            }
            let Some(step) = solve_linear(m, g.iter().map(|v| -v).collect()) else {
                lambda *= 10.0;
                continue;
            };
            let trial = project(x.iter().zip(&step).map(|(a, b)| a + b).collect(), &lo, &hi);
            if let Ok(rt) = f(&trial) {
                let ot = half_norm2(&rt);
                if ot < obj {
                    let moved = trial.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / b.abs().max(1.0)));
                    x = trial;
                    r = rt;
                    obj = ot;
                    lambda = (lambda / 3.0).max(1e-15);
                    accepted = moved > 0.0;
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(Solve { x, objective: obj, iterations })
}

fn project(mut x: Vec<f64>, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
    x
}

/// Central differences with step 1e−6·max(|x|, 1), shifted inward at the bounds.
fn jacobian<F>(f: F, x: &[f64], lo: &[f64], hi: &[f64]) -> Result<Vec<[f64; 4]>>
where
    F: Fn(&[f64]) -> Result<[f64; 4]>,
{
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        let up = (x[i] + h).min(hi[i]);
        let down = (x[i] - h).max(lo[i]);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] = up;
        xm[i] = down;
        let (rp, rm) = (f(&xp)?, f(&xm)?);
        let d = up - down;
        let mut col = [0.0; 4];
        if d > 0.0 {
            for k in 0..4 {
                col[k] = (rp[k] - rm[k]) / d;
            }
        }
        cols.push(col);
    }
    Ok(cols)
}

/// Gaussian elimination with partial pivoting.
fn solve_linear(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))?;
        if m[p][c].abs() < 1e-300 || !m[p][c].is_finite() {
            return None;
        }
        m.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / m[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn half_norm2(r: &[f64; 4]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_rule_examples() {
        let t = MatchTarget { alpha1: 1.0, alpha2: 0.05, alpha3: 0.1, gamma_star: 1.0, tau0: 1.0 };
        assert_eq!(decide_depth(&t, 1e-8), 1);
        let t = MatchTarget { alpha2: 0.2, ..t };
        assert_eq!(decide_depth(&t, 1e-8), 2);
        assert!(matches!(match_activation(&t, 1), Err(DeqError::DepthInsufficient { .. })));
    }

    #[test]
    fn identity_network_matches_linear_target() {
        let t = MatchTarget { alpha1: 1.0, alpha2: 0.0, alpha3: 0.0, gamma_star: 1.3, tau0: 1.3 };
        let r = match_residuals(&[1.0, 1.0, 1.0, 1.0], MatchFamily::LeakyRelu2, &t).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12), "{r:?}");
    }

    #[test]
    fn linear_solve() {
        let m = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let x = solve_linear(m, vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
    }
}
