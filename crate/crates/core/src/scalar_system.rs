//! Scalar fixed points and coefficient systems.
//!
//! The high-dimensional CK and NTK of a DEQ depend on (φ, σ_a, σ_b) only through τ* and
//! the four-scalar systems computed here. Explicit networks get the analogous layer
//! recursion, and the finite-depth recursions serve as convergence oracles.

use serde::{Deserialize, Serialize};

use crate::activations::{self, Activation};
use crate::error::{DeqError, Result};
use crate::gauss_quad::{self, MomentBundle};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeqConfig {
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub activation: Activation,
    pub tau0: f64,
}

impl DeqConfig {
    pub fn new(activation: Activation, sigma_a2: f64, sigma_b: f64, tau0: f64) -> Self {
        DeqConfig { sigma_a: sigma_a2.max(0.0).sqrt(), sigma_b, activation, tau0 }
    }

    pub fn sigma_a2(&self) -> f64 {
        self.sigma_a * self.sigma_a
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma_a >= 0.0 && self.sigma_b > 0.0 && self.tau0 > 0.0) || !self.sigma_a.is_finite() {
            return Err(DeqError::Config(format!(
                "need sigma_a >= 0, sigma_b > 0, tau0 > 0 (got {}, {}, {})",
                self.sigma_a, self.sigma_b, self.tau0
            )));
        }
        Ok(())
    }

    /// The activation centered at τ*, together with τ*.
    pub fn centered(&self) -> Result<(Activation, f64)> {
        self.validate()?;
        activations::center_activation_with_tau(&self.activation, self.sigma_a, self.sigma_b, self.tau0)
    }
}

/// τ_{k+1} = √(σ_a² E[φ²(τ_k ξ)] + σ_b² τ0²) from τ_0 = τ0, with φ as given (shift included).
pub fn solve_tau_star(cfg: &DeqConfig) -> Result<f64> {
    solve_tau_star_from(cfg, cfg.tau0).map(|(t, _)| t)
}

/// Fixed-point iteration from `start`; also returns the iterate trajectory.
pub fn solve_tau_star_from(cfg: &DeqConfig, start: f64) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let sa2 = cfg.sigma_a2();
    let act = &cfg.activation;
    let f2 = gauss_quad::moment_bundle(act, cfg.tau0)?.f2;
    if sa2 * f2 / 2.0 >= 1.0 {
        return Err(DeqError::AssumptionViolated(format!("variance map is not a contraction at tau0: sigma_a^2 E[(phi^2)'']/2 = {}", sa2 * f2 / 2.0)));
    }
    let base = cfg.sigma_b * cfg.sigma_b * cfg.tau0 * cfg.tau0;
    let mut tau = start;
    let mut path = vec![tau];
    let mut delta = f64::INFINITY;
    for _ in 0..100_000 {
        let s2 = if sa2 == 0.0 { 0.0 } else { gauss_quad::expect_act(act, tau, gauss_quad::DEFAULT_NODES_1D, |_, r, _| (r - act.shift).powi(2))? };
        let next = (sa2 * s2 + base).sqrt();
        delta = (next - tau).abs();
        tau = next;
        path.push(tau);
        if delta < 1e-13 {
            return Ok((tau, path));
        }
    }
    Err(DeqError::NoConvergence { what: "tau* iteration", iterations: 100_000, delta })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: &str, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, bound, pass: value < bound && value.is_finite() }
    }
    pub fn margin(&self) -> f64 {
        self.bound - self.value
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<Check>,
    pub tau_star: Option<f64>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let msg = self
            .failures()
            .iter()
            .map(|c| format!("{} ({} >= {})", c.name, c.value, c.bound))
            .collect::<Vec<_>>()
            .join(", ");
        Err(DeqError::AssumptionViolated(msg))
    }
}

/// Evaluates the contraction conditions: σ_a² < 1/(4L1²); σ_a²E[(φ²)″]/2 < 1 at τ0 and at τ*;
/// σ_a²E[φ′(τ*ξ)]² < 1; σ_a²E[φ′(τ*ξ)²] < 1 (NTK).
pub fn check_assumptions(cfg: &DeqConfig) -> AssumptionReport {
    let sa2 = cfg.sigma_a2();
    let l1 = cfg.activation.lipschitz;
    let mut checks = vec![Check::new("weight contraction: sigma_a^2 < 1/(4 L1^2)", sa2, 1.0 / (4.0 * l1 * l1))];
    if sa2 == 0.0 {
        for name in ["variance map at tau0", "variance map at tau*", "sigma_a^2 E[phi'(tau* xi)]^2 < 1", "sigma_a^2 E[phi'(tau* xi)^2] < 1"] {
            checks.push(Check::new(name, 0.0, 1.0));
        }
        return AssumptionReport { checks, tau_star: Some(cfg.sigma_b * cfg.tau0) };
    }
    let centered = cfg.centered();
    let (act, tau_star) = match centered {
        Ok(v) => v,
        Err(_) => {
            checks.push(Check::new("variance map: centering fixed point exists", f64::INFINITY, 1.0));
            return AssumptionReport { checks, tau_star: None };
        }
    };
    let at = |t: f64| gauss_quad::moment_bundle(&act, t);
    match (at(cfg.tau0), at(tau_star)) {
        (Ok(b0), Ok(bs)) => {
            checks.push(Check::new("variance map at tau0: sigma_a^2 E[(phi^2)'']/2 < 1", sa2 * b0.f2 / 2.0, 1.0));
            checks.push(Check::new("variance map at tau*: sigma_a^2 E[(phi^2)'']/2 < 1", sa2 * bs.f2 / 2.0, 1.0));
            checks.push(Check::new("sigma_a^2 E[phi'(tau* xi)]^2 < 1", sa2 * bs.m1 * bs.m1, 1.0));
            checks.push(Check::new("sigma_a^2 E[phi'(tau* xi)^2] < 1", sa2 * bs.d1sq, 1.0));
        }
        _ => checks.push(Check::new("moments finite", f64::INFINITY, 1.0)),
    }
    AssumptionReport { checks, tau_star: Some(tau_star) }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkCoefficients {
    pub tau_star: f64,
    pub gamma_star: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    /// The activation centered at τ*.
    pub activation: Activation,
    pub moments: MomentBundle,
}

pub fn ck_coefficients(cfg: &DeqConfig) -> Result<CkCoefficients> {
    check_assumptions(cfg).into_result()?;
    let (act, tau_star) = cfg.centered()?;
    let b = gauss_quad::moment_bundle(&act, tau_star)?;
    let sa2 = cfg.sigma_a2();
    let sb2 = cfg.sigma_b * cfg.sigma_b;
    let m1sq = b.m1 * b.m1;
    let m2sq = b.m2 * b.m2;
    let den = 1.0 - sa2 * m1sq;
    let alpha1 = sb2 * m1sq / den;
    let alpha4 = sb2 / (1.0 - sa2 * b.f2 / 2.0);
    let alpha2 = m2sq * alpha4 * alpha4 / (4.0 * den);
    let alpha3 = m2sq * (sa2 * alpha1 + sb2).powi(2) / (2.0 * den);
    let gamma_star = b.s2.max(0.0).sqrt();
    if sa2 > 0.0 {
        let g2 = (tau_star * tau_star - sb2 * cfg.tau0 * cfg.tau0) / sa2;
        debug_assert!((g2 - b.s2).abs() <= 1e-9 * b.s2.max(1.0), "gamma*^2 = {} vs {g2}", b.s2);
    }
    Ok(CkCoefficients { tau_star, gamma_star, alpha1, alpha2, alpha3, alpha4, activation: act, moments: b })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtkCoefficients {
    pub kappa_star: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub adot0: f64,
    pub adot1: f64,
    /// Alternative closed form of β*,3, kept for comparison.
    pub beta3_main_text: f64,
}

pub fn ntk_coefficients(cfg: &DeqConfig, ck: &CkCoefficients) -> Result<NtkCoefficients> {
    let sa2 = cfg.sigma_a2();
    let sb2 = cfg.sigma_b * cfg.sigma_b;
    let b = &ck.moments;
    let adot0 = sa2 * b.m1 * b.m1;
    let m2sq = b.m2 * b.m2;
    let adot1 = sa2 * m2sq * (sa2 * ck.alpha1 + sb2);
    let slope = sa2 * b.d1sq;
    if adot0 >= 1.0 || slope >= 1.0 {
        return Err(DeqError::AssumptionViolated(format!("NTK recursion not contractive: adot0 = {adot0}, sigma_a^2 E[phi'^2] = {slope}")));
    }
    let den = 1.0 - adot0;
    let beta1 = ck.alpha1 / den;
    let beta2 = ck.alpha2 / den;
    let beta3 = (ck.alpha3 + beta1 * adot1) / den;
    let beta3_main_text = (ck.alpha3 + beta1 * (sa2 * m2sq + sb2) * ck.alpha1) / den;
    let kappa_star = (b.s2 / (1.0 - slope)).sqrt();
    Ok(NtkCoefficients { kappa_star, beta1, beta2, beta3, adot0, adot1, beta3_main_text })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplicitCoefficients {
    /// τ̃_0..τ̃_L.
    pub tau: Vec<f64>,
    /// (α̃_{l,1}, α̃_{l,2}, α̃_{l,3}, α̃_{l,4}) for l = 0..L.
    pub alpha: Vec<[f64; 4]>,
    /// Layer l+1 centered at τ̃_l.
    pub layers: Vec<Activation>,
}

impl ExplicitCoefficients {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
    pub fn last(&self) -> [f64; 4] {
        *self.alpha.last().expect("l = 0 always present")
    }
    pub fn tau_last(&self) -> f64 {
        *self.tau.last().expect("l = 0 always present")
    }
}

/// Layer recursion of an explicit network with Σ⁽⁰⁾ = XᵀX.
pub fn explicit_coefficients(layers: &[Activation], tau0: f64) -> Result<ExplicitCoefficients> {
    explicit_coefficients_with(layers, tau0, 0.5)
}

/// As [`explicit_coefficients`] with α̃_{l,4} = `chi_factor`·E[(σ_l²)″]·α̃_{l-1,4}.
pub fn explicit_coefficients_with(layers: &[Activation], tau0: f64, chi_factor: f64) -> Result<ExplicitCoefficients> {
    if !(tau0 > 0.0) {
        return Err(DeqError::Config(format!("tau0 must be positive, got {tau0}")));
    }
    let mut tau = vec![tau0];
    let mut alpha = vec![[1.0, 0.0, 0.0, 1.0]];
    let mut centered = Vec::with_capacity(layers.len());
    for layer in layers {
        let t = *tau.last().unwrap();
        let act = activations::center_at(layer, t)?;
        let b = gauss_quad::moment_bundle(&act, t)?;
        let [a1, a2, a3, a4] = *alpha.last().unwrap();
        let m1sq = b.m1 * b.m1;
        let m2sq = b.m2 * b.m2;
        alpha.push([
            m1sq * a1,
            m1sq * a2 + 0.25 * m2sq * a4 * a4,
            m1sq * a3 + 0.5 * m2sq * a1 * a1,
            chi_factor * b.f2 * a4,
        ]);
        tau.push(b.s2.max(0.0).sqrt());
        centered.push(act);
    }
    Ok(ExplicitCoefficients { tau, alpha, layers: centered })
}

/// CK coefficient trajectory (α_{l,1..4}) for l = 0..depth from G⁽⁰⁾ = E[φ²(τ*ξ)]·I.
pub fn finite_depth_coefficients(cfg: &DeqConfig, depth: usize) -> Result<Vec<[f64; 4]>> {
    let ck = ck_coefficients(cfg)?;
    Ok(ck_trajectory(cfg, &ck.moments, depth))
}

fn ck_trajectory(cfg: &DeqConfig, b: &MomentBundle, depth: usize) -> Vec<[f64; 4]> {
    let sa2 = cfg.sigma_a2();
    let sb2 = cfg.sigma_b * cfg.sigma_b;
    let m1sq = b.m1 * b.m1;
    let m2sq = b.m2 * b.m2;
    let mut out = vec![[0.0, 0.0, 0.0, sb2]];
    for _ in 0..depth {
        let [a1, a2, a3, a4] = *out.last().unwrap();
        out.push(ck_step(sa2, sb2, m1sq, m2sq, b.f2, [a1, a2, a3, a4]));
    }
    out
}

fn ck_step(sa2: f64, sb2: f64, m1sq: f64, m2sq: f64, f2: f64, a: [f64; 4]) -> [f64; 4] {
    let r = sa2 * m1sq;
    [
        r * a[0] + sb2 * m1sq,
        r * a[1] + 0.25 * m2sq * a[3] * a[3],
        r * a[2] + 0.5 * m2sq * (sa2 * a[0] + sb2).powi(2),
        0.5 * sa2 * f2 * a[3] + sb2,
    ]
}

/// One step of the finite-depth CK recursion applied to `a` (fixed-point check).
pub fn ck_recursion_step(cfg: &DeqConfig, ck: &CkCoefficients, a: [f64; 4]) -> [f64; 4] {
    let b = &ck.moments;
    ck_step(cfg.sigma_a2(), cfg.sigma_b * cfg.sigma_b, b.m1 * b.m1, b.m2 * b.m2, b.f2, a)
}

/// NTK coefficient trajectory (β_{l,1}, β_{l,2}, β_{l,3}, κ_l²) for l = 0..depth.
pub fn finite_depth_ntk(cfg: &DeqConfig, depth: usize) -> Result<Vec<[f64; 4]>> {
    let ck = ck_coefficients(cfg)?;
    let b = ck.moments;
    let sa2 = cfg.sigma_a2();
    let sb2 = cfg.sigma_b * cfg.sigma_b;
    let alphas = ck_trajectory(cfg, &b, depth);
    let adot0 = sa2 * b.m1 * b.m1;
    let mut out = vec![[0.0, 0.0, 0.0, b.s2]];
    for l in 1..=depth {
        let [b1, b2, b3, k2] = out[l - 1];
        let a = alphas[l];
        let adot1 = sa2 * b.m2 * b.m2 * (sa2 * alphas[l - 1][0] + sb2);
        out.push([
            a[0] + b1 * adot0,
            a[1] + b2 * adot0,
            a[2] + b3 * adot0 + b1 * adot1,
            b.s2 + sa2 * b.d1sq * k2,
        ]);
    }
    Ok(out)
}
