//! Activation registry: Linear, Tanh, ReLU, Swish, Leaky-ReLU and Hard-Tanh families.
//!
//! An [`Activation`] evaluates `raw(scale·x) − shift`. The shift is never user supplied;
//! it comes from [`center_activation`] (DEQ, joint fixed point with τ*) or [`center_at`]
//! (explicit layer, centered at a given input scale τ).

use serde::{Deserialize, Serialize};

use crate::error::{DeqError, Result};
use crate::gauss_quad;

/// Lipschitz constant of x·sigmoid(βx), independent of β.
pub const SWISH_LIPSCHITZ: f64 = 1.099_839_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Tanh,
    #[serde(alias = "ReLU", alias = "Relu")]
    Relu,
    Swish,
    #[serde(alias = "LeakyReLU", alias = "leakyrelu", alias = "l_relu")]
    LeakyRelu,
    #[serde(alias = "HardTanh", alias = "hardtanh", alias = "h_tanh")]
    HardTanh,
}

impl Family {
    pub fn is_odd(self) -> bool {
        matches!(self, Family::Linear | Family::Tanh | Family::HardTanh)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::Tanh => "tanh",
            Family::Relu => "relu",
            Family::Swish => "swish",
            Family::LeakyRelu => "leaky_relu",
            Family::HardTanh => "hard_tanh",
        }
    }
}

/// Config-file form of an activation: `{"family": "...", "params": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub family: Family,
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub family: Family,
    /// Family parameters: `(a, b)` for LeakyReLU, `(a, c)` for HardTanh, `(β, _)` for Swish.
    pub p0: f64,
    pub p1: f64,
    pub shift: f64,
    /// Input scaling applied before the raw nonlinearity (1 unless composed).
    pub scale: f64,
    pub lipschitz: f64,
}

impl Activation {
    pub fn new(family: Family, params: &[f64]) -> Result<Self> {
        let bad = |m: &str| Err(DeqError::InvalidActivation(format!("{}: {m}", family.name())));
        let (p0, p1) = match family {
            Family::Linear | Family::Tanh | Family::Relu => {
                if !params.is_empty() {
                    return bad("takes no parameters");
                }
                (0.0, 0.0)
            }
            Family::Swish => match params {
                [] => (1.0, 0.0),
                [beta] if beta.is_finite() && *beta > 0.0 => (*beta, 0.0),
                _ => return bad("expects a single positive beta"),
            },
            Family::LeakyRelu => match params {
                [a, b] if a.is_finite() && b.is_finite() && *a >= *b && *b >= 0.0 && *a > 0.0 => (*a, *b),
                _ => return bad("expects (a, b) with a >= b >= 0, a > 0"),
            },
            Family::HardTanh => match params {
                [a, c] if a.is_finite() && c.is_finite() && *a > 0.0 && *c >= 0.0 => (*a, *c),
                _ => return bad("expects (a, c) with a > 0, c >= 0"),
            },
        };
        let mut act = Activation { family, p0, p1, shift: 0.0, scale: 1.0, lipschitz: 1.0 };
        act.lipschitz = act.raw_lipschitz();
        Ok(act)
    }

    pub fn linear() -> Self {
        Self::new(Family::Linear, &[]).unwrap()
    }
    pub fn tanh() -> Self {
        Self::new(Family::Tanh, &[]).unwrap()
    }
    pub fn relu() -> Self {
        Self::new(Family::Relu, &[]).unwrap()
    }
    pub fn swish() -> Self {
        Self::new(Family::Swish, &[]).unwrap()
    }
    pub fn leaky_relu(a: f64, b: f64) -> Result<Self> {
        Self::new(Family::LeakyRelu, &[a, b])
    }
    pub fn hard_tanh(a: f64, c: f64) -> Result<Self> {
        Self::new(Family::HardTanh, &[a, c])
    }

    pub fn from_spec(spec: &ActivationSpec) -> Result<Self> {
        Self::new(spec.family, &spec.params)
    }

    pub fn spec(&self) -> ActivationSpec {
        let params = match self.family {
            Family::Linear | Family::Tanh | Family::Relu => vec![],
            Family::Swish => vec![self.p0],
            Family::LeakyRelu | Family::HardTanh => vec![self.p0, self.p1],
        };
        ActivationSpec { family: self.family, params }
    }

    /// Same activation with input scaled by `s` (lipschitz follows).
    pub fn with_scale(mut self, s: f64) -> Self {
        self.scale = s;
        self.lipschitz = self.raw_lipschitz();
        self
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    fn raw_lipschitz(&self) -> f64 {
        let l = match self.family {
            Family::Linear | Family::Tanh | Family::Relu => 1.0,
            Family::Swish => SWISH_LIPSCHITZ,
            Family::LeakyRelu | Family::HardTanh => self.p0,
        };
        (l * self.scale.abs()).max(f64::MIN_POSITIVE)
    }

    #[inline]
    fn raw_unscaled(&self, y: f64) -> f64 {
        match self.family {
            Family::Linear => y,
            Family::Tanh => y.tanh(),
            Family::Relu => y.max(0.0),
            Family::Swish => y / (1.0 + (-self.p0 * y).exp()),
            Family::LeakyRelu => {
                if y >= 0.0 {
                    self.p0 * y
                } else {
                    self.p1 * y
                }
            }
            Family::HardTanh => self.p0 * y.clamp(-self.p1, self.p1),
        }
    }

    #[inline]
    fn raw_deriv_unscaled(&self, y: f64) -> f64 {
        match self.family {
            Family::Linear => 1.0,
            Family::Tanh => {
                let t = y.tanh();
                1.0 - t * t
            }
            Family::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Swish => {
                let s = 1.0 / (1.0 + (-self.p0 * y).exp());
                s + self.p0 * y * s * (1.0 - s)
            }
            Family::LeakyRelu => {
                if y > 0.0 {
                    self.p0
                } else {
                    self.p1
                }
            }
            Family::HardTanh => {
                if y.abs() < self.p1 {
                    self.p0
                } else {
                    0.0
                }
            }
        }
    }

    /// The raw nonlinearity (no shift) at `x`.
    #[inline]
    pub fn raw(&self, x: f64) -> f64 {
        self.raw_unscaled(self.scale * x)
    }

    /// `raw(x) − shift`.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.raw(x) - self.shift
    }

    /// Pointwise derivative (right derivative at kinks).
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        self.scale * self.raw_deriv_unscaled(self.scale * x)
    }

    /// Points where the activation is not smooth, in ascending order.
    pub fn breakpoints(&self) -> Vec<f64> {
        if self.scale == 0.0 {
            return vec![];
        }
        match self.family {
            Family::Relu => vec![0.0],
            Family::LeakyRelu if self.p0 != self.p1 => vec![0.0],
            Family::HardTanh if self.p1 > 0.0 => {
                let c = self.p1 / self.scale.abs();
                vec![-c, c]
            }
            _ => vec![],
        }
    }

    pub fn is_smooth(&self) -> bool {
        self.breakpoints().is_empty()
    }
}

/// Centers `act` at input scale `tau`: the returned activation has E[φ(τξ)] = 0.
pub fn center_at(act: &Activation, tau: f64) -> Result<Activation> {
    if act.family.is_odd() {
        return Ok(act.with_shift(0.0));
    }
    let m0 = gauss_quad::expect_act(act, tau, gauss_quad::DEFAULT_NODES_1D, |_, raw, _| raw)?;
    Ok(act.with_shift(m0))
}

/// Joint fixed point on (shift, τ*) for a DEQ with parameters (σ_a, σ_b, τ0).
///
/// Returns the centered activation and τ*.
pub fn center_activation_with_tau(act: &Activation, sigma_a: f64, sigma_b: f64, tau0: f64) -> Result<(Activation, f64)> {
    let sa2 = sigma_a * sigma_a;
    let base = sigma_b * sigma_b * tau0 * tau0;
    if base <= 0.0 {
        return Err(DeqError::Config("sigma_b * tau0 must be positive".into()));
    }
    let odd = act.family.is_odd();
    let nodes = gauss_quad::DEFAULT_NODES_1D;
    let mut shift = 0.0;
    let mut tau = base.sqrt();
    let mut delta = f64::INFINITY;
    for _ in 0..10_000 {
        let mut sums = [0.0f64; 4];
        gauss_quad::for_each_gauss_node(&act.breakpoints_scaled(tau), nodes, |xi, w| {
            let r = act.raw(tau * xi);
            let h2 = xi * xi - 1.0;
            sums[0] += w * r;
            sums[1] += w * r * r;
            sums[2] += w * h2 * r * r;
            sums[3] += w * h2 * r;
        })?;
        let new_shift = if odd { 0.0 } else { sums[0] };
        let var = (sums[1] - new_shift * (2.0 * sums[0] - new_shift)).max(0.0);
        let f2 = (sums[2] - 2.0 * new_shift * sums[3]) / (tau * tau);
        if sa2 * f2 / 2.0 >= 1.0 {
            return Err(DeqError::AssumptionViolated(format!(
                "tau map expansive: sigma_a^2 E[(phi^2)''] / 2 = {} >= 1 at tau = {tau}",
                sa2 * f2 / 2.0
            )));
        }
        let new_tau = (sa2 * var + base).sqrt();
        delta = (new_shift - shift).abs().max((new_tau - tau).abs());
        shift = new_shift;
        tau = new_tau;
        if delta < 1e-12 {
            return Ok((act.with_shift(shift), tau));
        }
    }
    Err(DeqError::NoConvergence { what: "activation centering", iterations: 10_000, delta })
}

/// Centered activation for a DEQ with parameters (σ_a, σ_b, τ0).
pub fn center_activation(act: &Activation, sigma_a: f64, sigma_b: f64, tau0: f64) -> Result<Activation> {
    center_activation_with_tau(act, sigma_a, sigma_b, tau0).map(|(a, _)| a)
}

impl Activation {
    /// Breakpoints of `x ↦ φ(τx)`, i.e. in units of the standard normal variable.
    pub fn breakpoints_scaled(&self, tau: f64) -> Vec<f64> {
        self.breakpoints().into_iter().map(|b| b / tau).collect()
    }
}
