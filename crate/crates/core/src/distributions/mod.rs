//! Normal-Inverse-Gamma evidence and its Student's t predictive.
//!
//! A [`NigParams`] value places a Normal-Inverse-Gamma prior over the mean and
//! variance of a Gaussian likelihood. Integrating both out gives a Student's t
//! predictive, available in closed form through [`NigParams::to_student_t`].
//! The [`quadrature`] submodule integrates the same marginal numerically and
//! serves as an independent check of the closed form.
//!
//! The Student's t scale `sigma` is a *squared* scale: the density kernel is
//! `(1 + (y − u)² / (v·sigma))`, so the variance is `sigma · v / (v − 2)`.

pub mod quadrature;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::ln_gamma;

pub use quadrature::{nig_marginal_pdf_quadrature, QuadratureSpec};

/// Evidential parameters (γ, δ, α, β) for one scalar target.
///
/// γ is the location, δ scales the precision of the mean, and (α, β) are the
/// shape and rate of the inverse-gamma prior on the variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNig")]
pub struct NigParams {
    gamma: f64,
    delta: f64,
    alpha: f64,
    beta: f64,
}

#[derive(Deserialize)]
struct RawNig {
    gamma: f64,
    delta: f64,
    alpha: f64,
    beta: f64,
}

impl TryFrom<RawNig> for NigParams {
    type Error = Error;

    fn try_from(raw: RawNig) -> Result<Self> {
        NigParams::new(raw.gamma, raw.delta, raw.alpha, raw.beta)
    }
}

impl NigParams {
    /// Requires a finite γ, δ > 0, α > 1 and β > 0.
    pub fn new(gamma: f64, delta: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!("gamma must be finite, got {gamma}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta must be > 0, got {delta}")));
        }
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be > 1, got {alpha}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {beta}")));
        }
        Ok(Self { gamma, delta, alpha, beta })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Aleatoric uncertainty, E[σ²] = β / (α − 1).
    pub fn aleatoric(&self) -> f64 {
        self.beta / (self.alpha - 1.0)
    }

    /// Epistemic uncertainty, Var[μ] = β / (δ(α − 1)).
    pub fn epistemic(&self) -> f64 {
        self.aleatoric() / self.delta
    }

    /// Closed-form marginal likelihood as a Student's t:
    /// location γ, scale β(1 + δ)/(δα), 2α degrees of freedom.
    pub fn to_student_t(&self) -> StudentT {
        StudentT {
            u: self.gamma,
            sigma: self.beta * (1.0 + self.delta) / (self.delta * self.alpha),
            v: 2.0 * self.alpha,
        }
    }
}

/// Free-function form of [`NigParams::aleatoric`].
pub fn nig_aleatoric(p: &NigParams) -> f64 {
    p.aleatoric()
}

/// Free-function form of [`NigParams::epistemic`].
pub fn nig_epistemic(p: &NigParams) -> f64 {
    p.epistemic()
}

/// Free-function form of [`NigParams::to_student_t`].
pub fn nig_to_student_t(p: &NigParams) -> StudentT {
    p.to_student_t()
}

/// Univariate Student's t with location `u`, squared scale `sigma` and
/// `v > 2` degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStudentT")]
pub struct StudentT {
    u: f64,
    sigma: f64,
    v: f64,
}

#[derive(Deserialize)]
struct RawStudentT {
    u: f64,
    sigma: f64,
    v: f64,
}

impl TryFrom<RawStudentT> for StudentT {
    type Error = Error;

    fn try_from(raw: RawStudentT) -> Result<Self> {
        StudentT::new(raw.u, raw.sigma, raw.v)
    }
}

impl StudentT {
    /// Requires a finite location, `sigma > 0` and `v > 2`.
    pub fn new(u: f64, sigma: f64, v: f64) -> Result<Self> {
        if !u.is_finite() {
            return Err(Error::InvalidParameter(format!("location must be finite, got {u}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("scale must be > 0, got {sigma}")));
        }
        if !(v > 2.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "degrees of freedom must be > 2, got {v}"
            )));
        }
        Ok(Self { u, sigma, v })
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    pub fn pdf(&self, y: f64) -> f64 {
        let v = self.v;
        let norm = (ln_gamma(0.5 * (v + 1.0)) - ln_gamma(0.5 * v)).exp() / (v * PI * self.sigma).sqrt();
        let z = (y - self.u) * (y - self.u) / (v * self.sigma);
        norm * (1.0 + z).powf(-0.5 * (v + 1.0))
    }

    pub fn ln_pdf(&self, y: f64) -> f64 {
        let v = self.v;
        ln_gamma(0.5 * (v + 1.0))
            - ln_gamma(0.5 * v)
            - 0.5 * (v * PI * self.sigma).ln()
            - 0.5 * (v + 1.0) * ln1p_square((y - self.u) / (v * self.sigma).sqrt())
    }

    /// `sigma · v / (v − 2)`.
    pub fn variance(&self) -> f64 {
        self.sigma * self.v / (self.v - 2.0)
    }
}

/// ln(1 + z²) without overflowing for huge |z|.
pub(crate) fn ln1p_square(z: f64) -> f64 {
    let a = z.abs();
    if a > 1e150 {
        2.0 * a.ln() + (1.0 / (a * a)).ln_1p()
    } else {
        (a * a).ln_1p()
    }
}

pub fn student_t_pdf(st: &StudentT, y: f64) -> f64 {
    st.pdf(y)
}

pub fn student_t_logpdf(st: &StudentT, y: f64) -> f64 {
    st.ln_pdf(y)
}

pub fn student_t_variance(st: &StudentT) -> f64 {
    st.variance()
}
