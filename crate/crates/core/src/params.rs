//! Model parameters and the scalings derived from them.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and expansion parameters.
///
/// `a1` is derived from `a2` (a1 + a2 = 1); `d` is a method, never a field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub a1: f64,
    pub a2: f64,
    pub nu: f64,
    pub alpha0: f64,
    pub n: usize,
    pub delta: f64,
    pub eps1: f64,
    pub eps2: f64,
}

impl Params {
    /// Validated constructor; `eps1` defaults to nu/2 when `None`.
    pub fn new(a2: f64, nu: f64, alpha0: f64, n: usize, delta: f64, eps1: Option<f64>, eps2: f64) -> Result<Self> {
        let p = Params { a1: 1.0 - a2, a2, nu, alpha0, n, delta, eps1: eps1.unwrap_or(nu / 2.0), eps2 };
        p.validate()?;
        Ok(p)
    }

    /// Reference point used throughout the acceptance suite.
    pub fn reference() -> Self {
        Params::new(0.5, 1.5, 0.0, 2, 0.5, None, 0.4).expect("reference parameters are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if !(self.a2 >= 0.0 && self.a2 <= 1.0) {
            return bad("a2 must lie in [0, 1]");
        }
        if (self.a1 + self.a2 - 1.0).abs() > 1e-14 {
            return bad("a1 + a2 must equal 1");
        }
        if !(self.nu > 1.0) {
            return bad("nu must exceed 1");
        }
        if self.n < 2 {
            return bad("N must be at least 2");
        }
        if !(self.eps2 > 0.0 && self.eps2 < 0.5) {
            return bad("eps2 must lie in (0, 1/2)");
        }
        if !(self.eps1 > 0.0 && self.eps1 < self.nu) {
            return bad("eps1 must lie in (0, nu)");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive");
        }
        if !self.alpha0.is_finite() {
            return bad("alpha0 must be finite");
        }
        Ok(())
    }

    /// Same parameters with the damping changed; a1 follows.
    pub fn with_a2(mut self, a2: f64) -> Result<Self> {
        self.a2 = a2;
        self.a1 = 1.0 - a2;
        self.validate()?;
        Ok(self)
    }

    pub fn with_n(mut self, n: usize) -> Result<Self> {
        self.n = n;
        self.validate()?;
        Ok(self)
    }

    /// d = alpha0 - i(1/2 + nu).
    pub fn d(&self) -> C64 {
        C64::new(self.alpha0, -(0.5 + self.nu))
    }

    /// A = a1 - i a2, the complex diffusion coefficient.
    pub fn a(&self) -> C64 {
        C64::new(self.a1, -self.a2)
    }

    /// Blowup scale lambda(t) = t^(-1/2 - nu).
    pub fn lambda(&self, t: f64) -> f64 {
        t.powf(-0.5 - self.nu)
    }

    /// Rotation angle alpha(t) = alpha0 ln t.
    pub fn alpha(&self, t: f64) -> f64 {
        self.alpha0 * t.ln()
    }

    /// mu_j = -alpha0 + i nu (2j+1).
    pub fn mu(&self, j: usize) -> C64 {
        C64::new(-self.alpha0, self.nu * (2 * j + 1) as f64)
    }

    pub fn mu_tilde(&self, j: usize) -> C64 {
        self.mu(j) / self.a()
    }

    /// kappa_j = -i/(4A) - mu_tilde_j / 2.
    pub fn kappa(&self, j: usize) -> C64 {
        -C64::i() / (4.0 * self.a()) - self.mu_tilde(j) / 2.0
    }
}
