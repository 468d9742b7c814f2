//! Truncated expansions y^shift * sum_k sum_l c[k][l] y^{a+2k} (ln y)^l.
//!
//! The lattice a + 2k is real; complex exponents ride along in `shift`. Series anchored
//! at zero are complete from the bottom row up; series anchored at infinity are
//! complete from the top row down. Arithmetic respects that direction when truncating.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRIM: f64 = 1e-14;
const EQ_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    Zero,
    Infinity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogPowerSeries {
    a: f64,
    shift: C64,
    anchor: Anchor,
    /// c[k][l]; every row has the same length lmax + 1.
    c: Vec<Vec<C64>>,
}

fn lattice_offset(a1: f64, a2: f64) -> Result<i64> {
    let d = (a1 - a2) / 2.0;
    if (d - d.round()).abs() > 1e-12 {
        return Err(Error::LatticeMismatch(a1, a2));
    }
    Ok(d.round() as i64)
}

impl LogPowerSeries {
    /// Builds and canonicalizes; rows are padded to a common log depth.
    pub fn new(a: f64, anchor: Anchor, coeffs: Vec<Vec<C64>>) -> Self {
        let lmax = coeffs.iter().map(|r| r.len()).max().unwrap_or(1).max(1);
        let c = coeffs
            .into_iter()
            .map(|mut r| {
                r.resize(lmax, C64::default());
                r
            })
            .collect();
        let mut s = LogPowerSeries { a, shift: C64::default(), anchor, c };
        s.canonicalize();
        s
    }

    /// Real-coefficient convenience constructor without logs.
    pub fn from_real(a: f64, anchor: Anchor, coeffs: &[f64]) -> Self {
        Self::new(a, anchor, coeffs.iter().map(|&x| vec![C64::new(x, 0.0)]).collect())
    }

    pub fn with_shift(mut self, shift: C64) -> Self {
        self.shift = shift;
        self
    }

    pub fn base(&self) -> f64 {
        self.a
    }
    pub fn shift(&self) -> C64 {
        self.shift
    }
    pub fn anchor(&self) -> Anchor {
        self.anchor
    }
    /// Number of lattice rows (truncation order K).
    pub fn order(&self) -> usize {
        self.c.len()
    }
    pub fn log_depth(&self) -> usize {
        self.c.first().map_or(0, |r| r.len().saturating_sub(1))
    }
    pub fn top(&self) -> f64 {
        self.a + 2.0 * (self.c.len() as f64 - 1.0)
    }
    pub fn coeffs(&self) -> &[Vec<C64>] {
        &self.c
    }

    /// Coefficient of y^e (ln y)^l; zero when off the stored window.
    pub fn coeff_at(&self, e: f64, l: usize) -> C64 {
        let k = (e - self.a) / 2.0;
        if (k - k.round()).abs() > 1e-9 || k.round() < 0.0 {
            return C64::default();
        }
        self.c.get(k.round() as usize).and_then(|r| r.get(l)).copied().unwrap_or_default()
    }

    /// Whether y^e lies in the window where the series is known.
    pub fn knows(&self, e: f64) -> bool {
        match self.anchor {
            Anchor::Zero => e <= self.top() + 1e-9,
            Anchor::Infinity => e >= self.a - 1e-9,
        }
    }

    /// Zeroes coefficients below `TRIM` and drops all-zero trailing log columns.
    fn canonicalize(&mut self) {
        for r in &mut self.c {
            for x in r.iter_mut() {
                if x.norm() < TRIM {
                    *x = C64::default();
                }
            }
        }
        let mut lmax = self.log_depth();
        while lmax > 0 && self.c.iter().all(|r| r[lmax] == C64::default()) {
            lmax -= 1;
        }
        for r in &mut self.c {
            r.truncate(lmax + 1);
        }
    }

    /// Rows stripped of leading/trailing zero rows, with the base of the first kept row.
    fn stripped(&self) -> (f64, Vec<Vec<C64>>) {
        let z = |r: &Vec<C64>| r.iter().all(|x| *x == C64::default());
        let first = self.c.iter().position(|r| !z(r));
        match first {
            None => (0.0, Vec::new()),
            Some(f) => {
                let last = self.c.iter().rposition(|r| !z(r)).unwrap();
                (self.a + 2.0 * f as f64, self.c[f..=last].to_vec())
            }
        }
    }

    /// Equality of canonical forms within 1e-12.
    pub fn approx_eq(&self, other: &Self) -> bool {
        if (self.shift - other.shift).norm() > EQ_TOL {
            return false;
        }
        let (a1, r1) = self.stripped();
        let (a2, r2) = other.stripped();
        if r1.is_empty() || r2.is_empty() {
            return r1.is_empty() && r2.is_empty();
        }
        if (a1 - a2).abs() > 1e-12 || r1.len() != r2.len() {
            return false;
        }
        r1.iter().zip(&r2).all(|(x, y)| {
            let n = x.len().max(y.len());
            (0..n).all(|l| (x.get(l).copied().unwrap_or_default() - y.get(l).copied().unwrap_or_default()).norm() <= EQ_TOL)
        })
    }

    pub fn scale(&self, s: C64) -> Self {
        let c = self.c.iter().map(|r| r.iter().map(|x| x * s).collect()).collect();
        LogPowerSeries::new(self.a, self.anchor, c).with_shift(self.shift)
    }

    pub fn add(&self, o: &Self) -> Result<Self> {
        if self.anchor != o.anchor || (self.shift - o.shift).norm() > EQ_TOL {
            return Err(Error::LatticeMismatch(self.a, o.a));
        }
        lattice_offset(self.a, o.a)?;
        let (lo, hi) = match self.anchor {
            Anchor::Zero => (self.a.min(o.a), self.top().min(o.top())),
            Anchor::Infinity => (self.a.max(o.a), self.top().max(o.top())),
        };
        let rows = if hi < lo { 0 } else { ((hi - lo) / 2.0).round() as usize + 1 };
        let lmax = self.log_depth().max(o.log_depth());
        let c = (0..rows)
            .map(|k| {
                let e = lo + 2.0 * k as f64;
                (0..=lmax).map(|l| self.coeff_at(e, l) + o.coeff_at(e, l)).collect()
            })
            .collect();
        Ok(LogPowerSeries::new(lo, self.anchor, c).with_shift(self.shift))
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        self.add(&o.scale(C64::new(-1.0, 0.0)))
    }

    /// Product truncated to min(K1, K2) rows in the known direction.
    ///
    /// Factors may sit on lattices of different parity (odd times even is common);
    /// only integer-spaced bases are required.
    pub fn mul(&self, o: &Self) -> Result<Self> {
        if self.anchor != o.anchor {
            return Err(Error::LatticeMismatch(self.a, o.a));
        }
        let d = self.a - o.a;
        if (d - d.round()).abs() > 1e-12 {
            return Err(Error::LatticeMismatch(self.a, o.a));
        }
        let k = self.order().min(o.order());
        let base = match self.anchor {
            Anchor::Zero => self.a + o.a,
            Anchor::Infinity => self.top() + o.top() - 2.0 * (k as f64 - 1.0),
        };
        let lmax = self.log_depth() + o.log_depth();
        let mut c = vec![vec![C64::default(); lmax + 1]; k];
        for (i, ri) in self.c.iter().enumerate() {
            for (j, rj) in o.c.iter().enumerate() {
                let e = self.a + o.a + 2.0 * (i + j) as f64;
                let kk = ((e - base) / 2.0).round();
                if kk < 0.0 || kk as usize >= k {
                    continue;
                }
                let row = &mut c[kk as usize];
                for (l1, x) in ri.iter().enumerate() {
                    for (l2, y) in rj.iter().enumerate() {
                        row[l1 + l2] += x * y;
                    }
                }
            }
        }
        Ok(LogPowerSeries::new(base, self.anchor, c).with_shift(self.shift + o.shift))
    }

    /// Term-wise d/dy, including the complex shift in each exponent.
    pub fn differentiate(&self) -> Result<Self> {
        if self.order() == 0 {
            return Err(Error::OrderDeficit("differentiate needs at least one row".into()));
        }
        let lmax = self.log_depth();
        let c = self
            .c
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let p = self.shift + self.a + 2.0 * k as f64;
                (0..=lmax)
                    .map(|l| {
                        let mut v = p * r[l];
                        if l < lmax {
                            v += (l + 1) as f64 * r[l + 1];
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        Ok(LogPowerSeries::new(self.a - 1.0, self.anchor, c).with_shift(self.shift))
    }

    pub fn evaluate(&self, y: f64) -> C64 {
        let ly = y.ln();
        let mut acc = C64::default();
        for (k, r) in self.c.iter().enumerate() {
            let mut lp = 1.0;
            let mut row = C64::default();
            for x in r {
                row += x * lp;
                lp *= ly;
            }
            acc += row * y.powf(self.a + 2.0 * k as f64);
        }
        if self.shift != C64::default() {
            acc *= (self.shift * ly).exp();
        }
        acc
    }
}

/// One basis monomial y^exponent (ln y)^log_power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub exponent: C64,
    pub log_power: u32,
}

impl Monomial {
    pub fn real(e: f64, l: u32) -> Self {
        Monomial { exponent: C64::new(e, 0.0), log_power: l }
    }
    pub fn eval(&self, y: f64) -> C64 {
        let ly = y.ln();
        (self.exponent * ly).exp() * ly.powi(self.log_power as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coeffs: Vec<C64>,
    /// max |model - sample| / |sample| over the window.
    pub residual: f64,
    /// Condition number of the column-normalized design matrix.
    pub condition: f64,
}

pub const MAX_CONDITION: f64 = 1e8;

/// Least squares against arbitrary basis functions.
pub fn fit_basis(samples: &[(f64, C64)], basis: &[&dyn Fn(f64) -> C64]) -> Result<FitResult> {
    let (m, n) = (samples.len(), basis.len());
    if m < n || n == 0 {
        return Err(Error::TooFewNodes(m, n));
    }
    // Rows scaled by 1/|sample| so the fit is relative across decades.
    let wts: Vec<f64> = samples.iter().map(|(_, v)| 1.0 / v.norm().max(1e-300)).collect();
    let mut a = DMatrix::<C64>::zeros(m, n);
    let mut b = nalgebra::DVector::<C64>::zeros(m);
    for (i, &(y, v)) in samples.iter().enumerate() {
        for (j, f) in basis.iter().enumerate() {
            a[(i, j)] = f(y) * wts[i];
        }
        b[i] = v * wts[i];
    }
    let col_scale: Vec<f64> = (0..n).map(|j| a.column(j).norm().max(1e-300)).collect();
    for (j, s) in col_scale.iter().enumerate() {
        a.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(Error::FitWindowTooNarrow(condition));
    }
    let x = svd.solve(&b, 0.0).map_err(|e| Error::OutOfRange(e.to_string()))?;
    let coeffs: Vec<C64> = x.iter().zip(&col_scale).map(|(c, s)| c / s).collect();
    let residual = samples
        .iter()
        .map(|&(y, v)| {
            let model: C64 = basis.iter().zip(&coeffs).map(|(f, c)| f(y) * c).sum();
            (model - v).norm() / v.norm().max(1e-300)
        })
        .fold(0.0, f64::max);
    Ok(FitResult { coeffs, residual, condition })
}

/// Least squares against a monomial template.
pub fn fit_series(samples: &[(f64, C64)], template: &[Monomial]) -> Result<FitResult> {
    let fs: Vec<Box<dyn Fn(f64) -> C64>> = template.iter().map(|m| {
        let m = *m;
        Box::new(move |y: f64| m.eval(y)) as Box<dyn Fn(f64) -> C64>
    }).collect();
    let refs: Vec<&dyn Fn(f64) -> C64> = fs.iter().map(|b| b.as_ref()).collect();
    fit_basis(samples, &refs)
}

/// Coefficients alpha(j, i, l) of sum_j T_j(t) (ln y - nu ln t)^l y^{e(i)} obtained by
/// substituting rho = y t^{-nu} into sum_k t^{2 nu k} w^k(rho).
///
/// On the odd lattice e(i) = 2i - 1 and T_j = t^{nu(2j+1)}; on the even lattice
/// e(i) = 2i and T_j = t^{2 nu j}. In both cases the term c rho^{e} (ln rho)^l of w^k lands
/// at j = k - i, since ln rho = ln y - nu ln t is kept intact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReexpansionTable {
    pub odd: bool,
    pub entries: BTreeMap<(usize, i32, usize), C64>,
}

impl ReexpansionTable {
    pub fn get(&self, j: usize, i: i32, l: usize) -> Result<C64> {
        self.entries
            .get(&(j, i, l))
            .copied()
            .ok_or_else(|| Error::OrderDeficit(format!("alpha({j},{i},{l}) not determined by the supplied orders")))
    }

    /// Evaluates the regrouped expansion at (t, y), for consistency checks.
    pub fn evaluate(&self, nu: f64, t: f64, y: f64) -> C64 {
        let ll = y.ln() - nu * t.ln();
        self.entries
            .iter()
            .map(|(&(j, i, l), &c)| {
                let (tw, e) = if self.odd {
                    (t.powf(nu * (2 * j + 1) as f64), 2 * i - 1)
                } else {
                    (t.powf(2.0 * nu * j as f64), 2 * i)
                };
                c * tw * ll.powi(l as i32) * y.powi(e)
            })
            .sum()
    }
}

/// Regroups the infinity expansions of the inner layers (index k carries t^{2 nu k}).
/// Every requested alpha(j, i, l) with j <= jmax, i <= imax, l <= lmax(j) is filled or the
/// call fails with an order deficit.
pub fn reexpand_inner_to_selfsim(family: &[LogPowerSeries], jmax: usize, imax: i32) -> Result<ReexpansionTable> {
    let first = family.first().ok_or_else(|| Error::OrderDeficit("empty family".into()))?;
    let parity = first.base().rem_euclid(2.0);
    let odd = (parity - 1.0).abs() < 1e-9;
    for s in family {
        if s.anchor() != Anchor::Infinity {
            return Err(Error::OrderDeficit("inner tails must be expansions at infinity".into()));
        }
        lattice_offset(s.base(), first.base())?;
    }
    let mut entries = BTreeMap::new();
    for j in 0..=jmax {
        let lmax = if odd { 2 * j + 1 } else { 2 * j };
        for l in 0..=lmax {
            let imin = (l as f64 / 2.0 - j as f64).ceil() as i32;
            for i in imin..=imax {
                let k = j as i32 + i;
                if k < 0 {
                    continue;
                }
                let s = family.get(k as usize).ok_or_else(|| {
                    Error::OrderDeficit(format!("alpha({j},{i},{l}) needs inner layer {k}, have {}", family.len()))
                })?;
                let e = if odd { (2 * i - 1) as f64 } else { (2 * i) as f64 };
                if !s.knows(e) {
                    return Err(Error::OrderDeficit(format!("layer {k} tail not known down to exponent {e}")));
                }
                entries.insert((j, i, l), s.coeff_at(e, l));
            }
        }
    }
    Ok(ReexpansionTable { odd, entries })
}
