//! Norms of equivariant differences, power-law fits and concentration-scale detection.
//!
//! Norms are taken on the ambient R^3 (or C) components. For an equivariant map the
//! angular derivative is controlled by the rho^{-1} weights, so the families
//! ||rho^{-l} d_rho^k f|| with k + l = j stand in for the order-j Sobolev seminorm.

use std::collections::BTreeMap;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DiffOp, Quadrature, RadialGrid};
use crate::sphere::SphereField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub values: BTreeMap<String, f64>,
    pub rmin: f64,
    pub rmax: f64,
    pub nodes: usize,
    pub t: Option<f64>,
}

impl NormReport {
    pub fn get(&self, key: &str) -> f64 {
        self.values.get(key).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub exponent: f64,
    pub prefactor: f64,
    /// Max relative deviation of the samples from the fitted law.
    pub residual: f64,
    pub window: (f64, f64),
}

/// Which norms to include beyond the basic families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormWeights {
    /// Highest total order k + l (at most 3).
    pub max_order: usize,
    /// Also compute ||<x> f||.
    pub weighted: bool,
}

impl Default for NormWeights {
    fn default() -> Self {
        NormWeights { max_order: 3, weighted: true }
    }
}

/// Norm families of a vector of complex components sampled on `grid`.
///
/// Keys: `L2`, `H1`..`H3` (inhomogeneous), `dH1`..`dH3` (seminorms), `k{k}l{l}` and
/// `sup_k{k}l{l}` for ||rho^{-l} d^k f|| in L^2(rho drho) and sup, and `weighted_L2`.
pub fn sobolev_norms(grid: &RadialGrid, comps: &[Vec<C64>], w: NormWeights, t: Option<f64>) -> Result<NormReport> {
    if w.max_order > 3 {
        return Err(Error::OutOfRange(format!("order {} beyond stored derivatives", w.max_order)));
    }
    let d = DiffOp::new(grid, 4)?;
    let q = Quadrature::new(grid, 4)?;
    let r = grid.nodes();
    // derivs[c][k] = d^k comps[c]
    let derivs: Vec<Vec<Vec<C64>>> = comps
        .iter()
        .map(|f| {
            let mut out = vec![f.clone()];
            for _ in 0..w.max_order {
                let next = d.dr(out.last().unwrap());
                out.push(next);
            }
            out
        })
        .collect();
    let mut values = BTreeMap::new();
    let mut semis = vec![0.0; w.max_order + 1];
    for j in 0..=w.max_order {
        for k in 0..=j {
            let l = j - k;
            let mut dens = vec![0.0; r.len()];
            let mut sup = 0.0f64;
            for c in &derivs {
                for (i, &ri) in r.iter().enumerate() {
                    let v = c[k][i].norm_sqr() / ri.powi(2 * l as i32);
                    dens[i] += v;
                }
            }
            for x in &dens {
                sup = sup.max(x.sqrt());
            }
            let l2 = q.integral_rdr(&dens).max(0.0).sqrt();
            values.insert(format!("k{k}l{l}"), l2);
            values.insert(format!("sup_k{k}l{l}"), sup);
            semis[j] += l2 * l2;
        }
    }
    let mut acc = 0.0;
    for (j, s) in semis.iter().enumerate() {
        acc += s;
        if j == 0 {
            values.insert("L2".into(), s.sqrt());
        } else {
            values.insert(format!("dH{j}"), s.sqrt());
            values.insert(format!("H{j}"), acc.sqrt());
        }
    }
    if w.weighted {
        let dens: Vec<f64> = (0..r.len())
            .map(|i| comps.iter().map(|c| c[i].norm_sqr()).sum::<f64>() * (1.0 + r[i] * r[i]))
            .collect();
        values.insert("weighted_L2".into(), q.integral_rdr(&dens).max(0.0).sqrt());
    }
    for v in values.values() {
        if !v.is_finite() {
            return Err(Error::OutOfRange("non-finite norm".into()));
        }
    }
    Ok(NormReport { values, rmin: grid.rmin(), rmax: grid.rmax(), nodes: grid.len(), t })
}

/// Norms of the difference of two sphere fields on the same grid.
pub fn field_difference_norms(a: &SphereField, b: &SphereField, w: NormWeights, t: Option<f64>) -> Result<NormReport> {
    if a.grid() != b.grid() {
        return Err(Error::InvalidGrid("difference of fields on different grids".into()));
    }
    let comps: Vec<Vec<C64>> = (0..3)
        .map(|c| a.values().iter().zip(b.values()).map(|(x, y)| C64::new(x[c] - y[c], 0.0)).collect())
        .collect();
    sobolev_norms(a.grid(), &comps, w, t)
}

/// Least-squares fit of log(value) = log(prefactor) + exponent * log(t).
pub fn fit_power_law(samples: &[(f64, f64)]) -> Result<FitReport> {
    if samples.len() < 4 {
        return Err(Error::TooFewNodes(samples.len(), 4));
    }
    if samples.iter().any(|&(t, v)| !(t > 0.0) || !(v > 0.0)) {
        return Err(Error::NonPositive);
    }
    let tmin = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let tmax = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    if tmax / tmin < 10.0 * (1.0 - 1e-12) {
        return Err(Error::OutOfRange("power-law fit needs at least one decade".into()));
    }
    let n = samples.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = samples.iter().map(|&(t, v)| (t.ln(), v.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let exponent = sxy / sxx;
    let logc = my - exponent * mx;
    let residual = samples
        .iter()
        .map(|&(t, v)| (v / (logc + exponent * t.ln()).exp() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(FitReport { exponent, prefactor: logc.exp(), residual, window: (tmin, tmax) })
}

/// Radius where v3 changes sign, interpolated linearly in ln r.
pub fn detect_scale(f: &SphereField) -> Result<f64> {
    let v3 = f.component(2);
    let r = f.grid().nodes();
    let mut crossings = Vec::new();
    for i in 0..v3.len() - 1 {
        let (a, b) = (v3[i], v3[i + 1]);
        if a == 0.0 && i > 0 {
            continue;
        }
        if a == 0.0 {
            crossings.push(r[i]);
        } else if b == 0.0 || a * b < 0.0 {
            let s = a / (a - b);
            crossings.push((r[i].ln() + s * (r[i + 1].ln() - r[i].ln())).exp());
        }
    }
    if crossings.len() != 1 {
        return Err(Error::AmbiguousScale(crossings.len()));
    }
    Ok(crossings[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::harmonic_profile_scaled;
    use crate::sphere::SphereField;

    #[test]
    fn zero_field_has_zero_norms() {
        let g = RadialGrid::geometric(1e-3, 1e3, 200).unwrap();
        let z = vec![vec![C64::default(); g.len()]; 3];
        let rep = sobolev_norms(&g, &z, NormWeights::default(), None).unwrap();
        assert!(rep.values.values().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_gaussian_oracle() {
        let g = RadialGrid::geometric(1e-4, 20.0, 1200).unwrap();
        let f: Vec<C64> = g.nodes().iter().map(|&r| C64::new(r * (-r * r / 2.0).exp(), 0.0)).collect();
        let rep = sobolev_norms(&g, &[f], NormWeights::default(), None).unwrap();
        assert!((rep.get("k0l1") - 0.5f64.sqrt()).abs() < 1e-8, "{}", rep.get("k0l1"));
    }

    #[test]
    fn dilation_scaling() {
        // f(lambda r): Hdot^1 invariant, L^2(r dr) scales by 1/lambda.
        let g = RadialGrid::geometric(1e-5, 1e3, 3000).unwrap();
        let bump = |lam: f64| -> Vec<Vec<C64>> {
            vec![g.nodes().iter().map(|&r| (lam * r).powi(2) * (-(lam * r).powi(2)).exp()).map(|x| C64::new(x, 0.0)).collect()]
        };
        let w = NormWeights { max_order: 1, weighted: false };
        let n1 = sobolev_norms(&g, &bump(1.0), w, None).unwrap();
        let n2 = sobolev_norms(&g, &bump(3.0), w, None).unwrap();
        assert!((n1.get("dH1") / n2.get("dH1") - 1.0).abs() < 1e-8);
        assert!((n1.get("L2") / n2.get("L2") - 3.0).abs() < 1e-8);
    }

    #[test]
    fn exact_power_law() {
        let s: Vec<(f64, f64)> = (0..8).map(|i| 1e-4 * 2f64.powi(i)).map(|t| (t, 5.0 * t.powi(3))).collect();
        let fit = fit_power_law(&s).unwrap();
        assert!((fit.exponent - 3.0).abs() < 1e-10);
        assert!((fit.prefactor - 5.0).abs() < 1e-8);
    }

    #[test]
    fn log_polluted_power_law() {
        let s: Vec<(f64, f64)> =
            (0..9).map(|i| 1e-4 * 10f64.powf(i as f64 / 4.0)).map(|t| (t, t.powi(3) * (1.0 + t.ln().abs()))).collect();
        let fit = fit_power_law(&s).unwrap();
        assert!((fit.exponent - 3.0).abs() < 0.3);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert_eq!(fit_power_law(&[(1.0, 1.0), (2.0, -1.0), (5.0, 1.0), (10.0, 1.0)]), Err(Error::NonPositive));
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 1.0), (3.0, 1.0), (4.0, 1.0)]).is_err());
    }

    #[test]
    fn scale_of_dilated_profile() {
        let g = RadialGrid::geometric(1e-4, 1e4, 2048).unwrap();
        let f = harmonic_profile_scaled(1, 8.0, &g).unwrap();
        assert!((detect_scale(&f).unwrap() - 0.125).abs() < 1e-6);
        let k = SphereField::constant(&g, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(detect_scale(&k), Err(Error::AmbiguousScale(0)));
    }

    use proptest::prelude::*;
    proptest! {
        #[test]
        fn fit_stable_under_noise(p in -3.0..5.0f64, seed in 0u64..1000) {
            let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let s: Vec<(f64, f64)> = (0..10).map(|i| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let u = (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                let t = 1e-3 * 10f64.powf(i as f64 / 4.5);
                (t, t.powf(p) * (1.0 + 2e-8 * u))
            }).collect();
            let fit = fit_power_law(&s).unwrap();
            prop_assert!((fit.exponent - p).abs() < 1e-6);
        }
    }
}
