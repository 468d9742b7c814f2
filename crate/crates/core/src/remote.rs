//! Remote region r ~ 1: w = f0 + chi with f0 = theta(r/delta) sum beta0(j,l) (ln r)^l r^{p_j}.
//!
//! The correction is carried as chi = sum t^{2 nu q + k} e^{-i m Phi} (ln r - ln t)^s g_{k,q,m,s}.
//! Every source of a cell with m != 0 or q > 0 is a product containing a first-layer
//! oscillatory cell g_{1,2j+1,-1,s} = beta1(j,s)(...). The self-similar far field hands
//! over beta1 = 0 whenever the oscillatory part is below its resolution (always for
//! a2 > 0, where it is exponentially small in 1/t here), and then only g_k := g_{k,0,0,0}
//! survive. They solve
//!
//! k g_k = -i A [t^{k-1} coefficient of (-Delta + 1/r^2) w + G(w)],   w = f0 + sum t^k g_k,
//!
//! which is evaluated exactly on Taylor jets at any set of radii.

use std::collections::BTreeMap;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::algebra::{Algebra, Jets, TauSeries};
use crate::diagnostics::{fit_power_law, FitReport, NormReport};
use crate::error::{Error, Result};
use crate::grid::{Quadrature, RadialGrid};
use crate::params::Params;
use crate::selfsim::{smooth_exponent, SelfSimFamily};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Storage grid is [rmin_factor * delta, rmax].
    pub rmin_factor: f64,
    pub rmax: f64,
    pub per_decade: f64,
    /// Points per decade for residual norms.
    pub norm_per_decade: f64,
    /// Taylor coefficients carried beyond the 2N consumed by the recursion.
    pub jet_margin: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig { rmin_factor: 1e-6, rmax: 10.0, per_decade: 60.0, norm_per_decade: 400.0, jet_margin: 8 }
    }
}

/// psi(x) = exp(-1/x) for x > 0.
fn psi(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// Smooth cutoff: 1 on [0, 1], 0 on [2, inf), psi(2-x)/(psi(2-x)+psi(x-1)) in between.
pub fn cutoff(xi: f64) -> f64 {
    let xi = xi.abs();
    if xi <= 1.0 {
        1.0
    } else if xi >= 2.0 {
        0.0
    } else {
        let (a, b) = (psi(2.0 - xi), psi(xi - 1.0));
        a / (a + b)
    }
}

/// theta(r / scale) as jets.
pub fn cutoff_jets(at: &[f64], len: usize, scale: f64) -> Jets {
    let xi = Jets::coord(at, len).scale_re(1.0 / scale);
    let one = Jets::constant(at, len, C64::new(1.0, 0.0));
    let inner = xi.masked(|r| r / scale > 1.0 && r / scale < 2.0, |x| {
        let one = Jets::constant(x.points(), x.len(), C64::new(1.0, 0.0));
        let a = one.scale_re(2.0).sub(x).recip().scale_re(-1.0).exp();
        let b = x.sub(&one).recip().scale_re(-1.0).exp();
        a.mul(&a.add(&b).recip())
    });
    let below = one.masked(|r| r / scale <= 1.0, |j| j.clone());
    below.add(&inner)
}

/// f0 = theta(r/delta) sum_{j<=N} sum_l beta0(j,l) (ln r)^l r^{p_j} as jets.
pub fn f0_jets(p: &Params, beta0: &[Vec<C64>], at: &[f64], len: usize) -> Jets {
    let profile = Jets::constant(at, len, C64::default()).masked(|r| r < 2.0 * p.delta, |x| {
        let pts = x.points();
        let lg = Jets::log(pts, len);
        let mut sum = x.zero();
        for (j, row) in beta0.iter().enumerate() {
            let pw = Jets::power(pts, len, smooth_exponent(p, j));
            let mut poly = x.zero();
            for b in row.iter().rev() {
                poly = poly.mul(&lg).add(&Jets::constant(pts, len, *b));
            }
            sum = sum.add(&poly.mul(&pw));
        }
        sum.mul(&cutoff_jets(pts, len, p.delta))
    });
    profile
}

/// G(w) = 2 w-bar (w_r^2 - w^2/r^2) / (1 + |w|^2) on jets.
pub fn nonlinearity_jets(w: &Jets) -> Jets {
    let wb = w.conj();
    let wr = w.dr();
    let one = Jets::constant(w.points(), w.len(), C64::new(1.0, 0.0));
    let den = one.add(&wb.mul(w)).recip();
    wb.mul(&wr.mul(&wr).sub(&w.mul(w).div_r().div_r())).mul(&den).scale_re(2.0)
}

/// The potentials of the linearisation about f0 and the source D0.
#[derive(Debug, Clone)]
pub struct Potentials {
    pub v0: Jets,
    pub v1: Jets,
    pub v2: Jets,
    pub d0: Jets,
}

pub fn potentials(f0: &Jets) -> Potentials {
    let pts = f0.points();
    let len = f0.len();
    let one = Jets::constant(pts, len, C64::new(1.0, 0.0));
    let fb = f0.conj();
    let fr = f0.dr();
    let m2 = fb.mul(f0);
    let inv = one.add(&m2).recip();
    let inv2 = inv.mul(&inv);
    let v0 = fb.mul(&fr).mul(&inv).scale_re(4.0);
    let v1 = m2
        .mul(&one.scale_re(2.0).add(&m2))
        .div_r()
        .div_r()
        .mul(&inv2)
        .scale_re(-2.0)
        .sub(&fb.mul(&fb).mul(&fr).mul(&fr).mul(&inv2).scale_re(2.0));
    let v2 = fr.mul(&fr).sub(&f0.mul(f0).div_r().div_r()).mul(&inv2).scale_re(2.0);
    let d0 = f0.lap().scale_re(-1.0).add(&f0.div_r().div_r()).add(&nonlinearity_jets(f0));
    Potentials { v0, v1, v2, d0 }
}

/// g_0 = f0, g_1, ..., g_n at the points of `f0`.
pub fn taylor_layers(f0: &Jets, a: C64, n: usize) -> Vec<Jets> {
    let pts = f0.points().to_vec();
    let one = Jets::constant(&pts, f0.len(), C64::new(1.0, 0.0));
    let inv0 = one.add(&f0.conj().mul(f0)).recip();
    let mut g = vec![f0.clone()];
    for k in 1..=n {
        let mut w = TauSeries::zeros(f0, k - 1);
        for (i, gi) in g.iter().enumerate() {
            w.c[i] = gi.clone();
        }
        let wb = w.conj();
        let wr = w.dr();
        let mut d = wb.mul(&w);
        d.c[0] = d.c[0].zero();
        let den = TauSeries::inverse_about(&inv0, &d);
        let gw = wb.mul(&wr.mul(&wr).sub(&w.mul(&w).div_r().div_r())).mul(&den).scale_re(2.0);
        let f = w.lap().scale_re(-1.0).add(&w.div_r().div_r()).add(&gw);
        g.push(f.c[k - 1].scale(-C64::i() * a / k as f64));
    }
    g
}

/// Cells of the remote ansatz: k >= 1, q >= 0, 0 <= s <= q, q - m even,
/// -min(k,q) <= m <= min(k-1,q).
pub fn in_omega(k: usize, q: usize, m: i32, s: usize) -> bool {
    let (ki, qi) = (k as i32, q as i32);
    k >= 1 && s <= q && (qi - m).rem_euclid(2) == 0 && -ki.min(qi) <= m && m <= (ki - 1).min(qi)
}

/// Layers g_0..g_N evaluated once at fixed radii, for repeated evaluation in t.
#[derive(Debug, Clone)]
pub struct RemoteLayers {
    pub at: Vec<f64>,
    pub g: Vec<Vec<C64>>,
}

impl RemoteLayers {
    /// w_rem(r, t) = f0 + sum_{k<=N} t^k g_k at the stored radii.
    pub fn eval(&self, t: f64) -> Vec<C64> {
        (0..self.at.len())
            .map(|i| {
                let mut acc = C64::default();
                for gk in self.g.iter().rev() {
                    acc = acc * t + gk[i];
                }
                acc
            })
            .collect()
    }

    /// Exact d/dt of `eval`.
    pub fn eval_dt(&self, t: f64) -> Vec<C64> {
        (0..self.at.len())
            .map(|i| {
                let mut acc = C64::default();
                for (k, gk) in self.g.iter().enumerate().skip(1).rev() {
                    acc = acc * t + gk[i] * k as f64;
                }
                acc
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RemoteFamily {
    pub params: Params,
    pub config: RemoteConfig,
    /// beta0[j][l], j <= N, l <= 2j+1.
    pub beta0: Vec<Vec<C64>>,
    pub beta1: Vec<Vec<C64>>,
    /// True when some beta1 is nonzero: its sector is not propagated past the first layer.
    pub oscillatory_dropped: bool,
    pub rgrid: RadialGrid,
    pub f0: Vec<C64>,
    pub phi: Vec<f64>,
    g: BTreeMap<(usize, usize, i32, usize), Vec<C64>>,
}

impl RemoteFamily {
    /// Reads beta0, beta1 for j <= N from the self-similar far field.
    pub fn build(p: &Params, ss: &SelfSimFamily, cfg: &RemoteConfig) -> Result<Self> {
        if ss.depth() < p.n {
            return Err(Error::OrderDeficit(format!("remote needs self-similar levels up to {}, have {}", p.n, ss.depth())));
        }
        let beta0 = (0..=p.n).map(|j| (0..=2 * j + 1).map(|l| ss.beta0(j, l)).collect()).collect();
        let beta1 = (0..=p.n).map(|j| (0..=2 * j + 1).map(|l| ss.beta1(j, l)).collect()).collect();
        Self::from_coefficients(p, beta0, beta1, cfg)
    }

    pub fn from_coefficients(p: &Params, beta0: Vec<Vec<C64>>, beta1: Vec<Vec<C64>>, cfg: &RemoteConfig) -> Result<Self> {
        p.validate()?;
        if beta0.len() < p.n + 1 || beta1.len() < p.n + 1 {
            return Err(Error::OrderDeficit(format!("beta tables need j <= {}", p.n)));
        }
        let rgrid = RadialGrid::geometric_per_decade(cfg.rmin_factor * p.delta, cfg.rmax, cfg.per_decade)?;
        let mut fam = RemoteFamily {
            params: *p,
            config: cfg.clone(),
            oscillatory_dropped: beta1.iter().flatten().any(|b| *b != C64::default()),
            beta0,
            beta1,
            rgrid,
            f0: Vec::new(),
            phi: Vec::new(),
            g: BTreeMap::new(),
        };
        let nodes = fam.rgrid.nodes().to_vec();
        let layers = fam.layer_jets(&nodes);
        fam.f0 = layers[0].values();
        fam.phi = build_phi(&fam.rgrid, &layers[0])?;
        for (k, gk) in layers.iter().enumerate().skip(1) {
            fam.insert(k, 0, 0, 0, gk.values());
        }
        for j in 0..=p.n {
            for s in 0..=2 * j + 1 {
                let g = fam.first_layer_oscillatory(j, s, &Jets::coord(&nodes, 2), &layers[0].truncate(2));
                if !g.is_zero() {
                    fam.insert(1, 2 * j + 1, -1, s, g.values());
                }
            }
        }
        Ok(fam)
    }

    fn insert(&mut self, k: usize, q: usize, m: i32, s: usize, v: Vec<C64>) {
        assert!(in_omega(k, q, m, s), "cell ({k},{q},{m},{s}) outside the index set");
        self.g.insert((k, q, m, s), v);
    }

    fn jet_len(&self) -> usize {
        2 * self.params.n + self.config.jet_margin
    }

    /// f0 and g_1..g_N as jets at arbitrary radii.
    pub fn layer_jets(&self, at: &[f64]) -> Vec<Jets> {
        let beta: Vec<Vec<C64>> = self.beta0.iter().take(self.params.n + 1).cloned().collect();
        let f0 = f0_jets(&self.params, &beta, at, self.jet_len());
        taylor_layers(&f0, self.params.a(), self.params.n)
    }

    pub fn layers_at(&self, at: &[f64]) -> RemoteLayers {
        RemoteLayers { at: at.to_vec(), g: self.layer_jets(at).iter().map(|j| j.values()).collect() }
    }

    /// g_{k,q,m,s} on the storage grid, if populated.
    pub fn g(&self, k: usize, q: usize, m: i32, s: usize) -> Option<&[C64]> {
        self.g.get(&(k, q, m, s)).map(|v| v.as_slice())
    }

    pub fn cells(&self) -> impl Iterator<Item = &(usize, usize, i32, usize)> {
        self.g.keys()
    }

    /// g_{1,2j+1,-1,s} = beta1(j,s) (1 + |f0|^2) r^{-2i alpha0 - 2 nu(2j+1) - 2}.
    fn first_layer_oscillatory(&self, j: usize, s: usize, r: &Jets, f0: &Jets) -> Jets {
        let b = self.beta1.get(j).and_then(|row| row.get(s)).copied().unwrap_or_default();
        if j > self.params.n || b == C64::default() {
            return r.zero();
        }
        let one = Jets::constant(r.points(), r.len(), C64::new(1.0, 0.0));
        let pw = Jets::power(r.points(), r.len(), -smooth_exponent(&self.params, j) - 2.0);
        one.add(&f0.conj().mul(f0)).mul(&pw).scale(b)
    }

    /// Defect of [2 nu(2j+1) + 2 i alpha0 + 2 - r d/dr ln(1+|f0|^2)] g + r g' = 0 for the
    /// first-layer oscillatory cell, relative to the size of its terms, at `at`.
    pub fn first_layer_defect(&self, j: usize, s: usize, at: &[f64]) -> f64 {
        let r = Jets::coord(at, 3);
        let f0 = f0_jets(&self.params, &self.beta0, at, 3);
        let g = self.first_layer_oscillatory(j, s, &r, &f0);
        if g.is_zero() {
            return 0.0;
        }
        let one = Jets::constant(at, 3, C64::new(1.0, 0.0));
        let m = one.add(&f0.conj().mul(&f0));
        let dlog = r.mul(&m.dr()).mul(&m.recip());
        let c = smooth_exponent(&self.params, j) + 2.0;
        let lhs = g.scale(c).sub(&dlog.mul(&g)).add(&r.mul(&g.dr()));
        let (lv, gv) = (lhs.values(), g.values());
        lv.iter().zip(&gv).map(|(l, g)| l.norm() / (g.norm() * (c.norm() + 1.0)).max(1e-300)).fold(0.0, f64::max)
    }

    /// Checks g = 0 beyond the vanishing thresholds: q > (2N+1)(2k-2) for m not in {0,-1},
    /// q > (2N+1)(2k-1) for m in {0,-1}. Exact (populated cells are compared bitwise).
    pub fn vanishing_thresholds_hold(&self) -> bool {
        let n = self.params.n;
        self.g.iter().all(|(&(k, q, m, _), v)| {
            let cap = if m == 0 || m == -1 { (2 * n + 1) * (2 * k - 1) } else { (2 * n + 1) * (2 * k).saturating_sub(2) };
            q <= cap || v.iter().all(|x| *x == C64::default())
        })
    }

    /// w_rem(r, t) at arbitrary radii.
    pub fn profile_at(&self, at: &[f64], t: f64) -> Vec<C64> {
        self.layers_at(at).eval(t)
    }

    /// (w, w_r, w_rr, w_t) at `at`, all exact.
    pub fn profile_derivatives(&self, at: &[f64], t: f64) -> [Vec<C64>; 4] {
        let layers = self.layer_jets(at);
        let mut w = layers[0].zero();
        let mut wt = vec![C64::default(); at.len()];
        for (k, gk) in layers.iter().enumerate() {
            w = w.add(&gk.scale_re(t.powi(k as i32)));
            if k > 0 {
                let c = k as f64 * t.powi(k as i32 - 1);
                for (o, v) in wt.iter_mut().zip(gk.values()) {
                    *o += v * c;
                }
            }
        }
        [w.values(), w.derivative(1), w.derivative(2), wt]
    }

    /// i w_t - A [-Delta w + w/r^2 + G(w)] as jets (length >= 4) at `at`.
    pub fn residual_jets(&self, at: &[f64], t: f64) -> Jets {
        let layers = self.layer_jets(at);
        let a = self.params.a();
        let mut w = layers[0].zero();
        let mut wt = layers[0].zero();
        for (k, gk) in layers.iter().enumerate() {
            w = w.add(&gk.scale_re(t.powi(k as i32)));
            if k > 0 {
                wt = wt.add(&gk.scale_re(k as f64 * t.powi(k as i32 - 1)));
            }
        }
        let f = w.lap().scale_re(-1.0).add(&w.div_r().div_r()).add(&nonlinearity_jets(&w));
        wt.scale(C64::i()).sub(&f.scale(a))
    }

    /// Norms ||r^{-l} d^k A_rem||_{L^2(r dr, r >= t^{1/2-eps2}/10)}, k + l <= 3.
    pub fn remote_residual(&self, t: f64) -> Result<NormReport> {
        let p = &self.params;
        let r0 = t.powf(0.5 - p.eps2) / 10.0;
        let r1 = 2.0 * p.delta;
        if r0 >= r1 {
            return Err(Error::OutOfRange(format!("remote zone starts at {r0}, beyond the support 2 delta")));
        }
        // The residual vanishes identically for r >= 2 delta.
        let grid = RadialGrid::geometric_per_decade(r0, r1, self.config.norm_per_decade)?;
        let res = self.residual_jets(grid.nodes(), t);
        let q = Quadrature::new(&grid, 4)?;
        let mut values = BTreeMap::new();
        let nodes = grid.nodes();
        let mut semis = [0.0; 4];
        for k in 0..=3usize {
            let dk = res.derivative(k);
            for l in 0..=(3 - k) {
                let dens: Vec<f64> = nodes.iter().zip(&dk).map(|(r, v)| v.norm_sqr() / r.powi(2 * l as i32)).collect();
                let v = q.integral_rdr(&dens).max(0.0).sqrt();
                values.insert(format!("k{k}l{l}"), v);
                semis[k + l] += v * v;
            }
        }
        values.insert("L2".into(), semis[0].sqrt());
        let mut acc = semis[0];
        for (j, s) in semis.iter().enumerate().skip(1) {
            acc += s;
            values.insert(format!("H{j}"), acc.sqrt());
        }
        Ok(NormReport { values, rmin: r0, rmax: r1, nodes: grid.len(), t: Some(t) })
    }

    /// Largest relative defect of the coefficient equations for k = 2..=N+1, assembled
    /// from the explicit linear operator (potentials V0, V1, V2) and the split
    /// nonlinearity N0 + chi_r N1 + chi_r^2 N2 rather than from G(w) directly.
    pub fn coefficient_system_residual(&self) -> Vec<(usize, f64)> {
        let p = &self.params;
        let a = p.a();
        let at: Vec<f64> = self.rgrid.nodes().iter().copied().filter(|&r| r < 2.0 * p.delta).collect();
        let layers = self.layer_jets(&at);
        let f0 = &layers[0];
        let pot = potentials(f0);
        let len = f0.len();
        let one = Jets::constant(&at, len, C64::new(1.0, 0.0));
        let n = p.n;
        // chi = sum_{k=1}^{N} t^k g_k.
        let mut chi = TauSeries::zeros(f0, n + 1);
        chi.c[1..=n].clone_from_slice(&layers[1..=n]);
        let lift = |v: &Jets| TauSeries::constant(v, n + 1);
        let w = lift(f0).add(&chi);
        let wb = w.conj();
        let inv0 = one.add(&f0.conj().mul(f0)).recip();
        let mut d = wb.mul(&w);
        d.c[0] = d.c[0].zero();
        let den = TauSeries::inverse_about(&inv0, &d);
        let fr = lift(&f0.dr());
        let g_f0 = lift(&nonlinearity_jets(f0));
        let n0 = wb
            .mul(&fr.mul(&fr).sub(&w.mul(&w).div_r().div_r()))
            .mul(&den)
            .scale_re(2.0)
            .sub(&g_f0)
            .sub(&lift(&pot.v1).mul(&chi))
            .sub(&lift(&pot.v2).mul(&chi.conj()));
        let n1 = fr.mul(&wb).mul(&den).scale_re(4.0).sub(&lift(&pot.v0));
        let n2 = wb.mul(&den).scale_re(2.0);
        let chir = chi.dr();
        let nl = n0.add(&chir.mul(&n1)).add(&chir.mul(&chir).mul(&n2)).scale(a);
        let lin2 = |g: &Jets| -> Vec<Jets> {
            let d1 = g.dr();
            vec![
                d1.dr().scale(-a),
                pot.v0.sub(&one.div_r()).mul(&d1).scale(a),
                pot.v1.add(&one.div_r().div_r()).mul(g).scale(a),
                pot.v2.mul(&g.conj()).scale(a),
            ]
        };
        let mut out = Vec::new();
        for k in 2..=n + 1 {
            let mut terms = vec![layers[k - 1].scale(-C64::i() * (k - 1) as f64)];
            if k >= 3 {
                terms.extend(lin2(&layers[k - 2]));
            } else {
                terms.push(pot.d0.scale(a));
            }
            terms.push(nl.c[k - 2].clone());
            let vals: Vec<Vec<C64>> = terms.iter().map(|t| t.values()).collect();
            let mut worst = 0.0f64;
            for i in 0..at.len() {
                let sum: C64 = vals.iter().map(|v| v[i]).sum();
                let scale: f64 = vals.iter().map(|v| v[i].norm()).sum();
                if scale > 0.0 {
                    worst = worst.max(sum.norm() / scale);
                }
            }
            out.push((k, worst));
        }
        out
    }
}

/// phi(r) = -i int_0^r (f0-bar f0' - f0 f0-bar')/(1 + |f0|^2) ds on the grid.
pub fn build_phi(grid: &RadialGrid, f0: &Jets) -> Result<Vec<f64>> {
    assert_eq!(f0.points(), grid.nodes());
    let v = f0.values();
    let d = f0.dr().values();
    let mut integrand = Vec::with_capacity(v.len());
    for (f, fp) in v.iter().zip(&d) {
        let x = -C64::i() * (f.conj() * fp - f * fp.conj()) / (1.0 + f.norm_sqr());
        if x.im.abs() > 1e-10 * x.norm().max(1.0) {
            return Err(Error::PhaseIntegrand(x.im));
        }
        integrand.push(x.re);
    }
    let q = Quadrature::new(grid, 4)?;
    Ok(q.cumulative_dr(&integrand, 0.0))
}

/// sup |W_ss^(n)(y,t) - t^{-i alpha0} w_rem(y sqrt(t), t)| over y in [t^{-eps2}/10, 10 t^{-eps2}].
pub fn matching_check_remote(ss: &SelfSimFamily, rem: &RemoteFamily, n: usize, ts: &[f64]) -> Result<crate::selfsim::MatchingReport> {
    let p = &rem.params;
    let mut samples = Vec::new();
    for &t in ts {
        let (lo, hi) = (t.powf(-p.eps2) / 10.0, 10.0 * t.powf(-p.eps2));
        let ys: Vec<f64> = (0..=64).map(|k| lo * (hi / lo).powf(k as f64 / 64.0)).collect();
        let rs: Vec<f64> = ys.iter().map(|y| y * t.sqrt()).collect();
        let phase = C64::new(0.0, -p.alpha0 * t.ln()).exp();
        let wr = rem.profile_at(&rs, t);
        let mut sup = 0.0f64;
        for (y, w) in ys.iter().zip(&wr) {
            sup = sup.max((ss.w_ss(*y, t, n)? - phase * w).norm());
        }
        samples.push((t, sup));
    }
    let fit: FitReport = fit_power_law(&samples)?;
    Ok(crate::selfsim::MatchingReport { n, samples, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inner::{InnerConfig, InnerStack};
    use crate::selfsim::{derive_matching_data, SelfSimConfig};
    use std::sync::OnceLock;

    fn selfsim() -> &'static SelfSimFamily {
        static F: OnceLock<SelfSimFamily> = OnceLock::new();
        F.get_or_init(|| {
            let p = Params::reference();
            let st = InnerStack::build(&p, &InnerConfig::default()).unwrap();
            let m = derive_matching_data(&st, 3).unwrap();
            SelfSimFamily::build(&p, &SelfSimConfig { levels: 3, ..SelfSimConfig::default() }, &m).unwrap()
        })
    }

    fn family(n: usize) -> RemoteFamily {
        let p = Params::reference().with_n(n).unwrap();
        RemoteFamily::build(&p, selfsim(), &RemoteConfig::default()).unwrap()
    }

    fn single_term(p: &Params) -> (Vec<Vec<C64>>, Vec<Vec<C64>>) {
        let mut b0: Vec<Vec<C64>> = (0..=p.n).map(|j| vec![C64::default(); 2 * j + 2]).collect();
        b0[0][0] = C64::new(1.0, 0.0);
        let b1 = (0..=p.n).map(|j| vec![C64::default(); 2 * j + 2]).collect();
        (b0, b1)
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(cutoff(0.3), 1.0);
        assert_eq!(cutoff(2.1), 0.0);
        assert!((cutoff(1.5) - 0.5).abs() < 1e-15);
        let at = [1.2, 1.5, 1.8];
        let j = cutoff_jets(&at, 5, 1.0);
        for (i, &x) in at.iter().enumerate() {
            assert!((j.values()[i].re - cutoff(x)).abs() < 1e-15);
            let h = 1e-4;
            let fd = (cutoff(x + h) - cutoff(x - h)) / (2.0 * h);
            assert!((j.derivative(1)[i].re - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn single_term_profile() {
        let p = Params::reference().with_n(2).unwrap();
        let (b0, b1) = single_term(&p);
        let fam = RemoteFamily::from_coefficients(&p, b0, b1, &RemoteConfig::default()).unwrap();
        for (&r, f) in fam.rgrid.nodes().iter().zip(&fam.f0) {
            let want = cutoff(r / p.delta) * r.powf(2.0 * p.nu);
            assert!((f - want).norm() <= 1e-14 * want.abs().max(1e-300), "r={r}");
        }
        assert_eq!(fam.profile_at(&[2.1 * p.delta], 0.01)[0], C64::default());
        // Real f0 gives phi = 0.
        assert!(fam.phi.iter().all(|x| x.abs() < 1e-14));
        // With all layers dropped, the profile is f0.
        let l = fam.layers_at(&[0.3]);
        assert_eq!(l.eval(0.0)[0], l.g[0][0]);
    }

    #[test]
    fn homogeneous_norm_scaling_in_delta() {
        // ||f0||_{H1-dot} ~ delta^{2 nu} for f0 = theta(r/delta) r^{2 nu}.
        let norm = |delta: f64| {
            let p = Params { delta, ..Params::reference() };
            let g = RadialGrid::geometric_per_decade(1e-6, 2.0 * delta, 400.0).unwrap();
            let (b0, _) = single_term(&p);
            let f = f0_jets(&p, &b0[..1], g.nodes(), 2);
            let d = f.derivative(1);
            let dens: Vec<f64> = g.nodes().iter().zip(&d).zip(f.values()).map(|((r, d), v)| d.norm_sqr() + v.norm_sqr() / (r * r)).collect();
            Quadrature::new(&g, 4).unwrap().integral_rdr(&dens).sqrt()
        };
        let ratio = norm(0.5) / norm(0.25);
        assert!((ratio / 2f64.powf(2.0 * 1.5) - 1.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn phase_of_a_rotating_profile() {
        // alpha0 != 0 single term: phi' = 2 Im(f-bar f')/(1+|f|^2) = 4 alpha0 |f|^2/(r(1+|f|^2)).
        let p = Params { alpha0: 0.3, ..Params::reference() };
        let (b0, b1) = single_term(&p);
        let fam = RemoteFamily::from_coefficients(&p, b0, b1, &RemoteConfig { per_decade: 400.0, ..RemoteConfig::default() }).unwrap();
        let r = fam.rgrid.nodes();
        for i in (200..r.len() - 1).step_by(97) {
            if r[i] > p.delta {
                break;
            }
            let f2 = fam.f0[i].norm_sqr();
            let want = 4.0 * p.alpha0 * f2 / (r[i] * (1.0 + f2));
            let fd = (fam.phi[i + 1] - fam.phi[i - 1]) / (r[i + 1] - r[i - 1]);
            assert!((fd - want).abs() < 1e-3 * want.abs(), "r={} {fd} {want}", r[i]);
        }
        let last = fam.phi.last().unwrap();
        let at_2d = fam.phi[fam.rgrid.locate(2.0 * p.delta) + 1];
        assert!((last - at_2d).abs() < 1e-14);
        assert!(fam.phi[0].abs() < 1e-12);
    }

    #[test]
    fn potentials_against_direct_formulas() {
        let fam = family(2);
        let at = [0.01, 0.05, 0.13, 0.3, 0.7];
        let f0 = f0_jets(&fam.params, &fam.beta0, &at, 6);
        let pot = potentials(&f0);
        let (v, d) = (f0.values(), f0.derivative(1));
        for i in 0..at.len() {
            let (f, fp, r) = (v[i], d[i], at[i]);
            let m = 1.0 + f.norm_sqr();
            let v2 = 2.0 * (r * r * fp * fp - f * f) / (r * r * m * m);
            assert!((pot.v2.values()[i] - v2).norm() <= 1e-12 * v2.norm());
            let v0 = 4.0 * f.conj() * fp / m;
            assert!((pot.v0.values()[i] - v0).norm() <= 1e-12 * v0.norm());
        }
        let z = Jets::constant(&at, 6, C64::default());
        let pz = potentials(&z);
        assert!(pz.v0.is_zero() && pz.v1.is_zero() && pz.v2.is_zero() && pz.d0.is_zero());
    }

    #[test]
    fn nonlinear_remainder_is_quadratic() {
        // N0 + chi_r N1 + chi_r^2 N2 = G(f0 + chi) - G(f0) - V0 chi_r - V1 chi - V2 chi-bar.
        let fam = family(2);
        let at = [0.05, 0.2, 0.6];
        let f0 = f0_jets(&fam.params, &fam.beta0, &at, 8);
        let pot = potentials(&f0);
        let chi = Jets::from_fn(&at, 8, |r| (0..8).map(|n| C64::new(0.3 / (n + 1) as f64, 0.1 * r)).collect());
        let rem = |e: f64| {
            let c = chi.scale_re(e);
            let n = nonlinearity_jets(&f0.add(&c))
                .sub(&nonlinearity_jets(&f0))
                .sub(&pot.v0.mul(&c.dr()))
                .sub(&pot.v1.mul(&c))
                .sub(&pot.v2.mul(&c.conj()));
            n.values()[1].norm()
        };
        let ratio = rem(1e-4) / rem(5e-5);
        assert!((ratio - 4.0).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn first_layer_cells() {
        let p = Params::reference().with_n(2).unwrap();
        let (b0, mut b1) = single_term(&p);
        let fam = RemoteFamily::from_coefficients(&p, b0.clone(), b1.clone(), &RemoteConfig::default()).unwrap();
        assert!(fam.cells().all(|c| c.2 == 0), "beta1 = 0 leaves only m = 0 cells");
        assert!(!fam.oscillatory_dropped);
        b1[1][2] = C64::new(0.4, -0.2);
        let fam = RemoteFamily::from_coefficients(&p, b0, b1, &RemoteConfig::default()).unwrap();
        assert!(fam.oscillatory_dropped);
        assert!(fam.g(1, 3, -1, 2).is_some());
        assert!(fam.g(1, 7, -1, 0).is_none(), "j > N stays empty");
        let at: Vec<f64> = (1..40).map(|i| 0.03 * i as f64).collect();
        assert!(fam.first_layer_defect(1, 2, &at) < 1e-8);
    }

    #[test]
    fn first_layer_source() {
        let fam = family(2);
        let at = [0.02, 0.1, 0.4, 0.9];
        let l = fam.layer_jets(&at);
        let pot = potentials(&l[0]);
        let want = pot.d0.scale(-C64::i() * fam.params.a()).values();
        for (g, w) in l[1].values().iter().zip(&want) {
            assert!((g - w).norm() <= 1e-12 * w.norm().max(1e-300));
        }
    }

    #[test]
    fn coefficient_system_and_thresholds() {
        for n in [2, 3] {
            let fam = family(n);
            for (k, r) in fam.coefficient_system_residual() {
                assert!(r <= 1e-6, "N={n} k={k} residual {r:e}");
            }
            assert!(fam.vanishing_thresholds_hold());
            assert!(fam.cells().all(|&(k, q, m, s)| in_omega(k, q, m, s)));
        }
    }

    #[test]
    fn layers_are_linear_in_the_source_at_first_order() {
        let p = Params::reference();
        let (b0, _) = single_term(&p);
        let at = [0.1, 0.3];
        let g = |s: f64| {
            let b: Vec<Vec<C64>> = b0.iter().map(|row| row.iter().map(|x| x * s).collect()).collect();
            taylor_layers(&f0_jets(&p, &b, &at, 6), p.a(), 1)[1].values()
        };
        // g_1 = -iA D0(f0) is linear up to O(|f0|^3).
        let (a, b) = (g(1e-4), g(2e-4));
        for i in 0..2 {
            assert!((b[i] - 2.0 * a[i]).norm() <= 1e-6 * b[i].norm());
        }
    }

    #[test]
    fn remote_residual_decays() {
        let fam = family(2);
        let ts = [1e-3, 10f64.powf(-2.5), 1e-2, 10f64.powf(-1.5)];
        let s: Vec<(f64, f64)> = ts.iter().map(|&t| (t, fam.remote_residual(t).unwrap().get("L2"))).collect();
        let fit = fit_power_law(&s).unwrap();
        assert!(fit.exponent >= fam.params.eps2 * 2.0 - 0.5, "{fit:?} {s:?}");
    }

    #[test]
    fn remote_matches_selfsim() {
        let fam = family(2);
        let ts = [1e-4, 1e-3, 10f64.powf(-2.5), 1e-2];
        let rep = matching_check_remote(selfsim(), &fam, 2, &ts).unwrap();
        assert!(rep.fit.exponent > 0.5, "{rep:?}");
    }
}
