//! Inner region: V = (1 + gamma) Q + z1 f1 + z2 f2 with z = sum_k t^{2 nu k} z^k(rho).
//!
//! Each layer solves L z^k = F_k where F_k only involves z^1 .. z^{k-1}. The nonlinear
//! terms are written once over [`Algebra`] and evaluated on grid functions (to produce the
//! layers), on formal tails at infinity (to produce their far-field expansions), and on
//! plain grid functions at fixed t (for residuals).

use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::algebra::{Algebra, GridCtx, GridFn, Known, Tail, TauSeries};
use crate::error::{Error, Result};
use crate::frame::{gamma_of, reconstruct_point, FrameCoords};
use crate::grid::{DiffOp, Interpolator, Quadrature, RadialGrid};
use crate::logseries::{fit_basis, reexpand_inner_to_selfsim, LogPowerSeries, ReexpansionTable};
use crate::params::Params;
use crate::sphere::{cross, h1, h2, SphereField, Vec3};

/// Weight of the d-source in the frame equation.
///
/// Projecting the rotation and dilation terms onto the frame gives d t^{2 nu} h1 (1 + gamma)
/// with unit weight. `Printed` multiplies it by a1, which only agrees when a2 = 0; it is
/// kept for comparison against that form of the equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SourceVariant {
    #[default]
    Exact,
    Printed,
}

impl SourceVariant {
    pub fn weight(self, p: &Params) -> f64 {
        match self {
            SourceVariant::Exact => 1.0,
            SourceVariant::Printed => p.a1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub rmin: f64,
    pub rmax: f64,
    pub per_decade: f64,
    pub fd_order: usize,
    /// Number of layers z^1 .. z^K.
    pub layers: usize,
    pub variant: SourceVariant,
    /// Window (in rho) for the two connection constants of each tail.
    pub tail_window: (f64, f64),
    /// Formal tails are truncated below rho^{min_exp}.
    pub min_exp: i32,
    /// Relative tolerance of the half-density check in [`solve_l`].
    pub richardson_tol: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            rmin: 1e-3,
            rmax: 1e5,
            per_decade: 240.0,
            fd_order: 8,
            layers: 4,
            variant: SourceVariant::Exact,
            tail_window: (6.0, 30.0),
            min_exp: -35,
            richardson_tol: 1e-6,
        }
    }
}

/// (1 - 2 h1^2) / rho^2.
pub fn potential(r: f64) -> f64 {
    (1.0 - 2.0 * h1(r).powi(2)) / (r * r)
}

/// L z = -Delta z + (1 - 2 h1^2)/rho^2 z.
pub fn apply_l(grid: &RadialGrid, z: &[C64], order: usize) -> Result<Vec<C64>> {
    let d = DiffOp::new(grid, order)?;
    let lap = d.laplacian(z);
    Ok(grid.nodes().iter().zip(lap).zip(z).map(|((&r, l), &v)| -l + v * potential(r)).collect())
}

/// L z in any algebra.
pub fn l_of<V: Algebra>(k: &Known<V>, z: &V) -> V {
    let pot = k.one.sub(&k.h1.mul(&k.h1).scale_re(2.0)).mul(&k.inv_r2);
    z.lap().scale_re(-1.0).add(&pot.mul(z))
}

/// Integral from 0 to the first node of a sampled integrand, assuming a local power law.
fn power_law_start(g: &[C64], r: &[f64]) -> Result<C64> {
    if g[0] == C64::default() {
        return Ok(C64::default());
    }
    let p = (g[1].norm() / g[0].norm()).ln() / (r[1] / r[0]).ln();
    if !(p > -1.0) {
        return Err(Error::OutOfRange(format!("integrand ~ r^{p:.3} not integrable at the origin")));
    }
    Ok(g[0] * r[0] / (p + 1.0))
}

fn solve_l_raw(grid: &RadialGrid, f: &[C64], order: usize) -> Result<Vec<C64>> {
    let q = Quadrature::new(grid, order)?;
    let r = grid.nodes();
    let g1: Vec<C64> = r.iter().zip(f).map(|(&s, &v)| v * (h1(s) * s)).collect();
    let g2: Vec<C64> = r.iter().zip(f).map(|(&s, &v)| v * (h2(s) * s)).collect();
    let i1 = q.cumulative_dr(&g1, power_law_start(&g1, r)?);
    let i2 = q.cumulative_dr(&g2, power_law_start(&g2, r)?);
    Ok(r.iter().enumerate().map(|(i, &s)| 0.25 * (i2[i] * h1(s) - i1[i] * h2(s))).collect())
}

/// The solution of L z = f regular at the origin:
/// z = (h1 int_0^rho h2 f s ds - h2 int_0^rho h1 f s ds) / 4.
///
/// Repeated on every other node; a relative discrepancy above `tol` is reported as
/// non-convergence.
pub fn solve_l(grid: &RadialGrid, f: &[C64], order: usize, tol: f64) -> Result<Vec<C64>> {
    let fine = solve_l_raw(grid, f, order)?;
    let coarse_grid = grid.coarsened();
    let fc: Vec<C64> = f.iter().step_by(2).copied().collect();
    let coarse = solve_l_raw(&coarse_grid, &fc, order)?;
    let mut err = 0.0f64;
    for (i, c) in coarse.iter().enumerate() {
        let v = fine[2 * i];
        err = err.max((v - c).norm() / v.norm().max(1e-300));
    }
    if !(err <= tol) {
        return Err(Error::QuadratureNonConvergence(err));
    }
    Ok(fine)
}

/// Everything in the frame equation except A L z:
///
/// X = A L z - i t^{1+2nu} z_t + alpha0 tau h3 z + i(1/2+nu) tau rho z_rho
///     + a1 [gamma L z + F] + w d tau h1 (1 + gamma) - a2 Ft
///
/// with tau = t^{2 nu}, F = z(Delta gamma + 2 h1 z1'/rho - 2 h1 h3 z1/rho^2) +
/// 2 h1 (1 + gamma) gamma'/rho and Ft = z F3 - i|z|^2 L z + i(1 + gamma) F,
/// F3 = z1 Delta z2 - z2 Delta z1 + 2 h1 z2 gamma'/rho.
/// `ttz` is t^{1+2nu} z_t and `tau` multiplies by t^{2 nu}.
pub fn rest_terms<V: Algebra>(
    k: &Known<V>,
    z: &V,
    gamma: &V,
    ttz: &V,
    tau: &dyn Fn(&V) -> V,
    p: &Params,
    variant: SourceVariant,
) -> V {
    let i = C64::i();
    let (z1, z2) = (z.re(), z.im());
    let lz = l_of(k, z);
    let lap_z = z.lap();
    let g_r = gamma.dr();
    let one_g = k.one.add(gamma);
    let h1_r = k.h1.mul(&k.inv_r);
    let bracket = gamma
        .lap()
        .add(&h1_r.mul(&z1.dr()).scale_re(2.0))
        .sub(&h1_r.mul(&k.h3).mul(&k.inv_r).mul(&z1).scale_re(2.0));
    let f_core = z.mul(&bracket).add(&h1_r.mul(&one_g).mul(&g_r).scale_re(2.0));
    let f3 = z1.mul(&lap_z.im()).sub(&z2.mul(&lap_z.re())).add(&h1_r.mul(&z2).mul(&g_r).scale_re(2.0));
    let mod2 = z1.mul(&z1).add(&z2.mul(&z2));
    let ft = z.mul(&f3).sub(&mod2.mul(&lz).scale(i)).add(&one_g.mul(&f_core).scale(i));
    let dil = tau(&k.h3.mul(z).scale_re(p.alpha0).add(&k.r.mul(&z.dr()).scale(i * (0.5 + p.nu))));
    let src = tau(&k.h1.mul(&one_g)).scale(p.d() * variant.weight(p));
    ttz.scale(-i)
        .add(&dil)
        .add(&gamma.mul(&lz).add(&f_core).scale_re(p.a1))
        .add(&src)
        .sub(&ft.scale_re(p.a2))
}

/// z = sum_{j<k} tau^j z^j as a series of order k (the k-th slot left empty).
fn partial_series<V: Algebra>(proto: &V, layers: &[V], k: usize) -> TauSeries<V> {
    let mut z = TauSeries::zeros(proto, k);
    for (j, l) in layers.iter().enumerate().take(k - 1) {
        z.c[j + 1] = l.clone();
    }
    z
}

fn gamma_series<V: Algebra>(z: &TauSeries<V>) -> TauSeries<V> {
    let (z1, z2) = (z.re(), z.im());
    z1.mul(&z1).add(&z2.mul(&z2)).sqrt_one_minus_minus_one()
}

/// F_k = -[X at z^k = 0]_k / A.
pub fn layer_source<V: Algebra>(k: &Known<V>, layers: &[V], order: usize, p: &Params, variant: SourceVariant) -> V {
    let z = partial_series(&k.one, layers, order);
    let kk = k.lift(order);
    let gamma = gamma_series(&z);
    let ttz = z.weight(|j| C64::new(2.0 * p.nu * j as f64, 0.0)).shift();
    let rest = rest_terms(&kk, &z, &gamma, &ttz, &|v: &TauSeries<V>| v.shift(), p, variant);
    rest.c[order].scale(-1.0 / p.a())
}

/// Stereographic image W = (V1 + i V2)/(1 + V3) of the frame series, order by order.
pub fn stereo_series<V: Algebra>(k: &Known<V>, z: &TauSeries<V>) -> TauSeries<V> {
    let n = z.order();
    let kk = k.lift(n);
    let gamma = gamma_series(z);
    let (z1, z2) = (z.re(), z.im());
    let num = kk.one.add(&gamma).mul(&kk.h1).add(&z1.mul(&kk.h3)).add(&z2.scale(C64::i()));
    let delta = gamma.mul(&kk.h3).sub(&z1.mul(&kk.h1));
    num.mul(&TauSeries::inverse_about(&k.inv_one_plus_h3, &delta))
}

/// Connection constants of a layer: z^k = P_k + A h2 + B h1 at infinity, where P_k is the
/// formal particular solution with no r^{+1} or r^{-1} log-free part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub a: C64,
    pub b: C64,
    /// Max relative deviation of the fit over the window.
    pub residual: f64,
}

#[derive(Clone)]
pub struct InnerStack {
    pub params: Params,
    pub config: InnerConfig,
    ctx: Arc<GridCtx>,
    layers: Vec<GridFn>,
    tails: Vec<Tail>,
    pub connections: Vec<Connection>,
    /// Leading power of each layer at the origin.
    pub origin_orders: Vec<f64>,
    interp: Interpolator,
}

impl std::fmt::Debug for InnerStack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InnerStack")
            .field("params", &self.params)
            .field("layers", &self.layers.len())
            .field("connections", &self.connections)
            .field("origin_orders", &self.origin_orders)
            .finish()
    }
}

/// Local power p in |f| ~ r^p between two nodes near the origin.
fn origin_order(r: &[f64], f: &[C64]) -> f64 {
    let (i, j) = (4, 24.min(r.len() - 1));
    (f[j].norm() / f[i].norm()).ln() / (r[j] / r[i]).ln()
}

impl InnerStack {
    pub fn build(p: &Params, cfg: &InnerConfig) -> Result<Self> {
        p.validate()?;
        if cfg.layers == 0 {
            return Err(Error::OutOfRange("inner stack needs at least one layer".into()));
        }
        let grid = RadialGrid::geometric_per_decade(cfg.rmin, cfg.rmax, cfg.per_decade)?;
        let ctx = GridCtx::new(&grid, cfg.fd_order)?;
        let kg = ctx.known();
        let kt = Tail::known(cfg.min_exp);
        let h1t = Tail::h1(cfg.min_exp);
        let h2t = Tail::h2(cfg.min_exp);
        let mut layers: Vec<GridFn> = Vec::new();
        let mut tails: Vec<Tail> = Vec::new();
        let mut connections = Vec::new();
        let mut origin_orders = Vec::new();
        let r = grid.nodes();
        for k in 1..=cfg.layers {
            let src = layer_source(&kg, &layers, k, p, cfg.variant);
            let zk = ctx.wrap(solve_l(&grid, &src.v, cfg.fd_order, cfg.richardson_tol)?);
            origin_orders.push(origin_order(r, &zk.v));

            let pk = layer_source(&kt, &tails, k, p, cfg.variant).solve_l(&kt.h1);
            let (lo, hi) = cfg.tail_window;
            let samples: Vec<(f64, C64)> = r
                .iter()
                .enumerate()
                .filter(|(_, &s)| s >= lo && s <= hi)
                .map(|(i, &s)| (s, zk.v[i] - pk.eval(s)))
                .collect();
            let fit = fit_basis(&samples, &[&|s| C64::new(h2(s), 0.0), &|s| C64::new(h1(s), 0.0)])?;
            let (a, b) = (fit.coeffs[0], fit.coeffs[1]);
            connections.push(Connection { a, b, residual: fit.residual });
            tails.push(pk.add(&h2t.scale(a)).add(&h1t.scale(b)));
            layers.push(zk);
        }
        let interp = Interpolator::new(&grid, cfg.fd_order);
        Ok(InnerStack { params: *p, config: cfg.clone(), ctx, layers, tails, connections, origin_orders, interp })
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.ctx.grid
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Samples of z^k on the inner grid (k >= 1).
    pub fn layer(&self, k: usize) -> &[C64] {
        &self.layers[k - 1].v
    }

    /// Expansion of z^k at infinity.
    pub fn tail(&self, k: usize) -> &Tail {
        &self.tails[k - 1]
    }

    pub fn tail_series(&self, k: usize) -> Result<LogPowerSeries> {
        self.tails[k - 1].to_series()
    }

    fn check_n(&self, n: usize) -> Result<()> {
        if n > self.depth() {
            return Err(Error::OrderDeficit(format!("order {n} requested, stack has {} layers", self.depth())));
        }
        Ok(())
    }

    /// L z^k - F_k on the grid (sources rebuilt from the stored layers).
    pub fn layer_defect(&self, k: usize) -> Result<Vec<C64>> {
        self.check_n(k)?;
        let kg = self.ctx.known();
        let src = layer_source(&kg, &self.layers, k, &self.params, self.config.variant);
        let lz = l_of(&kg, &self.layers[k - 1]);
        Ok(lz.sub(&src).v)
    }

    /// Source F_k on the grid.
    pub fn source(&self, k: usize) -> Result<Vec<C64>> {
        self.check_n(k)?;
        let kg = self.ctx.known();
        Ok(layer_source(&kg, &self.layers, k, &self.params, self.config.variant).v)
    }

    fn tau(&self, t: f64) -> f64 {
        t.powf(2.0 * self.params.nu)
    }

    /// z_in^(n) = sum_{k<=n} t^{2 nu k} z^k on the inner grid.
    pub fn z_sum(&self, t: f64, n: usize) -> Result<Vec<C64>> {
        self.check_n(n)?;
        let tau = self.tau(t);
        let mut out = vec![C64::default(); self.grid().len()];
        for k in 1..=n {
            let w = tau.powi(k as i32);
            for (o, v) in out.iter_mut().zip(&self.layers[k - 1].v) {
                *o += v * w;
            }
        }
        Ok(out)
    }

    pub fn frame_coords(&self, t: f64, n: usize) -> Result<FrameCoords> {
        let z = self.z_sum(t, n)?;
        let r = self.grid().nodes();
        let mut gamma = Vec::with_capacity(z.len());
        for (i, v) in z.iter().enumerate() {
            if v.norm_sqr() > 1.0 {
                return Err(Error::FrameChartExceeded(r[i]));
            }
            gamma.push(gamma_of(v.re, v.im));
        }
        Ok(FrameCoords { grid: self.grid().clone(), z1: z.iter().map(|v| v.re).collect(), z2: z.iter().map(|v| v.im).collect(), gamma })
    }

    /// V_in^(n) on the inner grid (variable rho).
    pub fn field(&self, t: f64, n: usize) -> Result<SphereField> {
        crate::frame::frame_reconstruct(&self.frame_coords(t, n)?)
    }

    /// z^k at an arbitrary rho: interpolated on the grid, from the tail beyond it, and
    /// from the leading power rho^{2k+1} below it.
    pub fn layer_at(&self, k: usize, rho: f64) -> Result<C64> {
        self.check_n(k)?;
        let g = self.grid();
        if rho > g.rmax() {
            return Ok(self.tails[k - 1].eval(rho));
        }
        if rho < g.rmin() {
            let v0 = self.layers[k - 1].v[0];
            return Ok(v0 * (rho / g.rmin()).powi(2 * k as i32 + 1));
        }
        self.interp.eval(&self.layers[k - 1].v, rho).ok_or(Error::RegionUnavailable { region: "inner", radius: rho })
    }

    pub fn z_at(&self, rho: f64, t: f64, n: usize) -> Result<C64> {
        let tau = self.tau(t);
        let mut acc = C64::default();
        for k in 1..=n {
            acc += self.layer_at(k, rho)? * tau.powi(k as i32);
        }
        Ok(acc)
    }

    /// V_in^(n)(rho, t) as a point of the sphere.
    pub fn v_at(&self, rho: f64, t: f64, n: usize) -> Result<Vec3> {
        let z = self.z_at(rho, t, n)?;
        if z.norm_sqr() > 1.0 {
            return Err(Error::FrameChartExceeded(rho));
        }
        Ok(reconstruct_point(z.re, z.im, gamma_of(z.re, z.im), rho))
    }

    /// X_N on the inner grid: the frame equation evaluated on z_in^(n) at time t.
    pub fn residual(&self, t: f64, n: usize) -> Result<Vec<C64>> {
        self.check_n(n)?;
        let p = &self.params;
        let tau = self.tau(t);
        let kg = self.ctx.known();
        let z = self.ctx.wrap(self.z_sum(t, n)?);
        let gamma = self.ctx.wrap(z.v.iter().map(|v| C64::new(gamma_of(v.re, v.im), 0.0)).collect());
        let mut ttz = z.zero();
        for k in 1..=n {
            let w = 2.0 * p.nu * k as f64 * tau.powi(k as i32 + 1);
            ttz = ttz.add(&self.layers[k - 1].scale_re(w));
        }
        let rest = rest_terms(&kg, &z, &gamma, &ttz, &|v: &GridFn| v.scale_re(tau), p, self.config.variant);
        Ok(l_of(&kg, &z).scale(p.a()).add(&rest).v)
    }

    /// Expansions at infinity of the stereographic layers w^0 .. w^kmax.
    pub fn stereo_tails(&self, kmax: usize) -> Result<Vec<LogPowerSeries>> {
        self.check_n(kmax)?;
        let kt = Tail::known(self.config.min_exp);
        let mut z = TauSeries::zeros(&kt.one, kmax);
        for k in 1..=kmax {
            z.c[k] = self.tails[k - 1].clone();
        }
        stereo_series(&kt, &z).c.iter().map(|t| t.to_series()).collect()
    }

    /// Matching coefficients alpha(j, i, l) of the inner expansion regrouped in y.
    pub fn reexpansion(&self, jmax: usize, imax: i32) -> Result<ReexpansionTable> {
        let kmax = (jmax as i32 + imax).max(0) as usize;
        reexpand_inner_to_selfsim(&self.stereo_tails(kmax)?, jmax, imax)
    }
}

/// sup over the inner zone of |X_N| / (t^{2 nu N} <rho>^{2N+1} ln(2 + rho)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerResidualReport {
    pub t: f64,
    pub n: usize,
    pub sup_ratio: f64,
    pub sup_abs: f64,
    /// Largest rho actually examined (the zone edge clipped to the grid).
    pub rho_max: f64,
}

pub fn inner_residual(stack: &InnerStack, t: f64, n: usize) -> Result<InnerResidualReport> {
    let p = &stack.params;
    let x = stack.residual(t, n)?;
    let edge = 10.0 * t.powf(-p.nu + p.eps1);
    let rho_max = edge.min(stack.grid().rmax());
    let tn = t.powf(2.0 * p.nu * n as f64);
    let (mut sup_ratio, mut sup_abs) = (0.0f64, 0.0f64);
    for (&r, v) in stack.grid().nodes().iter().zip(&x) {
        if r > rho_max {
            break;
        }
        let w = tn * (1.0 + r * r).powf((2 * n + 1) as f64 / 2.0) * (2.0 + r).ln();
        sup_ratio = sup_ratio.max(v.norm() / w);
        sup_abs = sup_abs.max(v.norm());
    }
    Ok(InnerResidualReport { t, n, sup_ratio, sup_abs, rho_max })
}

/// Residual of the rescaled sphere-valued equation
/// t^{1+2nu} V_t + t^{2nu}(alpha0 R V - (1/2+nu) rho V_rho) - a1 V x DV + a2 V x (V x DV),
/// DV = Delta V + R^2 V / rho^2, evaluated on V_in^(n). Independent of the frame algebra.
pub fn sphere_residual(stack: &InnerStack, t: f64, n: usize) -> Result<Vec<f64>> {
    let p = &stack.params;
    let g = stack.grid();
    let d = DiffOp::new(g, stack.config.fd_order)?;
    let f = stack.field(t, n)?;
    let tau = t.powf(2.0 * p.nu);
    // V_t from z_t
    let mut zt = vec![C64::default(); g.len()];
    for k in 1..=n {
        let w = 2.0 * p.nu * k as f64 * t.powf(2.0 * p.nu * k as f64 - 1.0);
        for (o, v) in zt.iter_mut().zip(stack.layer(k)) {
            *o += v * w;
        }
    }
    let comps: Vec<Vec<f64>> = (0..3).map(|c| f.component(c)).collect();
    let lap: Vec<Vec<f64>> = comps.iter().map(|c| d.laplacian(c)).collect();
    let drv: Vec<Vec<f64>> = comps.iter().map(|c| d.dr(c)).collect();
    let fc = stack.frame_coords(t, n)?;
    let mut out = Vec::with_capacity(g.len());
    for (i, &r) in g.nodes().iter().enumerate() {
        let v: Vec3 = f.values()[i];
        let (q, f1, f2) = crate::frame::frame_at(r);
        let (z1, z2, gm) = (fc.z1[i], fc.z2[i], fc.gamma[i]);
        let gt = -(z1 * zt[i].re + z2 * zt[i].im) / (1.0 + gm);
        let vt: Vec3 = std::array::from_fn(|c| gt * q[c] + zt[i].re * f1[c] + zt[i].im * f2[c]);
        let dv: Vec3 = [lap[0][i] - v[0] / (r * r), lap[1][i] - v[1] / (r * r), lap[2][i]];
        let rv: Vec3 = [-v[1], v[0], 0.0];
        let vr: Vec3 = [drv[0][i], drv[1][i], drv[2][i]];
        let a = cross(&v, &dv);
        let b = cross(&v, &a);
        let res: Vec3 = std::array::from_fn(|c| {
            t.powf(1.0 + 2.0 * p.nu) * vt[c] + tau * (p.alpha0 * rv[c] - (0.5 + p.nu) * r * vr[c]) - p.a1 * a[c] + p.a2 * b[c]
        });
        out.push(crate::sphere::norm(&res));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::fit_power_law;

    fn cfg(variant: SourceVariant, layers: usize) -> InnerConfig {
        InnerConfig { layers, variant, ..InnerConfig::default() }
    }

    #[test]
    fn kernel_is_annihilated() {
        let g = RadialGrid::geometric_per_decade(1e-3, 1e4, 160.0).unwrap();
        for f in [h1 as fn(f64) -> f64, h2] {
            let z: Vec<C64> = g.nodes().iter().map(|&r| C64::new(f(r), 0.0)).collect();
            let lz = apply_l(&g, &z, 8).unwrap();
            for (i, &r) in g.nodes().iter().enumerate().skip(8).take(g.len() - 16) {
                assert!(lz[i].norm() < 1e-9 * (z[i].norm() / (r * r) + 1.0), "r={r} {}", lz[i]);
            }
        }
    }

    #[test]
    fn solve_l_inverts_apply_l() {
        let g = RadialGrid::geometric_per_decade(1e-3, 1e3, 160.0).unwrap();
        let f: Vec<C64> = g.nodes().iter().map(|&r| C64::new(r * (-r).exp(), 0.5 * r / (1.0 + r * r))).collect();
        let z = solve_l(&g, &f, 8, 1e-4).unwrap();
        let back = apply_l(&g, &z, 8).unwrap();
        for i in (10..g.len() - 10).step_by(17) {
            assert!((back[i] - f[i]).norm() < 1e-7 * f[i].norm().max(1e-12), "i={i}");
        }
    }

    #[test]
    fn first_layer_log_coefficient() {
        let p = Params::reference();
        for (variant, w) in [(SourceVariant::Printed, p.a1), (SourceVariant::Exact, 1.0)] {
            let s = InnerStack::build(&p, &cfg(variant, 1)).unwrap();
            let k = p.d() * w / p.a();
            let t = s.tail(1);
            assert!((t.coeff(1, 1) - k).norm() < 1e-12 * k.norm());
            // z^1 ~ K rho ln rho - K rho
            assert!((s.connections[0].a + k).norm() < 1e-8 * k.norm(), "{:?} vs {}", s.connections[0].a, -k);
            let src = s.source(1).unwrap();
            for (i, &r) in s.grid().nodes().iter().enumerate().step_by(50) {
                assert!((src[i] + p.d() * w * h1(r) / p.a()).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn layers_vanish_to_the_right_order() {
        let p = Params::reference();
        let s = InnerStack::build(&p, &cfg(SourceVariant::Exact, 3)).unwrap();
        for (k, o) in s.origin_orders.iter().enumerate() {
            assert!((o - (2 * k + 3) as f64).abs() < 0.2, "layer {} order {o}", k + 1);
        }
    }

    #[test]
    fn tails_reproduce_layers_and_log_bound() {
        let p = Params::new(0.3, 1.25, 0.4, 2, 0.5, None, 0.4).unwrap();
        let s = InnerStack::build(&p, &cfg(SourceVariant::Exact, 3)).unwrap();
        for k in 1..=3 {
            let t = s.tail(k);
            assert!(t.log_depth() <= 2 * k, "layer {k} log depth {}", t.log_depth());
            assert_eq!(t.top(), Some(2 * k as i32 - 1));
            assert!(s.connections[k - 1].residual < 1e-6, "{:?}", s.connections[k - 1]);
            for rho in [50.0, 300.0, 3000.0] {
                let num = s.interp.eval(s.layer(k), rho).unwrap();
                let rel = (num - t.eval(rho)).norm() / num.norm();
                assert!(rel < 1e-8, "k={k} rho={rho} rel={rel}");
            }
        }
    }

    #[test]
    fn layer_defects_small() {
        let p = Params::reference();
        let s = InnerStack::build(&p, &cfg(SourceVariant::Exact, 3)).unwrap();
        for k in 1..=3 {
            let d = s.layer_defect(k).unwrap();
            let f = s.source(k).unwrap();
            let n = d.len();
            for i in (20..n - 20).step_by(23) {
                assert!(d[i].norm() < 1e-6 * f[i].norm().max(1e-30), "k={k} i={i}");
            }
        }
    }

    #[test]
    fn zero_field_residual_is_the_source() {
        let p = Params::reference();
        let s = InnerStack::build(&p, &cfg(SourceVariant::Printed, 1)).unwrap();
        let t: f64 = 0.01;
        let kg = s.ctx.known();
        let z = kg.one.zero();
        let tau = t.powf(2.0 * p.nu);
        let x = rest_terms(&kg, &z, &z, &z, &|v: &GridFn| v.scale_re(tau), &p, SourceVariant::Printed);
        for (i, &r) in s.grid().nodes().iter().enumerate().step_by(40) {
            assert!((x.v[i] - p.a1 * p.d() * tau * h1(r)).norm() < 1e-15);
        }
    }

    #[test]
    fn second_source_is_quadratic() {
        // Scaling the first layer by s scales the nonlinear part of F_2 by s^2.
        let p = Params::reference().with_a2(0.0).unwrap();
        let s = InnerStack::build(&p, &cfg(SourceVariant::Exact, 1)).unwrap();
        let kg = s.ctx.known();
        let z1 = s.layers[0].clone();
        let lin = |sc: f64| {
            let l = vec![z1.scale_re(sc)];
            let full = layer_source(&kg, &l, 2, &p, SourceVariant::Exact);
            // linear part: dilation terms acting on z^1
            let zs = z1.scale_re(sc);
            let i = C64::i();
            let linear = kg.h3.mul(&zs).scale_re(p.alpha0).add(&kg.r.mul(&zs.dr()).scale(i * (0.5 + p.nu))).add(&zs.scale(-i * 2.0 * p.nu));
            full.add(&linear.scale(1.0 / p.a()))
        };
        let (q1, q2) = (lin(1.0), lin(2.0));
        for i in (30..q1.v.len() - 30).step_by(61) {
            assert!((q2.v[i] - q1.v[i] * 4.0).norm() < 1e-8 * q1.v[i].norm().max(1e-300));
        }
    }

    #[test]
    fn residual_scales_with_the_next_order() {
        let p = Params::reference();
        let s = InnerStack::build(&p, &cfg(SourceVariant::Exact, 2)).unwrap();
        let i = s.grid().locate(1.0);
        let samples: Vec<(f64, f64)> = [0.2, 0.1, 0.05, 0.02, 0.01].iter().map(|&t| (t, s.residual(t, 1).unwrap()[i].norm())).collect();
        let fit = fit_power_law(&samples).unwrap();
        assert!((fit.exponent - 4.0 * p.nu).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn exact_variant_solves_the_sphere_equation() {
        // The exact source leaves a sphere residual O(tau^{N+1}); the printed one O(tau).
        let p = Params::reference();
        let sup = |variant, t: f64| {
            let c = InnerConfig { rmax: 8.0, tail_window: (3.0, 8.0), ..cfg(variant, 1) };
            let s = InnerStack::build(&p, &c).unwrap();
            let res = sphere_residual(&s, t, 1).unwrap();
            s.grid().nodes().iter().zip(res).filter(|(&r, _)| (0.1..=5.0).contains(&r)).map(|(_, v)| v).fold(0.0, f64::max)
        };
        let ts = [0.2, 0.1, 0.05, 0.02];
        let exact: Vec<(f64, f64)> = ts.iter().map(|&t| (t, sup(SourceVariant::Exact, t))).collect();
        let fit = fit_power_law(&exact).unwrap();
        assert!((fit.exponent - 4.0 * p.nu).abs() < 0.2, "{fit:?}");
        let printed: Vec<(f64, f64)> = ts.iter().map(|&t| (t, sup(SourceVariant::Printed, t))).collect();
        let fit = fit_power_law(&printed).unwrap();
        assert!((fit.exponent - 2.0 * p.nu).abs() < 0.1, "{fit:?}");
    }

    #[test]
    fn stereographic_layers() {
        let p = Params::reference();
        let s = InnerStack::build(&p, &cfg(SourceVariant::Exact, 2)).unwrap();
        let w = s.stereo_tails(2).unwrap();
        // w^0 = 1/rho
        assert!((w[0].coeff_at(-1.0, 0) - 1.0).norm() < 1e-14);
        assert!(w[0].coeff_at(-3.0, 0).norm() < 1e-14);
        // w^1 ~ z^1 / 2 at leading order
        let k = p.d() / p.a();
        assert!((w[1].coeff_at(1.0, 1) - k / 2.0).norm() < 1e-12);
        let tab = s.reexpansion(1, 1).unwrap();
        assert!((tab.get(0, 0, 0).unwrap() - 1.0).norm() < 1e-14);
        assert!((tab.get(0, 1, 1).unwrap() - k / 2.0).norm() < 1e-12);
        assert!((tab.get(0, 1, 0).unwrap() + k / 2.0).norm() < 1e-7);
    }
}
