//! Global approximate solution u^(N)(x, t) = e^{(alpha(t) + theta) R} V(lambda(t)|x|, t).
//!
//! V is V_in for rho <= rho_a/2 and otherwise the inverse stereographic image of
//!
//! W_ex = th(rho/rho_a) W_in + (1 - th(rho/rho_a)) th(rho/rho_b) W_ss(t^nu rho)
//!        + (1 - th(rho/rho_b)) t^{-i alpha0} w_rem(t^{nu+1/2} rho),
//!
//! rho_a = t^{-nu+eps1}, rho_b = t^{-nu-eps2}. Beyond 2 delta lambda(t) the profile is k.
//!
//! Residuals are evaluated in the rescaled variable in two zones. Below 2 rho_a the
//! sphere form acts on the deviation D = V - Q, so the harmonic map's own terms cancel
//! analytically. Beyond it the stereographic form acts on W: cutoff derivatives are
//! analytic, the remote piece is exact through jets, and the other pieces are
//! differenced as W - 1/rho, which the operator annihilates.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{fit_power_law, sobolev_norms, FitReport, NormReport, NormWeights};
use crate::error::{Error, Result};
use crate::frame::{frame_at, gamma_of, reconstruct_point};
use crate::grid::{DiffOp, Quadrature, RadialGrid};
use crate::inner::{InnerConfig, InnerStack};
use crate::params::Params;
use crate::remote::{cutoff, RemoteConfig, RemoteFamily};
use crate::selfsim::{derive_matching_data, SelfSimConfig, SelfSimFamily};
use crate::sphere::{cross, h1, h1_prime, h3, kappa, rotate, SphereField, Vec3};
use crate::stereo::{project, unproject};

#[derive(Debug, Clone, PartialEq)]
pub struct GlueConfig {
    pub inner: InnerConfig,
    pub selfsim: SelfSimConfig,
    pub remote: RemoteConfig,
    /// Rescaled grid: [rho_min, rho_max_factor * delta * lambda(t)], per_decade nodes.
    pub rho_min: f64,
    pub rho_max_factor: f64,
    pub per_decade: f64,
    pub fd_order: usize,
    /// Time step of the fourth-order t-differences, relative to t.
    pub dt_rel: f64,
}

impl Default for GlueConfig {
    fn default() -> Self {
        GlueConfig {
            inner: InnerConfig::default(),
            selfsim: SelfSimConfig::default(),
            remote: RemoteConfig::default(),
            rho_min: 1e-3,
            rho_max_factor: 2.5,
            per_decade: 200.0,
            fd_order: 8,
            dt_rel: 2e-3,
        }
    }
}

/// Which formula produced V at a radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Zone {
    Inner,
    Blend,
}

/// The three region families for one parameter set.
pub struct Construction {
    pub params: Params,
    pub config: GlueConfig,
    pub inner: InnerStack,
    pub selfsim: SelfSimFamily,
    pub remote: RemoteFamily,
}

/// V^(N)(., t) on a rescaled grid, with D = V - Q.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub grid: RadialGrid,
    pub v: Vec<Vec3>,
    pub dev: Vec<Vec3>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualReport {
    pub t: f64,
    pub lambda: f64,
    /// Norms of the rescaled residual in L^2(rho drho).
    pub rescaled: NormReport,
    /// Norms of r^(N) in the lab variable: L2, dH1..dH3, H3, weighted_L2.
    pub lab: NormReport,
    /// max |D_t(h) - D_t(h/2)| / max |D_t(h)|.
    pub dt_consistency: f64,
    pub rho: Vec<f64>,
    /// |rescaled residual| at each node.
    pub pointwise: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRow {
    pub name: String,
    pub samples: Vec<(f64, f64)>,
    pub fit: FitReport,
    /// Power of t in the corresponding bound.
    pub expected: f64,
    /// Fitted exponent more than 0.3 below `expected`.
    pub flagged: bool,
}

fn q_minus_k(r: f64) -> Vec3 {
    [h1(r), 0.0, -2.0 / (1.0 + r * r)]
}

/// unproject(w) - k without cancellation.
fn w_minus_k(w: C64) -> Vec3 {
    let n2 = w.norm_sqr();
    let den = 1.0 + n2;
    [2.0 * w.re / den, 2.0 * w.im / den, -2.0 * n2 / den]
}

impl Construction {
    pub fn build(p: &Params, cfg: &GlueConfig) -> Result<Self> {
        p.validate()?;
        let icfg = InnerConfig { layers: cfg.inner.layers.max(p.n + 1), ..cfg.inner.clone() };
        let inner = InnerStack::build(p, &icfg)?;
        let m = derive_matching_data(&inner, p.n)?;
        let scfg = SelfSimConfig { levels: p.n, ..cfg.selfsim.clone() };
        let selfsim = SelfSimFamily::build(p, &scfg, &m)?;
        let remote = RemoteFamily::build(p, &selfsim, &cfg.remote)?;
        Ok(Construction { params: *p, config: cfg.clone(), inner, selfsim, remote })
    }

    pub fn rho_a(&self, t: f64) -> f64 {
        t.powf(-self.params.nu + self.params.eps1)
    }

    pub fn rho_b(&self, t: f64) -> f64 {
        t.powf(-self.params.nu - self.params.eps2)
    }

    /// Beyond this radius V = k.
    pub fn rho_max(&self, t: f64) -> f64 {
        self.config.rho_max_factor * self.params.delta * self.params.lambda(t)
    }

    pub fn zone(&self, rho: f64, t: f64) -> Zone {
        if rho <= 0.5 * self.rho_a(t) {
            Zone::Inner
        } else {
            Zone::Blend
        }
    }

    /// W_in(t^nu rho, t), the stereographic image of V_in.
    pub fn w_in(&self, rho: f64, t: f64) -> Result<C64> {
        let v = self.inner.v_at(rho, t, self.params.n)?;
        project(&v).ok_or(Error::SouthPole(rho))
    }

    /// Blended stereographic profile at each rho (meaningful for rho >= rho_a/2).
    pub fn w_ex(&self, rho: &[f64], t: f64) -> Result<Vec<C64>> {
        let p = &self.params;
        let (ra, rb) = (self.rho_a(t), self.rho_b(t));
        let scale = t.powf(p.nu + 0.5);
        let far: Vec<usize> = (0..rho.len()).filter(|&i| rho[i] > rb && rho[i] < 2.0 * p.delta / scale).collect();
        let rs: Vec<f64> = far.iter().map(|&i| rho[i] * scale).collect();
        let wr = self.remote.profile_at(&rs, t);
        let mut rem = vec![C64::default(); rho.len()];
        for (&i, w) in far.iter().zip(wr) {
            rem[i] = w;
        }
        let phase = C64::new(0.0, -p.alpha0 * t.ln()).exp();
        let ty = t.powf(p.nu);
        rho.iter()
            .enumerate()
            .map(|(i, &r)| {
                let (th1, th2) = (cutoff(r / ra), cutoff(r / rb));
                let mut w = C64::default();
                if th1 > 0.0 {
                    w += self.w_in(r, t)? * th1;
                }
                let wss = (1.0 - th1) * th2;
                if wss > 0.0 {
                    w += self.selfsim.w_ss(ty * r, t, p.n)? * wss;
                }
                if th2 < 1.0 {
                    w += phase * rem[i] * (1.0 - th2);
                }
                Ok(w)
            })
            .collect()
    }

    /// V^(N)(rho, t).
    pub fn v_at(&self, rho: &[f64], t: f64) -> Result<Vec<Vec3>> {
        let (inner, outer): (Vec<usize>, Vec<usize>) = (0..rho.len()).partition(|&i| self.zone(rho[i], t) == Zone::Inner);
        let mut out = vec![[0.0; 3]; rho.len()];
        for i in inner {
            out[i] = self.inner.v_at(rho[i], t, self.params.n)?;
        }
        let rs: Vec<f64> = outer.iter().map(|&i| rho[i]).collect();
        for (&i, w) in outer.iter().zip(self.w_ex(&rs, t)?) {
            out[i] = unproject(w);
        }
        Ok(out)
    }

    /// D = V - Q, formed in the frame chart (inner zone) or from W - (Q - k) elsewhere.
    pub fn deviation(&self, rho: &[f64], t: f64) -> Result<Vec<Vec3>> {
        let (inner, outer): (Vec<usize>, Vec<usize>) = (0..rho.len()).partition(|&i| self.zone(rho[i], t) == Zone::Inner);
        let mut out = vec![[0.0; 3]; rho.len()];
        for i in inner {
            let z = self.inner.z_at(rho[i], t, self.params.n)?;
            if z.norm_sqr() > 1.0 {
                return Err(Error::FrameChartExceeded(rho[i]));
            }
            let g = gamma_of(z.re, z.im);
            let (q, f1, f2) = frame_at(rho[i]);
            out[i] = std::array::from_fn(|c| g * q[c] + z.re * f1[c] + z.im * f2[c]);
        }
        let rs: Vec<f64> = outer.iter().map(|&i| rho[i]).collect();
        for (&i, w) in outer.iter().zip(self.w_ex(&rs, t)?) {
            let (a, b) = (w_minus_k(w), q_minus_k(rho[i]));
            out[i] = std::array::from_fn(|c| a[c] - b[c]);
        }
        Ok(out)
    }

    pub fn rescaled_grid(&self, t: f64) -> Result<RadialGrid> {
        RadialGrid::geometric_per_decade(self.config.rho_min, self.rho_max(t), self.config.per_decade)
    }

    pub fn snapshot(&self, t: f64) -> Result<Snapshot> {
        let grid = self.rescaled_grid(t)?;
        let v = self.v_at(grid.nodes(), t)?;
        let dev = self.deviation(grid.nodes(), t)?;
        Ok(Snapshot { t, grid, v, dev })
    }

    /// u^(N)(r, t) on a lab grid, in the theta = 0 half-plane.
    pub fn lab_field(&self, grid: &RadialGrid, t: f64) -> Result<SphereField> {
        let lam = self.params.lambda(t);
        let rho: Vec<f64> = grid.nodes().iter().map(|r| r * lam).collect();
        let alpha = self.params.alpha(t);
        let v = self.v_at(&rho, t)?.iter().map(|x| rotate(x, alpha)).collect();
        SphereField::new(grid.clone(), v, 1)
    }

    /// e^{alpha R} D(lambda r, t) on a lab grid.
    pub fn lab_deviation(&self, grid: &RadialGrid, t: f64) -> Result<Vec<Vec3>> {
        let lam = self.params.lambda(t);
        let rho: Vec<f64> = grid.nodes().iter().map(|r| r * lam).collect();
        let alpha = self.params.alpha(t);
        Ok(self.deviation(&rho, t)?.iter().map(|x| rotate(x, alpha)).collect())
    }

    /// Fourth-order t-derivative of `f` at fixed rho, and its consistency against h/2.
    fn time_derivative<T, F>(&self, t: f64, f: F) -> Result<(Vec<T>, f64)>
    where
        T: Copy + Default + std::ops::Sub<Output = T> + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T> + Magnitude,
        F: Fn(f64) -> Result<Vec<T>>,
    {
        let h = self.config.dt_rel * t;
        let fd = |h: f64, far: &[Vec<T>; 2]| -> Result<Vec<T>> {
            let (m1, p1) = (f(t - h)?, f(t + h)?);
            Ok((0..m1.len()).map(|i| ((far[0][i] - far[1][i]) + (p1[i] - m1[i]) * 8.0) * (1.0 / (12.0 * h))).collect())
        };
        let (m2, p2) = (f(t - 2.0 * h)?, f(t + 2.0 * h)?);
        let d1 = fd(h, &[m2, p2])?;
        let (m1, p1) = (f(t - h)?, f(t + h)?);
        let d2 = fd(0.5 * h, &[m1, p1])?;
        let scale = d1.iter().fold(0.0f64, |m, x| m.max(x.magnitude()));
        let diff = d1.iter().zip(&d2).fold(0.0f64, |m, (a, b)| m.max((*a - *b).magnitude()));
        Ok((d1, if scale > 0.0 { diff / scale } else { 0.0 }))
    }

    /// Rescaled residual t^{1+2nu} V_t + t^{2nu}(alpha0 R V - (1/2+nu) rho V_rho) - a1 V x DV +
    /// a2 V x (V x DV), DV = Delta V + R^2 V / rho^2. The lab residual is -lambda^2 e^{alpha R}
    /// times this at rho = lambda r. Returns the grid, the field and the t-differencing
    /// consistency.
    pub fn rescaled_residual(&self, t: f64) -> Result<(RadialGrid, Vec<Vec3>, f64)> {
        let grid = self.rescaled_grid(t)?;
        let rho = grid.nodes();
        let split = rho.partition_point(|&r| self.zone(r, t) == Zone::Inner);
        let mut out = vec![[0.0; 3]; rho.len()];
        let (inner, c1) = self.inner_zone_residual(&grid, split, t)?;
        out[..split].copy_from_slice(&inner);
        let (outer, c2) = self.outer_zone_residual(&grid, split, t)?;
        out[split..].copy_from_slice(&outer);
        Ok((grid, out, c1.max(c2)))
    }

    fn pad(&self) -> usize {
        self.config.fd_order / 2 + 2
    }

    /// Nodes [i0, i1) as a grid of their own (the parent is geometric).
    fn window(grid: &RadialGrid, i0: usize, i1: usize) -> Result<RadialGrid> {
        let n = grid.nodes();
        RadialGrid::geometric(n[i0], n[i1 - 1], i1 - i0)
    }

    /// Residual on nodes [0, split) from the deviation D = V - Q, whose harmonic-map part
    /// cancels analytically (DQ = kappa Q).
    fn inner_zone_residual(&self, grid: &RadialGrid, split: usize, t: f64) -> Result<(Vec<Vec3>, f64)> {
        if split == 0 {
            return Ok((Vec::new(), 0.0));
        }
        let p = &self.params;
        let end = (split + self.pad()).min(grid.len());
        let sub = Self::window(grid, 0, end)?;
        let rho = sub.nodes();
        let dev = self.deviation(rho, t)?;
        let (dt, cons) = self.time_derivative(t, |s| Ok(self.deviation(rho, s)?.into_iter().map(V3).collect()))?;
        let op = DiffOp::new(&sub, self.config.fd_order)?;
        let comps: Vec<Vec<f64>> = (0..3).map(|c| dev.iter().map(|v| v[c]).collect()).collect();
        let lap: Vec<Vec<f64>> = comps.iter().map(|c| op.laplacian(c)).collect();
        let drv: Vec<Vec<f64>> = comps.iter().map(|c| op.dr(c)).collect();
        let tau = t.powf(2.0 * p.nu);
        let tt = t.powf(1.0 + 2.0 * p.nu);
        let out = (0..split)
            .map(|i| {
                let r = rho[i];
                let d = dev[i];
                let q = [h1(r), 0.0, h3(r)];
                let qr = [h1_prime(r), 0.0, h1(r).powi(2) / r];
                let v: Vec3 = std::array::from_fn(|c| q[c] + d[c]);
                let dd = [lap[0][i] - d[0] / (r * r), lap[1][i] - d[1] / (r * r), lap[2][i]];
                // V x (kappa Q + DD) with V x Q = D x Q.
                let dq = cross(&d, &q);
                let vdd = cross(&v, &dd);
                let a: Vec3 = std::array::from_fn(|c| kappa(r) * dq[c] + vdd[c]);
                let b = cross(&v, &a);
                let rv = [-v[1], v[0], 0.0];
                std::array::from_fn(|c| {
                    let rvr = r * (qr[c] + drv[c][i]);
                    tt * dt[i].0[c] + tau * (p.alpha0 * rv[c] - (0.5 + p.nu) * rvr) - p.a1 * a[c] + p.a2 * b[c]
                })
            })
            .collect();
        Ok((out, cons))
    }

    /// Residual on nodes [split, len) from the stereographic form
    ///
    /// E = i t^{1+2nu} W_t - t^{2nu}(alpha0 W + i(1/2+nu) rho W_rho) - A[-Delta W + W/rho^2 + G(W)],
    ///
    /// mapped back by the differential of the inverse chart: residual = -dPi^{-1}(i E).
    /// Cutoff derivatives are analytic, the remote piece is exact, and the inner and
    /// self-similar pieces are differenced after removing 1/rho (the image of Q), which the
    /// operator annihilates.
    fn outer_zone_residual(&self, grid: &RadialGrid, split: usize, t: f64) -> Result<(Vec<Vec3>, f64)> {
        let p = &self.params;
        let n = grid.len();
        if split >= n {
            return Ok((Vec::new(), 0.0));
        }
        let rho_all = grid.nodes();
        let rho = &rho_all[split..];
        let m = rho.len();
        let (ra, rb) = (self.rho_a(t), self.rho_b(t));
        // Cutoff weights with rho- and t-derivatives: (value, d_rho, d_rho^2, d_t).
        let weight = |scale: f64, rate: f64| -> Vec<[f64; 4]> {
            let xi: Vec<f64> = rho.iter().map(|r| r / scale).collect();
            let j = crate::remote::cutoff_jets(&xi, 3, 1.0);
            let (v, d1, d2) = (j.values(), j.derivative(1), j.derivative(2));
            (0..m).map(|i| [v[i].re, d1[i].re / scale, d2[i].re / (scale * scale), d1[i].re * xi[i] * rate / t]).collect()
        };
        let th1 = weight(ra, p.nu - p.eps1);
        let th2 = weight(rb, p.nu + p.eps2);
        // a = th1, b = (1 - th1) th2, c = 1 - th2.
        let wa = th1.clone();
        let wb: Vec<[f64; 4]> = (0..m)
            .map(|i| {
                let (x, y) = (th1[i], th2[i]);
                let u = [1.0 - x[0], -x[1], -x[2], -x[3]];
                [u[0] * y[0], u[1] * y[0] + u[0] * y[1], u[2] * y[0] + 2.0 * u[1] * y[1] + u[0] * y[2], u[3] * y[0] + u[0] * y[3]]
            })
            .collect();
        let wc: Vec<[f64; 4]> = th2.iter().map(|y| [1.0 - y[0], -y[1], -y[2], -y[3]]).collect();
        let live = |w: &[[f64; 4]]| -> Option<(usize, usize)> {
            let idx: Vec<usize> = (0..m).filter(|&i| w[i].iter().any(|x| *x != 0.0)).collect();
            Some((*idx.first()?, *idx.last()? + 1))
        };
        // Pieces minus 1/rho, as (value, d_rho, d_rho^2, d_t) on the live range of their weight.
        type Piece = (Vec<[f64; 4]>, Vec<[C64; 4]>, usize);
        let mut pieces: Vec<Piece> = Vec::new();
        let mut consistency = 0.0f64;
        let pad = self.pad();
        let ty = |s: f64| s.powf(p.nu);
        for (w, which) in [(&wa, 0usize), (&wb, 1)] {
            let Some((i0, i1)) = live(w) else { continue };
            // Padded window in parent indices.
            let (g0, g1) = ((split + i0).saturating_sub(pad), (split + i1 + pad).min(n));
            let sub = Self::window(grid, g0, g1)?;
            let r = sub.nodes().to_vec();
            let eval = |s: f64| -> Result<Vec<C64>> {
                r.iter()
                    .map(|&x| {
                        let w = if which == 0 { self.w_in(x, s)? } else { self.selfsim.w_ss(ty(s) * x, s, p.n)? };
                        Ok(w - 1.0 / x)
                    })
                    .collect()
            };
            let v = eval(t)?;
            let (vt, c) = self.time_derivative(t, eval)?;
            consistency = consistency.max(c);
            let op = DiffOp::new(&sub, self.config.fd_order)?;
            let d1 = op.dr(&v);
            let d2 = op.dr(&d1);
            let off = split + i0 - g0;
            let vals = (0..i1 - i0).map(|k| [v[off + k], d1[off + k], d2[off + k], vt[off + k]]).collect();
            pieces.push((w[i0..i1].to_vec(), vals, i0));
        }
        if let Some((i0, i1)) = live(&wc) {
            let s = t.powf(p.nu + 0.5);
            let r: Vec<f64> = rho[i0..i1].iter().map(|x| x * s).collect();
            let [w, wr, wrr, wt] = self.remote.profile_derivatives(&r, t);
            let phase = C64::new(0.0, -p.alpha0 * t.ln()).exp();
            let vals = (0..i1 - i0)
                .map(|k| {
                    let x = rho[i0 + k];
                    let ct = phase * (w[k] * C64::new(0.0, -p.alpha0 / t) + wr[k] * r[k] * (p.nu + 0.5) / t + wt[k]);
                    [phase * w[k] - 1.0 / x, phase * wr[k] * s + 1.0 / (x * x), phase * wrr[k] * s * s - 2.0 / (x * x * x), ct]
                })
                .collect();
            pieces.push((wc[i0..i1].to_vec(), vals, i0));
        }
        // Blend: W - 1/rho = sum_i w_i (P_i - 1/rho) since the weights sum to one.
        let mut wt = vec![[C64::default(); 4]; m];
        for (w, vals, i0) in &pieces {
            for (k, (wk, pk)) in w.iter().zip(vals).enumerate() {
                let o = &mut wt[i0 + k];
                o[0] += pk[0] * wk[0];
                o[1] += pk[1] * wk[0] + pk[0] * wk[1];
                o[2] += pk[2] * wk[0] + pk[1] * (2.0 * wk[1]) + pk[0] * wk[2];
                o[3] += pk[3] * wk[0] + pk[0] * wk[3];
            }
        }
        let a = p.a();
        let tau = t.powf(2.0 * p.nu);
        let tt = t.powf(1.0 + 2.0 * p.nu);
        let phase = C64::new(0.0, -p.alpha0 * t.ln()).exp();
        let _ = phase;
        let i = C64::i();
        let out = (0..m)
            .map(|k| {
                let r = rho[k];
                let [z, zr, zrr, zt] = wt[k];
                let w = z + 1.0 / r;
                let lin = -(zrr + zr / r) + z / (r * r);
                // W_rho^2 - W^2/rho^2 = (W_rho - W/rho)(W_rho + W/rho), the second factor free of 1/rho.
                let g = 2.0 * w.conj() * (zr - z / r - 2.0 / (r * r)) * (zr + z / r) / (1.0 + w.norm_sqr());
                let rwr = r * zr - 1.0 / r;
                let e = i * tt * zt - tau * (p.alpha0 * w + i * (0.5 + p.nu) * rwr) - a * (lin + g);
                let dv = inverse_chart_differential(w, i * e);
                [-dv[0], -dv[1], -dv[2]]
            })
            .collect();
        Ok((out, consistency))
    }

    /// r^(N) = -u_t + a1 u x Delta u - a2 u x (u x Delta u) and its norms.
    pub fn global_residual(&self, t: f64) -> Result<ResidualReport> {
        let lam = self.params.lambda(t);
        let (grid, res, dt_consistency) = self.rescaled_residual(t)?;
        let comps: Vec<Vec<C64>> = (0..3).map(|c| res.iter().map(|v| C64::new(v[c], 0.0)).collect()).collect();
        let rescaled = sobolev_norms(&grid, &comps, NormWeights { max_order: 3, weighted: false }, Some(t))?;
        // f(x) = lambda^2 g(lambda x): ||d^j f||_{L^2(r dr)} = lambda^{1+j} ||d^j g||_{L^2(rho drho)}.
        let mut lab = std::collections::BTreeMap::new();
        let l2 = lam * rescaled.get("L2");
        lab.insert("L2".to_string(), l2);
        let mut acc = l2 * l2;
        for j in 1..=3 {
            let v = lam.powi(1 + j) * rescaled.get(&format!("dH{j}"));
            lab.insert(format!("dH{j}"), v);
            acc += v * v;
            lab.insert(format!("H{j}"), acc.sqrt());
        }
        let q = Quadrature::new(&grid, 4)?;
        let dens: Vec<f64> = grid
            .nodes()
            .iter()
            .zip(&res)
            .map(|(rho, v)| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) * (1.0 + (rho / lam).powi(2)))
            .collect();
        lab.insert("weighted_L2".to_string(), lam * q.integral_rdr(&dens).max(0.0).sqrt());
        let lab = NormReport { values: lab, rmin: grid.rmin() / lam, rmax: grid.rmax() / lam, nodes: grid.len(), t: Some(t) };
        let pointwise = res.iter().map(crate::sphere::norm).collect();
        Ok(ResidualReport { t, lambda: lam, rescaled, lab, dt_consistency, rho: grid.nodes().to_vec(), pointwise })
    }

    /// Largest |W_ex - W_in| at 16 points of [rho_a, 2 rho_a]: the jump the blend introduces.
    pub fn continuity_jump(&self, t: f64) -> Result<f64> {
        let ra = self.rho_a(t);
        let rho: Vec<f64> = (0..16).map(|k| ra * (1.0 + k as f64 / 15.0)).collect();
        let wex = self.w_ex(&rho, t)?;
        rho.iter().zip(wex).try_fold(0.0f64, |m, (&r, w)| Ok(m.max((w - self.w_in(r, t)?).norm())))
    }

    /// Norms of Z = V - Q over `ts` with fitted t-exponents against the bounds' powers.
    pub fn estimate_suite(&self, ts: &[f64]) -> Result<Vec<EstimateRow>> {
        let nu = self.params.nu;
        let keys: Vec<(&str, f64)> = vec![
            ("k1l0", 0.0),
            ("k0l1", 0.0),
            ("sup_rho_dr", 0.0),
            ("k2l0", 0.5 + nu),
            ("k1l1", 0.5 + nu),
            ("k0l2", 0.5 + nu),
            ("k3l0", 2.0 * nu),
            ("k2l1", 2.0 * nu),
            ("k1l2", 2.0 * nu),
            ("k0l3", 2.0 * nu),
            ("sup_k0l1", nu),
            ("sup_k2l0", 2.0 * nu),
            ("sup_k1l1", 2.0 * nu),
            ("sup_k0l2", 2.0 * nu),
            ("sup_k3l0", 2.0 * nu),
            ("sup_k2l1", 2.0 * nu),
            ("sup_k1l2", 2.0 * nu),
            ("sup_k0l3", 2.0 * nu),
        ];
        let mut samples: Vec<Vec<(f64, f64)>> = vec![Vec::new(); keys.len()];
        for &t in ts {
            let s = self.snapshot(t)?;
            let comps: Vec<Vec<C64>> = (0..3).map(|c| s.dev.iter().map(|v| C64::new(v[c], 0.0)).collect()).collect();
            let rep = sobolev_norms(&s.grid, &comps, NormWeights { max_order: 3, weighted: false }, Some(t))?;
            let op = DiffOp::new(&s.grid, self.config.fd_order)?;
            let dr: Vec<Vec<f64>> = (0..3).map(|c| op.dr(&comps[c].iter().map(|z| z.re).collect::<Vec<_>>())).collect();
            let sup_rho_dr = s
                .grid
                .nodes()
                .iter()
                .enumerate()
                .map(|(i, r)| r * (dr[0][i].powi(2) + dr[1][i].powi(2) + dr[2][i].powi(2)).sqrt())
                .fold(0.0, f64::max);
            for (k, (name, _)) in keys.iter().enumerate() {
                let v = if *name == "sup_rho_dr" { sup_rho_dr } else { rep.get(name) };
                samples[k].push((t, v));
            }
        }
        keys.iter()
            .zip(samples)
            .map(|(&(name, expected), samples)| {
                let fit = fit_power_law(&samples)?;
                Ok(EstimateRow { name: name.to_string(), samples, fit, expected, flagged: fit.exponent < expected - 0.3 })
            })
            .collect()
    }

    /// dH1 + dH2 lab distance between the deviations at t and t/2 on a common lab grid.
    pub fn cauchy_distance(&self, t: f64, grid: &RadialGrid) -> Result<f64> {
        let (a, b) = (self.lab_deviation(grid, t)?, self.lab_deviation(grid, 0.5 * t)?);
        let comps: Vec<Vec<C64>> = (0..3).map(|c| a.iter().zip(&b).map(|(x, y)| C64::new(x[c] - y[c], 0.0)).collect()).collect();
        let rep = sobolev_norms(grid, &comps, NormWeights { max_order: 2, weighted: false }, Some(t))?;
        Ok(rep.get("dH1") + rep.get("dH2"))
    }
}

/// d/de unproject(w + e dw) at e = 0.
pub fn inverse_chart_differential(w: C64, dw: C64) -> Vec3 {
    let n = 1.0 + w.norm_sqr();
    let s = 2.0 * (w.conj() * dw).re;
    [2.0 * dw.re / n - 2.0 * w.re * s / (n * n), 2.0 * dw.im / n - 2.0 * w.im * s / (n * n), -2.0 * s / (n * n)]
}

/// Sup-norm used to compare finite differences.
pub trait Magnitude {
    fn magnitude(&self) -> f64;
}

impl Magnitude for C64 {
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

/// A 3-vector with the arithmetic needed for differencing.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct V3(pub Vec3);

impl std::ops::Add for V3 {
    type Output = V3;
    fn add(self, o: V3) -> V3 {
        V3(std::array::from_fn(|c| self.0[c] + o.0[c]))
    }
}

impl std::ops::Sub for V3 {
    type Output = V3;
    fn sub(self, o: V3) -> V3 {
        V3(std::array::from_fn(|c| self.0[c] - o.0[c]))
    }
}

impl std::ops::Mul<f64> for V3 {
    type Output = V3;
    fn mul(self, s: f64) -> V3 {
        V3(self.0.map(|x| x * s))
    }
}

impl Magnitude for V3 {
    fn magnitude(&self) -> f64 {
        crate::sphere::norm(&self.0)
    }
}

/// Reconstructs V from D = V - Q (used to cross-check the two charts).
pub fn from_deviation(rho: f64, d: &Vec3) -> Vec3 {
    let q = reconstruct_point(0.0, 0.0, 0.0, rho);
    std::array::from_fn(|c| q[c] + d[c])
}
