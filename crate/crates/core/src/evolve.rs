//! Forward time stepping of the equivariant flow and the perturbation monitors.
//!
//! In x = ln r the equivariant energy is pi int (|v_x|^2 + v1^2 + v2^2) dx and
//! Delta v + R^2 v / r^2 = (v_xx - P v) / r^2 with P = diag(1, 1, 0). The stepper
//! discretises v_xx with a symmetric stencil on the uniform x grid, so the discrete
//! operator D is minus the gradient of a discrete energy E_h (weighted by r^2), and the
//! implicit midpoint rule satisfies
//!
//!   E_h(v^{n+1}) - E_h(v^n) = -2 pi h dt a2 sum_i r_i^2 |m_i x (Dm)_i|^2,  m = (v^n + v^{n+1})/2,
//!
//! exactly up to the Newton tolerance. |v| is also preserved by the midpoint rule; the
//! pointwise projection afterwards only removes solver-level drift.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{detect_scale, field_difference_norms, NormWeights};
use crate::error::{Error, Result};
use crate::glue::{Construction, GlueConfig};
use crate::grid::{DiffOp, Quadrature, RadialGrid, Spacing};
use crate::params::Params;
use crate::sphere::{cross, dot, energy, kappa, normalize, SphereField, Vec3};

/// Time step selection. `Capped` applies the explicit-scheme bound
/// dt <= c (dr_min)^2 / max(a2, 0.1); the midpoint stepper does not need it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DtPolicy {
    Fixed(f64),
    Capped { dt_max: f64, c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub dt: DtPolicy,
    /// 2 or 4. The ends are pinned through order/2 ghost nodes held at their initial values.
    pub spatial_order: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_halvings: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig { dt: DtPolicy::Fixed(2e-4), spatial_order: 4, newton_tol: 1e-12, max_newton: 16, max_halvings: 8 }
    }
}

/// a1 v x Dv - a2 v x (v x Dv), Dv = Delta v + R^2 v / r^2, on any grid.
pub fn rhs(f: &SphereField, a1: f64, a2: f64) -> Result<Vec<Vec3>> {
    let g = f.grid();
    let d = DiffOp::new(g, 4)?;
    let comps: Vec<Vec<f64>> = (0..3).map(|c| d.laplacian(&f.component(c))).collect();
    Ok(f
        .values()
        .iter()
        .zip(g.nodes())
        .enumerate()
        .map(|(i, (v, &r))| {
            let dv = [comps[0][i] - v[0] / (r * r), comps[1][i] - v[1] / (r * r), comps[2][i]];
            landau_lifshitz(a1, a2, v, &dv)
        })
        .collect())
}

/// max |(rhs_i, v_i)| / max(1, |rhs_i|): tangency up to rounding relative to the rhs size.
pub fn tangency_defect(f: &SphereField, r: &[Vec3]) -> f64 {
    f.values()
        .iter()
        .zip(r)
        .map(|(v, x)| dot(v, x).abs() / dot(x, x).sqrt().max(1.0))
        .fold(0.0, f64::max)
}

#[inline]
fn landau_lifshitz(a1: f64, a2: f64, v: &Vec3, dv: &Vec3) -> Vec3 {
    let c = cross(v, dv);
    let cc = cross(v, &c);
    std::array::from_fn(|k| a1 * c[k] - a2 * cc[k])
}

type Mat3 = [[f64; 3]; 3];

fn skew(a: &Vec3) -> Mat3 {
    [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Banded matrix with Gaussian elimination and partial pivoting.
///
/// Row i stores columns i - kl ..= i + ku + kl (the extra kl absorbs pivoting fill-in).
struct Banded {
    n: usize,
    kl: usize,
    ku: usize,
    a: Vec<f64>,
}

impl Banded {
    fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Banded { n, kl, ku, a: vec![0.0; n * (2 * kl + ku + 1)] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.ku + self.kl);
        i * (2 * self.kl + self.ku + 1) + (j + self.kl - i)
    }

    fn add(&mut self, i: usize, j: usize, x: f64) {
        let k = self.idx(i, j);
        self.a[k] += x;
    }

    /// Solves in place; `None` on a zero pivot.
    fn solve(mut self, b: &mut [f64]) -> Option<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let scale = self.a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let p = (k..=last).max_by(|&x, &y| self.a[self.idx(x, k)].abs().total_cmp(&self.a[self.idx(y, k)].abs()))?;
            let piv = self.a[self.idx(p, k)];
            if !(piv.abs() > 1e-14 * scale) {
                return None;
            }
            let jmax = (k + ku + kl).min(n - 1);
            if p != k {
                for j in k..=jmax {
                    let (x, y) = (self.idx(k, j), self.idx(p, j));
                    self.a.swap(x, y);
                }
                b.swap(k, p);
            }
            for i in k + 1..=last {
                let f = self.a[self.idx(i, k)] / piv;
                if f == 0.0 {
                    continue;
                }
                for j in k..=jmax {
                    let v = self.a[self.idx(k, j)];
                    let x = self.idx(i, j);
                    self.a[x] -= f * v;
                }
                b[i] -= f * b[k];
            }
        }
        for k in (0..n).rev() {
            let jmax = (k + ku + kl).min(n - 1);
            let mut s = b[k];
            for j in k + 1..=jmax {
                s -= self.a[self.idx(k, j)] * b[j];
            }
            b[k] = s / self.a[self.idx(k, k)];
        }
        Some(())
    }
}

/// Midpoint stepper on a geometric grid with pinned ends.
#[derive(Debug, Clone)]
pub struct Stepper {
    a1: f64,
    a2: f64,
    r: Vec<f64>,
    h: f64,
    /// Offsets and weights of h^2 v_xx.
    stencil: Vec<(isize, f64)>,
    /// Pair weights c_k of the energy sum_k c_k |v_{i+k} - v_i|^2 / h^2.
    pairs: Vec<(usize, f64)>,
    ghosts: usize,
    cfg: SchemeConfig,
}

/// Per-step bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub dt: f64,
    pub substeps: usize,
    pub newton_iterations: usize,
    /// Largest discrete-energy increase over the substeps (negative when dissipating).
    pub energy_increase: f64,
}

impl Stepper {
    pub fn new(grid: &RadialGrid, a1: f64, a2: f64, cfg: &SchemeConfig) -> Result<Self> {
        if grid.spacing() != Spacing::Geometric {
            return Err(Error::InvalidGrid("the stepper needs a geometric grid".into()));
        }
        let (stencil, pairs, ghosts) = match cfg.spatial_order {
            2 => (vec![(-1, 1.0), (0, -2.0), (1, 1.0)], vec![(1, 1.0)], 1),
            4 => (
                vec![(-2, -1.0 / 12.0), (-1, 16.0 / 12.0), (0, -30.0 / 12.0), (1, 16.0 / 12.0), (2, -1.0 / 12.0)],
                vec![(1, 16.0 / 12.0), (2, -1.0 / 12.0)],
                2,
            ),
            o => return Err(Error::InvalidParams(format!("spatial order {o} (expected 2 or 4)"))),
        };
        if grid.len() < 2 * ghosts + 3 {
            return Err(Error::TooFewNodes(grid.len(), 2 * ghosts + 3));
        }
        match cfg.dt {
            DtPolicy::Fixed(dt) if !(dt > 0.0) => return Err(Error::InvalidParams("dt must be positive".into())),
            DtPolicy::Capped { dt_max, c } if !(dt_max > 0.0 && c > 0.0) => {
                return Err(Error::InvalidParams("dt cap must be positive".into()))
            }
            _ => {}
        }
        Ok(Stepper { a1, a2, r: grid.nodes().to_vec(), h: grid.step(), stencil, pairs, ghosts, cfg: cfg.clone() })
    }

    pub fn dt(&self) -> f64 {
        match self.cfg.dt {
            DtPolicy::Fixed(dt) => dt,
            DtPolicy::Capped { dt_max, c } => {
                let dr = self.r[1] - self.r[0];
                dt_max.min(c * dr * dr / self.a2.max(0.1))
            }
        }
    }

    fn interior(&self) -> std::ops::Range<usize> {
        self.ghosts..self.r.len() - self.ghosts
    }

    /// (Dv)_i at an interior node.
    #[inline]
    fn d_at(&self, v: &[Vec3], i: usize) -> Vec3 {
        let r2 = self.r[i] * self.r[i];
        let h2 = self.h * self.h;
        let mut x = [0.0; 3];
        for &(k, w) in &self.stencil {
            let vk = &v[(i as isize + k) as usize];
            for c in 0..3 {
                x[c] += w * vk[c];
            }
        }
        [(x[0] / h2 - v[i][0]) / r2, (x[1] / h2 - v[i][1]) / r2, x[2] / h2 / r2]
    }

    /// E_h = pi h [sum_k c_k sum_i |v_{i+k} - v_i|^2 / h^2 + sum_i (v1^2 + v2^2)].
    pub fn discrete_energy(&self, v: &[Vec3]) -> f64 {
        let mut grad = 0.0;
        for &(k, c) in &self.pairs {
            let s: f64 = (0..v.len() - k)
                .map(|i| (0..3).map(|j| (v[i + k][j] - v[i][j]).powi(2)).sum::<f64>())
                .sum();
            grad += c * s;
        }
        let pot: f64 = v.iter().map(|x| x[0] * x[0] + x[1] * x[1]).sum();
        std::f64::consts::PI * self.h * (grad / (self.h * self.h) + pot)
    }

    fn residual(&self, v0: &[Vec3], u: &[Vec3], dt: f64) -> (Vec<Vec3>, Vec<f64>) {
        let m: Vec<Vec3> = v0.iter().zip(u).map(|(a, b)| std::array::from_fn(|c| 0.5 * (a[c] + b[c]))).collect();
        let mut g = Vec::with_capacity(3 * (self.r.len() - 2 * self.ghosts));
        for i in self.interior() {
            let f = landau_lifshitz(self.a1, self.a2, &m[i], &self.d_at(&m, i));
            for c in 0..3 {
                g.push(u[i][c] - v0[i][c] - dt * f[c]);
            }
        }
        (m, g)
    }

    /// I - dt/2 dF(m): blocks B_i s_k / r_i^2 off the diagonal and A_i - B_i P / r_i^2 on it,
    /// B = a1 [m]x - a2 [m]x^2, A = -a1 [X]x + a2 [m x X]x + a2 [m]x [X]x, X = Dm.
    fn jacobian(&self, m: &[Vec3], dt: f64) -> Banded {
        let g = self.ghosts;
        let n = 3 * (self.r.len() - 2 * g);
        let band = 3 * g + 2;
        let mut jac = Banded::zeros(n, band, band);
        let h2 = self.h * self.h;
        for i in self.interior() {
            let r2 = self.r[i] * self.r[i];
            let x = self.d_at(m, i);
            let (sm, sx) = (skew(&m[i]), skew(&x));
            let smm = matmul(&sm, &sm);
            let smx = matmul(&sm, &sx);
            let sxm = skew(&cross(&m[i], &x));
            let b: Mat3 = std::array::from_fn(|p| std::array::from_fn(|q| self.a1 * sm[p][q] - self.a2 * smm[p][q]));
            let a: Mat3 =
                std::array::from_fn(|p| std::array::from_fn(|q| -self.a1 * sx[p][q] + self.a2 * (sxm[p][q] + smx[p][q])));
            let row = 3 * (i - g);
            for &(k, w) in &self.stencil {
                let j = (i as isize + k) as usize;
                if j < g || j >= self.r.len() - g {
                    continue;
                }
                let col = 3 * (j - g);
                let s = w / h2 / r2;
                for p in 0..3 {
                    for q in 0..3 {
                        jac.add(row + p, col + q, -0.5 * dt * b[p][q] * s);
                    }
                }
            }
            for p in 0..3 {
                jac.add(row + p, row + p, 1.0);
                for q in 0..3 {
                    let pb = if q < 2 { b[p][q] / r2 } else { 0.0 };
                    jac.add(row + p, row + q, -0.5 * dt * (a[p][q] - pb));
                }
            }
        }
        jac
    }

    /// One midpoint step of size dt by Newton's method, then projection.
    fn try_step(&self, v0: &[Vec3], dt: f64) -> Option<(Vec<Vec3>, usize)> {
        let g = self.ghosts;
        let mut u = v0.to_vec();
        for it in 1..=self.cfg.max_newton {
            let (m, res) = self.residual(v0, &u, dt);
            let mut rhs: Vec<f64> = res.iter().map(|x| -x).collect();
            self.jacobian(&m, dt).solve(&mut rhs)?;
            let mut step = 0.0f64;
            for (p, i) in self.interior().enumerate() {
                for c in 0..3 {
                    u[i][c] += rhs[3 * p + c];
                    step = step.max(rhs[3 * p + c].abs());
                }
            }
            if !step.is_finite() {
                return None;
            }
            if step <= self.cfg.newton_tol {
                for x in &mut u[g..self.r.len() - g] {
                    *x = normalize(x);
                }
                return Some((u, it));
            }
        }
        None
    }

    /// Advances `v` by dt, halving up to `max_halvings` times on Newton failure.
    pub fn step(&self, v: &mut Vec<Vec3>, t: f64, dt: f64) -> Result<StepInfo> {
        let mut info = StepInfo { dt, substeps: 0, newton_iterations: 0, energy_increase: f64::NEG_INFINITY };
        for halvings in 0..=self.cfg.max_halvings {
            let parts = 1usize << halvings;
            let sub = dt / parts as f64;
            let mut w = v.clone();
            let mut ok = true;
            let mut its = 0;
            let mut inc = f64::NEG_INFINITY;
            for _ in 0..parts {
                let e0 = self.discrete_energy(&w);
                match self.try_step(&w, sub) {
                    Some((next, k)) => {
                        its += k;
                        inc = inc.max(self.discrete_energy(&next) - e0);
                        w = next;
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                *v = w;
                info.substeps = parts;
                info.newton_iterations = its;
                info.energy_increase = inc;
                return Ok(info);
            }
        }
        Err(Error::StepFailure { t, reason: format!("Newton failed after {} halvings", self.cfg.max_halvings) })
    }
}

/// Stepper state with its monitor history.
#[derive(Debug, Clone)]
pub struct EvolutionState {
    pub field: SphereField,
    pub t: f64,
    pub scheme: SchemeConfig,
    pub history: Vec<TrajectorySample>,
    pub steps: Vec<StepInfo>,
    stepper: Stepper,
}

impl EvolutionState {
    pub fn new(field: SphereField, t: f64, a1: f64, a2: f64, scheme: &SchemeConfig) -> Result<Self> {
        let stepper = Stepper::new(field.grid(), a1, a2, scheme)?;
        Ok(EvolutionState { field, t, scheme: scheme.clone(), history: Vec::new(), steps: Vec::new(), stepper })
    }

    pub fn discrete_energy(&self) -> f64 {
        self.stepper.discrete_energy(self.field.values())
    }

    pub fn step_by(&mut self, dt: f64) -> Result<StepInfo> {
        let mut v = self.field.values().to_vec();
        let info = self.stepper.step(&mut v, self.t, dt)?;
        self.field = SphereField::new(self.field.grid().clone(), v, self.field.equivariance())?;
        self.t += dt;
        self.steps.push(info);
        Ok(info)
    }

    pub fn step(&mut self) -> Result<StepInfo> {
        self.step_by(self.stepper.dt())
    }

    /// Steps of the policy size, the last one shortened to land on `t_end`.
    pub fn advance_to(&mut self, t_end: f64) -> Result<()> {
        let dt = self.stepper.dt();
        let n = ((t_end - self.t) / dt * (1.0 - 1e-12)).ceil().max(0.0) as usize;
        if n == 0 {
            return Ok(());
        }
        let h = (t_end - self.t) / n as f64;
        for _ in 0..n {
            self.step_by(h)?;
        }
        self.t = t_end;
        Ok(())
    }
}

/// Monitor functionals of S(rho) = e^{-alpha R}(u - u^(N))(rho / lambda) in rescaled variables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Monitors {
    /// int |S|^2.
    pub j0: f64,
    /// int |grad S|^2 + kappa(rho) |S|^2.
    pub j1: f64,
    /// int |y|^2 |S|^2, y = t^nu rho.
    pub weighted: f64,
    /// t^{2+4nu} int |grad s_t|^2 + t^{1+2nu} int kappa |s_t|^2, when a time difference is given.
    pub j3proxy: Option<f64>,
}

/// Monitors from a lab-frame difference `s` (and optionally its time derivative) on `grid`.
///
/// int f(rho) rho drho = lambda^2 int f(lambda r) r dr; the Dirichlet integral is scale
/// invariant, so it is taken directly in r. s_t is differenced at fixed lab radius.
pub fn monitors(grid: &RadialGrid, s: &[Vec3], s_t: Option<&[Vec3]>, lambda: f64, t: f64, nu: f64) -> Result<Monitors> {
    let d = DiffOp::new(grid, 4)?;
    let q = Quadrature::new(grid, 4)?;
    let r = grid.nodes();
    let lam2 = lambda * lambda;
    let dirichlet = |f: &[Vec3]| -> (f64, f64, f64) {
        let mut grad = vec![0.0; r.len()];
        for c in 0..3 {
            let fc: Vec<f64> = f.iter().map(|x| x[c]).collect();
            for (g, x) in grad.iter_mut().zip(d.dr(&fc)) {
                *g += x * x;
            }
        }
        for (i, g) in grad.iter_mut().enumerate() {
            *g += (f[i][0].powi(2) + f[i][1].powi(2)) / (r[i] * r[i]);
        }
        let sq: Vec<f64> = f.iter().map(|x| dot(x, x)).collect();
        let pot: Vec<f64> = sq.iter().zip(r).map(|(x, &ri)| kappa(lambda * ri) * x).collect();
        (q.integral_rdr(&grad), lam2 * q.integral_rdr(&pot), lam2 * q.integral_rdr(&sq))
    };
    let (grad, pot, l2) = dirichlet(s);
    let wdens: Vec<f64> = s.iter().zip(r).map(|(x, &ri)| dot(x, x) * ri * ri / t).collect();
    let weighted = lam2 * q.integral_rdr(&wdens);
    let j3proxy = s_t.map(|st| {
        let (g, p, _) = dirichlet(st);
        t.powf(2.0 + 4.0 * nu) * g + t.powf(1.0 + 2.0 * nu) * p
    });
    Ok(Monitors { j0: l2, j1: grad + pot, weighted, j3proxy })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveConfig {
    pub scheme: SchemeConfig,
    pub glue: GlueConfig,
    /// Lab grid: [rmin_factor / lambda(t1), rmax_factor * delta], per_decade nodes.
    pub rmin_factor: f64,
    pub rmax_factor: f64,
    pub per_decade: f64,
    /// Number of sampling intervals on [t1, t0].
    pub samples: usize,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig {
            scheme: SchemeConfig::default(),
            glue: GlueConfig::default(),
            rmin_factor: 1e-4,
            rmax_factor: 4.0,
            per_decade: 120.0,
            samples: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub h1: f64,
    pub h3: f64,
    pub weighted_l2: f64,
    pub energy: f64,
    pub discrete_energy: f64,
    pub monitors: Monitors,
    pub r_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub params: Params,
    pub t1: f64,
    pub t0: f64,
    pub samples: Vec<TrajectorySample>,
    pub steps: usize,
    pub halvings: usize,
    /// Largest per-step increase of the discrete energy.
    pub max_energy_increase: f64,
    /// Steps whose discrete energy rose by more than 1e-10.
    pub energy_violations: usize,
    pub sup_h1: f64,
    /// Some sample exceeds 10 times the first nonzero H1 distance.
    pub exploding: bool,
}

fn sample(state: &EvolutionState, cons: &Construction, prev: Option<(&[Vec3], f64)>) -> Result<(TrajectorySample, Vec<Vec3>)> {
    let p = &cons.params;
    let t = state.t;
    let grid = state.field.grid();
    let reference = cons.lab_field(grid, t)?;
    let norms = field_difference_norms(&state.field, &reference, NormWeights::default(), Some(t))?;
    let diff: Vec<Vec3> =
        state.field.values().iter().zip(reference.values()).map(|(a, b)| std::array::from_fn(|c| a[c] - b[c])).collect();
    let st: Option<Vec<Vec3>> =
        prev.map(|(old, dt)| diff.iter().zip(old).map(|(a, b)| std::array::from_fn(|c| (a[c] - b[c]) / dt)).collect());
    let mon = monitors(grid, &diff, st.as_deref(), p.lambda(t), t, p.nu)?;
    let s = TrajectorySample {
        t,
        h1: norms.get("H1"),
        h3: norms.get("H3"),
        weighted_l2: norms.get("weighted_L2"),
        energy: energy(&state.field)?,
        discrete_energy: state.discrete_energy(),
        monitors: mon,
        r_star: detect_scale(&state.field).ok(),
    };
    Ok((s, diff))
}

/// Integrates forward from u^(N)(t1) to t0 and records distances to u^(N)(t).
pub fn evolve_from_profile(p: &Params, t1: f64, t0: f64, cfg: &EvolveConfig) -> Result<TrajectoryReport> {
    if !(t1 > 0.0 && t0 > t1) {
        return Err(Error::InvalidParams(format!("need 0 < t1 < t0, got t1 = {t1}, t0 = {t0}")));
    }
    let cons = Construction::build(p, &cfg.glue)?;
    let grid = RadialGrid::geometric_per_decade(cfg.rmin_factor / p.lambda(t1), cfg.rmax_factor * p.delta, cfg.per_decade)?;
    let init = cons.lab_field(&grid, t1)?;
    let mut state = EvolutionState::new(init, t1, p.a1, p.a2, &cfg.scheme)?;
    let (first, mut prev_diff) = sample(&state, &cons, None)?;
    state.history.push(first);
    let samples = cfg.samples.max(1);
    for k in 1..=samples {
        let target = t1 + (t0 - t1) * k as f64 / samples as f64;
        state.advance_to(target)?;
        let (s, diff) = sample(&state, &cons, Some((&prev_diff, (t0 - t1) / samples as f64)))?;
        prev_diff = diff;
        state.history.push(s);
    }
    let max_inc = state.steps.iter().map(|s| s.energy_increase).fold(f64::NEG_INFINITY, f64::max);
    let violations = state.steps.iter().filter(|s| s.energy_increase > 1e-10).count();
    let sup_h1 = state.history.iter().map(|s| s.h1).fold(0.0, f64::max);
    let first_nonzero = state.history.iter().map(|s| s.h1).find(|&h| h > 0.0);
    let exploding = match first_nonzero {
        Some(h0) => state.history.iter().any(|s| s.h1 > 10.0 * h0),
        None => false,
    };
    Ok(TrajectoryReport {
        params: *p,
        t1,
        t0,
        samples: state.history.clone(),
        steps: state.steps.len(),
        halvings: state.steps.iter().filter(|s| s.substeps > 1).count(),
        max_energy_increase: max_inc,
        energy_violations: violations,
        sup_h1,
        exploding,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub lambda: f64,
    /// H1 distance between v(tau) and the rescaled run mapped back.
    pub mismatch_h1: f64,
    /// H1 distance between the dt and dt/2 runs of v (single-run error estimate).
    pub discretization_estimate: f64,
    /// |E(v_lambda) - E(v)| at the initial time.
    pub energy_mismatch: f64,
}

/// Evolves v for tau and v_lambda(r) = v(lambda r) for tau / lambda^2, then compares.
///
/// v_lambda lives on the grid r / lambda, so both runs use the same nodes in ln r.
pub fn scaling_invariance_check(field: &SphereField, lambda: f64, a1: f64, a2: f64, tau: f64, scheme: &SchemeConfig) -> Result<ScalingReport> {
    if !(lambda > 0.0 && tau > 0.0) {
        return Err(Error::InvalidParams("lambda and tau must be positive".into()));
    }
    let dt = match scheme.dt {
        DtPolicy::Fixed(dt) => dt,
        DtPolicy::Capped { dt_max, .. } => dt_max,
    };
    let run = |f: SphereField, tau: f64, dt: f64| -> Result<SphereField> {
        let s = SchemeConfig { dt: DtPolicy::Fixed(dt), ..scheme.clone() };
        let mut st = EvolutionState::new(f, 0.0, a1, a2, &s)?;
        st.advance_to(tau)?;
        Ok(st.field)
    };
    let g = field.grid();
    let scaled_grid = RadialGrid::geometric(g.rmin() / lambda, g.rmax() / lambda, g.len())?;
    let scaled = SphereField::new(scaled_grid, field.values().to_vec(), field.equivariance())?;
    let energy_mismatch = (energy(&scaled)? - energy(field)?).abs();
    let base = run(field.clone(), tau, dt)?;
    let fine = run(field.clone(), tau, 0.5 * dt)?;
    let resc = run(scaled, tau / (lambda * lambda), dt / (lambda * lambda))?;
    let back = SphereField::new(g.clone(), resc.values().to_vec(), field.equivariance())?;
    let w = NormWeights { max_order: 1, weighted: false };
    Ok(ScalingReport {
        lambda,
        mismatch_h1: field_difference_norms(&base, &back, w, None)?.get("H1"),
        discretization_estimate: field_difference_norms(&base, &fine, w, None)?.get("H1"),
        energy_mismatch,
    })
}
