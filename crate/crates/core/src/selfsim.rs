//! Self-similar region: W = sum_j t^{nu(2j+1)} sum_l L^l W_{j,l}(y) with y = r/sqrt(t)
//! and L = ln y - nu ln t.
//!
//! Level j solves (cal-L - mu~_j) W_{j,l} = F_{j,l} top-down in l, where
//! cal-L = -Delta + 1/y^2 + i y d_y/(2A) and
//!
//! F_{j,l} = -i(nu+1/2)(l+1) W_{j,l+1}/A + 2(l+1) W'_{j,l+1}/y + (l+1)(l+2) W_{j,l+2}/y^2 - G_{j,l}
//!
//! with G_{j,l} the (j,l) coefficient of G(W) = 2 W-bar (W_y^2 - W^2/y^2)/(1 + |W|^2).
//! Every W_{j,l} is carried three ways: an odd Laurent series at the origin (exact
//! recursion, which also fixes the free constants), samples on a y-grid (series start,
//! then outward marching) and a formal expansion at infinity whose single free
//! constant is fitted on a far window.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::algebra::{Algebra, GridCtx, GridFn, LPoly, Laurent, ShiftedTail, Tail, TauSeries};
use crate::diagnostics::{fit_power_law, FitReport};
use crate::error::{Error, Result};
use crate::grid::{Interpolator, RadialGrid};
use crate::inner::InnerStack;
use crate::logseries::{fit_basis, LogPowerSeries};
use crate::params::Params;
use crate::stereo::project;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralData {
    pub mu: Vec<C64>,
    pub mu_tilde: Vec<C64>,
    pub kappa: Vec<C64>,
}

impl SpectralData {
    pub fn new(p: &Params, jmax: usize) -> Self {
        SpectralData {
            mu: (0..=jmax).map(|j| p.mu(j)).collect(),
            mu_tilde: (0..=jmax).map(|j| p.mu_tilde(j)).collect(),
            kappa: (0..=jmax).map(|j| p.kappa(j)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSimConfig {
    /// Highest level j.
    pub levels: usize,
    /// Origin series are used on (0, y0]; marching starts at y0.
    pub y0: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub per_decade: f64,
    pub fd_order: usize,
    /// Origin series are truncated above y^{series_max_exp}.
    pub series_max_exp: i32,
    /// Largest accepted size of the last series terms at y0, relative to the sum.
    pub series_tol: f64,
    /// Expansions at infinity are truncated below y^{p_j + tail_min_exp}.
    pub tail_min_exp: i32,
    /// Window for the log-free coefficient of y^{p_j}.
    pub smooth_window: (f64, f64),
    /// Window for the oscillatory coefficient (only used where it is resolvable).
    pub osc_window: (f64, f64),
    /// Bound on |h lambda| per RK4 substep.
    pub cfl: f64,
    pub min_substeps: usize,
}

impl Default for SelfSimConfig {
    fn default() -> Self {
        SelfSimConfig {
            levels: 2,
            y0: 1.0,
            ymin: 0.01,
            ymax: 64.0,
            per_decade: 400.0,
            fd_order: 8,
            series_max_exp: 81,
            series_tol: 1e-14,
            tail_min_exp: -40,
            smooth_window: (20.0, 64.0),
            osc_window: (8.0, 20.0),
            cfl: 0.5,
            min_substeps: 4,
        }
    }
}

/// Smooth exponent p_j = 2 i alpha0 + 2 nu (2j+1); i p_j/(2A) = mu~_j.
pub fn smooth_exponent(p: &Params, j: usize) -> C64 {
    C64::new(2.0 * p.nu * (2 * j + 1) as f64, 2.0 * p.alpha0)
}

/// cal-L f = -f'' - f'/y + f/y^2 + i y f'/(2A) on a grid.
pub fn apply_lcal(grid: &RadialGrid, f: &[C64], p: &Params, order: usize) -> Result<Vec<C64>> {
    let ctx = GridCtx::new(grid, order)?;
    let y = ctx.real(|y| y);
    Ok(lcal_of(&ctx.wrap(f.to_vec()), &y, p.a()).v)
}

/// cal-L in any algebra; `y` is the coordinate function.
pub fn lcal_of<V: Algebra>(f: &V, y: &V, a: C64) -> V {
    f.lap().scale_re(-1.0).add(&f.div_r().div_r()).add(&y.mul(&f.dr()).scale(C64::i() / (2.0 * a)))
}

/// Right-hand side F_{j,l} from the two levels above and G_{j,l}.
pub fn level_rhs<V: Algebra>(p: &Params, l: usize, w1: Option<&V>, w2: Option<&V>, g: &V) -> V {
    let lf = (l + 1) as f64;
    let mut s = g.scale_re(-1.0);
    if let Some(w1) = w1 {
        s = s
            .add(&w1.scale(-C64::i() * (p.nu + 0.5) * lf / p.a()))
            .add(&w1.dr().div_r().scale_re(2.0 * lf));
    }
    if let Some(w2) = w2 {
        s = s.add(&w2.div_r().div_r().scale_re(lf * (l + 2) as f64));
    }
    s
}

/// G_n: the sigma^{n-1} coefficient of 2 S-bar (S_y^2 - S^2/y^2)/(1 + sigma |S|^2) with
/// S = sum_{a<n} sigma^a W_a (W = t^nu S, sigma = t^{2 nu}).
pub fn nonlinearity<V: Algebra>(levels: &[LPoly<V>], n: usize, one: &V) -> LPoly<V> {
    assert!(n >= 1 && levels.len() >= n, "G_{n} needs levels 0..{}", n - 1);
    let k = n - 1;
    let proto = LPoly::constant(&one.zero());
    let mut s = TauSeries::zeros(&proto, k);
    for (a, w) in levels.iter().enumerate().take(n) {
        s.c[a] = w.clone();
    }
    let sy = s.dr();
    let sb = s.conj();
    let num = sb.mul(&sy.mul(&sy).sub(&s.mul(&s).div_r().div_r())).scale_re(2.0);
    let den = TauSeries::inverse_about(&LPoly::constant(one), &sb.mul(&s).shift());
    num.mul(&den).c[k].clone()
}

// ---------------------------------------------------------------------------
// Origin

/// Solves (cal-L - mu~) W = S in odd Laurent series with the free coefficient d_1 = c.
///
/// The y^{n} coefficient reads (1 - (n+2)^2) d_{n+2} + (i n/(2A) - mu~) d_n = S_n. It
/// fixes d_{-1} = S_{-1}/(2 kappa) at n = -1 and leaves d_1 free; at n = -3 it is a
/// condition, whose defect is returned.
pub fn origin_solve(s: &Laurent, a: C64, mt: C64, c: C64) -> (Laurent, C64) {
    let i = C64::i();
    let me = s.max_exp();
    let lo = s.lowest().unwrap_or(-1).min(-1);
    assert!(lo.rem_euclid(2) == 1, "origin sources live on odd powers");
    let ceil = if s.ceil() >= me { me } else { s.ceil() + 2 };
    let idx = |q: i32| ((q - lo) / 2) as usize;
    let mut d = vec![C64::default(); idx(ceil.max(1)) + 2];
    let mut defect = C64::default();
    let mut n = lo;
    while n + 2 <= ceil {
        let lead = i * n as f64 / (2.0 * a) - mt;
        let dn = if n >= lo { d[idx(n)] } else { C64::default() };
        match n + 2 {
            -1 => defect = lead * dn - s.coeff(n),
            1 => {
                d[idx(-1)] = s.coeff(-1) / (-i / (2.0 * a) - mt);
                d[idx(1)] = c;
            }
            q => {
                let k = 1.0 - (q * q) as f64;
                d[idx(q)] = (s.coeff(n) - lead * dn) / k;
            }
        }
        n += 2;
    }
    let mut coeffs = vec![C64::default(); (ceil - lo + 1) as usize];
    for (k, x) in d.iter().enumerate() {
        let q = lo + 2 * k as i32;
        if q <= ceil {
            coeffs[(q - lo) as usize] = *x;
        }
    }
    (Laurent::from_coeffs(lo, coeffs, ceil, me), defect)
}

// ---------------------------------------------------------------------------
// Infinity

/// (cal-L - mu~) f on formal expansions.
fn tail_operator(f: &ShiftedTail, a: C64, mt: C64) -> ShiftedTail {
    let y = ShiftedTail::new(C64::default(), Tail::monomial(C64::new(1.0, 0.0), 1, 0, f.t.min_exp()));
    lcal_of(f, &y, a).sub(&f.scale(mt))
}

/// Formal solution of (cal-L - mu~) f = rhs on y^{shift - k}(ln y)^l, top-down. At the
/// resonant exponent y^{shift} the log power rises by one and the log-free coefficient
/// (a kernel direction) is set to zero.
pub fn formal_solve(rhs: &ShiftedTail, shift: C64, a: C64, mt: C64) -> ShiftedTail {
    let i = C64::i();
    let me = rhs.t.min_exp();
    let base = ShiftedTail::new(shift, Tail::zero_with(me));
    let rhs = base.add(rhs);
    let rhs = if rhs.is_zero() { base.clone() } else { rhs };
    let mut f = base.clone();
    let Some(top) = rhs.t.top() else { return f };
    let floor = rhs.t.floor();
    let mut e = top;
    while e >= floor {
        let res = rhs.sub(&tail_operator(&f, a, mt));
        let res = base.add(&res);
        let depth = res.t.log_depth();
        let r: Vec<C64> = (0..=depth).map(|l| res.t.coeff(e, l)).collect();
        if r.iter().any(|x| *x != C64::default()) {
            let mut c = vec![C64::default(); depth + 2];
            if e != 0 {
                for l in (0..=depth).rev() {
                    c[l] = (r[l] - i * (l + 1) as f64 / (2.0 * a) * c[l + 1]) * (2.0 * a) / (i * e as f64);
                }
            } else {
                for l in (0..=depth).rev() {
                    c[l + 1] = r[l] * (2.0 * a) / (i * (l + 1) as f64);
                }
            }
            let terms: Vec<_> = c.iter().enumerate().map(|(l, &x)| (e, l, x)).collect();
            f = f.add(&ShiftedTail::new(shift, Tail::from_terms(&terms, i32::MIN, me)));
        }
        e -= 1;
    }
    ShiftedTail::new(shift, f.t.with_floor(floor))
}

/// Homogeneous solution y^{shift}(1 + O(y^{-2})) without logs.
pub fn smooth_homogeneous(shift: C64, a: C64, mt: C64, min_exp: i32) -> ShiftedTail {
    let seed = ShiftedTail::new(shift, Tail::monomial(C64::new(1.0, 0.0), 0, 0, min_exp));
    let corr = formal_solve(&tail_operator(&seed, a, mt), shift, a, mt);
    seed.sub(&corr)
}

/// Oscillatory template e^{i y^2/(4A)} y^{-p-2}.
pub fn oscillatory_template(y: f64, p: C64, a: C64) -> C64 {
    (C64::i() * y * y / (4.0 * a) - (p + 2.0) * y.ln()).exp()
}

/// Joint fit of samples against y^{p-2k}(ln y)^m (k < smooth_terms) and
/// e^{iy^2/(4A)} y^{-p-2-2k}(ln y)^m (k < osc_terms), m <= logs.
/// Returns the (k=0, m=0) smooth and oscillatory coefficients and the fit residual.
pub fn decompose_samples(
    samples: &[(f64, C64)],
    p: C64,
    a: C64,
    smooth_terms: usize,
    osc_terms: usize,
    logs: usize,
) -> Result<(C64, C64, f64)> {
    let mut fs: Vec<Box<dyn Fn(f64) -> C64>> = Vec::new();
    for k in 0..smooth_terms {
        for m in 0..=logs {
            fs.push(Box::new(move |y: f64| ((p - 2.0 * k as f64) * y.ln()).exp() * y.ln().powi(m as i32)));
        }
    }
    let n_smooth = fs.len();
    for k in 0..osc_terms {
        for m in 0..=logs {
            fs.push(Box::new(move |y: f64| oscillatory_template(y, p, a) * y.powi(-2 * k as i32) * y.ln().powi(m as i32)));
        }
    }
    let refs: Vec<&dyn Fn(f64) -> C64> = fs.iter().map(|b| b.as_ref()).collect();
    let fit = fit_basis(samples, &refs)?;
    let osc = if osc_terms > 0 { fit.coeffs[n_smooth] } else { C64::default() };
    let smooth = if smooth_terms > 0 { fit.coeffs[0] } else { C64::default() };
    Ok((smooth, osc, fit.residual))
}

// ---------------------------------------------------------------------------
// Basis

/// e^1 = y + O(y^3) and e^2 = 1/y + kappa e^1 ln y + O(y^3) on the y-grid.
#[derive(Clone)]
pub struct Basis {
    pub e1: Vec<C64>,
    pub e2: Vec<C64>,
    pub e1_series: Laurent,
    /// Odd correction g in e^2 = 1/y + kappa e^1 ln y + g.
    pub e2_correction: Laurent,
    pub kappa: C64,
}

impl Basis {
    /// (e^1, e^2) and their derivatives at y.
    pub fn fundamental_at(&self, fam: &SelfSimFamily, y: f64) -> Result<[[C64; 2]; 2]> {
        let it = &fam.interp;
        let d = fam.ctx.d.dr(&self.e1);
        let d2 = fam.ctx.d.dr(&self.e2);
        let g = |f: &[C64]| it.eval(f, y).ok_or(Error::RegionUnavailable { region: "self-similar", radius: y });
        Ok([[g(&self.e1)?, g(&self.e2)?], [g(&d)?, g(&d2)?]])
    }
}

// ---------------------------------------------------------------------------
// Family

/// Far-field decomposition of one W_{j,l}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarField {
    /// Log-free coefficient of y^{p_j}.
    pub smooth: C64,
    /// Leading oscillatory coefficient; `None` where it lies below the smooth part's
    /// truncation error on the fit window.
    pub oscillatory: Option<C64>,
    /// Remote-region coefficients: smooth and oscillatory parts re-expressed in ln r.
    pub beta0: C64,
    pub beta1: C64,
    /// Max |W - model| / |W| on the smooth window.
    pub residual: f64,
    pub log_depth: usize,
}

#[derive(Clone)]
pub struct Level {
    /// Origin series of W_{j,l}, l = 0..=2j+1.
    pub origin: Vec<Laurent>,
    pub grid: Vec<GridFn>,
    pub far: Vec<ShiftedTail>,
    pub farfield: Vec<FarField>,
    /// d_1 of each W_{j,l}.
    pub constants: Vec<C64>,
    /// Largest solvability defect left after fixing the constants.
    pub solvability: f64,
}

#[derive(Clone)]
pub struct SelfSimFamily {
    pub params: Params,
    pub config: SelfSimConfig,
    pub spectral: SpectralData,
    /// (a_j, b_j) for each level.
    pub matching: Vec<(C64, C64)>,
    ctx: Arc<GridCtx>,
    interp: Interpolator,
    levels: Vec<Level>,
}

impl std::fmt::Debug for SelfSimFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SelfSimFamily")
            .field("params", &self.params)
            .field("levels", &self.levels.len())
            .field("matching", &self.matching)
            .finish()
    }
}

/// (a_j, b_j) = (alpha(j,1,1), alpha(j,1,0)) from the inner expansion.
pub fn derive_matching_data(stack: &InnerStack, jmax: usize) -> Result<Vec<(C64, C64)>> {
    let tab = stack.reexpansion(jmax, 1)?;
    (0..=jmax).map(|j| Ok((tab.get(j, 1, 1)?, tab.get(j, 1, 0)?))).collect()
}

impl SelfSimFamily {
    pub fn grid(&self) -> &RadialGrid {
        &self.ctx.grid
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, j: usize) -> &Level {
        &self.levels[j]
    }

    /// Samples of W_{j,l} on the y-grid.
    pub fn w(&self, j: usize, l: usize) -> &[C64] {
        &self.levels[j].grid[l].v
    }

    pub fn origin_series(&self, j: usize, l: usize) -> Result<LogPowerSeries> {
        self.levels[j].origin[l].to_series()
    }

    pub fn farfield(&self, j: usize, l: usize) -> &FarField {
        &self.levels[j].farfield[l]
    }

    /// beta0(j, l) and beta1(j, l) for the remote region.
    pub fn beta0(&self, j: usize, l: usize) -> C64 {
        self.levels[j].farfield[l].beta0
    }
    pub fn beta1(&self, j: usize, l: usize) -> C64 {
        self.levels[j].farfield[l].beta1
    }

    fn one_laurent(&self) -> Laurent {
        Laurent::monomial(C64::new(1.0, 0.0), 0, self.config.series_max_exp)
    }

    fn one_tail(&self, j: usize) -> ShiftedTail {
        let _ = j;
        ShiftedTail::new(C64::default(), Tail::monomial(C64::new(1.0, 0.0), 0, 0, self.config.tail_min_exp))
    }

    /// Builds levels 0..=cfg.levels from matching data (a_j, b_j).
    pub fn build(p: &Params, cfg: &SelfSimConfig, matching: &[(C64, C64)]) -> Result<Self> {
        p.validate()?;
        if matching.len() <= cfg.levels {
            return Err(Error::OrderDeficit(format!("matching data for {} levels, need {}", matching.len(), cfg.levels + 1)));
        }
        if !(cfg.ymin < cfg.y0 && cfg.y0 < cfg.smooth_window.0 && cfg.smooth_window.1 <= cfg.ymax) {
            return Err(Error::InvalidGrid("need ymin < y0 < smooth window <= ymax".into()));
        }
        let grid = RadialGrid::geometric_per_decade(cfg.ymin, cfg.ymax, cfg.per_decade)?;
        let ctx = GridCtx::new(&grid, cfg.fd_order)?;
        let interp = Interpolator::new(&grid, cfg.fd_order);
        let mut fam = SelfSimFamily {
            params: *p,
            config: cfg.clone(),
            spectral: SpectralData::new(p, cfg.levels),
            matching: matching[..=cfg.levels].to_vec(),
            ctx,
            interp,
            levels: Vec::new(),
        };
        for j in 0..=cfg.levels {
            let lev = fam.solve_level(j)?;
            fam.levels.push(lev);
        }
        Ok(fam)
    }

    /// Origin solve of level j for given constants c_l = d_1(W_{j,l}); returns the
    /// series and the solvability defects.
    fn origin_level(&self, j: usize, g: &LPoly<Laurent>, c: &[C64]) -> (Vec<Laurent>, Vec<C64>) {
        let p = &self.params;
        let (a, mt) = (p.a(), self.spectral.mu_tilde[j]);
        let top = 2 * j + 1;
        let mut w: Vec<Option<Laurent>> = vec![None; top + 1];
        let mut defects = vec![C64::default(); top + 1];
        for l in (0..=top).rev() {
            let s = level_rhs(p, l, w.get(l + 1).and_then(|x| x.as_ref()), w.get(l + 2).and_then(|x| x.as_ref()), &g.get(l));
            let (wl, def) = origin_solve(&s, a, mt, c[l]);
            defects[l] = def;
            w[l] = Some(wl);
        }
        (w.into_iter().map(|x| x.unwrap()).collect(), defects)
    }

    /// Fixes d_1 of W_{j,2..2j+1} so that every y^{-3} condition holds.
    fn solve_constants(&self, j: usize, g: &LPoly<Laurent>) -> Result<(Vec<C64>, f64)> {
        let (a_j, b_j) = self.matching[j];
        let n = 2 * j + 2;
        let mut c0 = vec![C64::default(); n];
        c0[0] = b_j;
        c0[1] = a_j;
        let m = 2 * j;
        let (_, r0) = self.origin_level(j, g, &c0);
        if m == 0 {
            let res = r0.iter().map(|x| x.norm()).fold(0.0, f64::max);
            return Ok((c0, res));
        }
        let mut mat = DMatrix::<C64>::zeros(m, m);
        for k in 0..m {
            let mut c = c0.clone();
            c[k + 2] = C64::new(1.0, 0.0);
            let (_, r) = self.origin_level(j, g, &c);
            for row in 0..m {
                mat[(row, k)] = r[row] - r0[row];
            }
        }
        let rhs = DVector::from_iterator(m, r0[..m].iter().map(|x| -x));
        let x = mat.clone().svd(true, true).solve(&rhs, 1e-300).map_err(|e| Error::OutOfRange(e.to_string()))?;
        let mut c = c0;
        for k in 0..m {
            c[k + 2] = x[k];
        }
        let (_, r) = self.origin_level(j, g, &c);
        let scale = r0.iter().map(|x| x.norm()).fold(1.0, f64::max);
        let (worst, res) = r.iter().enumerate().map(|(l, x)| (l, x.norm() / scale)).fold((0, 0.0), |acc, v| if v.1 > acc.1 { v } else { acc });
        if !(res <= 1e-6) {
            return Err(Error::MatchingFailure(j, worst, res));
        }
        Ok((c, res))
    }

    /// Outward RK4 march of (cal-L - mu~) f = S in x = ln y with state (f, y f').
    fn march(&self, s: &[C64], i0: usize, f0: C64, yf0: C64, mt: C64) -> Result<Vec<C64>> {
        let a = self.params.a();
        let y = self.grid().nodes();
        let h = self.grid().step();
        let k_osc = C64::i() / (2.0 * a);
        let rate = 0.5 / a.norm() + mt.norm();
        let rhs = |yy: f64, f: C64, g: C64| -> Result<(C64, C64)> {
            let sv = self.interp.eval(s, yy).ok_or(Error::RegionUnavailable { region: "self-similar", radius: yy })?;
            let y2 = yy * yy;
            Ok((g, (1.0 - mt * y2) * f + k_osc * y2 * g - y2 * sv))
        };
        let mut out = vec![C64::default(); y.len()];
        out[i0] = f0;
        let (mut f, mut g) = (f0, yf0);
        for i in i0..y.len() - 1 {
            let lam = y[i + 1] * y[i + 1] * rate + 1.0;
            let n_sub = ((h * lam / self.config.cfl).ceil() as usize).max(self.config.min_substeps);
            let dx = h / n_sub as f64;
            let mut x = y[i].ln();
            for _ in 0..n_sub {
                let (y1, ym, y2) = (x.exp(), (x + 0.5 * dx).exp(), (x + dx).exp());
                let k1 = rhs(y1, f, g)?;
                let k2 = rhs(ym, f + 0.5 * dx * k1.0, g + 0.5 * dx * k1.1)?;
                let k3 = rhs(ym, f + 0.5 * dx * k2.0, g + 0.5 * dx * k2.1)?;
                let k4 = rhs(y2.min(y[i + 1]), f + dx * k3.0, g + dx * k3.1)?;
                f += dx / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
                g += dx / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
                x += dx;
            }
            out[i + 1] = f;
        }
        Ok(out)
    }

    /// Index of the last node at or below y0.
    fn start_index(&self) -> usize {
        let y = self.grid().nodes();
        y.iter().rposition(|&v| v <= self.config.y0 * (1.0 + 1e-12)).unwrap_or(0)
    }

    /// Grid samples of the solution whose origin series is `series`.
    fn grid_solution(&self, series: &Laurent, s: &[C64], mt: C64) -> Result<GridFn> {
        let y = self.grid().nodes();
        let i0 = self.start_index();
        let ratio = series.tail_ratio(y[i0]);
        if !(ratio <= self.config.series_tol) {
            return Err(Error::SeriesRadiusExceeded(y[i0]));
        }
        let d = series.dr();
        let mut v = self.march(s, i0, series.eval(y[i0]), y[i0] * d.eval(y[i0]), mt)?;
        for (k, o) in v.iter_mut().enumerate().take(i0 + 1) {
            *o = series.eval(y[k]);
        }
        Ok(self.ctx.wrap(v))
    }

    fn solve_level(&self, j: usize) -> Result<Level> {
        let p = &self.params;
        let cfg = &self.config;
        let (a, mt) = (p.a(), self.spectral.mu_tilde[j]);
        let top = 2 * j + 1;
        let one_l = self.one_laurent();
        let one_g = self.ctx.real(|_| 1.0);
        let one_t = self.one_tail(j);
        let (g_o, g_g, g_t) = if j == 0 {
            (LPoly::constant(&one_l.zero()), LPoly::constant(&one_g.zero()), LPoly::constant(&one_t.zero()))
        } else {
            let lo: Vec<LPoly<Laurent>> = self.levels.iter().map(|lv| LPoly { c: lv.origin.clone() }).collect();
            let lg: Vec<LPoly<GridFn>> = self.levels.iter().map(|lv| LPoly { c: lv.grid.clone() }).collect();
            let lt: Vec<LPoly<ShiftedTail>> = self.levels.iter().map(|lv| LPoly { c: lv.far.clone() }).collect();
            (nonlinearity(&lo, j, &one_l), nonlinearity(&lg, j, &one_g), nonlinearity(&lt, j, &one_t))
        };
        let (constants, solvability) = self.solve_constants(j, &g_o)?;
        let (origin, _) = self.origin_level(j, &g_o, &constants);

        let shift = smooth_exponent(p, j);
        let hom = smooth_homogeneous(shift, a, mt, cfg.tail_min_exp);
        let y = self.grid().nodes().to_vec();
        let mut grid: Vec<Option<GridFn>> = vec![None; top + 1];
        let mut far: Vec<Option<ShiftedTail>> = vec![None; top + 1];
        let mut farfield: Vec<Option<FarField>> = vec![None; top + 1];
        for l in (0..=top).rev() {
            let pick = |v: &Vec<Option<GridFn>>, k: usize| v.get(k).and_then(|x| x.as_ref()).cloned();
            let s_g = level_rhs(p, l, pick(&grid, l + 1).as_ref(), pick(&grid, l + 2).as_ref(), &g_g.get(l));
            let wl = self.grid_solution(&origin[l], &s_g.v, mt)?;

            let pt = |v: &Vec<Option<ShiftedTail>>, k: usize| v.get(k).and_then(|x| x.as_ref()).cloned();
            let s_t = level_rhs(p, l, pt(&far, l + 1).as_ref(), pt(&far, l + 2).as_ref(), &g_t.get(l));
            let part = formal_solve(&s_t, shift, a, mt);

            let (lo, hi) = cfg.smooth_window;
            let win: Vec<usize> = (0..y.len()).filter(|&i| y[i] >= lo && y[i] <= hi).collect();
            let (mut num, mut den) = (C64::default(), 0.0);
            for &i in &win {
                let wt = 1.0 / wl.v[i].norm().max(1e-300).powi(2);
                let hv = hom.eval(y[i]);
                num += hv.conj() * (wl.v[i] - part.eval(y[i])) * wt;
                den += hv.norm_sqr() * wt;
            }
            let beta = num / den;
            let tail = part.add(&hom.scale(beta));
            let residual = win.iter().map(|&i| (wl.v[i] - tail.eval(y[i])).norm() / wl.v[i].norm().max(1e-300)).fold(0.0, f64::max);
            if !(residual <= 1e-4) {
                return Err(Error::WindowNotAsymptotic(residual));
            }

            let oscillatory = self.fit_oscillatory(&wl, &tail, shift, top - l)?;
            let sign = C64::new(-2.0 * p.nu, 0.0).powi(l as i32);
            let beta1 = oscillatory.map_or(C64::default(), |o| o * (2.0 * p.nu).powi(l as i32));
            farfield[l] = Some(FarField {
                smooth: beta,
                oscillatory,
                beta0: beta * sign,
                beta1,
                residual,
                log_depth: tail.t.log_depth(),
            });
            far[l] = Some(tail);
            grid[l] = Some(wl);
        }
        Ok(Level {
            origin,
            grid: grid.into_iter().map(|x| x.unwrap()).collect(),
            far: far.into_iter().map(|x| x.unwrap()).collect(),
            farfield: farfield.into_iter().map(|x| x.unwrap()).collect(),
            constants,
            solvability,
        })
    }

    /// Oscillatory coefficient from W minus its smooth expansion, when the damping on the
    /// window leaves it above the smooth expansion's truncation error.
    fn fit_oscillatory(&self, w: &GridFn, smooth: &ShiftedTail, p: C64, logs: usize) -> Result<Option<C64>> {
        let a = self.params.a();
        let (lo, hi) = self.config.osc_window;
        // Modulus of e^{i y^2/(4A)} is exp(-a2 y^2 / (4|A|^2)).
        let damping = (-self.params.a2 * lo * lo / (4.0 * a.norm_sqr())).exp();
        if damping < 1e-6 {
            return Ok(None);
        }
        let y = self.grid().nodes();
        let samples: Vec<(f64, C64)> =
            (0..y.len()).filter(|&i| y[i] >= lo && y[i] <= hi).map(|i| (y[i], w.v[i] - smooth.eval(y[i]))).collect();
        let (_, osc, _) = decompose_samples(&samples, p, a, 0, 2, logs)?;
        Ok(Some(osc))
    }

    /// W_{j,l}(y): origin series below y0, grid samples up to ymax, smooth expansion beyond.
    pub fn w_at(&self, j: usize, l: usize, y: f64) -> Result<C64> {
        let lv = self.levels.get(j).ok_or_else(|| Error::OrderDeficit(format!("level {j} not built")))?;
        if l > 2 * j + 1 {
            return Ok(C64::default());
        }
        if y <= self.config.y0 {
            return Ok(lv.origin[l].eval(y));
        }
        if y > self.grid().rmax() {
            return Ok(lv.far[l].eval(y));
        }
        self.interp.eval(&lv.grid[l].v, y).ok_or(Error::RegionUnavailable { region: "self-similar", radius: y })
    }

    /// W_ss^(n)(y, t) = sum_{j<=n} t^{nu(2j+1)} sum_l L^l W_{j,l}(y).
    pub fn w_ss(&self, y: f64, t: f64, n: usize) -> Result<C64> {
        if n > self.depth() {
            return Err(Error::OrderDeficit(format!("order {n} requested, family has {} levels", self.depth() + 1)));
        }
        let nu = self.params.nu;
        let ll = y.ln() - nu * t.ln();
        let mut acc = C64::default();
        for j in 0..=n {
            let mut lev = C64::default();
            for l in (0..=2 * j + 1).rev() {
                lev = lev * ll + self.w_at(j, l, y)?;
            }
            acc += lev * t.powf(nu * (2 * j + 1) as f64);
        }
        Ok(acc)
    }

    /// Basis of (cal-L - mu~_j) f = 0.
    pub fn build_basis(&self, j: usize) -> Result<Basis> {
        let (a, mt) = (self.params.a(), self.spectral.mu_tilde[j]);
        let kappa = self.spectral.kappa[j];
        let me = self.config.series_max_exp;
        let zero_src = Laurent::zero_with(me);
        let (e1s, _) = origin_solve(&zero_src, a, mt, C64::new(1.0, 0.0));
        let zeros = vec![C64::default(); self.grid().len()];
        let e1 = self.grid_solution(&e1s, &zeros, mt)?.v;
        // (cal-L - mu~)(e1 ln y) = -2 e1'/y + i e1/(2A); the 1/y parts cancel against 1/y.
        let src = e1s.dr().div_r().sub(&Laurent::monomial(C64::new(1.0, 0.0), -1, me)).scale_re(2.0 * 1.0)
            .sub(&e1s.scale(C64::i() / (2.0 * a)))
            .scale(kappa);
        let (g, _) = origin_solve(&src, a, mt, C64::default());
        let y = self.grid().nodes();
        let i0 = self.start_index();
        let y0 = y[i0];
        let e2_at = |yy: f64| 1.0 / yy + kappa * e1s.eval(yy) * yy.ln() + g.eval(yy);
        let de2_at = |yy: f64| -1.0 / (yy * yy) + kappa * (e1s.dr().eval(yy) * yy.ln() + e1s.eval(yy) / yy) + g.dr().eval(yy);
        if !(g.tail_ratio(y0) <= self.config.series_tol || g.lowest().is_none()) {
            return Err(Error::SeriesRadiusExceeded(y0));
        }
        let mut e2 = self.march(&zeros, i0, e2_at(y0), y0 * de2_at(y0), mt)?;
        for (k, o) in e2.iter_mut().enumerate().take(i0 + 1) {
            *o = e2_at(y[k]);
        }
        Ok(Basis { e1, e2, e1_series: e1s, e2_correction: g, kappa })
    }

    /// (cal-L - mu~_j) W_{j,l} - F_{j,l} on the grid, relative to the size |W|/y^2 + |F| of
    /// the terms that cancel (finite differences lose that much near the origin).
    pub fn plug_back(&self, j: usize, l: usize) -> Result<Vec<f64>> {
        let p = &self.params;
        let lv = &self.levels[j];
        let one_g = self.ctx.real(|_| 1.0);
        let g = if j == 0 {
            LPoly::constant(&one_g.zero())
        } else {
            let lg: Vec<LPoly<GridFn>> = self.levels[..j].iter().map(|lv| LPoly { c: lv.grid.clone() }).collect();
            nonlinearity(&lg, j, &one_g)
        };
        let s = level_rhs(p, l, lv.grid.get(l + 1), lv.grid.get(l + 2), &g.get(l));
        let yv = self.ctx.real(|y| y);
        let w = &lv.grid[l];
        let op = lcal_of(w, &yv, p.a()).sub(&w.scale(self.spectral.mu_tilde[j]));
        let y = self.grid().nodes();
        Ok((0..y.len()).map(|k| (op.v[k] - s.v[k]).norm() / (s.v[k].norm() + w.v[k].norm() / (y[k] * y[k])).max(1e-300)).collect())
    }
}

// ---------------------------------------------------------------------------
// Matching with the inner region

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub n: usize,
    /// (t, sup over the overlap of |W_ss - W_in|).
    pub samples: Vec<(f64, f64)>,
    pub fit: FitReport,
}

/// Stereographic image of the inner ansatz at y, t.
pub fn w_inner(stack: &InnerStack, y: f64, t: f64, n: usize) -> Result<C64> {
    let rho = y * t.powf(-stack.params.nu);
    let v = stack.v_at(rho, t, n)?;
    project(&v).ok_or(Error::SouthPole(rho))
}

/// sup |W_ss^(n) - W_in^(n)| over y in [t^eps1/10, 10 t^eps1] for each t, and its t-exponent.
pub fn matching_check_inner(stack: &InnerStack, fam: &SelfSimFamily, n: usize, ts: &[f64]) -> Result<MatchingReport> {
    let eps1 = fam.params.eps1;
    let mut samples = Vec::new();
    for &t in ts {
        let (lo, hi) = (t.powf(eps1) / 10.0, 10.0 * t.powf(eps1));
        let mut sup = 0.0f64;
        for k in 0..=64 {
            let y = lo * (hi / lo).powf(k as f64 / 64.0);
            sup = sup.max((fam.w_ss(y, t, n)? - w_inner(stack, y, t, n)?).norm());
        }
        samples.push((t, sup));
    }
    let fit = fit_power_law(&samples)?;
    Ok(MatchingReport { n, samples, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inner::InnerConfig;
    use std::sync::OnceLock;

    fn stack() -> &'static InnerStack {
        static S: OnceLock<InnerStack> = OnceLock::new();
        S.get_or_init(|| InnerStack::build(&Params::reference(), &InnerConfig::default()).unwrap())
    }

    fn family() -> &'static SelfSimFamily {
        static F: OnceLock<SelfSimFamily> = OnceLock::new();
        F.get_or_init(|| {
            let m = derive_matching_data(stack(), 2).unwrap();
            SelfSimFamily::build(&Params::reference(), &SelfSimConfig::default(), &m).unwrap()
        })
    }

    #[test]
    fn lcal_on_monomials() {
        let p = Params::reference();
        let g = RadialGrid::geometric(0.1, 10.0, 400).unwrap();
        let i2a = C64::i() / (2.0 * p.a());
        let y: Vec<C64> = g.nodes().iter().map(|&y| C64::new(y, 0.0)).collect();
        let ly = apply_lcal(&g, &y, &p, 8).unwrap();
        for (k, &yy) in g.nodes().iter().enumerate().skip(5).take(390) {
            assert!((ly[k] - i2a * yy).norm() < 1e-9 * yy);
        }
        let inv: Vec<C64> = g.nodes().iter().map(|&y| C64::new(1.0 / y, 0.0)).collect();
        let li = apply_lcal(&g, &inv, &p, 8).unwrap();
        for (k, &yy) in g.nodes().iter().enumerate().skip(5).take(390) {
            assert!((li[k] + i2a / yy).norm() < 1e-7 / yy, "{}", (li[k] + i2a / yy).norm() * yy);
        }
    }

    #[test]
    fn origin_series_solves_the_recursion() {
        // Plug an origin solution with a source back into the operator, formally.
        let p = Params::reference();
        let (a, mt) = (p.a(), p.mu_tilde(1));
        let me = 41;
        let s = Laurent::from_coeffs(-3, vec![C64::new(0.3, 0.1), C64::default(), C64::new(-1.0, 0.5)], i32::MAX, me);
        let (w, defect) = origin_solve(&s, a, mt, C64::new(0.7, 0.0));
        assert_eq!(w.coeff(1), C64::new(0.7, 0.0));
        let y = Laurent::monomial(C64::new(1.0, 0.0), 1, me);
        let back = lcal_of(&w, &y, a).sub(&w.scale(mt)).sub(&s);
        // Everything except the y^{-3} condition is satisfied below the truncation.
        for (e, c) in back.terms() {
            if e == -3 {
                assert!((c + defect).norm() < 1e-12 || (c - defect).norm() < 1e-12);
            } else if e < back.ceil() {
                assert!(c.norm() < 1e-12, "e={e} c={c}");
            }
        }
    }

    #[test]
    fn formal_solution_at_infinity() {
        let p = Params::reference();
        let (a, mt) = (p.a(), p.mu_tilde(0));
        let sh = smooth_exponent(&p, 0);
        let me = -30;
        let rhs = ShiftedTail::new(sh, Tail::from_terms(&[(0, 1, C64::new(1.0, 0.0)), (-2, 0, C64::new(0.5, -0.2))], i32::MIN, me));
        let f = formal_solve(&rhs, sh, a, mt);
        assert_eq!(f.t.coeff(0, 0), C64::default());
        let back = tail_operator(&f, a, mt).sub(&rhs);
        // Coefficients grow factorially; compare against the ones that cancel.
        let size = |e: i32| (0..=f.t.log_depth() + 1).map(|l| f.t.coeff(e + 2, l).norm() * (e as f64).powi(2) + f.t.coeff(e, l).norm()).sum::<f64>();
        for (e, _, c) in back.t.terms() {
            if e > f.t.floor() + 2 {
                assert!(c.norm() < 1e-13 * (1.0 + size(e)), "e={e} c={c}");
            }
        }
        let h = smooth_homogeneous(sh, a, mt, me);
        let hb = tail_operator(&h, a, mt);
        assert!(hb.t.terms().iter().all(|t| t.0 <= h.t.floor() + 2 || t.2.norm() < 1e-10));
        assert_eq!(h.t.coeff(0, 0), C64::new(1.0, 0.0));
    }

    #[test]
    fn basis_properties() {
        let fam = family();
        let p = &fam.params;
        for j in 0..=1 {
            let b = fam.build_basis(j).unwrap();
            let mt = p.mu_tilde(j);
            let y = fam.grid().nodes();
            let l1 = apply_lcal(fam.grid(), &b.e1, p, 8).unwrap();
            for k in 0..y.len() {
                if y[k] > 5.0 {
                    break;
                }
                let rel = (l1[k] - mt * b.e1[k]).norm() / (b.e1[k].norm() * (1.0 / (y[k] * y[k]) + mt.norm()));
                assert!(rel < 1e-8, "j={j} y={} rel={rel:e}", y[k]);
            }
            // e1/y -> 1 with an O(y^2) correction.
            let c1 = (b.e1[0] / y[0] - 1.0).norm();
            let c2 = (b.e1[40] / y[40] - 1.0).norm();
            let slope = (c2 / c1).ln() / (y[40] / y[0]).ln() + 1.0;
            assert!((slope - 3.0).abs() < 0.2, "slope {slope}");
            // y e2 = 1 + kappa y^2 ln y + O(y^2).
            let bound = 2.0 * (1.0 + b.kappa.norm()) * y[0] * y[0] * (1.0 - y[0].ln());
            assert!((b.e2[0] * y[0] - 1.0).norm() < bound);
            let m = b.fundamental_at(fam, 1.0).unwrap();
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            assert!(det.norm() > 1e-3, "det {det}");
        }
    }

    #[test]
    fn level_zero_structure() {
        let fam = family();
        let (a0, _) = fam.matching[0];
        let b = fam.build_basis(0).unwrap();
        let w01 = fam.w(0, 1);
        for k in 0..w01.len() {
            assert!((w01[k] - a0 * b.e1[k]).norm() <= 1e-10 * w01[k].norm(), "y={}", fam.grid().nodes()[k]);
        }
        let d = fam.level(0).origin[0].coeff(-1);
        assert!((d - a0 / fam.spectral.kappa[0]).norm() < 1e-12);
        assert!((a0 - fam.spectral.kappa[0]).norm() < 1e-12, "a0 = kappa0 for the exact source");
    }

    #[test]
    fn plug_back_and_lattice() {
        let fam = family();
        for j in 0..=fam.depth() {
            assert!(fam.level(j).solvability <= 1e-6);
            for l in 0..=2 * j + 1 {
                let r = fam.plug_back(j, l).unwrap();
                let y = fam.grid().nodes();
                let worst = (0..r.len()).filter(|&k| y[k] <= 30.0).map(|k| r[k]).fold(0.0, f64::max);
                assert!(worst <= 1e-6, "({j},{l}) residual {worst:e}");
                let lo = fam.level(j).origin[l].lowest().unwrap();
                let allowed = 2 * ((l as f64 / 2.0 - j as f64).ceil() as i32) - 1;
                assert!(lo >= allowed, "({j},{l}) lowest power {lo} below {allowed}");
                assert!(lo.rem_euclid(2) == 1);
            }
        }
    }

    #[test]
    fn origin_coefficients_match_the_inner_expansion() {
        let fam = family();
        let tab = stack().reexpansion(fam.depth(), 1).unwrap();
        for j in 0..=fam.depth() {
            for l in 0..=2 * j + 1 {
                let imin = (l as f64 / 2.0 - j as f64).ceil() as i32;
                for i in imin..=1 {
                    let want = tab.get(j, i, l).unwrap();
                    let got = fam.level(j).origin[l].coeff(2 * i - 1);
                    assert!((want - got).norm() <= 1e-6 * want.norm().max(1.0), "({j},{i},{l}): {want} vs {got}");
                }
            }
        }
    }

    #[test]
    fn far_field_is_time_independent() {
        // sum_{l+m=n} c_{l,m} = (-2 nu)^n c_{n,0}: the smooth part depends on r only.
        let fam = family();
        let nu = fam.params.nu;
        for j in 0..=fam.depth() {
            let sh = smooth_exponent(&fam.params, j);
            let top = 2 * j + 1;
            for n in 0..=top {
                let mut s = C64::default();
                for l in 0..=n {
                    let t = ShiftedTail::new(sh, Tail::zero_with(-40)).add(&fam.level(j).far[l]);
                    s += t.t.coeff(0, n - l);
                }
                let b = fam.beta0(j, n);
                assert!((s - b).norm() <= 1e-6 * b.norm().max(1.0), "j={j} n={n}: {s} vs {b}");
                let _ = nu;
            }
            for l in 0..=top {
                assert!(fam.farfield(j, l).residual < 1e-6);
            }
        }
    }

    #[test]
    fn linear_in_free_constants() {
        let p = Params::reference();
        let cfg = SelfSimConfig { levels: 1, ..SelfSimConfig::default() };
        let m = derive_matching_data(stack(), 1).unwrap();
        let with = |a: C64, b: C64| {
            let mut mm = m.clone();
            mm[1] = (a, b);
            SelfSimFamily::build(&p, &cfg, &mm).unwrap()
        };
        let z = C64::default();
        let f0 = with(z, z);
        let fa = with(C64::new(1.0, 0.5), z);
        let fb = with(z, C64::new(-0.3, 2.0));
        let fab = with(C64::new(1.0, 0.5), C64::new(-0.3, 2.0));
        for l in 0..=3 {
            for k in (0..f0.grid().len()).step_by(50) {
                let lin = fa.w(1, l)[k] + fb.w(1, l)[k] - f0.w(1, l)[k];
                let got = fab.w(1, l)[k];
                assert!((lin - got).norm() <= 1e-8 * got.norm().max(1.0), "l={l} k={k}");
            }
        }
    }

    #[test]
    fn synthetic_decomposition() {
        let p = Params::reference().with_a2(0.0).unwrap();
        let (a, sh) = (p.a(), smooth_exponent(&p, 0));
        let ys: Vec<f64> = (0..400).map(|k| 8.0 + 12.0 * k as f64 / 399.0).collect();
        // Pure power: no oscillatory content.
        let pure: Vec<(f64, C64)> = ys.iter().map(|&y| (y, C64::new(y.powf(2.0 * p.nu), 0.0))).collect();
        let (s, o, _) = decompose_samples(&pure, sh, a, 2, 1, 0).unwrap();
        assert!((s - 1.0).norm() < 1e-10 && o.norm() < 1e-8, "{s} {o}");
        // Two templates with modulus-one oscillation.
        let (cs, co) = (C64::new(0.7, -0.2), C64::new(-1.3, 0.4));
        let mix: Vec<(f64, C64)> = ys.iter().map(|&y| (y, cs * (sh * y.ln()).exp() + co * oscillatory_template(y, sh, a))).collect();
        let (s, o, res) = decompose_samples(&mix, sh, a, 1, 1, 0).unwrap();
        assert!((s - cs).norm() < 1e-10 && (o - co).norm() < 1e-6, "{s} {o} {res}");
    }

    #[test]
    fn damping_of_the_oscillatory_template() {
        let p = Params::reference();
        let v = oscillatory_template(5.0, C64::new(-2.0, 0.0), p.a());
        assert!((v.norm() - (-6.25f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn matching_data_is_linear_in_the_tail() {
        let m = derive_matching_data(stack(), 1).unwrap();
        let (a0, b0) = m[0];
        let p = Params::reference();
        assert!((a0 - p.d() / (2.0 * p.a())).norm() < 1e-12);
        // Doubling z^1 doubles the coefficients of its stereographic image at first order.
        let t = stack().tail(1).scale_re(2.0);
        let s1 = stack().tail(1);
        assert!((t.coeff(1, 1) - s1.coeff(1, 1) * 2.0).norm() < 1e-15);
        assert!((b0 - s1.coeff(1, 0) / 2.0).norm() < 1e-12 * b0.norm().max(1.0));
    }

    #[test]
    fn inner_matching_exponent() {
        let fam = family();
        let ts = [1e-2, 10f64.powf(-2.5), 1e-3, 10f64.powf(-3.5), 1e-4];
        let rep = matching_check_inner(stack(), fam, 1, &ts).unwrap();
        assert!(rep.fit.exponent >= 2.5, "{:?}", rep);
    }
}
