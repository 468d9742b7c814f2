//! Commutative differential algebras used to assemble nonlinear terms once and evaluate
//! them on grid functions, on formal tails at infinity, or on truncated power series in
//! an auxiliary small parameter.

use std::sync::Arc;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::grid::{DiffOp, RadialGrid};
use crate::logseries::{Anchor, LogPowerSeries};

/// Radial functions with pointwise products and radial derivatives.
pub trait Algebra: Clone {
    /// Zero with the same shape as `self`.
    fn zero(&self) -> Self;
    fn is_zero(&self) -> bool;
    fn add(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn scale(&self, c: C64) -> Self;
    /// Real and imaginary parts (the radial variable is real).
    fn re(&self) -> Self;
    fn im(&self) -> Self;
    fn dr(&self) -> Self;
    /// Radial Laplacian f'' + f'/r.
    fn lap(&self) -> Self;
    /// f / r.
    fn div_r(&self) -> Self;

    fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(C64::new(-1.0, 0.0)))
    }
    fn scale_re(&self, c: f64) -> Self {
        self.scale(C64::new(c, 0.0))
    }
    fn conj(&self) -> Self {
        self.re().sub(&self.im().scale(C64::i()))
    }
}

/// Fixed radial functions every assembly needs, expressed in the algebra.
#[derive(Clone)]
pub struct Known<V> {
    pub one: V,
    pub r: V,
    pub inv_r: V,
    pub inv_r2: V,
    pub h1: V,
    pub h3: V,
    /// 1 / (1 + h3) = (1 + r^{-2}) / 2.
    pub inv_one_plus_h3: V,
}

impl<V: Algebra> Known<V> {
    pub fn map<W>(&self, f: impl Fn(&V) -> W) -> Known<W> {
        Known {
            one: f(&self.one),
            r: f(&self.r),
            inv_r: f(&self.inv_r),
            inv_r2: f(&self.inv_r2),
            h1: f(&self.h1),
            h3: f(&self.h3),
            inv_one_plus_h3: f(&self.inv_one_plus_h3),
        }
    }
}

// ---------------------------------------------------------------------------
// Grid functions

pub struct GridCtx {
    pub grid: RadialGrid,
    pub d: DiffOp,
}

impl GridCtx {
    pub fn new(grid: &RadialGrid, order: usize) -> Result<Arc<Self>> {
        Ok(Arc::new(GridCtx { grid: grid.clone(), d: DiffOp::new(grid, order)? }))
    }

    pub fn func(self: &Arc<Self>, f: impl Fn(f64) -> C64) -> GridFn {
        GridFn { v: self.grid.nodes().iter().map(|&r| f(r)).collect(), ctx: self.clone() }
    }

    pub fn real(self: &Arc<Self>, f: impl Fn(f64) -> f64) -> GridFn {
        self.func(|r| C64::new(f(r), 0.0))
    }

    pub fn wrap(self: &Arc<Self>, v: Vec<C64>) -> GridFn {
        assert_eq!(v.len(), self.grid.len());
        GridFn { v, ctx: self.clone() }
    }

    pub fn known(self: &Arc<Self>) -> Known<GridFn> {
        use crate::sphere::{h1, h3};
        Known {
            one: self.real(|_| 1.0),
            r: self.real(|r| r),
            inv_r: self.real(|r| 1.0 / r),
            inv_r2: self.real(|r| 1.0 / (r * r)),
            h1: self.real(h1),
            h3: self.real(h3),
            inv_one_plus_h3: self.real(|r| 0.5 * (1.0 + 1.0 / (r * r))),
        }
    }
}

#[derive(Clone)]
pub struct GridFn {
    pub v: Vec<C64>,
    pub ctx: Arc<GridCtx>,
}

impl GridFn {
    fn zip(&self, o: &Self, f: impl Fn(C64, C64) -> C64) -> Self {
        GridFn { v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(), ctx: self.ctx.clone() }
    }
    fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        GridFn { v: self.v.iter().map(|&a| f(a)).collect(), ctx: self.ctx.clone() }
    }
    pub fn max_abs(&self) -> f64 {
        self.v.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }
}

impl Algebra for GridFn {
    fn zero(&self) -> Self {
        self.map(|_| C64::default())
    }
    fn is_zero(&self) -> bool {
        self.v.iter().all(|x| *x == C64::default())
    }
    fn add(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a + b)
    }
    fn mul(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a * b)
    }
    fn scale(&self, c: C64) -> Self {
        self.map(|a| a * c)
    }
    fn re(&self) -> Self {
        self.map(|a| C64::new(a.re, 0.0))
    }
    fn im(&self) -> Self {
        self.map(|a| C64::new(a.im, 0.0))
    }
    fn dr(&self) -> Self {
        GridFn { v: self.ctx.d.dr(&self.v), ctx: self.ctx.clone() }
    }
    fn lap(&self) -> Self {
        GridFn { v: self.ctx.d.laplacian(&self.v), ctx: self.ctx.clone() }
    }
    fn div_r(&self) -> Self {
        GridFn { v: self.v.iter().zip(self.ctx.grid.nodes()).map(|(a, r)| a / r).collect(), ctx: self.ctx.clone() }
    }
}

// ---------------------------------------------------------------------------
// Formal tails at infinity: sum_e sum_l c[e][l] r^e (ln r)^l on integer exponents.

/// Exponents below `floor` are unknown (truncated); `floor == i32::MIN` means exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Tail {
    /// Lowest stored exponent.
    lo: i32,
    rows: Vec<Vec<C64>>,
    floor: i32,
    /// Hard truncation applied to every result.
    min_exp: i32,
}

impl Tail {
    pub fn zero_with(min_exp: i32) -> Self {
        Tail { lo: 0, rows: Vec::new(), floor: i32::MIN, min_exp }
    }

    /// Exact monomial c r^e (ln r)^l.
    pub fn monomial(c: C64, e: i32, l: usize, min_exp: i32) -> Self {
        let mut row = vec![C64::default(); l + 1];
        row[l] = c;
        let mut t = Tail { lo: e, rows: vec![row], floor: i32::MIN, min_exp };
        t.normalize();
        t
    }

    /// From explicit terms (exponent, log power, coefficient), known down to `floor`.
    pub fn from_terms(terms: &[(i32, usize, C64)], floor: i32, min_exp: i32) -> Self {
        let mut t = Tail::zero_with(min_exp);
        for &(e, l, c) in terms {
            t = t.add(&Tail::monomial(c, e, l, min_exp));
        }
        t.floor = floor;
        t.normalize();
        t
    }

    pub fn min_exp(&self) -> i32 {
        self.min_exp
    }
    pub fn floor(&self) -> i32 {
        self.floor.max(self.min_exp)
    }
    pub fn with_floor(mut self, floor: i32) -> Self {
        self.floor = self.floor.max(floor);
        self.normalize();
        self
    }

    /// Highest exponent with a nonzero coefficient.
    pub fn top(&self) -> Option<i32> {
        self.rows.iter().rposition(|r| r.iter().any(|x| *x != C64::default())).map(|i| self.lo + i as i32)
    }

    pub fn log_depth(&self) -> usize {
        self.rows.iter().map(|r| r.len()).max().unwrap_or(1).saturating_sub(1)
    }

    pub fn coeff(&self, e: i32, l: usize) -> C64 {
        if e < self.lo {
            return C64::default();
        }
        self.rows.get((e - self.lo) as usize).and_then(|r| r.get(l)).copied().unwrap_or_default()
    }

    pub fn terms(&self) -> Vec<(i32, usize, C64)> {
        let mut out = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            for (l, c) in r.iter().enumerate() {
                if *c != C64::default() {
                    out.push((self.lo + i as i32, l, *c));
                }
            }
        }
        out
    }

    /// Drops rows below the effective floor, trims empty ends and zero log columns.
    fn normalize(&mut self) {
        let f = self.floor();
        if self.lo < f {
            let drop = ((f - self.lo) as usize).min(self.rows.len());
            self.rows.drain(..drop);
            self.lo = f;
        }
        while self.rows.last().is_some_and(|r| r.iter().all(|x| *x == C64::default())) {
            self.rows.pop();
        }
        while self.rows.first().is_some_and(|r| r.iter().all(|x| *x == C64::default())) {
            self.rows.remove(0);
            self.lo += 1;
        }
        for r in &mut self.rows {
            while r.len() > 1 && *r.last().unwrap() == C64::default() {
                r.pop();
            }
        }
        if self.rows.is_empty() {
            self.lo = 0;
        }
    }

    fn accumulate(rows: &mut Vec<Vec<C64>>, lo: i32, e: i32, l: usize, c: C64) {
        let i = (e - lo) as usize;
        if rows.len() <= i {
            rows.resize(i + 1, Vec::new());
        }
        if rows[i].len() <= l {
            rows[i].resize(l + 1, C64::default());
        }
        rows[i][l] += c;
    }

    fn build(terms: impl Iterator<Item = (i32, usize, C64)>, floor: i32, min_exp: i32) -> Self {
        let floor_eff = floor.max(min_exp);
        let all: Vec<_> = terms.collect();
        let n_all = all.len();
        let terms: Vec<_> = all.into_iter().filter(|t| t.0 >= floor_eff).collect();
        // Dropping terms below min_exp makes the result inexact there.
        let floor = if terms.len() < n_all || floor != i32::MIN { floor_eff } else { floor };
        let lo = terms.iter().map(|t| t.0).min().unwrap_or(0);
        let mut rows = Vec::new();
        for (e, l, c) in terms {
            Self::accumulate(&mut rows, lo, e, l, c);
        }
        let mut t = Tail { lo, rows, floor, min_exp };
        t.normalize();
        t
    }

    pub fn eval(&self, r: f64) -> C64 {
        let lr = r.ln();
        let mut acc = C64::default();
        for (i, row) in self.rows.iter().enumerate() {
            let mut lp = 1.0;
            let mut s = C64::default();
            for c in row {
                s += c * lp;
                lp *= lr;
            }
            acc += s * r.powi(self.lo + i as i32);
        }
        acc
    }

    /// Converts to a series on a single parity lattice, known down to the floor.
    pub fn to_series(&self) -> Result<LogPowerSeries> {
        let Some(top) = self.top() else {
            return Ok(LogPowerSeries::new(self.floor() as f64, Anchor::Infinity, vec![vec![C64::default()]]));
        };
        let terms = self.terms();
        if let Some(bad) = terms.iter().find(|t| (t.0 - top).rem_euclid(2) != 0) {
            return Err(Error::LatticeMismatch(top as f64, bad.0 as f64));
        }
        let lowest = if self.floor == i32::MIN { self.lo } else { self.floor() };
        let base = lowest + (top - lowest).rem_euclid(2);
        let rows = ((top - base) / 2 + 1) as usize;
        let coeffs: Vec<Vec<C64>> = (0..rows)
            .map(|n| (0..=self.log_depth()).map(|l| self.coeff(base + 2 * n as i32, l)).collect())
            .collect();
        Ok(LogPowerSeries::new(base as f64, Anchor::Infinity, coeffs))
    }

    /// Formal inverse of L = -Delta + (1 - 2 h1^2)/r^2 at infinity.
    ///
    /// Solves top-down; at the resonant exponents r^{+1} and r^{-1} the log power rises by
    /// one and the log-free coefficient (a kernel direction) is set to zero.
    pub fn solve_l(&self, h1: &Tail) -> Tail {
        let me = self.min_exp;
        let mut z = Tail::zero_with(me);
        let Some(top) = self.top() else { return z };
        let floor = self.floor();
        let apply_l = |z: &Tail| -> Tail {
            let pot = Tail::monomial(C64::new(1.0, 0.0), -2, 0, me).sub(&h1.mul(h1).scale_re(2.0).mul(&Tail::monomial(C64::new(1.0, 0.0), -2, 0, me)));
            z.lap().scale_re(-1.0).add(&pot.mul(z))
        };
        let mut q = top;
        while q >= floor {
            let resid = self.sub(&apply_l(&z));
            let rl: Vec<C64> = (0..=resid.log_depth()).map(|l| resid.coeff(q, l)).collect();
            if rl.iter().any(|x| *x != C64::default()) {
                let p = q + 2;
                let lmax = rl.len() - 1;
                let pf = p as f64;
                let mut c = vec![C64::default(); lmax + 3];
                if p * p != 1 {
                    for l in (0..=lmax).rev() {
                        let v = rl[l] + 2.0 * pf * (l + 1) as f64 * c[l + 1] + ((l + 2) * (l + 1)) as f64 * c[l + 2];
                        c[l] = -v / (pf * pf - 1.0);
                    }
                } else {
                    for l in (0..=lmax).rev() {
                        let v = rl[l] + ((l + 2) * (l + 1)) as f64 * c[l + 2];
                        c[l + 1] = -v / (2.0 * pf * (l + 1) as f64);
                    }
                }
                let terms: Vec<_> = c.iter().enumerate().map(|(l, &x)| (p, l, x)).collect();
                z = z.add(&Tail::from_terms(&terms, i32::MIN, me));
            }
            q -= 1;
        }
        z.floor = floor + 2;
        z.normalize();
        z
    }

    /// Tail of h1 = 2 sum_m (-1)^m r^{-2m-1}.
    pub fn h1(min_exp: i32) -> Tail {
        let terms: Vec<_> = (0..).map(|m: i32| -2 * m - 1).take_while(|&e| e >= min_exp).enumerate()
            .map(|(m, e)| (e, 0, C64::new(if m % 2 == 0 { 2.0 } else { -2.0 }, 0.0))).collect();
        Tail::from_terms(&terms, min_exp, min_exp)
    }

    /// Tail of h3 = 1 + 2 sum_{m>=1} (-1)^m r^{-2m}.
    pub fn h3(min_exp: i32) -> Tail {
        let mut terms = vec![(0, 0, C64::new(1.0, 0.0))];
        terms.extend((1..).map(|m: i32| -2 * m).take_while(|&e| e >= min_exp).enumerate()
            .map(|(m, e)| (e, 0, C64::new(if m % 2 == 0 { -2.0 } else { 2.0 }, 0.0))));
        Tail::from_terms(&terms, min_exp, min_exp)
    }

    /// Tail of h2 = r + (4 ln r - 1)/r + ..., from h2 = (r^4 + 4 r^2 ln r - 1) r^{-3} / (1 + r^{-2}).
    pub fn h2(min_exp: i32) -> Tail {
        let one = C64::new(1.0, 0.0);
        let num = Tail::from_terms(&[(1, 0, one), (-1, 1, 4.0 * one), (-3, 0, -one)], i32::MIN, min_exp);
        // 1/(1 + r^{-2}) = sum (-1)^m r^{-2m}
        let geo: Vec<_> = (0..).map(|m: i32| -2 * m).take_while(|&e| e >= min_exp - 4).enumerate()
            .map(|(m, e)| (e, 0, C64::new(if m % 2 == 0 { 1.0 } else { -1.0 }, 0.0))).collect();
        num.mul(&Tail::from_terms(&geo, min_exp - 4, min_exp - 4))
    }

    pub fn known(min_exp: i32) -> Known<Tail> {
        let one = C64::new(1.0, 0.0);
        Known {
            one: Tail::monomial(one, 0, 0, min_exp),
            r: Tail::monomial(one, 1, 0, min_exp),
            inv_r: Tail::monomial(one, -1, 0, min_exp),
            inv_r2: Tail::monomial(one, -2, 0, min_exp),
            h1: Tail::h1(min_exp),
            h3: Tail::h3(min_exp),
            inv_one_plus_h3: Tail::from_terms(&[(0, 0, 0.5 * one), (-2, 0, 0.5 * one)], i32::MIN, min_exp),
        }
    }
}

impl Algebra for Tail {
    fn zero(&self) -> Self {
        Tail::zero_with(self.min_exp)
    }
    fn is_zero(&self) -> bool {
        self.rows.is_empty()
    }
    fn add(&self, o: &Self) -> Self {
        let floor = self.floor.max(o.floor);
        Tail::build(self.terms().into_iter().chain(o.terms()), floor, self.min_exp.max(o.min_exp))
    }
    fn mul(&self, o: &Self) -> Self {
        let me = self.min_exp.max(o.min_exp);
        if self.is_zero() || o.is_zero() {
            return Tail::zero_with(me);
        }
        let (t1, t2) = (self.top().unwrap(), o.top().unwrap());
        let f = |fl: i32, t: i32| if fl == i32::MIN { i32::MIN } else { fl.saturating_add(t) };
        let floor = f(self.floor, t2).max(f(o.floor, t1));
        let floor_eff = floor.max(me);
        let mut prods = Vec::new();
        for (e1, l1, c1) in self.terms() {
            for (e2, l2, c2) in o.terms() {
                if e1 + e2 >= floor_eff {
                    prods.push((e1 + e2, l1 + l2, c1 * c2));
                }
            }
        }
        Tail::build(prods.into_iter(), floor, me)
    }
    fn scale(&self, c: C64) -> Self {
        Tail::build(self.terms().into_iter().map(|(e, l, x)| (e, l, x * c)), self.floor, self.min_exp)
    }
    fn re(&self) -> Self {
        Tail::build(self.terms().into_iter().map(|(e, l, x)| (e, l, C64::new(x.re, 0.0))), self.floor, self.min_exp)
    }
    fn im(&self) -> Self {
        Tail::build(self.terms().into_iter().map(|(e, l, x)| (e, l, C64::new(x.im, 0.0))), self.floor, self.min_exp)
    }
    fn dr(&self) -> Self {
        let mut out = Vec::new();
        for (e, l, c) in self.terms() {
            out.push((e - 1, l, c * e as f64));
            if l > 0 {
                out.push((e - 1, l - 1, c * l as f64));
            }
        }
        let floor = if self.floor == i32::MIN { i32::MIN } else { self.floor - 1 };
        Tail::build(out.into_iter(), floor, self.min_exp)
    }
    fn lap(&self) -> Self {
        // Delta(r^e ln^l) = r^{e-2}[e^2 ln^l + 2 e l ln^{l-1} + l(l-1) ln^{l-2}]
        let mut out = Vec::new();
        for (e, l, c) in self.terms() {
            let ef = e as f64;
            out.push((e - 2, l, c * ef * ef));
            if l >= 1 {
                out.push((e - 2, l - 1, c * 2.0 * ef * l as f64));
            }
            if l >= 2 {
                out.push((e - 2, l - 2, c * (l * (l - 1)) as f64));
            }
        }
        let floor = if self.floor == i32::MIN { i32::MIN } else { self.floor - 2 };
        Tail::build(out.into_iter(), floor, self.min_exp)
    }
    fn div_r(&self) -> Self {
        let floor = if self.floor == i32::MIN { i32::MIN } else { self.floor - 1 };
        Tail::build(self.terms().into_iter().map(|(e, l, c)| (e - 1, l, c)), floor, self.min_exp)
    }
}

// ---------------------------------------------------------------------------
// Truncated power series in an auxiliary parameter tau with coefficients in V.

#[derive(Clone)]
pub struct TauSeries<V> {
    pub c: Vec<V>,
}

impl<V: Algebra> TauSeries<V> {
    /// Series of order `k` (coefficients 0..=k) with all entries zero.
    pub fn zeros(proto: &V, k: usize) -> Self {
        TauSeries { c: vec![proto.zero(); k + 1] }
    }

    /// `v` placed at tau^0.
    pub fn constant(v: &V, k: usize) -> Self {
        let mut s = Self::zeros(v, k);
        s.c[0] = v.clone();
        s
    }

    pub fn order(&self) -> usize {
        self.c.len() - 1
    }

    /// tau * self, truncated.
    pub fn shift(&self) -> Self {
        let mut c = vec![self.c[0].zero()];
        c.extend(self.c[..self.order()].iter().cloned());
        TauSeries { c }
    }

    /// Multiplies coefficient j by f(j).
    pub fn weight(&self, f: impl Fn(usize) -> C64) -> Self {
        TauSeries { c: self.c.iter().enumerate().map(|(j, x)| x.scale(f(j))).collect() }
    }

    fn each(&self, f: impl Fn(&V) -> V) -> Self {
        TauSeries { c: self.c.iter().map(f).collect() }
    }

    /// sqrt(1 - s) - 1 for s with vanishing constant term, via the binomial series.
    pub fn sqrt_one_minus_minus_one(&self) -> Self {
        let k = self.order();
        let mut out = self.zero();
        let mut pow = self.clone();
        let mut binom = 1.0;
        for n in 1..=k {
            // binom(1/2, n) (-1)^n
            binom *= (0.5 - (n as f64 - 1.0)) / n as f64;
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            out = out.add(&pow.scale_re(binom * sign));
            pow = pow.mul(self);
            if pow.is_zero() {
                break;
            }
        }
        out
    }

    /// 1 / (a + d) = sum_n (-d)^n a^{-n-1}, where `inv_a` = 1/a sits at order 0 and `d`
    /// has no constant term.
    pub fn inverse_about(inv_a: &V, d: &Self) -> Self {
        let k = d.order();
        let base = TauSeries::constant(inv_a, k);
        let q = d.mul(&base).scale_re(-1.0);
        let mut out = base.clone();
        let mut pow = base;
        for _ in 1..=k {
            pow = pow.mul(&q);
            if pow.is_zero() {
                break;
            }
            out = out.add(&pow);
        }
        out
    }
}

impl<V: Algebra> Algebra for TauSeries<V> {
    fn zero(&self) -> Self {
        self.each(|x| x.zero())
    }
    fn is_zero(&self) -> bool {
        self.c.iter().all(|x| x.is_zero())
    }
    fn add(&self, o: &Self) -> Self {
        TauSeries { c: self.c.iter().zip(&o.c).map(|(a, b)| a.add(b)).collect() }
    }
    fn mul(&self, o: &Self) -> Self {
        let k = self.order().min(o.order());
        let mut c: Vec<V> = (0..=k).map(|_| self.c[0].zero()).collect();
        for i in 0..=k {
            if self.c[i].is_zero() {
                continue;
            }
            for j in 0..=(k - i) {
                if o.c[j].is_zero() {
                    continue;
                }
                c[i + j] = c[i + j].add(&self.c[i].mul(&o.c[j]));
            }
        }
        TauSeries { c }
    }
    fn scale(&self, c: C64) -> Self {
        self.each(|x| x.scale(c))
    }
    fn re(&self) -> Self {
        self.each(|x| x.re())
    }
    fn im(&self) -> Self {
        self.each(|x| x.im())
    }
    fn dr(&self) -> Self {
        self.each(|x| x.dr())
    }
    fn lap(&self) -> Self {
        self.each(|x| x.lap())
    }
    fn div_r(&self) -> Self {
        self.each(|x| x.div_r())
    }
    fn conj(&self) -> Self {
        self.each(|x| x.conj())
    }
}

impl<V: Algebra> Known<V> {
    pub fn lift(&self, k: usize) -> Known<TauSeries<V>> {
        self.map(|v| TauSeries::constant(v, k))
    }
}

// ---------------------------------------------------------------------------
// Truncated Laurent series at the origin.

/// sum_e c_e r^e on integer exponents; exponents above `ceil` are unknown, and
/// `ceil == i32::MAX` means exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Laurent {
    lo: i32,
    c: Vec<C64>,
    ceil: i32,
    /// Hard truncation applied to every result.
    max_exp: i32,
}

impl Laurent {
    pub fn zero_with(max_exp: i32) -> Self {
        Laurent { lo: 0, c: Vec::new(), ceil: i32::MAX, max_exp }
    }

    pub fn monomial(c: C64, e: i32, max_exp: i32) -> Self {
        Laurent::build(std::iter::once((e, c)), i32::MAX, max_exp)
    }

    /// Coefficients of r^lo, r^{lo+1}, ..., known up to `ceil`.
    pub fn from_coeffs(lo: i32, c: Vec<C64>, ceil: i32, max_exp: i32) -> Self {
        Laurent::build(c.into_iter().enumerate().map(|(i, x)| (lo + i as i32, x)), ceil, max_exp)
    }

    pub fn ceil(&self) -> i32 {
        self.ceil.min(self.max_exp)
    }
    pub fn max_exp(&self) -> i32 {
        self.max_exp
    }

    /// Lowest exponent with a nonzero coefficient.
    pub fn lowest(&self) -> Option<i32> {
        if self.c.is_empty() {
            None
        } else {
            Some(self.lo)
        }
    }

    pub fn coeff(&self, e: i32) -> C64 {
        if e < self.lo {
            return C64::default();
        }
        self.c.get((e - self.lo) as usize).copied().unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = (i32, C64)> + '_ {
        self.c.iter().enumerate().filter(|(_, x)| **x != C64::default()).map(|(i, &x)| (self.lo + i as i32, x))
    }

    fn build(terms: impl Iterator<Item = (i32, C64)>, ceil: i32, max_exp: i32) -> Self {
        let ceil_eff = ceil.min(max_exp);
        let mut dropped = false;
        let mut kept: Vec<(i32, C64)> = Vec::new();
        for (e, x) in terms {
            if e > ceil_eff {
                dropped = true;
            } else {
                kept.push((e, x));
            }
        }
        let ceil = if dropped || ceil != i32::MAX { ceil_eff } else { ceil };
        let lo = kept.iter().map(|t| t.0).min().unwrap_or(0);
        let hi = kept.iter().map(|t| t.0).max().unwrap_or(-1);
        let mut c = vec![C64::default(); (hi - lo + 1).max(0) as usize];
        for (e, x) in kept {
            c[(e - lo) as usize] += x;
        }
        let mut out = Laurent { lo, c, ceil, max_exp };
        out.trim();
        out
    }

    fn trim(&mut self) {
        while self.c.last().is_some_and(|x| *x == C64::default()) {
            self.c.pop();
        }
        let lead = self.c.iter().position(|x| *x != C64::default()).unwrap_or(self.c.len());
        self.c.drain(..lead);
        self.lo = if self.c.is_empty() { 0 } else { self.lo + lead as i32 };
    }

    fn shifted_ceil(&self, k: i32) -> i32 {
        if self.ceil == i32::MAX {
            i32::MAX
        } else {
            self.ceil + k
        }
    }

    pub fn eval(&self, r: f64) -> C64 {
        // Horner in r from the top, then the common factor r^lo.
        let mut acc = C64::default();
        for x in self.c.iter().rev() {
            acc = acc * r + x;
        }
        acc * r.powi(self.lo)
    }

    /// Size of the two highest terms relative to the value: a cheap truncation estimate.
    /// Zero when the series is known to terminate (two or more vanishing slots below ceil).
    pub fn tail_ratio(&self, r: f64) -> f64 {
        let n = self.c.len();
        if n < 2 || self.lo + (n as i32) < self.ceil() {
            return 0.0;
        }
        let last: f64 = (0..2).map(|i| (self.c[n - 1 - i] * r.powi(self.lo + (n - 1 - i) as i32)).norm()).sum();
        last / self.eval(r).norm().max(1e-300)
    }

    /// Converts to a series on a single parity lattice.
    pub fn to_series(&self) -> Result<LogPowerSeries> {
        let Some(lo) = self.lowest() else {
            return Ok(LogPowerSeries::new(0.0, Anchor::Zero, vec![vec![C64::default()]]));
        };
        if let Some((e, _)) = self.terms().find(|t| (t.0 - lo).rem_euclid(2) != 0) {
            return Err(Error::LatticeMismatch(lo as f64, e as f64));
        }
        let top = self.ceil().min(self.lo + self.c.len() as i32 - 1);
        let rows = ((top - lo).div_euclid(2) + 1).max(1) as usize;
        let coeffs = (0..rows).map(|k| vec![self.coeff(lo + 2 * k as i32)]).collect();
        Ok(LogPowerSeries::new(lo as f64, Anchor::Zero, coeffs))
    }
}

impl Algebra for Laurent {
    fn zero(&self) -> Self {
        Laurent::zero_with(self.max_exp)
    }
    fn is_zero(&self) -> bool {
        self.c.is_empty()
    }
    fn add(&self, o: &Self) -> Self {
        Laurent::build(self.terms().chain(o.terms()), self.ceil.min(o.ceil), self.max_exp.min(o.max_exp))
    }
    fn mul(&self, o: &Self) -> Self {
        let me = self.max_exp.min(o.max_exp);
        let (Some(l1), Some(l2)) = (self.lowest(), o.lowest()) else {
            return Laurent::zero_with(me);
        };
        let f = |c: i32, l: i32| if c == i32::MAX { i32::MAX } else { c + l };
        let ceil = f(self.ceil, l2).min(f(o.ceil, l1));
        let ceil_eff = ceil.min(me);
        let mut out = Vec::new();
        for (e1, c1) in self.terms() {
            for (e2, c2) in o.terms() {
                if e1 + e2 <= ceil_eff {
                    out.push((e1 + e2, c1 * c2));
                } else {
                    break;
                }
            }
        }
        Laurent::build(out.into_iter(), ceil, me)
    }
    fn scale(&self, c: C64) -> Self {
        Laurent::build(self.terms().map(|(e, x)| (e, x * c)), self.ceil, self.max_exp)
    }
    fn re(&self) -> Self {
        Laurent::build(self.terms().map(|(e, x)| (e, C64::new(x.re, 0.0))), self.ceil, self.max_exp)
    }
    fn im(&self) -> Self {
        Laurent::build(self.terms().map(|(e, x)| (e, C64::new(x.im, 0.0))), self.ceil, self.max_exp)
    }
    fn conj(&self) -> Self {
        Laurent::build(self.terms().map(|(e, x)| (e, x.conj())), self.ceil, self.max_exp)
    }
    fn dr(&self) -> Self {
        Laurent::build(self.terms().map(|(e, x)| (e - 1, x * e as f64)), self.shifted_ceil(-1), self.max_exp)
    }
    fn lap(&self) -> Self {
        Laurent::build(self.terms().map(|(e, x)| (e - 2, x * (e * e) as f64)), self.shifted_ceil(-2), self.max_exp)
    }
    fn div_r(&self) -> Self {
        Laurent::build(self.terms().map(|(e, x)| (e - 1, x)), self.shifted_ceil(-1), self.max_exp)
    }
}

// ---------------------------------------------------------------------------
// Tails at infinity with a common complex exponent: r^s * (tail).

/// r^s times a [`Tail`]. Sums require the shifts to differ by an integer.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedTail {
    pub s: C64,
    pub t: Tail,
}

impl ShiftedTail {
    pub fn new(s: C64, t: Tail) -> Self {
        ShiftedTail { s, t }
    }

    /// `o.t` re-expressed relative to `self.s`.
    fn aligned(&self, o: &Self) -> Tail {
        let d = o.s - self.s;
        let k = d.re.round();
        assert!(
            d.im.abs() < 1e-9 && (d.re - k).abs() < 1e-9,
            "adding tails whose exponents differ by a non-integer: {} vs {}",
            self.s,
            o.s
        );
        if k == 0.0 {
            o.t.clone()
        } else {
            o.t.mul(&Tail::monomial(C64::new(1.0, 0.0), k as i32, 0, o.t.min_exp()))
        }
    }

    pub fn eval(&self, r: f64) -> C64 {
        (self.s * r.ln()).exp() * self.t.eval(r)
    }
}

impl Algebra for ShiftedTail {
    fn zero(&self) -> Self {
        ShiftedTail { s: self.s, t: self.t.zero() }
    }
    fn is_zero(&self) -> bool {
        self.t.is_zero()
    }
    fn add(&self, o: &Self) -> Self {
        // A zero carries no exponent information of its own.
        if self.is_zero() {
            return o.clone();
        }
        if o.is_zero() {
            return self.clone();
        }
        ShiftedTail { s: self.s, t: self.t.add(&self.aligned(o)) }
    }
    fn mul(&self, o: &Self) -> Self {
        ShiftedTail { s: self.s + o.s, t: self.t.mul(&o.t) }
    }
    fn scale(&self, c: C64) -> Self {
        ShiftedTail { s: self.s, t: self.t.scale(c) }
    }
    fn re(&self) -> Self {
        assert!(self.s.im == 0.0, "real part of a tail with a complex exponent");
        ShiftedTail { s: self.s, t: self.t.re() }
    }
    fn im(&self) -> Self {
        assert!(self.s.im == 0.0, "imaginary part of a tail with a complex exponent");
        ShiftedTail { s: self.s, t: self.t.im() }
    }
    fn conj(&self) -> Self {
        ShiftedTail { s: self.s.conj(), t: self.t.conj() }
    }
    fn dr(&self) -> Self {
        ShiftedTail { s: self.s, t: self.t.dr().add(&self.t.div_r().scale(self.s)) }
    }
    fn lap(&self) -> Self {
        let d = self.dr();
        d.dr().add(&d.div_r())
    }
    fn div_r(&self) -> Self {
        ShiftedTail { s: self.s, t: self.t.div_r() }
    }
}

// ---------------------------------------------------------------------------
// Polynomials in a logarithmic variable L with d L / d r = 1/r.

/// sum_l L^l c[l] where L = ln r + const; the derivative acts as
/// d(L^l f) = L^l f' + l L^{l-1} f / r.
#[derive(Clone, Debug)]
pub struct LPoly<V> {
    pub c: Vec<V>,
}

impl<V: Algebra> LPoly<V> {
    pub fn constant(v: &V) -> Self {
        LPoly { c: vec![v.clone()] }
    }

    /// Coefficient of L^l (zero beyond the degree).
    pub fn get(&self, l: usize) -> V {
        self.c.get(l).cloned().unwrap_or_else(|| self.c[0].zero())
    }

    fn each(&self, f: impl Fn(&V) -> V) -> Self {
        LPoly { c: self.c.iter().map(f).collect() }
    }

    fn trimmed(mut self) -> Self {
        while self.c.len() > 1 && self.c.last().unwrap().is_zero() {
            self.c.pop();
        }
        self
    }
}

impl<V: Algebra> Algebra for LPoly<V> {
    fn zero(&self) -> Self {
        LPoly { c: vec![self.c[0].zero()] }
    }
    fn is_zero(&self) -> bool {
        self.c.iter().all(|x| x.is_zero())
    }
    fn add(&self, o: &Self) -> Self {
        let n = self.c.len().max(o.c.len());
        LPoly { c: (0..n).map(|l| self.get(l).add(&o.get(l))).collect() }.trimmed()
    }
    fn mul(&self, o: &Self) -> Self {
        let mut c: Vec<V> = vec![self.c[0].zero(); self.c.len() + o.c.len() - 1];
        for (i, a) in self.c.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for (j, b) in o.c.iter().enumerate() {
                if !b.is_zero() {
                    c[i + j] = c[i + j].add(&a.mul(b));
                }
            }
        }
        LPoly { c }.trimmed()
    }
    fn scale(&self, c: C64) -> Self {
        self.each(|x| x.scale(c))
    }
    fn re(&self) -> Self {
        self.each(|x| x.re())
    }
    fn im(&self) -> Self {
        self.each(|x| x.im())
    }
    fn conj(&self) -> Self {
        self.each(|x| x.conj())
    }
    fn dr(&self) -> Self {
        let n = self.c.len();
        LPoly {
            c: (0..n)
                .map(|l| {
                    let d = self.c[l].dr();
                    if l + 1 < n {
                        d.add(&self.c[l + 1].div_r().scale_re((l + 1) as f64))
                    } else {
                        d
                    }
                })
                .collect(),
        }
        .trimmed()
    }
    fn lap(&self) -> Self {
        let d = self.dr();
        d.dr().add(&d.div_r())
    }
    fn div_r(&self) -> Self {
        self.each(|x| x.div_r())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{h1, h2, h3};

    const ME: i32 = -31;

    #[test]
    fn known_tails_match_closed_forms() {
        for r in [5.0, 20.0, 100.0] {
            assert!((Tail::h1(ME).eval(r).re - h1(r)).abs() < 1e-14 * h1(r).abs().max(1e-300) + 1e-15);
            assert!((Tail::h3(ME).eval(r).re - h3(r)).abs() < 1e-14);
            assert!((Tail::h2(ME).eval(r).re - h2(r)).abs() < 1e-13 * r);
        }
        let t = Tail::h2(ME);
        assert_eq!(t.coeff(1, 0), C64::new(1.0, 0.0));
        assert_eq!(t.coeff(-1, 1), C64::new(4.0, 0.0));
        assert_eq!(t.coeff(-1, 0), C64::new(-1.0, 0.0));
    }

    #[test]
    fn kernel_is_annihilated_formally() {
        let k = Tail::known(ME);
        let l = |z: &Tail| {
            let pot = k.one.sub(&k.h1.mul(&k.h1).scale_re(2.0)).mul(&k.inv_r2);
            z.lap().scale_re(-1.0).add(&pot.mul(z))
        };
        for z in [Tail::h1(ME), Tail::h2(ME)] {
            let lz = l(&z);
            assert!(lz.terms().iter().all(|t| t.2.norm() < 1e-9), "{:?}", lz.terms().first());
        }
    }

    #[test]
    fn formal_inverse_of_l() {
        let k = Tail::known(ME);
        // F = h1 (resonant at r^{-1} -> z ~ r ln r)
        let f = k.h1.clone();
        let z = f.solve_l(&k.h1);
        assert!((z.coeff(1, 1) - C64::new(-1.0, 0.0)).norm() < 1e-14);
        assert_eq!(z.coeff(1, 0), C64::default());
        let pot = k.one.sub(&k.h1.mul(&k.h1).scale_re(2.0)).mul(&k.inv_r2);
        let back = z.lap().scale_re(-1.0).add(&pot.mul(&z));
        let diff = back.sub(&f);
        assert!(diff.terms().iter().all(|t| t.2.norm() < 1e-10 || t.0 < z.floor() - 2), "{:?}", diff.terms());
    }

    #[test]
    fn grid_and_tail_products_agree() {
        let g = RadialGrid::geometric(10.0, 100.0, 200).unwrap();
        let ctx = GridCtx::new(&g, 8).unwrap();
        let kg = ctx.known();
        let kt = Tail::known(ME);
        let eg = kg.h1.mul(&kg.h3).lap().add(&kg.r.mul(&kg.h1.dr()));
        let et = kt.h1.mul(&kt.h3).lap().add(&kt.r.mul(&kt.h1.dr()));
        for (i, &r) in g.nodes().iter().enumerate().skip(10).step_by(37) {
            assert!((eg.v[i] - et.eval(r)).norm() < 1e-9 * et.eval(r).norm().max(1e-6), "r={r}");
        }
    }

    #[test]
    fn binomial_gamma() {
        // s = tau^2 a with constant a: sqrt(1 - tau^2 a) - 1 = -a tau^2/2 - a^2 tau^4/8 - ...
        let g = RadialGrid::geometric(1.0, 10.0, 40).unwrap();
        let ctx = GridCtx::new(&g, 4).unwrap();
        let a = ctx.real(|_| 0.3);
        let mut s = TauSeries::zeros(&a, 6);
        s.c[2] = a.clone();
        let gm = s.sqrt_one_minus_minus_one();
        assert!((gm.c[2].v[0].re + 0.15).abs() < 1e-15);
        assert!((gm.c[4].v[0].re + 0.09 / 8.0).abs() < 1e-15);
        assert!((gm.c[6].v[0].re + 0.027 / 16.0).abs() < 1e-15);
        let tau: f64 = 0.5;
        let total: f64 = gm.c.iter().enumerate().map(|(j, x)| x.v[0].re * tau.powi(j as i32)).sum();
        assert!((total - ((1.0 - 0.3 * tau * tau).sqrt() - 1.0)).abs() < 1e-5);
    }
}

// ---------------------------------------------------------------------------
// Taylor jets at a set of points.

/// Truncated Taylor expansions f(r_i + h) = sum_n c_{i,n} h^n at points r_i > 0.
///
/// Every operation is exact on the jets; only `len` leading coefficients are trusted
/// (derivatives use up one each).
#[derive(Clone, Debug, PartialEq)]
pub struct Jets {
    at: Arc<Vec<f64>>,
    len: usize,
    /// Point-major with stride `len`.
    c: Vec<C64>,
}

fn jet_mul(a: &[C64], b: &[C64], out: &mut [C64]) {
    for n in 0..out.len() {
        let mut s = C64::default();
        for i in 0..=n {
            s += a[i] * b[n - i];
        }
        out[n] = s;
    }
}

fn jet_recip(a: &[C64], out: &mut [C64]) {
    assert!(a[0] != C64::default(), "reciprocal of a jet with zero value");
    let inv = 1.0 / a[0];
    out[0] = inv;
    for n in 1..out.len() {
        let mut s = C64::default();
        for i in 1..=n {
            s += a[i] * out[n - i];
        }
        out[n] = -s * inv;
    }
}

fn jet_exp(a: &[C64], out: &mut [C64]) {
    out[0] = a[0].exp();
    for n in 1..out.len() {
        let mut s = C64::default();
        for k in 1..=n {
            s += a[k] * out[n - k] * k as f64;
        }
        out[n] = s / n as f64;
    }
}

impl Jets {
    /// Jets from per-point coefficient vectors (each of length `len`).
    pub fn from_fn(at: &[f64], len: usize, f: impl Fn(f64) -> Vec<C64>) -> Self {
        assert!(at.iter().all(|&r| r > 0.0), "jets live at positive radii");
        let mut c = Vec::with_capacity(at.len() * len);
        for &r in at {
            let v = f(r);
            assert_eq!(v.len(), len);
            c.extend(v);
        }
        Jets { at: Arc::new(at.to_vec()), len, c }
    }

    pub fn constant(at: &[f64], len: usize, v: C64) -> Self {
        Self::from_fn(at, len, |_| {
            let mut c = vec![C64::default(); len];
            c[0] = v;
            c
        })
    }

    /// The coordinate r.
    pub fn coord(at: &[f64], len: usize) -> Self {
        Self::from_fn(at, len, |r| {
            let mut c = vec![C64::default(); len];
            c[0] = C64::new(r, 0.0);
            if len > 1 {
                c[1] = C64::new(1.0, 0.0);
            }
            c
        })
    }

    /// r^p for complex p.
    pub fn power(at: &[f64], len: usize, p: C64) -> Self {
        Self::from_fn(at, len, |r| {
            let mut c = vec![C64::default(); len];
            c[0] = (p * r.ln()).exp();
            for n in 1..len {
                c[n] = c[n - 1] * (p - (n - 1) as f64) / (n as f64 * r);
            }
            c
        })
    }

    /// ln r.
    pub fn log(at: &[f64], len: usize) -> Self {
        Self::from_fn(at, len, |r| {
            let mut c = vec![C64::default(); len];
            c[0] = C64::new(r.ln(), 0.0);
            for n in 1..len {
                let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
                c[n] = C64::new(sign / (n as f64 * r.powi(n as i32)), 0.0);
            }
            c
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.at
    }
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Taylor coefficients at point i.
    pub fn coeffs(&self, i: usize) -> &[C64] {
        &self.c[i * self.len..(i + 1) * self.len]
    }

    pub fn values(&self) -> Vec<C64> {
        assert!(self.len > 0, "jet has no trusted coefficients");
        (0..self.at.len()).map(|i| self.c[i * self.len]).collect()
    }

    /// k-th derivative at every point.
    pub fn derivative(&self, k: usize) -> Vec<C64> {
        assert!(k < self.len, "derivative {k} beyond jet length {}", self.len);
        let fact: f64 = (1..=k).map(|x| x as f64).product();
        (0..self.at.len()).map(|i| self.c[i * self.len + k] * fact).collect()
    }

    /// Drops coefficients beyond `len`.
    pub fn truncate(&self, len: usize) -> Self {
        let len = len.min(self.len);
        let c = (0..self.at.len()).flat_map(|i| self.coeffs(i)[..len].to_vec()).collect();
        Jets { at: self.at.clone(), len, c }
    }

    fn pointwise(&self, f: impl Fn(usize, &[C64], &mut [C64])) -> Self {
        let mut c = vec![C64::default(); self.c.len()];
        for i in 0..self.at.len() {
            f(i, self.coeffs(i), &mut c[i * self.len..(i + 1) * self.len]);
        }
        Jets { at: self.at.clone(), len: self.len, c }
    }

    pub fn recip(&self) -> Self {
        self.pointwise(|_, a, o| jet_recip(a, o))
    }

    pub fn exp(&self) -> Self {
        self.pointwise(|_, a, o| jet_exp(a, o))
    }

    /// Applies `f` to each point's jet where `keep(r)` holds and zeroes it elsewhere.
    pub fn masked(&self, keep: impl Fn(f64) -> bool, f: impl Fn(&Jets) -> Jets) -> Self {
        let idx: Vec<usize> = (0..self.at.len()).filter(|&i| keep(self.at[i])).collect();
        let mut out = self.zero();
        if idx.is_empty() {
            return out;
        }
        let sub_at: Vec<f64> = idx.iter().map(|&i| self.at[i]).collect();
        let sub = Jets { at: Arc::new(sub_at), len: self.len, c: idx.iter().flat_map(|&i| self.coeffs(i).to_vec()).collect() };
        let res = f(&sub);
        out.len = res.len;
        out.c = vec![C64::default(); self.at.len() * res.len];
        for (k, &i) in idx.iter().enumerate() {
            out.c[i * res.len..(i + 1) * res.len].copy_from_slice(res.coeffs(k));
        }
        out
    }

    fn aligned(&self, o: &Self) -> (Self, Self) {
        assert!(Arc::ptr_eq(&self.at, &o.at) || self.at == o.at, "jets at different points");
        let len = self.len.min(o.len);
        (self.truncate(len), o.truncate(len))
    }
}

impl Algebra for Jets {
    fn zero(&self) -> Self {
        Jets { at: self.at.clone(), len: self.len, c: vec![C64::default(); self.c.len()] }
    }
    fn is_zero(&self) -> bool {
        self.c.iter().all(|x| *x == C64::default())
    }
    fn add(&self, o: &Self) -> Self {
        let (a, b) = self.aligned(o);
        Jets { at: a.at.clone(), len: a.len, c: a.c.iter().zip(&b.c).map(|(x, y)| x + y).collect() }
    }
    fn mul(&self, o: &Self) -> Self {
        let (a, b) = self.aligned(o);
        a.pointwise(|i, x, out| jet_mul(x, b.coeffs(i), out))
    }
    fn scale(&self, c: C64) -> Self {
        Jets { at: self.at.clone(), len: self.len, c: self.c.iter().map(|x| x * c).collect() }
    }
    fn re(&self) -> Self {
        Jets { at: self.at.clone(), len: self.len, c: self.c.iter().map(|x| C64::new(x.re, 0.0)).collect() }
    }
    fn im(&self) -> Self {
        Jets { at: self.at.clone(), len: self.len, c: self.c.iter().map(|x| C64::new(x.im, 0.0)).collect() }
    }
    fn conj(&self) -> Self {
        Jets { at: self.at.clone(), len: self.len, c: self.c.iter().map(|x| x.conj()).collect() }
    }
    fn dr(&self) -> Self {
        assert!(self.len > 0, "derivative of an exhausted jet");
        let len = self.len - 1;
        let c = (0..self.at.len()).flat_map(|i| (0..len).map(move |n| (i, n))).map(|(i, n)| self.c[i * self.len + n + 1] * (n + 1) as f64).collect();
        Jets { at: self.at.clone(), len, c }
    }
    fn lap(&self) -> Self {
        let d = self.dr();
        d.dr().add(&d.div_r())
    }
    fn div_r(&self) -> Self {
        self.mul(&Jets::coord(&self.at, self.len).recip())
    }
}
