//! Radial grids, finite-difference stencils, cumulative quadrature and interpolation.
//!
//! Geometric grids are uniform in s = ln r. Derivatives are taken in the uniform
//! coordinate and mapped back: f_r = f_s / r, f_rr = (f_ss - f_s) / r^2.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values that finite differences and quadrature can act on (real or complex).
pub trait Scalar: Copy + Default + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {}
impl<T> Scalar for T where T: Copy + Default + Add<Output = T> + Sub<Output = T> + Mul<f64, Output = T> {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Spacing {
    Uniform,
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    nodes: Vec<f64>,
    spacing: Spacing,
    /// Step in the uniform coordinate (r or ln r).
    h: f64,
}

pub const MIN_NODES_PER_DECADE: f64 = 16.0;

impl RadialGrid {
    pub fn geometric(rmin: f64, rmax: f64, n: usize) -> Result<Self> {
        if !(rmin > 0.0 && rmax > rmin) {
            return Err(Error::InvalidGrid(format!("need 0 < rmin < rmax, got [{rmin}, {rmax}]")));
        }
        if n < 3 {
            return Err(Error::TooFewNodes(n, 3));
        }
        let decades = (rmax / rmin).log10();
        if (n - 1) as f64 / decades < MIN_NODES_PER_DECADE - 1e-9 {
            return Err(Error::InvalidGrid(format!(
                "{:.1} nodes per decade; at least {MIN_NODES_PER_DECADE} required",
                (n - 1) as f64 / decades
            )));
        }
        let (s0, s1) = (rmin.ln(), rmax.ln());
        let h = (s1 - s0) / (n - 1) as f64;
        let mut nodes: Vec<f64> = (0..n).map(|i| (s0 + h * i as f64).exp()).collect();
        nodes[0] = rmin;
        nodes[n - 1] = rmax;
        Ok(RadialGrid { nodes, spacing: Spacing::Geometric, h })
    }

    /// Geometric grid with a prescribed density instead of a node count.
    pub fn geometric_per_decade(rmin: f64, rmax: f64, per_decade: f64) -> Result<Self> {
        let n = ((rmax / rmin).log10() * per_decade).ceil() as usize + 1;
        Self::geometric(rmin, rmax, n.max(3))
    }

    pub fn uniform(rmin: f64, rmax: f64, n: usize) -> Result<Self> {
        if !(rmin > 0.0 && rmax > rmin) {
            return Err(Error::InvalidGrid(format!("need 0 < rmin < rmax, got [{rmin}, {rmax}]")));
        }
        if n < 3 {
            return Err(Error::TooFewNodes(n, 3));
        }
        let h = (rmax - rmin) / (n - 1) as f64;
        let mut nodes: Vec<f64> = (0..n).map(|i| rmin + h * i as f64).collect();
        nodes[n - 1] = rmax;
        Ok(RadialGrid { nodes, spacing: Spacing::Uniform, h })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn spacing(&self) -> Spacing {
        self.spacing
    }
    pub fn rmin(&self) -> f64 {
        self.nodes[0]
    }
    pub fn rmax(&self) -> f64 {
        *self.nodes.last().unwrap()
    }
    pub fn step(&self) -> f64 {
        self.h
    }

    /// Uniform coordinate of a radius.
    pub fn coord(&self, r: f64) -> f64 {
        match self.spacing {
            Spacing::Uniform => r,
            Spacing::Geometric => r.ln(),
        }
    }

    /// Every other node; used for Richardson checks.
    pub fn coarsened(&self) -> RadialGrid {
        let nodes: Vec<f64> = self.nodes.iter().step_by(2).copied().collect();
        RadialGrid { nodes, spacing: self.spacing, h: 2.0 * self.h }
    }

    /// Checks strict monotonicity and the constant-ratio property.
    pub fn check_invariants(&self) -> Result<()> {
        if self.nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("nodes not strictly increasing".into()));
        }
        if self.spacing == Spacing::Geometric {
            let q = self.nodes[1] / self.nodes[0];
            if self.nodes.windows(2).any(|w| ((w[1] / w[0]) / q - 1.0).abs() > 1e-12) {
                return Err(Error::InvalidGrid("geometric ratio not constant".into()));
            }
        }
        Ok(())
    }

    /// Index i with nodes[i] <= r < nodes[i+1] (clamped).
    pub fn locate(&self, r: f64) -> usize {
        let x = (self.coord(r) - self.coord(self.nodes[0])) / self.h;
        let n = self.nodes.len();
        if x <= 0.0 {
            0
        } else {
            (x.floor() as usize).min(n - 2)
        }
    }
}

/// Finite-difference weights (Fornberg). Returns w[k][j] for derivative order k at x0.
pub fn fornberg(x0: f64, xs: &[f64], max_deriv: usize) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut c = vec![vec![0.0; n]; max_deriv + 1];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(max_deriv);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Stencil window of `width` nodes around `i`, shifted inward at the ends.
fn window(i: usize, width: usize, n: usize) -> usize {
    let half = width / 2;
    let start = i.saturating_sub(half);
    start.min(n - width)
}

/// Precomputed first and second derivative stencils in the uniform coordinate.
#[derive(Debug, Clone)]
pub struct DiffOp {
    order: usize,
    r: Vec<f64>,
    spacing: Spacing,
    d1: Vec<(usize, Vec<f64>)>,
    d2: Vec<(usize, Vec<f64>)>,
}

impl DiffOp {
    /// `order` is the formal accuracy (even, >= 2); interior stencils are centered.
    pub fn new(grid: &RadialGrid, order: usize) -> Result<Self> {
        let order = order.max(2) + order % 2;
        let n = grid.len();
        if n < order + 2 {
            return Err(Error::TooFewNodes(n, order + 2));
        }
        let h = grid.step();
        let mut d1 = Vec::with_capacity(n);
        let mut d2 = Vec::with_capacity(n);
        for i in 0..n {
            let centered = i >= order / 2 && i + order / 2 < n;
            let width = if centered { order + 1 } else { order + 2 };
            let s = window(i, width, n);
            let xs: Vec<f64> = (s..s + width).map(|j| (j as f64 - i as f64) * h).collect();
            let w = fornberg(0.0, &xs, 2);
            d1.push((s, w[1].clone()));
            d2.push((s, w[2].clone()));
        }
        Ok(DiffOp { order, r: grid.nodes().to_vec(), spacing: grid.spacing(), d1, d2 })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn apply<T: Scalar>(st: &[(usize, Vec<f64>)], f: &[T]) -> Vec<T> {
        st.iter()
            .map(|(s, w)| w.iter().enumerate().fold(T::default(), |acc, (k, &wk)| acc + f[s + k] * wk))
            .collect()
    }

    /// d/dx in the uniform coordinate.
    pub fn dx<T: Scalar>(&self, f: &[T]) -> Vec<T> {
        Self::apply(&self.d1, f)
    }

    pub fn dxx<T: Scalar>(&self, f: &[T]) -> Vec<T> {
        Self::apply(&self.d2, f)
    }

    /// d/dr.
    pub fn dr<T: Scalar>(&self, f: &[T]) -> Vec<T> {
        let fx = self.dx(f);
        match self.spacing {
            Spacing::Uniform => fx,
            Spacing::Geometric => fx.iter().zip(&self.r).map(|(&v, &r)| v * (1.0 / r)).collect(),
        }
    }

    /// d^2/dr^2.
    pub fn drr<T: Scalar>(&self, f: &[T]) -> Vec<T> {
        match self.spacing {
            Spacing::Uniform => self.dxx(f),
            Spacing::Geometric => {
                let fx = self.dx(f);
                let fxx = self.dxx(f);
                fxx.iter().zip(&fx).zip(&self.r).map(|((&a, &b), &r)| (a - b) * (1.0 / (r * r))).collect()
            }
        }
    }

    /// Radial Laplacian f_rr + f_r / r.
    pub fn laplacian<T: Scalar>(&self, f: &[T]) -> Vec<T> {
        match self.spacing {
            Spacing::Uniform => {
                let fx = self.dx(f);
                let fxx = self.dxx(f);
                fxx.iter().zip(&fx).zip(&self.r).map(|((&a, &b), &r)| a + b * (1.0 / r)).collect()
            }
            // f_rr + f_r/r = f_ss / r^2 on a log grid.
            Spacing::Geometric => {
                let fxx = self.dxx(f);
                fxx.iter().zip(&self.r).map(|(&a, &r)| a * (1.0 / (r * r))).collect()
            }
        }
    }

    /// Sparse rows of d/dr as (start, weights); used by the implicit stepper.
    pub fn dr_rows(&self) -> Vec<(usize, Vec<f64>)> {
        self.d1
            .iter()
            .zip(&self.r)
            .map(|((s, w), &r)| {
                let scale = if self.spacing == Spacing::Geometric { 1.0 / r } else { 1.0 };
                (*s, w.iter().map(|x| x * scale).collect())
            })
            .collect()
    }

    /// Sparse rows of the radial Laplacian.
    pub fn laplacian_rows(&self) -> Vec<(usize, Vec<f64>)> {
        (0..self.r.len())
            .map(|i| {
                let r = self.r[i];
                let (s2, w2) = &self.d2[i];
                let (s1, w1) = &self.d1[i];
                let start = (*s1).min(*s2);
                let end = (s1 + w1.len()).max(s2 + w2.len());
                let mut w = vec![0.0; end - start];
                match self.spacing {
                    Spacing::Geometric => {
                        for (k, x) in w2.iter().enumerate() {
                            w[s2 + k - start] += x / (r * r);
                        }
                    }
                    Spacing::Uniform => {
                        for (k, x) in w2.iter().enumerate() {
                            w[s2 + k - start] += x;
                        }
                        for (k, x) in w1.iter().enumerate() {
                            w[s1 + k - start] += x / r;
                        }
                    }
                }
                (start, w)
            })
            .collect()
    }
}

/// Weights of the integral over [a, b] of the interpolant through `xs`.
fn interval_weights(xs: &[f64], a: f64, b: f64) -> Vec<f64> {
    let n = xs.len();
    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut rhs = nalgebra::DVector::<f64>::zeros(n);
    for k in 0..n {
        for (j, &x) in xs.iter().enumerate() {
            m[(k, j)] = x.powi(k as i32);
        }
        rhs[k] = (b.powi(k as i32 + 1) - a.powi(k as i32 + 1)) / (k + 1) as f64;
    }
    let sol = m.lu().solve(&rhs).expect("Vandermonde system on distinct nodes is regular");
    sol.iter().copied().collect()
}

/// Cumulative quadrature with per-interval Lagrange rules of a fixed order.
#[derive(Debug, Clone)]
pub struct Quadrature {
    r: Vec<f64>,
    spacing: Spacing,
    rules: Vec<(usize, Vec<f64>)>,
}

impl Quadrature {
    /// `order` points per local interpolant (even; 4 reproduces Simpson-class accuracy).
    pub fn new(grid: &RadialGrid, order: usize) -> Result<Self> {
        let p = (order.max(2) + order % 2).min(grid.len());
        let n = grid.len();
        if n < p {
            return Err(Error::TooFewNodes(n, p));
        }
        let h = grid.step();
        let rules = (0..n - 1)
            .map(|i| {
                let s = (i + 1).saturating_sub(p / 2).min(n - p);
                let xs: Vec<f64> = (s..s + p).map(|j| (j as f64 - i as f64) * h).collect();
                (s, interval_weights(&xs, 0.0, h))
            })
            .collect();
        Ok(Quadrature { r: grid.nodes().to_vec(), spacing: grid.spacing(), rules })
    }

    /// Cumulative integral in the uniform coordinate, starting from `start` at node 0.
    pub fn cumulative_dx<T: Scalar>(&self, f: &[T], start: T) -> Vec<T> {
        let mut out = Vec::with_capacity(f.len());
        let mut acc = start;
        out.push(acc);
        for (s, w) in &self.rules {
            let inc = w.iter().enumerate().fold(T::default(), |a, (k, &wk)| a + f[s + k] * wk);
            acc = acc + inc;
            out.push(acc);
        }
        out
    }

    /// Cumulative integral of f dr from the first node (plus `start`).
    pub fn cumulative_dr<T: Scalar>(&self, f: &[T], start: T) -> Vec<T> {
        match self.spacing {
            Spacing::Uniform => self.cumulative_dx(f, start),
            Spacing::Geometric => {
                let g: Vec<T> = f.iter().zip(&self.r).map(|(&v, &r)| v * r).collect();
                self.cumulative_dx(&g, start)
            }
        }
    }

    /// Integral of f dr over the whole grid.
    pub fn integral_dr<T: Scalar>(&self, f: &[T]) -> T {
        *self.cumulative_dr(f, T::default()).last().unwrap()
    }

    /// Integral of f r dr (planar radial measure without the 2 pi).
    pub fn integral_rdr<T: Scalar>(&self, f: &[T]) -> T {
        let g: Vec<T> = f.iter().zip(&self.r).map(|(&v, &r)| v * r).collect();
        self.integral_dr(&g)
    }
}

/// Local Lagrange interpolation in the uniform coordinate.
#[derive(Debug, Clone)]
pub struct Interpolator {
    grid: RadialGrid,
    width: usize,
}

impl Interpolator {
    pub fn new(grid: &RadialGrid, order: usize) -> Self {
        Interpolator { grid: grid.clone(), width: (order + 1).min(grid.len()) }
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }

    /// Returns `None` outside [rmin, rmax] (with a relative slack of 1e-12).
    pub fn eval<T: Scalar>(&self, f: &[T], r: f64) -> Option<T> {
        let g = &self.grid;
        if r < g.rmin() * (1.0 - 1e-12) || r > g.rmax() * (1.0 + 1e-12) {
            return None;
        }
        let n = g.len();
        let i = g.locate(r);
        let s = (i + 1).saturating_sub(self.width / 2).min(n - self.width);
        let x0 = g.coord(g.nodes()[0]);
        let x = g.coord(r);
        let xs: Vec<f64> = (s..s + self.width).map(|j| x0 + g.step() * j as f64).collect();
        let mut acc = T::default();
        for (k, &xk) in xs.iter().enumerate() {
            let mut l = 1.0;
            for (m, &xm) in xs.iter().enumerate() {
                if m != k {
                    l *= (x - xm) / (xk - xm);
                }
            }
            acc = acc + f[s + k] * l;
        }
        Some(acc)
    }
}
