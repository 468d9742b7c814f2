//! Sphere-valued equivariant fields, harmonic-map profiles, energy and degree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DiffOp, Quadrature, RadialGrid};

pub type Vec3 = [f64; 3];

pub const UNIT_TOL: f64 = 1e-10;

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: &Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Rotation by `angle` about the vertical axis (the generator R, with R k = 0).
#[inline]
pub fn rotate(v: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// h1^m(r) = 2r^m/(r^{2m}+1) = sech(m ln r).
pub fn h1m(m: u32, r: f64) -> f64 {
    1.0 / (m as f64 * r.ln()).cosh()
}

/// h3^m(r) = (r^{2m}-1)/(r^{2m}+1) = tanh(m ln r).
pub fn h3m(m: u32, r: f64) -> f64 {
    (m as f64 * r.ln()).tanh()
}

pub fn h1(r: f64) -> f64 {
    h1m(1, r)
}

pub fn h3(r: f64) -> f64 {
    h3m(1, r)
}

/// Second (log-carrying) kernel element of L.
pub fn h2(r: f64) -> f64 {
    (r.powi(4) + 4.0 * r * r * r.ln() - 1.0) / (r * (r * r + 1.0))
}

pub fn h1_prime(r: f64) -> f64 {
    -h1(r) * h3(r) / r
}

pub fn h2_prime(r: f64) -> f64 {
    let n = r.powi(4) + 4.0 * r * r * r.ln() - 1.0;
    let dn = 4.0 * r.powi(3) + 8.0 * r * r.ln() + 4.0 * r;
    let d = r.powi(3) + r;
    let dd = 3.0 * r * r + 1.0;
    (dn * d - n * dd) / (d * d)
}

/// kappa(r) = -2 h1^2 / r^2.
pub fn kappa(r: f64) -> f64 {
    -2.0 * h1(r).powi(2) / (r * r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pole {
    North,
    South,
}

impl Pole {
    pub fn v3(self) -> f64 {
        match self {
            Pole::North => 1.0,
            Pole::South => -1.0,
        }
    }

    fn from_end(v3: f64) -> Option<Pole> {
        if v3 >= 0.99 {
            Some(Pole::North)
        } else if v3 <= -0.99 {
            Some(Pole::South)
        } else {
            None
        }
    }
}

/// Radial sample of an m-equivariant unit-vector field u(x) = e^{m theta R} v(|x|).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereField {
    grid: RadialGrid,
    v: Vec<Vec3>,
    m: u32,
    /// Limits at r = 0 and r = infinity; `None` when the ends are not near a pole.
    origin: Option<Pole>,
    infinity: Option<Pole>,
}

impl SphereField {
    /// Rejects samples off the sphere by more than `UNIT_TOL`.
    pub fn new(grid: RadialGrid, v: Vec<Vec3>, m: u32) -> Result<Self> {
        if v.len() != grid.len() {
            return Err(Error::InvalidGrid(format!("{} values on {} nodes", v.len(), grid.len())));
        }
        if let Some((i, _)) = v.iter().enumerate().find(|(_, x)| (norm(x) - 1.0).abs() > UNIT_TOL || !x.iter().all(|c| c.is_finite())) {
            return Err(Error::OutOfRange(format!("|v| != 1 at r = {}", grid.nodes()[i])));
        }
        let origin = Pole::from_end(v[0][2]);
        let infinity = Pole::from_end(v[v.len() - 1][2]);
        Ok(SphereField { grid, v, m, origin, infinity })
    }

    /// Projects every sample onto the sphere first.
    pub fn normalized(grid: RadialGrid, v: Vec<Vec3>, m: u32) -> Result<Self> {
        let v = v.iter().map(normalize).collect();
        Self::new(grid, v, m)
    }

    pub fn constant(grid: &RadialGrid, value: Vec3) -> Result<Self> {
        Self::normalized(grid.clone(), vec![value; grid.len()], 1)
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }
    pub fn values(&self) -> &[Vec3] {
        &self.v
    }
    pub fn equivariance(&self) -> u32 {
        self.m
    }
    pub fn poles(&self) -> (Option<Pole>, Option<Pole>) {
        (self.origin, self.infinity)
    }

    /// Component `c` as a grid function.
    pub fn component(&self, c: usize) -> Vec<f64> {
        self.v.iter().map(|x| x[c]).collect()
    }

    /// max | |v| - 1 | over the grid.
    pub fn sphere_defect(&self) -> f64 {
        self.v.iter().map(|x| (norm(x) - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Same field rotated by a constant angle.
    pub fn rotated(&self, angle: f64) -> SphereField {
        let v = self.v.iter().map(|x| rotate(x, angle)).collect();
        SphereField { v, ..self.clone() }
    }
}

/// Q^m = (h1^m, 0, h3^m) sampled on the grid.
pub fn harmonic_profile(m: u32, grid: &RadialGrid) -> Result<SphereField> {
    if m == 0 {
        return Err(Error::InvalidParams("equivariance m must be at least 1".into()));
    }
    let v = grid.nodes().iter().map(|&r| [h1m(m, r), 0.0, h3m(m, r)]).collect();
    SphereField::new(grid.clone(), v, m)
}

/// Q^m dilated: v(r) = Q^m(lambda r).
pub fn harmonic_profile_scaled(m: u32, lambda: f64, grid: &RadialGrid) -> Result<SphereField> {
    let v = grid.nodes().iter().map(|&r| [h1m(m, lambda * r), 0.0, h3m(m, lambda * r)]).collect();
    SphereField::new(grid.clone(), v, m)
}

/// Dirichlet energy pi * int (|v_r|^2 + m^2 (v1^2 + v2^2)/r^2) r dr.
pub fn energy(f: &SphereField) -> Result<f64> {
    energy_with_order(f, 4)
}

pub fn energy_with_order(f: &SphereField, order: usize) -> Result<f64> {
    let g = f.grid();
    if g.len() < 3 {
        return Err(Error::TooFewNodes(g.len(), 3));
    }
    let order = order.min(g.len().saturating_sub(2)).max(2);
    let d = DiffOp::new(g, order)?;
    let q = Quadrature::new(g, order)?;
    let m2 = (f.m as f64).powi(2);
    let mut dens = vec![0.0; g.len()];
    for c in 0..3 {
        let vr = d.dr(&f.component(c));
        for (x, v) in dens.iter_mut().zip(vr) {
            *x += v * v;
        }
    }
    for ((x, v), &r) in dens.iter_mut().zip(&f.v).zip(g.nodes()) {
        *x += m2 * (v[0] * v[0] + v[1] * v[1]) / (r * r);
    }
    Ok(std::f64::consts::PI * q.integral_rdr(&dens))
}

/// m (v3(inf) - v3(0)) / 2 from the boundary pole tags.
pub fn degree(f: &SphereField) -> Result<f64> {
    match (f.origin, f.infinity) {
        (Some(a), Some(b)) => Ok(f.m as f64 * (b.v3() - a.v3()) / 2.0),
        _ => Err(Error::NonCompactified),
    }
}

/// Complex grid function with its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexField {
    pub grid: RadialGrid,
    pub w: Vec<num_complex::Complex64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn default_grid() -> RadialGrid {
        RadialGrid::geometric(1e-4, 1e4, 4096).unwrap()
    }

    #[test]
    fn profile_values() {
        let g = RadialGrid::geometric(0.01, 100.0, 129).unwrap();
        let q = harmonic_profile(1, &g).unwrap();
        let mid = &q.values()[64];
        assert!((mid[0] - 1.0).abs() < 1e-14 && mid[1] == 0.0 && mid[2].abs() < 1e-14);
        let q2 = harmonic_profile(2, &g).unwrap();
        assert!((q2.values()[64][0] - 1.0).abs() < 1e-14);
        assert_eq!(q.poles(), (Some(Pole::South), Some(Pole::North)));
    }

    #[test]
    fn static_identities() {
        let g = RadialGrid::geometric(1e-2, 1e2, 600).unwrap();
        let d = DiffOp::new(&g, 4).unwrap();
        let a: Vec<f64> = g.nodes().iter().map(|&r| h1(r)).collect();
        let b: Vec<f64> = g.nodes().iter().map(|&r| h3(r)).collect();
        let (da, db) = (d.dr(&a), d.dr(&b));
        for (i, &r) in g.nodes().iter().enumerate() {
            assert!((da[i] + a[i] * b[i] / r).abs() < 1e-6 / r);
            assert!((db[i] - a[i] * a[i] / r).abs() < 1e-6 / r);
        }
        // Delta Q + R^2 Q / r^2 = kappa Q
        let lap1 = d.laplacian(&a);
        let lap3 = d.laplacian(&b);
        for (i, &r) in g.nodes().iter().enumerate() {
            let k = kappa(r);
            assert!((lap1[i] - a[i] / (r * r) - k * a[i]).abs() < 1e-5 / (r * r));
            assert!((lap3[i] - k * b[i]).abs() < 1e-5 / (r * r));
        }
    }

    #[test]
    fn harmonic_energy_and_degree() {
        let g = default_grid();
        for m in 1..=3u32 {
            let q = harmonic_profile(m, &g).unwrap();
            let e = energy(&q).unwrap();
            assert!((e / (4.0 * PI * m as f64) - 1.0).abs() < 1e-3, "m={m}: {e}");
            assert!((degree(&q).unwrap() - m as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map() {
        let g = default_grid();
        let k = SphereField::constant(&g, [0.0, 0.0, 1.0]).unwrap();
        assert!(energy(&k).unwrap().abs() < 1e-20);
        assert_eq!(degree(&k).unwrap(), 0.0);
        let eq = SphereField::constant(&g, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(degree(&eq), Err(Error::NonCompactified));
    }

    /// Degree integral (1/4 pi) int u_x1 . (u x u_x2) dx on a tensor grid in (r, theta).
    fn degree_2d(v: impl Fn(f64) -> Vec3, m: u32) -> f64 {
        let (ns, nt) = (4000, 64);
        let (s0, s1) = ((1e-5f64).ln(), (1e5f64).ln());
        let hs = (s1 - s0) / ns as f64;
        let ht = 2.0 * PI / nt as f64;
        let mut acc = 0.0;
        for i in 0..ns {
            let s = s0 + (i as f64 + 0.5) * hs;
            let r = s.exp();
            let h = 1e-6 * r;
            for j in 0..nt {
                let th = j as f64 * ht;
                let u = |rr: f64, tt: f64| rotate(&v(rr), m as f64 * tt);
                let c = u(r, th);
                let dr = {
                    let (p, q) = (u(r + h, th), u(r - h, th));
                    [(p[0] - q[0]) / (2.0 * h), (p[1] - q[1]) / (2.0 * h), (p[2] - q[2]) / (2.0 * h)]
                };
                let dt = {
                    let (p, q) = (u(r, th + 1e-6), u(r, th - 1e-6));
                    [(p[0] - q[0]) / 2e-6, (p[1] - q[1]) / 2e-6, (p[2] - q[2]) / 2e-6]
                };
                // u_x1 . (u x u_x2) dx = u . (u_theta x u_r) dr dtheta, and dr = r ds.
                acc += dot(&c, &cross(&dt, &dr)) * hs * r * ht;
            }
        }
        acc / (4.0 * PI)
    }

    #[test]
    fn reflected_profile_has_degree_minus_one() {
        let g = default_grid();
        let v: Vec<Vec3> = g.nodes().iter().map(|&r| [h1(r), 0.0, -h3(r)]).collect();
        let f = SphereField::new(g, v, 1).unwrap();
        let tagged = degree(&f).unwrap();
        let oracle = degree_2d(|r| [h1(r), 0.0, -h3(r)], 1);
        assert!((tagged + 1.0).abs() < 1e-12);
        assert!((oracle - tagged).abs() < 1e-3, "oracle {oracle}");
        let direct = degree_2d(|r| [h1(r), 0.0, h3(r)], 1);
        assert!((direct - 1.0).abs() < 1e-3, "oracle {direct}");
    }

    #[test]
    fn kernel_wronskian() {
        for r in [0.1, 0.7, 3.0, 50.0] {
            let w = r * (h1(r) * h2_prime(r) - h1_prime(r) * h2(r));
            assert!((w - 4.0).abs() < 1e-12, "{w}");
        }
    }
}
