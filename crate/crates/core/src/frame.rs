//! Coordinates in the moving frame {f1, f2, Q} along the harmonic profile.
//!
//! V = (1 + gamma) Q + z1 f1 + z2 f2 with f1 = (h3, 0, -h1), f2 = (0, 1, 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::RadialGrid;
use crate::sphere::{dot, h1, h3, SphereField, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCoords {
    pub grid: RadialGrid,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Frame (Q, f1, f2) at radius r.
pub fn frame_at(r: f64) -> (Vec3, Vec3, Vec3) {
    let (a, b) = (h1(r), h3(r));
    ([a, 0.0, b], [b, 0.0, -a], [0.0, 1.0, 0.0])
}

/// gamma = sqrt(1 - |z|^2) - 1 written without cancellation.
pub fn gamma_of(z1: f64, z2: f64) -> f64 {
    let s = z1 * z1 + z2 * z2;
    -s / (1.0 + (1.0 - s).sqrt())
}

/// Decomposes a single vector; fails outside the chart |z| <= 1, V.Q >= 0.
pub fn decompose_point(v: &Vec3, r: f64) -> Result<(f64, f64, f64)> {
    let (q, f1, f2) = frame_at(r);
    let (z1, z2) = (dot(v, &f1), dot(v, &f2));
    let c = dot(v, &q);
    if z1 * z1 + z2 * z2 > 1.0 || c < 0.0 {
        return Err(Error::FrameChartExceeded(r));
    }
    Ok((z1, z2, gamma_of(z1, z2)))
}

pub fn reconstruct_point(z1: f64, z2: f64, gamma: f64, r: f64) -> Vec3 {
    let (q, f1, f2) = frame_at(r);
    std::array::from_fn(|c| (1.0 + gamma) * q[c] + z1 * f1[c] + z2 * f2[c])
}

pub fn frame_decompose(v: &SphereField) -> Result<FrameCoords> {
    let n = v.grid().len();
    let (mut z1, mut z2, mut gamma) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (x, &r) in v.values().iter().zip(v.grid().nodes()) {
        let (a, b, g) = decompose_point(x, r)?;
        z1.push(a);
        z2.push(b);
        gamma.push(g);
    }
    Ok(FrameCoords { grid: v.grid().clone(), z1, z2, gamma })
}

pub fn frame_reconstruct(c: &FrameCoords) -> Result<SphereField> {
    let v = c
        .grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, &r)| reconstruct_point(c.z1[i], c.z2[i], c.gamma[i], r))
        .collect();
    SphereField::new(c.grid.clone(), v, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::harmonic_profile;
    use proptest::prelude::*;

    #[test]
    fn profile_has_zero_coordinates() {
        let g = RadialGrid::geometric(1e-3, 1e3, 200).unwrap();
        let c = frame_decompose(&harmonic_profile(1, &g).unwrap()).unwrap();
        assert!(c.z1.iter().chain(&c.z2).chain(&c.gamma).all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn gamma_formula() {
        assert!((gamma_of(0.1, 0.0) - (0.99f64.sqrt() - 1.0)).abs() < 1e-15);
        assert!((gamma_of(0.1, 0.0) + 0.0050126).abs() < 1e-7);
    }

    #[test]
    fn chart_exceeded() {
        assert!(decompose_point(&[-1.0, 0.0, 0.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(r in 1e-3..1e3f64, a in -0.7..0.7f64, b in -0.7..0.7f64) {
            prop_assume!(a * a + b * b < 0.98);
            let v = reconstruct_point(a, b, gamma_of(a, b), r);
            prop_assert!((dot(&v, &v).sqrt() - 1.0).abs() < 1e-14);
            let (z1, z2, g) = decompose_point(&v, r).unwrap();
            prop_assert!((z1 - a).abs() < 1e-12 && (z2 - b).abs() < 1e-12);
            prop_assert!((g - ((1.0 - a * a - b * b).sqrt() - 1.0)).abs() < 1e-10);
            let back = reconstruct_point(z1, z2, g, r);
            for c in 0..3 {
                prop_assert!((back[c] - v[c]).abs() <= 1e-12);
            }
        }
    }
}
