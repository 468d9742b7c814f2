//! Stereographic chart w = (v1 + i v2)/(1 + v3) and its inverse.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::sphere::{ComplexField, SphereField, Vec3};

/// Projection of a single unit vector. Uses (1 - v3)/(v1 - i v2) on the southern
/// hemisphere so that 1 + v3 never cancels.
pub fn project(v: &Vec3) -> Option<C64> {
    if v[2] >= 0.0 {
        Some(C64::new(v[0], v[1]) / (1.0 + v[2]))
    } else {
        let den = C64::new(v[0], -v[1]);
        if den.norm() == 0.0 {
            None
        } else {
            Some((1.0 - v[2]) / den)
        }
    }
}

/// Inverse chart: (2 Re w, 2 Im w, 1 - |w|^2)/(1 + |w|^2), exactly unit up to rounding.
pub fn unproject(w: C64) -> Vec3 {
    let n2 = w.norm_sqr();
    if n2 > 1.0 {
        // Divide through by |w|^2 to keep the third component accurate near the south pole.
        let inv = 1.0 / n2;
        let den = 1.0 + inv;
        let wi = w * inv;
        [2.0 * wi.re / den, 2.0 * wi.im / den, (inv - 1.0) / den]
    } else {
        let den = 1.0 + n2;
        [2.0 * w.re / den, 2.0 * w.im / den, (1.0 - n2) / den]
    }
}

pub fn stereo(f: &SphereField) -> Result<ComplexField> {
    let w = f
        .values()
        .iter()
        .zip(f.grid().nodes())
        .map(|(v, &r)| project(v).ok_or(Error::SouthPole(r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComplexField { grid: f.grid().clone(), w })
}

pub fn stereo_inv(w: &ComplexField, m: u32) -> Result<SphereField> {
    let v = w.w.iter().map(|&x| unproject(x)).collect();
    SphereField::normalized(w.grid.clone(), v, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::RadialGrid;
    use crate::sphere::harmonic_profile;
    use proptest::prelude::*;
    use std::f64::consts::{PI, TAU};

    #[test]
    fn chart_values() {
        assert_eq!(project(&[0.0, 0.0, 1.0]), Some(C64::new(0.0, 0.0)));
        assert_eq!(project(&[1.0, 0.0, 0.0]), Some(C64::new(1.0, 0.0)));
        assert_eq!(project(&[0.0, 0.0, -1.0]), None);
    }

    #[test]
    fn profile_round_trip() {
        let g = RadialGrid::geometric(1e-4, 1e4, 4096).unwrap();
        let q = harmonic_profile(1, &g).unwrap();
        let w = stereo(&q).unwrap();
        // Q^1 is w = 1/r in the chart.
        for (x, &r) in w.w.iter().zip(g.nodes()) {
            assert!((x.re * r - 1.0).abs() < 1e-12 && x.im == 0.0);
        }
        let back = stereo_inv(&w, 1).unwrap();
        for (a, b) in back.values().iter().zip(q.values()) {
            assert!((0..3).all(|c| (a[c] - b[c]).abs() <= 1e-12));
        }
    }

    #[test]
    fn south_pole_rejected() {
        let g = RadialGrid::geometric(0.1, 10.0, 40).unwrap();
        let f = crate::sphere::SphereField::constant(&g, [0.0, 0.0, -1.0]).unwrap();
        assert!(matches!(stereo(&f), Err(Error::SouthPole(_))));
    }

    proptest! {
        #[test]
        fn unit_vectors_round_trip(th in 0.0..PI - 1e-4, ph in 0.0..TAU) {
            let v = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
            let back = unproject(project(&v).unwrap());
            for c in 0..3 {
                prop_assert!((back[c] - v[c]).abs() <= 1e-12);
            }
        }

        #[test]
        fn chart_round_trip(re in -1e3..1e3f64, im in -1e3..1e3f64) {
            let w = C64::new(re, im);
            let v = unproject(w);
            prop_assert!(((v[0]*v[0] + v[1]*v[1] + v[2]*v[2]).sqrt() - 1.0).abs() <= 1e-14);
            let back = project(&v).unwrap();
            prop_assert!((back - w).norm() <= 1e-12 * (1.0 + w.norm()));
        }
    }
}
