//! Rescaling and rotation: u(x, t) = e^{alpha(t) R} V(lambda(t) |x|).

use crate::params::Params;
use crate::sphere::{rotate, Vec3};

/// e^{alpha(t) R} V(lambda(t) r) for a radial evaluator V.
pub fn group_action(v: impl Fn(f64) -> Vec3, p: &Params, t: f64, r: f64) -> Vec3 {
    rotate(&v(p.lambda(t) * r), p.alpha(t))
}

/// Equivariant lift to a point of the plane: e^{m theta R} v(|x|).
pub fn lift(v: &Vec3, x: [f64; 2], m: u32) -> Vec3 {
    rotate(v, m as f64 * x[1].atan2(x[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{h1, h3};

    #[test]
    fn identity_at_unit_time() {
        let p = Params::reference();
        let q = |r: f64| [h1(r), 0.0, h3(r)];
        for r in [0.1, 1.0, 7.0] {
            assert_eq!(group_action(q, &p, 1.0, r), q(r));
        }
    }

    #[test]
    fn rotation_fixes_vertical_axis() {
        let p = Params { alpha0: 0.7, ..Params::reference() };
        let k = group_action(|_| [0.0, 0.0, 1.0], &p, 0.01, 3.0);
        assert_eq!(k, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn lift_is_equivariant() {
        let v = [0.6, 0.0, 0.8];
        let u = lift(&v, [0.0, 2.0], 1);
        assert!((u[0]).abs() < 1e-15 && (u[1] - 0.6).abs() < 1e-15);
    }
}
