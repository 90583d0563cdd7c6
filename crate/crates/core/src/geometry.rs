//! SO(3) and planar-angle helpers used by the kinematics and the condition
//! features.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};

pub type Rotation = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Angles above this use the symmetric-part axis extraction in [`so3_log_vee`].
const NEAR_PI: f64 = PI - 1e-4;
/// Below this angle the sinc factor is replaced by its Taylor expansion.
const NEAR_ZERO: f64 = 1e-6;

pub fn hat(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Axial vector of the antisymmetric part, `vee((M - Mᵀ) / 2)`.
pub fn vee_antisym(m: &Matrix3<f64>) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vec3) -> Rotation {
    let theta = w.norm();
    let k = hat(w);
    let (a, b) = if theta < NEAR_ZERO {
        (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// `vee(log R)`: the rotation vector with angle in `[0, π]`.
///
/// Also accepts matrices slightly off SO(3) (the trace is clamped), which is
/// what finite-difference probes feed it.
pub fn so3_log_vee(r: &Rotation) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axial = vee_antisym(r);
    // atan2 keeps full precision near 0 and π where acos does not
    let theta = axial.norm().atan2(cos);
    if theta < NEAR_ZERO {
        return axial * (1.0 + theta * theta / 6.0);
    }
    if theta > NEAR_PI {
        // sin θ vanishes; recover the axis from the symmetric part instead,
        // (R + Rᵀ)/2 - cos θ I = (1 - cos θ) a aᵀ.
        let s = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
        let one_minus = 1.0 - cos;
        let i = (0..3)
            .max_by(|&a, &b| s[(a, a)].total_cmp(&s[(b, b)]))
            .unwrap_or(0);
        let ai = (s[(i, i)] / one_minus).max(0.0).sqrt();
        let mut axis = Vec3::zeros();
        for j in 0..3 {
            axis[j] = if j == i { ai } else { s[(i, j)] / (one_minus * ai) };
        }
        axis /= axis.norm();
        if axis.dot(&axial) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    axial * (theta / theta.sin())
}

/// Wraps to the half-open interval `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// World vector expressed in the frame of `r`: `Rᵀ x`.
pub fn to_local(r: &Rotation, x: &Vec3) -> Vec3 {
    r.transpose() * x
}

pub fn rot_x(a: f64) -> Rotation {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Rotation {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Rotation {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Heading of the rotated x axis in the ground plane.
pub fn yaw(r: &Rotation) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

/// Nearest rotation in the Frobenius sense (polar factor with det = +1).
pub fn project_to_so3(m: &Matrix3<f64>) -> Rotation {
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// `RᵀR = I` and `det R = 1` within `tol`.
pub fn is_rotation(r: &Rotation, tol: f64) -> bool {
    let e = r.transpose() * r - Matrix3::identity();
    e.iter().all(|x| x.abs() <= tol) && (r.determinant() - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut impl Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * scale
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(so3_log_vee(&Rotation::identity()), Vec3::zeros());
    }

    #[test]
    fn log_of_z_rotation() {
        // Rodrigues with axis z and angle 0.3, written out by hand
        let (s, c) = 0.3f64.sin_cos();
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let w = so3_log_vee(&r);
        assert!((w - Vec3::new(0.0, 0.0, 0.3)).norm() < 1e-12);
    }

    #[test]
    fn exp_log_roundtrip_on_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let axis = random_vec(&mut rng, 1.0).normalize();
            let angle = rng.random_range(0.0..PI);
            let r = so3_exp(&(axis * angle));
            let back = so3_exp(&so3_log_vee(&r));
            assert!((back - r).abs().max() < 1e-9);
        }
    }

    #[test]
    fn log_near_pi_and_near_zero() {
        for angle in [PI, PI - 1e-6, PI - 5e-5, 1e-8, 1e-7] {
            let w = Vec3::new(0.6, -0.8, 0.0) * angle;
            let r = so3_exp(&w);
            let back = so3_exp(&so3_log_vee(&r));
            assert!((back - r).abs().max() < 1e-9, "angle {angle}");
        }
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(1.5 * PI) + 0.5 * PI).abs() < 1e-15);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn to_local_quarter_turn() {
        let r = rot_z(PI / 2.0);
        let x = to_local(&r, &Vec3::new(1.0, 0.0, 0.0));
        assert!((x - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
        assert_eq!(to_local(&Rotation::identity(), &x), x);
    }

    #[test]
    fn projection_recovers_perturbed_rotation() {
        let r = so3_exp(&Vec3::new(0.3, -1.1, 0.4));
        let noisy = r + Matrix3::from_fn(|i, j| 1e-4 * ((i * 3 + j) as f64).sin());
        let p = project_to_so3(&noisy);
        assert!(is_rotation(&p, 1e-12));
        assert!((p - r).abs().max() < 1e-3);
        // reflections are mapped back to proper rotations
        let refl = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(is_rotation(&project_to_so3(&refl), 1e-12));
    }

    #[test]
    fn yaw_reads_heading() {
        assert!((yaw(&rot_z(2.0)) - 2.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3() -> impl Strategy<Value = Vec3> {
            (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn to_local_is_an_isometry(w in vec3(), x in vec3()) {
                let r = so3_exp(&w);
                prop_assert!((to_local(&r, &x).norm() - x.norm()).abs() < 1e-10);
            }

            #[test]
            fn log_inverts_exp(axis in vec3(), angle in 0.0..(PI - 1e-3)) {
                prop_assume!(axis.norm() > 1e-3);
                let w = axis.normalize() * angle;
                prop_assert!((so3_log_vee(&so3_exp(&w)) - w).norm() < 1e-8);
            }

            #[test]
            fn wrap_range_and_congruence(theta in -1e3..1e3f64) {
                let w = wrap_angle(theta);
                prop_assert!(w > -PI && w <= PI);
                let k = (theta - w) / TAU;
                prop_assert!((k - k.round()).abs() < 1e-10);
            }
        }
    }
}
