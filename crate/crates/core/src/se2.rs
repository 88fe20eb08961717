//! Planar rigid poses.
//!
//! A [`Pose`] is an element of SE(2) stored as `(x, y, yaw)`. Composition
//! follows the usual group product: `compose(a, b)` is frame `b` expressed in
//! the parent frame of `a`. Yaw is wrapped to `(-pi, pi]` after every
//! operation.

use serde::{Deserialize, Serialize};

use crate::real::{wrap_angle, Real};

/// 3x3 Jacobian, row-major: `jac[i][j] = d out_i / d in_j` over `(x, y, yaw)`.
pub type Jacobian3<T = f64> = [[T; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose<T = f64> {
    pub x: T,
    pub y: T,
    pub yaw: T,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn new(x: T, y: T, yaw: T) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: T::zero(),
            y: T::zero(),
            yaw: T::zero(),
        }
    }

    pub fn from_array(v: [T; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.yaw]
    }

    pub fn cast<U: Real>(self) -> Pose<U> {
        Pose {
            x: U::lit(self.x.to_f64_lossy()),
            y: U::lit(self.y.to_f64_lossy()),
            yaw: U::lit(self.yaw.to_f64_lossy()),
        }
    }

    /// Group product `self * other`.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        let (s, c) = self.yaw.sin_cos();
        Pose::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> Pose<T> {
        let (s, c) = self.yaw.sin_cos();
        Pose::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.yaw,
        )
    }

    /// Pose of `other` in the frame of `self`, i.e. `inverse(self) * other`.
    pub fn relative(&self, other: &Pose<T>) -> Pose<T> {
        let (s, c) = self.yaw.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose::new(c * dx + s * dy, -s * dx + c * dy, other.yaw - self.yaw)
    }

    /// Maps a point given in this pose's body frame into the parent frame.
    pub fn transform_point(&self, p: [T; 2]) -> [T; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Maps a parent-frame point into this pose's body frame.
    pub fn inverse_transform_point(&self, p: [T; 2]) -> [T; 2] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn translation_norm(&self) -> T {
        self.x.hypot(self.y)
    }
}

/// Jacobians of `compose(a, b)` with respect to `a` and `b`.
pub fn compose_jacobians<T: Real>(a: &Pose<T>, b: &Pose<T>) -> (Jacobian3<T>, Jacobian3<T>) {
    let (s, c) = a.yaw.sin_cos();
    let (o, l) = (T::zero(), T::one());
    let ja = [
        [l, o, -s * b.x - c * b.y],
        [o, l, c * b.x - s * b.y],
        [o, o, l],
    ];
    let jb = [[c, -s, o], [s, c, o], [o, o, l]];
    (ja, jb)
}

/// Jacobians of `relative(a, b)` with respect to `a` and `b`.
pub fn relative_jacobians<T: Real>(a: &Pose<T>, b: &Pose<T>) -> (Jacobian3<T>, Jacobian3<T>) {
    let (s, c) = a.yaw.sin_cos();
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let rx = c * dx + s * dy;
    let ry = -s * dx + c * dy;
    let (o, l) = (T::zero(), T::one());
    let ja = [[-c, -s, ry], [s, -c, -rx], [o, o, -l]];
    let jb = [[c, s, o], [-s, c, o], [o, o, l]];
    (ja, jb)
}

/// Signed shortest difference `a - b` between two angles.
pub fn angle_diff<T: Real>(a: T, b: T) -> T {
    wrap_angle(a - b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    /// Homogeneous 3x3 matrix of a pose, the independent oracle for the group ops.
    fn mat(p: &Pose) -> [[f64; 3]; 3] {
        let (s, c) = p.yaw.sin_cos();
        [[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]]
    }

    fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    r[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        r
    }

    /// General 3x3 inverse by cofactors.
    fn matinv(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = ((j + 1) % 3, (j + 2) % 3);
                let (c, d) = ((i + 1) % 3, (i + 2) % 3);
                r[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
            }
        }
        r
    }

    fn from_mat(m: &[[f64; 3]; 3]) -> Pose {
        Pose::new(m[0][2], m[1][2], m[1][0].atan2(m[0][0]))
    }

    fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
        (a.x - b.x).abs() <= tol && (a.y - b.y).abs() <= tol && angle_diff(a.yaw, b.yaw).abs() <= tol
    }

    #[test]
    fn compose_examples() {
        let id = Pose::identity();
        let p = Pose::new(3.0, 4.0, 0.5);
        assert_eq!(id.compose(&p), p);
        assert_eq!(p.compose(&id), p);
        let a = Pose::new(1.0, 0.0, FRAC_PI_2);
        let b = Pose::new(1.0, 0.0, 0.0);
        let oracle = from_mat(&matmul(&mat(&a), &mat(&b)));
        assert!(close(&a.compose(&b), &oracle, 1e-12));
        assert!(close(&a.compose(&b), &Pose::new(1.0, 1.0, FRAC_PI_2), 1e-12));
    }

    #[test]
    fn inverse_examples() {
        assert!(close(&Pose::<f64>::identity().inverse(), &Pose::identity(), 0.0));
        let p = Pose::new(1.0, 0.0, FRAC_PI_2);
        let oracle = from_mat(&matinv(&mat(&p)));
        assert!(close(&p.inverse(), &oracle, 1e-12));
        // compose(p, inverse(p)) must be identity, which pins (0, 1, -pi/2).
        assert!(close(&p.inverse(), &Pose::new(0.0, 1.0, -FRAC_PI_2), 1e-12));
        assert!(close(&p.compose(&p.inverse()), &Pose::identity(), 1e-12));
    }

    #[test]
    fn relative_examples() {
        let p = Pose::new(2.0, -1.0, 2.5);
        assert!(close(&p.relative(&p), &Pose::identity(), 1e-12));
        assert!(close(&Pose::identity().relative(&p), &p, 1e-12));
        let a = Pose::new(1.0, 1.0, FRAC_PI_2);
        let b = Pose::new(1.0, 2.0, FRAC_PI_2);
        let oracle = from_mat(&matmul(&matinv(&mat(&a)), &mat(&b)));
        assert!(close(&a.relative(&b), &oracle, 1e-12));
        assert!(close(&a.relative(&b), &Pose::new(1.0, 0.0, 0.0), 1e-12));
    }

    #[test]
    fn yaw_stays_wrapped() {
        let a = Pose::new(0.0, 0.0, 3.0);
        let b = Pose::new(0.0, 0.0, 3.0);
        let c = a.compose(&b);
        assert!(c.yaw > -PI && c.yaw <= PI);
        assert!((c.yaw - (6.0 - 2.0 * PI)).abs() < 1e-12);
        assert_eq!(Pose::new(0.0, 0.0, -PI).yaw, PI);
    }

    #[test]
    fn jacobians_at_identity() {
        let id = Pose::<f64>::identity();
        let (ja, jb) = compose_jacobians(&id, &id);
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(jb, eye);
        let (ja2, _) = compose_jacobians(&Pose::new(2.0, 3.0, 1.1), &Pose::new(-1.0, 4.0, 0.2));
        for j in [ja, ja2] {
            assert_eq!([j[0][0], j[0][1], j[1][0], j[1][1]], [1.0, 0.0, 0.0, 1.0]);
        }
    }

    fn fd_jacobian(f: impl Fn(&[f64; 3]) -> Pose, at: [f64; 3]) -> Jacobian3 {
        let h = 1e-6;
        let mut jac = [[0.0; 3]; 3];
        for j in 0..3 {
            let mut p = at;
            let mut m = at;
            p[j] += h;
            m[j] -= h;
            let (fp, fm) = (f(&p), f(&m));
            jac[0][j] = (fp.x - fm.x) / (2.0 * h);
            jac[1][j] = (fp.y - fm.y) / (2.0 * h);
            jac[2][j] = angle_diff(fp.yaw, fm.yaw) / (2.0 * h);
        }
        jac
    }

    fn assert_jac_close(analytic: &Jacobian3, fd: &Jacobian3) {
        for i in 0..3 {
            for j in 0..3 {
                let (a, f) = (analytic[i][j], fd[i][j]);
                let rel = (a - f).abs() / a.abs().max(f.abs()).max(1.0);
                assert!(rel < 1e-6, "jac[{i}][{j}] analytic {a} vs fd {f}");
            }
        }
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (-50.0..50.0f64, -50.0..50.0f64, -3.1..3.1f64).prop_map(|(x, y, t)| Pose::new(x, y, t))
    }

    proptest! {
        #[test]
        fn associativity(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(close(&l, &r, 1e-10));
        }

        #[test]
        fn round_trips(a in pose_strategy(), b in pose_strategy()) {
            prop_assert!(close(&a.compose(&a.relative(&b)), &b, 1e-10));
            prop_assert!(close(&a.compose(&a.inverse()), &Pose::identity(), 1e-12));
            prop_assert!(close(&a.inverse().inverse(), &a, 1e-10));
        }

        #[test]
        fn compose_jacobians_match_fd(a in pose_strategy(), b in pose_strategy()) {
            let (ja, jb) = compose_jacobians(&a, &b);
            let fa = fd_jacobian(|v| Pose::from_array(*v).compose(&b), a.to_array());
            let fb = fd_jacobian(|v| a.compose(&Pose::from_array(*v)), b.to_array());
            assert_jac_close(&ja, &fa);
            assert_jac_close(&jb, &fb);
        }

        #[test]
        fn relative_jacobians_match_fd(a in pose_strategy(), b in pose_strategy()) {
            let (ja, jb) = relative_jacobians(&a, &b);
            let fa = fd_jacobian(|v| Pose::from_array(*v).relative(&b), a.to_array());
            let fb = fd_jacobian(|v| a.relative(&Pose::from_array(*v)), b.to_array());
            assert_jac_close(&ja, &fa);
            assert_jac_close(&jb, &fb);
        }
    }
}
