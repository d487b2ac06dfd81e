//! Pinhole camera model and rigid-body pose algebra.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Points closer than this along the optical axis do not project.
pub const Z_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting a camera-frame point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    /// In front of the camera and inside the bilinear-sampling footprint of the image.
    pub valid: bool,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    /// Same field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    pub fn project(&self, x: &Vector3<f64>) -> Projection {
        if x.z <= Z_EPS {
            return Projection {
                pixel: Vector2::new(f64::NAN, f64::NAN),
                depth: x.z,
                valid: false,
            };
        }
        let u = self.fx * x.x / x.z + self.cx;
        let v = self.fy * x.y / x.z + self.cy;
        Projection {
            pixel: Vector2::new(u, v),
            depth: x.z,
            valid: self.in_image(u, v),
        }
    }

    /// Viewing ray through pixel `p` scaled to unit depth.
    pub fn ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    pub fn backproject(&self, p: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::invalid(format!("non-positive depth {depth}")));
        }
        Ok(self.ray(p) * depth)
    }

    /// 2x3 Jacobian of the projection with respect to the camera-frame point.
    pub fn project_jacobian(&self, x: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / x.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * x.y * iz2,
        )
    }
}

/// Rigid transform `y = R x + t`.
///
/// The frames it maps between are named at each use site (`world_from_camera`,
/// `camera_from_world`, ...).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// `[qw, qx, qy, qz, tx, ty, tz]`
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self> {
        let q = nalgebra::Quaternion::new(a[0], a[1], a[2], a[3]);
        let n = q.norm();
        if !(n.is_finite() && n > 0.0) || a.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("degenerate pose"));
        }
        Ok(Self::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(a[4], a[5], a[6]),
        ))
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self * other`; the quaternion is renormalised.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        PoseSE3 {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let r = self.rotation.inverse();
        PoseSE3 {
            rotation: r,
            translation: -(r * self.translation),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Exponential map of a twist `(v, w)`: translation part first, rotation second.
    pub fn exp(xi: &Vector6<f64>) -> PoseSE3 {
        let v = Vector3::new(xi[0], xi[1], xi[2]);
        let w = Vector3::new(xi[3], xi[4], xi[5]);
        let rotation = UnitQuaternion::from_scaled_axis(w);
        PoseSE3 {
            rotation,
            translation: left_jacobian(&w) * v,
        }
    }

    /// Inverse of [`PoseSE3::exp`] for rotation angles below pi.
    pub fn log(&self) -> Vector6<f64> {
        let w = self.rotation.scaled_axis();
        let v = left_jacobian_inverse(&w) * self.translation;
        Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
    }

    /// `exp(xi) * self`
    pub fn retract_left(&self, xi: &Vector6<f64>) -> PoseSE3 {
        PoseSE3::exp(xi).compose(self)
    }
}

fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let wx = skew(w);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + wx * a + wx * wx * b
}

fn left_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let wx = skew(w);
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - wx * 0.5 + wx * wx * c
}

/// Maps pixel `p` with depth `depth` in frame i into frame s.
pub fn reproject(
    k: &Intrinsics,
    s_from_i: &PoseSE3,
    p: &Vector2<f64>,
    depth: f64,
) -> Result<Projection> {
    let x = k.backproject(p, depth)?;
    Ok(k.project(&s_from_i.transform(&x)))
}

/// Differentiable reprojection of every pixel of a dense depth map.
///
/// `depth` is a node whose values cover an `H x W` grid (leading unit axes allowed).
/// Returns a `[H, W, 2]` coordinate node in the target image and the validity of each
/// pixel. Pixels landing behind the camera are pushed far outside the image so any
/// downstream sampling masks them.
pub fn reproject_dense<T: Element>(
    tape: &mut Tape<T>,
    k: &Intrinsics,
    s_from_i: &PoseSE3,
    depth: Var,
) -> Result<(Var, Vec<bool>)> {
    let (h, w) = (k.height, k.width);
    if tape.value(depth).len() != h * w {
        return Err(Error::shape(
            "reproject_dense",
            format!("depth {:?} vs {h}x{w}", tape.shape(depth)),
        ));
    }
    let r = s_from_i.rotation_matrix();
    let t = s_from_i.translation;
    let n = h * w;
    let mut rays = [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]];
    for y in 0..h {
        for x in 0..w {
            let a = r * k.ray(&Vector2::new(x as f64, y as f64));
            for c in 0..3 {
                rays[c][y * w + x] = T::of(a[c]);
            }
        }
    }
    let d = tape.reshape(depth, [h, w])?;
    let mut comps = Vec::with_capacity(3);
    for (c, ray) in rays.into_iter().enumerate() {
        let rv = tape.constant(Tensor::new([h, w], ray)?)?;
        let m = tape.mul(d, rv)?;
        comps.push(tape.offset(m, t[c])?);
    }
    let z = tape.value(comps[2]).to_vec();
    let front: Vec<bool> = z.iter().map(|v| v.f64() > Z_EPS).collect();
    // Keep the reciprocal finite for pixels behind the camera.
    let keep = Tensor::from_fn([h, w], |i| if front[i] { T::one() } else { T::zero() });
    let fill = Tensor::from_fn([h, w], |i| if front[i] { T::zero() } else { T::one() });
    let keep = tape.constant(keep)?;
    let fill = tape.constant(fill)?;
    let zk = tape.mul(comps[2], keep)?;
    let zs = tape.add(zk, fill)?;
    let iz = tape.recip(zs)?;
    let xu = tape.mul(comps[0], iz)?;
    let xv = tape.mul(comps[1], iz)?;
    let u = tape.scale(xu, k.fx)?;
    let u = tape.offset(u, k.cx)?;
    let v = tape.scale(xv, k.fy)?;
    let v = tape.offset(v, k.cy)?;
    let far = Tensor::from_fn([h, w], |i| if front[i] { T::zero() } else { T::of(-1e6) });
    let far = tape.constant(far)?;
    let u = tape.add(u, far)?;
    let u = tape.reshape(u, [h, w, 1])?;
    let v = tape.reshape(v, [h, w, 1])?;
    let coords = tape.concat(&[u, v], 2)?;
    let cv = tape.value(coords);
    let valid = (0..n)
        .map(|i| front[i] && k.in_image(cv[2 * i].f64(), cv[2 * i + 1].f64()))
        .collect();
    Ok((coords, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k128() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap()
    }

    #[test]
    fn project_examples() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
        let p = k.project(&Vector3::new(0.0, 0.0, 1.0));
        assert!(p.valid);
        assert_eq!(p.pixel, Vector2::new(0.0, 0.0));

        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 100).unwrap();
        let p = k.project(&Vector3::new(1.0, 0.0, 2.0));
        assert_eq!(p.pixel.x, 100.0);
        assert!(!k.project(&Vector3::new(1.0, 0.0, 0.0)).valid);
    }

    #[test]
    fn backproject_examples() {
        let k = k128();
        let x = k.backproject(&Vector2::new(64.0, 64.0), 2.0).unwrap();
        assert_eq!(x, Vector3::new(0.0, 0.0, 2.0));
        let x = k.backproject(&Vector2::new(164.0, 64.0), 1.0).unwrap();
        assert_eq!(x, Vector3::new(1.0, 0.0, 1.0));
        assert!(k.backproject(&Vector2::new(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn identity_reprojection_is_fixed() {
        let k = k128();
        for d in [0.3, 1.0, 7.5] {
            let p = Vector2::new(17.25, 90.5);
            let q = reproject(&k, &PoseSE3::identity(), &p, d).unwrap();
            assert_abs_diff_eq!(q.pixel, p, epsilon = 1e-9);
        }
    }

    #[test]
    fn principal_point_is_fixed_under_axial_translation() {
        let k = k128();
        // Camera moves halfway toward the scene along the optical axis.
        let s_from_i = PoseSE3::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let q = reproject(&k, &s_from_i, &Vector2::new(64.0, 64.0), 2.0).unwrap();
        assert_abs_diff_eq!(q.pixel, Vector2::new(64.0, 64.0), epsilon = 1e-12);
        assert_abs_diff_eq!(q.depth, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exp_of_zero_is_identity_and_translation_twist() {
        let t = PoseSE3::exp(&Vector6::zeros());
        assert_eq!(t.translation, Vector3::zeros());
        assert_abs_diff_eq!(t.rotation.angle(), 0.0);
        let t = PoseSE3::exp(&Vector6::new(0.1, -0.2, 0.3, 0.0, 0.0, 0.0));
        assert_abs_diff_eq!(t.translation, Vector3::new(0.1, -0.2, 0.3), epsilon = 1e-15);
        assert_abs_diff_eq!(t.rotation.angle(), 0.0);
    }

    #[test]
    fn dense_reprojection_matches_pointwise() {
        let k = Intrinsics::new(20.0, 22.0, 7.5, 5.5, 16, 12).unwrap();
        let pose = PoseSE3::exp(&Vector6::new(0.05, -0.02, 0.03, 0.01, -0.02, 0.015));
        let depth = Tensor::<f64>::from_fn([12, 16], |i| 1.0 + 0.01 * i as f64);
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(depth.clone()).unwrap();
        let (c, valid) = reproject_dense(&mut tape, &k, &pose, d).unwrap();
        let cv = tape.value(c);
        for i in 0..12 * 16 {
            let p = Vector2::new((i % 16) as f64, (i / 16) as f64);
            let q = reproject(&k, &pose, &p, depth.data()[i]).unwrap();
            assert_abs_diff_eq!(cv[2 * i], q.pixel.x, epsilon = 1e-9);
            assert_abs_diff_eq!(cv[2 * i + 1], q.pixel.y, epsilon = 1e-9);
            assert_eq!(valid[i], q.valid);
        }
    }

    fn twist() -> impl Strategy<Value = Vector6<f64>> {
        prop::array::uniform6(-0.4f64..0.4).prop_map(|a| Vector6::from_row_slice(&a))
    }

    proptest! {
        #[test]
        fn log_inverts_exp(xi in twist()) {
            let back = PoseSE3::exp(&xi).log();
            prop_assert!((back - xi).norm() < 1e-9);
        }

        #[test]
        fn compose_is_associative_and_invertible(a in twist(), b in twist(), c in twist()) {
            let (a, b, c) = (PoseSE3::exp(&a), PoseSE3::exp(&b), PoseSE3::exp(&c));
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.translation - r.translation).norm() < 1e-9);
            prop_assert!(l.rotation.angle_to(&r.rotation) < 1e-9);
            let id = a.inverse().compose(&a);
            prop_assert!(id.translation.norm() < 1e-9);
            prop_assert!(id.rotation.angle() < 1e-9);
            prop_assert!((l.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn backproject_round_trips(u in 0.0f64..127.0, v in 0.0f64..127.0, d in 0.1f64..20.0) {
            let k = Intrinsics::new(100.0, 90.0, 64.0, 60.0, 128, 128).unwrap();
            let p = Vector2::new(u, v);
            let q = k.project(&k.backproject(&p, d).unwrap());
            prop_assert!((q.pixel - p).norm() < 1e-6);
        }

        #[test]
        fn reproject_matches_composition(xi in twist(), u in 0.0f64..127.0, v in 0.0f64..127.0, d in 0.5f64..5.0) {
            let k = k128();
            let pose = PoseSE3::exp(&xi);
            let p = Vector2::new(u, v);
            let q = reproject(&k, &pose, &p, d).unwrap();
            let x = k.backproject(&p, d).unwrap();
            let y = pose.transform(&x);
            let r = k.project(&y);
            prop_assert_eq!(q.valid, r.valid);
            if r.valid {
                prop_assert!((q.pixel - r.pixel).norm() < 1e-12);
            }
        }
    }
}
