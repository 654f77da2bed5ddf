//! Shared domain types and the canonical box template.
//!
//! The canonical template is the axis-aligned unit cube centered at its own
//! centroid (vertices at ±0.5 per axis), so a [`ScaleVec`] and the physical
//! [`BoxDims`] of the scaled template are numerically identical.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::depthfilter::DepthStats;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Pinhole intrinsics. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T = f64> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
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
        let zero = T::zero();
        if !(self.fx > zero && self.fy > zero) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        let w = T::from_usize(self.width).unwrap_or(zero);
        let h = T::from_usize(self.height).unwrap_or(zero);
        if !(self.cx >= zero && self.cx < w && self.cy >= zero && self.cy < h) {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// 3×3 calibration matrix.
    pub fn matrix(&self) -> Matrix3<T> {
        Matrix3::new(
            self.fx,
            T::zero(),
            self.cx,
            T::zero(),
            self.fy,
            self.cy,
            T::zero(),
            T::zero(),
            T::one(),
        )
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.to_f64_lossy()),
            fy: U::lit(self.fy.to_f64_lossy()),
            cx: U::lit(self.cx.to_f64_lossy()),
            cy: U::lit(self.cy.to_f64_lossy()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Rigid transform of a box frame expressed in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real = f64> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    /// Builds a pose, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let tol = T::orthonormal_tol();
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > tol {
            return Err(Error::invalid("rotation is not orthonormal"));
        }
        if (rotation.determinant() - T::one()).abs() > tol {
            return Err(Error::invalid("rotation is not proper (det != +1)"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation is not finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Maps a camera-frame point into the box frame.
    #[inline]
    pub fn inverse_transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.tr_mul(&(p - self.translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Local box axis `a` (column `a` of the rotation) in the camera frame.
    #[inline]
    pub fn axis(&self, a: usize) -> Vector3<T> {
        self.rotation.column(a).into_owned()
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            rotation: self.rotation.map(|v| U::lit(v.to_f64_lossy())),
            translation: self.translation.map(|v| U::lit(v.to_f64_lossy())),
        }
    }
}

/// Composition of two poses, `a ∘ b`.
pub fn compose<T: Real>(a: &Pose<T>, b: &Pose<T>) -> Pose<T> {
    a.compose(b)
}

/// Geodesic angle (radians) between two rotations.
pub fn rotation_angle<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    let rel = a.transpose() * b;
    let c = (rel.trace() - T::one()) / T::lit(2.0);
    let c = if c > T::one() {
        T::one()
    } else if c < -T::one() {
        -T::one()
    } else {
        c
    };
    c.acos()
}

fn check_positive<T: Real>(v: &Vector3<T>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite() && *x > T::zero()) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} components must be positive and finite"
        )))
    }
}

/// Dimensionless per-axis multipliers of the canonical template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleVec<T: Real = f64>(Vector3<T>);

impl<T: Real> ScaleVec<T> {
    pub fn new(sx: T, sy: T, sz: T) -> Result<Self> {
        Self::from_vector(Vector3::new(sx, sy, sz))
    }

    pub fn from_vector(v: Vector3<T>) -> Result<Self> {
        check_positive(&v, "scale")?;
        Ok(Self(v))
    }

    pub fn ones() -> Self {
        Self(Vector3::repeat(T::one()))
    }

    #[inline]
    pub fn as_vector(&self) -> &Vector3<T> {
        &self.0
    }

    #[inline]
    pub fn get(&self, axis: usize) -> T {
        self.0[axis]
    }
}

/// Full edge lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDims<T: Real = f64>(Vector3<T>);

impl<T: Real> BoxDims<T> {
    pub fn new(dx: T, dy: T, dz: T) -> Result<Self> {
        Self::from_vector(Vector3::new(dx, dy, dz))
    }

    pub fn from_vector(v: Vector3<T>) -> Result<Self> {
        check_positive(&v, "box dimension")?;
        Ok(Self(v))
    }

    #[inline]
    pub fn as_vector(&self) -> &Vector3<T> {
        &self.0
    }

    #[inline]
    pub fn get(&self, axis: usize) -> T {
        self.0[axis]
    }

    pub fn half(&self) -> Vector3<T> {
        self.0 * T::lit(0.5)
    }

    pub fn volume(&self) -> T {
        self.0.x * self.0.y * self.0.z
    }

    /// Inverse of [`scaled_template`].
    pub fn to_scale(&self) -> ScaleVec<T> {
        ScaleVec(self.0 / T::lit(CANONICAL_EDGE_M))
    }

    pub fn cast<U: Real>(&self) -> BoxDims<U> {
        BoxDims(self.0.map(|v| U::lit(v.to_f64_lossy())))
    }
}

/// Edge length of the canonical template in meters.
pub const CANONICAL_EDGE_M: f64 = 1.0;

/// Physical dimensions of the canonical template scaled by `s`.
pub fn scaled_template<T: Real>(s: &ScaleVec<T>) -> BoxDims<T> {
    BoxDims(s.0 * T::lit(CANONICAL_EDGE_M))
}

/// Per-axis scale bounds of the dimension search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleInterval<T: Real = f64> {
    pub lo: Vector3<T>,
    pub hi: Vector3<T>,
}

impl<T: Real> ScaleInterval<T> {
    pub fn new(lo: Vector3<T>, hi: Vector3<T>) -> Result<Self> {
        for a in 0..3 {
            if !(lo[a] > T::zero() && lo[a] <= hi[a] && hi[a].is_finite()) {
                return Err(Error::invalid(format!(
                    "scale interval axis {a}: need 0 < lo <= hi"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn uniform(lo: T, hi: T) -> Result<Self> {
        Self::new(Vector3::repeat(lo), Vector3::repeat(hi))
    }

    pub fn widths(&self) -> Vector3<T> {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> Vector3<T> {
        (self.lo + self.hi) * T::lit(0.5)
    }
}

/// Dense depth raster in meters, row-major; `0.0` means no return.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("depth data length != width*height"));
        }
        if !data.iter().all(|d| d.is_finite() && *d >= 0.0) {
            return Err(Error::invalid("depth values must be finite and >= 0"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }
}

/// Row-major label raster: 0 is background, `k >= 1` is instance `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl InstanceMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("mask data length != width*height"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.data[v * self.width + u]
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|l| **l == label).count()
    }

    /// Inclusive bounding window `(u0, v0, u1, v1)` of `label`.
    pub fn bbox(&self, label: u8) -> Option<(usize, usize, usize, usize)> {
        self.pixels(label).fold(None, |b, (u, v)| {
            Some(match b {
                None => (u, v, u, v),
                Some((u0, v0, u1, v1)) => (u0.min(u), v0.min(v), u1.max(u), v1.max(v)),
            })
        })
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Pixel coordinates carrying `label`.
    pub fn pixels(&self, label: u8) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(move |(_, l)| **l == label)
            .map(move |(i, _)| (i % w, i / w))
    }

    /// Binary mask of a single label.
    pub fn select(&self, label: u8) -> InstanceMask {
        InstanceMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|l| u8::from(*l == label)).collect(),
        }
    }
}

/// Candidate pose with its confidence and, once filtered, depth statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub pose: Pose,
    pub confidence: f64,
    pub depth_stats: Option<DepthStats>,
    /// Set when the depth filter rejected everything and this is the
    /// least-inconsistent survivor.
    pub fallback: bool,
}

impl Hypothesis {
    pub fn new(pose: Pose, confidence: f64) -> Self {
        Self {
            pose,
            confidence: confidence.clamp(0.0, 1.0),
            depth_stats: None,
            fallback: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let r = Rotation3::from_axis_angle(&axis, rng.random_range(-3.1..3.1));
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(0.5..4.0),
        );
        Pose::new(*r.matrix(), t).unwrap()
    }

    #[test]
    fn identity_is_left_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_pose(&mut rng);
        let c = compose(&Pose::identity(), &t);
        assert!((c.rotation - t.rotation).amax() < 1e-15);
        assert!((c.translation - t.translation).amax() < 1e-15);
    }

    #[test]
    fn pose_times_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t = random_pose(&mut rng);
            let c = t.compose(&t.inverse());
            assert!((c.rotation - Matrix3::identity()).amax() < 1e-9);
            assert!(c.translation.amax() < 1e-9);
        }
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let oracle = a.to_homogeneous() * b.to_homogeneous();
            let got = compose(&a, &b).to_homogeneous();
            assert!((oracle - got).amax() < 1e-12);
        }
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (a, b, c) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            assert!((l.to_homogeneous() - r.to_homogeneous()).amax() < 1e-9);
        }
    }

    #[test]
    fn pose_rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(m, Vector3::zeros()).is_err());
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.1, 1.0));
        assert!(Pose::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn scaled_template_is_definitional() {
        let d = scaled_template(&ScaleVec::ones());
        assert_eq!(*d.as_vector(), Vector3::new(1.0, 1.0, 1.0));
        let d = scaled_template(&ScaleVec::new(0.3, 0.4, 0.2).unwrap());
        assert_eq!(*d.as_vector(), Vector3::new(0.3, 0.4, 0.2));
        let d = scaled_template(&ScaleVec::new(2.0, 2.0, 2.0).unwrap());
        assert_eq!(d.volume(), 8.0);
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        assert!(ScaleVec::new(0.0, 1.0, 1.0).is_err());
        assert!(ScaleVec::new(1.0, -1.0, 1.0).is_err());
        assert!(ScaleVec::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).is_ok());
        assert!(CameraIntrinsics::new(0.0, 500.0, 320.0, 240.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, 640.0, 240.0, 640, 480).is_err());
    }

    #[test]
    fn f32_pose_roundtrip() {
        let p: Pose<f32> = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let q = p.compose(&p.inverse());
        assert!((q.rotation - Matrix3::identity()).amax() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn scale_dims_roundtrip(sx in 1e-3f64..10.0, sy in 1e-3f64..10.0, sz in 1e-3f64..10.0) {
            let s = ScaleVec::new(sx, sy, sz).unwrap();
            proptest::prop_assert_eq!(scaled_template(&s).to_scale(), s);
        }
    }
}
