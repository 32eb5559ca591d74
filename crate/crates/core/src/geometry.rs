//! World-frame conventions and the small value types shared by every stage.
//!
//! The world frame is x-east, y-north, z-up with its origin at the robot's
//! first pose. An accelerometer at rest reads the gravity *reaction*
//! `+GRAVITY`, i.e. `[0, 0, 9.8]` in a level body frame. All motion is planar:
//! every position and velocity stored in a state has `z == 0` exactly.
//!
//! Bearings are measured counterclockwise from the antenna array's local
//! x-axis, and the array x-axis is aligned with the robot heading.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

/// Gravity magnitude used by the inertial model, m/s².
pub const GRAVITY_MAGNITUDE: f64 = 9.8;

/// The vertical gravity vector as it appears in the kinematic model.
pub fn gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, GRAVITY_MAGNITUDE)
}

/// Simulation time in seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Timestamp(pub f64);

impl Timestamp {
    pub fn seconds(self) -> f64 {
        self.0
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_pi(angle: f64) -> f64 {
    let a = (angle + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if a >= PI {
        a - 2.0 * PI
    } else {
        a
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_two_pi(angle: f64) -> f64 {
    let a = angle.rem_euclid(2.0 * PI);
    if a >= 2.0 * PI {
        0.0
    } else {
        a
    }
}

/// Absolute wrapped difference between two angles, in `[0, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_pi(a - b).abs()
}

/// Planar rotation about the world z-axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Rot {
    heading: f64,
}

impl Rot {
    pub fn identity() -> Self {
        Self { heading: 0.0 }
    }

    pub fn from_heading(heading: f64) -> Self {
        Self {
            heading: wrap_pi(heading),
        }
    }

    /// Heading in `[-π, π)`.
    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.heading.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    pub fn inverse(&self) -> Self {
        Self::from_heading(-self.heading)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Rot) -> Self {
        Self::from_heading(self.heading + other.heading)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let (s, c) = self.heading.sin_cos();
        Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
    }
}

/// Rotates `v` by `r`.
pub fn rotate(r: &Rot, v: &Vec3) -> Vec3 {
    r.rotate(v)
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    a.cross(b)
}

/// Skew-symmetric matrix `⌊w×⌋` such that `⌊w×⌋ v = w × v`.
pub fn skew(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Drops the vertical component, enforcing the planar constraint.
pub fn planar(v: Vec3) -> Vec3 {
    Vec3::new(v.x, v.y, 0.0)
}

/// One robot pose in the sliding window.
///
/// `velocity` is expressed in the body frame of this state, `position` in the
/// world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub id: u64,
    pub t: Timestamp,
    pub position: Vec3,
    pub velocity: Vec3,
    pub rotation: Rot,
}

impl RobotState {
    pub fn new(id: u64, t: Timestamp, position: Vec3, velocity: Vec3, rotation: Rot) -> Self {
        Self {
            id,
            t,
            position: planar(position),
            velocity: planar(velocity),
            rotation,
        }
    }

    /// The gauge anchor: origin, at rest, heading zero.
    pub fn origin(t: Timestamp) -> Self {
        Self::new(0, t, Vec3::zeros(), Vec3::zeros(), Rot::identity())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagStatus {
    Unlocalized,
    Active,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagState {
    pub tag_id: u32,
    pub position: Vec3,
    pub last_observed: Timestamp,
    pub status: TagStatus,
}

impl TagState {
    pub fn new(tag_id: u32, position: Vec3, t: Timestamp) -> Self {
        Self {
            tag_id,
            position: planar(position),
            last_observed: t,
            status: TagStatus::Unlocalized,
        }
    }

    /// Moves the estimate unless the tag is frozen. Returns whether it moved.
    pub fn set_position(&mut self, p: Vec3) -> bool {
        if self.status == TagStatus::Frozen {
            return false;
        }
        self.position = planar(p);
        true
    }

    pub fn activate(&mut self) {
        if self.status == TagStatus::Unlocalized {
            self.status = TagStatus::Active;
        }
    }

    pub fn freeze(&mut self) {
        if self.status == TagStatus::Active {
            self.status = TagStatus::Frozen;
        }
    }
}


pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn rotate_examples() {
        let v = rotate(&Rot::identity(), &Vec3::new(1.0, 2.0, 0.0));
        assert_eq!(v, Vec3::new(1.0, 2.0, 0.0));

        let v = rotate(&Rot::from_heading(PI / 2.0), &Vec3::x());
        assert_relative_eq!(v, Vec3::y(), epsilon = 1e-15);

        let v = rotate(&Rot::from_heading(PI / 3.0), &Vec3::x());
        assert_relative_eq!(v, Vec3::new(0.5, 3f64.sqrt() / 2.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn cross_examples() {
        assert_eq!(cross(&Vec3::x(), &Vec3::x()), Vec3::zeros());
        assert_eq!(cross(&Vec3::x(), &Vec3::y()), Vec3::z());
        assert_eq!(
            cross(&Vec3::new(2.0, 1.0, 0.0), &Vec3::new(4.0, 2.0, 0.0)),
            Vec3::zeros()
        );
    }

    #[test]
    fn matrix_is_special_orthogonal() {
        for k in 0..64 {
            let m = Rot::from_heading(k as f64 * 0.37 - 7.0).matrix();
            assert_relative_eq!(m * m.transpose(), Matrix3::identity(), epsilon = 1e-14);
            assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn wrap_ranges() {
        assert_eq!(wrap_pi(PI), -PI);
        assert!(wrap_pi(-1e-300) < PI);
        assert_eq!(wrap_two_pi(2.0 * PI), 0.0);
        assert_relative_eq!(angle_diff(0.1, 2.0 * PI - 0.1), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn skew_matches_cross() {
        let w = Vec3::new(0.3, -1.2, 2.0);
        let v = Vec3::new(-0.7, 0.4, 1.1);
        assert_relative_eq!(skew(&w) * v, w.cross(&v), epsilon = 1e-15);
    }

    #[test]
    fn frozen_tag_never_moves() {
        let mut tag = TagState::new(1, Vec3::new(1.0, 1.0, 0.0), Timestamp(0.0));
        tag.freeze();
        assert_eq!(tag.status, TagStatus::Unlocalized);
        tag.activate();
        tag.freeze();
        assert_eq!(tag.status, TagStatus::Frozen);
        assert!(!tag.set_position(Vec3::zeros()));
        tag.activate();
        assert_eq!(tag.status, TagStatus::Frozen);
        assert_eq!(tag.position, Vec3::new(1.0, 1.0, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn rotate_preserves_norm(psi in -20.0f64..20.0, x in -1e3f64..1e3, y in -1e3f64..1e3, z in -1e3f64..1e3) {
            let v = Vec3::new(x, y, z);
            let r = rotate(&Rot::from_heading(psi), &v);
            prop_assert!((r.norm() - v.norm()).abs() <= 1e-12 * v.norm().max(1e-300));
        }
    }

    proptest! {
        #[test]
        fn cross_is_orthogonal(a in prop::array::uniform3(-100.0f64..100.0), b in prop::array::uniform3(-100.0f64..100.0)) {
            let a = Vec3::from(a);
            let b = Vec3::from(b);
            let c = cross(&a, &b);
            let scale = a.norm() * b.norm() * (a.norm() + b.norm()) + 1.0;
            prop_assert!(c.dot(&a).abs() <= 1e-12 * scale);
            prop_assert!(c.dot(&b).abs() <= 1e-12 * scale);
            prop_assert_eq!(cross(&b, &a), -c);
        }

        #[test]
        fn wrap_then_inverse_is_identity(psi in -1e3f64..1e3) {
            let r = Rot::from_heading(psi);
            let id = r.compose(&r.inverse());
            prop_assert!(id.heading().abs() <= 1e-12);
            prop_assert!(r.heading() >= -PI && r.heading() < PI);
        }
    }
}
