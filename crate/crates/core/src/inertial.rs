//! IMU simulation, preintegration between window states, state propagation,
//! and the linear odometry constraint.
//!
//! The accelerometer reports specific force: motion acceleration plus the
//! gravity reaction `[0, 0, 9.8]`. Preintegration removes the rotated gravity
//! from every sample before summation, so the preintegrated velocity and
//! translation increments describe motion only. With gravity already removed,
//! the `g Δt` terms of the uncompensated propagation model vanish, and in the
//! plane they have no horizontal component anyway.

use nalgebra::{Matrix2, Matrix3, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geometry::{gravity, planar, RobotState, Rot, Timestamp, Vec3};
use crate::slam::{Slot, StateLayout};

pub const DEFAULT_IMU_RATE_HZ: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: Timestamp,
    /// Specific force in the body frame, m/s².
    pub accel: Vec3,
    /// Angular rate in the body frame, rad/s.
    pub gyro: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    pub accel_std: f64,
    pub gyro_std: f64,
}

impl ImuNoise {
    pub fn none() -> Self {
        Self {
            accel_std: 0.0,
            gyro_std: 0.0,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            accel_std: self.accel_std * k,
            gyro_std: self.gyro_std * k,
        }
    }
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            accel_std: 0.05,
            gyro_std: 0.005,
        }
    }
}

/// Ground-truth planar motion.
pub trait Trajectory {
    fn duration(&self) -> f64;
    fn position(&self, t: f64) -> Vec3;
    /// World-frame velocity.
    fn velocity(&self, t: f64) -> Vec3;
    /// World-frame acceleration.
    fn acceleration(&self, t: f64) -> Vec3;
    fn heading(&self, t: f64) -> f64;
    fn yaw_rate(&self, t: f64) -> f64;
}

/// One piece of a [`PiecewiseTrajectory`]: either a straight run with constant
/// acceleration along the heading, or a turn in place at constant yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub duration: f64,
    pub accel: f64,
    pub yaw_rate: f64,
}

impl MotionSegment {
    pub fn straight(duration: f64, accel: f64) -> Self {
        Self {
            duration,
            accel,
            yaw_rate: 0.0,
        }
    }

    pub fn turn(duration: f64, yaw_rate: f64) -> Self {
        Self {
            duration,
            accel: 0.0,
            yaw_rate,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SegmentStart {
    t: f64,
    position: Vec3,
    speed: f64,
    heading: f64,
}

/// Straight runs and in-place turns with piecewise-constant inputs. When every
/// segment boundary falls on an IMU sample instant, zero-order-hold
/// integration of the simulated IMU reproduces this trajectory exactly.
#[derive(Debug, Clone)]
pub struct PiecewiseTrajectory {
    segments: Vec<MotionSegment>,
    starts: Vec<SegmentStart>,
    end: SegmentStart,
}

impl PiecewiseTrajectory {
    pub fn new(start: Vec3, heading: f64, segments: Vec<MotionSegment>) -> Result<Self> {
        let mut cur = SegmentStart {
            t: 0.0,
            position: planar(start),
            speed: 0.0,
            heading,
        };
        let mut starts = Vec::with_capacity(segments.len());
        for (i, s) in segments.iter().enumerate() {
            if !(s.duration > 0.0) {
                return Err(Error::InvalidArgument(format!("segment {i} has non-positive duration")));
            }
            if s.yaw_rate != 0.0 && (s.accel != 0.0 || cur.speed.abs() > 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "segment {i} turns while translating; only in-place turns are supported"
                )));
            }
            starts.push(cur);
            cur = Self::advance(&cur, s, s.duration);
            if cur.speed.abs() < 1e-12 {
                cur.speed = 0.0;
            }
        }
        Ok(Self {
            segments,
            starts,
            end: cur,
        })
    }

    fn advance(s0: &SegmentStart, seg: &MotionSegment, dt: f64) -> SegmentStart {
        let dir = Vec3::new(s0.heading.cos(), s0.heading.sin(), 0.0);
        SegmentStart {
            t: s0.t + dt,
            position: s0.position + dir * (s0.speed * dt + 0.5 * seg.accel * dt * dt),
            speed: s0.speed + seg.accel * dt,
            heading: s0.heading + seg.yaw_rate * dt,
        }
    }

    fn locate(&self, t: f64) -> Option<(usize, f64)> {
        if self.segments.is_empty() {
            return None;
        }
        // boundaries belong to the later segment, with a little slack for
        // timestamps computed as k * dt
        let tol = 1e-9 * t.abs().max(1.0);
        let idx = self
            .starts
            .partition_point(|s| s.t <= t + tol)
            .saturating_sub(1);
        let local = (t - self.starts[idx].t).max(0.0);
        Some((idx, local))
    }

    fn state_at(&self, t: f64) -> (SegmentStart, MotionSegment) {
        match self.locate(t) {
            Some((i, local)) if t < self.end.t => {
                (Self::advance(&self.starts[i], &self.segments[i], local), self.segments[i])
            }
            _ => (self.end, MotionSegment::straight(1.0, 0.0)),
        }
    }

    /// Translational path length.
    pub fn arc_length(&self) -> f64 {
        self.segments
            .iter()
            .zip(&self.starts)
            .map(|(seg, s)| {
                let v0 = s.speed;
                let v1 = v0 + seg.accel * seg.duration;
                if v0 >= 0.0 && v1 >= 0.0 {
                    (v0 * seg.duration + 0.5 * seg.accel * seg.duration.powi(2)).abs()
                } else {
                    // sign change: split at the stop
                    let ts = -v0 / seg.accel;
                    (0.5 * v0 * ts).abs() + (0.5 * v1 * (seg.duration - ts)).abs()
                }
            })
            .sum()
    }

    pub fn segments(&self) -> &[MotionSegment] {
        &self.segments
    }
}

impl Trajectory for PiecewiseTrajectory {
    fn duration(&self) -> f64 {
        self.end.t
    }

    fn position(&self, t: f64) -> Vec3 {
        self.state_at(t).0.position
    }

    fn velocity(&self, t: f64) -> Vec3 {
        let (s, _) = self.state_at(t);
        Vec3::new(s.heading.cos(), s.heading.sin(), 0.0) * s.speed
    }

    fn acceleration(&self, t: f64) -> Vec3 {
        let (s, seg) = self.state_at(t);
        Vec3::new(s.heading.cos(), s.heading.sin(), 0.0) * seg.accel
    }

    fn heading(&self, t: f64) -> f64 {
        self.state_at(t).0.heading
    }

    fn yaw_rate(&self, t: f64) -> f64 {
        self.state_at(t).1.yaw_rate
    }
}

/// Samples an IMU at `rate_hz` over the trajectory's duration. Sample `i`
/// holds the inputs applied over `[i/rate, (i+1)/rate)`.
pub fn simulate_imu<T: Trajectory + ?Sized, R: Rng + ?Sized>(
    trajectory: &T,
    rate_hz: f64,
    noise: ImuNoise,
    rng: &mut R,
) -> Result<Vec<ImuSample>> {
    if !(rate_hz > 0.0) {
        return Err(Error::InvalidArgument(format!("IMU rate must be positive, got {rate_hz}")));
    }
    let count = (trajectory.duration() * rate_hz + 1e-9).floor() as usize;
    let accel_noise = Normal::new(0.0, noise.accel_std.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let gyro_noise = Normal::new(0.0, noise.gyro_std.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = i as f64 / rate_hz;
        let body = Rot::from_heading(trajectory.heading(t)).inverse();
        let mut accel = body.rotate(&(trajectory.acceleration(t) + gravity()));
        let mut gyro = Vec3::new(0.0, 0.0, trajectory.yaw_rate(t));
        if noise.accel_std > 0.0 {
            accel += Vec3::from_fn(|_, _| accel_noise.sample(rng));
        }
        if noise.gyro_std > 0.0 {
            gyro += Vec3::from_fn(|_, _| gyro_noise.sample(rng));
        }
        out.push(ImuSample {
            t: Timestamp(t),
            accel,
            gyro,
        });
    }
    Ok(out)
}

/// Preintegrated motion between two consecutive window states, expressed in
/// the body frame of the earlier state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryEdge {
    pub from: u64,
    pub to: u64,
    pub t_start: Timestamp,
    pub duration: f64,
    pub delta_velocity: Vec3,
    pub delta_translation: Vec3,
    /// Rotation from the later body frame into the earlier one.
    pub delta_rotation: Rot,
    /// Incremental rotation at each buffered sample.
    pub sample_rotations: Vec<Rot>,
    /// First-order covariance of `delta_translation`.
    pub covariance: Matrix3<f64>,
    pub velocity_covariance: Matrix3<f64>,
    /// `Cov(delta_translation, delta_velocity)`.
    pub cross_covariance: Matrix3<f64>,
}

impl OdometryEdge {
    pub fn between(mut self, from: u64, to: u64) -> Self {
        self.from = from;
        self.to = to;
        self
    }

    pub fn t_end(&self) -> Timestamp {
        Timestamp(self.t_start.seconds() + self.duration)
    }

    /// Composes this edge with the one that follows it.
    pub fn chain(&self, next: &OdometryEdge) -> OdometryEdge {
        let r = self.delta_rotation;
        let rm = r.matrix();
        let d2 = next.duration;
        let mut sample_rotations = self.sample_rotations.clone();
        sample_rotations.extend(next.sample_rotations.iter().map(|q| r.compose(q)));
        let cross = self.cross_covariance;
        OdometryEdge {
            from: self.from,
            to: next.to,
            t_start: self.t_start,
            duration: self.duration + d2,
            delta_velocity: self.delta_velocity + r.rotate(&next.delta_velocity),
            delta_translation: self.delta_translation
                + self.delta_velocity * d2
                + r.rotate(&next.delta_translation),
            delta_rotation: r.compose(&next.delta_rotation),
            sample_rotations,
            covariance: self.covariance
                + (cross + cross.transpose()) * d2
                + self.velocity_covariance * (d2 * d2)
                + rm * next.covariance * rm.transpose(),
            velocity_covariance: self.velocity_covariance
                + rm * next.velocity_covariance * rm.transpose(),
            cross_covariance: cross
                + self.velocity_covariance * d2
                + rm * next.cross_covariance * rm.transpose(),
        }
    }
}

/// Preintegration settings shared by every edge of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preintegrator {
    pub dt: f64,
    pub noise: ImuNoise,
}

impl Preintegrator {
    pub fn new(rate_hz: f64, noise: ImuNoise) -> Self {
        Self {
            dt: 1.0 / rate_hz,
            noise,
        }
    }

    /// Sums the buffered samples between two states. `r_k` is the world
    /// orientation of the earlier state, used to remove gravity.
    pub fn integrate(&self, samples: &[ImuSample], r_k: Rot) -> Result<OdometryEdge> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("preintegration needs at least one sample".into()));
        }
        if samples.windows(2).any(|w| !(w[1].t.seconds() > w[0].t.seconds())) {
            return Err(Error::InvalidArgument("IMU samples are not strictly time ordered".into()));
        }
        let dt = self.dt;
        let n = samples.len();
        let q = Matrix3::identity() * self.noise.accel_std.powi(2);
        let g = gravity();

        let mut rot = Rot::identity();
        let mut velocity = Vec3::zeros();
        let mut translation = Vec3::zeros();
        let mut covariance = Matrix3::zeros();
        let mut velocity_covariance = Matrix3::zeros();
        let mut cross_covariance = Matrix3::zeros();
        let mut sample_rotations = Vec::with_capacity(n);
        for (i, s) in samples.iter().enumerate() {
            sample_rotations.push(rot);
            let world_to_body = r_k.compose(&rot).inverse();
            let motion = s.accel - world_to_body.rotate(&g);
            let a = rot.rotate(&motion);
            translation += velocity * dt + a * (0.5 * dt * dt);
            velocity += a * dt;

            // sample i's noise reaches the translation with lever (n - i - 1/2) dt²
            let lever = (n as f64 - i as f64 - 0.5) * dt * dt;
            let rm = rot.matrix();
            let rqr = rm * q * rm.transpose();
            covariance += rqr * (lever * lever);
            velocity_covariance += rqr * (dt * dt);
            cross_covariance += rqr * (lever * dt);

            // planar exponential map of the skew-symmetric increment ⌊ω×⌋ dt
            rot = rot.compose(&Rot::from_heading(s.gyro.z * dt));
        }
        Ok(OdometryEdge {
            from: 0,
            to: 0,
            t_start: samples[0].t,
            duration: n as f64 * dt,
            delta_velocity: velocity,
            delta_translation: translation,
            delta_rotation: rot,
            sample_rotations,
            covariance: (covariance + covariance.transpose()) * 0.5,
            velocity_covariance,
            cross_covariance,
        })
    }
}

pub fn preintegrate(samples: &[ImuSample], r_k: Rot, pre: &Preintegrator) -> Result<OdometryEdge> {
    pre.integrate(samples, r_k)
}

/// Advances a state across an edge: position in the world frame, velocity
/// in the new body frame, orientation by the edge's rotation increment.
pub fn propagate(state: &RobotState, edge: &OdometryEdge) -> RobotState {
    let r = state.rotation;
    let position =
        state.position + r.rotate(&(state.velocity * edge.duration + edge.delta_translation));
    let velocity = edge
        .delta_rotation
        .inverse()
        .rotate(&(state.velocity + edge.delta_velocity));
    RobotState::new(
        edge.to,
        Timestamp(state.t.seconds() + edge.duration),
        position,
        velocity,
        r.compose(&edge.delta_rotation),
    )
}

/// Linearized odometry rows: `rhs = R₀ᵏ (μ_{k+1} − μ_k)` with the measured
/// translation and the known velocity term folded into `rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdometryConstraint {
    pub from: u64,
    pub to: u64,
    /// Planar block of `R₀ᵏ`, the world→body rotation of the earlier state.
    pub world_to_body: Matrix2<f64>,
    /// `T + ν_k Δt`, planar.
    pub rhs: Vector2<f64>,
    pub measured: Vec3,
    /// Planar block of the translation covariance.
    pub covariance: Matrix2<f64>,
    pub from_slot: Slot,
    pub to_slot: Slot,
}

impl OdometryConstraint {
    /// `rhs − R₀ᵏ(μ_{k+1} − μ_k)` at the given positions.
    pub fn residual(&self, from: &Vec3, to: &Vec3) -> Vector2<f64> {
        let d = Vector2::new(to.x - from.x, to.y - from.y);
        self.rhs - self.world_to_body * d
    }
}

/// Builds the odometry rows for `edge`, which starts at `from_state`.
pub fn odometry_constraint(
    edge: &OdometryEdge,
    from_state: &RobotState,
    layout: &StateLayout,
) -> Result<OdometryConstraint> {
    if from_state.id != edge.from {
        return Err(Error::InvalidArgument(format!(
            "edge starts at state {} but was given state {}",
            edge.from, from_state.id
        )));
    }
    let from_slot = layout
        .robot(edge.from)
        .ok_or_else(|| Error::InvalidState(format!("state {} is outside the window", edge.from)))?;
    let to_slot = layout
        .robot(edge.to)
        .ok_or_else(|| Error::InvalidState(format!("state {} is outside the window", edge.to)))?;
    let r = from_state.rotation.inverse().matrix();
    let world_to_body = r.fixed_view::<2, 2>(0, 0).into_owned();
    let rhs3 = edge.delta_translation + from_state.velocity * edge.duration;
    Ok(OdometryConstraint {
        from: edge.from,
        to: edge.to,
        world_to_body,
        rhs: Vector2::new(rhs3.x, rhs3.y),
        measured: edge.delta_translation,
        covariance: edge.covariance.fixed_view::<2, 2>(0, 0).into_owned(),
        from_slot,
        to_slot,
    })
}

/// Writes `t,ax,ay,az,wx,wy,wz` lines.
pub fn write_imu_trace<W: Write>(mut w: W, samples: &[ImuSample]) -> Result<()> {
    writeln!(w, "t,ax,ay,az,wx,wy,wz")?;
    for s in samples {
        writeln!(
            w,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            s.t.seconds(),
            s.accel.x,
            s.accel.y,
            s.accel.z,
            s.gyro.x,
            s.gyro.y,
            s.gyro.z
        )?;
    }
    Ok(())
}

pub fn read_imu_trace<R: BufRead>(r: R) -> Result<Vec<ImuSample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with("t,") {
            continue;
        }
        let v: Vec<f64> = t
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if v.len() != 7 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 7 fields, got {}", v.len()),
            });
        }
        out.push(ImuSample {
            t: Timestamp(v[0]),
            accel: Vec3::new(v[1], v[2], v[3]),
            gyro: Vec3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}
