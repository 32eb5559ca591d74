//! Simultaneous localization of a mobile robot and static backscatter tags
//! from WiFi angle-of-arrival measurements and inertial odometry.
//!
//! The pipeline has five stages, one module each:
//!
//! - [`channel`]: frequency-shift sideband model, tag channel plan, receiver sweep
//! - [`csi`]: CSI synthesis and joint AoA/ToF estimation on a 3-antenna circular array
//! - [`inertial`]: IMU simulation, preintegration and state propagation
//! - [`slam`]: the sliding-window linear least-squares estimator
//! - [`harness`]: scenarios, the end-to-end runner and metrics

pub mod channel;
pub mod csi;
pub mod error;
pub mod geometry;
pub mod inertial;
pub mod harness;
pub mod slam;

pub use error::{Error, Result};
pub use geometry::{cross, rotate, RobotState, Rot, TagState, TagStatus, Timestamp, Vec3};
