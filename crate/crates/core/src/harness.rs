//! End-to-end simulation: ground truth, channel sweep, CSI synthesis, AoA
//! estimation, preintegration and the sliding window, plus metrics and the
//! files consumed by the plotting tools.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{center_frequency_hz, plan_channels, rx_channel_at, SweepSchedule, DEFAULT_DWELL_S};
use crate::csi::{
    direct_path_aoa, synthesize_csi, AoaTofEstimator, ArrayGeometry, CsiMatrix, SearchGrid, VirtualPath,
    SPEED_OF_LIGHT,
};
use crate::error::{Error, Result};
pub use crate::geometry::median;
use crate::geometry::{angle_diff, wrap_pi, wrap_two_pi, RobotState, Rot, TagStatus, Timestamp, Vec3};
use crate::inertial::{
    simulate_imu, ImuNoise, MotionSegment, PiecewiseTrajectory, Preintegrator, Trajectory, DEFAULT_IMU_RATE_HZ,
};
use crate::slam::{SlidingWindow, Solution, WindowConfig};

/// CSI noise standard deviation per entry, relative to a unit-gain direct
/// path, that gives a 9.3° median LOS bearing error with the default link
/// model. Reproduce with [`calibrate_noise_std`].
pub const CALIBRATED_NOISE_STD: f64 = 4.9;

/// Power loss of the direct path for NLOS tags, dB.
pub const NLOS_DIRECT_LOSS_DB: f64 = 6.0;

/// Transmitter-to-tag paths. More than one pushes NLOS links past
/// [`crate::csi::MAX_SOURCES`] virtual paths.
pub const DEFAULT_TX_PATHS: usize = 1;

/// Packets per dwell used by the calibration trials.
pub const PACKETS_PER_DWELL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagSpec {
    /// Room coordinates, m.
    pub position: [f64; 2],
    pub los: bool,
}

/// Closed polygon driven `laps` times: straight legs with a trapezoidal
/// speed profile, separated by turns in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<[f64; 2]>,
    pub laps: usize,
    /// Cruise speed, m/s.
    pub speed: f64,
    /// Time to reach cruise speed from rest, s.
    pub accel_time_s: f64,
    /// Time for a 90° turn, s.
    pub turn_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSettings {
    pub csi_std: f64,
    pub imu: ImuNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub imu_hz: f64,
    /// Packet rate while the receiver dwells on a tag channel.
    pub packet_hz: f64,
    pub dwell_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Room extents along x and y, m.
    pub room: [f64; 2],
    pub tags: Vec<TagSpec>,
    pub trajectory: TrajectorySpec,
    pub excitation_channel: u32,
    pub noise: NoiseSettings,
    pub seed: u64,
    pub rates: Rates,
    /// Tags further than this from the robot are not heard, m.
    pub comm_range_m: f64,
    /// Transmitter-to-tag path count.
    #[serde(default = "default_tx_paths")]
    pub tx_paths: usize,
    pub window: WindowConfig,
}

fn default_tx_paths() -> usize {
    DEFAULT_TX_PATHS
}

/// Bearing standard deviation assumed by the paper scenario's window, deg.
/// Wider than the core of the calibrated error distribution to account for
/// its mirrored outliers.
pub const PAPER_AOA_STD_DEG: f64 = 60.0;

/// Seconds without a bearing before a tag freezes in the paper scenario.
pub const PAPER_FREEZE_AFTER_S: f64 = 40.0;

/// The reproduction scenario: a 9×5 m room, four tags with the fourth behind
/// an obstruction, two laps of a 7.49×3 m rectangle (41.96 m) at 0.3 m/s,
/// excitation on channel 165.
pub fn paper_scenario() -> Scenario {
    let dwell_s = DEFAULT_DWELL_S;
    let tags = vec![
        TagSpec { position: [2.5, 0.2], los: true },
        TagSpec { position: [6.5, 4.8], los: true },
        TagSpec { position: [8.8, 1.5], los: true },
        TagSpec { position: [0.2, 3.5], los: false },
    ];
    let mut window = WindowConfig::default().extended();
    window.association_tolerance_s = dwell_s * tags.len() as f64 / 2.0;
    window.aoa_std_rad = PAPER_AOA_STD_DEG.to_radians();
    window.freeze_after_s = PAPER_FREEZE_AFTER_S;
    Scenario {
        name: "paper".into(),
        room: [9.0, 5.0],
        tags,
        trajectory: TrajectorySpec {
            waypoints: vec![[0.755, 1.0], [8.245, 1.0], [8.245, 4.0], [0.755, 4.0]],
            laps: 2,
            speed: 0.3,
            accel_time_s: 1.0,
            turn_time_s: 2.0,
        },
        excitation_channel: 165,
        noise: NoiseSettings {
            csi_std: CALIBRATED_NOISE_STD,
            imu: ImuNoise::default(),
        },
        seed: 0,
        rates: Rates {
            imu_hz: DEFAULT_IMU_RATE_HZ,
            packet_hz: 50.0,
            dwell_s,
        },
        comm_range_m: 6.0,
        tx_paths: DEFAULT_TX_PATHS,
        window,
    }
}

impl Scenario {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Multiplies every noise standard deviation by `k`.
    pub fn with_noise_scale(mut self, k: f64) -> Self {
        self.noise.csi_std *= k;
        self.noise.imu = self.noise.imu.scaled(k);
        self
    }

    pub fn noiseless(self) -> Self {
        self.with_noise_scale(0.0)
    }

    pub fn with_window_size(mut self, n: usize) -> Self {
        self.window.max_states = n;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn inside(&self, p: [f64; 2]) -> bool {
        (0.0..=self.room[0]).contains(&p[0]) && (0.0..=self.room[1]).contains(&p[1])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.room[0] > 0.0 && self.room[1] > 0.0) {
            return bad("room extents must be positive".into());
        }
        if self.tags.is_empty() {
            return bad("scenario has no tags".into());
        }
        for (i, t) in self.tags.iter().enumerate() {
            if !self.inside(t.position) {
                return bad(format!("tag {i} at {:?} is outside the room", t.position));
            }
        }
        let tr = &self.trajectory;
        if tr.waypoints.len() < 2 || tr.laps == 0 {
            return bad("trajectory needs at least 2 waypoints and 1 lap".into());
        }
        for w in &tr.waypoints {
            if !self.inside(*w) {
                return bad(format!("waypoint {w:?} is outside the room"));
            }
        }
        if !(tr.speed > 0.0 && tr.accel_time_s > 0.0 && tr.turn_time_s > 0.0) {
            return bad("speed, acceleration time and turn time must be positive".into());
        }
        let r = &self.rates;
        if !(r.imu_hz > 0.0 && r.packet_hz > 0.0 && r.dwell_s > 0.0) {
            return bad("rates must be positive".into());
        }
        if self.packets_per_dwell() == 0 {
            return bad("dwell is shorter than one packet interval".into());
        }
        // states are placed once per sweep cycle, on IMU sample instants
        let per_cycle = self.cycle_s() * r.imu_hz;
        if (per_cycle - per_cycle.round()).abs() > 1e-6 {
            return bad("sweep cycle must be a whole number of IMU samples".into());
        }
        if !(self.noise.csi_std >= 0.0 && self.noise.imu.accel_std >= 0.0 && self.noise.imu.gyro_std >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if self.tx_paths == 0 {
            return bad("at least one transmitter path is required".into());
        }
        if !(self.comm_range_m > 0.0) {
            return bad("communication range must be positive".into());
        }
        self.window.validate()
    }

    pub fn packets_per_dwell(&self) -> usize {
        (self.rates.dwell_s * self.rates.packet_hz + 1e-9).floor() as usize
    }

    /// Length of one receiver sweep over all tag channels, s.
    pub fn cycle_s(&self) -> f64 {
        self.rates.dwell_s * self.tags.len() as f64
    }

    /// Ground truth in room coordinates.
    pub fn trajectory(&self) -> Result<PiecewiseTrajectory> {
        let tr = &self.trajectory;
        let hz = self.rates.imu_hz;
        let snap = |t: f64| ((t * hz).round() / hz).max(1.0 / hz);
        let ta = snap(tr.accel_time_s);

        let mut points: Vec<[f64; 2]> = Vec::new();
        for _ in 0..tr.laps {
            points.extend(&tr.waypoints);
        }
        points.push(tr.waypoints[0]);

        let heading_of = |a: [f64; 2], b: [f64; 2]| (b[1] - a[1]).atan2(b[0] - a[0]);
        let start_heading = heading_of(points[0], points[1]);
        let mut heading = start_heading;
        let mut segments = Vec::new();
        for leg in points.windows(2) {
            let (a, b) = (leg[0], leg[1]);
            let length = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            if length < 1e-9 {
                continue;
            }
            let want = heading_of(a, b);
            let turn = wrap_pi(want - heading);
            if turn.abs() > 1e-12 {
                let d = snap(tr.turn_time_s * turn.abs() / FRAC_PI_2);
                segments.push(MotionSegment::turn(d, turn / d));
            }
            heading = want;
            // trapezoid: accel ta, cruise tc, decel ta covers v (ta + tc)
            let tc = ((length / tr.speed - ta) * hz).round().max(0.0) / hz;
            let v = length / (ta + tc);
            segments.push(MotionSegment::straight(ta, v / ta));
            if tc > 0.0 {
                segments.push(MotionSegment::straight(tc, 0.0));
            }
            segments.push(MotionSegment::straight(ta, -v / ta));
        }
        let p0 = points[0];
        PiecewiseTrajectory::new(Vec3::new(p0[0], p0[1], 0.0), start_heading, segments)
    }

    /// Room frame → estimator world frame (start pose at the origin, facing +x).
    pub fn world_frame(&self) -> Result<WorldFrame> {
        let traj = self.trajectory()?;
        Ok(WorldFrame {
            origin: traj.position(0.0),
            rotation: Rot::from_heading(traj.heading(0.0)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldFrame {
    pub origin: Vec3,
    pub rotation: Rot,
}

impl WorldFrame {
    pub fn to_world(&self, room: &Vec3) -> Vec3 {
        self.rotation.inverse().rotate(&(room - self.origin))
    }

    pub fn heading_to_world(&self, heading: f64) -> f64 {
        heading - self.rotation.heading()
    }
}

fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(-db / 20.0)
}

/// Receiver-side paths for one dwell: the direct path plus reflections.
/// LOS links get one weak reflection; NLOS links get an attenuated direct
/// path and two strong reflections. Transmitter-side multipath multiplies
/// each receiver path into `tx_paths` virtual paths that share its bearing
/// and arrive later. Reflections are drawn afresh each dwell.
pub fn link_paths<R: Rng + ?Sized>(
    theta: f64,
    distance: f64,
    los: bool,
    tx_paths: usize,
    rng: &mut R,
) -> Vec<VirtualPath> {
    let tof = distance / SPEED_OF_LIGHT;
    let phase = |rng: &mut R| Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI));
    let reflection = |rng: &mut R, gain: f64, excess: (f64, f64)| {
        VirtualPath::new(
            tof + rng.gen_range(excess.0..excess.1),
            rng.gen_range(0.0..2.0 * PI),
            phase(rng) * gain,
        )
    };
    let rx = if los {
        let direct = VirtualPath::new(tof, theta, Complex64::new(1.0, 0.0));
        let g = rng.gen_range(0.1..0.3);
        vec![direct, reflection(rng, g, (20e-9, 80e-9))]
    } else {
        let direct = VirtualPath::new(tof, theta, Complex64::new(db_to_amplitude(NLOS_DIRECT_LOSS_DB), 0.0));
        let g1 = rng.gen_range(0.4..0.8);
        let g2 = rng.gen_range(0.4..0.8);
        vec![direct, reflection(rng, g1, (10e-9, 60e-9)), reflection(rng, g2, (10e-9, 60e-9))]
    };
    let mut tx = vec![(0.0, Complex64::new(1.0, 0.0))];
    for _ in 1..tx_paths.max(1) {
        let g = rng.gen_range(0.2..0.5);
        tx.push((rng.gen_range(10e-9..40e-9), phase(rng) * g));
    }
    rx.iter()
        .flat_map(|p| tx.iter().map(move |(d, g)| VirtualPath::new(p.tof_s + d, p.aoa_rad, p.gain * g)))
        .collect()
}

/// CSI for every packet of one dwell over a static set of paths.
pub fn dwell_packets<R: Rng + ?Sized>(
    paths: &[VirtualPath],
    geom: &ArrayGeometry,
    noise_std: f64,
    packets: usize,
    rng: &mut R,
) -> Result<Vec<CsiMatrix>> {
    (0..packets).map(|_| synthesize_csi(paths, geom, noise_std, rng)).collect()
}

/// Receiver array used for a tag answering on `rx_hz`.
pub fn rx_geometry(rx_hz: f64) -> ArrayGeometry {
    // the array is cut for the excitation channel; tags answer a little off it
    let mut g = ArrayGeometry::default();
    g.wavelength_m = SPEED_OF_LIGHT / rx_hz;
    g.spacing_m = g.spacing_m.min(g.wavelength_m / 2.0);
    g
}

/// Bearing errors in degrees over `trials` random single-dwell links.
pub fn aoa_error_trials(noise_std: f64, los: bool, tx_paths: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let geom = ArrayGeometry::default();
    let est = AoaTofEstimator::new(geom, SearchGrid::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let theta = rng.gen_range(0.0..2.0 * PI);
        let distance = rng.gen_range(0.5..8.0);
        let paths = link_paths(theta, distance, los, tx_paths, &mut rng);
        let packets = dwell_packets(&paths, &geom, noise_std, PACKETS_PER_DWELL, &mut rng)?;
        let peaks = est.estimate(&packets)?;
        let aoa = direct_path_aoa(&peaks, 0, Timestamp(0.0))?;
        out.push(angle_diff(aoa.theta, theta).to_degrees());
    }
    Ok(out)
}
/// Noise level whose median LOS bearing error matches `target_deg`, found by
/// bisection in log scale with common random numbers.
pub fn calibrate_noise_std(target_deg: f64, trials: usize, seed: u64) -> Result<f64> {
    if !(target_deg > 0.0) || trials == 0 {
        return Err(Error::InvalidArgument("target and trial count must be positive".into()));
    }
    let med = |s: f64| -> Result<f64> {
        median(&aoa_error_trials(s, true, DEFAULT_TX_PATHS, trials, seed)?).ok_or_else(|| Error::InvalidState("no trials".into()))
    };
    let (mut lo, mut hi) = (1e-3f64, 1e2f64);
    if med(lo)? > target_deg || med(hi)? < target_deg {
        return Err(Error::EstimationFailed(format!("target {target_deg}° is outside the reachable range")));
    }
    for _ in 0..30 {
        let mid = (lo * hi).sqrt();
        if med(mid)? < target_deg {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.001 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

/// One row of the solution log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub t: f64,
    pub robots: Vec<RobotEntry>,
    pub tags: Vec<TagEntry>,
    pub aoa_cost: f64,
    pub odometry_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotEntry {
    pub id: u64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagEntry {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub status: TagStatus,
}

impl SolutionRecord {
    pub fn from_solution(s: &Solution) -> Self {
        Self {
            t: s.t.seconds(),
            robots: s
                .state
                .robots
                .iter()
                .map(|(id, t, p)| RobotEntry { id: *id, t: t.seconds(), x: p.x, y: p.y })
                .collect(),
            tags: s
                .state
                .tags
                .iter()
                .map(|(id, p, status)| TagEntry { id: *id, x: p.x, y: p.y, status: *status })
                .collect(),
            aoa_cost: s.aoa_cost,
            odometry_cost: s.odometry_cost,
        }
    }

    /// Estimate of the newest robot state.
    pub fn newest(&self) -> Option<&RobotEntry> {
        self.robots.iter().max_by(|a, b| a.t.total_cmp(&b.t))
    }
}

pub fn write_solution_log<W: Write>(mut w: W, records: &[SolutionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_solution_log<R: BufRead>(r: R) -> Result<Vec<SolutionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// One bearing measurement with its ground truth, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoaRecord {
    pub t: f64,
    pub tag_id: u32,
    pub true_theta: f64,
    pub est_theta: f64,
}

/// Ground truth in the estimator's world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Robot positions at every state time.
    pub robot: Vec<(f64, [f64; 2])>,
    /// Tag id, position, line of sight.
    pub tags: Vec<(u32, [f64; 2], bool)>,
    pub arc_length_m: f64,
}

impl GroundTruth {
    pub fn robot_at(&self, t: f64, tol: f64) -> Option<[f64; 2]> {
        let i = self.robot.partition_point(|(s, _)| *s < t);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| self.robot.get(j))
            .filter(|(s, _)| (s - t).abs() <= tol)
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
            .map(|(_, p)| *p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagReport {
    pub tag_id: u32,
    pub los: bool,
    pub true_position: [f64; 2],
    pub estimate: Option<[f64; 2]>,
    pub error_m: Option<f64>,
    pub status: Option<TagStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_seconds(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut v: Vec<f64> = samples.iter().map(|s| s * 1e3).collect();
        v.sort_by(f64::total_cmp);
        let p95 = v[((v.len() as f64 * 0.95).ceil() as usize).clamp(1, v.len()) - 1];
        Self {
            count: v.len(),
            median_ms: median(&v).unwrap_or(0.0),
            p95_ms: p95,
            max_ms: v[v.len() - 1],
        }
    }
}

/// Modelling assumptions the paper leaves open, echoed in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumptions {
    pub speed_mps: f64,
    pub packet_hz: f64,
    pub dwell_s: f64,
    pub imu_hz: f64,
    pub window_states: usize,
    pub csi_noise_std: f64,
    pub imu_noise: ImuNoise,
    pub comm_range_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub assumptions: Option<Assumptions>,
    pub trajectory_length_m: f64,
    pub robot_mean_error_m: f64,
    pub robot_rmse_m: f64,
    pub robot_max_error_m: f64,
    pub tags: Vec<TagReport>,
    pub mean_los_tag_error_m: Option<f64>,
    pub mean_nlos_tag_error_m: Option<f64>,
    /// Sorted absolute bearing errors, degrees.
    pub aoa_errors_deg: Vec<f64>,
    pub aoa_median_los_deg: Option<f64>,
    pub aoa_median_nlos_deg: Option<f64>,
    pub num_solves: usize,
    pub failed_solves: usize,
    pub dropped_observations: usize,
    /// Wall-clock timing; kept out of `report.json` so reports are reproducible.
    #[serde(skip)]
    pub latency: LatencyStats,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Trajectory, tag and bearing errors from a solution log.
pub fn compute_metrics(log: &[SolutionRecord], truth: &GroundTruth, aoa: &[AoaRecord], tol_s: f64) -> Result<RunReport> {
    if log.is_empty() {
        return Err(Error::MetricAlignment("solution log is empty".into()));
    }
    let mut robot_errors = Vec::with_capacity(log.len());
    for r in log {
        let est = r
            .newest()
            .ok_or_else(|| Error::MetricAlignment(format!("solve at t = {} has no robot states", r.t)))?;
        let p = truth.robot_at(est.t, tol_s).ok_or_else(|| {
            Error::MetricAlignment(format!("no ground truth within {tol_s} s of t = {}", est.t))
        })?;
        robot_errors.push(((est.x - p[0]).powi(2) + (est.y - p[1]).powi(2)).sqrt());
    }

    let last = log.last().expect("non-empty");
    let tags: Vec<TagReport> = truth
        .tags
        .iter()
        .map(|&(id, p, los)| {
            let e = last.tags.iter().find(|t| t.id == id);
            TagReport {
                tag_id: id,
                los,
                true_position: p,
                estimate: e.map(|e| [e.x, e.y]),
                error_m: e.map(|e| ((e.x - p[0]).powi(2) + (e.y - p[1]).powi(2)).sqrt()),
                status: e.map(|e| e.status),
            }
        })
        .collect();

    let los_of: BTreeMap<u32, bool> = truth.tags.iter().map(|t| (t.0, t.2)).collect();
    let aoa_err = |los: bool| -> Vec<f64> {
        aoa.iter()
            .filter(|a| los_of.get(&a.tag_id) == Some(&los))
            .map(|a| angle_diff(a.est_theta, a.true_theta).to_degrees())
            .collect()
    };
    let mut all: Vec<f64> = aoa
        .iter()
        .map(|a| angle_diff(a.est_theta, a.true_theta).to_degrees())
        .collect();
    all.sort_by(f64::total_cmp);

    let length = truth
        .robot
        .windows(2)
        .map(|w| ((w[1].1[0] - w[0].1[0]).powi(2) + (w[1].1[1] - w[0].1[1]).powi(2)).sqrt())
        .sum();

    Ok(RunReport {
        scenario: String::new(),
        seed: 0,
        assumptions: None,
        trajectory_length_m: length,
        robot_mean_error_m: mean(robot_errors.iter().copied()).unwrap_or(0.0),
        robot_rmse_m: mean(robot_errors.iter().map(|e| e * e)).unwrap_or(0.0).sqrt(),
        robot_max_error_m: robot_errors.iter().copied().fold(0.0, f64::max),
        mean_los_tag_error_m: mean(tags.iter().filter(|t| t.los).filter_map(|t| t.error_m)),
        mean_nlos_tag_error_m: mean(tags.iter().filter(|t| !t.los).filter_map(|t| t.error_m)),
        tags,
        aoa_errors_deg: all,
        aoa_median_los_deg: median(&aoa_err(true)),
        aoa_median_nlos_deg: median(&aoa_err(false)),
        num_solves: log.len(),
        failed_solves: 0,
        dropped_observations: 0,
        latency: LatencyStats::default(),
    })
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub log: Vec<SolutionRecord>,
    pub aoa: Vec<AoaRecord>,
    pub truth: GroundTruth,
    pub latencies_s: Vec<f64>,
}

/// Runs the full pipeline in simulated time. Deterministic in `s.seed`
/// apart from the wall-clock latency figures.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput> {
    s.validate()?;
    let plan = plan_channels(s.tags.len(), s.excitation_channel)?;
    let schedule = SweepSchedule::from_plan(&plan, s.rates.dwell_s);
    let traj = s.trajectory()?;
    let frame = s.world_frame()?;

    let mut imu_rng = ChaCha8Rng::seed_from_u64(s.seed);
    imu_rng.set_stream(1);
    let mut csi_rng = ChaCha8Rng::seed_from_u64(s.seed);
    csi_rng.set_stream(2);

    let imu = simulate_imu(&traj, s.rates.imu_hz, s.noise.imu, &mut imu_rng)?;
    let pre = Preintegrator::new(s.rates.imu_hz, s.noise.imu);
    let per_state = (s.cycle_s() * s.rates.imu_hz).round() as usize;
    let num_states = imu.len() / per_state + 1;
    let state_time = |k: usize| k as f64 * per_state as f64 / s.rates.imu_hz;

    let mut estimators: BTreeMap<u32, AoaTofEstimator> = BTreeMap::new();
    for a in &plan.assignments {
        let geom = rx_geometry(center_frequency_hz(a.rx_channel)?);
        estimators.insert(a.rx_channel, AoaTofEstimator::new(geom, SearchGrid::default())?);
    }

    let first = RobotState::origin(Timestamp(0.0));
    let mut window = SlidingWindow::new(s.window, first)?;
    let tags_world: Vec<Vec3> = s
        .tags
        .iter()
        .map(|t| frame.to_world(&Vec3::new(t.position[0], t.position[1], 0.0)))
        .collect();

    let mut log = Vec::new();
    let mut aoa = Vec::new();
    let mut truth_robot = Vec::with_capacity(num_states);
    let mut latencies = Vec::new();
    let mut failed = 0;

    for k in 0..num_states {
        let t = state_time(k);
        if k > 0 {
            let samples = &imu[(k - 1) * per_state..k * per_state];
            let edge = pre.integrate(samples, window.newest().rotation)?;
            let from = window.newest().id;
            window.advance(edge.between(from, k as u64))?;
        }
        let pos = frame.to_world(&traj.position(t));
        let heading = frame.heading_to_world(traj.heading(t));
        truth_robot.push((t, [pos.x, pos.y]));
        let body = Rot::from_heading(heading).inverse();

        // one dwell per tag channel during the cycle; the link geometry is
        // taken at the cycle's state time
        for j in 0..schedule.channels.len() {
            let channel = rx_channel_at(&schedule, Timestamp(t + (j as f64 + 0.5) * s.rates.dwell_s))?;
            let Some(tag) = plan.tag_on_channel(channel) else { continue };
            let spec = &s.tags[tag as usize];
            let rel = body.rotate(&(tags_world[tag as usize] - pos));
            let distance = rel.norm();
            if distance > s.comm_range_m {
                continue;
            }
            let theta = wrap_two_pi(rel.y.atan2(rel.x));
            let est = &estimators[&channel];
            let paths = link_paths(theta, distance, spec.los, s.tx_paths, &mut csi_rng);
            let packets = dwell_packets(&paths, &est.geometry, s.noise.csi_std, s.packets_per_dwell(), &mut csi_rng)?;
            let peaks = match est.estimate(&packets) {
                Ok(p) => p,
                Err(Error::EstimationFailed(_)) => continue,
                Err(e) => return Err(e),
            };
            let obs = direct_path_aoa(&peaks, tag, Timestamp(t))?;
            aoa.push(AoaRecord {
                t,
                tag_id: tag,
                true_theta: theta,
                est_theta: obs.theta,
            });
            match window.add_aoa(&obs) {
                Ok(_) | Err(Error::ObservationDropped(_)) => {}
                Err(e) => return Err(e),
            }
        }

        let started = Instant::now();
        let solved = window.solve();
        latencies.push(started.elapsed().as_secs_f64());
        match solved {
            Ok(sol) => log.push(SolutionRecord::from_solution(&sol)),
            Err(Error::DegenerateGeometry { .. }) => failed += 1,
            Err(e) => return Err(e),
        }
    }

    let truth = GroundTruth {
        robot: truth_robot,
        tags: tags_world
            .iter()
            .zip(&s.tags)
            .enumerate()
            .map(|(i, (p, spec))| (i as u32, [p.x, p.y], spec.los))
            .collect(),
        arc_length_m: traj.arc_length(),
    };
    let mut report = compute_metrics(&log, &truth, &aoa, s.window.association_tolerance_s)?;
    report.scenario = s.name.clone();
    report.seed = s.seed;
    report.assumptions = Some(Assumptions {
        speed_mps: s.trajectory.speed,
        packet_hz: s.rates.packet_hz,
        dwell_s: s.rates.dwell_s,
        imu_hz: s.rates.imu_hz,
        window_states: s.window.max_states,
        csi_noise_std: s.noise.csi_std,
        imu_noise: s.noise.imu,
        comm_range_m: s.comm_range_m,
    });
    report.failed_solves = failed;
    report.dropped_observations = window.dropped_observations();
    report.latency = LatencyStats::from_seconds(&latencies);

    Ok(RunOutput {
        report,
        log,
        aoa,
        truth,
        latencies_s: latencies,
    })
}

impl RunOutput {
    /// Writes `report.json`, `timing.json`, `trajectory.csv`, `tags.csv`,
    /// `aoa.csv` and `solutions.jsonl` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        std::fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&self.report.latency)?)?;
        write_solution_log(BufWriter::new(File::create(dir.join("solutions.jsonl"))?), &self.log)?;

        let mut w = csv::Writer::from_path(dir.join("trajectory.csv"))?;
        w.write_record(["t", "true_x", "true_y", "est_x", "est_y"])?;
        for r in &self.log {
            let Some(e) = r.newest() else { continue };
            let Some(p) = self.truth.robot_at(e.t, 1e-6) else { continue };
            w.serialize((e.t, p[0], p[1], e.x, e.y))?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("tags.csv"))?;
        w.write_record(["tag_id", "true_x", "true_y", "est_x", "est_y", "error"])?;
        for t in &self.report.tags {
            let (ex, ey) = t.estimate.map_or((f64::NAN, f64::NAN), |e| (e[0], e[1]));
            w.serialize((t.tag_id, t.true_position[0], t.true_position[1], ex, ey, t.error_m.unwrap_or(f64::NAN)))?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("aoa.csv"))?;
        w.write_record(["t", "tag_id", "true_theta", "est_theta"])?;
        for a in &self.aoa {
            w.serialize((a.t, a.tag_id, a.true_theta, a.est_theta))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads `solutions.jsonl` back from an output directory.
pub fn load_solution_log(path: &Path) -> Result<Vec<SolutionRecord>> {
    read_solution_log(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scenario_shape() {
        let s = paper_scenario();
        s.validate().unwrap();
        assert_eq!(s.room, [9.0, 5.0]);
        assert_eq!(s.tags.len(), 4);
        assert_eq!(s.tags.iter().filter(|t| !t.los).count(), 1);
        assert!((center_frequency_hz(s.excitation_channel).unwrap() - 5.825e9).abs() < 1.0);
        let traj = s.trajectory().unwrap();
        assert!((traj.arc_length() - 41.96).abs() < 0.01, "{}", traj.arc_length());
        assert!((140.0..180.0).contains(&traj.duration()));
    }

    #[test]
    fn trajectory_visits_waypoints() {
        let s = paper_scenario();
        let traj = s.trajectory().unwrap();
        let end = traj.position(traj.duration());
        assert!((end - Vec3::new(0.755, 1.0, 0.0)).norm() < 1e-9);
        for t in (0..1600).map(|i| i as f64 * 0.1) {
            let p = traj.position(t);
            assert!(p.x > 0.7 && p.x < 8.3 && p.y > 0.95 && p.y < 4.05);
        }
    }

    #[test]
    fn world_frame_puts_start_at_origin() {
        let mut s = paper_scenario();
        s.trajectory.waypoints = vec![[1.0, 1.0], [1.0, 4.0], [8.0, 4.0]];
        let f = s.world_frame().unwrap();
        assert!(f.to_world(&Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
        // first leg runs along +y in the room, +x in the world
        assert!((f.to_world(&Vec3::new(1.0, 4.0, 0.0)) - Vec3::new(3.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn validation_rejects_outside_tag() {
        let mut s = paper_scenario();
        s.tags[0].position = [9.5, 1.0];
        assert!(matches!(s.validate(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = paper_scenario().with_seed(7);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(Scenario::from_json(&text).unwrap(), s);
    }

    #[test]
    fn metrics_examples() {
        let truth = GroundTruth {
            robot: vec![(0.0, [0.0, 0.0]), (0.4, [1.0, 0.0])],
            tags: vec![(0, [2.0, 1.0], true)],
            arc_length_m: 1.0,
        };
        let rec = |tx: f64, ty: f64| SolutionRecord {
            t: 0.4,
            robots: vec![RobotEntry { id: 0, t: 0.0, x: 0.0, y: 0.0 }, RobotEntry { id: 1, t: 0.4, x: 1.0, y: 0.0 }],
            tags: vec![TagEntry { id: 0, x: tx, y: ty, status: TagStatus::Active }],
            aoa_cost: 0.0,
            odometry_cost: 0.0,
        };
        let r = compute_metrics(&[rec(2.0, 1.0)], &truth, &[], 0.01).unwrap();
        assert_eq!(r.robot_mean_error_m, 0.0);
        assert_eq!(r.tags[0].error_m, Some(0.0));
        let r = compute_metrics(&[rec(2.3, 1.4)], &truth, &[], 0.01).unwrap();
        assert!((r.tags[0].error_m.unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(compute_metrics(&[], &truth, &[], 0.01), Err(Error::MetricAlignment(_))));
        let mut late = rec(2.0, 1.0);
        late.robots[1].t = 3.0;
        assert!(matches!(compute_metrics(&[late], &truth, &[], 0.01), Err(Error::MetricAlignment(_))));
    }

    #[test]
    fn latency_stats() {
        let l = LatencyStats::from_seconds(&[0.001, 0.003, 0.002]);
        assert_eq!(l.count, 3);
        assert!((l.median_ms - 2.0).abs() < 1e-12);
        assert!((l.max_ms - 3.0).abs() < 1e-12);
    }

    #[test]
    fn nlos_link_is_attenuated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = link_paths(1.0, 3.0, false, 1, &mut rng);
        assert_eq!(p.len(), 3);
        assert!((p[0].gain.norm() - 0.501).abs() < 1e-3);
        assert!(p[1..].iter().all(|q| q.tof_s > p[0].tof_s));
        let p = link_paths(1.0, 3.0, true, 1, &mut rng);
        assert_eq!(p.len(), 2);
        assert!(p[1].gain.norm() < 0.3);
        let p = link_paths(1.0, 3.0, true, 2, &mut rng);
        assert_eq!(p.len(), 4);
        assert_eq!(p[0].aoa_rad, p[1].aoa_rad);
        assert!(p[1..].iter().all(|q| q.tof_s > p[0].tof_s));
    }
}
