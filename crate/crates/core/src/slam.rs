//! Sliding-window bearing SLAM over robot positions and tag positions.
//!
//! Every constraint is linear in the planar positions once rotations are
//! fixed by the gyro:
//!
//! - bearing: `(R_j r) × (b_i − μ_j) = 0`, weighted by `Ω = d² Ω̄`
//! - odometry: `R₀ᵏ (μ_{k+1} − μ_k) = T + ν_k Δt`, weighted by `Λ⁻¹`
//!
//! so each pass is one weighted linear least-squares solve. The only
//! nonlinearity is the distance in `Ω`, refreshed between passes.
//!
//! By default the oldest state in the window is the gauge anchor and states
//! leaving the window are discarded. [`WindowConfig::extended`] instead folds
//! them into a linear Gaussian prior, solves for velocities alongside
//! positions and downweights bearings that disagree with the estimate.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix4, SymmetricEigen, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::csi::AoaEstimate;
use crate::error::{Error, Result};
use crate::geometry::{angle_diff, skew, wrap_pi, RobotState, Rot, TagState, TagStatus, Timestamp, Vec3};
use crate::inertial::{odometry_constraint, propagate, OdometryConstraint, OdometryEdge};

/// A 2-column block of the unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    Robot(u64),
    /// World-frame velocity of a robot state.
    Velocity(u64),
    Tag(u32),
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Block::Robot(id) => write!(f, "robot {id}"),
            Block::Velocity(id) => write!(f, "velocity {id}"),
            Block::Tag(id) => write!(f, "tag {id}"),
        }
    }
}

/// Where a block of the state vector lives during a solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    /// Unknown, starting at this column (x then y).
    Free(usize),
    /// Held at a known position.
    Fixed(Vec3),
}

impl Slot {
    pub fn value(&self, x: &DVector<f64>) -> Vec3 {
        match *self {
            Slot::Free(c) => Vec3::new(x[c], x[c + 1], 0.0),
            Slot::Fixed(p) => p,
        }
    }
}

/// Column layout of the unknowns for one solve.
#[derive(Debug, Clone, Default)]
pub struct StateLayout {
    slots: BTreeMap<Block, Slot>,
    free: Vec<Block>,
}

impl StateLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, block: Block, fixed: Option<Vec3>) -> Slot {
        let slot = match fixed {
            Some(p) => Slot::Fixed(p),
            None => {
                let c = self.num_columns();
                self.free.push(block);
                Slot::Free(c)
            }
        };
        self.slots.insert(block, slot);
        slot
    }

    pub fn add_robot(&mut self, id: u64, fixed: Option<Vec3>) -> Slot {
        self.add(Block::Robot(id), fixed)
    }

    pub fn add_tag(&mut self, id: u32, fixed: Option<Vec3>) -> Slot {
        self.add(Block::Tag(id), fixed)
    }

    pub fn slot(&self, block: Block) -> Option<Slot> {
        self.slots.get(&block).copied()
    }

    pub fn robot(&self, id: u64) -> Option<Slot> {
        self.slot(Block::Robot(id))
    }

    pub fn tag(&self, id: u32) -> Option<Slot> {
        self.slot(Block::Tag(id))
    }

    pub fn num_columns(&self) -> usize {
        2 * self.free.len()
    }

    pub fn block_at(&self, column: usize) -> Block {
        self.free[column / 2]
    }

    pub fn block_name(&self, column: usize) -> String {
        self.block_at(column).to_string()
    }
}

/// What happens to the oldest state when the window overflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DropPolicy {
    /// Drop the state and its bearings; the new oldest state anchors the gauge.
    #[default]
    Discard,
    /// Fold the state's constraints into a Gaussian prior on the blocks it
    /// touched.
    Marginalize,
}

/// Window parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Maximum robot states kept.
    pub max_states: usize,
    pub reweight_iters: usize,
    /// Distance assumed for a bearing before its tag is localized, m.
    pub initial_distance: f64,
    /// Bearing noise used to build `Ω̄`, rad.
    pub aoa_std_rad: f64,
    /// Minimum spread of world bearings before a tag is solved for, rad.
    pub min_bearing_spread_rad: f64,
    /// An active tag unseen for this long is frozen, s.
    pub freeze_after_s: f64,
    /// Maximum gap between an observation and its state, s.
    pub association_tolerance_s: f64,
    /// Floor added to the odometry standard deviation, m.
    pub odometry_std_floor: f64,
    /// Floor on the distance used to weight a bearing, m.
    #[serde(default = "default_min_distance")]
    pub min_distance_m: f64,
    #[serde(default)]
    pub drop_policy: DropPolicy,
    /// Bearings to an active tag further than this from the predicted
    /// bearing are dropped, rad.
    #[serde(default)]
    pub gate_rad: Option<f64>,
    /// Upper bound on the Cauchy scale for reweighting bearings by their
    /// angular error, rad. Each solve uses three times the median angular
    /// error at its starting point, capped by this value.
    #[serde(default)]
    pub robust_scale_rad: Option<f64>,
    /// Solve for state velocities instead of trusting the propagated ones.
    #[serde(default)]
    pub estimate_velocity: bool,
    /// Keep bearings to frozen tags, holding the tag at its frozen position.
    #[serde(default)]
    pub frozen_landmarks: bool,
    /// A new tag is only solved for once its position is determined to
    /// about this standard deviation, m: from the bearing information when
    /// bearings are not reweighted, otherwise from the Cauchy cost rising by
    /// at least two at twice this distance in every direction. Bearings to
    /// it from states that leave the window are kept until then.
    #[serde(default)]
    pub init_max_std_m: Option<f64>,
    /// Holds estimated velocities along the robot's heading with this
    /// standard deviation sideways, m/s.
    #[serde(default)]
    pub lateral_velocity_std: Option<f64>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            max_states: 10,
            reweight_iters: 3,
            initial_distance: 3.0,
            aoa_std_rad: 14f64.to_radians(),
            min_bearing_spread_rad: 5f64.to_radians(),
            freeze_after_s: 10.0,
            association_tolerance_s: 0.2,
            odometry_std_floor: 1e-4,
            min_distance_m: default_min_distance(),
            drop_policy: DropPolicy::Discard,
            gate_rad: None,
            robust_scale_rad: None,
            estimate_velocity: false,
            frozen_landmarks: false,
            init_max_std_m: None,
            lateral_velocity_std: None,
        }
    }
}

fn default_min_distance() -> f64 {
    1e-3
}

impl WindowConfig {
    /// Marginalizes dropped states, estimates velocities and holds them
    /// along the heading, reweights bearings with at most a 30° Cauchy
    /// scale, keeps frozen tags as landmarks and only starts a tag from rays
    /// crossing at 30° or more.
    pub fn extended(mut self) -> Self {
        self.drop_policy = DropPolicy::Marginalize;
        self.robust_scale_rad = Some(30f64.to_radians());
        self.estimate_velocity = true;
        self.frozen_landmarks = true;
        self.min_distance_m = 0.5;
        self.init_max_std_m = Some(0.5);
        self.min_bearing_spread_rad = 30f64.to_radians();
        self.lateral_velocity_std = Some(0.05);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_states < 3 {
            return Err(Error::InvalidArgument(format!(
                "window must hold at least 3 states, got {}",
                self.max_states
            )));
        }
        if self.reweight_iters < 1 {
            return Err(Error::InvalidArgument("reweight_iters must be at least 1".into()));
        }
        if !(self.initial_distance > 0.0) || !(self.aoa_std_rad > 0.0) || !(self.min_distance_m > 0.0) {
            return Err(Error::InvalidArgument(
                "distances and bearing noise must be positive".into(),
            ));
        }
        if matches!(self.gate_rad, Some(g) if !(g > 0.0))
            || matches!(self.robust_scale_rad, Some(g) if !(g > 0.0))
            || matches!(self.init_max_std_m, Some(g) if !(g > 0.0))
            || matches!(self.lateral_velocity_std, Some(g) if !(g > 0.0))
        {
            return Err(Error::InvalidArgument(
                "bearing gate, robust scale and initialization bound must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One bearing measurement between a window state and a tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoaConstraint {
    pub tag_id: u32,
    pub state_id: u64,
    pub t: Timestamp,
    /// Bearing in the body frame, rad.
    pub theta: f64,
    /// World orientation of the observing state.
    pub rotation: Rot,
    /// Current robot-to-tag distance estimate, m.
    pub distance: f64,
    pub aoa_std_rad: f64,
    /// Robust weight in `(0, 1]`.
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl AoaConstraint {
    /// Unit bearing `r` in the body frame.
    pub fn bearing(&self) -> Vec3 {
        Vec3::new(self.theta.cos(), self.theta.sin(), 0.0)
    }

    /// `R_j r`, the bearing in the world frame.
    pub fn world_bearing(&self) -> Vec3 {
        self.rotation.rotate(&self.bearing())
    }

    pub fn world_angle(&self) -> f64 {
        self.rotation.heading() + self.theta
    }

    /// Angle between the bearing ray and the direction from `robot` to
    /// `tag`, in `[0, π]`.
    pub fn angular_error(&self, tag: &Vec3, robot: &Vec3) -> f64 {
        let d = tag - robot;
        angle_diff(d.y.atan2(d.x), self.world_angle())
    }

    /// `Ω̄`: bearing noise pushed through the cross product for a unit-length
    /// displacement along the expected ray.
    pub fn unit_covariance(&self) -> Matrix3<f64> {
        let c = self.world_bearing();
        let dc = self
            .rotation
            .rotate(&Vec3::new(-self.theta.sin(), self.theta.cos(), 0.0));
        let j = dc.cross(&c);
        j * j.transpose() * self.aoa_std_rad.powi(2)
    }

    /// `Ω = d² Ω̄`.
    pub fn covariance(&self) -> Matrix3<f64> {
        self.unit_covariance() * self.distance.powi(2)
    }

    /// Whitening rows for the residual: `W` with `Wᵀ W = w Ω⁺` on the
    /// non-null subspace of `Ω`.
    pub fn whitening(&self) -> Vec<nalgebra::RowVector3<f64>> {
        let eig = SymmetricEigen::new(self.covariance());
        let max = eig.eigenvalues.amax();
        (0..3)
            .filter(|&i| eig.eigenvalues[i] > max * 1e-12 && eig.eigenvalues[i] > 0.0)
            .map(|i| eig.eigenvectors.column(i).transpose() * (self.weight / eig.eigenvalues[i]).sqrt())
            .collect()
    }
}

/// `(R_j r) × (b − μ)`; zero exactly when the ray and the displacement are
/// collinear, including when the tag is behind the ray.
pub fn residual_aoa(c: &AoaConstraint, tag: &Vec3, robot: &Vec3) -> Vec3 {
    c.world_bearing().cross(&(tag - robot))
}

/// Estimated positions after a solve, ordered by state id then tag id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub robots: Vec<(u64, Timestamp, Vec3)>,
    pub tags: Vec<(u32, Vec3, TagStatus)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub t: Timestamp,
    pub state: StateVector,
    /// Marginal position standard deviation per solved block, m.
    pub block_std: Vec<(String, f64)>,
    pub aoa_cost: f64,
    pub odometry_cost: f64,
    /// Cost of the marginalization prior, zero when discarding.
    pub prior_cost: f64,
    /// Total cost after each accepted pass.
    pub cost_history: Vec<f64>,
    pub solved_tags: Vec<u32>,
    /// Tags whose estimate lies behind most of their bearing rays.
    pub behind_rays: Vec<u32>,
}

/// One whitened scalar equation `Σ kᵀ·block ≈ y`.
#[derive(Debug, Clone)]
struct Row {
    terms: Vec<(Slot, [f64; 2])>,
    y: f64,
}

impl Row {
    fn residual(&self, x: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .map(|(s, k)| {
                let p = s.value(x);
                k[0] * p.x + k[1] * p.y
            })
            .sum::<f64>()
            - self.y
    }
}

fn cost(rows: &[Row], x: &DVector<f64>) -> f64 {
    rows.iter().map(|r| r.residual(x).powi(2)).sum()
}

fn aoa_rows(layout: &StateLayout, aoas: &[AoaConstraint]) -> Vec<Row> {
    let mut rows = Vec::with_capacity(aoas.len());
    for c in aoas {
        let k = skew(&c.world_bearing());
        let tag = layout.tag(c.tag_id).expect("tag in layout");
        let robot = layout.robot(c.state_id).expect("state in layout");
        for w in c.whitening() {
            let wk = w * k;
            let kb = [wk[0], wk[1]];
            rows.push(Row {
                terms: vec![(tag, kb), (robot, [-kb[0], -kb[1]])],
                y: 0.0,
            });
        }
    }
    rows
}

fn odometry_whitening(o: &OdometryConstraint, floor: f64) -> Matrix2<f64> {
    let cov = o.covariance + Matrix2::identity() * floor * floor;
    let chol = cov
        .cholesky()
        .expect("covariance plus a positive floor is positive definite");
    chol.l().try_inverse().expect("triangular factor is invertible")
}

fn odometry_rows(odometry: &[OdometryConstraint], floor: f64) -> Vec<Row> {
    let mut rows = Vec::with_capacity(2 * odometry.len());
    for o in odometry {
        let w = odometry_whitening(o, floor);
        let a = w * o.world_to_body;
        let y = w * o.rhs;
        for r in 0..2 {
            let k = [a[(r, 0)], a[(r, 1)]];
            rows.push(Row {
                terms: vec![(o.to_slot, k), (o.from_slot, [-k[0], -k[1]])],
                y: y[r],
            });
        }
    }
    rows
}

/// Rows tying positions and world-frame velocities across `edge`:
/// `μ' − μ − v Δt = R T` and `v' − v = R V`.
fn kinematic_rows(edge: &OdometryEdge, from: &RobotState, layout: &StateLayout, floor: f64) -> Result<Vec<Row>> {
    let slot = |b: Block| {
        layout
            .slot(b)
            .ok_or_else(|| Error::InvalidState(format!("{b} is outside the window")))
    };
    let (m0, m1) = (slot(Block::Robot(edge.from))?, slot(Block::Robot(edge.to))?);
    let (v0, v1) = (slot(Block::Velocity(edge.from))?, slot(Block::Velocity(edge.to))?);
    let r = from.rotation.matrix();
    let r2 = r.fixed_view::<2, 2>(0, 0).into_owned();
    let mut cov = Matrix4::zeros();
    let p = |m: &Matrix3<f64>| r2 * m.fixed_view::<2, 2>(0, 0) * r2.transpose();
    cov.fixed_view_mut::<2, 2>(0, 0).copy_from(&p(&edge.covariance));
    cov.fixed_view_mut::<2, 2>(2, 2).copy_from(&p(&edge.velocity_covariance));
    let x = p(&edge.cross_covariance);
    cov.fixed_view_mut::<2, 2>(0, 2).copy_from(&x);
    cov.fixed_view_mut::<2, 2>(2, 0).copy_from(&x.transpose());
    cov += Matrix4::identity() * floor * floor;
    let w = cov
        .cholesky()
        .ok_or_else(|| Error::EstimationFailed("kinematic covariance is not positive definite".into()))?
        .l()
        .try_inverse()
        .expect("triangular factor is invertible");
    let t = r * edge.delta_translation;
    let v = r * edge.delta_velocity;
    let y = w * Vector4::new(t.x, t.y, v.x, v.y);
    let dt = edge.duration;
    let mut rows = Vec::with_capacity(4);
    for i in 0..4 {
        let a = [w[(i, 0)], w[(i, 1)]];
        let b = [w[(i, 2)], w[(i, 3)]];
        rows.push(Row {
            terms: vec![
                (m1, a),
                (m0, [-a[0], -a[1]]),
                (v0, [-a[0] * dt - b[0], -a[1] * dt - b[1]]),
                (v1, b),
            ],
            y: y[i],
        });
    }
    Ok(rows)
}

/// Row holding a state's world-frame velocity along its heading.
fn lateral_row(s: &RobotState, layout: &StateLayout, std: f64) -> Option<Row> {
    let slot = layout.slot(Block::Velocity(s.id))?;
    let h = s.rotation.heading();
    Some(Row {
        terms: vec![(slot, [-h.sin() / std, h.cos() / std])],
        y: 0.0,
    })
}

/// Gaussian prior in information form over a set of blocks, about the
/// linearization point `origin`: cost `δᵀ H δ − 2 gᵀ δ + const` with
/// `δ = x − origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub blocks: Vec<Block>,
    pub information: DMatrix<f64>,
    pub vector: DVector<f64>,
    pub origin: DVector<f64>,
}

impl Prior {
    pub fn contains(&self, b: Block) -> bool {
        self.blocks.contains(&b)
    }

    /// Builds the prior that `rows` place on the free blocks of `layout`,
    /// linearized at `origin`, then eliminates the blocks in `drop`.
    fn from_rows(layout: &StateLayout, rows: &[Row], origin: &DVector<f64>, drop: &[Block]) -> Prior {
        let refs: Vec<&Row> = rows.iter().collect();
        let (a, y) = dense(&refs, layout.num_columns());
        let e = y - &a * origin;
        let h = a.transpose() * &a;
        let g = a.transpose() * e;
        let blocks: Vec<Block> = (0..layout.num_columns()).step_by(2).map(|c| layout.block_at(c)).collect();
        let d: Vec<usize> = (0..blocks.len()).filter(|&i| drop.contains(&blocks[i])).collect();
        let k: Vec<usize> = (0..blocks.len()).filter(|i| !d.contains(i)).collect();
        schur(&h, &g, origin, &d, &k, &blocks)
    }

    fn rows(&self, layout: &StateLayout) -> Vec<Row> {
        let eig = SymmetricEigen::new(self.information.clone());
        let max = eig.eigenvalues.amax();
        let slots: Vec<Slot> = self
            .blocks
            .iter()
            .map(|b| layout.slot(*b).expect("prior block in layout"))
            .collect();
        let mut rows = Vec::new();
        for i in 0..eig.eigenvalues.len() {
            let l = eig.eigenvalues[i];
            if !(l > max * 1e-12) {
                continue;
            }
            let u = eig.eigenvectors.column(i);
            let s = l.sqrt();
            let terms = slots
                .iter()
                .enumerate()
                .map(|(b, slot)| (*slot, [s * u[2 * b], s * u[2 * b + 1]]))
                .collect();
            rows.push(Row {
                terms,
                y: u.dot(&self.vector) / s + s * u.dot(&self.origin),
            });
        }
        rows
    }

    /// Adds a prior on one block, linearized at `at`, extending this prior
    /// if needed.
    fn add_block(prior: Option<Prior>, block: Block, h: &Matrix2<f64>, g: &Vector2<f64>, at: &Vec3) -> Prior {
        let mut p = prior.unwrap_or(Prior {
            blocks: Vec::new(),
            information: DMatrix::zeros(0, 0),
            vector: DVector::zeros(0),
            origin: DVector::zeros(0),
        });
        let i = match p.blocks.iter().position(|b| *b == block) {
            Some(i) => i,
            None => {
                let n = 2 * p.blocks.len();
                p.information = p.information.resize(n + 2, n + 2, 0.0);
                p.vector = p.vector.resize_vertically(n + 2, 0.0);
                p.origin = p.origin.resize_vertically(n + 2, 0.0);
                p.origin[n] = at.x;
                p.origin[n + 1] = at.y;
                p.blocks.push(block);
                p.blocks.len() - 1
            }
        };
        // move the new term from `at` to this prior's origin for the block
        let shift = Vector2::new(p.origin[2 * i] - at.x, p.origin[2 * i + 1] - at.y);
        let mut hv = p.information.view_mut((2 * i, 2 * i), (2, 2));
        hv += h;
        let mut gv = p.vector.rows_mut(2 * i, 2);
        gv += g - h * shift;
        p
    }

    /// Holds `block` at `value`.
    fn condition(&self, block: Block, value: &Vec3) -> Option<Prior> {
        let i = self.blocks.iter().position(|b| *b == block)?;
        let k: Vec<usize> = (0..2 * self.blocks.len()).filter(|&c| c / 2 != i).collect();
        let dx = value.x - self.origin[2 * i];
        let dy = value.y - self.origin[2 * i + 1];
        Some(Prior {
            blocks: self.blocks.iter().copied().filter(|b| *b != block).collect(),
            information: DMatrix::from_fn(k.len(), k.len(), |r, c| self.information[(k[r], k[c])]),
            vector: DVector::from_fn(k.len(), |r, _| {
                self.vector[k[r]] - self.information[(k[r], 2 * i)] * dx - self.information[(k[r], 2 * i + 1)] * dy
            }),
            origin: DVector::from_fn(k.len(), |r, _| self.origin[k[r]]),
        })
    }

    /// Eliminates `block` by Schur complement.
    fn marginalize_block(&self, block: Block) -> Option<Prior> {
        let i = self.blocks.iter().position(|b| *b == block)?;
        let keep: Vec<usize> = (0..self.blocks.len()).filter(|&j| j != i).collect();
        Some(schur(&self.information, &self.vector, &self.origin, &[i], &keep, &self.blocks))
    }
}

/// Schur complement of the block-indexed system onto `keep`.
fn schur(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    origin: &DVector<f64>,
    drop: &[usize],
    keep: &[usize],
    blocks: &[Block],
) -> Prior {
    let cols = |idx: &[usize]| -> Vec<usize> { idx.iter().flat_map(|&b| [2 * b, 2 * b + 1]).collect() };
    let (d, k) = (cols(drop), cols(keep));
    let sub = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| h[(r[i], c[j])]);
    let pick = |v: &DVector<f64>, r: &[usize]| DVector::from_fn(r.len(), |i, _| v[r[i]]);
    let hkk = sub(&k, &k);
    let (information, vector) = if d.is_empty() {
        (hkk, pick(g, &k))
    } else {
        let hdd = sub(&d, &d);
        let hkd = sub(&k, &d);
        let inv = hdd
            .clone()
            .pseudo_inverse(1e-12 * hdd.amax().max(f64::MIN_POSITIVE))
            .expect("pseudo-inverse of a symmetric matrix");
        (&hkk - &hkd * &inv * hkd.transpose(), pick(g, &k) - &hkd * &inv * pick(g, &d))
    };
    Prior {
        blocks: keep.iter().map(|&b| blocks[b]).collect(),
        information: (&information + information.transpose()) * 0.5,
        vector,
        origin: pick(origin, &k),
    }
}

fn dense(rows: &[&Row], cols: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(rows.len(), cols);
    let mut y = DVector::zeros(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let mut rhs = r.y;
        for (slot, k) in &r.terms {
            match *slot {
                Slot::Free(c) => {
                    a[(i, c)] += k[0];
                    a[(i, c + 1)] += k[1];
                }
                Slot::Fixed(p) => rhs -= k[0] * p.x + k[1] * p.y,
            }
        }
        y[i] = rhs;
    }
    (a, y)
}

const RANK_TOLERANCE: f64 = 1e-10;

const ROBUST_MEDIAN_FACTOR: f64 = 3.0;
const MIN_ROBUST_SCALE_RAD: f64 = 1e-6;

fn solve_rows(layout: &StateLayout, rows: &[&Row]) -> Result<DVector<f64>> {
    let cols = layout.num_columns();
    if cols == 0 {
        return Ok(DVector::zeros(0));
    }
    let (a, y) = dense(rows, cols);
    if a.nrows() < cols {
        let names: BTreeSet<String> = (0..cols).map(|c| layout.block_name(c)).collect();
        return Err(Error::DegenerateGeometry {
            blocks: names.into_iter().collect(),
        });
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let v_t = svd.v_t.as_ref().expect("computed");
    let mut offending = BTreeSet::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if !(s > smax * RANK_TOLERANCE) {
            let row = v_t.row(i);
            for c in 0..cols {
                if row[c].abs() > 0.1 {
                    offending.insert(layout.block_name(c));
                }
            }
        }
    }
    if !offending.is_empty() {
        return Err(Error::DegenerateGeometry {
            blocks: offending.into_iter().collect(),
        });
    }
    svd.solve(&y, smax * RANK_TOLERANCE)
        .map_err(|e| Error::EstimationFailed(e.to_string()))
}

fn marginal_std(layout: &StateLayout, rows: &[&Row]) -> Vec<(String, f64)> {
    let cols = layout.num_columns();
    let (a, _) = dense(rows, cols);
    let Some(cov) = (a.transpose() * &a).try_inverse() else {
        return Vec::new();
    };
    (0..cols)
        .step_by(2)
        .map(|c| {
            let var = cov[(c, c)] + cov[(c + 1, c + 1)];
            (layout.block_name(c), var.max(0.0).sqrt())
        })
        .collect()
}

/// The sliding window: robot states, their odometry edges, bearings, and the
/// persistent tag map.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    cfg: WindowConfig,
    states: VecDeque<RobotState>,
    edges: VecDeque<OdometryEdge>,
    aoas: Vec<AoaConstraint>,
    tags: BTreeMap<u32, TagState>,
    prior: Option<Prior>,
    /// Bearings to tags not yet solved for, from states that have left the
    /// window, with the state's last position estimate.
    pending: Vec<(AoaConstraint, Vec3)>,
    first_id: u64,
    dropped_observations: usize,
}

const MAX_PENDING_PER_TAG: usize = 200;

impl SlidingWindow {
    /// Starts a window at the gauge anchor: the first state is moved to the
    /// origin.
    pub fn new(cfg: WindowConfig, mut first: RobotState) -> Result<Self> {
        cfg.validate()?;
        first.position = Vec3::zeros();
        Ok(Self {
            cfg,
            first_id: first.id,
            states: VecDeque::from([first]),
            edges: VecDeque::new(),
            aoas: Vec::new(),
            tags: BTreeMap::new(),
            prior: None,
            pending: Vec::new(),
            dropped_observations: 0,
        })
    }

    pub fn config(&self) -> &WindowConfig {
        &self.cfg
    }

    pub fn states(&self) -> impl Iterator<Item = &RobotState> {
        self.states.iter()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn newest(&self) -> &RobotState {
        self.states.back().expect("window is never empty")
    }

    pub fn oldest(&self) -> &RobotState {
        self.states.front().expect("window is never empty")
    }

    pub fn edges(&self) -> impl Iterator<Item = &OdometryEdge> {
        self.edges.iter()
    }

    pub fn constraints(&self) -> &[AoaConstraint] {
        &self.aoas
    }

    pub fn tags(&self) -> &BTreeMap<u32, TagState> {
        &self.tags
    }

    pub fn tag(&self, id: u32) -> Option<&TagState> {
        self.tags.get(&id)
    }

    pub fn prior(&self) -> Option<&Prior> {
        self.prior.as_ref()
    }

    pub fn dropped_observations(&self) -> usize {
        self.dropped_observations
    }

    pub fn state(&self, id: u64) -> Option<&RobotState> {
        self.states.iter().find(|s| s.id == id)
    }

    fn in_prior(&self, b: Block) -> bool {
        self.prior.as_ref().is_some_and(|p| p.contains(b))
    }

    /// Appends a state reached over `edge` from the newest state. When the
    /// window overflows, the oldest state leaves the window according to the
    /// drop policy and is returned.
    pub fn add_state(&mut self, state: RobotState, edge: OdometryEdge) -> Result<Option<RobotState>> {
        let last = self.newest();
        if edge.from != last.id || edge.to != state.id {
            return Err(Error::InvalidArgument(format!(
                "edge {}→{} does not connect newest state {} to state {}",
                edge.from, edge.to, last.id, state.id
            )));
        }
        if !(state.t.seconds() > last.t.seconds()) {
            return Err(Error::InvalidArgument("state timestamps must increase".into()));
        }
        self.states.push_back(state);
        self.edges.push_back(edge);
        if self.states.len() > self.cfg.max_states {
            let old = self.states.pop_front().expect("non-empty");
            let old_edge = self.edges.pop_front().expect("non-empty");
            let (gone, kept): (Vec<_>, Vec<_>) = self.aoas.iter().partition(|c| c.state_id == old.id);
            self.aoas = kept;
            if self.cfg.drop_policy == DropPolicy::Marginalize {
                self.marginalize(&old, &old_edge, &gone)?;
            }
            return Ok(Some(old));
        }
        Ok(None)
    }

    /// Propagates the newest state across `edge` and appends the result.
    pub fn advance(&mut self, edge: OdometryEdge) -> Result<Option<RobotState>> {
        let next = propagate(self.newest(), &edge);
        self.add_state(next, edge)
    }

    fn edge_rows(&self, edge: &OdometryEdge, from: &RobotState, layout: &StateLayout) -> Result<Vec<Row>> {
        let floor = self.cfg.odometry_std_floor;
        if self.cfg.estimate_velocity {
            kinematic_rows(edge, from, layout, floor)
        } else {
            Ok(odometry_rows(&[odometry_constraint(edge, from, layout)?], floor))
        }
    }

    fn add_robot_blocks(&self, layout: &mut StateLayout, s: &RobotState, fixed: bool) {
        layout.add_robot(s.id, fixed.then_some(s.position));
        if self.cfg.estimate_velocity {
            let v = s.rotation.rotate(&s.velocity);
            layout.add(Block::Velocity(s.id), fixed.then_some(v));
        }
    }

    /// Folds the dropped state's odometry edge, its bearings to solved tags
    /// and the current prior into a new prior without that state.
    fn marginalize(&mut self, old: &RobotState, edge: &OdometryEdge, gone: &[AoaConstraint]) -> Result<()> {
        if self.cfg.init_max_std_m.is_some() {
            for c in gone {
                if self.tags[&c.tag_id].status == TagStatus::Unlocalized && !self.in_prior(Block::Tag(c.tag_id)) {
                    self.pending.push((*c, old.position));
                    let count = self.pending.iter().filter(|(p, _)| p.tag_id == c.tag_id).count();
                    if count > MAX_PENDING_PER_TAG {
                        let first = self.pending.iter().position(|(p, _)| p.tag_id == c.tag_id).expect("counted");
                        self.pending.remove(first);
                    }
                }
            }
        }
        let kept: Vec<AoaConstraint> = gone
            .iter()
            .filter(|c| match self.tags[&c.tag_id].status {
                TagStatus::Active => true,
                TagStatus::Frozen => self.cfg.frozen_landmarks,
                TagStatus::Unlocalized => self.in_prior(Block::Tag(c.tag_id)),
            })
            .copied()
            .collect();

        let mut layout = StateLayout::new();
        self.add_robot_blocks(&mut layout, old, old.id == self.first_id);
        let mut others: BTreeSet<Block> = BTreeSet::new();
        others.insert(Block::Robot(edge.to));
        if self.cfg.estimate_velocity {
            others.insert(Block::Velocity(edge.to));
        }
        for c in &kept {
            let tag = &self.tags[&c.tag_id];
            if tag.status == TagStatus::Frozen {
                layout.add_tag(c.tag_id, Some(tag.position));
            } else {
                others.insert(Block::Tag(c.tag_id));
            }
        }
        if let Some(p) = &self.prior {
            others.extend(p.blocks.iter().copied());
        }
        others.remove(&Block::Robot(old.id));
        others.remove(&Block::Velocity(old.id));
        for b in &others {
            layout.add(*b, None);
        }

        let mut rows = aoa_rows(&layout, &kept);
        rows.extend(self.edge_rows(edge, old, &layout)?);
        if let Some(std) = self.cfg.lateral_velocity_std {
            rows.extend(lateral_row(old, &layout, std));
        }
        if let Some(p) = &self.prior {
            rows.extend(p.rows(&layout));
        }
        let mut origin = DVector::zeros(layout.num_columns());
        for c in (0..layout.num_columns()).step_by(2) {
            let p = self.estimate(layout.block_at(c), old);
            origin[c] = p.x;
            origin[c + 1] = p.y;
        }
        let drop = [Block::Robot(old.id), Block::Velocity(old.id)];
        self.prior = Some(Prior::from_rows(&layout, &rows, &origin, &drop));
        Ok(())
    }

    /// Current estimate of a block, looking at `extra` for a state that has
    /// just left the window.
    fn estimate(&self, b: Block, extra: &RobotState) -> Vec3 {
        let state = |id: u64| if id == extra.id { extra } else { self.state(id).expect("window state") };
        match b {
            Block::Robot(id) => state(id).position,
            Block::Velocity(id) => {
                let s = state(id);
                s.rotation.rotate(&s.velocity)
            }
            Block::Tag(id) => self.tags[&id].position,
        }
    }

    /// Attaches a bearing to the window state nearest in time. Returns the
    /// state id it was associated with.
    pub fn add_aoa(&mut self, obs: &AoaEstimate) -> Result<u64> {
        let nearest = self
            .states
            .iter()
            .min_by(|a, b| {
                (a.t.seconds() - obs.t.seconds())
                    .abs()
                    .total_cmp(&(b.t.seconds() - obs.t.seconds()).abs())
            })
            .copied()
            .expect("window is never empty");
        let gap = (nearest.t.seconds() - obs.t.seconds()).abs();
        if gap > self.cfg.association_tolerance_s {
            self.dropped_observations += 1;
            return Err(Error::ObservationDropped(format!(
                "no window state within {} s of t = {} (nearest is {} s away)",
                self.cfg.association_tolerance_s,
                obs.t.seconds(),
                gap
            )));
        }
        if !self.cfg.frozen_landmarks
            && matches!(self.tags.get(&obs.tag_id), Some(t) if t.status == TagStatus::Frozen)
        {
            self.dropped_observations += 1;
            return Err(Error::ObservationDropped(format!("tag {} is frozen", obs.tag_id)));
        }

        let mut c = AoaConstraint {
            tag_id: obs.tag_id,
            state_id: nearest.id,
            t: obs.t,
            theta: obs.theta,
            rotation: nearest.rotation,
            distance: self.cfg.initial_distance,
            aoa_std_rad: self.cfg.aoa_std_rad,
            weight: 1.0,
        };
        match self.tags.get_mut(&obs.tag_id) {
            Some(tag) => {
                if obs.t.seconds() > tag.last_observed.seconds() {
                    tag.last_observed = obs.t;
                }
                if tag.status != TagStatus::Unlocalized {
                    let err = c.angular_error(&tag.position, &nearest.position);
                    if let Some(gate) = self.cfg.gate_rad.filter(|g| err > *g) {
                        self.dropped_observations += 1;
                        return Err(Error::ObservationDropped(format!(
                            "bearing to tag {} is {:.1}° from its prediction (gate {:.1}°)",
                            obs.tag_id,
                            err.to_degrees(),
                            gate.to_degrees()
                        )));
                    }
                    c.distance = (tag.position - nearest.position).norm().max(self.cfg.min_distance_m);
                }
            }
            None => {
                let guess = nearest.position + c.world_bearing() * self.cfg.initial_distance;
                self.tags
                    .insert(obs.tag_id, TagState::new(obs.tag_id, guess, obs.t));
            }
        }
        self.aoas.push(c);
        Ok(nearest.id)
    }

    /// Freezes active tags that have not been observed for `freeze_after_s`.
    fn freeze_stale_tags(&mut self) {
        let now = self.newest().t.seconds();
        let mut frozen = Vec::new();
        for tag in self.tags.values_mut() {
            if tag.status == TagStatus::Active
                && now - tag.last_observed.seconds() > self.cfg.freeze_after_s
            {
                tag.freeze();
                frozen.push(tag.tag_id);
            }
        }
        for id in frozen {
            let block = Block::Tag(id);
            let reduced = if self.cfg.frozen_landmarks {
                let at = self.tags[&id].position;
                self.prior.as_ref().and_then(|p| p.condition(block, &at))
            } else {
                self.aoas.retain(|c| c.tag_id != id);
                self.prior.as_ref().and_then(|p| p.marginalize_block(block))
            };
            if let Some(p) = reduced {
                self.prior = (!p.blocks.is_empty()).then_some(p);
            }
        }
    }

    /// Tags that can be solved for, with a starting position for those that
    /// need one, and the tags that cannot.
    fn solvable_tags(&self) -> (BTreeMap<u32, Option<Vec3>>, Vec<u32>) {
        let mut by_tag: BTreeMap<u32, Vec<(AoaConstraint, Vec3)>> = BTreeMap::new();
        for (c, robot) in &self.pending {
            by_tag.entry(c.tag_id).or_default().push((*c, *robot));
        }
        for c in &self.aoas {
            let robot = self.state(c.state_id).expect("window state").position;
            by_tag.entry(c.tag_id).or_default().push((*c, robot));
        }
        let mut ok: BTreeMap<u32, Option<Vec3>> = BTreeMap::new();
        if let Some(p) = &self.prior {
            for b in &p.blocks {
                if let Block::Tag(id) = b {
                    ok.insert(*id, None);
                }
            }
        }
        let mut lacking = Vec::new();
        for (id, obs) in by_tag {
            let tag = &self.tags[&id];
            if tag.status == TagStatus::Frozen || ok.contains_key(&id) {
                continue;
            }
            let spread = obs
                .iter()
                .enumerate()
                .flat_map(|(i, (a, _))| obs[i + 1..].iter().map(move |(b, _)| angle_diff(a.world_angle(), b.world_angle())))
                .fold(0.0, f64::max);
            if obs.len() < 2 || spread < self.cfg.min_bearing_spread_rad {
                lacking.push(id);
                continue;
            }
            let start = match self.cfg.robust_scale_rad {
                Some(scale) if tag.status != TagStatus::Active => match self.consensus(&obs, scale) {
                    Some(p) => Some(refine_point(&obs, p, scale)),
                    None => {
                        lacking.push(id);
                        continue;
                    }
                },
                _ => None,
            };
            if let Some(bound) = self.cfg.init_max_std_m.filter(|_| tag.status == TagStatus::Unlocalized) {
                let at = start.unwrap_or(tag.position);
                let settled = match self.cfg.robust_scale_rad {
                    Some(scale) => likelihood_settled(&obs, &at, scale, 2.0 * bound),
                    _ => self.triangulation_std(&obs, &at) < bound,
                };
                if !settled {
                    lacking.push(id);
                    continue;
                }
            }
            ok.insert(id, start);
        }
        (ok, lacking)
    }

    /// Worst-direction standard deviation of a tag at `at` given bearings
    /// from known positions, with robust weights at the configured scale.
    /// Distances below the initial distance are not trusted to sharpen it.
    fn triangulation_std(&self, obs: &[(AoaConstraint, Vec3)], at: &Vec3) -> f64 {
        let mut info = Matrix2::zeros();
        for (c, robot) in obs {
            let d = (at - robot).norm().max(self.cfg.initial_distance);
            let w = match self.cfg.robust_scale_rad {
                Some(s) => 1.0 / (1.0 + (c.angular_error(at, robot) / s).powi(2)),
                None => 1.0,
            };
            let a = c.world_angle();
            let n = Vector2::new(-a.sin(), a.cos());
            info += n * n.transpose() * (w / (c.aoa_std_rad * d).powi(2));
        }
        let eig = info.symmetric_eigenvalues();
        let min = eig.min();
        if min > 0.0 {
            min.recip().sqrt()
        } else {
            f64::INFINITY
        }
    }

    /// The forward intersection of two bearing rays with the lowest Cauchy
    /// cost among those that at least half of the bearings (and at least
    /// three, or two when only two exist) agree with, seen from positions
    /// spanning the minimum spread.
    fn consensus(&self, obs: &[(AoaConstraint, Vec3)], scale: f64) -> Option<Vec3> {
        let near = self.cfg.min_distance_m;
        let spread = self.cfg.min_bearing_spread_rad;
        let needed = obs.len().min(3).max(obs.len().div_ceil(2));
        let mut best: Option<(f64, Vec3)> = None;
        for (i, (a, pa)) in obs.iter().enumerate() {
            for (b, pb) in &obs[i + 1..] {
                if angle_diff(a.world_angle(), b.world_angle()).sin() < spread.sin() {
                    continue;
                }
                let Some(x) = intersect_rays(pa, a.world_angle(), pb, b.world_angle()) else {
                    continue;
                };
                if a.world_bearing().dot(&(x - pa)) < near || b.world_bearing().dot(&(x - pb)) < near {
                    continue;
                }
                let errs: Vec<f64> = obs.iter().map(|(c, p)| c.angular_error(&x, p)).collect();
                if errs.iter().filter(|e| **e < scale).count() < needed {
                    continue;
                }
                let seen_from = obs
                    .iter()
                    .zip(&errs)
                    .filter(|((_, p), e)| **e < scale && (x - *p).norm() > near)
                    .map(|((_, p), _)| p);
                if parallax(&x, seen_from) < spread {
                    continue;
                }
                let cost: f64 = errs.iter().map(|e| (e / scale).powi(2).ln_1p()).sum();
                if best.as_ref().map_or(true, |(c, _)| cost < *c) {
                    best = Some((cost, x));
                }
            }
        }
        best.map(|(_, x)| x)
    }

    fn layout(&self, tags: &BTreeMap<u32, Option<Vec3>>) -> StateLayout {
        let mut layout = StateLayout::new();
        let anchor = self.oldest().id;
        let marginalizing = self.cfg.drop_policy == DropPolicy::Marginalize;
        for s in &self.states {
            let fixed = if marginalizing { s.id == self.first_id } else { s.id == anchor };
            self.add_robot_blocks(&mut layout, s, fixed);
        }
        for id in tags.keys() {
            layout.add_tag(*id, None);
        }
        for c in &self.aoas {
            let tag = &self.tags[&c.tag_id];
            if tag.status == TagStatus::Frozen && layout.tag(c.tag_id).is_none() {
                layout.add_tag(c.tag_id, Some(tag.position));
            }
        }
        for (c, robot) in &self.pending {
            if tags.contains_key(&c.tag_id) {
                layout.add_robot(c.state_id, Some(*robot));
            }
        }
        layout
    }

    /// Solves the window, refreshing the distance and robust weights between
    /// passes. On failure, all estimates are left untouched.
    pub fn solve(&mut self) -> Result<Solution> {
        self.freeze_stale_tags();
        let (solvable, lacking) = self.solvable_tags();
        if self.states.len() < 2 {
            let mut blocks: Vec<String> = lacking.iter().map(|id| format!("tag {id}")).collect();
            blocks.push(format!("robot {}", self.newest().id));
            return Err(Error::DegenerateGeometry { blocks });
        }

        let layout = self.layout(&solvable);
        let mut fixed_rows = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            fixed_rows.extend(self.edge_rows(e, &self.states[i], &layout)?);
        }
        if let Some(std) = self.cfg.lateral_velocity_std {
            fixed_rows.extend(self.states.iter().filter_map(|s| lateral_row(s, &layout, std)));
        }
        let n_odometry = fixed_rows.len();
        if let Some(p) = &self.prior {
            fixed_rows.extend(p.rows(&layout));
        }

        let mut aoas: Vec<AoaConstraint> = self
            .pending
            .iter()
            .map(|(c, _)| c)
            .chain(&self.aoas)
            .filter(|c| layout.tag(c.tag_id).is_some())
            .copied()
            .collect();
        let start_tag = |id: u32| solvable.get(&id).copied().flatten().unwrap_or(self.tags[&id].position);
        let start_robot = |id: u64| match layout.robot(id).expect("robot in layout") {
            Slot::Fixed(p) => p,
            Slot::Free(_) => self.state(id).expect("window state").position,
        };
        // the configured scale caps a scale matched to the current residuals
        let robust = self.cfg.robust_scale_rad.map(|cap| {
            let errs: Vec<f64> = aoas
                .iter()
                .map(|c| c.angular_error(&start_tag(c.tag_id), &start_robot(c.state_id)))
                .collect();
            let med = crate::geometry::median(&errs).unwrap_or(cap);
            (ROBUST_MEDIAN_FACTOR * med).clamp(MIN_ROBUST_SCALE_RAD, cap)
        });
        let min_distance = self.cfg.min_distance_m;
        let refresh = |aoas: &mut [AoaConstraint], tag: &dyn Fn(u32) -> Vec3, robot: &dyn Fn(u64) -> Vec3| {
            for c in aoas.iter_mut() {
                let (b, m) = (tag(c.tag_id), robot(c.state_id));
                c.distance = (b - m).norm().max(min_distance);
                if let Some(s) = robust {
                    c.weight = 1.0 / (1.0 + (c.angular_error(&b, &m) / s).powi(2));
                }
            }
        };
        let refresh_at = |aoas: &mut [AoaConstraint], x: &DVector<f64>| {
            refresh(
                aoas,
                &|id| layout.tag(id).expect("solved tag").value(x),
                &|id| layout.robot(id).expect("window state").value(x),
            )
        };
        if robust.is_some() {
            refresh(&mut aoas, &start_tag, &start_robot);
        }

        let total = |aoas: &[AoaConstraint], x: &DVector<f64>| {
            cost(&aoa_rows(&layout, aoas), x) + cost(&fixed_rows, x)
        };
        let solve_with = |aoas: &[AoaConstraint]| -> Result<DVector<f64>> {
            let a = aoa_rows(&layout, aoas);
            let refs: Vec<&Row> = a.iter().chain(fixed_rows.iter()).collect();
            solve_rows(&layout, &refs)
        };

        let mut x = solve_with(&aoas)?;
        refresh_at(&mut aoas, &x);
        let mut current = total(&aoas, &x);
        let mut history = vec![current];

        for _ in 1..self.cfg.reweight_iters {
            let candidate = solve_with(&aoas)?;
            // accept the reweighted solution, or the best point on the segment
            // towards it, only if the self-consistent cost does not rise
            let mut accepted = None;
            let mut step = 1.0;
            for _ in 0..6 {
                let trial = &x + (&candidate - &x) * step;
                let mut trial_aoas = aoas.clone();
                refresh_at(&mut trial_aoas, &trial);
                let c = total(&trial_aoas, &trial);
                if c <= current {
                    accepted = Some((trial, trial_aoas, c));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((trial, trial_aoas, c)) => {
                    let converged = (current - c).abs() <= 1e-12 * (1.0 + c);
                    x = trial;
                    aoas = trial_aoas;
                    current = c;
                    history.push(current);
                    if converged {
                        break;
                    }
                }
                None => break,
            }
        }

        for s in self.states.iter_mut() {
            if let Some(slot @ Slot::Free(_)) = layout.robot(s.id) {
                s.position = slot.value(&x);
            }
            if let Some(slot @ Slot::Free(_)) = layout.slot(Block::Velocity(s.id)) {
                s.velocity = s.rotation.inverse().rotate(&slot.value(&x));
            }
        }
        for id in solvable.keys() {
            let p = layout.tag(*id).expect("in layout").value(&x);
            let tag = self.tags.get_mut(id).expect("known tag");
            tag.activate();
            tag.set_position(p);
        }
        for c in self.aoas.iter_mut() {
            if let Some(u) = aoas
                .iter()
                .find(|u| u.tag_id == c.tag_id && u.state_id == c.state_id && u.t == c.t)
            {
                c.distance = u.distance;
                c.weight = u.weight;
            }
        }

        let final_aoa = aoa_rows(&layout, &aoas);
        let pending: Vec<AoaConstraint> = aoas
            .iter()
            .filter(|c| self.state(c.state_id).is_none())
            .copied()
            .collect();
        if !pending.is_empty() {
            self.absorb_pending(&layout, &pending);
        }
        let refs: Vec<&Row> = final_aoa.iter().chain(fixed_rows.iter()).collect();
        let block_std = marginal_std(&layout, &refs);
        let behind_rays = solvable
            .keys()
            .copied()
            .filter(|id| {
                let tag = self.tags[id].position;
                let (behind, total) = aoas.iter().filter(|c| c.tag_id == *id).fold((0, 0), |(b, n), c| {
                    let robot = layout.robot(c.state_id).expect("robot in layout").value(&x);
                    let ahead = c.world_bearing().dot(&(tag - robot)) >= 0.0;
                    (b + usize::from(!ahead), n + 1)
                });
                2 * behind > total
            })
            .collect();

        Ok(Solution {
            t: self.newest().t,
            state: self.snapshot(),
            block_std,
            aoa_cost: cost(&final_aoa, &x),
            odometry_cost: cost(&fixed_rows[..n_odometry], &x),
            prior_cost: cost(&fixed_rows[n_odometry..], &x),
            cost_history: history,
            solved_tags: solvable.into_keys().collect(),
            behind_rays,
        })
    }

    /// Moves bearings from states outside the window into the prior on
    /// their tags, with the robot held at its last estimate.
    fn absorb_pending(&mut self, layout: &StateLayout, used: &[AoaConstraint]) {
        for c in used {
            let Some(Slot::Fixed(robot)) = layout.robot(c.state_id) else {
                continue;
            };
            let mut local = StateLayout::new();
            local.add_tag(c.tag_id, None);
            local.add_robot(c.state_id, Some(robot));
            let rows = aoa_rows(&local, std::slice::from_ref(c));
            let at = self.tags[&c.tag_id].position;
            let p = Prior::from_rows(&local, &rows, &DVector::from_vec(vec![at.x, at.y]), &[]);
            let h = Matrix2::new(p.information[(0, 0)], p.information[(0, 1)], p.information[(1, 0)], p.information[(1, 1)]);
            let g = Vector2::new(p.vector[0], p.vector[1]);
            self.prior = Some(Prior::add_block(self.prior.take(), Block::Tag(c.tag_id), &h, &g, &at));
        }
        let done: BTreeSet<u32> = used.iter().map(|c| c.tag_id).collect();
        self.pending.retain(|(c, _)| !done.contains(&c.tag_id));
    }

    pub fn snapshot(&self) -> StateVector {
        StateVector {
            robots: self.states.iter().map(|s| (s.id, s.t, s.position)).collect(),
            tags: self
                .tags
                .values()
                .map(|t| (t.tag_id, t.position, t.status))
                .collect(),
        }
    }
}

/// Robust bearing-only refinement of a point seen from fixed positions,
/// Gauss-Newton on the angle residuals with Cauchy weights at `scale`.
fn refine_point(obs: &[(AoaConstraint, Vec3)], start: Vec3, scale: f64) -> Vec3 {
    let mut x = start;
    for _ in 0..50 {
        let mut h = Matrix2::zeros();
        let mut g = Vector2::zeros();
        for (c, p) in obs {
            let d = x - p;
            let r2 = d.x * d.x + d.y * d.y;
            if r2 < 1e-12 {
                continue;
            }
            let r = wrap_pi(d.y.atan2(d.x) - c.world_angle());
            let j = Vector2::new(-d.y, d.x) / r2;
            let w = 1.0 / (1.0 + (r / scale).powi(2));
            h += j * j.transpose() * w;
            g += j * (w * r);
        }
        let Some(step) = h.try_inverse().map(|hi| -(hi * g)) else {
            break;
        };
        x.x += step.x;
        x.y += step.y;
        if step.norm() < 1e-9 {
            break;
        }
    }
    if x.iter().all(|v| v.is_finite()) {
        x
    } else {
        start
    }
}

fn cauchy_cost(obs: &[(AoaConstraint, Vec3)], x: &Vec3, scale: f64) -> f64 {
    obs.iter()
        .map(|(c, p)| (c.angular_error(x, p) / scale).powi(2).ln_1p())
        .sum()
}

/// Whether every point `radius` away from `at` is clearly less likely under
/// a Cauchy bearing model than `at` itself.
fn likelihood_settled(obs: &[(AoaConstraint, Vec3)], at: &Vec3, scale: f64, radius: f64) -> bool {
    const DIRECTIONS: usize = 16;
    const MIN_COST_GAP: f64 = 2.0;
    let base = cauchy_cost(obs, at, scale);
    (0..DIRECTIONS).all(|k| {
        let a = 2.0 * PI * k as f64 / DIRECTIONS as f64;
        let x = at + Vec3::new(a.cos(), a.sin(), 0.0) * radius;
        cauchy_cost(obs, &x, scale) - base >= MIN_COST_GAP
    })
}

/// Smallest arc (modulo π) that holds the directions from `at` to every
/// point, i.e. how far from collinear with `at` the points are.
fn parallax<'a>(at: &Vec3, points: impl Iterator<Item = &'a Vec3>) -> f64 {
    let mut dirs: Vec<f64> = points
        .map(|p| (p.y - at.y).atan2(p.x - at.x).rem_euclid(PI))
        .collect();
    if dirs.len() < 2 {
        return 0.0;
    }
    dirs.sort_by(f64::total_cmp);
    let wrap = dirs[0] + PI - dirs[dirs.len() - 1];
    let gap = dirs.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max);
    PI - gap
}

/// Intersection of two planar bearing rays, if they are not parallel.
pub fn intersect_rays(p1: &Vec3, angle1: f64, p2: &Vec3, angle2: f64) -> Option<Vec3> {
    let d1 = Vector2::new(angle1.cos(), angle1.sin());
    let d2 = Vector2::new(angle2.cos(), angle2.sin());
    let m = Matrix2::new(d1.x, -d2.x, d1.y, -d2.y);
    let rhs = Vector2::new(p2.x - p1.x, p2.y - p1.y);
    let st = m.lu().solve(&rhs)?;
    Some(Vec3::new(p1.x + st[0] * d1.x, p1.y + st[0] * d1.y, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inertial::{ImuNoise, ImuSample, Preintegrator};
    use crate::geometry::gravity;

    fn edge_for(v_body: Vec3, duration: f64, from: u64, to: u64) -> OdometryEdge {
        // zero acceleration edge; translation comes from the state velocity
        let n = (duration * 100.0).round() as usize;
        let samples: Vec<ImuSample> = (0..n)
            .map(|i| ImuSample {
                t: Timestamp(i as f64 * 0.01),
                accel: gravity(),
                gyro: Vec3::zeros(),
            })
            .collect();
        let _ = v_body;
        Preintegrator::new(100.0, ImuNoise::none())
            .integrate(&samples, Rot::identity())
            .unwrap()
            .between(from, to)
    }

    fn obs(tag: u32, t: f64, theta: f64) -> AoaEstimate {
        AoaEstimate {
            tag_id: tag,
            t: Timestamp(t),
            theta,
            tau: 0.0,
            confidence: 1.0,
        }
    }

    fn moving_window(cfg: WindowConfig) -> SlidingWindow {
        let first = RobotState::new(0, Timestamp(0.0), Vec3::zeros(), Vec3::x(), Rot::identity());
        SlidingWindow::new(cfg, first).unwrap()
    }

    #[test]
    fn residual_examples() {
        let c = AoaConstraint {
            tag_id: 0,
            state_id: 0,
            t: Timestamp(0.0),
            theta: 0.0,
            rotation: Rot::identity(),
            distance: 1.0,
            aoa_std_rad: 0.1,
            weight: 1.0,
        };
        assert_eq!(residual_aoa(&c, &Vec3::new(2.0, 0.0, 0.0), &Vec3::zeros()), Vec3::zeros());
        assert_eq!(residual_aoa(&c, &Vec3::new(1.0, 1.0, 0.0), &Vec3::zeros()), Vec3::z());
        assert_eq!(residual_aoa(&c, &Vec3::new(-1.0, 0.0, 0.0), &Vec3::zeros()), Vec3::zeros());
    }

    #[test]
    fn bearing_covariance_is_radial_null_and_scales_with_distance() {
        let mut c = AoaConstraint {
            tag_id: 0,
            state_id: 0,
            t: Timestamp(0.0),
            theta: 0.4,
            rotation: Rot::from_heading(1.0),
            distance: 2.0,
            aoa_std_rad: 0.1,
            weight: 1.0,
        };
        let omega = c.covariance();
        assert!((omega * c.world_bearing()).norm() < 1e-15);
        assert!((omega - c.unit_covariance() * 4.0).norm() < 1e-15);
        assert_eq!(c.whitening().len(), 1);
        c.distance = 4.0;
        let w = c.whitening()[0];
        assert!(((w * Vec3::z())[0].abs() - 1.0 / 0.4).abs() < 1e-12);
    }

    #[test]
    fn window_fills_then_drops_oldest() {
        let mut cfg = WindowConfig::default();
        cfg.max_states = 4;
        let mut w = moving_window(cfg);
        for k in 1..4 {
            assert!(w.advance(edge_for(Vec3::x(), 0.4, k - 1, k)).unwrap().is_none());
        }
        assert_eq!(w.num_states(), 4);
        w.add_aoa(&obs(7, 0.0, 1.0)).unwrap();
        w.add_aoa(&obs(7, 0.4, 1.1)).unwrap();
        let before = w.tag(7).copied().unwrap();
        let dropped = w.advance(edge_for(Vec3::x(), 0.4, 3, 4)).unwrap().unwrap();
        assert_eq!(dropped.id, 0);
        assert_eq!(w.num_states(), 4);
        assert_eq!(w.oldest().id, 1);
        assert!(w.constraints().iter().all(|c| c.state_id != 0));
        assert_eq!(w.constraints().len(), 1);
        assert_eq!(w.tag(7).copied().unwrap(), before);
    }

    #[test]
    fn drop_keeps_unconnected_blocks() {
        let mut cfg = WindowConfig::default();
        cfg.max_states = 3;
        let mut w = moving_window(cfg);
        w.advance(edge_for(Vec3::x(), 0.4, 0, 1)).unwrap();
        w.advance(edge_for(Vec3::x(), 0.4, 1, 2)).unwrap();
        w.add_aoa(&obs(1, 0.4, 1.0)).unwrap();
        w.add_aoa(&obs(1, 0.8, 1.3)).unwrap();
        let kept: Vec<RobotState> = w.states().skip(1).copied().collect();
        let tag = *w.tag(1).unwrap();
        w.advance(edge_for(Vec3::x(), 0.4, 2, 3)).unwrap();
        let after: Vec<RobotState> = w.states().take(2).copied().collect();
        assert_eq!(kept, after);
        assert_eq!(*w.tag(1).unwrap(), tag);
    }

    #[test]
    fn mismatched_edge_rejected() {
        let mut w = moving_window(WindowConfig::default());
        let e = edge_for(Vec3::x(), 0.4, 5, 6);
        let s = propagate(w.newest(), &e);
        assert!(matches!(w.add_state(s, e), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn first_state_is_origin() {
        let first = RobotState::new(0, Timestamp(0.0), Vec3::new(3.0, 4.0, 0.0), Vec3::zeros(), Rot::identity());
        let w = SlidingWindow::new(WindowConfig::default(), first).unwrap();
        assert_eq!(w.oldest().position, Vec3::zeros());
    }

    #[test]
    fn new_tag_allocated_along_ray() {
        let mut w = moving_window(WindowConfig::default());
        w.add_aoa(&obs(5, 0.0, std::f64::consts::FRAC_PI_2)).unwrap();
        let t = w.tag(5).unwrap();
        assert_eq!(t.status, TagStatus::Unlocalized);
        assert!((t.position - Vec3::new(0.0, 3.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn association_picks_nearest_state() {
        let mut w = moving_window(WindowConfig::default());
        w.advance(edge_for(Vec3::x(), 0.4, 0, 1)).unwrap();
        w.advance(edge_for(Vec3::x(), 0.4, 1, 2)).unwrap();
        // 0.55 is nearer 0.4 than 0.8
        assert_eq!(w.add_aoa(&obs(1, 0.55, 0.3)).unwrap(), 1);
        assert_eq!(w.add_aoa(&obs(1, 0.65, 0.3)).unwrap(), 2);
        assert!(matches!(w.add_aoa(&obs(1, 5.0, 0.3)), Err(Error::ObservationDropped(_))));
        assert_eq!(w.dropped_observations(), 1);
    }

    #[test]
    fn single_state_is_degenerate() {
        let mut w = moving_window(WindowConfig::default());
        w.add_aoa(&obs(1, 0.0, 0.3)).unwrap();
        assert!(matches!(w.solve(), Err(Error::DegenerateGeometry { .. })));
    }

    #[test]
    fn config_validation() {
        let mut cfg = WindowConfig::default();
        cfg.max_states = 2;
        assert!(cfg.validate().is_err());
        cfg.max_states = 3;
        cfg.reweight_iters = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ray_intersection() {
        let p = intersect_rays(&Vec3::zeros(), 0.5f64.atan(), &Vec3::x(), std::f64::consts::FRAC_PI_4).unwrap();
        assert!((p - Vec3::new(2.0, 1.0, 0.0)).norm() < 1e-12);
        assert!(intersect_rays(&Vec3::zeros(), 0.0, &Vec3::y(), 0.0).is_none());
    }

    /// States moving along x at 1 m/s every 0.4 s, with exact bearings to
    /// every tag from every state, solved after each state.
    fn track(cfg: WindowConfig, tags: &[Vec3], states: u64) -> (SlidingWindow, Vec<Solution>) {
        let mut w = moving_window(cfg);
        let mut solutions = Vec::new();
        for k in 0..states {
            if k > 0 {
                w.advance(edge_for(Vec3::x(), 0.4, k - 1, k)).unwrap();
            }
            let robot = Vec3::new(0.4 * k as f64, 0.0, 0.0);
            for (id, b) in tags.iter().enumerate() {
                let theta = (b.y - robot.y).atan2(b.x - robot.x).rem_euclid(std::f64::consts::TAU);
                w.add_aoa(&obs(id as u32, 0.4 * k as f64, theta)).unwrap();
            }
            if k > 0 {
                if let Ok(s) = w.solve() {
                    solutions.push(s);
                }
            }
        }
        (w, solutions)
    }

    fn seen(obs: &[(f64, f64)], at: &Vec3) -> Vec<(AoaConstraint, Vec3)> {
        obs.iter()
            .map(|&(x, y)| {
                let p = Vec3::new(x, y, 0.0);
                let c = AoaConstraint {
                    tag_id: 0,
                    state_id: 0,
                    t: Timestamp(0.0),
                    theta: (at.y - y).atan2(at.x - x),
                    rotation: Rot::identity(),
                    distance: 1.0,
                    aoa_std_rad: 0.1,
                    weight: 1.0,
                };
                (c, p)
            })
            .collect()
    }

    #[test]
    fn exact_bearings_locate_tags() {
        let tags = [Vec3::new(3.0, 1.0, 0.0), Vec3::new(4.5, -1.0, 0.0)];
        for cfg in [WindowConfig::default(), WindowConfig::default().extended()] {
            let (w, solutions) = track(cfg, &tags, 20);
            assert!(!solutions.is_empty());
            for (id, b) in tags.iter().enumerate() {
                let t = w.tag(id as u32).unwrap();
                assert_eq!(t.status, TagStatus::Active);
                assert!((t.position - b).norm() < 1e-6, "{:?} vs {b:?}", t.position);
            }
            for s in w.states() {
                assert!((s.position - Vec3::new(0.4 * s.id as f64, 0.0, 0.0)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn anchor_stays_at_origin() {
        let (w, _) = track(WindowConfig::default().extended(), &[Vec3::new(1.0, 2.0, 0.0)], 5);
        assert_eq!(w.oldest().position, Vec3::zeros());
    }

    #[test]
    fn cost_history_never_increases() {
        let mut cfg = WindowConfig::default().extended();
        cfg.max_states = 20;
        let mut w = moving_window(cfg);
        for k in 1..20u64 {
            w.advance(edge_for(Vec3::x(), 0.4, k - 1, k)).unwrap();
        }
        let tag = Vec3::new(3.0, 1.0, 0.0);
        for k in 0..20u64 {
            let x = 0.4 * k as f64;
            let wild = if k == 3 { 2.0 } else { 0.0 };
            w.add_aoa(&obs(0, x, tag.y.atan2(tag.x - x) + wild)).unwrap();
        }
        let s = w.solve().unwrap();
        assert!(s.cost_history.windows(2).all(|c| c[1] <= c[0]));
    }

    #[test]
    fn robust_weights_suppress_a_wild_bearing() {
        let tag = Vec3::new(3.0, 1.0, 0.0);
        let run = |mut cfg: WindowConfig| {
            cfg.max_states = 20;
            let mut w = moving_window(cfg);
            for k in 1..20u64 {
                w.advance(edge_for(Vec3::x(), 0.4, k - 1, k)).unwrap();
            }
            for k in 0..20u64 {
                let x = 0.4 * k as f64;
                let wild = if k == 5 { 1.5 } else { 0.0 };
                w.add_aoa(&obs(0, x, tag.y.atan2(tag.x - x) + wild)).unwrap();
            }
            w.solve().unwrap();
            w
        };
        let plain = run(WindowConfig::default());
        let robust = run(WindowConfig::default().extended());
        let e_plain = (plain.tag(0).unwrap().position - tag).norm();
        let e_robust = (robust.tag(0).unwrap().position - tag).norm();
        assert!(e_robust < 0.05, "{e_robust}");
        assert!(e_robust < e_plain);
        let wild = robust.constraints().iter().find(|c| c.state_id == 5).unwrap();
        assert!(wild.weight < 0.1, "{}", wild.weight);
    }

    #[test]
    fn marginalized_states_keep_the_solution_exact() {
        let mut cfg = WindowConfig::default().extended();
        cfg.max_states = 4;
        let tag = Vec3::new(3.0, 1.0, 0.0);
        let (w, _) = track(cfg, &[tag], 25);
        assert_eq!(w.num_states(), 4);
        let prior = w.prior().unwrap();
        assert!(prior.contains(Block::Tag(0)));
        assert!(prior.contains(Block::Robot(w.oldest().id)));
        assert!((w.tag(0).unwrap().position - tag).norm() < 1e-6);
        for s in w.states() {
            assert!((s.position - Vec3::new(0.4 * s.id as f64, 0.0, 0.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn frozen_tags_are_landmarks_only_when_extended() {
        let tag = Vec3::new(3.0, 1.0, 0.0);
        for cfg in [WindowConfig::default(), WindowConfig::default().extended()] {
            let mut cfg = cfg;
            cfg.freeze_after_s = 0.5;
            let (mut w, _) = track(cfg, &[tag], 20);
            let k = w.newest().id;
            for j in k + 1..k + 4 {
                w.advance(edge_for(Vec3::x(), 0.4, j - 1, j)).unwrap();
            }
            w.solve().unwrap();
            let frozen = *w.tag(0).unwrap();
            assert_eq!(frozen.status, TagStatus::Frozen);
            let t = w.newest().t.seconds();
            let r = w.add_aoa(&obs(0, t, 0.3));
            assert_eq!(r.is_ok(), cfg.frozen_landmarks);
            let _ = w.solve();
            let after = w.tag(0).unwrap();
            assert_eq!(after.position, frozen.position);
            assert_eq!(after.status, TagStatus::Frozen);
        }
    }

    #[test]
    fn delayed_start_waits_for_crossing_rays() {
        let mut w = moving_window(WindowConfig::default().extended());
        w.advance(edge_for(Vec3::x(), 0.4, 0, 1)).unwrap();
        // a tag far ahead: the two rays cross at a sliver of an angle
        w.add_aoa(&obs(0, 0.0, 0.01)).unwrap();
        w.add_aoa(&obs(0, 0.4, 0.0105)).unwrap();
        let s = w.solve().unwrap();
        assert!(s.solved_tags.is_empty());
        assert_eq!(w.tag(0).unwrap().status, TagStatus::Unlocalized);
    }

    #[test]
    fn consensus_prefers_the_cheaper_crossing() {
        let w = moving_window(WindowConfig::default().extended());
        let tag = Vec3::new(1.0, 2.0, 0.0);
        let mut o = seen(&[(0.0, 0.0), (0.5, 0.0), (1.0, -0.5), (2.0, 0.0), (2.5, 0.5)], &tag);
        // one mirrored bearing
        o[2].0.theta += PI;
        let x = w.consensus(&o, 30f64.to_radians()).unwrap();
        assert!((x - tag).norm() < 1e-9, "{x:?}");
        // the mirrored bearing still pulls a robust estimate slightly
        let start = x + Vec3::new(0.2, -0.1, 0.0);
        let x = refine_point(&o, start, 30f64.to_radians());
        assert!((x - tag).norm() < 0.1, "{x:?}");
        o.remove(2);
        let x = refine_point(&o, start, 30f64.to_radians());
        assert!((x - tag).norm() < 1e-9, "{x:?}");
    }

    #[test]
    fn settled_needs_well_spread_rays() {
        let tag = Vec3::new(0.0, 2.0, 0.0);
        let scale = 30f64.to_radians();
        let around: Vec<(f64, f64)> = (0..12)
            .map(|k| {
                let a = PI * k as f64 / 6.0;
                (2.0 * a.cos(), 2.0 + 2.0 * a.sin())
            })
            .collect();
        assert!(likelihood_settled(&seen(&around, &tag), &tag, scale, 1.0));
        let wide = seen(&[(-2.0, 0.0), (-1.0, 0.0), (0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], &tag);
        assert!(!likelihood_settled(&wide, &tag, scale, 1.0));
        let narrow = seen(&[(0.0, 0.0), (0.05, 0.0)], &tag);
        assert!(!likelihood_settled(&narrow, &tag, scale, 1.0));
    }

    #[test]
    fn parallax_examples() {
        let at = Vec3::zeros();
        let line = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(-2.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0)];
        assert!(parallax(&at, line.iter()) < 1e-12);
        let corner = [Vec3::x(), Vec3::y()];
        assert!((parallax(&at, corner.iter()) - PI / 2.0).abs() < 1e-12);
        assert_eq!(parallax(&at, [Vec3::x()].iter()), 0.0);
    }

    #[test]
    fn extended_config_validates() {
        let cfg = WindowConfig::default().extended();
        cfg.validate().unwrap();
        assert_eq!(cfg.drop_policy, DropPolicy::Marginalize);
        let mut bad = cfg;
        bad.robust_scale_rad = Some(0.0);
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.init_max_std_m = Some(-1.0);
        assert!(bad.validate().is_err());
    }
}
