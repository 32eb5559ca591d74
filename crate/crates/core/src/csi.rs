//! CSI synthesis for a three-antenna circular array and joint AoA/ToF
//! estimation with a subcarrier-smoothed subspace search.
//!
//! Antenna 1 is the phase reference. A plane wave arriving from bearing `θ`
//! travels an extra `d·cos θ` to antenna 2 and `d·cos(θ + π/3)` to antenna 3.
//! Subcarrier `n` of a path with delay `τ` rotates by `e^{-j2π τ n f_δ}`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_two_pi, Timestamp};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const NUM_ANTENNAS: usize = 3;
pub const NUM_SUBCARRIERS: usize = 30;
pub const SUBCARRIER_SPACING_HZ: f64 = 625e3;
/// Subcarriers per smoothed snapshot; 30 - 15 + 1 = 16 snapshots per packet.
pub const SMOOTHING_WINDOW: usize = 15;
/// Upper bound on the number of signal eigenvectors kept.
pub const MAX_SOURCES: usize = 4;

const SNAPSHOT_LEN: usize = NUM_ANTENNAS * SMOOTHING_WINDOW;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub spacing_m: f64,
    pub wavelength_m: f64,
}

impl ArrayGeometry {
    /// Half-wavelength spacing at the given carrier.
    pub fn half_wavelength(carrier_hz: f64) -> Self {
        let wavelength_m = SPEED_OF_LIGHT / carrier_hz;
        Self {
            spacing_m: wavelength_m / 2.0,
            wavelength_m,
        }
    }

    pub fn carrier_hz(&self) -> f64 {
        SPEED_OF_LIGHT / self.wavelength_m
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength_m > 0.0) || !(self.spacing_m > 0.0) {
            return Err(Error::InvalidArgument("array dimensions must be positive".into()));
        }
        if self.spacing_m > self.wavelength_m / 2.0 * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "antenna spacing {} m exceeds half wavelength {} m",
                self.spacing_m,
                self.wavelength_m / 2.0
            )));
        }
        Ok(())
    }

    /// Extra path length to each antenna for a wave arriving from `theta`.
    pub fn path_offsets(&self, theta: f64) -> [f64; NUM_ANTENNAS] {
        [
            0.0,
            self.spacing_m * theta.cos(),
            self.spacing_m * (theta + PI / 3.0).cos(),
        ]
    }

    /// Phase of each antenna relative to antenna 1, radians.
    pub fn phases(&self, theta: f64) -> [f64; NUM_ANTENNAS] {
        self.path_offsets(theta)
            .map(|p| -2.0 * PI * p / self.wavelength_m)
    }

    pub fn steering(&self, theta: f64) -> [Complex64; NUM_ANTENNAS] {
        self.phases(theta).map(|ph| Complex64::from_polar(1.0, ph))
    }
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self::half_wavelength(5.825e9)
    }
}

/// One transmitter→tag→receiver path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualPath {
    pub tof_s: f64,
    pub aoa_rad: f64,
    pub gain: Complex64,
}

impl VirtualPath {
    pub fn new(tof_s: f64, aoa_rad: f64, gain: Complex64) -> Self {
        Self {
            tof_s,
            aoa_rad: wrap_two_pi(aoa_rad),
            gain,
        }
    }
}

/// Per-packet channel estimate: `NUM_SUBCARRIERS` rows by `NUM_ANTENNAS`
/// columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiMatrix {
    entries: Vec<Complex64>,
    pub subcarrier_spacing_hz: f64,
    pub center_frequency_hz: f64,
}

impl CsiMatrix {
    pub fn zeros(center_frequency_hz: f64) -> Self {
        Self {
            entries: vec![Complex64::new(0.0, 0.0); NUM_SUBCARRIERS * NUM_ANTENNAS],
            subcarrier_spacing_hz: SUBCARRIER_SPACING_HZ,
            center_frequency_hz,
        }
    }

    pub fn from_entries(entries: Vec<Complex64>, center_frequency_hz: f64) -> Result<Self> {
        if entries.len() != NUM_SUBCARRIERS * NUM_ANTENNAS {
            return Err(Error::InvalidArgument(format!(
                "expected {} CSI entries, got {}",
                NUM_SUBCARRIERS * NUM_ANTENNAS,
                entries.len()
            )));
        }
        if entries.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidArgument("non-finite CSI entry".into()));
        }
        Ok(Self {
            entries,
            subcarrier_spacing_hz: SUBCARRIER_SPACING_HZ,
            center_frequency_hz,
        })
    }

    pub fn get(&self, subcarrier: usize, antenna: usize) -> Complex64 {
        self.entries[subcarrier * NUM_ANTENNAS + antenna]
    }

    pub fn set(&mut self, subcarrier: usize, antenna: usize, value: Complex64) {
        self.entries[subcarrier * NUM_ANTENNAS + antenna] = value;
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }
}

/// Builds the CSI a receiver would report for the given paths, plus i.i.d.
/// circular complex Gaussian noise of standard deviation `noise_std` per entry.
pub fn synthesize_csi<R: Rng + ?Sized>(
    paths: &[VirtualPath],
    geom: &ArrayGeometry,
    noise_std: f64,
    rng: &mut R,
) -> Result<CsiMatrix> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("at least one path is required".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_std must be non-negative, got {noise_std}")));
    }
    let mut h = CsiMatrix::zeros(geom.carrier_hz());
    for p in paths {
        let offsets = geom.path_offsets(p.aoa_rad);
        for n in 0..NUM_SUBCARRIERS {
            for (m, off) in offsets.iter().enumerate() {
                let phase = -2.0
                    * PI
                    * (p.tof_s * n as f64 * SUBCARRIER_SPACING_HZ + off / geom.wavelength_m);
                let v = h.get(n, m) + p.gain * Complex64::from_polar(1.0, phase);
                h.set(n, m, v);
            }
        }
    }
    if noise_std > 0.0 {
        let s = noise_std / 2f64.sqrt();
        for e in h.entries.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *e += Complex64::new(re * s, im * s);
        }
    }
    Ok(h)
}

/// Search grid for the pseudo-spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub theta_step_deg: f64,
    pub refine_step_deg: f64,
    pub tau_max_s: f64,
    pub tau_step_s: f64,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            theta_step_deg: 1.0,
            refine_step_deg: 0.1,
            tau_max_s: 200e-9,
            tau_step_s: 2e-9,
        }
    }
}

impl SearchGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_step_deg > 0.0)
            || !(self.refine_step_deg > 0.0)
            || !(self.tau_step_s > 0.0)
            || !(self.tau_max_s >= 0.0)
        {
            return Err(Error::InvalidArgument("grid resolutions must be positive".into()));
        }
        Ok(())
    }

    pub fn theta_count(&self) -> usize {
        (360.0 / self.theta_step_deg).round() as usize
    }

    pub fn tau_count(&self) -> usize {
        (self.tau_max_s / self.tau_step_s).round() as usize + 1
    }

    pub fn theta_at(&self, i: usize) -> f64 {
        (i as f64 * self.theta_step_deg).to_radians()
    }

    pub fn tau_at(&self, j: usize) -> f64 {
        j as f64 * self.tau_step_s
    }
}

/// A local maximum of the pseudo-spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPeak {
    pub aoa_rad: f64,
    pub tof_s: f64,
    pub power: f64,
}

/// Signal subspace of the smoothed covariance, stored per antenna so the
/// steering vector factorizes into an antenna part and a subcarrier part.
#[derive(Debug, Clone)]
pub struct SignalSubspace {
    /// `vectors[e][m * SMOOTHING_WINDOW + n]`
    vectors: Vec<Vec<Complex64>>,
    pub eigenvalues: Vec<f64>,
}

impl SignalSubspace {
    pub fn dimension(&self) -> usize {
        self.vectors.len()
    }

    /// Fraction of a unit-norm steering vector's energy in the signal
    /// subspace, in `[0, 1]`.
    pub fn signal_fraction(&self, geom: &ArrayGeometry, theta: f64, tau: f64) -> f64 {
        let ant = geom.steering(theta);
        let sub = subcarrier_steering(tau);
        self.signal_fraction_with(&ant, &sub)
    }

    fn signal_fraction_with(
        &self,
        ant: &[Complex64; NUM_ANTENNAS],
        sub: &[Complex64; SMOOTHING_WINDOW],
    ) -> f64 {
        let mut total = 0.0;
        for e in &self.vectors {
            let mut acc = Complex64::new(0.0, 0.0);
            for (m, a) in ant.iter().enumerate() {
                let mut inner = Complex64::new(0.0, 0.0);
                for (n, q) in sub.iter().enumerate() {
                    inner += e[m * SMOOTHING_WINDOW + n].conj() * q;
                }
                acc += inner * a;
            }
            total += acc.norm_sqr();
        }
        total / SNAPSHOT_LEN as f64
    }

    /// Noise-projection pseudo-spectrum `1 / ‖E_nᴴ a‖²` for a unit-norm `a`.
    pub fn pseudo_spectrum(&self, geom: &ArrayGeometry, theta: f64, tau: f64) -> f64 {
        to_pseudo(self.signal_fraction(geom, theta, tau))
    }
}

fn to_pseudo(signal_fraction: f64) -> f64 {
    1.0 / (1.0 - signal_fraction).max(1e-15)
}

fn subcarrier_steering(tau: f64) -> [Complex64; SMOOTHING_WINDOW] {
    std::array::from_fn(|n| {
        Complex64::from_polar(1.0, -2.0 * PI * tau * n as f64 * SUBCARRIER_SPACING_HZ)
    })
}

/// Averaged covariance of all subcarrier-shifted snapshots of all packets.
pub fn smoothed_covariance(packets: &[CsiMatrix]) -> Result<DMatrix<Complex64>> {
    if packets.is_empty() {
        return Err(Error::EstimationFailed("no CSI packets".into()));
    }
    let shifts = NUM_SUBCARRIERS - SMOOTHING_WINDOW + 1;
    let mut cov = DMatrix::<Complex64>::zeros(SNAPSHOT_LEN, SNAPSHOT_LEN);
    let mut x = vec![Complex64::new(0.0, 0.0); SNAPSHOT_LEN];
    for h in packets {
        for s in 0..shifts {
            for m in 0..NUM_ANTENNAS {
                for n in 0..SMOOTHING_WINDOW {
                    x[m * SMOOTHING_WINDOW + n] = h.get(s + n, m);
                }
            }
            for i in 0..SNAPSHOT_LEN {
                let xi = x[i];
                for j in 0..SNAPSHOT_LEN {
                    cov[(i, j)] += xi * x[j].conj();
                }
            }
        }
    }
    let norm = (shifts * packets.len()) as f64;
    cov.iter_mut().for_each(|c| *c /= norm);
    Ok(cov)
}

/// Signal subspace with its dimension picked at the largest eigenvalue gap
/// (log ratio of consecutive eigenvalues), between 1 and [`MAX_SOURCES`].
pub fn signal_subspace(cov: DMatrix<Complex64>) -> Result<SignalSubspace> {
    let trace: f64 = (0..cov.nrows()).map(|i| cov[(i, i)].re).sum();
    if !(trace > 1e-250) || !trace.is_finite() {
        return Err(Error::EstimationFailed(
            "smoothed covariance is rank deficient (no signal energy)".into(),
        ));
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let floor = values[0] * 1e-15;
    let mut best = (1usize, f64::NEG_INFINITY);
    for k in 1..=MAX_SOURCES {
        let gap = (values[k - 1].max(floor) / values[k].max(floor)).ln();
        if gap > best.1 {
            best = (k, gap);
        }
    }
    let vectors = order[..best.0]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    Ok(SignalSubspace {
        vectors,
        eigenvalues: values,
    })
}

/// Evaluated pseudo-spectrum over the full grid, `values[i * tau_count + j]`.
#[derive(Debug, Clone)]
pub struct SpectrumGrid {
    pub grid: SearchGrid,
    pub values: Vec<f64>,
}

impl SpectrumGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.tau_count() + j]
    }

    /// Grid local maxima sorted by power, strongest first. Plateaus resolve
    /// to the lowest linear index so the result is traversal independent.
    pub fn local_maxima(&self) -> Vec<(usize, usize, f64)> {
        let nt = self.grid.theta_count();
        let nu = self.grid.tau_count();
        let mut peaks = Vec::new();
        for i in 0..nt {
            for j in 0..nu {
                let v = self.at(i, j);
                let here = i * nu + j;
                let mut is_max = true;
                'nb: for di in [-1i64, 0, 1] {
                    for dj in [-1i64, 0, 1] {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let jj = j as i64 + dj;
                        if jj < 0 || jj >= nu as i64 {
                            continue;
                        }
                        let ii = (i as i64 + di).rem_euclid(nt as i64) as usize;
                        let w = self.at(ii, jj as usize);
                        let there = ii * nu + jj as usize;
                        if w > v || (w == v && there < here) {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    peaks.push((i, j, v));
                }
            }
        }
        peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        peaks
    }
}

/// Joint AoA/ToF estimator for one array geometry and grid.
#[derive(Debug, Clone)]
pub struct AoaTofEstimator {
    pub geometry: ArrayGeometry,
    pub grid: SearchGrid,
    antenna_table: Vec<[Complex64; NUM_ANTENNAS]>,
    subcarrier_table: Vec<[Complex64; SMOOTHING_WINDOW]>,
}

impl AoaTofEstimator {
    pub fn new(geometry: ArrayGeometry, grid: SearchGrid) -> Result<Self> {
        geometry.validate()?;
        grid.validate()?;
        let antenna_table = (0..grid.theta_count())
            .map(|i| geometry.steering(grid.theta_at(i)))
            .collect();
        let subcarrier_table = (0..grid.tau_count())
            .map(|j| subcarrier_steering(grid.tau_at(j)))
            .collect();
        Ok(Self {
            geometry,
            grid,
            antenna_table,
            subcarrier_table,
        })
    }

    pub fn subspace(&self, packets: &[CsiMatrix]) -> Result<SignalSubspace> {
        signal_subspace(smoothed_covariance(packets)?)
    }

    /// Pseudo-spectrum over the full grid.
    pub fn spectrum(&self, subspace: &SignalSubspace) -> SpectrumGrid {
        let nt = self.grid.theta_count();
        let nu = self.grid.tau_count();
        // Project each eigenvector onto every subcarrier steering vector once;
        // a grid point then costs NUM_ANTENNAS multiplies per eigenvector.
        let proj: Vec<Vec<[Complex64; NUM_ANTENNAS]>> = subspace
            .vectors
            .iter()
            .map(|e| {
                self.subcarrier_table
                    .iter()
                    .map(|q| {
                        std::array::from_fn(|m| {
                            (0..SMOOTHING_WINDOW)
                                .map(|n| e[m * SMOOTHING_WINDOW + n].conj() * q[n])
                                .sum()
                        })
                    })
                    .collect()
            })
            .collect();
        let mut values = Vec::with_capacity(nt * nu);
        for ant in &self.antenna_table {
            for j in 0..nu {
                let mut total = 0.0;
                for p in &proj {
                    let c = &p[j];
                    let acc = ant[0] * c[0] + ant[1] * c[1] + ant[2] * c[2];
                    total += acc.norm_sqr();
                }
                values.push(to_pseudo(total / SNAPSHOT_LEN as f64));
            }
        }
        SpectrumGrid {
            grid: self.grid,
            values,
        }
    }

    /// Top peaks of the pseudo-spectrum, strongest first, one per estimated
    /// signal dimension.
    pub fn estimate(&self, packets: &[CsiMatrix]) -> Result<Vec<PathPeak>> {
        let subspace = self.subspace(packets)?;
        let spectrum = self.spectrum(&subspace);
        let maxima = spectrum.local_maxima();
        let mut peaks: Vec<PathPeak> = Vec::new();
        for &(i, j, _) in maxima.iter() {
            if peaks.len() == subspace.dimension() {
                break;
            }
            let p = self.refine(&subspace, self.grid.theta_at(i), self.grid.tau_at(j));
            let duplicate = peaks.iter().any(|q| {
                crate::geometry::angle_diff(q.aoa_rad, p.aoa_rad)
                    < self.grid.refine_step_deg.to_radians()
                    && (q.tof_s - p.tof_s).abs() < self.grid.tau_step_s / 10.0
            });
            if !duplicate {
                peaks.push(p);
            }
        }
        peaks.sort_by(|a, b| b.power.total_cmp(&a.power));
        Ok(peaks)
    }

    /// Local fine-grid pass at the refinement step, then a golden-section
    /// polish on each coordinate.
    fn refine(&self, sub: &SignalSubspace, theta0: f64, tau0: f64) -> PathPeak {
        let geom = &self.geometry;
        let dtheta = self.grid.refine_step_deg.to_radians();
        let coarse = self.grid.theta_step_deg.to_radians();
        let dtau = self.grid.tau_step_s / 10.0;
        let steps = (coarse / dtheta).round() as i64;
        let clamp_tau = |t: f64| t.clamp(0.0, self.grid.tau_max_s);

        let mut best = (theta0, tau0, sub.signal_fraction(geom, theta0, tau0));
        for a in -steps..=steps {
            for b in -10i64..=10 {
                let th = theta0 + a as f64 * dtheta;
                let tu = clamp_tau(tau0 + b as f64 * dtau);
                let f = sub.signal_fraction(geom, th, tu);
                if f > best.2 {
                    best = (th, tu, f);
                }
            }
        }

        let (mut th, mut tu) = (best.0, best.1);
        for _ in 0..2 {
            th = golden_max(|x| sub.signal_fraction(geom, x, tu), th - dtheta, th + dtheta, 1e-12);
            tu = golden_max(
                |x| sub.signal_fraction(geom, th, x),
                clamp_tau(tu - dtau),
                clamp_tau(tu + dtau),
                1e-18,
            );
        }
        // Newton steps in grid-cell units, kept only while they improve
        let mut f0 = sub.signal_fraction(geom, th, tu);
        for _ in 0..12 {
            let (th0, tu0) = (th, tu);
            let f_at = |u: f64, v: f64| sub.signal_fraction(geom, th0 + u * dtheta, clamp_tau(tu0 + v * dtau));
            let h = 1e-3;
            let (fu1, fu0) = (f_at(h, 0.0), f_at(-h, 0.0));
            let (fv1, fv0) = (f_at(0.0, h), f_at(0.0, -h));
            let fuv = f_at(h, h) - f_at(h, -h) - f_at(-h, h) + f_at(-h, -h);
            let g = [(fu1 - fu0) / (2.0 * h), (fv1 - fv0) / (2.0 * h)];
            let huu = (fu1 - 2.0 * f0 + fu0) / (h * h);
            let hvv = (fv1 - 2.0 * f0 + fv0) / (h * h);
            let huv = fuv / (4.0 * h * h);
            let det = huu * hvv - huv * huv;
            if !(huu < 0.0 && det > 0.0) {
                break;
            }
            let du = -(hvv * g[0] - huv * g[1]) / det;
            let dv = -(huu * g[1] - huv * g[0]) / det;
            if !(du.abs() < 1.0 && dv.abs() < 1.0) {
                break;
            }
            let f1 = f_at(du, dv);
            if !(f1 >= f0) {
                break;
            }
            th += du * dtheta;
            tu = clamp_tau(tu + dv * dtau);
            f0 = f1;
            if du.abs() < 1e-9 && dv.abs() < 1e-9 {
                break;
            }
        }
        let f = sub.signal_fraction(geom, th, tu);
        let (th, tu) = if f >= best.2 { (th, tu) } else { (best.0, best.1) };
        PathPeak {
            aoa_rad: wrap_two_pi(th),
            tof_s: tu,
            power: to_pseudo(f.max(best.2)),
        }
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Joint AoA/ToF peaks for one CSI matrix.
pub fn estimate_aoa_tof(h: &CsiMatrix, geom: &ArrayGeometry, grid: &SearchGrid) -> Result<Vec<PathPeak>> {
    AoaTofEstimator::new(*geom, *grid)?.estimate(std::slice::from_ref(h))
}

/// The path with the smallest ToF; equal ToFs go to the stronger peak.
pub fn direct_path(peaks: &[PathPeak]) -> Result<PathPeak> {
    peaks
        .iter()
        .copied()
        .min_by(|a, b| a.tof_s.total_cmp(&b.tof_s).then(b.power.total_cmp(&a.power)))
        .ok_or_else(|| Error::EstimationFailed("no peaks to select a direct path from".into()))
}

/// Direct-path bearing of one tag at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoaEstimate {
    pub tag_id: u32,
    pub t: Timestamp,
    /// Bearing in the array frame, `[0, 2π)`.
    pub theta: f64,
    pub tau: f64,
    /// Peak power relative to the mean spectrum level of the other peaks.
    pub confidence: f64,
}

pub fn direct_path_aoa(peaks: &[PathPeak], tag_id: u32, t: Timestamp) -> Result<AoaEstimate> {
    let d = direct_path(peaks)?;
    let others: Vec<f64> = peaks.iter().filter(|p| **p != d).map(|p| p.power).collect();
    let confidence = if others.is_empty() {
        1.0
    } else {
        d.power / (others.iter().sum::<f64>() / others.len() as f64)
    };
    Ok(AoaEstimate {
        tag_id,
        t,
        theta: wrap_two_pi(d.aoa_rad),
        tau: d.tof_s,
        confidence,
    })
}

/// One packet of a recorded CSI trace.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiRecord {
    pub t: Timestamp,
    pub tag_id: u32,
    pub csi: CsiMatrix,
}

/// Writes one line per record: `t,tag_id` then the 30×3 entries
/// subcarrier-major as `re,im` pairs.
pub fn write_csi_trace<W: Write>(mut w: W, records: &[CsiRecord]) -> Result<()> {
    writeln!(
        w,
        "# t,tag_id,{} subcarriers x {} antennas as re,im pairs (subcarrier-major)",
        NUM_SUBCARRIERS, NUM_ANTENNAS
    )?;
    for r in records {
        write!(w, "{:?},{}", r.t.seconds(), r.tag_id)?;
        for c in r.csi.entries() {
            write!(w, ",{:?},{:?}", c.re, c.im)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_csi_trace<R: BufRead>(r: R, center_frequency_hz: f64) -> Result<Vec<CsiRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let expected = 2 + 2 * NUM_SUBCARRIERS * NUM_ANTENNAS;
        if fields.len() != expected {
            return Err(bad(format!("expected {expected} fields, got {}", fields.len())));
        }
        let t: f64 = fields[0].parse().map_err(|_| bad("bad timestamp".into()))?;
        let tag_id: u32 = fields[1].parse().map_err(|_| bad("bad tag id".into()))?;
        let nums: Vec<f64> = fields[2..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("bad CSI value: {e}")))?;
        let entries = nums.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect();
        let csi = CsiMatrix::from_entries(entries, center_frequency_hz).map_err(|e| bad(e.to_string()))?;
        out.push(CsiRecord {
            t: Timestamp(t),
            tag_id,
            csi,
        });
    }
    Ok(out)
}
