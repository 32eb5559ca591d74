use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tagslam::channel::{center_frequency_hz, plan_channels};
use tagslam::csi::{AoaEstimate, AoaTofEstimator, SearchGrid};
use tagslam::harness::{dwell_packets, link_paths, paper_scenario, rx_geometry};
use tagslam::inertial::{simulate_imu, ImuNoise, Preintegrator, Trajectory};
use tagslam::slam::SlidingWindow;
use tagslam::{RobotState, Rot, Timestamp, Vec3};

fn aoa(c: &mut Criterion) {
    let est = AoaTofEstimator::new(rx_geometry(center_frequency_hz(165).unwrap()), SearchGrid::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let paths = link_paths(1.0, 4.0, true, 1, &mut rng);
    let packets = dwell_packets(&paths, &est.geometry, 4.9, 5, &mut rng).unwrap();
    c.bench_function("aoa_estimate_dwell", |b| b.iter(|| est.estimate(black_box(&packets)).unwrap()));
}

fn preintegration(c: &mut Criterion) {
    let traj = paper_scenario().trajectory().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let imu = simulate_imu(&traj, 100.0, ImuNoise::default(), &mut rng).unwrap();
    let pre = Preintegrator::new(100.0, ImuNoise::default());
    let cycle = &imu[100..140];
    c.bench_function("preintegrate_cycle", |b| b.iter(|| pre.integrate(black_box(cycle), Rot::identity()).unwrap()));
}

/// A full window of ten states on the paper trajectory with exact bearings to
/// four tags every state.
fn filled_window() -> SlidingWindow {
    let s = paper_scenario().noiseless().with_window_size(10);
    let traj = s.trajectory().unwrap();
    let frame = s.world_frame().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let imu = simulate_imu(&traj, s.rates.imu_hz, ImuNoise::default().scaled(0.0), &mut rng).unwrap();
    let pre = Preintegrator::new(s.rates.imu_hz, ImuNoise::default().scaled(0.0));
    let per = (s.cycle_s() * s.rates.imu_hz).round() as usize;
    let tags: Vec<Vec3> = s
        .tags
        .iter()
        .map(|t| frame.to_world(&Vec3::new(t.position[0], t.position[1], 0.0)))
        .collect();
    let mut w = SlidingWindow::new(s.window, RobotState::origin(Timestamp(0.0))).unwrap();
    for k in 0..40usize {
        let t = k as f64 * per as f64 / s.rates.imu_hz;
        if k > 0 {
            let edge = pre.integrate(&imu[(k - 1) * per..k * per], w.newest().rotation).unwrap();
            let from = w.newest().id;
            w.advance(edge.between(from, k as u64)).unwrap();
        }
        let pos = frame.to_world(&traj.position(t));
        let heading = frame.heading_to_world(traj.heading(t));
        for (id, tag) in tags.iter().enumerate() {
            let rel = Rot::from_heading(heading).inverse().rotate(&(tag - pos));
            let obs = AoaEstimate {
                tag_id: id as u32,
                t: Timestamp(t),
                theta: rel.y.atan2(rel.x).rem_euclid(std::f64::consts::TAU),
                tau: 0.0,
                confidence: 1.0,
            };
            let _ = w.add_aoa(&obs);
        }
        if k + 1 < 40 {
            let _ = w.solve();
        }
    }
    w
}

fn window_solve(c: &mut Criterion) {
    let w = filled_window();
    c.bench_function("window_solve_n10_4tags", |b| b.iter(|| black_box(w.clone()).solve().unwrap()));
}

fn channel_plan(c: &mut Criterion) {
    c.bench_function("plan_channels_4", |b| b.iter(|| plan_channels(black_box(4), 165).unwrap()));
}

criterion_group!(benches, aoa, preintegration, window_solve, channel_plan);
criterion_main!(benches);
