use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tagslam::inertial::{
    propagate, simulate_imu, ImuNoise, MotionSegment, PiecewiseTrajectory, Preintegrator, Trajectory,
};
use tagslam::{RobotState, Rot, Timestamp, Vec3};

/// Dead reckoning over `traj` in edges of `per` samples, returning the
/// position error at every edge end.
fn dead_reckon(traj: &PiecewiseTrajectory, noise: ImuNoise, seed: u64, per: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imu = simulate_imu(traj, 100.0, noise, &mut rng).unwrap();
    let pre = Preintegrator::new(100.0, noise);
    let h0 = traj.heading(0.0);
    let mut s = RobotState::new(0, Timestamp(0.0), traj.position(0.0), Rot::from_heading(h0).inverse().rotate(&traj.velocity(0.0)), Rot::from_heading(h0));
    let mut out = Vec::new();
    for (k, chunk) in imu.chunks_exact(per).enumerate() {
        let edge = pre.integrate(chunk, s.rotation).unwrap().between(k as u64, k as u64 + 1);
        s = propagate(&s, &edge);
        let t = s.t.seconds();
        out.push((t, (s.position - traj.position(t)).norm()));
    }
    out
}

fn square() -> PiecewiseTrajectory {
    let mut segs = Vec::new();
    for _ in 0..2 {
        segs.push(MotionSegment::straight(2.0, 0.2));
        segs.push(MotionSegment::straight(6.0, 0.0));
        segs.push(MotionSegment::straight(2.0, -0.2));
        segs.push(MotionSegment::turn(2.0, std::f64::consts::FRAC_PI_4));
    }
    PiecewiseTrajectory::new(Vec3::new(1.0, 2.0, 0.0), 0.3, segs).unwrap()
}

#[test]
fn static_robot_does_not_drift() {
    let traj = PiecewiseTrajectory::new(Vec3::zeros(), 1.0, vec![MotionSegment::straight(30.0, 0.0)]).unwrap();
    let errs = dead_reckon(&traj, ImuNoise::none(), 0, 40);
    assert!(errs.iter().all(|(_, e)| *e < 1e-9));
}

#[test]
fn noiseless_replay_tracks_ground_truth() {
    let errs = dead_reckon(&square(), ImuNoise::none(), 0, 40);
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn preintegration_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imu = simulate_imu(&square(), 100.0, ImuNoise::default(), &mut rng).unwrap();
    let pre = Preintegrator::new(100.0, ImuNoise::default());
    let a = pre.integrate(&imu[..400], Rot::from_heading(0.3)).unwrap();
    let b = pre.integrate(&imu[..400], Rot::from_heading(0.3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dead_reckoning_drift_is_superlinear() {
    let traj = square();
    let (mut early, mut late) = (0.0, 0.0);
    let runs = 20;
    for seed in 0..runs {
        let errs = dead_reckon(&traj, ImuNoise::default(), seed, 40);
        let at = |t: f64| errs.iter().find(|(s, _)| (s - t).abs() < 1e-9).map(|e| e.1).unwrap();
        early += at(10.0);
        late += at(20.0);
    }
    // linear growth would double the error from 10 s to 20 s
    assert!(late / early > 2.0, "{}", late / early);
}
