use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tagslam::csi::{
    direct_path_aoa, read_csi_trace, synthesize_csi, write_csi_trace, AoaTofEstimator, ArrayGeometry, CsiRecord,
    SearchGrid, VirtualPath,
};
use tagslam::geometry::angle_diff;
use tagslam::harness::{aoa_error_trials, median, DEFAULT_TX_PATHS};
use tagslam::Timestamp;

fn estimator() -> AoaTofEstimator {
    AoaTofEstimator::new(ArrayGeometry::default(), SearchGrid::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn direct_path_survives_a_later_reflection(
        theta in 0.0f64..std::f64::consts::TAU,
        reflected in 0.0f64..std::f64::consts::TAU,
        tof in 2e-9f64..40e-9,
        gain in 0.2f64..0.9,
        phase in 0.0f64..std::f64::consts::TAU,
    ) {
        let geom = ArrayGeometry::default();
        let paths = [
            VirtualPath::new(tof, theta, Complex64::new(1.0, 0.0)),
            VirtualPath::new(tof + 30e-9, reflected, Complex64::from_polar(gain, phase)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let packets = vec![synthesize_csi(&paths, &geom, 0.0, &mut rng).unwrap()];
        let peaks = estimator().estimate(&packets).unwrap();
        let a = direct_path_aoa(&peaks, 0, Timestamp(0.0)).unwrap();
        prop_assert!(angle_diff(a.theta, theta).to_degrees() <= 2.0, "{} vs {}", a.theta.to_degrees(), theta.to_degrees());
    }
}

#[test]
fn median_error_grows_with_noise() {
    let medians: Vec<f64> = [0.5, 2.0, 6.0]
        .iter()
        .map(|&s| median(&aoa_error_trials(s, true, DEFAULT_TX_PATHS, 200, 99).unwrap()).unwrap())
        .collect();
    assert!(medians.windows(2).all(|m| m[1] >= m[0]), "{medians:?}");
}

#[test]
fn recorded_trace_gives_the_same_bearing() {
    let geom = ArrayGeometry::default();
    let paths = [VirtualPath::new(12e-9, 1.1, Complex64::new(1.0, 0.0))];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let records: Vec<CsiRecord> = (0..5)
        .map(|i| CsiRecord {
            t: Timestamp(0.02 * i as f64),
            tag_id: 2,
            csi: synthesize_csi(&paths, &geom, 0.3, &mut rng).unwrap(),
        })
        .collect();
    let mut buf = Vec::new();
    write_csi_trace(&mut buf, &records).unwrap();
    let back = read_csi_trace(buf.as_slice(), geom.carrier_hz()).unwrap();
    assert_eq!(back, records);
    let est = estimator();
    let direct: Vec<_> = records.iter().map(|r| r.csi.clone()).collect();
    let replayed: Vec<_> = back.iter().map(|r| r.csi.clone()).collect();
    assert_eq!(est.estimate(&direct).unwrap(), est.estimate(&replayed).unwrap());
}
