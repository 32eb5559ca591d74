use std::fs;

use tagslam::harness::{
    compute_metrics, load_solution_log, paper_scenario, run_scenario, GroundTruth, RobotEntry, SolutionRecord, TagEntry,
};
use tagslam::{Error, TagStatus};

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let s = paper_scenario().with_seed(5);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_scenario(&s).unwrap().write_to(d.path()).unwrap();
    }
    for f in ["report.json", "solutions.jsonl", "trajectory.csv", "tags.csv", "aoa.csv"] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        let b = fs::read(dirs[1].path().join(f)).unwrap();
        assert!(!a.is_empty(), "{f} is empty");
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn outputs_round_trip() {
    let out = run_scenario(&paper_scenario().with_seed(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write_to(dir.path()).unwrap();

    assert_eq!(load_solution_log(&dir.path().join("solutions.jsonl")).unwrap(), out.log);

    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 1);
    assert!(report.get("latency").is_none());
    let timing: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("timing.json")).unwrap()).unwrap();
    assert_eq!(timing["count"].as_u64().unwrap() as usize, out.latencies_s.len());

    let mut rd = csv::Reader::from_path(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["t", "true_x", "true_y", "est_x", "est_y"]);
    let rows: Vec<(f64, f64, f64, f64, f64)> = rd.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), out.log.len());
    let mean = rows.iter().map(|r| ((r.1 - r.3).powi(2) + (r.2 - r.4).powi(2)).sqrt()).sum::<f64>() / rows.len() as f64;
    assert!((mean - out.report.robot_mean_error_m).abs() < 1e-9);

    let mut rd = csv::Reader::from_path(dir.path().join("tags.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["tag_id", "true_x", "true_y", "est_x", "est_y", "error"]);
    assert_eq!(rd.records().count(), 4);

    let mut rd = csv::Reader::from_path(dir.path().join("aoa.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["t", "tag_id", "true_theta", "est_theta"]);
    assert_eq!(rd.records().count(), out.aoa.len());
}

#[test]
fn trajectory_length_matches_ground_truth() {
    let s = paper_scenario();
    assert!((s.trajectory().unwrap().arc_length() - 41.96).abs() <= 0.01);
    let out = run_scenario(&s.noiseless()).unwrap();
    let r = &out.report;
    assert!((r.trajectory_length_m - out.truth.arc_length_m).abs() <= 0.01 * out.truth.arc_length_m);
    assert!(r.robot_mean_error_m >= 0.0 && r.tags.iter().all(|t| t.error_m.unwrap() >= 0.0));
    assert!(r.tags.iter().all(|t| t.status == Some(TagStatus::Active) || t.status == Some(TagStatus::Frozen)));
}

#[test]
fn metrics_examples() {
    let truth = GroundTruth {
        robot: vec![(0.0, [0.0, 0.0]), (1.0, [1.0, 0.0])],
        tags: vec![(0, [2.0, 1.0], true)],
        arc_length_m: 1.0,
    };
    let record = |tag: [f64; 2]| SolutionRecord {
        t: 1.0,
        robots: vec![
            RobotEntry { id: 0, t: 0.0, x: 0.0, y: 0.0 },
            RobotEntry { id: 1, t: 1.0, x: 1.0, y: 0.0 },
        ],
        tags: vec![TagEntry { id: 0, x: tag[0], y: tag[1], status: TagStatus::Active }],
        aoa_cost: 0.0,
        odometry_cost: 0.0,
    };
    let r = compute_metrics(&[record([2.0, 1.0])], &truth, &[], 1e-6).unwrap();
    assert_eq!(r.robot_mean_error_m, 0.0);
    assert_eq!(r.tags[0].error_m, Some(0.0));
    let r = compute_metrics(&[record([2.3, 1.4])], &truth, &[], 1e-6).unwrap();
    assert!((r.tags[0].error_m.unwrap() - 0.5).abs() < 1e-12);
    assert!(matches!(compute_metrics(&[], &truth, &[], 1e-6), Err(Error::MetricAlignment(_))));
}
