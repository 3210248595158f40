use super::*;
use crate::estimator::calibration_grid;
use crate::models::{radar_velocity, spherical_to_cartesian, ImuData, RadarData};
use crate::sim::{simulate, SimConfig, SimDataset};
use rand_distr::{Distribution, Normal};

fn target(p: Vec3, doppler: f64) -> RadarTarget {
    let (range, azimuth, elevation) = crate::models::cartesian_to_spherical(&p);
    RadarTarget { t: 0.0, scan_id: 0, range, azimuth, elevation, doppler }
}

fn plain() -> EgoVelocityOptions {
    EgoVelocityOptions { ransac: false, ..EgoVelocityOptions::default() }
}

#[test]
fn ego_velocity_three_target_example() {
    let scan = [target(Vec3::new(10.0, 0.0, 0.0), -2.0), target(Vec3::new(0.0, 5.0, 0.0), 0.0), target(Vec3::new(0.0, 0.0, 4.0), 1.0)];
    let e = solve_ego_velocity(&scan, &plain()).unwrap();
    assert!((e.velocity - Vec3::new(2.0, 0.0, -1.0)).amax() < 1e-9);
    assert_eq!(e.inliers, 3);
}

#[test]
fn stationary_radar_has_zero_ego_velocity() {
    let scan: Vec<RadarTarget> =
        (0..8).map(|k| target(spherical_to_cartesian(5.0 + k as f64, 0.2 * k as f64 - 0.7, 0.1 * k as f64 - 0.3), 0.0)).collect();
    let e = solve_ego_velocity(&scan, &EgoVelocityOptions::default()).unwrap();
    assert!(e.velocity.amax() < 1e-12);
}

#[test]
fn too_few_or_coplanar_targets_are_rejected() {
    let two = [target(Vec3::new(1.0, 0.0, 0.0), 0.0), target(Vec3::new(0.0, 1.0, 0.0), 0.0)];
    assert_eq!(solve_ego_velocity(&two, &plain()), Err(EgoVelocityError::TooFewTargets(2)));
    let planar: Vec<RadarTarget> = (0..6).map(|k| target(spherical_to_cartesian(5.0, 0.3 * k as f64 - 0.8, 0.0), 0.0)).collect();
    assert!(matches!(solve_ego_velocity(&planar, &plain()), Err(EgoVelocityError::Degenerate(_))));
}

fn random_scan(rng: &mut ChaCha8Rng, n: usize, v: &Vec3, noise: f64) -> Vec<RadarTarget> {
    let nd = Normal::new(0.0, noise.max(1e-300)).unwrap();
    (0..n)
        .map(|_| {
            let p = spherical_to_cartesian(rng.random_range(2.0..40.0), rng.random_range(-1.2..1.2), rng.random_range(-0.7..0.7));
            let d = crate::models::radar_doppler_predict(&p, v, p.norm());
            target(p, d + if noise > 0.0 { nd.sample(rng) } else { 0.0 })
        })
        .collect()
}

#[test]
fn ego_velocity_matches_brute_force_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let v = Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let scan = random_scan(&mut rng, 12, &v, 0.05);
        let e = solve_ego_velocity(&scan, &plain()).unwrap();
        let a = nalgebra::DMatrix::from_fn(scan.len(), 3, |i, k| -scan[i].direction()[k]);
        let b = nalgebra::DVector::from_iterator(scan.len(), scan.iter().map(|t| t.doppler));
        let x = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * b;
        assert!((e.velocity - Vec3::new(x[0], x[1], x[2])).amax() < 1e-12);
    }
}

#[test]
fn ransac_rejects_corrupted_dopplers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sigma = 0.05;
    let v = Vec3::new(3.0, -1.0, 0.5);
    let mut scan = random_scan(&mut rng, 25, &v, sigma);
    for t in scan.iter_mut().take(5) {
        t.doppler += rng.random_range(2.0..6.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    let e = solve_ego_velocity(&scan, &EgoVelocityOptions::default()).unwrap();
    assert!(e.inliers >= 20, "{} inliers", e.inliers);
    let bound = 3.0 * sigma * e.normal_inverse.diagonal().map(f64::sqrt).amax();
    assert!((e.velocity - v).amax() < bound, "{:?} vs {v:?}, bound {bound}", e.velocity);
}

#[test]
fn noiseless_simulated_scans_give_true_radar_velocity() {
    let ds = simulate(&SimConfig { duration: 3.0, ..SimConfig::default() }.noiseless()).unwrap();
    for (j, radar) in ds.dataset().radars.iter().enumerate() {
        let truth = &ds.truth.radars[j];
        for scan in radar.scans().iter().filter(|s| s.targets.len() >= 3) {
            let e = solve_ego_velocity(&scan.targets, &EgoVelocityOptions::default()).unwrap();
            let k = ds.trajectory.sample(scan.t + truth.time_offset).kin;
            let v = radar_velocity(&k, &truth.extrinsics.rotation, &truth.extrinsics.translation);
            assert!((e.velocity - v).amax() < 1e-9, "{:?} vs {v:?}", e.velocity);
        }
    }
}

#[test]
fn kabsch_recovers_rotation_and_mean_is_centered() {
    let q = Rotation::exp(&Vec3::new(0.4, -0.2, 1.1));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y: Vec<Vec3> = (0..20).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
    let x: Vec<Vec3> = y.iter().map(|v| q * *v).collect();
    let (r, s) = kabsch(&x, &y);
    assert!(r.angle_to(&q) < 1e-12);
    assert!(s[2] > 0.0);
    let rs = [Rotation::exp(&Vec3::new(0.3, 0.0, 0.0)), Rotation::exp(&Vec3::new(0.0, 0.5, 0.1)), q];
    let m = rotation_mean(&rs);
    let sum: Vec3 = rs.iter().map(|r| (m.inverse() * *r).log()).sum();
    assert!(sum.amax() < 1e-12);
}

/// Noise-free data matching the initialization assumptions: zero time
/// offsets and ideal intrinsics.
fn ideal_sim(duration: f64, imus: usize) -> SimDataset {
    let mut cfg = SimConfig { duration, ..SimConfig::default() }.noiseless();
    cfg.imus.truncate(imus);
    if imus == 1 {
        cfg.imus[0].rotation = [0.0; 3];
        cfg.imus[0].translation = [0.0; 3];
    }
    if imus == 2 {
        // Keep the IMUs centered.
        let (r, p) = (cfg.imus[0].rotation, cfg.imus[0].translation);
        cfg.imus[1].rotation = r.map(|v| -v);
        cfg.imus[1].translation = p.map(|v| -v);
    }
    for c in &mut cfg.imus {
        c.time_offset = 0.0;
        c.gyro_bias = [0.0; 3];
        c.accel_bias = [0.0; 3];
        c.misalignment = [0.0; 3];
    }
    for c in &mut cfg.radars {
        c.time_offset = 0.0;
    }
    simulate(&cfg).unwrap()
}

fn grid_for(data: &Dataset) -> KnotGrid {
    calibration_grid(data, 0.08, 0.1).unwrap()
}

#[test]
fn single_imu_rotation_init_matches_truth() {
    let ds = ideal_sim(8.0, 1);
    let data = ds.dataset();
    // Finer knots keep the cubic approximation error of the smooth truth
    // curve well below the tolerance.
    let grid = calibration_grid(&data, 0.05, 0.1).unwrap();
    let out = init_rotation_spline(&data, grid, &EstimatorConfig::default()).unwrap();
    assert!(out.imu_rotations[0].angle() < 1e-9);
    let mut worst: f64 = 0.0;
    for k in 0..400 {
        let t = 0.02 * k as f64 + 0.01;
        let w = out.rotation.angular_velocity(t).unwrap();
        worst = worst.max((w - ds.trajectory.sample(t).kin.omega).amax());
    }
    assert!(worst < 1e-4, "{worst:e}");
}

#[test]
fn two_imu_relative_rotation_is_recovered_and_centered() {
    let ds = ideal_sim(8.0, 2);
    let data = ds.dataset();
    let out = init_rotation_spline(&data, grid_for(&data), &EstimatorConfig::default()).unwrap();
    let t = &ds.truth.imus;
    let rel_true = t[0].extrinsics.rotation.inverse() * t[1].extrinsics.rotation;
    let rel = out.imu_rotations[0].inverse() * out.imu_rotations[1];
    assert!(rel.angle_to(&rel_true).to_degrees() < 0.05);
    let sum: Vec3 = out.imu_rotations.iter().map(|r| r.log()).sum();
    assert!(sum.norm() < 1e-8, "{sum:?}");
}

#[test]
fn zero_gyro_streams_are_degenerate() {
    let samples: Vec<ImuMeasurement> =
        (0..400).map(|k| ImuMeasurement { t: k as f64 * 0.01, gyro: Vec3::zeros(), accel: Vec3::new(0.0, 0.0, 9.81) }).collect();
    let data = Dataset {
        imus: vec![ImuData { name: "imu0".into(), samples, gyro_noise: 1e-3, accel_noise: 1e-2 }],
        radars: vec![],
    };
    let err = init_rotation_spline(&data, grid_for(&data), &EstimatorConfig::default()).unwrap_err();
    assert!(matches!(err, InitError::Degenerate { stage: "INIT1", .. }), "{err}");
}

fn body_gravity(rot: &So3Spline, g: &Gravity, t: f64) -> Vec3 {
    rot.eval(t).unwrap().inverse_rotate(&g.vector())
}

#[test]
fn noiseless_extrinsics_and_gravity_init() {
    let ds = ideal_sim(20.0, 3);
    let data = ds.dataset();
    let est = EstimatorConfig::default();
    let cfg = InitConfig::default();
    let rot = init_rotation_spline(&data, grid_for(&data), &est).unwrap();
    let ext = init_extrinsics_gravity(&data, &rot, &est, &cfg).unwrap();
    let t = 10.0;
    let g_true = ds.trajectory.sample(t).kin.rot.inverse_rotate(&ds.truth.gravity.vector());
    let angle = body_gravity(&rot.rotation, &ext.gravity, t).angle(&g_true).to_degrees();
    assert!(angle < 0.1, "gravity {angle}°");
    for (e, tr) in ext.radars.iter().zip(&ds.truth.radars) {
        assert!(e.rotation.angle_to(&tr.extrinsics.rotation).to_degrees() < 0.2);
        assert!((e.translation - tr.extrinsics.translation).amax() < 0.01, "{:?}", e.translation);
    }
    for (p, tr) in ext.imu_translations.iter().zip(&ds.truth.imus) {
        assert!((p - tr.extrinsics.translation).amax() < 0.01);
    }

    let vel = init_velocity_spline(&data, &rot, &ext, &est, &cfg).unwrap();
    let mut sq = 0.0;
    let n = 500;
    for k in 0..n {
        let t = 0.5 + 19.0 * k as f64 / n as f64;
        let s = vel.state.kinematics(t).unwrap();
        let truth = ds.trajectory.sample(t).kin;
        let e = s.rot.inverse_rotate(&s.vel) - truth.rot.inverse_rotate(&truth.vel);
        sq += e.norm_squared();
    }
    let rms = (sq / n as f64).sqrt();
    assert!(rms < 1e-3, "velocity rms {rms:e}");
}

#[test]
fn single_imu_lever_arm_is_pinned_by_center_residual() {
    let ds = ideal_sim(10.0, 1);
    let data = ds.dataset();
    let est = EstimatorConfig::default();
    let rot = init_rotation_spline(&data, grid_for(&data), &est).unwrap();
    let ext = init_extrinsics_gravity(&data, &rot, &est, &InitConfig::default()).unwrap();
    assert!(ext.imu_translations[0].amax() < 1e-8);
}

#[test]
fn missing_radar_makes_velocity_unobservable() {
    let ds = ideal_sim(4.0, 1);
    let mut data = ds.dataset();
    data.radars.clear();
    let est = EstimatorConfig::default();
    let rot = init_rotation_spline(&data, grid_for(&data), &est).unwrap();
    let err = init_extrinsics_gravity(&data, &rot, &est, &InitConfig::default()).unwrap_err();
    assert_eq!(err.to_string(), "velocity unobservable without radar");
}

#[test]
fn constant_velocity_without_rotation_is_degenerate() {
    // Level platform moving at constant velocity; a forward-looking radar.
    let v = Vec3::new(2.0, 0.5, 0.0);
    let targets: Vec<Vec3> = (0..30).map(|k| Vec3::new(20.0 + k as f64, 7.0 * ((k * 7) % 11) as f64 - 35.0, (k % 5) as f64 - 2.0)).collect();
    let mut radar = Vec::new();
    for s in 0..100u64 {
        let t = s as f64 * 0.1;
        let pos = v * t;
        for p in &targets {
            let rel = p - pos;
            let (range, azimuth, elevation) = crate::models::cartesian_to_spherical(&rel);
            let doppler = crate::models::radar_doppler_predict(&rel, &v, range);
            radar.push(RadarTarget { t, scan_id: s, range, azimuth, elevation, doppler });
        }
    }
    let imu: Vec<ImuMeasurement> =
        (0..2001).map(|k| ImuMeasurement { t: k as f64 * 0.005, gyro: Vec3::zeros(), accel: Vec3::new(0.0, 0.0, 9.81) }).collect();
    let data = Dataset {
        imus: vec![ImuData { name: "imu0".into(), samples: imu, gyro_noise: 2e-3, accel_noise: 2e-2 }],
        radars: vec![RadarData { name: "radar0".into(), targets: radar, doppler_noise: 0.05 }],
    };
    let grid = grid_for(&data);
    let rot = RotationInit {
        rotation: So3Spline::identity(grid),
        imu_rotations: vec![Rotation::identity()],
        summary: init_rotation_spline_summary_stub(),
    };
    let err = init_extrinsics_gravity(&data, &rot, &EstimatorConfig::default(), &InitConfig::default()).unwrap_err();
    assert!(matches!(err, InitError::Degenerate { stage: "INIT2", .. }), "{err}");
}

fn init_rotation_spline_summary_stub() -> SolveSummary {
    SolveSummary {
        initial_cost: 0.0,
        final_cost: 0.0,
        iterations: 0,
        termination: crate::solver::Termination::NoFreeParameters,
        converged: true,
        log: vec![],
        dropped: Default::default(),
        bounded_blocks: vec![],
    }
}
