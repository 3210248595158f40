use super::*;
use crate::models::ImuData;
use crate::sim::{simulate, SimConfig, SimDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_sim(duration: f64, noiseless: bool) -> SimDataset {
    let mut cfg = SimConfig { duration, ..SimConfig::default() };
    if noiseless {
        cfg = cfg.noiseless();
    }
    simulate(&cfg).unwrap()
}

fn truth_problem(ds: &SimDataset) -> (Problem, StateBlocks, ResidualLabels, CalibrationState) {
    let data = ds.dataset();
    let cfg = EstimatorConfig::default();
    let grid = calibration_grid(&data, cfg.knot_spacing, cfg.time_offset_bound).unwrap();
    let state = ds.truth_state(grid).unwrap();
    let (p, sb, labels) = build_problem(&state, &data, &cfg).unwrap();
    (p, sb, labels, state)
}

fn lift_intr(s: &ImuState) -> (Rot3<f64>, Vec3, Vec3) {
    (s.intrinsics.misalignment, s.intrinsics.gyro_bias, s.intrinsics.accel_bias)
}

#[test]
fn noiseless_residuals_vanish_at_analytic_truth() {
    let ds = small_sim(6.0, true);
    let g = ds.truth.gravity.vector();
    let mut worst: f64 = 0.0;
    for (stream, s) in ds.imu.iter().zip(&ds.truth.imus) {
        let (mis, bg, ba) = lift_intr(s);
        for m in stream {
            let k = ds.trajectory.sample(m.t + s.time_offset).kin;
            let ext = &s.extrinsics;
            let (eg, ea) = imu_error(&k, &ext.rotation, &ext.translation, &g, &mis, &bg, &ba, m);
            let eg_only = gyro_error(&k, &ext.rotation, &mis, &bg, m);
            worst = worst.max(eg.amax()).max(ea.amax()).max(eg_only.amax());
        }
    }
    for (stream, s) in ds.radar.iter().zip(&ds.truth.radars) {
        for t in stream {
            let k = ds.trajectory.sample(t.t + s.time_offset).kin;
            let pt = DopplerPoint { position: t.position(), range: t.range, doppler: t.doppler };
            worst = worst.max(radar_error(&k, &s.extrinsics.rotation, &s.extrinsics.translation, &pt).abs());
        }
    }
    assert!(worst < 1e-8, "worst residual {worst:e}");
    let (r, p, t) = center_sums(&ds.truth);
    assert!(r < 1e-12 && p < 1e-12 && t < 1e-12);
}

#[test]
fn fitted_truth_state_has_small_whitened_residuals() {
    let ds = small_sim(6.0, true);
    let (p, _, labels, _) = truth_problem(&ds);
    let stats = standardized_residuals(&p, &labels);
    for ((sensor, kind), v) in &stats {
        let s = ResidualStats::from_values(sensor, kind, v);
        // Spline approximation error only, far below one noise sigma.
        assert!(s.rms < 0.05, "{sensor}/{kind}: rms {}", s.rms);
    }
    assert!(stats.keys().any(|(s, k)| s == "radar2" && k == "radar"));
    assert!(stats.keys().any(|(s, k)| s == "imu1" && k == "accel"));
}

#[test]
fn gyro_bias_perturbation_shifts_residual_exactly() {
    let ds = small_sim(2.0, true);
    let s = &ds.truth.imus[0];
    let m = ds.imu[0][100];
    let k = ds.trajectory.sample(m.t + s.time_offset).kin;
    let delta = Vec3::new(1e-3, -2e-3, 5e-4);
    let base = gyro_error(&k, &s.extrinsics.rotation, &Rotation::identity(), &s.intrinsics.gyro_bias, &m);
    let moved = gyro_error(&k, &s.extrinsics.rotation, &Rotation::identity(), &(s.intrinsics.gyro_bias + delta), &m);
    assert!((moved - base - delta).amax() < 1e-15);
}

fn constant_rate_state(rate: Vec3, grid: KnotGrid) -> CalibrationState {
    let cps = (0..grid.count).map(|k| Rotation::exp(&(rate * (k as f64 * grid.dt)))).collect();
    CalibrationState {
        params: CalibrationParameters {
            imus: vec![ImuState {
                extrinsics: SensorExtrinsics::default(),
                time_offset: 0.0,
                intrinsics: ImuIntrinsics::default(),
            }],
            radars: vec![],
            gravity: Gravity::down(),
        },
        rotation: So3Spline::new(grid, cps).unwrap(),
        velocity: R3Spline::constant(grid, Vec3::zeros()),
    }
}

fn gyro_only_problem(state: &CalibrationState, samples: Vec<ImuMeasurement>) -> (Problem, StateBlocks) {
    let data = Dataset {
        imus: vec![ImuData { name: "imu0".into(), samples, gyro_noise: 1.0, accel_noise: 1.0 }],
        radars: vec![],
    };
    let mut p = Problem::new();
    let sb = StateBlocks::add(&mut p, state).unwrap();
    let sel = ResidualSelection { gyro_only: true, radar: false, ..ResidualSelection::full() };
    add_residuals(&mut p, &sb, &data, &EstimatorConfig::default(), sel).unwrap();
    (p, sb)
}

#[test]
fn time_offset_is_invisible_under_constant_rate_only() {
    let grid = KnotGrid::new(0.0, 0.1, 40).unwrap();
    let m = ImuMeasurement { t: 1.5, gyro: Vec3::new(0.1, -0.2, 0.3), accel: Vec3::zeros() };
    let state = constant_rate_state(Vec3::new(0.1, -0.2, 0.3), grid);
    let (mut p, sb) = gyro_only_problem(&state, vec![m]);
    let r0 = p.evaluate_block(0).unwrap();
    assert!(r0.iter().all(|v| v.abs() < 1e-12), "{r0:?}");
    p.set_values(sb.imus[0].time_offset, &[0.037]);
    let r1 = p.evaluate_block(0).unwrap();
    assert!(r1.iter().all(|v| v.abs() < 1e-12));

    // Quadratically growing angle: the rate changes with time.
    let cps = (0..grid.count).map(|k| Rotation::exp(&Vec3::new(0.0, 0.0, 0.05 * (k * k) as f64 * 0.01))).collect();
    let chirp = CalibrationState { rotation: So3Spline::new(grid, cps).unwrap(), ..state };
    let (mut p, sb) = gyro_only_problem(&chirp, vec![m]);
    let a = p.evaluate_block(0).unwrap();
    p.set_values(sb.imus[0].time_offset, &[0.037]);
    let b = p.evaluate_block(0).unwrap();
    assert!((a[2] - b[2]).abs() > 1e-4);
}

#[test]
fn zero_lever_arm_reduces_to_central_acceleration() {
    let ds = small_sim(2.0, true);
    let k = ds.trajectory.sample(0.7).kin;
    let g = ds.truth.gravity.vector();
    let r = Rotation::exp(&Vec3::new(0.1, 0.2, -0.3));
    let f = imu_specific_force(&k, &r, &Vec3::zeros(), &g);
    let expected = r.inverse_rotate(&k.rot.inverse_rotate(&(k.acc - g)));
    assert!((f - expected).amax() < 1e-14);
    let v = radar_velocity(&k, &r, &Vec3::zeros());
    assert!((v - r.inverse_rotate(&k.rot.inverse_rotate(&k.vel))).amax() < 1e-14);
}

#[test]
fn static_suite_radar_residual_is_range_times_doppler() {
    let k = Kinematics {
        rot: Rotation::exp(&Vec3::new(0.2, 0.0, 1.0)),
        omega: Vec3::zeros(),
        alpha: Vec3::zeros(),
        vel: Vec3::zeros(),
        acc: Vec3::zeros(),
    };
    let pt = DopplerPoint { position: Vec3::new(3.0, 4.0, 0.0), range: 5.0, doppler: 0.07 };
    let r = radar_error(&k, &Rotation::identity(), &Vec3::new(0.3, 0.1, 0.0), &pt);
    assert!((r - 0.35).abs() < 1e-15);
}

#[test]
fn center_residual_examples() {
    let phi = Vec3::new(0.1, -0.3, 0.2);
    let blocks_for = |vals: Vec<Vec<f64>>, man: Manifold| {
        let mut p = Problem::new();
        let ids: Vec<BlockId> = vals.into_iter().enumerate().map(|(i, v)| p.add_block(format!("b{i}"), man, v, 0.0)).collect();
        (p, ids)
    };
    let (mut p, ids) = blocks_for(
        vec![Rotation::exp(&phi).wxyz().to_vec(), Rotation::exp(&-phi).wxyz().to_vec()],
        Manifold::So3,
    );
    p.add_residual(Box::new(AutoDiff(CenterResidual { kind: CenterKind::Rotation, blocks: ids, sigma: 1.0 })), Loss::Trivial);
    assert!(p.evaluate_block(0).unwrap().iter().all(|v| v.abs() < 1e-15));

    let (mut p, ids) = blocks_for(vec![vec![0.003], vec![-0.003]], Manifold::Euclidean(1));
    p.add_residual(Box::new(AutoDiff(CenterResidual { kind: CenterKind::Time, blocks: ids, sigma: 1e-6 })), Loss::Trivial);
    assert!(p.evaluate_block(0).unwrap()[0].abs() < 1e-9);

    let (mut p, ids) = blocks_for(vec![vec![0.0; 3]], Manifold::Euclidean(3));
    p.add_residual(
        Box::new(AutoDiff(CenterResidual { kind: CenterKind::Translation, blocks: ids, sigma: 1e-6 })),
        Loss::Trivial,
    );
    assert_eq!(p.evaluate_block(0).unwrap(), vec![0.0; 3]);
}

/// Perturbs every block of the problem by a random tangent step.
fn perturb(p: &mut Problem, rng: &mut ChaCha8Rng, size: f64) {
    for b in p.blocks.iter_mut() {
        let n = b.manifold.tangent_dim();
        let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(-size..size)).collect();
        if b.name.ends_with("time_offset") {
            d[0] *= 0.01;
        }
        let x = b.values.clone();
        b.manifold.plus(&x, &d, &mut b.values);
    }
}

#[test]
fn autodiff_matches_finite_differences_for_every_kind() {
    let ds = small_sim(3.0, false);
    let (mut p, sb, labels, _) = truth_problem(&ds);
    sb.apply_stage(&mut p, Stage::Full, 0.1, (0.0, 1e9));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    perturb(&mut p, &mut rng, 0.05);
    let mut seen = std::collections::BTreeSet::new();
    for (i, (_, kind)) in labels.labels.iter().enumerate() {
        if i % 37 != 0 && seen.contains(kind) {
            continue;
        }
        let (ad, fd, _) = p.jacobian_pair(i).unwrap();
        let scale = ad.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
        let err = ad.iter().zip(&fd).fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
        assert!(err / scale < 1e-5, "{kind} block {i}: {err:e} / {scale:e}");
        seen.insert(*kind);
    }
    for k in ["imu", "radar", "center_rotation", "center_translation", "center_time"] {
        assert!(seen.contains(k), "missing {k}");
    }
}

#[test]
fn jacobian_outside_active_range_is_structurally_absent() {
    let ds = small_sim(2.0, true);
    let (p, sb, _, _) = truth_problem(&ds);
    let rb = &p.residual_blocks()[10];
    let plan = rb.cost.plan(&p.blocks).unwrap();
    let seg = plan.aux[0] as usize;
    for (k, id) in sb.rot_cps.iter().enumerate() {
        assert_eq!(plan.blocks.contains(id), (seg..seg + 4).contains(&k));
    }
}

#[test]
fn radar_offset_equals_shifted_timestamps() {
    let ds = small_sim(3.0, true);
    let (mut p, sb, labels, state) = truth_problem(&ds);
    let idx = labels.labels.iter().position(|(s, k)| s == "radar1" && *k == "radar").unwrap() + 5;
    let delta = 0.004;
    let off = sb.radars[1].time_offset;
    let base = p.values(off)[0];
    p.set_values(off, &[base + delta]);
    let moved = p.evaluate_block(idx).unwrap();

    let mut data = ds.dataset();
    for t in &mut data.radars[1].targets {
        t.t += delta;
    }
    let (q, _, _) = build_problem(&state, &data, &EstimatorConfig::default()).unwrap();
    let shifted = q.evaluate_block(idx).unwrap();
    for (a, b) in moved.iter().zip(&shifted) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn common_rotation_of_sensors_and_world_leaves_measurement_residuals_unchanged() {
    let ds = small_sim(3.0, false);
    let (p, _, labels, state) = truth_problem(&ds);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dr = Rotation::exp(&Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5)));
    let mut moved = state.clone();
    // Body frame b' = b·ΔR: R'(t) = R(t)·ΔR, sensor rotations ΔRᵀ·R_s,
    // lever arms ΔRᵀ·p_s.
    for cp in &mut moved.rotation.control_points {
        *cp = *cp * dr;
    }
    for s in &mut moved.params.imus {
        s.extrinsics.rotation = dr.inverse() * s.extrinsics.rotation;
        s.extrinsics.translation = dr.inverse_rotate(&s.extrinsics.translation);
    }
    for s in &mut moved.params.radars {
        s.extrinsics.rotation = dr.inverse() * s.extrinsics.rotation;
        s.extrinsics.translation = dr.inverse_rotate(&s.extrinsics.translation);
    }
    let (q, _, _) = build_problem(&moved, &ds.dataset(), &EstimatorConfig::default()).unwrap();
    let mut center_moved = false;
    for (i, (_, kind)) in labels.labels.iter().enumerate() {
        let (a, b) = (p.evaluate_block(i).unwrap(), q.evaluate_block(i).unwrap());
        let diff = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if kind.starts_with("center") {
            center_moved |= diff > 1.0;
        } else {
            assert!(diff < 1e-8, "{kind} block {i}: {diff:e}");
        }
    }
    assert!(center_moved);
}

#[test]
fn noiseless_batch_recovers_truth_from_perturbed_start() {
    let ds = small_sim(8.0, true);
    let (p, sb, _, truth) = truth_problem(&ds);
    let mut start = sb.read(&p);
    for s in &mut start.params.imus {
        s.extrinsics.translation += Vec3::new(0.01, -0.01, 0.005);
        s.time_offset = 0.0;
    }
    for s in &mut start.params.radars {
        s.extrinsics.rotation = s.extrinsics.rotation * Rotation::exp(&Vec3::new(0.01, 0.0, -0.01));
        s.time_offset = 0.0;
    }
    let cfg = EstimatorConfig::default();
    let out = run_batch(&start, &ds.dataset(), &cfg).unwrap();
    assert_eq!(out.stages.len(), 3);
    for (e, t) in out.state.params.radars.iter().zip(&truth.params.radars) {
        assert!((e.extrinsics.translation - t.extrinsics.translation).amax() < 1e-3);
        assert!(e.extrinsics.rotation.angle_to(&t.extrinsics.rotation) < 1e-4);
        assert!((e.time_offset - t.time_offset).abs() < 1e-4, "{} vs {}", e.time_offset, t.time_offset);
    }
    let (r, p, t) = center_sums(&out.state.params);
    assert!(r < 1e-8 && p < 1e-8 && t < 1e-8, "{r:e} {p:e} {t:e}");
}

#[test]
fn sparsity_has_four_block_spline_band() {
    // Fifteen control points, as in the small demonstration problem.
    let ds = small_sim(1.5, true);
    let mut data = ds.dataset();
    for d in &mut data.imus {
        d.samples.retain(|m| m.t < 0.85);
    }
    for d in &mut data.radars {
        d.targets.retain(|m| m.t < 0.85);
    }
    let grid = KnotGrid::new(-0.05, 0.08, 15).unwrap();
    let state = ds.truth_state(grid).unwrap();
    let (mut p, sb, _) = build_problem(&state, &data, &EstimatorConfig::default()).unwrap();
    sb.apply_stage(&mut p, Stage::Full, 0.1, (0.0, 1e9));
    let sp = p.sparsity();
    let idx = |name: &str| sp.names.iter().position(|n| n == name);
    for a in 1..15 {
        for b in 1..15 {
            let (ia, ib) = (idx(&format!("rot_cp[{a}]")).unwrap(), idx(&format!("rot_cp[{b}]")).unwrap());
            let within = (a as i64 - b as i64).abs() <= 3;
            assert_eq!(sp.occupied[ia][ib], within, "{a},{b}");
        }
    }
    let g = idx("gravity").unwrap();
    assert!(idx("rot_cp[0]").is_none());
    assert!((0..sp.names.len()).all(|k| sp.occupied[g][k] || sp.names[k].contains("radar") || sp.names[k].starts_with("imu")));
}
