//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use radimu::estimator::information_magnitudes;
use radimu::evaluation::{aggregate, aggregate_text, AggregateRow, ErrorTable, FamilyRmse};
use radimu::io::{read_json, write_json, write_sim_dataset};
use radimu::models::CalibrationState;
use radimu::pipeline::calibrate;
use radimu::report::{CalibrationReport, SensorKind};
use radimu::sim::{simulate, SimConfig, FALLBACK_SIGMAS};
use radimu::spline::sample_times;
use serde::Serialize;

use crate::config::{LoadedConfig, RunConfig, SensorConfig};
use crate::error::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn write_out<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_json(path, value).map_err(|e| CliError::Other(e.to_string()))
}

fn read_report(path: &Path) -> Result<CalibrationReport, CliError> {
    let r: CalibrationReport = read_json(path)?;
    if r.schema_version != radimu::io::SCHEMA_VERSION {
        return Err(CliError::Data(format!(
            "{}: schema version {} is not supported (expected {})",
            path.display(),
            r.schema_version,
            radimu::io::SCHEMA_VERSION
        )));
    }
    Ok(r)
}

/// Roster written next to simulated data so `calibrate` can run on it
/// directly.
fn simulated_roster(sim: &SimConfig) -> Vec<SensorConfig> {
    let sigma = |v: f64, k: usize| if v > 0.0 { v } else { FALLBACK_SIGMAS[k] };
    let imus = sim.imus.iter().enumerate().map(|(i, c)| SensorConfig {
        id: format!("imu{i}"),
        kind: SensorKind::Imu,
        path: format!("imu{i}.csv").into(),
        rate: c.rate,
        gyro_noise: Some(sigma(c.gyro_noise, 0)),
        accel_noise: Some(sigma(c.accel_noise, 1)),
        doppler_noise: None,
    });
    let radars = sim.radars.iter().enumerate().map(|(j, c)| SensorConfig {
        id: format!("radar{j}"),
        kind: SensorKind::Radar,
        path: format!("radar{j}.csv").into(),
        rate: c.rate,
        gyro_noise: None,
        accel_noise: None,
        doppler_noise: Some(sigma(c.doppler_noise, 2)),
    });
    imus.chain(radars).collect()
}

/// Writes `imu{i}.csv`, `radar{j}.csv`, `truth.json` and a `run.toml`
/// roster into `out`.
pub fn simulate_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut sim = cfg.simulation.clone().unwrap_or_default();
    sim.seed = cfg.seed;
    sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let ds = simulate(&sim).map_err(|e| CliError::Config(e.to_string()))?;
    write_sim_dataset(out, &ds)?;
    let run = RunConfig {
        seed: cfg.seed,
        knot_spacing: cfg.knot_spacing,
        time_offset_bound: cfg.time_offset_bound,
        stages: cfg.stages.clone(),
        truth: Some("truth.json".into()),
        sensors: simulated_roster(&sim),
        ..RunConfig::default()
    };
    let text = toml::to_string(&run).map_err(|e| CliError::Other(e.to_string()))?;
    write_text(&out.join("run.toml"), &text)?;
    let targets: usize = ds.radar.iter().map(Vec::len).sum();
    println!(
        "simulated {} s: {} IMUs, {} radars ({targets} targets) -> {}",
        sim.duration,
        ds.imu.len(),
        ds.radar.len(),
        out.display()
    );
    Ok(())
}

/// Error table of `report` against `truth`, labelled with the report's
/// sensor ids.
pub fn error_table(report: &CalibrationReport, truth: &CalibrationReport) -> Result<ErrorTable, CliError> {
    table_for(report, &report.parameters(), Some(report.body_gravity.into()), truth)
}

fn table_for(
    report: &CalibrationReport,
    params: &radimu::models::CalibrationParameters,
    body_gravity: Option<radimu::lie::Vec3>,
    truth: &CalibrationReport,
) -> Result<ErrorTable, CliError> {
    let (ri, rr) = report.sensor_ids();
    let (ti, tr) = truth.sensor_ids();
    if (&ri, &rr) != (&ti, &tr) {
        return Err(CliError::Data(format!(
            "sensor rosters differ: report has {:?}, truth has {:?}",
            [ri, rr].concat(),
            [ti, tr].concat()
        )));
    }
    let tg = truth.body_gravity_at(report.reference_time).map_err(|e| CliError::Data(e.to_string()))?;
    let mut table = ErrorTable::compute(params, body_gravity, &truth.parameters(), &tg).map_err(|e| CliError::Data(e.to_string()))?;
    for (s, id) in table.sensors.iter_mut().zip(ri.iter().chain(&rr)) {
        s.sensor = id.clone();
    }
    Ok(table)
}

#[derive(Clone, Debug, Serialize)]
pub struct StageRmse {
    pub stage: String,
    #[serde(flatten)]
    pub rmse: FamilyRmse,
}

/// Per-family RMSE after every stage snapshot of `report`.
pub fn stage_rmse(report: &CalibrationReport, truth: &CalibrationReport) -> Result<Vec<StageRmse>, CliError> {
    report
        .snapshots
        .iter()
        .map(|s| {
            let t = table_for(report, &s.params, s.body_gravity.map(Into::into), truth)?;
            Ok(StageRmse { stage: s.stage.clone(), rmse: t.family_rmse() })
        })
        .collect()
}

fn stage_rmse_csv(runs: &[(usize, Vec<StageRmse>)]) -> String {
    let mut s = format!("run,stage,{}\n", FamilyRmse::NAMES.join(","));
    for (run, series) in runs {
        for r in series {
            let vals: Vec<String> = r.rmse.values().iter().map(|v| v.map_or(String::new(), |v| format!("{v:.9e}"))).collect();
            let _ = writeln!(s, "{run},{},{}", r.stage, vals.join(","));
        }
    }
    s
}

pub struct CalibrateOutcome {
    pub report: CalibrationReport,
    pub unconverged: Vec<String>,
}

/// Runs the pipeline on the configured roster.
pub fn run_calibration(lc: &LoadedConfig) -> Result<CalibrateOutcome, CliError> {
    let cfg = &lc.config;
    cfg.validate_calibration()?;
    let data = lc.load_dataset()?;
    let pcfg = cfg.pipeline();
    let cal = calibrate(&data, &pcfg)?;
    let (imus, radars) = lc.sensor_ids();
    let span = data.time_span().ok_or_else(|| CliError::Data("dataset is empty".into()))?;
    let mut report = CalibrationReport::new(&cal, (&imus, &radars), span, &pcfg, cfg.seed);
    if let Some(path) = lc.truth_path() {
        let truth = read_report(&path)?;
        report.errors = Some(error_table(&report, &truth)?);
    }
    let unconverged = cal.stages.iter().filter(|s| !s.summary.converged).map(|s| s.stage.clone()).collect();
    Ok(CalibrateOutcome { report, unconverged })
}

/// Writes `report.json`, `snapshots/<k>_<stage>.json` and
/// `stage_log.jsonl` into `out`.
pub fn calibrate_cmd(lc: &LoadedConfig, out: &Path) -> Result<(), CliError> {
    let CalibrateOutcome { report, unconverged } = run_calibration(lc)?;
    write_out(&out.join("report.json"), &report)?;
    for (k, s) in report.snapshots.iter().enumerate() {
        write_out(&out.join("snapshots").join(format!("{k}_{}.json", s.stage)), s)?;
    }
    write_with(&out.join("stage_log.jsonl"), |w| report.write_stage_log(w))?;
    for s in &report.stages {
        println!("{:<6} {:>3} iterations, cost {:.6e} -> {:.6e}", s.stage, s.iterations, s.initial_cost, s.final_cost);
    }
    if !report.time_offsets_estimated {
        println!("time offsets not estimated by this schedule");
    }
    if !report.intrinsics_estimated {
        println!("IMU intrinsics not estimated by this schedule");
    }
    if let Some(t) = &report.errors {
        print!("{}", t.to_text());
    }
    println!("report written to {}", out.join("report.json").display());
    if lc.config.require_convergence && !unconverged.is_empty() {
        return Err(CliError::Convergence(format!(
            "stage(s) {} stopped at the iteration limit",
            unconverged.join(", ")
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluatedRun {
    report: PathBuf,
    truth: PathBuf,
    errors: ErrorTable,
    stage_rmse: Vec<StageRmse>,
}

#[derive(Serialize)]
struct Evaluation {
    runs: Vec<EvaluatedRun>,
    aggregate: Vec<AggregateRow>,
}

/// Error tables of `reports` against `truths` (one shared or one per
/// report), plus their mean ± std when more than one report is given.
pub fn evaluate_cmd(reports: &[PathBuf], truths: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    if reports.is_empty() {
        return Err(CliError::Config("no reports given".into()));
    }
    if truths.len() != 1 && truths.len() != reports.len() {
        return Err(CliError::Config(format!("{} truth files for {} reports; give one or one per report", truths.len(), reports.len())));
    }
    let mut runs = Vec::new();
    for (k, rp) in reports.iter().enumerate() {
        let tp = &truths[if truths.len() == 1 { 0 } else { k }];
        let report = read_report(rp)?;
        let truth = read_report(tp)?;
        let errors = error_table(&report, &truth)?;
        let series = stage_rmse(&report, &truth)?;
        println!("== {} ==", rp.display());
        print!("{}", errors.to_text());
        runs.push(EvaluatedRun { report: rp.clone(), truth: tp.clone(), errors, stage_rmse: series });
    }
    let tables: Vec<ErrorTable> = runs.iter().map(|r| r.errors.clone()).collect();
    let agg = aggregate(&tables).map_err(|e| CliError::Data(e.to_string()))?;
    if runs.len() > 1 {
        println!("== mean ± std over {} runs ==", runs.len());
        print!("{}", aggregate_text(&agg));
    }
    if let Some(out) = out {
        let series: Vec<(usize, Vec<StageRmse>)> = runs.iter().enumerate().map(|(k, r)| (k, r.stage_rmse.clone())).collect();
        write_text(&out.join("stage_rmse.csv"), &stage_rmse_csv(&series))?;
        let mut csv = String::from("sensor,quantity,mean,std,runs\n");
        for r in &agg {
            let _ = writeln!(csv, "{},{},{:.9e},{:.9e},{}", r.sensor, r.quantity, r.mean, r.std, r.runs);
        }
        write_text(&out.join("aggregate.csv"), &csv)?;
        write_out(&out.join("evaluation.json"), &Evaluation { runs, aggregate: agg })?;
    }
    Ok(())
}

/// Plot data of a report: spline samples and control points, residual
/// histograms, per-iteration cost and, given the data, the magnitude of
/// every block of the information matrix.
pub fn plot_cmd(report_path: &Path, lc: Option<&LoadedConfig>, out: &Path, step: f64) -> Result<(), CliError> {
    if !(step > 0.0) {
        return Err(CliError::Config(format!("step must be positive, got {step}")));
    }
    let report = read_report(report_path)?;
    let export = report
        .splines
        .as_ref()
        .ok_or_else(|| CliError::Data(format!("{}: report holds no splines", report_path.display())))?;
    let (rot, vel) = export.splines().map_err(|e| CliError::Data(e.to_string()))?;
    let times = sample_times(report.data_span[0], report.data_span[1], step);
    let data_err = |e: std::io::Error| CliError::Data(e.to_string());
    let mut buf = Vec::new();
    rot.write_samples(&mut buf, &times).map_err(data_err)?;
    write_text(&out.join("rotation_samples.csv"), &String::from_utf8_lossy(&buf))?;
    buf.clear();
    vel.write_samples(&mut buf, &times).map_err(data_err)?;
    write_text(&out.join("velocity_samples.csv"), &String::from_utf8_lossy(&buf))?;
    write_with(&out.join("rotation_control_points.csv"), |w| rot.write_control_points(w))?;
    write_with(&out.join("velocity_control_points.csv"), |w| vel.write_control_points(w))?;

    let mut h = String::from("sensor,kind,lower,upper,count\n");
    for hist in &report.histograms {
        for (k, c) in hist.counts.iter().enumerate() {
            let _ = writeln!(h, "{},{},{},{},{c}", hist.sensor, hist.kind, hist.edges[k], hist.edges[k + 1]);
        }
        let _ = writeln!(h, "{},{},-inf,{},{}", hist.sensor, hist.kind, hist.edges[0], hist.below);
        let _ = writeln!(h, "{},{},{},inf,{}", hist.sensor, hist.kind, hist.edges[hist.edges.len() - 1], hist.above);
    }
    write_text(&out.join("histograms.csv"), &h)?;

    let mut c = String::from("stage,iteration,cost,gradient_max_norm,lambda,step_norm,gain_ratio,accepted\n");
    for s in &report.stages {
        for r in &s.log {
            let _ = writeln!(
                c,
                "{},{},{:.12e},{:.6e},{:.6e},{:.6e},{:.6e},{}",
                s.stage, r.iteration, r.cost, r.gradient_max_norm, r.lambda, r.step_norm, r.gain_ratio, r.accepted
            );
        }
    }
    write_text(&out.join("cost.csv"), &c)?;

    if let Some(lc) = lc {
        let data = lc.load_dataset()?;
        let est = report.config.as_ref().map_or_else(|| lc.config.pipeline().estimator, |c| c.estimator.clone());
        let state = CalibrationState { params: report.parameters(), rotation: rot, velocity: vel };
        let (names, mags) = information_magnitudes(&state, &data, &est)?;
        let mut s = String::from("row,col,row_block,col_block,magnitude\n");
        for (i, row) in mags.iter().enumerate() {
            for (j, m) in row.iter().enumerate().filter(|(_, m)| **m > 0.0) {
                let _ = writeln!(s, "{i},{j},{},{},{m:.6e}", names[i], names[j]);
            }
        }
        write_text(&out.join("sparsity.csv"), &s)?;
    }
    println!("plot data written to {} ({} spline samples)", out.display(), times.len());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    knot_spacing_ms: f64,
    rmse: Option<FamilyRmse>,
    max_translation_cm: Option<f64>,
    max_rotation_deg: Option<f64>,
    error: Option<String>,
}

/// Calibrates the configured dataset once per knot spacing and tabulates
/// the errors against the truth.
pub fn sweep_knots_cmd(lc: &LoadedConfig, out: &Path, spacings_ms: &[f64]) -> Result<(), CliError> {
    if lc.truth_path().is_none() {
        return Err(CliError::Config("sweep-knots needs a truth file in the config".into()));
    }
    if spacings_ms.is_empty() || spacings_ms.iter().any(|s| !(*s > 0.0)) {
        return Err(CliError::Config("knot spacings must be positive".into()));
    }
    let mut rows = Vec::new();
    for &ms in spacings_ms {
        let mut run = lc.clone();
        run.config.knot_spacing = ms * 1e-3;
        let row = match run_calibration(&run) {
            Ok(o) => {
                let t = o.report.errors.expect("truth configured");
                SweepRow {
                    knot_spacing_ms: ms,
                    rmse: Some(t.family_rmse()),
                    max_translation_cm: Some(t.max_translation_cm()),
                    max_rotation_deg: Some(t.max_rotation_deg()),
                    error: None,
                }
            }
            Err(e @ (CliError::Config(_) | CliError::Other(_))) => return Err(e),
            Err(e) => SweepRow { knot_spacing_ms: ms, rmse: None, max_translation_cm: None, max_rotation_deg: None, error: Some(e.to_string()) },
        };
        match (&row.rmse, &row.error) {
            (Some(r), _) => println!(
                "{ms:>6.1} ms: rotation {:.5} deg, translation {:.4} cm, offset {:.4} ms",
                r.rotation_deg, r.translation_cm, r.time_offset_ms
            ),
            (None, Some(e)) => println!("{ms:>6.1} ms: failed: {e}"),
            _ => {}
        }
        rows.push(row);
    }
    let mut csv = format!("knot_spacing_ms,{},max_translation_cm,max_rotation_deg,error\n", FamilyRmse::NAMES.join(","));
    for r in &rows {
        let fam: Vec<String> = match &r.rmse {
            Some(f) => f.values().iter().map(|v| v.map_or(String::new(), |v| format!("{v:.9e}"))).collect(),
            None => vec![String::new(); FamilyRmse::NAMES.len()],
        };
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.9e}"));
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.knot_spacing_ms,
            fam.join(","),
            opt(r.max_translation_cm),
            opt(r.max_rotation_deg),
            r.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    write_text(&out.join("knot_sweep.csv"), &csv)?;
    write_out(&out.join("knot_sweep.json"), &rows)?;
    Ok(())
}
