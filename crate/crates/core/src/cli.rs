//! Command-line front end. Every subcommand writes into
//! `<out>/<subcommand>-<seed>/`; exit codes are 0 on success, 1 on usage or
//! configuration errors and 2 on numerical failures, which also leave a
//! `diagnostics.json` behind.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationConfig, CalibrationDataset, ParamBounds, PassGeometry};
use crate::cost::{GoalProfile, PerPassCost};
use crate::error::{Error, Result};
use crate::gps::{self, GpsConfig};
use crate::harness::{self, ControllerSpec, RunConfig, RunReport, ScenarioConfig, SpeedProfile};
use crate::ilqr;
use crate::model::ModelParams;
use crate::policy::PolicyParams;

#[derive(Debug, Parser)]
#[command(name = "coldspray", version, about = "Cold-spray deposition control toolkit")]
pub struct Cli {
    /// JSON configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Root output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Constant-speed passes on the plant model, exported as CSV.
    Simulate {
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long, default_value_t = 1)]
        passes: usize,
    },
    /// Fit model parameters to a pass dataset (synthesized if none is given).
    Calibrate {
        /// Directory with `manifest.json` and the per-pass CSV files.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Single iLQR solve from the coupon to the target; dumps the controller.
    Ilqr,
    /// Guided policy search; writes the policy checkpoint.
    TrainGps,
    /// Per-pass closed loop with a trained policy.
    RunClosedLoop {
        #[arg(long)]
        policy: PathBuf,
    },
    /// Constant or varying speed baseline.
    Baseline {
        #[arg(long, value_enum, default_value_t = BaselineKind::Constant)]
        kind: BaselineKind,
    },
    /// Policy and both baselines on the same seed, with material savings.
    Compare {
        #[arg(long)]
        policy: PathBuf,
    },
    /// Line plots of CSV columns against the first column.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Constant,
    Varying,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Calibrate { .. } => "calibrate",
            Command::Ilqr => "ilqr",
            Command::TrainGps => "train-gps",
            Command::RunClosedLoop { .. } => "run-closed-loop",
            Command::Baseline { .. } => "baseline",
            Command::Compare { .. } => "compare",
            Command::Plot { .. } => "plot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub constant_speed: f64,
    /// Position-indexed speeds; `None` uses 5 mm/s over the flats and 1 mm/s
    /// over the notch with 10-cell ramps.
    pub varying: Option<SpeedProfile>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            constant_speed: 1.0,
            varying: None,
        }
    }
}

impl BaselineConfig {
    pub fn constant(&self) -> ControllerSpec {
        ControllerSpec::ConstantSpeed {
            speed: self.constant_speed,
        }
    }

    pub fn varying(&self, scenario: &ScenarioConfig) -> ControllerSpec {
        ControllerSpec::VaryingSpeed {
            profile: self
                .varying
                .clone()
                .unwrap_or_else(|| SpeedProfile::notch_default(scenario, 5.0, 1.0, 10.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub geometry: PassGeometry,
    /// Speeds of the synthesized passes (mm/s).
    pub speeds: Vec<f64>,
    /// Measurement noise of the synthesized passes (mm).
    pub noise_sigma: f64,
    pub bounds: ParamBounds,
    pub init: ModelParams,
    pub solver: CalibrationConfig,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            geometry: PassGeometry::default(),
            speeds: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            noise_sigma: 0.0,
            bounds: ParamBounds::default(),
            init: ModelParams {
                rho: 1.0,
                a: 2.0,
                b: 1.0,
                c: 1.0,
                kappa: 3.0,
            },
            solver: CalibrationConfig::default(),
        }
    }
}

/// Everything a subcommand may need, read from `--config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub scenario: ScenarioConfig,
    pub gps: GpsConfig,
    pub run: RunConfig,
    pub baselines: BaselineConfig,
    pub calibration: CalibrationSettings,
}

impl AppConfig {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Applies `seed` to every random stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gps.seed = seed;
        self.run.seed = seed;
        self.calibration.solver.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.gps.validate()?;
        self.run.validate()?;
        if self.gps.pass_steps != self.run.pass_steps {
            return Err(Error::InvalidConfig(format!(
                "gps.pass_steps ({}) and run.pass_steps ({}) differ",
                self.gps.pass_steps, self.run.pass_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct Diagnostics<'a> {
    command: &'a str,
    seed: u64,
    numerical: bool,
    error: String,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let dir = cli.out.join(format!("{}-{}", cli.command.name(), cli.seed));
    match execute(&cli, &dir) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let numerical = e.is_numerical();
            let diag = Diagnostics {
                command: cli.command.name(),
                seed: cli.seed,
                numerical,
                error: e.to_string(),
            };
            if fs::create_dir_all(&dir).is_ok() {
                if let Ok(text) = serde_json::to_string_pretty(&diag) {
                    let _ = fs::write(dir.join("diagnostics.json"), text + "\n");
                }
            }
            if numerical {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cli: &Cli, dir: &Path) -> Result<()> {
    let config = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    }
    .with_seed(cli.seed);
    config.validate()?;
    fs::create_dir_all(dir)?;
    match &cli.command {
        Command::Simulate { speed, passes } => simulate(&config, *speed, *passes, dir),
        Command::Calibrate { dataset } => calibrate(&config, dataset.as_deref(), cli.seed, dir),
        Command::Ilqr => single_ilqr(&config, dir),
        Command::TrainGps => train_gps(&config, dir),
        Command::RunClosedLoop { policy } => {
            let policy = PolicyParams::load(policy)?;
            let report = harness::closed_loop_run(&config.scenario, &config.run, &policy)?;
            write_run(&report, &config.scenario, dir)
        }
        Command::Baseline { kind } => {
            let spec = match kind {
                BaselineKind::Constant => config.baselines.constant(),
                BaselineKind::Varying => config.baselines.varying(&config.scenario),
            };
            let report = harness::baseline_run(&config.scenario, &config.run, &spec)?;
            write_run(&report, &config.scenario, dir)
        }
        Command::Compare { policy } => compare(&config, policy, dir),
        Command::Plot { input } => input.iter().try_for_each(|p| plot_csv(p, dir)),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Columns of possibly different lengths; short columns leave empty cells.
fn write_columns(path: &Path, headers: &[String], columns: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(headers)?;
    let rows = columns.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..rows {
        w.write_record(columns.iter().map(|c| c.get(r).map_or(String::new(), |v| v.to_string())))?;
    }
    w.flush()?;
    Ok(())
}

fn positions(scenario: &ScenarioConfig) -> Vec<f64> {
    (0..scenario.grid.n_cells).map(|i| scenario.grid.x(i)).collect()
}

fn simulate(config: &AppConfig, speed: f64, passes: usize, dir: &Path) -> Result<()> {
    let sc = &config.scenario;
    let surfaces = harness::simulate_passes(sc, speed, passes)?;
    let mut headers = vec!["x_mm".to_string(), "initial_mm".to_string()];
    let mut columns = vec![positions(sc), sc.initial_surface()?.heights];
    for (k, s) in surfaces.iter().enumerate() {
        headers.push(format!("pass_{}_mm", k + 1));
        columns.push(s.heights.clone());
    }
    write_columns(&dir.join("profiles.csv"), &headers, &columns)?;
    surfaces
        .last()
        .cloned()
        .unwrap_or(sc.initial_surface()?)
        .write_csv(dir.join("final_profile.csv"))
}

fn calibrate(config: &AppConfig, dataset: Option<&Path>, seed: u64, dir: &Path) -> Result<()> {
    let cal = &config.calibration;
    let ds = match dataset {
        Some(p) => CalibrationDataset::load(p)?,
        None => {
            let ds = calibration::synthesize_dataset(
                &config.scenario.grid,
                &config.scenario.coupon,
                &cal.geometry,
                &config.scenario.true_params,
                &cal.speeds,
                cal.noise_sigma,
                seed,
            )?;
            ds.save(dir.join("dataset"))?;
            ds
        }
    };
    let (params, report) = calibration::fit(&ds, &cal.bounds, &cal.init, &cal.solver)?;
    write_json(&dir.join("params.json"), &params)?;
    write_json(&dir.join("report.json"), &report)?;
    let mut w = csv::Writer::from_path(dir.join("predictions.csv"))?;
    w.write_record(["pass", "split", "x_mm", "measured_mm", "predicted_mm"])?;
    for (split, fits) in [("train", &report.train), ("validation", &report.validation)] {
        for f in fits {
            for (i, (m, p)) in f.measured.iter().zip(&f.predicted).enumerate() {
                w.write_record([
                    f.pass.to_string(),
                    split.to_string(),
                    ds.grid.x(i).to_string(),
                    m.to_string(),
                    p.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    println!(
        "rho {} a {} b {} c {} kappa {}  objective {:.3e}",
        params.rho, params.a, params.b, params.c, params.kappa, report.objective
    );
    Ok(())
}

fn single_ilqr(config: &AppConfig, dir: &Path) -> Result<()> {
    let problem = config.scenario.gps_problem()?;
    let cost = PerPassCost {
        weights: config.gps.weights,
        goal: GoalProfile {
            heights: problem.target.heights.clone(),
        },
        mode: problem.dynamics.mode,
    };
    let (controller, report) = ilqr::solve(
        &problem.start.to_vector(),
        &cost,
        config.gps.pass_steps,
        &problem.dynamics,
        &config.gps.ilqr,
        None,
    )?;
    controller.save(dir.join("controller.json"))?;
    write_json(&dir.join("solve_report.json"), &report)?;
    let n = config.scenario.grid.n_cells;
    let last = &controller.nominal_states[controller.horizon()];
    write_columns(
        &dir.join("nominal.csv"),
        &["x_mm", "initial_mm", "final_mm", "target_mm"].map(String::from),
        &[
            positions(&config.scenario),
            problem.start.surface.heights.clone(),
            last.rows(0, n).iter().copied().collect(),
            problem.target.heights.clone(),
        ],
    )?;
    write_columns(
        &dir.join("speeds.csv"),
        &["step", "speed_mm_s"].map(String::from),
        &[
            (0..controller.horizon()).map(|t| t as f64).collect(),
            controller.nominal_controls.iter().map(|u| u[0]).collect(),
        ],
    )?;
    println!("cost {:.6} after {} iterations", report.final_cost(), report.iterations);
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    iterations: usize,
    converged: bool,
    initial_residual: f64,
    final_residual: f64,
}

fn train_gps(config: &AppConfig, dir: &Path) -> Result<()> {
    let problem = config.scenario.gps_problem()?;
    let state = gps::run(&config.gps, &problem)?;
    state.policy.save(dir.join("policy.json"))?;
    write_json(&dir.join("diagnostics.json"), &state.diagnostics)?;
    let summary = TrainSummary {
        iterations: state.iteration,
        converged: state.converged,
        initial_residual: state.diagnostics.first().map_or(f64::NAN, |d| d.residual_before_training),
        final_residual: state.diagnostics.last().map_or(f64::NAN, |d| d.residual),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{} iterations, residual {:.4} -> {:.4}",
        summary.iterations, summary.initial_residual, summary.final_residual
    );
    Ok(())
}

fn write_run(report: &RunReport, scenario: &ScenarioConfig, dir: &Path) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    let mut headers = vec!["x_mm".to_string(), "initial_mm".to_string()];
    let mut columns = vec![positions(scenario), report.initial_surface.clone()];
    for p in &report.passes {
        headers.push(format!("pass_{}_mm", p.pass + 1));
        columns.push(p.surface_after.clone());
    }
    headers.push("target_mm".into());
    columns.push(report.target.clone());
    write_columns(&dir.join("profiles.csv"), &headers, &columns)?;

    let mut headers = vec!["step".to_string()];
    let longest = report.passes.iter().map(|p| p.speeds.len()).max().unwrap_or(0);
    let mut columns = vec![(0..longest).map(|t| t as f64).collect::<Vec<_>>()];
    for p in &report.passes {
        headers.push(format!("pass_{}_mm_s", p.pass + 1));
        columns.push(p.speeds.clone());
    }
    write_columns(&dir.join("speeds.csv"), &headers, &columns)?;
    println!(
        "{}: {} passes, material {:.3} mm^2, rmse {:.4} mm, tolerance {}",
        report.controller,
        report.passes.len(),
        report.material_volume,
        report.terminal_rmse,
        if report.reached_tolerance { "met" } else { "missed" }
    );
    Ok(())
}

fn compare(config: &AppConfig, policy: &Path, dir: &Path) -> Result<()> {
    let policy = PolicyParams::load(policy)?;
    let sc = &config.scenario;
    let cmp = harness::compare(
        sc,
        &config.run,
        &policy,
        &config.baselines.constant(),
        &config.baselines.varying(sc),
    )?;
    write_json(&dir.join("comparison.json"), &cmp)?;
    let mut w = csv::Writer::from_path(dir.join("savings.csv"))?;
    w.write_record([
        "controller",
        "passes",
        "material_volume",
        "terminal_rmse",
        "max_deficit",
        "reached_tolerance",
        "gpsc_savings_pct",
    ])?;
    for r in &cmp.rows {
        w.write_record([
            r.controller.clone(),
            r.passes.to_string(),
            r.material_volume.to_string(),
            r.terminal_rmse.to_string(),
            r.max_deficit.to_string(),
            r.reached_tolerance.to_string(),
            (100.0 * r.gpsc_savings).to_string(),
        ])?;
        println!(
            "{:<9} passes {:>2}  material {:>9.3}  rmse {:.4}  savings {:>6.1}%",
            r.controller,
            r.passes,
            r.material_volume,
            r.terminal_rmse,
            100.0 * r.gpsc_savings
        );
    }
    w.flush()?;
    Ok(())
}

fn plot_csv(input: &Path, dir: &Path) -> Result<()> {
    let mut r = csv::Reader::from_path(input)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if headers.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "{} needs an x column and at least one series",
            input.display()
        )));
    }
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); headers.len() - 1];
    for rec in r.records() {
        let rec = rec?;
        let Some(Ok(x)) = rec.get(0).map(|s| s.trim().parse::<f64>()) else {
            continue;
        };
        for (k, s) in series.iter_mut().enumerate() {
            if let Some(Ok(y)) = rec.get(k + 1).map(|v| v.trim().parse::<f64>()) {
                s.push((x, y));
            }
        }
    }
    let points = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0.is_finite() && y0.is_finite()) {
        return Err(Error::InvalidConfig(format!("{} has no numeric rows", input.display())));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0).max(1e-9);
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let out = dir.join(format!("{stem}.svg"));
    let plot_err = |e: &dyn std::fmt::Display| Error::Io(std::io::Error::other(e.to_string()));
    let root = SVGBackend::new(&out, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .caption(stem, ("sans-serif", 20))
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc(headers[0].as_str())
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (k, s) in series.into_iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(s, color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(headers[k + 1].as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}
