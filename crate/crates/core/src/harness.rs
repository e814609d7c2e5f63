//! Per-pass closed-loop deployment, baselines and material metrics.
//!
//! Every pass starts with the nozzle `start_offset` before the first cell.
//! The neural controller measures the true surface, plans a whole pass of
//! speeds by rolling the nominal model forward under the policy, then runs
//! those speeds open loop on the true plant.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gps::{derive_seed, GpsProblem};
use crate::ilqr::{Dynamics, PassDynamics};
use crate::model::{
    add_measurement_noise, make_coupon, ControlMode, CouponSpec, DepositionModel, GridSpec, ModelParams, NoiseSpec,
    NozzleState, SimState, SurfaceProfile,
};
use crate::policy::PolicyParams;

/// Upper bound on control steps of a baseline pass.
const MAX_BASELINE_STEPS: usize = 1_000_000;

/// Coupon, nozzle set-up and the two model parameter sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub grid: GridSpec,
    pub coupon: CouponSpec,
    /// Nozzle height above the datum of the notch bottom (mm).
    pub nozzle_height: f64,
    /// Distance before the first cell where each pass starts (mm).
    pub start_offset: f64,
    /// A baseline pass ends once the nozzle is this far past the last cell.
    pub exit_margin: f64,
    /// Euler steps per control step.
    pub substeps: usize,
    /// Plant parameters.
    pub true_params: ModelParams,
    /// Parameters the controller plans with.
    pub nominal_params: ModelParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let true_params = ModelParams::default();
        Self {
            grid: GridSpec {
                x0: 0.5,
                dx: 1.0,
                n_cells: 100,
                dt: 0.5,
            },
            coupon: CouponSpec::default(),
            nozzle_height: 13.0,
            start_offset: 10.0,
            exit_margin: 10.0,
            substeps: 4,
            true_params,
            nominal_params: true_params.perturbed(DEFAULT_MISMATCH),
        }
    }
}

/// Relative deviation of the default nominal parameters from the plant's.
pub const DEFAULT_MISMATCH: [f64; 5] = [0.1, -0.1, 0.1, -0.1, 0.1];

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.true_params.validate()?;
        self.nominal_params.validate()?;
        if self.substeps == 0 {
            return Err(Error::InvalidConfig("substeps must be >= 1".into()));
        }
        if !(self.start_offset >= 0.0 && self.exit_margin >= 0.0) {
            return Err(Error::InvalidConfig("start_offset and exit_margin must be >= 0".into()));
        }
        Ok(())
    }

    /// The default coupon on a coarse 20-cell grid.
    pub fn desk() -> Self {
        Self {
            grid: GridSpec {
                x0: 2.5,
                dx: 5.0,
                n_cells: 20,
                dt: 0.5,
            },
            ..Self::default()
        }
    }

    pub fn initial_surface(&self) -> Result<SurfaceProfile> {
        make_coupon(&self.coupon, &self.grid)
    }

    /// Flat fill to the top of the coupon.
    pub fn target(&self) -> Result<SurfaceProfile> {
        let s = self.initial_surface()?;
        Ok(SurfaceProfile::flat(s.len(), s.max()))
    }

    pub fn start_nozzle(&self) -> NozzleState {
        NozzleState {
            position: self.grid.x0 - self.start_offset,
            height: self.nozzle_height,
            angle: 0.0,
        }
    }

    pub fn initial_state(&self) -> Result<SimState> {
        Ok(SimState {
            surface: self.initial_surface()?,
            nozzle: self.start_nozzle(),
        })
    }

    /// Speed-only pass dynamics with the given parameters; the clearance
    /// floor is taken from the initial coupon.
    pub fn pass_dynamics(&self, params: ModelParams) -> Result<PassDynamics> {
        self.validate()?;
        let model = DepositionModel::new(self.grid, params, &self.initial_state()?)?;
        Ok(PassDynamics {
            model,
            mode: ControlMode::SpeedOnly,
            substeps: self.substeps,
        })
    }

    /// Training problem on the nominal model.
    pub fn gps_problem(&self) -> Result<GpsProblem> {
        Ok(GpsProblem {
            dynamics: self.pass_dynamics(self.nominal_params)?,
            start: self.initial_state()?,
            target: self.target()?,
        })
    }

    /// Same scenario with the plant equal to the nominal model.
    pub fn matched(&self) -> Self {
        Self {
            true_params: self.nominal_params,
            ..self.clone()
        }
    }

    fn exit_position(&self) -> f64 {
        self.grid.x_last() + self.exit_margin
    }
}

/// Piecewise-linear speed over nozzle position, constant beyond the end
/// knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    /// `[position_mm, speed_mm_per_s]`, sorted by position.
    pub knots: Vec<[f64; 2]>,
}

impl SpeedProfile {
    pub fn validate(&self) -> Result<()> {
        if self.knots.is_empty() {
            return Err(Error::InvalidConfig("speed profile needs at least one knot".into()));
        }
        if self.knots.windows(2).any(|w| !(w[0][0] < w[1][0])) {
            return Err(Error::InvalidConfig("speed profile knots must be strictly increasing".into()));
        }
        if self.knots.iter().any(|k| !(k[1] > 0.0)) {
            return Err(Error::InvalidConfig("speed profile speeds must be positive".into()));
        }
        Ok(())
    }

    pub fn speed_at(&self, x: f64) -> f64 {
        let k = &self.knots;
        if x <= k[0][0] {
            return k[0][1];
        }
        let last = k[k.len() - 1];
        if x >= last[0] {
            return last[1];
        }
        let i = k.partition_point(|p| p[0] <= x);
        let (a, b) = (k[i - 1], k[i]);
        a[1] + (x - a[0]) / (b[0] - a[0]) * (b[1] - a[1])
    }

    /// `fast` over the flats and `slow` across the notch opening, joined by
    /// linear ramps of `ramp_cells` cells centred on the notch edges.
    pub fn notch_default(scenario: &ScenarioConfig, fast: f64, slow: f64, ramp_cells: f64) -> Self {
        let c = scenario.coupon.notch_center.unwrap_or_else(|| scenario.grid.center());
        let half = 0.5 * scenario.coupon.notch_top_width;
        let r = 0.5 * ramp_cells * scenario.grid.dx;
        let mut knots = vec![[c - half - r, fast], [c - half + r, slow], [c + half - r, slow], [c + half + r, fast]];
        knots.dedup_by(|b, a| b[0] <= a[0]);
        Self { knots }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ControllerSpec {
    Gpsc,
    ConstantSpeed { speed: f64 },
    VaryingSpeed { profile: SpeedProfile },
}

impl ControllerSpec {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerSpec::Gpsc => "gpsc",
            ControllerSpec::ConstantSpeed { .. } => "constant",
            ControllerSpec::VaryingSpeed { .. } => "varying",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Maximum number of passes.
    pub passes: usize,
    /// The run stops once no cell is more than this below the target (mm).
    pub fill_tolerance: f64,
    /// Control steps per neural-controller pass.
    pub pass_steps: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            passes: 10,
            fill_tolerance: 0.2,
            pass_steps: 30,
            noise: NoiseSpec {
                measurement_sigma: 0.02,
                control_sigma: [0.05, 0.0, 0.0],
                process_sigma: 0.0,
            },
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 || !(self.fill_tolerance > 0.0) || self.pass_steps == 0 {
            return Err(Error::InvalidConfig(
                "runs need passes >= 1, pass_steps >= 1 and a positive fill tolerance".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub pass: usize,
    /// Commanded speed per control step.
    pub speeds: Vec<f64>,
    /// Nozzle position at the start of each control step on the plant.
    pub positions: Vec<f64>,
    /// Surface measured before the pass.
    pub measured: Vec<f64>,
    /// True surface after the pass.
    pub surface_after: Vec<f64>,
    /// Material added by the pass (mm^2 per unit width).
    pub material: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub controller: String,
    pub seed: u64,
    pub passes: Vec<PassRecord>,
    pub initial_surface: Vec<f64>,
    pub final_surface: Vec<f64>,
    pub target: Vec<f64>,
    /// RMSE of the final surface against the target (mm).
    pub terminal_rmse: f64,
    /// Largest shortfall below the target (mm).
    pub max_deficit: f64,
    pub reached_tolerance: bool,
    /// `dx * sum(final - initial)`.
    pub material_volume: f64,
}

/// `dx * sum_i (final_i - initial_i)`.
pub fn material_volume(initial: &SurfaceProfile, fin: &SurfaceProfile, grid: &GridSpec) -> Result<f64> {
    if initial.len() != fin.len() {
        return Err(Error::DimensionMismatch {
            expected: initial.len(),
            found: fin.len(),
        });
    }
    if let Some(cell) = initial.heights.iter().zip(&fin.heights).position(|(a, b)| b < a) {
        return Err(Error::NegativeDeposit { cell });
    }
    Ok(grid.dx
        * initial
            .heights
            .iter()
            .zip(&fin.heights)
            .map(|(a, b)| b - a)
            .sum::<f64>())
}

/// `max_i (target_i - d_i)`, clipped at zero.
pub fn max_deficit(surface: &[f64], target: &[f64]) -> f64 {
    surface
        .iter()
        .zip(target)
        .map(|(d, t)| t - d)
        .fold(0.0, f64::max)
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Fractional saving of `v` relative to `v_base`: `(v_base - v) / v_base`.
pub fn savings(v_base: f64, v: f64) -> f64 {
    (v_base - v) / v_base
}

/// Speeds for one pass given the measured start state.
trait PassPlanner {
    fn plan(&self, measured: &SimState) -> Result<Vec<f64>>;
}

struct NeuralPlanner<'a> {
    policy: &'a PolicyParams,
    nominal: PassDynamics,
    steps: usize,
    exit: f64,
}

impl PassPlanner for NeuralPlanner<'_> {
    fn plan(&self, measured: &SimState) -> Result<Vec<f64>> {
        let n = self.nominal.model.grid.n_cells;
        let mut x = measured.to_vector();
        let mut speeds = Vec::with_capacity(self.steps);
        for t in 0..self.steps {
            if x[n] > self.exit {
                break;
            }
            let u = self.policy.mean(&x)?;
            x = self.nominal.step(&x, &u).map_err(|e| e.at_step(t))?;
            speeds.push(u[0]);
        }
        Ok(speeds)
    }
}

/// Position-indexed speeds, run until the nozzle leaves the domain.
struct TablePlanner {
    profile: SpeedProfile,
    period: f64,
    start: f64,
    exit: f64,
}

impl PassPlanner for TablePlanner {
    fn plan(&self, _measured: &SimState) -> Result<Vec<f64>> {
        let mut p = self.start;
        let mut speeds = Vec::new();
        while p <= self.exit {
            if speeds.len() >= MAX_BASELINE_STEPS {
                return Err(Error::InvalidConfig("baseline pass does not leave the domain".into()));
            }
            let v = self.profile.speed_at(p);
            speeds.push(v);
            p += v * self.period;
        }
        Ok(speeds)
    }
}

fn check_policy(policy: &PolicyParams, grid: &GridSpec) -> Result<()> {
    let n_in = policy.weights.n_in();
    if n_in != grid.n_cells + 1 || policy.features.n_cells != grid.n_cells || policy.weights.n_out() != 1 {
        return Err(Error::IncompatibleCheckpoint(format!(
            "policy has {n_in} inputs and {} outputs; the grid needs {} inputs and 1 output",
            policy.weights.n_out(),
            grid.n_cells + 1
        )));
    }
    Ok(())
}

/// Pass loop shared by every controller. `sentinel = Some((k, dz))` raises
/// the true surface by `dz` right after pass `k` has been planned.
fn run_passes(
    scenario: &ScenarioConfig,
    run: &RunConfig,
    label: &str,
    planner: &dyn PassPlanner,
    sentinel: Option<(usize, f64)>,
) -> Result<RunReport> {
    run.validate()?;
    let plant = scenario.pass_dynamics(scenario.true_params)?;
    let initial = scenario.initial_surface()?;
    let target = scenario.target()?;
    let nozzle = scenario.start_nozzle();
    let n = scenario.grid.n_cells;
    let mut surface = initial.clone();
    let mut records = Vec::new();
    for k in 0..run.passes {
        if max_deficit(&surface.heights, &target.heights) <= run.fill_tolerance {
            break;
        }
        let measured = add_measurement_noise(
            &surface,
            run.noise.measurement_sigma,
            derive_seed(run.seed, &[k as u64, 0]),
        );
        let speeds = planner.plan(&SimState {
            surface: measured.clone(),
            nozzle,
        })?;
        if let Some((pass, dz)) = sentinel {
            if pass == k {
                surface.heights.iter_mut().for_each(|h| *h += dz);
            }
        }
        let before = surface.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, &[k as u64, 1]));
        let vx_noise = Normal::new(0.0, run.noise.control_sigma[0].max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut x = SimState {
            surface: surface.clone(),
            nozzle,
        }
        .to_vector();
        let mut positions = Vec::with_capacity(speeds.len());
        for (t, v) in speeds.iter().enumerate() {
            positions.push(x[n]);
            let applied = v + if run.noise.control_sigma[0] > 0.0 {
                vx_noise.sample(&mut rng)
            } else {
                0.0
            };
            x = plant
                .step(&x, &DVector::from_element(1, applied))
                .map_err(|e| e.at_step(t))?;
        }
        surface = SurfaceProfile::new(x.rows(0, n).iter().copied().collect());
        let material = material_volume(&before, &surface, &scenario.grid)?;
        records.push(PassRecord {
            pass: k,
            speeds,
            positions,
            measured: measured.heights,
            surface_after: surface.heights.clone(),
            material,
        });
    }
    let deficit = max_deficit(&surface.heights, &target.heights);
    Ok(RunReport {
        controller: label.to_string(),
        seed: run.seed,
        passes: records,
        terminal_rmse: rmse(&surface.heights, &target.heights),
        max_deficit: deficit,
        reached_tolerance: deficit <= run.fill_tolerance,
        material_volume: material_volume(&initial, &surface, &scenario.grid)?,
        initial_surface: initial.heights,
        final_surface: surface.heights,
        target: target.heights,
    })
}

fn neural_planner<'a>(scenario: &ScenarioConfig, run: &RunConfig, policy: &'a PolicyParams) -> Result<NeuralPlanner<'a>> {
    check_policy(policy, &scenario.grid)?;
    Ok(NeuralPlanner {
        policy,
        nominal: scenario.pass_dynamics(scenario.nominal_params)?,
        steps: run.pass_steps,
        exit: scenario.exit_position(),
    })
}

/// Deploys the neural policy pass by pass.
pub fn closed_loop_run(scenario: &ScenarioConfig, run: &RunConfig, policy: &PolicyParams) -> Result<RunReport> {
    let planner = neural_planner(scenario, run, policy)?;
    run_passes(scenario, run, "gpsc", &planner, None)
}

/// `closed_loop_run` with the true surface raised by `dz` right after pass
/// `k` has been planned.
pub fn closed_loop_run_with_sentinel(
    scenario: &ScenarioConfig,
    run: &RunConfig,
    policy: &PolicyParams,
    k: usize,
    dz: f64,
) -> Result<RunReport> {
    let planner = neural_planner(scenario, run, policy)?;
    run_passes(scenario, run, "gpsc", &planner, Some((k, dz)))
}

/// Constant or position-indexed speed baseline.
pub fn baseline_run(scenario: &ScenarioConfig, run: &RunConfig, controller: &ControllerSpec) -> Result<RunReport> {
    let profile = match controller {
        ControllerSpec::ConstantSpeed { speed } => SpeedProfile {
            knots: vec![[0.0, *speed]],
        },
        ControllerSpec::VaryingSpeed { profile } => profile.clone(),
        ControllerSpec::Gpsc => {
            return Err(Error::InvalidConfig("the neural controller is not a baseline".into()));
        }
    };
    profile.validate()?;
    let planner = TablePlanner {
        profile,
        period: scenario.grid.dt * scenario.substeps as f64,
        start: scenario.start_nozzle().position,
        exit: scenario.exit_position(),
    };
    run_passes(scenario, run, controller.label(), &planner, None)
}

/// Noise-free constant-speed passes on the plant; returns the surface after
/// each pass.
pub fn simulate_passes(scenario: &ScenarioConfig, speed: f64, passes: usize) -> Result<Vec<SurfaceProfile>> {
    let profile = SpeedProfile {
        knots: vec![[0.0, speed]],
    };
    profile.validate()?;
    let plant = scenario.pass_dynamics(scenario.true_params)?;
    let planner = TablePlanner {
        profile,
        period: scenario.grid.dt * scenario.substeps as f64,
        start: scenario.start_nozzle().position,
        exit: scenario.exit_position(),
    };
    let n = scenario.grid.n_cells;
    let mut state = scenario.initial_state()?;
    let mut out = Vec::with_capacity(passes);
    for _ in 0..passes {
        let speeds = planner.plan(&state)?;
        let mut x = state.to_vector();
        for (t, v) in speeds.iter().enumerate() {
            x = plant.step(&x, &DVector::from_element(1, *v)).map_err(|e| e.at_step(t))?;
        }
        state.surface = SurfaceProfile::new(x.rows(0, n).iter().copied().collect());
        out.push(state.surface.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub controller: String,
    pub passes: usize,
    pub material_volume: f64,
    pub terminal_rmse: f64,
    pub max_deficit: f64,
    pub reached_tolerance: bool,
    /// Saving of the neural controller relative to this row; zero for the
    /// neural controller itself.
    pub gpsc_savings: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<RunReport>,
}

/// Neural controller, constant-speed and varying-speed baselines on the same
/// scenario and seed, run concurrently.
pub fn compare(
    scenario: &ScenarioConfig,
    run: &RunConfig,
    policy: &PolicyParams,
    constant: &ControllerSpec,
    varying: &ControllerSpec,
) -> Result<Comparison> {
    let (g, (c, v)) = rayon::join(
        || closed_loop_run(scenario, run, policy),
        || {
            rayon::join(
                || baseline_run(scenario, run, constant),
                || baseline_run(scenario, run, varying),
            )
        },
    );
    let reports = vec![g?, c?, v?];
    let v_gpsc = reports[0].material_volume;
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, r)| ComparisonRow {
            controller: r.controller.clone(),
            passes: r.passes.len(),
            material_volume: r.material_volume,
            terminal_rmse: r.terminal_rmse,
            max_deficit: r.max_deficit,
            reached_tolerance: r.reached_tolerance,
            gpsc_savings: if i == 0 { 0.0 } else { savings(r.material_volume, v_gpsc) },
        })
        .collect();
    Ok(Comparison {
        seed: run.seed,
        rows,
        reports,
    })
}
