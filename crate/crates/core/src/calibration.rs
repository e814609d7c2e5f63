//! Fitting model parameters to constant-speed deposition passes.
//!
//! Each pass is predicted from its measured predecessor and the squared
//! profile residuals are minimized by a bounded Levenberg-Marquardt search in
//! log-parameter space, started from the initial guess and from a Latin
//! hypercube of points inside the bounds.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    add_measurement_noise, make_coupon, CouponSpec, ControlInput, DepositionModel, GridSpec, ModelParams, NozzleState,
    SimState, SurfaceProfile,
};

/// How the nozzle moves during a calibration pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PassGeometry {
    /// Nozzle height above the datum (mm).
    pub nozzle_height: f64,
    /// The traverse runs from `offset` before the first cell to `offset`
    /// past the last one (mm).
    pub offset: f64,
}

impl Default for PassGeometry {
    fn default() -> Self {
        Self {
            nozzle_height: 13.0,
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPass {
    /// Constant traverse speed (mm/s).
    pub speed: f64,
    pub profile_before: SurfaceProfile,
    pub profile_after: SurfaceProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDataset {
    pub grid: GridSpec,
    pub geometry: PassGeometry,
    pub passes: Vec<CalibrationPass>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl CalibrationDataset {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for p in &self.passes {
            if !(p.speed > 0.0) {
                return Err(Error::InvalidConfig("calibration speeds must be positive".into()));
            }
            for prof in [&p.profile_before, &p.profile_after] {
                if prof.len() != self.grid.n_cells {
                    return Err(Error::DimensionMismatch {
                        expected: self.grid.n_cells,
                        found: prof.len(),
                    });
                }
            }
        }
        if self.train.is_empty() {
            return Err(Error::InvalidConfig("calibration needs at least one training pass".into()));
        }
        if let Some(&i) = self.train.iter().chain(&self.validation).find(|&&i| i >= self.passes.len()) {
            return Err(Error::InvalidConfig(format!("split index {i} out of range")));
        }
        if self.train.iter().any(|i| self.validation.contains(i)) {
            return Err(Error::InvalidConfig("train and validation splits overlap".into()));
        }
        Ok(())
    }

    /// Writes `manifest.json` and `pass_<k>.csv` (columns `x_mm,
    /// before_mm, after_mm`) into `dir`.
    pub fn save<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = DatasetManifest {
            grid: self.grid,
            geometry: self.geometry,
            speeds: self.passes.iter().map(|p| p.speed).collect(),
            files: (0..self.passes.len()).map(|k| format!("pass_{k}.csv")).collect(),
            train: self.train.clone(),
            validation: self.validation.clone(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        for (k, p) in self.passes.iter().enumerate() {
            let mut w = csv::Writer::from_path(dir.join(&manifest.files[k]))?;
            w.write_record(["x_mm", "before_mm", "after_mm"])?;
            for i in 0..self.grid.n_cells {
                w.serialize((self.grid.x(i), p.profile_before.heights[i], p.profile_after.heights[i]))?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(dir: P) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.files.len() != manifest.speeds.len() {
            return Err(Error::InvalidConfig("manifest lists a different number of files and speeds".into()));
        }
        let mut passes = Vec::with_capacity(manifest.files.len());
        for (file, &speed) in manifest.files.iter().zip(&manifest.speeds) {
            let mut r = csv::Reader::from_path(dir.join(file))?;
            let mut before = Vec::new();
            let mut after = Vec::new();
            for row in r.deserialize() {
                let (_x, b, a): (f64, f64, f64) = row?;
                before.push(b);
                after.push(a);
            }
            passes.push(CalibrationPass {
                speed,
                profile_before: SurfaceProfile::new(before),
                profile_after: SurfaceProfile::new(after),
            });
        }
        let ds = Self {
            grid: manifest.grid,
            geometry: manifest.geometry,
            passes,
            train: manifest.train,
            validation: manifest.validation,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    grid: GridSpec,
    geometry: PassGeometry,
    speeds: Vec<f64>,
    files: Vec<String>,
    train: Vec<usize>,
    validation: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub lower: ModelParams,
    pub upper: ModelParams,
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            lower: ModelParams {
                rho: 0.01,
                a: 0.1,
                b: 0.01,
                c: 0.1,
                kappa: 0.5,
            },
            upper: ModelParams {
                rho: 100.0,
                a: 50.0,
                b: 10.0,
                c: 100.0,
                kappa: 8.0,
            },
        }
    }
}

impl ParamBounds {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.lower.to_array(), self.upper.to_array());
        if lo.iter().zip(&hi).any(|(l, h)| !(*l > 0.0 && l < h && h.is_finite())) {
            return Err(Error::InvalidConfig(
                "parameter bounds need 0 < lower < upper componentwise".into(),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, p: &ModelParams) -> bool {
        let v = p.to_array();
        let (lo, hi) = (self.lower.to_array(), self.upper.to_array());
        (0..ModelParams::DIM).all(|k| v[k] >= lo[k] && v[k] <= hi[k])
    }

    fn log_bounds(&self) -> ([f64; 5], [f64; 5]) {
        (
            self.lower.to_array().map(f64::ln),
            self.upper.to_array().map(f64::ln),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Latin-hypercube starts in addition to the initial guess.
    pub starts: usize,
    /// Iterations every start gets before the starts are ranked.
    pub screen_iters: usize,
    /// Number of best-ranked starts continued up to `max_iters`.
    pub refine: usize,
    pub max_iters: usize,
    /// Stop when an accepted step lowers the objective by less than this
    /// fraction.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            starts: 24,
            screen_iters: 20,
            refine: 2,
            max_iters: 200,
            rel_tol: 1e-12,
            seed: 0,
        }
    }
}

/// Rolls the model over one constant-speed traverse with the nozzle
/// perpendicular. The pass has `floor(L / (speed * dt))` whole time steps,
/// where `L` is the traverse length, so the nozzle never passes its end.
pub fn simulate_pass(
    before: &SurfaceProfile,
    speed: f64,
    geometry: &PassGeometry,
    grid: &GridSpec,
    params: &ModelParams,
) -> Result<SurfaceProfile> {
    if !(speed > 0.0) {
        return Err(Error::InvalidConfig("pass speed must be positive".into()));
    }
    let start = grid.x0 - geometry.offset;
    let length = grid.x_last() + geometry.offset - start;
    let steps = (length / (speed * grid.dt) + 1e-9).floor() as usize;
    let mut state = SimState {
        surface: before.clone(),
        nozzle: NozzleState {
            position: start,
            height: geometry.nozzle_height,
            angle: 0.0,
        },
    };
    let model = DepositionModel::new(*grid, *params, &state)?;
    let u = ControlInput::speed(speed);
    for t in 0..steps {
        state = model.step(&state, &u).map_err(|e| e.at_step(t))?;
    }
    Ok(state.surface)
}

fn pass_residual(ds: &CalibrationDataset, k: usize, params: &ModelParams) -> Result<Vec<f64>> {
    let p = &ds.passes[k];
    let pred = simulate_pass(&p.profile_before, p.speed, &ds.geometry, &ds.grid, params)?;
    Ok(pred
        .heights
        .iter()
        .zip(&p.profile_after.heights)
        .map(|(a, b)| a - b)
        .collect())
}

fn residuals(ds: &CalibrationDataset, subset: &[usize], params: &ModelParams) -> Result<DVector<f64>> {
    let mut r = Vec::with_capacity(subset.len() * ds.grid.n_cells);
    for &k in subset {
        r.extend(pass_residual(ds, k, params)?);
    }
    Ok(DVector::from_vec(r))
}

/// Sum over `subset` of `|| simulate(before_k, v_k) - after_k ||^2`.
pub fn objective(params: &ModelParams, ds: &CalibrationDataset, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidConfig("objective subset is empty".into()));
    }
    for &k in subset {
        if k >= ds.passes.len() {
            return Err(Error::DimensionMismatch {
                expected: ds.passes.len(),
                found: k,
            });
        }
        if ds.passes[k].profile_before.len() != ds.grid.n_cells || ds.passes[k].profile_after.len() != ds.grid.n_cells {
            return Err(Error::DimensionMismatch {
                expected: ds.grid.n_cells,
                found: ds.passes[k].profile_after.len(),
            });
        }
    }
    Ok(residuals(ds, subset, params)?.norm_squared())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassFit {
    pub pass: usize,
    pub speed: f64,
    pub rmse: f64,
    pub predicted: Vec<f64>,
    pub measured: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartResult {
    pub initial: ModelParams,
    pub params: ModelParams,
    pub objective: f64,
    pub iterations: usize,
    /// Stopped on the tolerance rather than the iteration budget.
    pub converged: bool,
    /// Objective after each accepted step, starting point included.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub params: ModelParams,
    pub objective: f64,
    pub train: Vec<PassFit>,
    pub validation: Vec<PassFit>,
    /// Every start, best or not; failed starts are omitted.
    pub starts: Vec<StartResult>,
}

fn to_log(p: &ModelParams) -> DVector<f64> {
    DVector::from_iterator(5, p.to_array().iter().map(|v| v.ln()))
}

fn from_log(theta: &DVector<f64>) -> ModelParams {
    ModelParams::from_array([0, 1, 2, 3, 4].map(|k| theta[k].exp()))
}

fn project(theta: &mut DVector<f64>, lo: &[f64; 5], hi: &[f64; 5]) {
    for k in 0..5 {
        theta[k] = theta[k].clamp(lo[k], hi[k]);
    }
}

/// Projected Levenberg-Marquardt in log-parameter space with a central
/// finite-difference residual Jacobian.
fn levenberg_marquardt(
    ds: &CalibrationDataset,
    bounds: &ParamBounds,
    init: &ModelParams,
    config: &CalibrationConfig,
    max_iters: usize,
) -> Result<StartResult> {
    let (lo, hi) = bounds.log_bounds();
    let mut theta = to_log(init);
    project(&mut theta, &lo, &hi);
    let eval = |th: &DVector<f64>| residuals(ds, &ds.train, &from_log(th));
    let mut r = eval(&theta)?;
    let mut f = r.norm_squared();
    if !f.is_finite() {
        return Err(Error::AllStartsFailed);
    }
    let mut history = vec![f];
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    'outer: for _ in 0..max_iters {
        iterations += 1;
        let mut jac = DMatrix::zeros(r.len(), 5);
        for k in 0..5 {
            let h = 1e-6 * (1.0 + theta[k].abs());
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let col = (eval(&tp)? - eval(&tm)?) / (2.0 * h);
            jac.set_column(k, &col);
        }
        let g = jac.transpose() * &r;
        let jtj = jac.transpose() * &jac;
        loop {
            let mut a = jtj.clone();
            for k in 0..5 {
                a[(k, k)] += mu * (jtj[(k, k)] + 1e-12);
            }
            let Some(chol) = a.cholesky() else {
                mu *= 10.0;
                if mu > 1e12 {
                    break 'outer;
                }
                continue;
            };
            let mut cand = &theta - chol.solve(&g);
            project(&mut cand, &lo, &hi);
            if (&cand - &theta).norm() < 1e-14 {
                converged = true;
                break 'outer;
            }
            let rc = match eval(&cand) {
                Ok(v) => v,
                Err(_) => {
                    mu *= 10.0;
                    if mu > 1e12 {
                        break 'outer;
                    }
                    continue;
                }
            };
            let fc = rc.norm_squared();
            if fc.is_finite() && fc < f {
                let decrease = f - fc;
                theta = cand;
                r = rc;
                f = fc;
                history.push(f);
                mu = (mu / 3.0).max(1e-12);
                if decrease <= config.rel_tol * f.max(f64::MIN_POSITIVE) || f == 0.0 {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            mu *= 10.0;
            if mu > 1e12 {
                break 'outer;
            }
        }
    }
    Ok(StartResult {
        initial: *init,
        params: from_log(&theta),
        objective: f,
        iterations,
        converged,
        history,
    })
}

/// Latin hypercube of `count` points in log-parameter space.
pub fn latin_hypercube(bounds: &ParamBounds, count: usize, seed: u64) -> Vec<ModelParams> {
    let (lo, hi) = bounds.log_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<f64>> = (0..5)
        .map(|k| {
            let mut strata: Vec<f64> = (0..count)
                .map(|i| {
                    let u = (i as f64 + rng.random::<f64>()) / count as f64;
                    lo[k] + u * (hi[k] - lo[k])
                })
                .collect();
            strata.shuffle(&mut rng);
            strata
        })
        .collect();
    (0..count)
        .map(|i| ModelParams::from_array([0, 1, 2, 3, 4].map(|k| columns[k][i].exp())))
        .collect()
}

fn pass_fits(ds: &CalibrationDataset, subset: &[usize], params: &ModelParams) -> Result<Vec<PassFit>> {
    subset
        .iter()
        .map(|&k| {
            let p = &ds.passes[k];
            let pred = simulate_pass(&p.profile_before, p.speed, &ds.geometry, &ds.grid, params)?;
            let n = pred.len() as f64;
            let rmse = (pred
                .heights
                .iter()
                .zip(&p.profile_after.heights)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n)
                .sqrt();
            Ok(PassFit {
                pass: k,
                speed: p.speed,
                rmse,
                predicted: pred.heights,
                measured: p.profile_after.heights.clone(),
            })
        })
        .collect()
}

/// Fits the parameters on the training split; reports fits on both splits.
pub fn fit(
    ds: &CalibrationDataset,
    bounds: &ParamBounds,
    init: &ModelParams,
    config: &CalibrationConfig,
) -> Result<(ModelParams, CalibrationReport)> {
    ds.validate()?;
    bounds.validate()?;
    init.validate()?;
    if !bounds.contains(init) {
        return Err(Error::InvalidConfig("initial parameters lie outside the bounds".into()));
    }
    let mut inits = vec![*init];
    inits.extend(latin_hypercube(bounds, config.starts, config.seed));
    let screen = config.screen_iters.min(config.max_iters);
    let results: Vec<Result<StartResult>> = inits
        .par_iter()
        .map(|p| levenberg_marquardt(ds, bounds, p, config, screen))
        .collect();
    let mut starts: Vec<StartResult> = results.into_iter().filter_map(|r| r.ok()).collect();
    let mut order: Vec<usize> = (0..starts.len()).collect();
    order.sort_by(|&a, &b| starts[a].objective.total_cmp(&starts[b].objective));
    let refined: Vec<(usize, Result<StartResult>)> = order
        .iter()
        .take(config.refine)
        .filter(|&&i| !starts[i].converged)
        .map(|&i| (i, starts[i].clone()))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(i, s)| (i, levenberg_marquardt(ds, bounds, &s.params, config, config.max_iters - screen)))
        .collect();
    for (i, r) in refined {
        if let Ok(more) = r {
            let s = &mut starts[i];
            s.history.extend(more.history.into_iter().skip(1));
            s.iterations += more.iterations;
            s.params = more.params;
            s.objective = more.objective;
            s.converged = more.converged;
        }
    }
    let best = starts
        .iter()
        .filter(|s| s.objective.is_finite())
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .ok_or(Error::AllStartsFailed)?;
    let params = best.params;
    let report = CalibrationReport {
        params,
        objective: best.objective,
        train: pass_fits(ds, &ds.train, &params)?,
        validation: pass_fits(ds, &ds.validation, &params)?,
        starts: starts.clone(),
    };
    Ok((params, report))
}

/// Synthetic multi-pass dataset: the coupon is sprayed at each speed in
/// turn and measured after every pass with `noise_sigma`; the last pass is
/// held out for validation.
pub fn synthesize_dataset(
    grid: &GridSpec,
    coupon: &CouponSpec,
    geometry: &PassGeometry,
    params: &ModelParams,
    speeds: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<CalibrationDataset> {
    if speeds.is_empty() {
        return Err(Error::InvalidConfig("at least one calibration speed is needed".into()));
    }
    let mut truth = make_coupon(coupon, grid)?;
    let mut measured = add_measurement_noise(&truth, noise_sigma, crate::gps::derive_seed(seed, &[0]));
    let mut passes = Vec::with_capacity(speeds.len());
    for (k, &v) in speeds.iter().enumerate() {
        truth = simulate_pass(&truth, v, geometry, grid, params)?;
        let after = add_measurement_noise(&truth, noise_sigma, crate::gps::derive_seed(seed, &[k as u64 + 1]));
        passes.push(CalibrationPass {
            speed: v,
            profile_before: measured,
            profile_after: after.clone(),
        });
        measured = after;
    }
    let m = passes.len();
    let (train, validation) = if m > 1 {
        ((0..m - 1).collect(), vec![m - 1])
    } else {
        (vec![0], vec![])
    };
    Ok(CalibrationDataset {
        grid: *grid,
        geometry: *geometry,
        passes,
        train,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec {
            x0: 0.5,
            dx: 2.0,
            n_cells: 30,
            dt: 0.5,
        }
    }

    fn coupon() -> CouponSpec {
        CouponSpec {
            notch_depth: 3.0,
            notch_top_width: 20.0,
            wall_slope_deg: 45.0,
            notch_center: None,
        }
    }

    fn dataset(sigma: f64) -> CalibrationDataset {
        synthesize_dataset(
            &small_grid(),
            &coupon(),
            &PassGeometry::default(),
            &ModelParams::default(),
            &[1.0, 2.0, 3.0, 4.0, 5.0],
            sigma,
            3,
        )
        .unwrap()
    }

    fn added(before: &SurfaceProfile, after: &SurfaceProfile) -> f64 {
        after.heights.iter().zip(&before.heights).map(|(a, b)| a - b).sum()
    }

    #[test]
    fn pass_output_dominates_input() {
        let grid = small_grid();
        let before = make_coupon(&coupon(), &grid).unwrap();
        let after = simulate_pass(&before, 2.0, &PassGeometry::default(), &grid, &ModelParams::default()).unwrap();
        assert!(after.heights.iter().zip(&before.heights).all(|(a, b)| a >= b));
        assert!(added(&before, &after) > 0.0);
    }

    #[test]
    fn very_fast_pass_adds_almost_nothing() {
        let grid = small_grid();
        let geom = PassGeometry::default();
        let before = make_coupon(&coupon(), &grid).unwrap();
        let p = ModelParams::default();
        let slow = added(&before, &simulate_pass(&before, 1.0, &geom, &grid, &p).unwrap());
        let fast = added(&before, &simulate_pass(&before, 1e3, &geom, &grid, &p).unwrap());
        assert!(fast < 1e-3 * slow, "fast {fast} slow {slow}");
    }

    #[test]
    fn doubling_c_roughly_halves_material() {
        let grid = small_grid();
        let geom = PassGeometry::default();
        let before = make_coupon(&coupon(), &grid).unwrap();
        let p = ModelParams::default();
        let p2 = ModelParams { c: 2.0 * p.c, ..p };
        let v1 = added(&before, &simulate_pass(&before, 2.0, &geom, &grid, &p).unwrap());
        let v2 = added(&before, &simulate_pass(&before, 2.0, &geom, &grid, &p2).unwrap());
        assert!((v1 / v2 - 2.0).abs() < 0.05, "ratio {}", v1 / v2);
    }

    #[test]
    fn nonpositive_speed_rejected() {
        let grid = small_grid();
        let before = SurfaceProfile::flat(grid.n_cells, 0.0);
        let r = simulate_pass(&before, 0.0, &PassGeometry::default(), &grid, &ModelParams::default());
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn objective_vanishes_at_generating_params() {
        let ds = dataset(0.0);
        let f = objective(&ModelParams::default(), &ds, &ds.train).unwrap();
        assert!(f < 1e-20, "{f}");
    }

    #[test]
    fn objective_positive_when_rho_perturbed() {
        let ds = dataset(0.0);
        let p = ModelParams::default();
        let f = objective(&ModelParams { rho: 1.1 * p.rho, ..p }, &ds, &ds.train).unwrap();
        assert!(f > 0.0);
    }

    #[test]
    fn objective_rejects_bad_subsets() {
        let ds = dataset(0.0);
        let p = ModelParams::default();
        assert!(objective(&p, &ds, &[]).is_err());
        assert!(matches!(objective(&p, &ds, &[9]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn fit_from_truth_converges_immediately() {
        let ds = dataset(0.0);
        let truth = ModelParams::default();
        let cfg = CalibrationConfig {
            starts: 0,
            ..Default::default()
        };
        let (p, report) = fit(&ds, &ParamBounds::default(), &truth, &cfg).unwrap();
        let s = &report.starts[0];
        assert!(s.converged);
        assert!(s.iterations <= 1);
        for (a, b) in p.to_array().iter().zip(truth.to_array()) {
            assert!((a / b - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_stays_within_bounds_and_reports_splits() {
        let ds = dataset(0.02);
        let bounds = ParamBounds {
            lower: ModelParams {
                rho: 0.1,
                a: 0.5,
                b: 0.2,
                c: 1.0,
                kappa: 1.0,
            },
            upper: ModelParams {
                rho: 1.0,
                a: 2.0,
                b: 1.0,
                c: 5.0,
                kappa: 4.0,
            },
        };
        let cfg = CalibrationConfig {
            starts: 4,
            screen_iters: 5,
            refine: 1,
            max_iters: 20,
            ..Default::default()
        };
        let init = ModelParams {
            rho: 0.5,
            a: 1.5,
            b: 0.5,
            c: 2.0,
            kappa: 3.0,
        };
        let (p, report) = fit(&ds, &bounds, &init, &cfg).unwrap();
        assert!(bounds.contains(&p));
        assert!(report.starts.iter().all(|s| bounds.contains(&s.params)));
        assert_eq!(report.train.len(), 4);
        assert_eq!(report.validation.len(), 1);
        assert_eq!(report.validation[0].pass, 4);
    }

    #[test]
    fn accepted_steps_decrease_objective() {
        let ds = dataset(0.0);
        let init = ModelParams {
            rho: 0.4,
            a: 1.5,
            b: 0.3,
            c: 2.0,
            kappa: 2.5,
        };
        let cfg = CalibrationConfig {
            starts: 0,
            max_iters: 30,
            ..Default::default()
        };
        let (_, report) = fit(&ds, &ParamBounds::default(), &init, &cfg).unwrap();
        let h = &report.starts[0].history;
        assert!(h.len() > 1);
        assert!(h.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn init_outside_bounds_rejected() {
        let ds = dataset(0.0);
        let init = ModelParams {
            a: 1e3,
            ..Default::default()
        };
        assert!(fit(&ds, &ParamBounds::default(), &init, &CalibrationConfig::default()).is_err());
    }

    #[test]
    fn latin_hypercube_covers_every_stratum() {
        let bounds = ParamBounds::default();
        let n = 8;
        let pts = latin_hypercube(&bounds, n, 1);
        let (lo, hi) = bounds.log_bounds();
        for k in 0..5 {
            let mut hit = vec![false; n];
            for p in &pts {
                let u = (p.to_array()[k].ln() - lo[k]) / (hi[k] - lo[k]);
                hit[((u * n as f64) as usize).min(n - 1)] = true;
            }
            assert!(hit.iter().all(|&h| h));
        }
        assert_eq!(pts, latin_hypercube(&bounds, n, 1));
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let ds = dataset(0.01);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = CalibrationDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn split_overlap_rejected() {
        let mut ds = dataset(0.0);
        ds.validation = vec![0];
        assert!(ds.validate().is_err());
    }
}
