//! Discrete-time cold-spray deposition dynamics.
//!
//! The surface is a vector of cell heights `d` over a uniform 1-D grid. A
//! nozzle at position `p`, height `h` and angle `alpha` deposits material at
//! the per-cell rate
//!
//! ```text
//! g_i = phi(tan(beta_i) - tan(alpha)) * psi((tan(beta_i) - s_i) / (1 + tan(beta_i) * s_i))
//! tan(beta_i) = (x_i - p) / (h - d_i)
//! ```
//!
//! where `s_i` is the local surface slope, and one step of the model is an
//! explicit Euler update of heights and nozzle kinematics.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform spatial grid and time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Center of the leftmost cell (mm).
    pub x0: f64,
    /// Cell size (mm).
    pub dx: f64,
    pub n_cells: usize,
    /// Euler time step (s).
    pub dt: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0) || !(self.dt > 0.0) || self.n_cells < 2 {
            return Err(Error::InvalidConfig(format!(
                "grid requires dx > 0, dt > 0, n_cells >= 2 (got dx={}, dt={}, n_cells={})",
                self.dx, self.dt, self.n_cells
            )));
        }
        Ok(())
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx
    }

    pub fn x_last(&self) -> f64 {
        self.x(self.n_cells - 1)
    }

    pub fn width(&self) -> f64 {
        self.dx * self.n_cells as f64
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.x0 + self.x_last())
    }

    /// Length of the full state vector `(d, p, h, alpha)`.
    pub fn state_dim(&self) -> usize {
        self.n_cells + 3
    }
}

/// Spray parameters `(rho, a, b, c, kappa)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub rho: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub kappa: f64,
}

impl ModelParams {
    pub const DIM: usize = 5;

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "model parameters must be finite and positive: {self:?}"
            )))
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.rho, self.a, self.b, self.c, self.kappa]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            rho: v[0],
            a: v[1],
            b: v[2],
            c: v[3],
            kappa: v[4],
        }
    }

    /// Componentwise `self * (1 + rel[k])`.
    pub fn perturbed(&self, rel: [f64; 5]) -> Self {
        let mut v = self.to_array();
        for (x, r) in v.iter_mut().zip(rel) {
            *x *= 1.0 + r;
        }
        Self::from_array(v)
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            rho: 0.25,
            a: 1.0,
            b: 0.4,
            c: 3.0,
            kappa: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceProfile {
    pub heights: Vec<f64>,
}

impl SurfaceProfile {
    pub fn new(heights: Vec<f64>) -> Self {
        Self { heights }
    }

    pub fn flat(n: usize, level: f64) -> Self {
        Self {
            heights: vec![level; n],
        }
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.heights.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.heights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["height_mm"])?;
        for h in &self.heights {
            w.write_record([format!("{h}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let col = headers
            .iter()
            .position(|h| h.trim() == "height_mm")
            .ok_or_else(|| Error::InvalidConfig("profile CSV lacks a height_mm column".into()))?;
        let mut heights = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let v: f64 = rec
                .get(col)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("bad height value: {e}")))?;
            heights.push(v);
        }
        Ok(Self { heights })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NozzleState {
    pub position: f64,
    pub height: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub vx: f64,
    pub vh: f64,
    pub omega: f64,
}

impl ControlInput {
    pub fn speed(vx: f64) -> Self {
        Self {
            vx,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub vx_min: f64,
    pub vx_max: f64,
    pub vh_min: f64,
    pub vh_max: f64,
    pub omega_min: f64,
    pub omega_max: f64,
}

impl ControlBounds {
    pub fn validate(&self) -> Result<()> {
        if self.vx_min <= self.vx_max && self.vh_min <= self.vh_max && self.omega_min <= self.omega_max
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig("control bounds must satisfy min <= max".into()))
        }
    }

    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            vx: u.vx.clamp(self.vx_min, self.vx_max),
            vh: u.vh.clamp(self.vh_min, self.vh_max),
            omega: u.omega.clamp(self.omega_min, self.omega_max),
        }
    }
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            vx_min: 0.0,
            vx_max: 5.0,
            vh_min: -1.0,
            vh_max: 1.0,
            omega_min: -0.1,
            omega_max: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub surface: SurfaceProfile,
    pub nozzle: NozzleState,
}

impl SimState {
    /// Flattens to `(d_1..d_N, p, h, alpha)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.surface.len();
        let mut v = DVector::zeros(n + 3);
        v.rows_mut(0, n).copy_from_slice(&self.surface.heights);
        v[n] = self.nozzle.position;
        v[n + 1] = self.nozzle.height;
        v[n + 2] = self.nozzle.angle;
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let n = v.len() - 3;
        Self {
            surface: SurfaceProfile::new(v.rows(0, n).iter().copied().collect()),
            nozzle: NozzleState {
                position: v[n],
                height: v[n + 1],
                angle: v[n + 2],
            },
        }
    }
}

/// Which control channels a controller drives. Speed-only mode holds the
/// nozzle height and angle fixed and controls `vx` alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    SpeedOnly,
    Full,
}

impl ControlMode {
    pub fn dim(self) -> usize {
        match self {
            ControlMode::SpeedOnly => 1,
            ControlMode::Full => 3,
        }
    }

    pub fn to_input(self, u: &DVector<f64>) -> ControlInput {
        match self {
            ControlMode::SpeedOnly => ControlInput::speed(u[0]),
            ControlMode::Full => ControlInput {
                vx: u[0],
                vh: u[1],
                omega: u[2],
            },
        }
    }

    pub fn to_vector(self, u: &ControlInput) -> DVector<f64> {
        match self {
            ControlMode::SpeedOnly => DVector::from_element(1, u.vx),
            ControlMode::Full => DVector::from_vec(vec![u.vx, u.vh, u.omega]),
        }
    }

    /// Lower and upper control limits as vectors in this mode.
    pub fn limits(self, b: &ControlBounds) -> (DVector<f64>, DVector<f64>) {
        let lo = ControlInput {
            vx: b.vx_min,
            vh: b.vh_min,
            omega: b.omega_min,
        };
        let hi = ControlInput {
            vx: b.vx_max,
            vh: b.vh_max,
            omega: b.omega_max,
        };
        (self.to_vector(&lo), self.to_vector(&hi))
    }
}

/// Noise amplitudes, all config values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Std of per-cell measurement noise (mm).
    pub measurement_sigma: f64,
    /// Std of control execution noise for (vx, vh, omega).
    pub control_sigma: [f64; 3],
    /// Std of additive per-step surface noise (mm).
    pub process_sigma: f64,
}

impl NoiseSpec {
    pub fn is_zero(&self) -> bool {
        self.measurement_sigma == 0.0
            && self.process_sigma == 0.0
            && self.control_sigma.iter().all(|s| *s == 0.0)
    }
}

/// Particle distribution across the spray cone, `rho / (rho + z^2)`.
///
/// Algebraically equal to `1 - (1 + rho/z^2)^-1` but finite at `z = 0`.
pub fn spray_shape(z: f64, rho: f64) -> f64 {
    rho / (rho + z * z)
}

/// Nozzle efficiency as a function of the impact-angle tangent.
pub fn efficiency(z: f64, params: &ModelParams) -> f64 {
    let r = (z / params.b).abs().powf(params.kappa).max(1.0);
    (0.5 + (-params.a * r).atan() / PI) / params.c
}

/// Slope of the surface at cell `i`; central differences inside, second-order
/// one-sided stencils at the ends.
pub fn surface_slope(d: &[f64], i: usize, dx: f64) -> f64 {
    let n = d.len();
    if n < 3 {
        return (d[n - 1] - d[0]) / dx;
    }
    if i == 0 {
        (-3.0 * d[0] + 4.0 * d[1] - d[2]) / (2.0 * dx)
    } else if i == n - 1 {
        (3.0 * d[n - 1] - 4.0 * d[n - 2] + d[n - 3]) / (2.0 * dx)
    } else {
        (d[i + 1] - d[i - 1]) / (2.0 * dx)
    }
}

/// Grid, parameters and the clearance margin required between nozzle and surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepositionModel {
    pub grid: GridSpec,
    pub params: ModelParams,
    /// Minimum allowed `h - d_i` (mm).
    pub min_clearance: f64,
}

impl DepositionModel {
    /// Builds a model whose clearance margin is 10% of the initial stand-off
    /// `h - max(d)` of `reference`.
    pub fn new(grid: GridSpec, params: ModelParams, reference: &SimState) -> Result<Self> {
        grid.validate()?;
        params.validate()?;
        let standoff = reference.nozzle.height - reference.surface.max();
        if !(standoff > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "nozzle height {} must exceed the surface maximum {}",
                reference.nozzle.height,
                reference.surface.max()
            )));
        }
        Ok(Self {
            grid,
            params,
            min_clearance: 0.1 * standoff,
        })
    }

    pub fn with_params(&self, params: ModelParams) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }

    fn check_len(&self, state: &SimState) -> Result<()> {
        if state.surface.len() != self.grid.n_cells {
            return Err(Error::DimensionMismatch {
                expected: self.grid.n_cells,
                found: state.surface.len(),
            });
        }
        Ok(())
    }

    /// Per-cell deposition rate `g` (mm/s).
    pub fn deposition_rate(&self, state: &SimState) -> Result<Vec<f64>> {
        self.check_len(state)?;
        let d = &state.surface.heights;
        let NozzleState {
            position,
            height,
            angle,
        } = state.nozzle;
        let tan_alpha = angle.tan();
        let mut g = Vec::with_capacity(d.len());
        for (i, &di) in d.iter().enumerate() {
            let clearance = height - di;
            if !(clearance >= self.min_clearance) {
                return Err(Error::ClearanceViolation {
                    cell: i,
                    clearance,
                    required: self.min_clearance,
                });
            }
            let tan_beta = (self.grid.x(i) - position) / clearance;
            let s = surface_slope(d, i, self.grid.dx);
            let denom = 1.0 + tan_beta * s;
            // Incidence at or beyond grazing: the cell is shadowed.
            let eff = if denom <= 0.0 {
                0.0
            } else {
                efficiency((tan_beta - s) / denom, &self.params)
            };
            g.push(spray_shape(tan_beta - tan_alpha, self.params.rho) * eff);
        }
        Ok(g)
    }

    /// One explicit Euler step of the deposition dynamics.
    pub fn step(&self, state: &SimState, u: &ControlInput) -> Result<SimState> {
        let g = self.deposition_rate(state)?;
        let dt = self.grid.dt;
        let heights = state
            .surface
            .heights
            .iter()
            .zip(&g)
            .map(|(d, gi)| d + gi * dt)
            .collect();
        Ok(SimState {
            surface: SurfaceProfile::new(heights),
            nozzle: NozzleState {
                position: state.nozzle.position + u.vx * dt,
                height: state.nozzle.height + u.vh * dt,
                angle: state.nozzle.angle + u.omega * dt,
            },
        })
    }

    /// `step` on the flattened state and control vectors.
    pub fn step_vector(&self, x: &DVector<f64>, u: &ControlInput) -> Result<DVector<f64>> {
        if x.len() != self.grid.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.state_dim(),
                found: x.len(),
            });
        }
        Ok(self.step(&SimState::from_vector(x), u)?.to_vector())
    }

    /// Rolls the model forward under `controls`, optionally with control
    /// execution noise and per-step surface noise drawn from `seed`.
    pub fn rollout(
        &self,
        x0: &SimState,
        controls: &[ControlInput],
        noise: Option<&NoiseSpec>,
        seed: u64,
    ) -> Result<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut states = Vec::with_capacity(controls.len() + 1);
        let mut applied = Vec::with_capacity(controls.len());
        states.push(x0.clone());
        let mut x = x0.clone();
        for (t, u) in controls.iter().enumerate() {
            let mut u = *u;
            if let Some(n) = noise {
                u.vx += n.control_sigma[0] * std_normal.sample(&mut rng);
                u.vh += n.control_sigma[1] * std_normal.sample(&mut rng);
                u.omega += n.control_sigma[2] * std_normal.sample(&mut rng);
            }
            let mut next = self.step(&x, &u).map_err(|e| e.at_step(t))?;
            if let Some(n) = noise {
                if n.process_sigma > 0.0 {
                    for h in next.surface.heights.iter_mut() {
                        *h += n.process_sigma * std_normal.sample(&mut rng);
                    }
                }
            }
            applied.push(u);
            states.push(next.clone());
            x = next;
        }
        Ok(Trajectory {
            states,
            controls: applied,
        })
    }

    /// Central finite-difference Jacobians `(A, B)` of `step` with respect to
    /// the full state and the three controls.
    pub fn linearize(
        &self,
        state: &SimState,
        u: &ControlInput,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let x = state.to_vector();
        let a = fd_jacobian(&x, |xp| self.step_vector(xp, u))?;
        let uv = DVector::from_vec(vec![u.vx, u.vh, u.omega]);
        let b = fd_jacobian(&uv, |up| {
            self.step_vector(
                &x,
                &ControlInput {
                    vx: up[0],
                    vh: up[1],
                    omega: up[2],
                },
            )
        })?;
        Ok((a, b))
    }
}

/// Finite-difference step used for every Jacobian in the crate.
pub fn fd_step(value: f64) -> f64 {
    1e-5 * (1.0 + value.abs())
}

/// Central finite-difference Jacobian of `f` at `x`.
pub fn fd_jacobian<F>(x: &DVector<f64>, mut f: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut probe = x.clone();
    let mut jac: Option<DMatrix<f64>> = None;
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        probe[j] = x[j] + h;
        let fp = f(&probe)?;
        probe[j] = x[j] - h;
        let fm = f(&probe)?;
        probe[j] = x[j];
        let jac = jac.get_or_insert_with(|| DMatrix::zeros(fp.len(), x.len()));
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac.unwrap_or_else(|| DMatrix::zeros(0, 0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `x_0 .. x_T`.
    pub states: Vec<SimState>,
    /// Controls actually applied, `u_1 .. u_T`.
    pub controls: Vec<ControlInput>,
}

impl Trajectory {
    pub fn final_state(&self) -> &SimState {
        self.states.last().expect("trajectory holds x0")
    }
}

/// Symmetric trapezoidal notch in an otherwise flat coupon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouponSpec {
    /// Notch depth (mm); zero gives a flat coupon.
    pub notch_depth: f64,
    /// Notch opening at the flat datum (mm).
    pub notch_top_width: f64,
    /// Wall inclination from horizontal (degrees).
    pub wall_slope_deg: f64,
    /// Notch center (mm); `None` centers it on the grid.
    #[serde(default)]
    pub notch_center: Option<f64>,
}

impl Default for CouponSpec {
    fn default() -> Self {
        Self {
            notch_depth: 3.0,
            notch_top_width: 30.0,
            wall_slope_deg: 45.0,
            notch_center: None,
        }
    }
}

impl CouponSpec {
    pub fn bottom_width(&self) -> f64 {
        self.notch_top_width - 2.0 * self.notch_depth / self.wall_slope_deg.to_radians().tan()
    }
}

/// Samples the coupon on `grid`; the profile is shifted so its minimum is 0.
pub fn make_coupon(spec: &CouponSpec, grid: &GridSpec) -> Result<SurfaceProfile> {
    grid.validate()?;
    let finite = [spec.notch_depth, spec.notch_top_width, spec.wall_slope_deg]
        .iter()
        .all(|v| v.is_finite());
    if !finite || spec.notch_depth < 0.0 {
        return Err(Error::InvalidGeometry("notch dimensions must be finite and non-negative".into()));
    }
    if spec.notch_depth == 0.0 {
        return Ok(SurfaceProfile::flat(grid.n_cells, 0.0));
    }
    if !(spec.wall_slope_deg > 0.0 && spec.wall_slope_deg <= 90.0) {
        return Err(Error::InvalidGeometry("wall slope must lie in (0, 90] degrees".into()));
    }
    if !(spec.notch_top_width > 0.0 && spec.notch_top_width < grid.width()) {
        return Err(Error::InvalidGeometry(format!(
            "notch width {} must be positive and below the domain width {}",
            spec.notch_top_width,
            grid.width()
        )));
    }
    let bottom = spec.bottom_width();
    if bottom < 0.0 {
        return Err(Error::InvalidGeometry(
            "walls too shallow for the requested depth and width".into(),
        ));
    }
    let center = spec.notch_center.unwrap_or_else(|| grid.center());
    let tan_wall = spec.wall_slope_deg.to_radians().tan();
    let heights: Vec<f64> = (0..grid.n_cells)
        .map(|i| {
            let r = (grid.x(i) - center).abs();
            if r >= 0.5 * spec.notch_top_width {
                0.0
            } else if r <= 0.5 * bottom {
                -spec.notch_depth
            } else {
                (-spec.notch_depth + (r - 0.5 * bottom) * tan_wall).min(0.0)
            }
        })
        .collect();
    let min = heights.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SurfaceProfile::new(heights.into_iter().map(|h| h - min).collect()))
}

/// Adds i.i.d. zero-mean Gaussian noise of std `sigma` to every cell.
pub fn add_measurement_noise(profile: &SurfaceProfile, sigma: f64, seed: u64) -> SurfaceProfile {
    if sigma <= 0.0 {
        return profile.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    SurfaceProfile::new(
        profile
            .heights
            .iter()
            .map(|h| h + normal.sample(&mut rng))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered_grid(n: usize) -> GridSpec {
        // Odd n puts a cell exactly at x = 0.
        GridSpec {
            x0: -((n / 2) as f64),
            dx: 1.0,
            n_cells: n,
            dt: 0.1,
        }
    }

    fn unit_params() -> ModelParams {
        ModelParams {
            rho: 1.0,
            a: 1.0,
            b: 1.0,
            c: 1.0,
            kappa: 2.0,
        }
    }

    fn state_over(n: usize, p: f64, h: f64) -> SimState {
        SimState {
            surface: SurfaceProfile::flat(n, 0.0),
            nozzle: NozzleState {
                position: p,
                height: h,
                angle: 0.0,
            },
        }
    }

    #[test]
    fn spray_shape_examples() {
        assert_eq!(spray_shape(0.0, 2.0), 1.0);
        assert!((spray_shape(2.0, 4.0) - 0.5).abs() < 1e-15);
        assert!((spray_shape(3.0, 1.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn efficiency_examples() {
        let p = ModelParams {
            rho: 1.0,
            a: 1.0,
            b: 1.0,
            c: 1.0,
            kappa: 2.0,
        };
        assert!((efficiency(0.0, &p) - 0.25).abs() < 1e-15);
        assert_eq!(efficiency(0.5, &p), efficiency(-0.5, &p));
        assert_eq!(efficiency(0.5, &p), efficiency(1.0, &p));
        assert!(efficiency(2.0, &p) < efficiency(1.0, &p));
    }

    #[test]
    fn rate_under_nozzle_and_symmetry() {
        let grid = centered_grid(11);
        let s = state_over(11, 0.0, 1.0);
        let model = DepositionModel::new(grid, unit_params(), &s).unwrap();
        let g = model.deposition_rate(&s).unwrap();
        assert!((g[5] - 0.25).abs() < 1e-15);
        for k in 1..=5 {
            assert!((g[5 - k] - g[5 + k]).abs() < 1e-15);
        }
        assert!(g.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn clearance_violation_reported() {
        let grid = centered_grid(5);
        let s = state_over(5, 0.0, 1.0);
        let model = DepositionModel::new(grid, unit_params(), &s).unwrap();
        let mut bad = s.clone();
        bad.surface.heights[3] = 0.95;
        match model.deposition_rate(&bad) {
            Err(Error::ClearanceViolation { cell: 3, .. }) => {}
            other => panic!("expected clearance violation, got {other:?}"),
        }
    }

    #[test]
    fn zero_control_keeps_nozzle_and_grows_surface() {
        let grid = centered_grid(9);
        let s = state_over(9, 0.3, 2.0);
        let model = DepositionModel::new(grid, unit_params(), &s).unwrap();
        let next = model.step(&s, &ControlInput::default()).unwrap();
        assert_eq!(next.nozzle, s.nozzle);
        for (a, b) in next.surface.heights.iter().zip(&s.surface.heights) {
            assert!(a > b);
        }
    }

    #[test]
    fn repeated_steps_grow_fastest_under_nozzle() {
        let grid = centered_grid(15);
        let s = state_over(15, 0.0, 3.0);
        let model = DepositionModel::new(grid, unit_params(), &s).unwrap();
        let traj = model
            .rollout(&s, &[ControlInput::default(); 3], None, 0)
            .unwrap();
        let growth: Vec<f64> = traj
            .final_state()
            .surface
            .heights
            .iter()
            .zip(&s.surface.heights)
            .map(|(a, b)| a - b)
            .collect();
        let argmax = growth
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 7);
    }

    #[test]
    fn step_difference_scales_with_dt() {
        let mut grid = centered_grid(9);
        let s = state_over(9, 0.5, 2.0);
        let u = ControlInput {
            vx: 1.0,
            vh: 0.2,
            omega: 0.01,
        };
        let diff = |dt: f64, grid: &mut GridSpec| {
            grid.dt = dt;
            let m = DepositionModel::new(*grid, unit_params(), &s).unwrap();
            let n = m.step(&s, &u).unwrap();
            (n.to_vector() - s.to_vector()).norm()
        };
        let d1 = diff(1e-3, &mut grid);
        let d2 = diff(2e-3, &mut grid);
        assert!((d2 / d1 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn empty_control_sequence_returns_initial_state() {
        let grid = centered_grid(5);
        let s = state_over(5, 0.0, 2.0);
        let model = DepositionModel::new(grid, unit_params(), &s).unwrap();
        let t = model.rollout(&s, &[], None, 3).unwrap();
        assert_eq!(t.states, vec![s]);
        assert!(t.controls.is_empty());
    }

    #[test]
    fn rollout_error_carries_step_index() {
        let grid = centered_grid(5);
        let s = state_over(5, 0.0, 2.0);
        let model = DepositionModel::new(grid, unit_params(), &s).unwrap();
        let down = ControlInput {
            vx: 0.0,
            vh: -10.0,
            omega: 0.0,
        };
        // heights 2.0, 1.0, 0.0: the third step starts below the clearance
        match model.rollout(&s, &[down; 5], None, 0) {
            Err(Error::StepFailed { step: 2, .. }) => {}
            other => panic!("expected failure at step 2, got {other:?}"),
        }
    }

    #[test]
    fn nozzle_rows_of_jacobians_are_kinematic() {
        let grid = centered_grid(7);
        let mut s = state_over(7, 0.2, 2.0);
        s.surface.heights = vec![0.0, 0.1, 0.3, 0.2, 0.0, 0.05, 0.1];
        let model = DepositionModel::new(grid, unit_params(), &s).unwrap();
        let (a, b) = model.linearize(&s, &ControlInput::speed(1.0)).unwrap();
        let n = 7;
        for r in 0..3 {
            for c in 0..n + 3 {
                let expected = if c == n + r { 1.0 } else { 0.0 };
                assert!((a[(n + r, c)] - expected).abs() < 1e-9);
            }
            for c in 0..3 {
                let expected = if c == r { grid.dt } else { 0.0 };
                assert!((b[(n + r, c)] - expected).abs() < 1e-9);
            }
        }
        // vh has no direct effect on this step's surface update.
        for i in 0..n {
            assert!(b[(i, 1)].abs() < 1e-9);
        }
    }

    #[test]
    fn coupon_flat_and_symmetric() {
        let grid = GridSpec {
            x0: 0.5,
            dx: 1.0,
            n_cells: 100,
            dt: 0.5,
        };
        let flat = make_coupon(
            &CouponSpec {
                notch_depth: 0.0,
                ..Default::default()
            },
            &grid,
        )
        .unwrap();
        assert!(flat.heights.iter().all(|h| *h == 0.0));

        let c = make_coupon(&CouponSpec::default(), &grid).unwrap();
        let mut rev = c.heights.clone();
        rev.reverse();
        for (a, b) in c.heights.iter().zip(&rev) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c.min(), 0.0);
        // one contiguous minimum plateau
        let at_min: Vec<usize> = (0..c.len()).filter(|&i| c.heights[i] == 0.0).collect();
        assert!(!at_min.is_empty());
        assert_eq!(at_min.last().unwrap() - at_min[0] + 1, at_min.len());
        assert!((c.max() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn coupon_rejects_bad_geometry() {
        let grid = GridSpec {
            x0: 0.5,
            dx: 1.0,
            n_cells: 100,
            dt: 0.5,
        };
        let wide = CouponSpec {
            notch_top_width: 200.0,
            ..Default::default()
        };
        assert!(matches!(make_coupon(&wide, &grid), Err(Error::InvalidGeometry(_))));
        let shallow = CouponSpec {
            wall_slope_deg: 5.0,
            ..Default::default()
        };
        assert!(matches!(make_coupon(&shallow, &grid), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn measurement_noise_statistics() {
        let p = SurfaceProfile::flat(10_000, 1.0);
        assert_eq!(add_measurement_noise(&p, 0.0, 1), p);
        let a = add_measurement_noise(&p, 0.01, 42);
        assert_eq!(a, add_measurement_noise(&p, 0.01, 42));
        let n = a.len() as f64;
        let mean = a.heights.iter().sum::<f64>() / n;
        let var = a.heights.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.01).abs() < 0.05 * 0.01);
    }

    #[test]
    fn profile_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = SurfaceProfile::new(vec![0.0, 1.25, 3.5e-3]);
        p.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("height_mm\n"));
        assert_eq!(SurfaceProfile::read_csv(&path).unwrap(), p);
    }
}
