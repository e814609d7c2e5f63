//! Entropy-regularized iterative LQR.
//!
//! Each solve returns a time-varying linear-Gaussian controller
//! `u ~ N(u_nom + k + K (x - x_nom), Q_uu^-1)`, the maximum-entropy minimizer
//! of the local quadratic model.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{QuadraticExpansion, TrajectoryCost};
use crate::error::{Error, Result};
use crate::model::{fd_jacobian, ControlBounds, ControlMode, DepositionModel};

/// Discrete-time dynamics over flattened vectors.
pub trait Dynamics: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// `(A, B)` at `(x, u)`; central differences unless overridden.
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let a = fd_jacobian(x, |xp| self.step(xp, u))?;
        let b = fd_jacobian(u, |up| self.step(x, up))?;
        Ok((a, b))
    }

    /// Control box in this dynamics' control coordinates.
    fn control_limits(&self, bounds: &ControlBounds) -> (DVector<f64>, DVector<f64>) {
        let _ = bounds;
        let n = self.control_dim();
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }
}

/// The deposition model as seen by a controller: one control step holds `u`
/// for `substeps` Euler steps.
#[derive(Debug, Clone)]
pub struct PassDynamics {
    pub model: DepositionModel,
    pub mode: ControlMode,
    pub substeps: usize,
}

impl PassDynamics {
    pub fn control_period(&self) -> f64 {
        self.model.grid.dt * self.substeps as f64
    }
}

impl Dynamics for PassDynamics {
    fn state_dim(&self) -> usize {
        self.model.grid.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.mode.dim()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.mode.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.mode.dim(),
                found: u.len(),
            });
        }
        let input = self.mode.to_input(u);
        let mut x = x.clone();
        for _ in 0..self.substeps.max(1) {
            x = self.model.step_vector(&x, &input)?;
        }
        Ok(x)
    }

    fn control_limits(&self, bounds: &ControlBounds) -> (DVector<f64>, DVector<f64>) {
        self.mode.limits(bounds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianController {
    /// `K_t`, controls x states.
    pub gains: Vec<DMatrix<f64>>,
    /// `k_t`.
    pub feedforward: Vec<DVector<f64>>,
    /// `Sigma_t`.
    pub covariances: Vec<DMatrix<f64>>,
    /// `x_0 .. x_T`.
    pub nominal_states: Vec<DVector<f64>>,
    /// `u_0 .. u_{T-1}`.
    pub nominal_controls: Vec<DVector<f64>>,
}

impl LinearGaussianController {
    pub fn horizon(&self) -> usize {
        self.nominal_controls.len()
    }

    pub fn control_dim(&self) -> usize {
        self.nominal_controls.first().map_or(0, |u| u.len())
    }

    /// `mu_t(x) = u_nom + k + K (x - x_nom)`.
    pub fn mean_control(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.nominal_controls[t] + &self.feedforward[t] + &self.gains[t] * (x - &self.nominal_states[t])
    }

    pub fn precision(&self, t: usize) -> Result<DMatrix<f64>> {
        crate::policy::spd_inverse(&self.covariances[t]).ok_or(Error::SingularCovariance)
    }

    /// Draws `u ~ N(mu_t(x), Sigma_t)`.
    pub fn sample_control<R: Rng>(&self, t: usize, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let mean = self.mean_control(t, x);
        let chol = self.covariances[t]
            .clone()
            .cholesky()
            .ok_or(Error::SingularCovariance)?;
        let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
        Ok(mean + chol.l() * z)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let text = serde_json::to_string_pretty(&ControllerFile::from(self))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f: ControllerFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(f.into())
    }
}

/// JSON layout with matrices as nested row arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerFile {
    pub gains: Vec<Vec<Vec<f64>>>,
    pub feedforward: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub nominal_states: Vec<Vec<f64>>,
    pub nominal_controls: Vec<Vec<f64>>,
}

fn nested(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_nested(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nr, nc, |r, c| rows[r][c])
}

fn flat(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

impl From<&LinearGaussianController> for ControllerFile {
    fn from(c: &LinearGaussianController) -> Self {
        Self {
            gains: c.gains.iter().map(nested).collect(),
            feedforward: c.feedforward.iter().map(flat).collect(),
            covariances: c.covariances.iter().map(nested).collect(),
            nominal_states: c.nominal_states.iter().map(flat).collect(),
            nominal_controls: c.nominal_controls.iter().map(flat).collect(),
        }
    }
}

impl From<ControllerFile> for LinearGaussianController {
    fn from(f: ControllerFile) -> Self {
        let vecs = |v: Vec<Vec<f64>>| v.into_iter().map(DVector::from_vec).collect();
        Self {
            gains: f.gains.iter().map(|m| from_nested(m)).collect(),
            feedforward: vecs(f.feedforward),
            covariances: f.covariances.iter().map(|m| from_nested(m)).collect(),
            nominal_states: vecs(f.nominal_states),
            nominal_controls: vecs(f.nominal_controls),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ILqrConfig {
    pub max_iters: usize,
    /// Relative tolerance on cost decrease: stop when the decrease is below
    /// `cost_tol * (1 + |cost|)`.
    pub cost_tol: f64,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub line_search_backtracks: usize,
    #[serde(default)]
    pub control_bounds: Option<ControlBounds>,
}

impl Default for ILqrConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            cost_tol: 1e-6,
            reg_init: 1e-6,
            reg_min: 1e-9,
            reg_max: 1e10,
            line_search_backtracks: 10,
            control_bounds: Some(ControlBounds::default()),
        }
    }
}

impl ILqrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.reg_min < 0.0 || self.reg_min > self.reg_max || self.reg_init > self.reg_max {
            return Err(Error::InvalidConfig(
                "iLQR needs max_iters >= 1 and 0 <= reg_min <= reg_max, reg_init <= reg_max".into(),
            ));
        }
        Ok(())
    }

    fn increase(&self, reg: f64) -> f64 {
        if reg <= 0.0 {
            self.reg_min.max(1e-8)
        } else {
            (reg * 10.0).max(self.reg_min)
        }
    }

    fn decrease(&self, reg: f64) -> f64 {
        let r = reg * 0.5;
        if r < self.reg_min {
            self.reg_min
        } else {
            r
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardResult {
    pub gains: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// `(sum k'Q_u, 1/2 sum k'Q_uu k)`; a step of size `a` is predicted to
    /// change the cost by `a * d1 + a^2 * d2`.
    pub expected_improvement: (f64, f64),
}

/// Riccati-like sweep over the quadratic cost model and linearized dynamics.
///
/// `expansions` holds `T` stage expansions followed by the terminal one.
pub fn backward_pass(
    expansions: &[QuadraticExpansion],
    linearizations: &[(DMatrix<f64>, DMatrix<f64>)],
    reg: f64,
) -> Result<BackwardResult> {
    let horizon = linearizations.len();
    if expansions.len() != horizon + 1 {
        return Err(Error::DimensionMismatch {
            expected: horizon + 1,
            found: expansions.len(),
        });
    }
    let terminal = &expansions[horizon];
    let mut vx = terminal.cx.clone();
    let mut vxx = terminal.cxx.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); horizon];
    let mut feedforward = vec![DVector::zeros(0); horizon];
    let mut covariances = vec![DMatrix::zeros(0, 0); horizon];
    let (mut d1, mut d2) = (0.0, 0.0);

    for t in (0..horizon).rev() {
        let (a, b) = &linearizations[t];
        let q = &expansions[t];
        let at = a.transpose();
        let bt = b.transpose();
        let vxx_a = &vxx * a;
        let vxx_b = &vxx * b;
        let qx = &q.cx + &at * &vx;
        let qu = &q.cu + &bt * &vx;
        let qxx = &q.cxx + &at * &vxx_a;
        let quu = &q.cuu + &bt * &vxx_b;
        let qux = &q.cux + &bt * &vxx_a;

        let nu = quu.nrows();
        let quu_reg = (&quu + quu.transpose()) * 0.5 + DMatrix::identity(nu, nu) * reg;
        let chol = quu_reg.cholesky().ok_or(Error::NotPositiveDefinite { step: t })?;
        let k_ff = -chol.solve(&qu);
        let k_fb = -chol.solve(&qux);
        let sigma = chol.inverse();

        let kt = k_fb.transpose();
        vx = &qx + &kt * &quu * &k_ff + &kt * &qu + qux.transpose() * &k_ff;
        let vxx_new = &qxx + &kt * &quu * &k_fb + &kt * &qux + qux.transpose() * &k_fb;
        vxx = (&vxx_new + vxx_new.transpose()) * 0.5;

        d1 += k_ff.dot(&qu);
        d2 += 0.5 * k_ff.dot(&(&quu * &k_ff));
        gains[t] = k_fb;
        feedforward[t] = k_ff;
        covariances[t] = (&sigma + sigma.transpose()) * 0.5;
    }
    Ok(BackwardResult {
        gains,
        feedforward,
        covariances,
        expected_improvement: (d1, d2),
    })
}

/// Nominal trajectory and the gains to roll out around it.
pub struct ForwardInput<'a> {
    pub nominal_states: &'a [DVector<f64>],
    pub nominal_controls: &'a [DVector<f64>],
    pub gains: &'a [DMatrix<f64>],
    pub feedforward: &'a [DVector<f64>],
}

impl<'a> From<&'a LinearGaussianController> for ForwardInput<'a> {
    fn from(c: &'a LinearGaussianController) -> Self {
        Self {
            nominal_states: &c.nominal_states,
            nominal_controls: &c.nominal_controls,
            gains: &c.gains,
            feedforward: &c.feedforward,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
}

fn clamp(u: &mut DVector<f64>, limits: &(DVector<f64>, DVector<f64>)) {
    for i in 0..u.len() {
        u[i] = u[i].clamp(limits.0[i], limits.1[i]);
    }
}

/// Rolls out `u_t = u_nom + step_scale * k + K (x - x_nom)`, clamped to the
/// control box, through the nonlinear dynamics.
pub fn forward_pass(
    input: &ForwardInput<'_>,
    step_scale: f64,
    x0: &DVector<f64>,
    dynamics: &dyn Dynamics,
    cost: &dyn TrajectoryCost,
    bounds: Option<&ControlBounds>,
) -> Result<ForwardResult> {
    let horizon = input.nominal_controls.len();
    let limits = bounds.map(|b| dynamics.control_limits(b));
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    let mut total = 0.0;
    for t in 0..horizon {
        let mut u = &input.nominal_controls[t]
            + &input.feedforward[t] * step_scale
            + &input.gains[t] * (&x - &input.nominal_states[t]);
        if let Some(l) = &limits {
            clamp(&mut u, l);
        }
        total += cost.stage(t, &x, &u)?;
        let next = dynamics.step(&x, &u).map_err(|e| e.at_step(t))?;
        states.push(std::mem::replace(&mut x, next));
        controls.push(u);
    }
    total += cost.terminal(&x)?;
    states.push(x);
    Ok(ForwardResult {
        states,
        controls,
        cost: total,
    })
}

/// How to build the first nominal control sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SeedMode {
    /// Midpoint of the control box.
    ConstantSpeed,
    /// Uniform within the control box.
    Randomized { seed: u64 },
    Provided { controls: Vec<Vec<f64>> },
}

pub fn nominal_seed(
    horizon: usize,
    mode: &SeedMode,
    control_dim: usize,
    limits: &(DVector<f64>, DVector<f64>),
) -> Result<Vec<DVector<f64>>> {
    match mode {
        SeedMode::ConstantSpeed => {
            let mid = (&limits.0 + &limits.1) * 0.5;
            Ok(vec![mid; horizon])
        }
        SeedMode::Randomized { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..horizon)
                .map(|_| DVector::from_fn(control_dim, |i, _| rng.random_range(limits.0[i]..=limits.1[i])))
                .collect())
        }
        SeedMode::Provided { controls } => {
            if controls.len() != horizon {
                return Err(Error::DimensionMismatch {
                    expected: horizon,
                    found: controls.len(),
                });
            }
            Ok(controls.iter().map(|u| DVector::from_vec(u.clone())).collect())
        }
    }
}

pub enum WarmStart<'a> {
    Controls(Vec<DVector<f64>>),
    Controller(&'a LinearGaussianController),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub accepted: usize,
    /// Total cost after initialization and after each accepted iteration.
    pub costs: Vec<f64>,
    pub converged: bool,
    pub final_regularization: f64,
}

impl SolveReport {
    pub fn final_cost(&self) -> f64 {
        *self.costs.last().unwrap_or(&f64::NAN)
    }
}

/// `(A_t, B_t)` of one step.
type Linearization = (DMatrix<f64>, DMatrix<f64>);

fn expand(
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    dynamics: &dyn Dynamics,
    cost: &dyn TrajectoryCost,
) -> Result<(Vec<QuadraticExpansion>, Vec<Linearization>)> {
    let horizon = controls.len();
    let per_step: Vec<Result<(QuadraticExpansion, Linearization)>> = (0..horizon)
        .into_par_iter()
        .map(|t| {
            let lin = dynamics.linearize(&states[t], &controls[t]).map_err(|e| e.at_step(t))?;
            let q = cost.quadratize_stage(t, &states[t], &controls[t])?;
            Ok((q, lin))
        })
        .collect();
    let mut expansions = Vec::with_capacity(horizon + 1);
    let mut lins = Vec::with_capacity(horizon);
    for r in per_step {
        let (q, l) = r?;
        expansions.push(q);
        lins.push(l);
    }
    expansions.push(cost.quadratize_terminal(&states[horizon])?);
    Ok((expansions, lins))
}

fn backward_with_reg(
    expansions: &[QuadraticExpansion],
    lins: &[(DMatrix<f64>, DMatrix<f64>)],
    reg: &mut f64,
    config: &ILqrConfig,
) -> Result<BackwardResult> {
    loop {
        match backward_pass(expansions, lins, *reg) {
            Ok(b) => return Ok(b),
            Err(Error::NotPositiveDefinite { step }) => {
                *reg = config.increase(*reg);
                if *reg > config.reg_max {
                    return Err(Error::Diverged(format!(
                        "Q_uu not positive definite at step {step} even at maximum regularization"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Iterates linearize / backward pass / backtracking forward pass.
///
/// A line search that finds no decrease even at maximum regularization is
/// treated as convergence to a local minimum; `Diverged` is reserved for a
/// backward pass that cannot be made positive definite.
pub fn solve(
    x0: &DVector<f64>,
    cost: &dyn TrajectoryCost,
    horizon: usize,
    dynamics: &dyn Dynamics,
    config: &ILqrConfig,
    warm_start: Option<WarmStart<'_>>,
) -> Result<(LinearGaussianController, SolveReport)> {
    config.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidConfig("iLQR horizon must be >= 1".into()));
    }
    let bounds = config.control_bounds.as_ref();
    let nu = dynamics.control_dim();
    let nx = dynamics.state_dim();

    let initial = match warm_start {
        Some(WarmStart::Controller(c)) => {
            if c.horizon() != horizon {
                return Err(Error::DimensionMismatch {
                    expected: horizon,
                    found: c.horizon(),
                });
            }
            forward_pass(&ForwardInput::from(c), 0.0, x0, dynamics, cost, bounds)?
        }
        other => {
            let controls = match other {
                Some(WarmStart::Controls(u)) => u,
                _ => {
                    let limits = bounds
                        .map(|b| dynamics.control_limits(b))
                        .unwrap_or_else(|| (DVector::zeros(nu), DVector::zeros(nu)));
                    nominal_seed(horizon, &SeedMode::ConstantSpeed, nu, &limits)?
                }
            };
            if controls.len() != horizon {
                return Err(Error::DimensionMismatch {
                    expected: horizon,
                    found: controls.len(),
                });
            }
            let zeros_k = vec![DMatrix::zeros(nu, nx); horizon];
            let zeros_ff = vec![DVector::zeros(nu); horizon];
            let nominal_states = vec![x0.clone(); horizon];
            let input = ForwardInput {
                nominal_states: &nominal_states,
                nominal_controls: &controls,
                gains: &zeros_k,
                feedforward: &zeros_ff,
            };
            forward_pass(&input, 0.0, x0, dynamics, cost, bounds)?
        }
    };
    if !initial.cost.is_finite() {
        return Err(Error::Diverged("initial rollout cost is not finite".into()));
    }

    let mut states = initial.states;
    let mut controls = initial.controls;
    let mut current = initial.cost;
    let mut reg = config.reg_init;
    let mut report = SolveReport {
        costs: vec![current],
        ..Default::default()
    };
    // backward result consistent with the current nominal, if any
    let mut latest: Option<BackwardResult> = None;

    for _ in 0..config.max_iters {
        report.iterations += 1;
        let (expansions, lins) = expand(&states, &controls, dynamics, cost)?;
        let back = backward_with_reg(&expansions, &lins, &mut reg, config)?;
        let (d1, d2) = back.expected_improvement;
        let predicted = -(d1 + d2);
        if predicted <= config.cost_tol * (1.0 + current.abs()) {
            latest = Some(back);
            report.converged = true;
            break;
        }

        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=config.line_search_backtracks {
            let input = ForwardInput {
                nominal_states: &states,
                nominal_controls: &controls,
                gains: &back.gains,
                feedforward: &back.feedforward,
            };
            if let Ok(fwd) = forward_pass(&input, scale, x0, dynamics, cost, bounds) {
                if fwd.cost.is_finite() && fwd.cost < current {
                    accepted = Some(fwd);
                    break;
                }
            }
            scale *= 0.5;
        }

        match accepted {
            Some(fwd) => {
                let decrease = current - fwd.cost;
                states = fwd.states;
                controls = fwd.controls;
                current = fwd.cost;
                report.accepted += 1;
                report.costs.push(current);
                reg = config.decrease(reg);
                latest = None;
                if decrease <= config.cost_tol * (1.0 + current.abs()) {
                    report.converged = true;
                    break;
                }
            }
            None => {
                reg = config.increase(reg);
                if reg > config.reg_max {
                    latest = Some(back);
                    report.converged = true;
                    break;
                }
            }
        }
    }

    let back = match latest {
        Some(b) => b,
        None => {
            let (expansions, lins) = expand(&states, &controls, dynamics, cost)?;
            backward_with_reg(&expansions, &lins, &mut reg, config)?
        }
    };
    report.final_regularization = reg;
    let controller = LinearGaussianController {
        gains: back.gains,
        feedforward: back.feedforward,
        covariances: back.covariances,
        nominal_states: states,
        nominal_controls: controls,
    };
    Ok((controller, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{CostWeights, GoalProfile, PerPassCost};
    use crate::model::{make_coupon, CouponSpec, GridSpec, ModelParams, NozzleState, SimState};

    /// x' = A x + B u with cost sum x'Qx + u'Ru + x_T' Qf x_T.
    struct Linear {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
    }

    impl Dynamics for Linear {
        fn state_dim(&self) -> usize {
            self.a.nrows()
        }
        fn control_dim(&self) -> usize {
            self.b.ncols()
        }
        fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(&self.a * x + &self.b * u)
        }
        fn control_limits(&self, bounds: &ControlBounds) -> (DVector<f64>, DVector<f64>) {
            ControlMode::SpeedOnly.limits(bounds)
        }
    }

    struct Quad {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        qf: DMatrix<f64>,
        scale: f64,
    }

    impl TrajectoryCost for Quad {
        fn stage(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
            Ok(self.scale * (x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))))
        }
        fn terminal(&self, x: &DVector<f64>) -> Result<f64> {
            Ok(self.scale * x.dot(&(&self.qf * x)))
        }
        fn quadratize_stage(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<QuadraticExpansion> {
            Ok(QuadraticExpansion {
                c0: self.stage(t, x, u)?,
                cx: &self.q * x * (2.0 * self.scale),
                cu: &self.r * u * (2.0 * self.scale),
                cxx: &self.q * (2.0 * self.scale),
                cuu: &self.r * (2.0 * self.scale),
                cux: DMatrix::zeros(u.len(), x.len()),
            })
        }
        fn quadratize_terminal(&self, x: &DVector<f64>) -> Result<QuadraticExpansion> {
            let mut q = QuadraticExpansion::zeros(x.len(), 0);
            q.c0 = self.terminal(x)?;
            q.cx = &self.qf * x * (2.0 * self.scale);
            q.cxx = &self.qf * (2.0 * self.scale);
            Ok(q)
        }
    }

    fn exact_config() -> ILqrConfig {
        ILqrConfig {
            reg_init: 0.0,
            reg_min: 0.0,
            control_bounds: None,
            cost_tol: 1e-12,
            ..Default::default()
        }
    }

    /// Scalar Riccati recursion for x' = x + u, cost x^2 + u^2 (terminal x^2).
    fn scalar_riccati(horizon: usize) -> (Vec<f64>, f64) {
        let mut p = 1.0;
        let mut gains = vec![0.0; horizon];
        for t in (0..horizon).rev() {
            let k = p / (1.0 + p);
            gains[t] = -k;
            p = 1.0 + p - p * p / (1.0 + p);
        }
        (gains, p)
    }

    #[test]
    fn scalar_lqr_matches_riccati() {
        let dyn_ = Linear {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
        };
        let cost = Quad {
            q: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            qf: DMatrix::identity(1, 1),
            scale: 1.0,
        };
        let x0 = DVector::from_element(1, 2.0);
        let (c, rep) = solve(&x0, &cost, 3, &dyn_, &exact_config(), Some(WarmStart::Controls(vec![DVector::zeros(1); 3]))).unwrap();
        let (gains, p0) = scalar_riccati(3);
        for t in 0..3 {
            assert!((c.gains[t][(0, 0)] - gains[t]).abs() < 1e-10);
            assert!(c.feedforward[t][0].abs() < 1e-10);
        }
        assert!((rep.final_cost() - p0 * 4.0).abs() < 1e-10);
        assert_eq!(rep.accepted, 1);
    }

    #[test]
    fn warm_start_at_optimum_stops_immediately() {
        let dyn_ = Linear {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
        };
        let cost = Quad {
            q: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            qf: DMatrix::identity(1, 1),
            scale: 1.0,
        };
        let x0 = DVector::from_element(1, 1.0);
        let cfg = exact_config();
        let (c, _) = solve(&x0, &cost, 4, &dyn_, &cfg, None).unwrap();
        let (c2, rep) = solve(&x0, &cost, 4, &dyn_, &cfg, Some(WarmStart::Controller(&c))).unwrap();
        assert_eq!(rep.accepted, 0);
        assert!(rep.converged);
        assert_eq!(rep.costs.len(), 1);
        assert!((c2.nominal_controls[0][0] - c.nominal_controls[0][0]).abs() < 1e-12);
    }

    #[test]
    fn zero_step_without_gains_reproduces_nominal() {
        let dyn_ = Linear {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
        };
        let cost = Quad {
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1),
            qf: DMatrix::identity(2, 2),
            scale: 1.0,
        };
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let us: Vec<DVector<f64>> = (0..5).map(|t| DVector::from_element(1, t as f64 * 0.3)).collect();
        let mut xs = vec![x0.clone()];
        for u in &us {
            let n = dyn_.step(xs.last().unwrap(), u).unwrap();
            xs.push(n);
        }
        let gains = vec![DMatrix::zeros(1, 2); 5];
        let ff = vec![DVector::from_element(1, 0.7); 5];
        let input = ForwardInput {
            nominal_states: &xs,
            nominal_controls: &us,
            gains: &gains,
            feedforward: &ff,
        };
        let r = forward_pass(&input, 0.0, &x0, &dyn_, &cost, None).unwrap();
        assert_eq!(r.states, xs);
        assert_eq!(r.controls, us);
    }

    #[test]
    fn clamping_respects_bounds() {
        let dyn_ = Linear {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
        };
        let cost = Quad {
            q: DMatrix::identity(1, 1) * 100.0,
            r: DMatrix::identity(1, 1) * 0.01,
            qf: DMatrix::identity(1, 1),
            scale: 1.0,
        };
        let bounds = ControlBounds {
            vx_min: -0.5,
            vx_max: 0.5,
            ..Default::default()
        };
        let cfg = ILqrConfig {
            control_bounds: Some(bounds),
            ..Default::default()
        };
        let (c, _) = solve(&DVector::from_element(1, 5.0), &cost, 6, &dyn_, &cfg, Some(WarmStart::Controls(vec![DVector::zeros(1); 6]))).unwrap();
        assert!(c.nominal_controls.iter().all(|u| u[0] >= -0.5 && u[0] <= 0.5));
    }

    #[test]
    fn covariance_scales_inversely_with_cost() {
        let dyn_ = Linear {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.9]),
            b: DMatrix::from_row_slice(2, 1, &[0.1, 0.5]),
        };
        let mk = |scale| Quad {
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1) * 0.5,
            qf: DMatrix::identity(2, 2) * 2.0,
            scale,
        };
        let x0 = DVector::from_vec(vec![1.0, -1.0]);
        let cfg = exact_config();
        let (c1, _) = solve(&x0, &mk(1.0), 5, &dyn_, &cfg, None).unwrap();
        let (c3, _) = solve(&x0, &mk(3.0), 5, &dyn_, &cfg, None).unwrap();
        for t in 0..5 {
            assert!((&c1.covariances[t] / 3.0 - &c3.covariances[t]).norm() < 1e-12);
            assert!(c1.covariances[t][(0, 0)] > 0.0);
        }
    }

    #[test]
    fn nominal_seed_modes() {
        let limits = (DVector::from_element(1, 0.0), DVector::from_element(1, 5.0));
        let c = nominal_seed(4, &SeedMode::ConstantSpeed, 1, &limits).unwrap();
        assert!(c.iter().all(|u| u[0] == 2.5));
        let r = nominal_seed(50, &SeedMode::Randomized { seed: 3 }, 1, &limits).unwrap();
        assert!(r.iter().all(|u| (0.0..=5.0).contains(&u[0])));
        let given = vec![vec![1.0], vec![2.0]];
        let p = nominal_seed(2, &SeedMode::Provided { controls: given.clone() }, 1, &limits).unwrap();
        assert_eq!(p.iter().map(|u| vec![u[0]]).collect::<Vec<_>>(), given);
    }

    #[test]
    fn deposition_instance_beats_zero_control() {
        let grid = GridSpec {
            x0: 2.5,
            dx: 5.0,
            n_cells: 20,
            dt: 0.5,
        };
        let coupon = CouponSpec {
            notch_depth: 1.0,
            ..Default::default()
        };
        let surface = make_coupon(&coupon, &grid).unwrap();
        let target: Vec<f64> = vec![surface.max(); 20];
        let s0 = SimState {
            surface,
            nozzle: NozzleState {
                position: -5.0,
                height: 11.0,
                angle: 0.0,
            },
        };
        let model = DepositionModel::new(grid, ModelParams::default(), &s0).unwrap();
        let dyn_ = PassDynamics {
            model,
            mode: ControlMode::SpeedOnly,
            substeps: 4,
        };
        let cost = PerPassCost {
            weights: CostWeights::default(),
            goal: GoalProfile { heights: target },
            mode: ControlMode::SpeedOnly,
        };
        let x0 = s0.to_vector();
        let cfg = ILqrConfig {
            max_iters: 30,
            ..Default::default()
        };
        let (c, rep) = solve(&x0, &cost, 30, &dyn_, &cfg, None).unwrap();
        let zero = vec![DVector::zeros(1); 30];
        let zeros_k = vec![DMatrix::zeros(1, 23); 30];
        let zeros_ff = vec![DVector::zeros(1); 30];
        let nominal = vec![x0.clone(); 30];
        let z = forward_pass(
            &ForwardInput {
                nominal_states: &nominal,
                nominal_controls: &zero,
                gains: &zeros_k,
                feedforward: &zeros_ff,
            },
            0.0,
            &x0,
            &dyn_,
            &cost,
            None,
        )
        .unwrap();
        assert!(rep.final_cost() < z.cost, "{} vs {}", rep.final_cost(), z.cost);
        for w in rep.costs.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(c.covariances.iter().all(|s| s[(0, 0)] > 0.0));
    }

    #[test]
    fn controller_json_round_trip() {
        let c = LinearGaussianController {
            gains: vec![DMatrix::from_row_slice(1, 2, &[0.1, -0.2])],
            feedforward: vec![DVector::from_element(1, 0.3)],
            covariances: vec![DMatrix::from_element(1, 1, 0.25)],
            nominal_states: vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![1.5, 2.5])],
            nominal_controls: vec![DVector::from_element(1, 2.0)],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        c.save(&p).unwrap();
        assert_eq!(LinearGaussianController::load(&p).unwrap(), c);
    }
}
