//! Running, terminal, per-pass and multiplier-augmented costs, with the local
//! quadratic models the iLQR backward pass consumes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlInput, ControlMode, SimState, SurfaceProfile};
use crate::policy::PolicyParams;

/// Smallest eigenvalue allowed in a stage cost's `c_uu`.
pub const CUU_EIGEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    /// Cost per step (time penalty).
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// Weight on the squared profile error.
    pub w_goal: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w0: 0.0,
            w1: 1e-3,
            w2: 1e-3,
            w3: 1e-3,
            w_goal: 1.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.w0, self.w1, self.w2, self.w3].iter().all(|w| *w >= 0.0) && self.w_goal > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("cost weights must be >= 0 with w_goal > 0".into()))
        }
    }

    fn control_weights(&self, mode: ControlMode) -> DVector<f64> {
        match mode {
            ControlMode::SpeedOnly => DVector::from_element(1, self.w1),
            ControlMode::Full => DVector::from_vec(vec![self.w1, self.w2, self.w3]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalProfile {
    pub heights: Vec<f64>,
}

impl From<SurfaceProfile> for GoalProfile {
    fn from(p: SurfaceProfile) -> Self {
        Self { heights: p.heights }
    }
}

impl GoalProfile {
    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }
}

/// Second-order model `c0 + cx'dx + cu'du + 1/2 dx'cxx dx + 1/2 du'cuu du + du'cux dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticExpansion {
    pub c0: f64,
    pub cx: DVector<f64>,
    pub cu: DVector<f64>,
    pub cxx: DMatrix<f64>,
    pub cuu: DMatrix<f64>,
    pub cux: DMatrix<f64>,
}

impl QuadraticExpansion {
    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self {
            c0: 0.0,
            cx: DVector::zeros(nx),
            cu: DVector::zeros(nu),
            cxx: DMatrix::zeros(nx, nx),
            cuu: DMatrix::zeros(nu, nu),
            cux: DMatrix::zeros(nu, nx),
        }
    }

    pub fn evaluate(&self, dx: &DVector<f64>, du: &DVector<f64>) -> f64 {
        self.c0
            + self.cx.dot(dx)
            + self.cu.dot(du)
            + 0.5 * dx.dot(&(&self.cxx * dx))
            + 0.5 * du.dot(&(&self.cuu * du))
            + du.dot(&(&self.cux * dx))
    }

    /// Floors the eigenvalues of `cuu` at [`CUU_EIGEN_FLOOR`].
    pub fn floor_cuu(&mut self) {
        if self.cuu.is_empty() {
            return;
        }
        let sym = (&self.cuu + self.cuu.transpose()) * 0.5;
        let mut eig = SymmetricEigen::new(sym);
        eig.eigenvalues.apply(|l| *l = l.max(CUU_EIGEN_FLOOR));
        self.cuu = eig.recompose();
    }
}

pub fn running_cost(u: &ControlInput, w: &CostWeights) -> f64 {
    w.w0 + w.w1 * u.vx * u.vx + w.w2 * u.vh * u.vh + w.w3 * u.omega * u.omega
}

fn squared_error(d: &[f64], goal: &[f64]) -> Result<f64> {
    if d.len() != goal.len() {
        return Err(Error::DimensionMismatch {
            expected: goal.len(),
            found: d.len(),
        });
    }
    Ok(d.iter().zip(goal).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `w_goal * ||d_T - d_f||^2`.
pub fn terminal_cost(state: &SimState, goal: &GoalProfile, w_goal: f64) -> Result<f64> {
    Ok(w_goal * squared_error(&state.surface.heights, &goal.heights)?)
}

/// Running cost plus the profile-error term, charged at every step of a pass.
pub fn per_pass_cost(state: &SimState, u: &ControlInput, goal: &GoalProfile, w: &CostWeights) -> Result<f64> {
    Ok(running_cost(u, w) + terminal_cost(state, goal, w.w_goal)?)
}

/// `per_pass_cost / nu - u'lambda / nu - log N(u; mu_pi(x), Sigma_pi)`.
#[allow(clippy::too_many_arguments)]
pub fn augmented_cost(
    state: &SimState,
    u: &ControlInput,
    goal: &GoalProfile,
    w: &CostWeights,
    lambda: &DVector<f64>,
    nu: f64,
    policy: &PolicyParams,
    mode: ControlMode,
) -> Result<f64> {
    let uv = mode.to_vector(u);
    let base = per_pass_cost(state, u, goal, w)?;
    let log_pi = policy.log_density(&uv, &state.to_vector())?;
    Ok(base / nu - uv.dot(lambda) / nu - log_pi)
}

/// Cost of a trajectory over flattened states and controls.
pub trait TrajectoryCost: Sync {
    /// Cost of step `t` at `(x_t, u_t)`.
    fn stage(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64>;
    fn terminal(&self, x: &DVector<f64>) -> Result<f64>;
    fn quadratize_stage(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<QuadraticExpansion>;
    /// Expansion of the terminal cost; `cu`, `cuu`, `cux` are empty.
    fn quadratize_terminal(&self, x: &DVector<f64>) -> Result<QuadraticExpansion>;
}

/// The per-pass objective `sum_t (running + w_goal ||d_t - d_goal||^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerPassCost {
    pub weights: CostWeights,
    pub goal: GoalProfile,
    pub mode: ControlMode,
}

impl PerPassCost {
    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.goal.len() + 3 {
            return Err(Error::DimensionMismatch {
                expected: self.goal.len() + 3,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn profile_error(&self, x: &DVector<f64>) -> Result<f64> {
        self.check(x)?;
        let n = self.goal.len();
        Ok(self.weights.w_goal * squared_error(x.rows(0, n).as_slice(), &self.goal.heights)?)
    }

    fn control_term(&self, u: &DVector<f64>) -> f64 {
        let w = self.weights.control_weights(self.mode);
        self.weights.w0 + u.iter().zip(w.iter()).map(|(ui, wi)| wi * ui * ui).sum::<f64>()
    }

    fn expand_terminal(&self, x: &DVector<f64>, nu: usize) -> Result<QuadraticExpansion> {
        self.check(x)?;
        let n = self.goal.len();
        let mut q = QuadraticExpansion::zeros(x.len(), nu);
        let wg = self.weights.w_goal;
        for i in 0..n {
            let e = x[i] - self.goal.heights[i];
            q.c0 += wg * e * e;
            q.cx[i] = 2.0 * wg * e;
            q.cxx[(i, i)] = 2.0 * wg;
        }
        Ok(q)
    }
}

impl TrajectoryCost for PerPassCost {
    fn stage(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        Ok(self.control_term(u) + self.profile_error(x)?)
    }

    fn terminal(&self, x: &DVector<f64>) -> Result<f64> {
        self.profile_error(x)
    }

    fn quadratize_stage(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<QuadraticExpansion> {
        let mut q = self.expand_terminal(x, u.len())?;
        let w = self.weights.control_weights(self.mode);
        q.c0 += self.control_term(u);
        for k in 0..u.len() {
            q.cu[k] = 2.0 * w[k] * u[k];
            q.cuu[(k, k)] = 2.0 * w[k];
        }
        q.floor_cuu();
        Ok(q)
    }

    fn quadratize_terminal(&self, x: &DVector<f64>) -> Result<QuadraticExpansion> {
        self.expand_terminal(x, 0)
    }
}

/// Guide objective of the dual step: the per-pass cost scaled by `1/nu_t`,
/// the multiplier term and the policy log-likelihood penalty.
#[derive(Debug, Clone)]
pub struct AugmentedCost {
    pub base: PerPassCost,
    /// `lambda_t`, one per step.
    pub lambda: Vec<DVector<f64>>,
    /// `nu_t`, one per step.
    pub nu: Vec<f64>,
    pub policy: PolicyParams,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl AugmentedCost {
    pub fn new(base: PerPassCost, lambda: Vec<DVector<f64>>, nu: Vec<f64>, policy: PolicyParams) -> Result<Self> {
        if lambda.len() != nu.len() {
            return Err(Error::DimensionMismatch {
                expected: nu.len(),
                found: lambda.len(),
            });
        }
        if nu.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("nu_t must be positive".into()));
        }
        let chol = policy.sigma_pi.clone().cholesky().ok_or(Error::SingularCovariance)?;
        let k = policy.sigma_pi.nrows() as f64;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let precision = chol.inverse();
        Ok(Self {
            base,
            lambda,
            nu,
            policy,
            precision: (&precision + precision.transpose()) * 0.5,
            log_norm: 0.5 * (log_det + k * (2.0 * std::f64::consts::PI).ln()),
        })
    }

    fn nu_at(&self, t: usize) -> f64 {
        self.nu[t.min(self.nu.len() - 1)]
    }
}

impl TrajectoryCost for AugmentedCost {
    fn stage(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let nu = self.nu_at(t);
        let base = self.base.stage(t, x, u)?;
        let r = u - self.policy.mean(x)?;
        let neg_log_pi = 0.5 * r.dot(&(&self.precision * &r)) + self.log_norm;
        Ok(base / nu - u.dot(&self.lambda[t]) / nu + neg_log_pi)
    }

    fn terminal(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.base.terminal(x)? / self.nu_at(self.nu.len()))
    }

    fn quadratize_stage(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<QuadraticExpansion> {
        let nu = self.nu_at(t);
        let mut q = self.base.expand_terminal(x, u.len())?;
        let w = self.base.weights.control_weights(self.base.mode);
        q.c0 += self.base.control_term(u);
        for k in 0..u.len() {
            q.cu[k] = 2.0 * w[k] * u[k];
            q.cuu[(k, k)] = 2.0 * w[k];
        }
        q.c0 /= nu;
        q.cx /= nu;
        q.cu /= nu;
        q.cxx /= nu;
        q.cuu /= nu;
        q.c0 -= u.dot(&self.lambda[t]) / nu;
        q.cu -= &self.lambda[t] / nu;

        let r = u - self.policy.mean(x)?;
        let j = self.policy.mean_jacobian(x)?;
        let pr = &self.precision * &r;
        let pj = &self.precision * &j;
        q.c0 += 0.5 * r.dot(&pr) + self.log_norm;
        q.cu += &pr;
        q.cuu += &self.precision;
        q.cx -= j.transpose() * &pr;
        q.cxx += j.transpose() * &pj;
        q.cux -= pj;
        q.floor_cuu();
        Ok(q)
    }

    fn quadratize_terminal(&self, x: &DVector<f64>) -> Result<QuadraticExpansion> {
        let nu = self.nu_at(self.nu.len());
        let mut q = self.base.expand_terminal(x, 0)?;
        q.c0 /= nu;
        q.cx /= nu;
        q.cxx /= nu;
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NozzleState;
    use crate::policy::{FeatureMap, MlpWeights};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(d: Vec<f64>) -> SimState {
        SimState {
            surface: SurfaceProfile::new(d),
            nozzle: NozzleState {
                position: 1.0,
                height: 10.0,
                angle: 0.0,
            },
        }
    }

    fn w(w0: f64, w1: f64, w2: f64, w3: f64) -> CostWeights {
        CostWeights {
            w0,
            w1,
            w2,
            w3,
            w_goal: 1.0,
        }
    }

    #[test]
    fn running_cost_examples() {
        assert_eq!(running_cost(&ControlInput::default(), &w(0.0, 1.0, 1.0, 1.0)), 0.0);
        assert_eq!(running_cost(&ControlInput::speed(2.0), &w(0.0, 1.0, 0.0, 0.0)), 4.0);
        let u = ControlInput {
            vx: 1.0,
            vh: 1.0,
            omega: 1.0,
        };
        assert_eq!(running_cost(&u, &w(1.0, 1.0, 1.0, 1.0)), 4.0);
    }

    #[test]
    fn terminal_cost_examples() {
        let goal = GoalProfile {
            heights: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(terminal_cost(&state(vec![1.0, 2.0, 3.0]), &goal, 1.0).unwrap(), 0.0);
        assert_eq!(terminal_cost(&state(vec![1.0, 4.0, 3.0]), &goal, 1.0).unwrap(), 4.0);
        assert_eq!(terminal_cost(&state(vec![1.0, 4.0, 3.0]), &goal, 2.5).unwrap(), 10.0);
        assert!(matches!(
            terminal_cost(&state(vec![1.0]), &goal, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn per_pass_cost_examples() {
        let goal = GoalProfile {
            heights: vec![0.5, 0.5],
        };
        let s = state(vec![0.5, 0.5]);
        assert_eq!(per_pass_cost(&s, &ControlInput::default(), &goal, &w(0.3, 1.0, 0.0, 0.0)).unwrap(), 0.3);
        assert_eq!(per_pass_cost(&s, &ControlInput::speed(1.0), &goal, &w(0.0, 1.0, 0.0, 0.0)).unwrap(), 1.0);
    }

    fn policy(n_cells: usize, sigma: f64, seed: u64) -> PolicyParams {
        PolicyParams {
            weights: MlpWeights::init(n_cells + 1, 4, 1, 0.0, 5.0, seed),
            sigma_pi: DMatrix::from_element(1, 1, sigma),
            features: FeatureMap {
                n_cells,
                height_scale: 3.0,
                position_offset: 0.0,
                position_scale: 10.0,
            },
        }
    }

    #[test]
    fn augmented_cost_at_policy_mean() {
        let p = policy(3, 1.0, 4);
        let s = state(vec![0.1, 0.2, 0.3]);
        let goal = GoalProfile {
            heights: vec![1.0; 3],
        };
        let mean = p.mean(&s.to_vector()).unwrap()[0];
        let u = ControlInput::speed(mean);
        let weights = w(0.0, 0.1, 0.0, 0.0);
        let lam = DVector::zeros(1);
        let a = augmented_cost(&s, &u, &goal, &weights, &lam, 1.0, &p, ControlMode::SpeedOnly).unwrap();
        let base = per_pass_cost(&s, &u, &goal, &weights).unwrap();
        assert!((a - base - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

        let a2 = augmented_cost(&s, &u, &goal, &weights, &lam, 2.0, &p, ControlMode::SpeedOnly).unwrap();
        assert!(((a - a2) - base / 2.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_only_cost_is_reproduced_exactly() {
        let c = PerPassCost {
            weights: w(0.2, 0.5, 0.0, 0.0),
            goal: GoalProfile {
                heights: vec![1.0, 2.0],
            },
            mode: ControlMode::SpeedOnly,
        };
        let x = DVector::from_vec(vec![0.3, 1.1, 0.0, 5.0, 0.0]);
        let u = DVector::from_element(1, 2.0);
        let q = c.quadratize_stage(0, &x, &u).unwrap();
        for k in 0..5 {
            let dx = DVector::from_fn(5, |i, _| ((i * 7 + k) as f64).sin());
            let du = DVector::from_element(1, (k as f64).cos());
            let exact = c.stage(0, &(&x + &dx), &(&u + &du)).unwrap();
            assert!((q.evaluate(&dx, &du) - exact).abs() < 1e-12);
        }
        assert_eq!(q.cxx, q.cxx.transpose());
    }

    #[test]
    fn augmented_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let p = policy(n, rng.random_range(0.2..2.0), seed);
            let base = PerPassCost {
                weights: w(0.1, 0.3, 0.0, 0.0),
                goal: GoalProfile {
                    heights: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
                },
                mode: ControlMode::SpeedOnly,
            };
            let lam = vec![DVector::from_element(1, rng.random_range(-1.0..1.0)); 2];
            let c = AugmentedCost::new(base, lam, vec![0.5, 0.7], p).unwrap();
            let mut x = DVector::from_fn(n + 3, |_, _| rng.random_range(0.0..2.0));
            x[n] = rng.random_range(0.0..10.0);
            x[n + 1] = 10.0;
            x[n + 2] = 0.0;
            let u = DVector::from_element(1, rng.random_range(0.5..4.5));
            let q = c.quadratize_stage(1, &x, &u).unwrap();
            let fx = crate::model::fd_jacobian(&x, |xp| {
                Ok(DVector::from_element(1, c.stage(1, xp, &u).unwrap()))
            })
            .unwrap();
            let fu = crate::model::fd_jacobian(&u, |up| {
                Ok(DVector::from_element(1, c.stage(1, &x, up).unwrap()))
            })
            .unwrap();
            let grad = DVector::from_iterator(n + 4, fx.iter().chain(fu.iter()).copied());
            let analytic = DVector::from_iterator(n + 4, q.cx.iter().chain(q.cu.iter()).copied());
            let rel = (&grad - &analytic).norm() / grad.norm().max(1e-12);
            assert!(rel < 1e-6, "seed {seed}: rel {rel}");
        }
    }

    #[test]
    fn cuu_is_floored() {
        let c = PerPassCost {
            weights: w(0.0, 0.0, 0.0, 0.0),
            goal: GoalProfile { heights: vec![0.0; 2] },
            mode: ControlMode::SpeedOnly,
        };
        let q = c
            .quadratize_stage(0, &DVector::zeros(5), &DVector::zeros(1))
            .unwrap();
        assert!((q.cuu[(0, 0)] - CUU_EIGEN_FLOOR).abs() < 1e-18);
    }
}
