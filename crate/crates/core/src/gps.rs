//! Guided policy search with BADMM dual descent.
//!
//! Each outer iteration re-solves the guiding controllers against the
//! augmented cost (step 1), samples trajectories from them (step 2), distils
//! the samples into the neural policy (step 3) and moves the Lagrange
//! multipliers of the first-moment constraint (step 4).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{AugmentedCost, CostWeights, GoalProfile, PerPassCost, TrajectoryCost};
use crate::error::{Error, Result};
use crate::ilqr::{self, Dynamics, ILqrConfig, LinearGaussianController, PassDynamics, SolveReport, WarmStart};
use crate::model::{add_measurement_noise, NoiseSpec, SimState, SurfaceProfile};
use crate::policy::{self, FeatureMap, MlpWeights, PolicyParams, TrainConfig, TrainReport, TrainingSample};

pub const NU_MIN: f64 = 1e-4;
pub const NU_MAX: f64 = 1e4;

/// Multiplicative schedule for the per-step KL penalties `nu_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuSchedule {
    pub factor_up: f64,
    pub factor_down: f64,
    /// Band edges as multiples of the median per-step KL.
    pub band_low: f64,
    pub band_high: f64,
}

impl Default for NuSchedule {
    fn default() -> Self {
        Self {
            factor_up: 2.0,
            factor_down: 0.5,
            band_low: 0.5,
            band_high: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpsConfig {
    /// `M`, one guiding controller per pass.
    pub guides: usize,
    /// `N`, sampled trajectories per guide.
    pub samples_per_guide: usize,
    /// `K`, outer iterations.
    pub iterations: usize,
    /// Control steps per pass.
    pub pass_steps: usize,
    /// `alpha` of the multiplier update.
    pub dual_step: f64,
    pub nu_init: f64,
    pub nu_schedule: NuSchedule,
    pub seed: u64,
    /// Diagonal of `Sigma_pi` before the first policy update.
    pub initial_policy_variance: f64,
    /// Stop once the constraint residual falls below this fraction of the
    /// control range.
    pub residual_tolerance: f64,
    pub weights: CostWeights,
    pub ilqr: ILqrConfig,
    pub train: TrainConfig,
    /// Noise for the initial-state randomization: control noise while
    /// propagating earlier guides and measurement noise on the result.
    pub randomization: NoiseSpec,
}

impl Default for GpsConfig {
    fn default() -> Self {
        Self {
            guides: 3,
            samples_per_guide: 5,
            iterations: 10,
            pass_steps: 30,
            dual_step: 0.5,
            nu_init: 0.01,
            nu_schedule: NuSchedule::default(),
            seed: 0,
            initial_policy_variance: 1e4,
            residual_tolerance: 1e-2,
            weights: CostWeights::default(),
            ilqr: ILqrConfig::default(),
            train: TrainConfig::default(),
            randomization: NoiseSpec {
                measurement_sigma: 0.02,
                control_sigma: [0.1, 0.0, 0.0],
                process_sigma: 0.0,
            },
        }
    }
}

impl GpsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.guides == 0 || self.samples_per_guide == 0 || self.pass_steps == 0 {
            return Err(Error::InvalidConfig(
                "GPS needs at least one guide, one sample per guide and one step per pass".into(),
            ));
        }
        if !(self.dual_step > 0.0 && self.dual_step <= 1.0) {
            return Err(Error::InvalidConfig("dual_step must lie in (0, 1]".into()));
        }
        if !(self.nu_init > 0.0) || !(self.initial_policy_variance > 0.0) {
            return Err(Error::InvalidConfig(
                "nu_init and initial_policy_variance must be positive".into(),
            ));
        }
        let s = &self.nu_schedule;
        if !(s.factor_up >= 1.0 && s.factor_down > 0.0 && s.factor_down <= 1.0 && s.band_low <= s.band_high) {
            return Err(Error::InvalidConfig(
                "nu schedule needs factor_up >= 1, 0 < factor_down <= 1, band_low <= band_high".into(),
            ));
        }
        self.weights.validate()?;
        self.ilqr.validate()?;
        self.train.validate()
    }
}

/// Intermediate goals `d_f^1 .. d_f^M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSchedule {
    pub goals: Vec<GoalProfile>,
    pub pass_steps: usize,
}

/// Linear interpolation from `initial` to `target`: goal `i` (1-based) is
/// `initial + (i / M) (target - initial)`.
pub fn make_goal_schedule(
    initial: &SurfaceProfile,
    target: &SurfaceProfile,
    m: usize,
    pass_steps: usize,
) -> Result<GoalSchedule> {
    if initial.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: initial.len(),
            found: target.len(),
        });
    }
    if m == 0 {
        return Err(Error::InvalidConfig("goal schedule needs M >= 1".into()));
    }
    if let Some(cell) = initial
        .heights
        .iter()
        .zip(&target.heights)
        .position(|(a, b)| b < a)
    {
        return Err(Error::InfeasibleTarget { cell });
    }
    let goals = (1..=m)
        .map(|i| {
            let f = i as f64 / m as f64;
            let heights = initial
                .heights
                .iter()
                .zip(&target.heights)
                .map(|(a, b)| if i == m { *b } else { a + f * (b - a) })
                .collect();
            GoalProfile { heights }
        })
        .collect();
    Ok(GoalSchedule { goals, pass_steps })
}

/// What is being controlled and toward what.
#[derive(Debug, Clone)]
pub struct GpsProblem {
    pub dynamics: PassDynamics,
    /// Coupon surface and the nozzle pose at the start of every pass.
    pub start: SimState,
    pub target: SurfaceProfile,
}

impl GpsProblem {
    /// Network inputs: heights over the fill depth, position over the half
    /// width of the domain.
    pub fn feature_map(&self) -> FeatureMap {
        let grid = &self.dynamics.model.grid;
        let depth = self
            .start
            .surface
            .heights
            .iter()
            .zip(&self.target.heights)
            .map(|(a, b)| b - a)
            .fold(0.0, f64::max);
        FeatureMap {
            n_cells: grid.n_cells,
            height_scale: if depth > 0.0 { depth } else { 1.0 },
            position_offset: grid.center(),
            position_scale: 0.5 * grid.width(),
        }
    }

    fn pass_start(&self, surface: &[f64]) -> DVector<f64> {
        SimState {
            surface: SurfaceProfile::new(surface.to_vec()),
            nozzle: self.start.nozzle,
        }
        .to_vector()
    }

    fn n_cells(&self) -> usize {
        self.dynamics.model.grid.n_cells
    }
}

/// `lambda[i][t]`, one control-sized vector per guide and step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub lambda: Vec<Vec<DVector<f64>>>,
}

impl Multipliers {
    pub fn zeros(guides: usize, steps: usize, control_dim: usize) -> Self {
        Self {
            lambda: vec![vec![DVector::zeros(control_dim); steps]; guides],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Per-pass cost of each guide's nominal trajectory.
    pub guide_costs: Vec<f64>,
    /// Augmented cost reached by each guide in step 1.
    pub augmented_costs: Vec<f64>,
    pub policy_loss_initial: f64,
    pub policy_loss_final: f64,
    /// Constraint residual of the policy before step 3 on this iteration's
    /// samples.
    pub residual_before_training: f64,
    /// Constraint residual after step 3.
    pub residual: f64,
    /// Sample estimate of `KL(q || pi)` per step, averaged over guides.
    pub kl: Vec<f64>,
    /// `nu_t` after the schedule update.
    pub nu: Vec<f64>,
    pub lambda_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GpsState {
    pub guides: Vec<LinearGaussianController>,
    /// Nominal start state of each guide's pass.
    pub guide_starts: Vec<DVector<f64>>,
    pub goals: GoalSchedule,
    pub policy: PolicyParams,
    pub multipliers: Multipliers,
    pub nu: Vec<f64>,
    pub iteration: usize,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub converged: bool,
}

/// Sampled trajectories of one guide: `states[j][t]` and the guide mean
/// `means[j][t]` (clamped to the control box) at that state.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideSamples {
    pub states: Vec<Vec<DVector<f64>>>,
    pub means: Vec<Vec<DVector<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub guides: Vec<GuideSamples>,
}

impl SampleSet {
    /// Number of `(x, mu_q)` pairs, `M * N * T`.
    pub fn len(&self) -> usize {
        self.guides
            .iter()
            .flat_map(|g| g.states.iter())
            .map(|s| s.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples_per_guide(&self) -> usize {
        self.guides.first().map_or(0, |g| g.states.len())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for a position in the run.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, p| splitmix(acc ^ splitmix(*p)))
}

fn nominal_cost(cost: &dyn TrajectoryCost, c: &LinearGaussianController) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..c.horizon() {
        total += cost.stage(t, &c.nominal_states[t], &c.nominal_controls[t])?;
    }
    Ok(total + cost.terminal(&c.nominal_states[c.horizon()])?)
}

fn surface_of(x: &DVector<f64>, n: usize) -> Vec<f64> {
    x.rows(0, n).iter().copied().collect()
}

fn clamp_to(u: &mut DVector<f64>, limits: &(DVector<f64>, DVector<f64>)) {
    for i in 0..u.len() {
        u[i] = u[i].clamp(limits.0[i], limits.1[i]);
    }
}

/// Plain per-pass iLQR for each goal in turn; guide `i` starts from the
/// nominal end surface of guide `i - 1`.
pub fn initialize(config: &GpsConfig, problem: &GpsProblem) -> Result<GpsState> {
    config.validate()?;
    let goals = make_goal_schedule(&problem.start.surface, &problem.target, config.guides, config.pass_steps)?;
    let mode = problem.dynamics.mode;
    let n = problem.n_cells();
    let mut guides = Vec::with_capacity(config.guides);
    let mut starts = Vec::with_capacity(config.guides);
    let mut x0 = problem.start.to_vector();
    for (i, goal) in goals.goals.iter().enumerate() {
        let cost = PerPassCost {
            weights: config.weights,
            goal: goal.clone(),
            mode,
        };
        let (c, _) = ilqr::solve(&x0, &cost, config.pass_steps, &problem.dynamics, &config.ilqr, None)
            .map_err(|e| Error::GuideFailed {
                guide: i,
                source: Box::new(e),
            })?;
        let end = surface_of(&c.nominal_states[config.pass_steps], n);
        starts.push(x0);
        guides.push(c);
        x0 = problem.pass_start(&end);
    }
    let features = problem.feature_map();
    let du = mode.dim();
    let weights = MlpWeights::init(
        features.input_dim(),
        config.train.hidden,
        du,
        config.train.u_min,
        config.train.u_max,
        derive_seed(config.seed, &[0x706f_6c69]),
    );
    let policy = PolicyParams {
        weights,
        sigma_pi: DMatrix::identity(du, du) * config.initial_policy_variance,
        features,
    };
    Ok(GpsState {
        guides,
        guide_starts: starts,
        goals,
        policy,
        multipliers: Multipliers::zeros(config.guides, config.pass_steps, du),
        nu: vec![config.nu_init; config.pass_steps],
        iteration: 0,
        diagnostics: Vec::new(),
        converged: false,
    })
}

/// Initial surfaces for a guide's samples: the coupon propagated through the
/// earlier guides (mean control plus `noise.control_sigma`), then measured
/// with `noise.measurement_sigma`. The nozzle is reset to `base`'s pose.
pub fn randomize_initial_states(
    base: &SimState,
    prev_guides: &[LinearGaussianController],
    count: usize,
    noise: &NoiseSpec,
    dynamics: &PassDynamics,
    limits: Option<&(DVector<f64>, DVector<f64>)>,
    seed: u64,
) -> Result<Vec<SimState>> {
    if count == 0 {
        return Err(Error::InvalidConfig("randomization count must be >= 1".into()));
    }
    let n = base.surface.len();
    let std_normal = rand_distr::StandardNormal;
    (0..count)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[j as u64]));
            let mut surface = base.surface.heights.clone();
            for g in prev_guides {
                let mut x = SimState {
                    surface: SurfaceProfile::new(surface),
                    nozzle: base.nozzle,
                }
                .to_vector();
                for t in 0..g.horizon() {
                    let mut u = g.mean_control(t, &x);
                    for k in 0..u.len() {
                        let s = noise.control_sigma.get(k).copied().unwrap_or(0.0);
                        if s > 0.0 {
                            u[k] += s * rand_distr::Distribution::<f64>::sample(&std_normal, &mut rng);
                        }
                    }
                    if let Some(l) = limits {
                        clamp_to(&mut u, l);
                    }
                    x = dynamics.step(&x, &u).map_err(|e| e.at_step(t))?;
                }
                surface = surface_of(&x, n);
            }
            let mut profile = SurfaceProfile::new(surface);
            if noise.measurement_sigma > 0.0 {
                profile = add_measurement_noise(&profile, noise.measurement_sigma, rand::Rng::random(&mut rng));
            }
            Ok(SimState {
                surface: profile,
                nozzle: base.nozzle,
            })
        })
        .collect()
}

/// Step 1: re-solve every guide against its augmented cost, warm-started
/// from its current controller.
pub fn step1_update_guides(
    state: &mut GpsState,
    config: &GpsConfig,
    problem: &GpsProblem,
) -> Result<Vec<(SolveReport, f64)>> {
    let results: Vec<Result<(LinearGaussianController, SolveReport, f64)>> = state
        .guides
        .par_iter()
        .enumerate()
        .map(|(i, guide)| {
            let cost = augmented_cost_for(state, config, problem, i)?;
            let (c, rep) = ilqr::solve(
                &state.guide_starts[i],
                &cost,
                config.pass_steps,
                &problem.dynamics,
                &config.ilqr,
                Some(WarmStart::Controller(guide)),
            )?;
            let base = nominal_cost(&cost.base, &c)?;
            Ok((c, rep, base))
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        let (c, rep, base) = r.map_err(|e| Error::GuideFailed {
            guide: i,
            source: Box::new(e),
        })?;
        state.guides[i] = c;
        out.push((rep, base));
    }
    Ok(out)
}

/// The step-1 objective of guide `i` under the current multipliers,
/// penalties and policy.
pub fn augmented_cost_for(state: &GpsState, config: &GpsConfig, problem: &GpsProblem, i: usize) -> Result<AugmentedCost> {
    AugmentedCost::new(
        PerPassCost {
            weights: config.weights,
            goal: state.goals.goals[i].clone(),
            mode: problem.dynamics.mode,
        },
        state.multipliers.lambda[i].clone(),
        state.nu.clone(),
        state.policy.clone(),
    )
}

/// Step 2: `N` trajectories per guide from randomized initial states, with
/// controls drawn from the guide's Gaussian and clamped to the control box.
pub fn step2_sample(state: &GpsState, config: &GpsConfig, problem: &GpsProblem, seed: u64) -> Result<SampleSet> {
    let limits = config
        .ilqr
        .control_bounds
        .as_ref()
        .map(|b| problem.dynamics.control_limits(b));
    let guides: Vec<Result<GuideSamples>> = (0..state.guides.len())
        .into_par_iter()
        .map(|i| {
            let guide_seed = derive_seed(seed, &[i as u64]);
            let base = SimState {
                surface: problem.start.surface.clone(),
                nozzle: problem.start.nozzle,
            };
            let starts = randomize_initial_states(
                &base,
                &state.guides[..i],
                config.samples_per_guide,
                &config.randomization,
                &problem.dynamics,
                limits.as_ref(),
                derive_seed(guide_seed, &[0]),
            )?;
            let guide = &state.guides[i];
            let mut all_states = Vec::with_capacity(starts.len());
            let mut all_means = Vec::with_capacity(starts.len());
            for (j, s0) in starts.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(guide_seed, &[1, j as u64]));
                let mut x = s0.to_vector();
                let mut xs = Vec::with_capacity(guide.horizon());
                let mut mus = Vec::with_capacity(guide.horizon());
                for t in 0..guide.horizon() {
                    let mut mu = guide.mean_control(t, &x);
                    let mut u = guide.sample_control(t, &x, &mut rng)?;
                    if let Some(l) = &limits {
                        clamp_to(&mut mu, l);
                        clamp_to(&mut u, l);
                    }
                    let next = problem.dynamics.step(&x, &u).map_err(|e| e.at_step(t))?;
                    xs.push(std::mem::replace(&mut x, next));
                    mus.push(mu);
                }
                all_states.push(xs);
                all_means.push(mus);
            }
            Ok(GuideSamples {
                states: all_states,
                means: all_means,
            })
        })
        .collect();
    let mut out = Vec::with_capacity(guides.len());
    for (i, g) in guides.into_iter().enumerate() {
        out.push(g.map_err(|e| Error::GuideFailed {
            guide: i,
            source: Box::new(e),
        })?);
    }
    Ok(SampleSet { guides: out })
}

/// Supervised tuples `(x, mu_q, Sigma_q^-1, nu_t, lambda_it)`.
pub fn training_samples(state: &GpsState, samples: &SampleSet) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for (i, g) in samples.guides.iter().enumerate() {
        let precisions = (0..state.guides[i].horizon())
            .map(|t| state.guides[i].precision(t))
            .collect::<Result<Vec<_>>>()?;
        for (xs, mus) in g.states.iter().zip(&g.means) {
            for (t, (x, mu)) in xs.iter().zip(mus).enumerate() {
                out.push(TrainingSample {
                    features: state.policy.features.features(x),
                    target: mu.clone(),
                    precision: precisions[t].clone(),
                    nu: state.nu[t],
                    lambda: state.multipliers.lambda[i][t].clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Step 3: fit the policy mean to the guide means, then recompute `Sigma_pi`.
pub fn step3_train_policy(
    state: &mut GpsState,
    config: &GpsConfig,
    samples: &SampleSet,
    seed: u64,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no samples to train on".into()));
    }
    let data = training_samples(state, samples)?;
    let train = TrainConfig { seed, ..config.train };
    let (weights, report) = policy::train(
        &state.policy.weights,
        &data,
        samples.samples_per_guide() as f64,
        &train,
    )?;
    state.policy.weights = weights;
    state.policy.sigma_pi = policy::policy_covariance(&state.guides)?;
    Ok(report)
}

/// `(1/N) sum_j [mu_pi(x_t^ij) - mu_q(x_t^ij)]` for every guide and step.
pub fn mean_mismatch(policy: &PolicyParams, samples: &SampleSet) -> Result<Vec<Vec<DVector<f64>>>> {
    samples
        .guides
        .iter()
        .map(|g| {
            let n = g.states.len() as f64;
            let horizon = g.states.first().map_or(0, |s| s.len());
            (0..horizon)
                .map(|t| {
                    let mut acc = DVector::zeros(g.means[0][t].len());
                    for (xs, mus) in g.states.iter().zip(&g.means) {
                        acc += policy.mean(&xs[t])? - &mus[t];
                    }
                    Ok(acc / n)
                })
                .collect()
        })
        .collect()
}

/// Step 4: `lambda_it += alpha * nu_t * (1/N) sum_j (mu_pi - mu_q)`.
pub fn step4_update_multipliers(state: &mut GpsState, dual_step: f64, samples: &SampleSet) -> Result<()> {
    let mismatch = mean_mismatch(&state.policy, samples)?;
    for (i, per_t) in mismatch.iter().enumerate() {
        for (t, m) in per_t.iter().enumerate() {
            state.multipliers.lambda[i][t] += m * (dual_step * state.nu[t]);
        }
    }
    Ok(())
}

/// Mean over guides and steps of `|| E_pi[u] - E_q[u] ||` on the samples.
pub fn constraint_residual(policy: &PolicyParams, samples: &SampleSet) -> Result<f64> {
    let m = mean_mismatch(policy, samples)?;
    let norms: Vec<f64> = m.iter().flat_map(|g| g.iter().map(|v| v.norm())).collect();
    if norms.is_empty() {
        return Ok(0.0);
    }
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

/// `constraint_residual` accumulated in a single pass with running means.
pub fn constraint_residual_streaming(policy: &PolicyParams, samples: &SampleSet) -> Result<f64> {
    let mut mean_norm = 0.0;
    let mut count = 0usize;
    for g in &samples.guides {
        let horizon = g.states.first().map_or(0, |s| s.len());
        for t in 0..horizon {
            let mut running: Option<DVector<f64>> = None;
            for (j, (xs, mus)) in g.states.iter().zip(&g.means).enumerate() {
                let d = policy.mean(&xs[t])? - &mus[t];
                running = Some(match running {
                    None => d,
                    Some(r) => &r + (d - &r) / (j + 1) as f64,
                });
            }
            let norm = running.map_or(0.0, |r| r.norm());
            count += 1;
            mean_norm += (norm - mean_norm) / count as f64;
        }
    }
    Ok(mean_norm)
}

/// `KL(N(m1, S1) || N(m2, S2))`.
pub fn gaussian_kl(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let c2 = s2.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let c1 = s1.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let k = m1.len() as f64;
    let dm = m2 - m1;
    let tr = c2.solve(s1).trace();
    let quad = dm.dot(&c2.solve(&dm));
    let ld = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| c.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
    Ok(0.5 * (tr + quad - k + ld(&c2) - ld(&c1)))
}

/// Sample estimate of `KL(q_i(.|x) || pi(.|x))` at each step, averaged over
/// guides and samples.
pub fn kl_per_step(state: &GpsState, samples: &SampleSet) -> Result<Vec<f64>> {
    let horizon = state.nu.len();
    let mut kl = vec![0.0; horizon];
    let mut counts = vec![0usize; horizon];
    for (i, g) in samples.guides.iter().enumerate() {
        let guide = &state.guides[i];
        for xs in &g.states {
            for (t, x) in xs.iter().enumerate() {
                let mq = guide.mean_control(t, x);
                let mp = state.policy.mean(x)?;
                kl[t] += gaussian_kl(&mq, &guide.covariances[t], &mp, &state.policy.sigma_pi)?;
                counts[t] += 1;
            }
        }
    }
    for (k, c) in kl.iter_mut().zip(counts) {
        if c > 0 {
            *k /= c as f64;
        }
    }
    Ok(kl)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Scales `nu_t` up where the step KL is above the band around the median
/// KL and down where it is below, then clamps to `[NU_MIN, NU_MAX]`.
pub fn adjust_penalties(nu: &mut [f64], kl: &[f64], schedule: &NuSchedule) {
    let med = median(kl);
    let (lo, hi) = (schedule.band_low * med, schedule.band_high * med);
    for (n, k) in nu.iter_mut().zip(kl) {
        if *k > hi {
            *n *= schedule.factor_up;
        } else if *k < lo {
            *n *= schedule.factor_down;
        }
        *n = n.clamp(NU_MIN, NU_MAX);
    }
}

/// One full BADMM iteration (steps 1 to 4 and the penalty update).
pub fn iterate(state: &mut GpsState, config: &GpsConfig, problem: &GpsProblem) -> Result<IterationDiagnostics> {
    let k = state.iteration as u64;
    let solves = step1_update_guides(state, config, problem)?;
    let samples = step2_sample(state, config, problem, derive_seed(config.seed, &[1, k]))?;
    let residual_before_training = constraint_residual(&state.policy, &samples)?;
    let report = step3_train_policy(state, config, &samples, derive_seed(config.train.seed, &[k]))?;
    let residual = constraint_residual(&state.policy, &samples)?;
    let kl = kl_per_step(state, &samples)?;
    step4_update_multipliers(state, config.dual_step, &samples)?;
    adjust_penalties(&mut state.nu, &kl, &config.nu_schedule);
    state.iteration += 1;

    let lambda_norm = state
        .multipliers
        .lambda
        .iter()
        .flat_map(|g| g.iter().map(|l| l.norm_squared()))
        .sum::<f64>()
        .sqrt();
    let diag = IterationDiagnostics {
        iteration: state.iteration,
        guide_costs: solves.iter().map(|(_, c)| *c).collect(),
        augmented_costs: solves.iter().map(|(r, _)| r.final_cost()).collect(),
        policy_loss_initial: report.initial_loss,
        policy_loss_final: report.final_loss,
        residual_before_training,
        residual,
        kl,
        nu: state.nu.clone(),
        lambda_norm,
    };
    state.diagnostics.push(diag.clone());
    Ok(diag)
}

/// Initializes and runs up to `config.iterations` BADMM iterations, stopping
/// early once the constraint residual is within tolerance.
pub fn run(config: &GpsConfig, problem: &GpsProblem) -> Result<GpsState> {
    let mut state = initialize(config, problem)?;
    let tol = config.residual_tolerance * (config.train.u_max - config.train.u_min);
    for k in 0..config.iterations {
        let diag = iterate(&mut state, config, problem).map_err(|e| Error::IterationFailed {
            iteration: k + 1,
            source: Box::new(e),
        })?;
        if diag.residual < tol {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

/// Per-pass cost of guide `i`'s nominal trajectory against its own goal.
pub fn guide_nominal_cost(state: &GpsState, config: &GpsConfig, problem: &GpsProblem, i: usize) -> Result<f64> {
    let cost = PerPassCost {
        weights: config.weights,
        goal: state.goals.goals[i].clone(),
        mode: problem.dynamics.mode,
    };
    nominal_cost(&cost, &state.guides[i])
}
