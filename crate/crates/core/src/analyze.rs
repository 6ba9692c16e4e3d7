//! Stability certificates for computed equilibria, the a priori bounds and sufficient
//! conditions that accompany them, and first-order sensitivity analysis.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::Field;
use crate::mfg::{assemble_df, state_distance, state_norm, Coupling, Problem, State, MASS_TOLERANCE};
use crate::solve::{
    newton_solve, residual_norm, smallest_singular_value, Metric, SingularValueOptions, SolverOptions,
};

/// Smallest singular value above which a linearization counts as injective.
pub const DEFAULT_STABILITY_THRESHOLD: f64 = 1e-8;
/// Residual a state must reach before it is certified.
pub const CERTIFY_RESIDUAL_LIMIT: f64 = 1e-9;
/// Sensitivity analysis needs `m` bounded away from zero.
pub const MIN_DENSITY: f64 = 1e-6;
/// Slack added to the a priori bounds.
pub const BOUND_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    pub threshold: f64,
    pub sigma: SingularValueOptions,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_STABILITY_THRESHOLD,
            sigma: SingularValueOptions::default(),
        }
    }
}

/// Outcome of [`certify_stability`].
///
/// `sigma_min` is the smallest singular value of `dF` in the `H1 × L2` metric; `stable` is the
/// certificate itself. The two condition flags are the classical sufficient conditions
/// (monotone coupling, or `λ` above `Λ̂`), evaluated with the discrete gradient bound `K̂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub sigma_min: f64,
    /// False when the singular value iteration ran out of budget (the value then
    /// overestimates).
    pub sigma_converged: bool,
    pub stable: bool,
    pub monotone_condition: bool,
    pub k_hat: f64,
    pub m_hat: f64,
    pub lambda_hat: f64,
    pub large_lambda_condition: bool,
    pub residual: f64,
}

/// `K̂ = max_e |Du_e|`.
pub fn gradient_bound(problem: &Problem, u: &Field) -> f64 {
    problem
        .space()
        .gradients(u)
        .iter()
        .map(|g| g[0].hypot(g[1]))
        .fold(0.0, f64::max)
}

/// `(K̂, M̂, Λ̂)` with `M̂ = 2‖f‖∞ + K̂²/2` and `Λ̂ = max(2M̂, K̂²/2 + ‖m0‖∞ ‖f'‖∞)`.
pub fn stability_constants(problem: &Problem, u: &Field) -> (f64, f64, f64) {
    let f = problem.coupling();
    let k = gradient_bound(problem, u);
    let m_hat = 2.0 * f.sup_f() + 0.5 * k * k;
    let lambda_hat = (2.0 * m_hat).max(0.5 * k * k + problem.m0().sup_norm() * f.sup_fp());
    (k, m_hat, lambda_hat)
}

/// Certifies a converged state by estimating the smallest singular value of `dF` there.
///
/// A Newton matrix that cannot be factorized is reported as `sigma_min = 0`.
pub fn certify_stability(problem: &Problem, state: &State, opts: &CertifyOptions) -> Result<StabilityReport> {
    let residual = residual_norm(problem, state)?;
    if residual > CERTIFY_RESIDUAL_LIMIT {
        return Err(Error::Precondition(format!(
            "state is not converged (residual {residual:e} > {CERTIFY_RESIDUAL_LIMIT:e})"
        )));
    }
    let metric = Metric::state(problem.space())?;
    let df = assemble_df(problem, state)?;
    let (sigma_min, sigma_converged) = match smallest_singular_value(&df, Some(&metric), &opts.sigma) {
        Ok(s) => (s.value, s.converged),
        Err(Error::LinearSolveFailure { .. }) => (0.0, true),
        Err(e) => return Err(e),
    };
    let (k_hat, m_hat, lambda_hat) = stability_constants(problem, &state.u);
    Ok(StabilityReport {
        sigma_min,
        sigma_converged,
        stable: sigma_min > opts.threshold,
        monotone_condition: problem.coupling().is_monotone(),
        k_hat,
        m_hat,
        lambda_hat,
        large_lambda_condition: problem.lambda() > lambda_hat,
        residual,
    })
}

/// Sup-norm bounds satisfied by every solution: `‖u‖∞ ≤ (‖f‖∞ + ‖s_u‖∞)/λ` and, when
/// `λ > M̂`, `‖m‖∞ ≤ λ ‖m0‖∞ / (λ - M̂)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriCheck {
    pub u_sup: f64,
    pub u_bound: f64,
    pub m_sup: f64,
    pub m_bound: Option<f64>,
    pub mass_error: f64,
}

impl AprioriCheck {
    pub fn holds(&self) -> bool {
        self.u_sup <= self.u_bound
            && self.m_bound.is_none_or(|b| self.m_sup <= b)
            && self.mass_error.abs() < MASS_TOLERANCE
    }
}

pub fn apriori_check(problem: &Problem, state: &State) -> AprioriCheck {
    let lambda = problem.lambda();
    let source = problem.source_u().map_or(0.0, Field::sup_norm);
    let (_, m_hat, _) = stability_constants(problem, &state.u);
    let m_bound = (lambda > m_hat)
        .then(|| lambda / (lambda - m_hat) * problem.m0().sup_norm() + BOUND_SLACK);
    let target_mass = 1.0 + problem.source_m().map_or(0.0, |s| problem.space().integral(s) / lambda);
    AprioriCheck {
        u_sup: state.u.sup_norm(),
        u_bound: (problem.coupling().sup_f() + source) / lambda + BOUND_SLACK,
        m_sup: state.m.sup_norm(),
        m_bound,
        mass_error: problem.space().integral(&state.m) - target_mass,
    }
}

fn check_sensitivity_inputs(problem: &Problem, state: &State, m1: &Field) -> Result<()> {
    problem.check_state(state)?;
    problem.space().check(m1, "m1")?;
    let mass = problem.space().integral(m1);
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::Validation(format!("m1 must have unit mass, got {mass:.17}")));
    }
    if state.m.min() < MIN_DENSITY {
        return Err(Error::Precondition(format!(
            "density minimum {:e} is below {MIN_DENSITY:e}",
            state.m.min()
        )));
    }
    Ok(())
}

/// First-order response `δ` of the solution to the perturbation `f → f + ε f̂`,
/// `m0 → m0 + ε (m1 - m0)`: `δ = dF⁻¹ T(f̂(m), λ (m1 - m0))`, so that
/// `x_ε = x + ε δ + o(ε)`.
pub fn sensitivity_direction(problem: &Problem, state: &State, f_hat: &Coupling, m1: &Field) -> Result<State> {
    check_sensitivity_inputs(problem, state, m1)?;
    let space = problem.space();
    let mut load = space.load(&state.m.map(|v| f_hat.eval(v)));
    let shift = m1.combine(problem.lambda(), problem.m0(), -problem.lambda());
    load.extend(space.load(&shift));
    let df = assemble_df(problem, state)?;
    Ok(State::from_vec(&df.solve_load(&load)?))
}

/// Remainder of the first-order expansion at one `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorSample {
    pub epsilon: f64,
    /// `‖x_ε - x - ε δ‖` in `H1 × L2`, or `None` when the perturbed solve failed.
    pub remainder: Option<f64>,
    pub newton_iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    pub direction: State,
    pub taylor_errors: Vec<TaylorSample>,
    /// Least-squares slope of `log r` against `log ε` over the positive remainders; `None` with
    /// fewer than two of them (e.g. for a null perturbation, whose remainders vanish).
    pub observed_order: Option<f64>,
}

pub const DEFAULT_EPSILONS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Solves the perturbed problem for each `ε` (Newton warm-started at `x + ε δ`) and measures the
/// remainder of the linear expansion. `state` must be a converged solution of `problem`.
pub fn perturbed_taylor_check(
    problem: &Problem,
    state: &State,
    f_hat: &Coupling,
    m1: &Field,
    epsilons: &[f64],
    opts: &SolverOptions,
) -> Result<SensitivityResult> {
    if epsilons.is_empty() || epsilons.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::Validation("epsilons must be a nonempty list of positive numbers".into()));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Validation("epsilons must be strictly decreasing".into()));
    }
    // the prediction can already meet the tolerance for small ε, so every solve takes at least
    // one step; the base state is re-solved the same way, which makes a null perturbation
    // reproduce it exactly
    let opts = SolverOptions {
        min_iter: opts.min_iter.max(1),
        ..*opts
    };
    let (base, _) = newton_solve(problem, state, &opts)?;
    let direction = sensitivity_direction(problem, state, f_hat, m1)?;
    let space = problem.space();
    let taylor_errors: Vec<TaylorSample> = epsilons
        .iter()
        .map(|&eps| {
            let start = state.combine(1.0, &direction, eps);
            let predicted = base.combine(1.0, &direction, eps);
            let outcome = problem
                .perturbed(eps, f_hat, m1)
                .and_then(|p| newton_solve(&p, &start, &opts));
            match outcome {
                Ok((solution, report)) => TaylorSample {
                    epsilon: eps,
                    remainder: Some(state_distance(space, &solution, &predicted)),
                    newton_iterations: Some(report.iterations),
                    error: None,
                },
                Err(e) => TaylorSample {
                    epsilon: eps,
                    remainder: None,
                    newton_iterations: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let points: Vec<(f64, f64)> = taylor_errors
        .iter()
        .filter_map(|s| s.remainder.filter(|&r| r > 0.0).map(|r| (s.epsilon.ln(), r.ln())))
        .collect();
    Ok(SensitivityResult {
        direction,
        taylor_errors,
        observed_order: loglog_slope(&points),
    })
}

/// Least-squares slope through `(x, y)` points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationResult {
    /// `H1 × L2` size of each starting perturbation.
    pub start_distances: Vec<f64>,
    /// Distance of each Newton result from the reference solution.
    pub final_distances: Vec<f64>,
    /// Largest distance between two Newton results.
    pub max_pairwise: f64,
    pub all_converged: bool,
}

/// Random smooth perturbation of a state: low Fourier modes with random coefficients, scaled
/// to `H1 × L2` size `radius`.
pub fn random_perturbation(problem: &Problem, rng: &mut impl Rng, radius: f64) -> State {
    let space = problem.space();
    let dim = space.mesh().dim();
    let mut field = || {
        let modes: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(1..=3) as f64,
                    rng.gen_range(0..=3) as f64,
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        space.interpolate(|x| {
            modes
                .iter()
                .map(|&(c, kx, ky, phase)| {
                    let arg = kx * x[0] + if dim == 2 { ky * x[1] } else { 0.0 };
                    c * (2.0 * PI * (arg + phase)).cos()
                })
                .sum()
        })
    };
    let dir = State::new(field(), field());
    let scale = radius / state_norm(space, &dir);
    State::new(dir.u.map(|v| scale * v), dir.m.map(|v| scale * v))
}

/// Runs Newton from `count` random perturbations of `state` of size `radius` and reports how
/// far the results land from `state` and from each other.
pub fn isolation_probe(
    problem: &Problem,
    state: &State,
    count: usize,
    radius: f64,
    seed: u64,
    opts: &SolverOptions,
) -> Result<IsolationResult> {
    let space = problem.space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::with_capacity(count);
    let mut finals = Vec::with_capacity(count);
    let mut all_converged = true;
    for _ in 0..count {
        let start = state.combine(1.0, &random_perturbation(problem, &mut rng, radius), 1.0);
        starts.push(state_distance(space, &start, state));
        match newton_solve(problem, &start, opts) {
            Ok((s, _)) => finals.push(s),
            Err(_) => all_converged = false,
        }
    }
    let mut max_pairwise: f64 = 0.0;
    for (i, a) in finals.iter().enumerate() {
        for b in &finals[i + 1..] {
            max_pairwise = max_pairwise.max(state_distance(space, a, b));
        }
    }
    Ok(IsolationResult {
        start_distances: starts,
        final_distances: finals.iter().map(|s| state_distance(space, s, state)).collect(),
        max_pairwise,
        all_converged,
    })
}
