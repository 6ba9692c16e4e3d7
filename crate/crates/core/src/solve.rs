//! Nonlinear solvers for the discrete MFG system: Newton on `F`, the damped Picard map
//! `m ↦ fp(hjb(m))`, the two scalar sub-solves, and an inverse-iteration estimate of the
//! smallest singular value of `dF`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::{assemble_convection, assemble_transport, Drift, FemSpace, Field};
use crate::mfg::{
    apply_g, assemble_df, half_gradient_square_load, residual_f, state_distance, state_norm,
    LinearizedSystem, Problem, State, MASS_TOLERANCE,
};
use crate::sparse::{dot, CsrMatrix, LuFactor};

/// Iteration controls shared by the Newton and Picard solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stopping tolerance: combined `H1 × L2` residual (Newton) or `L2` update size (Picard).
    pub tol: f64,
    pub max_iter: usize,
    /// Newton steps taken even when the initial guess already meets `tol`.
    pub min_iter: usize,
    /// Picard relaxation `θ ∈ (0, 1]`.
    pub damping: f64,
    /// Backtrack Newton steps that do not reduce the residual.
    pub line_search: bool,
}

impl SolverOptions {
    pub fn newton() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 50,
            min_iter: 0,
            damping: 0.5,
            line_search: false,
        }
    }

    pub fn picard() -> Self {
        Self {
            max_iter: 500,
            ..Self::newton()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Validation(format!("tol must be positive, got {}", self.tol)));
        }
        if self.min_iter > self.max_iter {
            return Err(Error::Validation(format!(
                "min_iter {} exceeds max_iter {}",
                self.min_iter, self.max_iter
            )));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Validation(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self::newton()
    }
}

/// Iteration history of a nonlinear solve.
///
/// For Newton, `residual_history[k]` is the residual at the `k`-th iterate (the initial guess
/// is `k = 0`) and `step_history[k]` the size of the step that produced it (0 for `k = 0`);
/// `rate_estimates[k] = log e_{k+1} / log e_k`. For Picard both histories hold the update
/// sizes `‖m_{k+1} - m_k‖_L2` and `rate_estimates[k] = e_{k+1} / e_k`. Undefined rates are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub step_history: Vec<f64>,
    pub rate_estimates: Vec<f64>,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().expect("history is never empty")
    }

    /// `e_{k+1} / e_k²` for consecutive residuals.
    pub fn quadratic_ratios(&self) -> Vec<f64> {
        self.residual_history.windows(2).map(|w| w[1] / (w[0] * w[0])).collect()
    }
}

fn log_ratio(prev: f64, next: f64) -> f64 {
    if prev > 0.0 && prev < 1.0 && next > 0.0 {
        next.ln() / prev.ln()
    } else {
        f64::NAN
    }
}

fn ratio(prev: f64, next: f64) -> f64 {
    if prev > 0.0 {
        next / prev
    } else {
        f64::NAN
    }
}

/// Discrete `H1 × L2` norm of the residual `F_h(state)`.
pub fn residual_norm(problem: &Problem, state: &State) -> Result<f64> {
    Ok(state_norm(problem.space(), &residual_f(problem, state)?))
}

/// `-(A x + G(x))` for both components, i.e. `-blockdiag(A, A) F(x)`, accumulated in extended
/// precision.
fn newton_rhs(problem: &Problem, x: &State) -> Result<Vec<f64>> {
    let (xi, zeta) = apply_g(problem, x)?;
    let neg = |v: Vec<f64>| v.into_iter().map(|r| -r).collect::<Vec<_>>();
    let op = problem.operator();
    let mut rhs = op.residual(&neg(xi), &x.u);
    rhs.extend(op.residual(&neg(zeta), &x.m));
    Ok(rhs)
}

/// Newton's method on `F_h(u, m) = 0`.
///
/// Each step solves `F(x_k) + dF[x_k](x_{k+1} - x_k) = 0`. Multiplied by `blockdiag(A, A)`
/// this is the sparse system `(A + dG[x_k]) δ = -(A x_k + G(x_k))` for the increment
/// `δ = x_{k+1} - x_k`.
pub fn newton_solve(problem: &Problem, init: &State, opts: &SolverOptions) -> Result<(State, SolveReport)> {
    opts.validate()?;
    problem.check_state(init)?;
    let space = problem.space();
    let mut x = init.clone();
    let mut res = residual_norm(problem, &x)?;
    let mut residuals = vec![res];
    let mut steps = vec![0.0];
    let mut iterations = 0;
    while res > opts.tol || iterations < opts.min_iter {
        if iterations == opts.max_iter {
            return Err(Error::MaxIterations {
                solver: "newton",
                iterations,
                residual: res,
            });
        }
        let system = assemble_df(problem, &x)?;
        let rhs = newton_rhs(problem, &x)?;
        let increment = State::from_vec(&system.solve_load(&rhs)?);
        let target = x.combine(1.0, &increment, 1.0);
        let (next, next_res) = if opts.line_search {
            backtrack(problem, &x, &target, res)?
        } else {
            let r = residual_norm(problem, &target)?;
            (target, r)
        };
        steps.push(state_distance(space, &next, &x));
        residuals.push(next_res);
        x = next;
        res = next_res;
        iterations += 1;
    }
    let rate_estimates = residuals.windows(2).map(|w| log_ratio(w[0], w[1])).collect();
    Ok((
        x,
        SolveReport {
            converged: true,
            iterations,
            residual_history: residuals,
            step_history: steps,
            rate_estimates,
        },
    ))
}

/// Halves the step towards `target` until the residual drops below `current` (at most ten
/// times; the last trial is accepted regardless).
fn backtrack(problem: &Problem, x: &State, target: &State, current: f64) -> Result<(State, f64)> {
    let mut alpha = 1.0;
    loop {
        let trial = x.combine(1.0 - alpha, target, alpha);
        let r = residual_norm(problem, &trial)?;
        if r < current || alpha < 1e-3 {
            return Ok((trial, r));
        }
        alpha *= 0.5;
    }
}

/// Damped fixed-point iteration `m ← (1 - θ) m + θ Φ(m)` with `Φ(m) = fp_solve(hjb_solve(m))`.
///
/// Stops when `‖m_{k+1} - m_k‖_L2 ≤ tol`; the returned `u` is the HJB solution for the final
/// density.
pub fn picard_solve(problem: &Problem, init_m: &Field, opts: &SolverOptions) -> Result<(State, SolveReport)> {
    opts.validate()?;
    let space = problem.space();
    space.check(init_m, "initial density")?;
    let mass = space.integral(init_m);
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::Validation(format!(
            "initial density must have unit mass, got {mass:.17}"
        )));
    }
    let inner = inner_options(opts);
    let theta = opts.damping;
    let mut m = init_m.clone();
    let mut u = Field::zeros(space.node_count());
    let mut updates = Vec::new();
    loop {
        u = hjb_solve_from(problem, &m, &u, &inner)?;
        let phi = fp_solve(problem, &u)?;
        let next = m.combine(1.0 - theta, &phi, theta);
        let delta = space.l2_norm(&next.combine(1.0, &m, -1.0));
        updates.push(delta);
        m = next;
        if delta <= opts.tol {
            break;
        }
        if updates.len() == opts.max_iter {
            return Err(Error::MaxIterations {
                solver: "picard",
                iterations: updates.len(),
                residual: delta,
            });
        }
    }
    let u = hjb_solve_from(problem, &m, &u, &inner)?;
    let rate_estimates = updates.windows(2).map(|w| ratio(w[0], w[1])).collect();
    Ok((
        State::new(u, m),
        SolveReport {
            converged: true,
            iterations: updates.len(),
            residual_history: updates.clone(),
            step_history: updates,
            rate_estimates,
        },
    ))
}

/// Sub-solves run tighter than the outer iteration so they never limit its accuracy.
fn inner_options(opts: &SolverOptions) -> SolverOptions {
    SolverOptions {
        tol: (opts.tol * 1e-2).max(HJB_TOLERANCE_FLOOR),
        max_iter: 50,
        ..*opts
    }
}

/// Below this the HJB residual is dominated by rounding on fine meshes.
const HJB_TOLERANCE_FLOOR: f64 = 1e-13;

/// `R(u) = A u + ∫ ½|Du|² φ - M(f(m) + source_u)`, the discrete HJB residual as a load.
fn hjb_residual_load(problem: &Problem, data: &[f64], u: &Field, grads: &[[f64; 2]]) -> Vec<f64> {
    let q = half_gradient_square_load(problem.space(), grads);
    let b: Vec<f64> = data.iter().zip(&q).map(|(d, q)| d - q).collect();
    problem.operator().residual(&b, u).iter().map(|r| -r).collect()
}

/// Solves `-Δu + ½|Du|² + λu = f(m) + source_u` for fixed `m`, starting from zero.
pub fn hjb_solve(problem: &Problem, m: &Field, opts: &SolverOptions) -> Result<Field> {
    hjb_solve_from(problem, m, &Field::zeros(problem.node_count()), opts)
}

/// As [`hjb_solve`], warm-started at `u0`.
///
/// Newton iteration `(A + C(Du_j)) u_{j+1} = ∫ ½|Du_j|² φ + M(f(m) + source_u)` with `C` the
/// convection matrix of the current gradient; stops when `‖A⁻¹ R(u)‖_H1 ≤ tol`.
pub fn hjb_solve_from(problem: &Problem, m: &Field, u0: &Field, opts: &SolverOptions) -> Result<Field> {
    opts.validate()?;
    let space = problem.space();
    space.check(m, "m")?;
    space.check(u0, "initial u")?;
    let a = problem.operator();
    let data = problem.hjb_data_load(m);
    let mut u = u0.clone();
    for iteration in 0..=opts.max_iter {
        let grads = space.gradients(&u);
        let r = hjb_residual_load(problem, &data, &u, &grads);
        let res = space.h1_norm(&a.solve(&r)?);
        if res <= opts.tol {
            return Ok(u);
        }
        if iteration == opts.max_iter {
            return Err(Error::MaxIterations {
                solver: "hjb",
                iterations: iteration,
                residual: res,
            });
        }
        let c = assemble_convection(space.mesh(), &Drift::PerElement(grads.clone()));
        let q = half_gradient_square_load(space, &grads);
        let rhs: Vec<f64> = q.iter().zip(&data).map(|(x, y)| x + y).collect();
        u = Field::new(a.factorize_with(&c, "HJB Newton matrix")?.solve(&rhs)?);
    }
    unreachable!("loop returns on its last iteration")
}

/// Solves the Fokker-Planck equation `-Δm - div(m Du) + λm = λ m0 + source_m` for fixed `u`.
pub fn fp_solve(problem: &Problem, u: &Field) -> Result<Field> {
    let space = problem.space();
    space.check(u, "u")?;
    let transport = assemble_transport(space.mesh(), &Drift::PerElement(space.gradients(u)));
    let lu = problem.operator().factorize_with(&transport, "Fokker-Planck matrix")?;
    let m = lu.solve(&problem.fp_data_load())?;
    Ok(Field::new(m))
}

/// A square operator that can be inverted and transpose-inverted.
pub trait InvertibleOperator {
    fn dim(&self) -> usize;
    fn solve(&self, y: &[f64]) -> Result<Vec<f64>>;
    fn solve_transpose(&self, y: &[f64]) -> Result<Vec<f64>>;
}

impl InvertibleOperator for LinearizedSystem {
    fn dim(&self) -> usize {
        LinearizedSystem::dim(self)
    }

    fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        LinearizedSystem::solve(self, y)
    }

    fn solve_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        LinearizedSystem::solve_transpose(self, y)
    }
}

impl InvertibleOperator for LuFactor {
    fn dim(&self) -> usize {
        LuFactor::dim(self)
    }

    fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        LuFactor::solve(self, y)
    }

    fn solve_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        LuFactor::solve_transpose(self, y)
    }
}

/// Inner product `xᵀ W y` given by a symmetric positive definite Gram matrix.
#[derive(Debug)]
pub struct Metric {
    gram: CsrMatrix,
    lu: LuFactor,
}

impl Metric {
    pub fn new(gram: CsrMatrix) -> Result<Self> {
        let lu = gram.factorize("metric Gram matrix")?;
        Ok(Self { gram, lu })
    }

    /// `blockdiag(K + M, M)`: the `H1 × L2` product metric on state coefficient vectors.
    pub fn state(space: &FemSpace) -> Result<Self> {
        Self::new(CsrMatrix::block2x2([
            [Some(space.h1_gram()), None],
            [None, Some(space.mass())],
        ]))
    }

    pub fn gram(&self) -> &CsrMatrix {
        &self.gram
    }

    pub fn norm(&self, x: &[f64]) -> f64 {
        dot(x, &self.gram.matvec(x)).max(0.0).sqrt()
    }
}

/// Controls for [`smallest_singular_value`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularValueOptions {
    /// Relative change of the estimate between iterations that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SingularValueOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 2000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularValueEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Smallest singular value of `op` with respect to `metric` (Euclidean when `None`), by
/// inverse power iteration on the normal equations: the dominant singular value of `op⁻¹`
/// is found by iterating `y ← W⁻¹ op⁻ᵀ W op⁻¹ y`.
///
/// The start vector is pseudo-random from `seed`: a structured start such as all-ones can be
/// exactly orthogonal to the smallest singular direction on symmetric meshes. Every iterate
/// yields an upper bound `1 / ‖op⁻¹ y‖_W` on the smallest singular value, so an unconverged
/// estimate errs high.
pub fn smallest_singular_value<O: InvertibleOperator + ?Sized>(
    op: &O,
    metric: Option<&Metric>,
    opts: &SingularValueOptions,
) -> Result<SingularValueEstimate> {
    let n = op.dim();
    let apply_w = |x: &[f64]| match metric {
        Some(w) => w.gram.matvec(x),
        None => x.to_vec(),
    };
    let solve_w = |x: &[f64]| match metric {
        Some(w) => w.lu.solve(x),
        None => Ok(x.to_vec()),
    };
    let norm = |x: &[f64]| dot(x, &apply_w(x)).max(0.0).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s = norm(&y);
    y.iter_mut().for_each(|v| *v /= s);

    let mut estimate = f64::INFINITY;
    for iteration in 1..=opts.max_iter {
        let z = op.solve(&y)?;
        let zn = norm(&z);
        let value = if zn > 0.0 { 1.0 / zn } else { f64::INFINITY };
        if (value - estimate).abs() <= opts.tol * value {
            return Ok(SingularValueEstimate {
                value,
                converged: true,
                iterations: iteration,
            });
        }
        estimate = value;
        let w = op.solve_transpose(&apply_w(&z))?;
        y = solve_w(&w)?;
        let s = norm(&y);
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::linear("singular value iteration", "iterate collapsed"));
        }
        y.iter_mut().for_each(|v| *v /= s);
    }
    Ok(SingularValueEstimate {
        value: estimate,
        converged: false,
        iterations: opts.max_iter,
    })
}
