//! The stationary MFG system on the torus,
//!
//! ```text
//!   -Δu + ½|Du|² + λu = f(m)
//!   -Δm - div(m Du) + λm = λ m0
//! ```
//!
//! written as `F(u, m) = (u, m) + T(G(u, m)) = 0` with `T = (-Δ + λ)⁻¹` applied per component
//! and `G(u, m) = (½|Du|² - f(m), -div(m Du) - λ m0)`. Everything here is the Galerkin (P1)
//! version: `G` produces load vectors, `T` is [`ShiftedLaplacian`], and the differential
//! `dF = I + T∘dG` is kept in factored form as [`LinearizedSystem`].

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::fem::{
    assemble_convection, assemble_transport, assemble_weighted_stiffness, elementwise_load,
    transport_load, Drift, FemSpace, Field, ShiftedLaplacian,
};
use crate::mesh::Point;
use crate::sparse::{CsrMatrix, LuFactor};

/// Tolerance on the discrete mass of densities.
pub const MASS_TOLERANCE: f64 = 1e-12;
/// Negative nodal density values above this are tolerated (and reported).
pub const NEGATIVITY_TOLERANCE: f64 = 1e-10;

/// The coupling `f`, a bounded C¹ function of the density.
#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    Zero,
    Constant(f64),
    /// `scale · atan(m)`; monotone when `scale ≥ 0`.
    Atan { scale: f64 },
    /// `scale · m / (1 + m²)`; never monotone unless `scale = 0`.
    RationalBump { scale: f64 },
    /// `scale / (1 + m²)`.
    InverseQuadratic { scale: f64 },
    Sum(Vec<Coupling>),
}

impl Coupling {
    pub fn eval(&self, m: f64) -> f64 {
        match self {
            Coupling::Zero => 0.0,
            Coupling::Constant(c) => *c,
            Coupling::Atan { scale } => scale * m.atan(),
            Coupling::RationalBump { scale } => scale * m / (1.0 + m * m),
            Coupling::InverseQuadratic { scale } => scale / (1.0 + m * m),
            Coupling::Sum(parts) => parts.iter().map(|p| p.eval(m)).sum(),
        }
    }

    pub fn deriv(&self, m: f64) -> f64 {
        match self {
            Coupling::Zero | Coupling::Constant(_) => 0.0,
            Coupling::Atan { scale } => scale / (1.0 + m * m),
            Coupling::RationalBump { scale } => {
                let q = 1.0 + m * m;
                scale * (1.0 - m * m) / (q * q)
            }
            Coupling::InverseQuadratic { scale } => {
                let q = 1.0 + m * m;
                -2.0 * scale * m / (q * q)
            }
            Coupling::Sum(parts) => parts.iter().map(|p| p.deriv(m)).sum(),
        }
    }

    /// Upper bound on `sup |f|`.
    pub fn sup_f(&self) -> f64 {
        match self {
            Coupling::Zero => 0.0,
            Coupling::Constant(c) => c.abs(),
            Coupling::Atan { scale } => scale.abs() * PI / 2.0,
            Coupling::RationalBump { scale } => scale.abs() / 2.0,
            Coupling::InverseQuadratic { scale } => scale.abs(),
            Coupling::Sum(parts) => parts.iter().map(Coupling::sup_f).sum(),
        }
    }

    /// Upper bound on `sup |f'|`.
    pub fn sup_fp(&self) -> f64 {
        match self {
            Coupling::Zero | Coupling::Constant(_) => 0.0,
            Coupling::Atan { scale } | Coupling::RationalBump { scale } => scale.abs(),
            // max of 2|m|/(1+m²)² is attained at m = 1/√3
            Coupling::InverseQuadratic { scale } => scale.abs() * 3.0 * 3f64.sqrt() / 8.0,
            Coupling::Sum(parts) => parts.iter().map(Coupling::sup_fp).sum(),
        }
    }

    /// Whether `f' ≥ 0` everywhere is guaranteed.
    pub fn is_monotone(&self) -> bool {
        match self {
            Coupling::Zero | Coupling::Constant(_) => true,
            Coupling::Atan { scale } => *scale >= 0.0,
            Coupling::RationalBump { scale } | Coupling::InverseQuadratic { scale } => *scale == 0.0,
            Coupling::Sum(parts) => parts.iter().all(Coupling::is_monotone),
        }
    }

    pub fn scaled(&self, s: f64) -> Coupling {
        match self {
            Coupling::Zero => Coupling::Zero,
            Coupling::Constant(c) => Coupling::Constant(s * c),
            Coupling::Atan { scale } => Coupling::Atan { scale: s * scale },
            Coupling::RationalBump { scale } => Coupling::RationalBump { scale: s * scale },
            Coupling::InverseQuadratic { scale } => Coupling::InverseQuadratic { scale: s * scale },
            Coupling::Sum(parts) => Coupling::Sum(parts.iter().map(|p| p.scaled(s)).collect()),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Coupling::Zero => true,
            Coupling::Constant(c) => *c == 0.0,
            Coupling::Atan { scale }
            | Coupling::RationalBump { scale }
            | Coupling::InverseQuadratic { scale } => *scale == 0.0,
            Coupling::Sum(parts) => parts.iter().all(Coupling::is_zero),
        }
    }
}

/// Built-in density profiles for `m0` and density perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Density {
    Uniform,
    /// `1 + a Π_k cos(2π(x_k - phase))`, positive for `|a| < 1`.
    Cosine { amplitude: f64, phase: f64 },
}

impl Density {
    pub fn eval(&self, x: &Point, dim: usize) -> f64 {
        match *self {
            Density::Uniform => 1.0,
            Density::Cosine { amplitude, phase } => {
                let p: f64 = x[..dim].iter().map(|&xk| (2.0 * PI * (xk - phase)).cos()).product();
                1.0 + amplitude * p
            }
        }
    }

    /// L2 projection onto the P1 space, rescaled to unit discrete mass.
    pub fn project(&self, space: &FemSpace) -> Result<Field> {
        if let Density::Cosine { amplitude, .. } = self {
            if amplitude.is_nan() || amplitude.abs() >= 1.0 {
                return Err(Error::Validation(format!(
                    "density amplitude must lie in (-1, 1), got {amplitude}"
                )));
            }
        }
        let dim = space.mesh().dim();
        let f = space.project(|x| self.eval(x, dim))?;
        let mass = space.integral(&f);
        Ok(f.map(|v| v / mass))
    }
}

/// A pair of P1 fields `(u, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub u: Field,
    pub m: Field,
}

impl State {
    pub fn new(u: Field, m: Field) -> Self {
        Self { u, m }
    }

    /// Concatenated coefficient vector `[u; m]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.u.coeffs().to_vec();
        v.extend_from_slice(self.m.coeffs());
        v
    }

    pub fn from_vec(v: &[f64]) -> Self {
        let n = v.len() / 2;
        Self {
            u: Field::new(v[..n].to_vec()),
            m: Field::new(v[n..].to_vec()),
        }
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &State, b: f64) -> State {
        State {
            u: self.u.combine(a, &other.u, b),
            m: self.m.combine(a, &other.m, b),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.m.is_finite()
    }
}

/// The discrete surrogate of the X-norm: `‖u‖_H1 + ‖m‖_L2`.
pub fn state_norm(space: &FemSpace, s: &State) -> f64 {
    space.h1_norm(&s.u) + space.l2_norm(&s.m)
}

/// `state_norm(a - b)`.
pub fn state_distance(space: &FemSpace, a: &State, b: &State) -> f64 {
    state_norm(space, &a.combine(1.0, b, -1.0))
}

/// One MFG instance: discount factor, initial density, coupling and optional manufactured
/// forcings (added to the right-hand sides of the HJB and Fokker-Planck equations).
#[derive(Debug, Clone)]
pub struct Problem {
    operator: Arc<ShiftedLaplacian>,
    m0: Field,
    coupling: Coupling,
    source_u: Option<Field>,
    source_m: Option<Field>,
}

impl Problem {
    pub fn new(space: Arc<FemSpace>, lambda: f64, m0: Field, coupling: Coupling) -> Result<Self> {
        let operator = Arc::new(ShiftedLaplacian::new(space, lambda)?);
        Self::with_operator(operator, m0, coupling)
    }

    /// Builds a problem reusing an already factorized `K + λM`.
    pub fn with_operator(operator: Arc<ShiftedLaplacian>, m0: Field, coupling: Coupling) -> Result<Self> {
        let space = operator.space();
        space.check(&m0, "m0")?;
        let mass = space.integral(&m0);
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Validation(format!(
                "m0 must have unit mass, got {mass:.17}"
            )));
        }
        if m0.min() < -NEGATIVITY_TOLERANCE {
            return Err(Error::Validation(format!(
                "m0 has negative nodal value {:e}",
                m0.min()
            )));
        }
        for x in [-1e3, -1.0, 0.0, 0.5, 1.0, 2.0, 1e3] {
            if coupling.eval(x).abs() > coupling.sup_f() * (1.0 + 1e-12) + 1e-15
                || coupling.deriv(x).abs() > coupling.sup_fp() * (1.0 + 1e-12) + 1e-15
            {
                return Err(Error::Validation(format!(
                    "coupling {coupling:?} exceeds its declared bounds at {x}"
                )));
            }
        }
        Ok(Self {
            operator,
            m0,
            coupling,
            source_u: None,
            source_m: None,
        })
    }

    /// Adds manufactured forcings; `None` leaves a component unforced.
    pub fn with_sources(mut self, source_u: Option<Field>, source_m: Option<Field>) -> Result<Self> {
        if let Some(s) = &source_u {
            self.space().check(s, "source_u")?;
        }
        if let Some(s) = &source_m {
            self.space().check(s, "source_m")?;
        }
        self.source_u = source_u;
        self.source_m = source_m;
        Ok(self)
    }

    /// The problem with coupling `f + ε f̂` and initial density `m0 + ε (m1 - m0)`.
    pub fn perturbed(&self, eps: f64, f_hat: &Coupling, m1: &Field) -> Result<Self> {
        let coupling = Coupling::Sum(vec![self.coupling.clone(), f_hat.scaled(eps)]);
        let shift = m1.combine(1.0, &self.m0, -1.0);
        let m0 = self.m0.combine(1.0, &shift, eps);
        let mut p = Self::with_operator(self.operator.clone(), m0, coupling)?;
        p.source_u = self.source_u.clone();
        p.source_m = self.source_m.clone();
        Ok(p)
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        self.operator.space()
    }

    pub fn operator(&self) -> &Arc<ShiftedLaplacian> {
        &self.operator
    }

    pub fn lambda(&self) -> f64 {
        self.operator.lambda()
    }

    pub fn m0(&self) -> &Field {
        &self.m0
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn source_u(&self) -> Option<&Field> {
        self.source_u.as_ref()
    }

    pub fn source_m(&self) -> Option<&Field> {
        self.source_m.as_ref()
    }

    /// Magnitude of the most negative nodal value of `m0` (zero when `m0 ≥ 0`).
    pub fn m0_negativity(&self) -> f64 {
        (-self.m0.min()).max(0.0)
    }

    pub fn node_count(&self) -> usize {
        self.space().node_count()
    }

    pub fn check_state(&self, s: &State) -> Result<()> {
        self.space().check(&s.u, "u")?;
        self.space().check(&s.m, "m")
    }

    /// `M f(m) + M source_u`: the load of the HJB right-hand side, `f(m)` taken as the P1
    /// interpolant of its nodal values.
    pub(crate) fn hjb_data_load(&self, m: &Field) -> Vec<f64> {
        let space = self.space();
        let mut fm = m.map(|v| self.coupling.eval(v));
        if let Some(s) = &self.source_u {
            fm = fm.combine(1.0, s, 1.0);
        }
        space.load(&fm)
    }

    /// `λ M m0 + M source_m`.
    pub(crate) fn fp_data_load(&self) -> Vec<f64> {
        let mut data = self.m0.map(|v| self.lambda() * v);
        if let Some(s) = &self.source_m {
            data = data.combine(1.0, s, 1.0);
        }
        self.space().load(&data)
    }
}

/// `∫ ½|Du|² φ_i` with `Du` constant per element.
pub(crate) fn half_gradient_square_load(space: &FemSpace, grads: &[[f64; 2]]) -> Vec<f64> {
    let q: Vec<f64> = grads.iter().map(|g| 0.5 * (g[0] * g[0] + g[1] * g[1])).collect();
    elementwise_load(space.mesh(), &q)
}

/// Load vectors `(ξ, ζ)` of `G(u, m)`:
/// `ξ = ½|Du|² - f(m) - source_u` and `ζ = -div(m Du) - λ m0 - source_m`, the divergence in
/// weak form `+∫ m Du · Dφ`.
pub fn apply_g(problem: &Problem, state: &State) -> Result<(Vec<f64>, Vec<f64>)> {
    problem.check_state(state)?;
    let space = problem.space();
    let grads = space.gradients(&state.u);
    let xi: Vec<f64> = half_gradient_square_load(space, &grads)
        .iter()
        .zip(problem.hjb_data_load(&state.m))
        .map(|(a, b)| a - b)
        .collect();
    let zeta: Vec<f64> = transport_load(space.mesh(), &state.m, &state.u)
        .iter()
        .zip(problem.fp_data_load())
        .map(|(a, b)| a - b)
        .collect();
    Ok((xi, zeta))
}

/// `F_h(u, m) = (u, m) + T_h(G(u, m))`.
pub fn residual_f(problem: &Problem, state: &State) -> Result<State> {
    let (xi, zeta) = apply_g(problem, state)?;
    let (v, rho) = problem.operator().apply_th(&xi, &zeta)?;
    Ok(State {
        u: state.u.combine(1.0, &v, 1.0),
        m: state.m.combine(1.0, &rho, 1.0),
    })
}

/// The 2×2 block matrix of `dG[u, m]` acting on `(v, ρ)` coefficients and returning loads:
///
/// ```text
///   [ ∫ (Du·Dφ_j) φ_i        -∫ f'(m_j) φ_j φ_i ]
///   [ ∫ m Dφ_j · Dφ_i         ∫ φ_j Du · Dφ_i    ]
/// ```
pub fn assemble_dg(problem: &Problem, state: &State) -> Result<CsrMatrix> {
    problem.check_state(state)?;
    let space = problem.space();
    let mesh = space.mesh();
    let drift = Drift::PerElement(space.gradients(&state.u));
    let convection = assemble_convection(mesh, &drift);
    let fprime: Vec<f64> = state.m.coeffs().iter().map(|&v| problem.coupling.deriv(v)).collect();
    let coupling_block = space.mass().scale_columns(&fprime).scaled(-1.0);
    let weighted = assemble_weighted_stiffness(mesh, &state.m);
    let transport = assemble_transport(mesh, &drift);
    Ok(CsrMatrix::block2x2([
        [Some(&convection), Some(&coupling_block)],
        [Some(&weighted), Some(&transport)],
    ]))
}

/// `dF[u, m] = I + T_h ∘ dG[u, m]`.
///
/// With `A = K + λM` the operator equals `blockdiag(A, A)⁻¹ J` where `J = blockdiag(A, A) + dG`
/// is sparse, so applications need only solves with `A` and inverses need one factorization of
/// `J` (computed on first use).
#[derive(Debug)]
pub struct LinearizedSystem {
    operator: Arc<ShiftedLaplacian>,
    dg: CsrMatrix,
    jacobian: CsrMatrix,
    lu: OnceLock<Result<LuFactor>>,
}

pub fn assemble_df(problem: &Problem, state: &State) -> Result<LinearizedSystem> {
    let dg = assemble_dg(problem, state)?;
    Ok(LinearizedSystem::new(problem.operator().clone(), dg))
}

impl LinearizedSystem {
    pub fn new(operator: Arc<ShiftedLaplacian>, dg: CsrMatrix) -> Self {
        let a = operator.matrix();
        let blocks = CsrMatrix::block2x2([[Some(a), None], [None, Some(a)]]);
        let jacobian = blocks.linear_combination(1.0, &dg, 1.0);
        Self {
            operator,
            dg,
            jacobian,
            lu: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dg.nrows()
    }

    pub fn dg(&self) -> &CsrMatrix {
        &self.dg
    }

    /// `blockdiag(A, A) + dG`, the matrix of the Newton step.
    pub fn newton_matrix(&self) -> &CsrMatrix {
        &self.jacobian
    }

    fn factor(&self) -> Result<&LuFactor> {
        self.lu
            .get_or_init(|| {
                let space = self.operator.space();
                let (k, m) = (space.stiffness(), space.mass());
                let stiffness = CsrMatrix::block2x2([[Some(k), None], [None, Some(k)]]);
                let mass = CsrMatrix::block2x2([[Some(m), None], [None, Some(m)]]);
                CsrMatrix::factorize_sum(
                    &[(1.0, &stiffness), (self.operator.lambda(), &mass), (1.0, &self.dg)],
                    "Newton matrix blockdiag(A) + dG",
                )
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    fn block_solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim() / 2;
        let mut out = self.operator.solve(&y[..n])?.into_inner();
        out.extend(self.operator.solve(&y[n..])?.into_inner());
        Ok(out)
    }

    fn block_apply(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim() / 2;
        let a = self.operator.matrix();
        let mut out = a.matvec(&y[..n]);
        out.extend(a.matvec(&y[n..]));
        out
    }

    /// `x + T_h(dG x)`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.block_solve(&self.dg.matvec(x))?;
        Ok(x.iter().zip(t).map(|(a, b)| a + b).collect())
    }

    /// `x + dGᵀ A⁻¹ x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.dg.matvec_transpose(&self.block_solve(x)?);
        Ok(x.iter().zip(t).map(|(a, b)| a + b).collect())
    }

    /// `dF⁻¹ y = J⁻¹ (A y)`.
    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.factor()?.solve(&self.block_apply(y))
    }

    /// `dF⁻ᵀ y = A J⁻ᵀ y`.
    pub fn solve_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.block_apply(&self.factor()?.solve_transpose(y)?))
    }

    /// `dF⁻¹ T_h(ξ, ζ) = J⁻¹ [ξ; ζ]` for a pair of loads.
    pub fn solve_load(&self, load: &[f64]) -> Result<Vec<f64>> {
        self.factor()?.solve(load)
    }
}
