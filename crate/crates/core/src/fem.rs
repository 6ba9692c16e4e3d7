//! P1 Lagrange finite elements on a [`PeriodicMesh`].
//!
//! All bilinear forms are integrated exactly: integrands are products of at most three
//! piecewise-linear factors, so closed-form simplex moments suffice. Loads of general
//! functions (initial densities, manufactured sources) use a high-order per-element rule and
//! enter the solvers through their L2 projection onto the P1 space.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{PeriodicMesh, Point, Simplex};
use crate::sparse::{accurate_residual, conjugate_gradient, dot, CsrMatrix, LuFactor};

/// Nodal coefficients of a continuous piecewise-linear function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field(Vec<f64>);

impl Field {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self(coeffs)
    }

    pub fn constant(len: usize, c: f64) -> Self {
        Self(vec![c; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self::constant(len, 0.0)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field(self.0.iter().map(|&v| f(v)).collect())
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Field, b: f64) -> Field {
        assert_eq!(self.len(), other.len(), "field length mismatch");
        Field(self.0.iter().zip(&other.0).map(|(x, y)| a * x + b * y).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// A vector field entering a convection or transport form.
#[derive(Debug, Clone)]
pub enum Drift {
    /// One constant vector per element (e.g. the gradient of a P1 function).
    PerElement(Vec<[f64; 2]>),
    /// One P1 field per space dimension.
    Nodal(Vec<Field>),
}

impl Drift {
    fn validate(&self, mesh: &PeriodicMesh) {
        match self {
            Drift::PerElement(b) => assert_eq!(b.len(), mesh.elements().len()),
            Drift::Nodal(b) => {
                assert_eq!(b.len(), mesh.dim(), "one drift component per dimension");
                b.iter().for_each(|c| assert_eq!(c.len(), mesh.node_count()));
            }
        }
    }
}

/// Discrete L2, H1 and max norms of a field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l2: f64,
    pub h1: f64,
    pub linf: f64,
}

/// Node-to-node adjacency of the mesh, the sparsity pattern of every scalar operator.
pub fn node_pattern(mesh: &PeriodicMesh) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); mesh.node_count()];
    for e in 0..mesh.elements().len() {
        let nodes = mesh.element_nodes(e);
        for &a in nodes {
            rows[a].extend_from_slice(nodes);
        }
    }
    for r in &mut rows {
        r.sort_unstable();
        r.dedup();
    }
    rows
}

fn empty_operator(mesh: &PeriodicMesh) -> CsrMatrix {
    CsrMatrix::from_pattern(mesh.node_count(), &node_pattern(mesh))
}

fn dot2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// `∫_e φ_a φ_b` for the P1 basis on a `d`-simplex.
fn local_mass(e: &Simplex, d: usize, a: usize, b: usize) -> f64 {
    let denom = ((d + 1) * (d + 2)) as f64;
    if a == b {
        2.0 * e.measure / denom
    } else {
        e.measure / denom
    }
}

/// Generic element loop: `local(e, simplex, a, b)` is added to entry `(v_a, v_b)`.
fn assemble(mesh: &PeriodicMesh, local: impl Fn(usize, &Simplex, usize, usize) -> f64) -> CsrMatrix {
    let mut m = empty_operator(mesh);
    let nv = mesh.vertices_per_element();
    for (k, e) in mesh.elements().iter().enumerate() {
        for a in 0..nv {
            for b in 0..nv {
                m.add_to(e.vertices[a], e.vertices[b], local(k, e, a, b));
            }
        }
    }
    m
}

/// `K_ij = ∫ Dφ_j · Dφ_i`.
pub fn assemble_stiffness(mesh: &PeriodicMesh) -> CsrMatrix {
    assemble(mesh, |_, e, a, b| e.measure * dot2(&e.grads[a], &e.grads[b]))
}

/// `M_ij = ∫ φ_j φ_i`.
pub fn assemble_mass(mesh: &PeriodicMesh) -> CsrMatrix {
    let d = mesh.dim();
    assemble(mesh, |_, e, a, b| local_mass(e, d, a, b))
}

/// `∫ w Dφ_j · Dφ_i` for a P1 weight `w`.
pub fn assemble_weighted_stiffness(mesh: &PeriodicMesh, w: &Field) -> CsrMatrix {
    assert_eq!(w.len(), mesh.node_count());
    let nv = mesh.vertices_per_element();
    let wc = w.coeffs();
    assemble(mesh, |_, e, a, b| {
        let mean = e.vertices[..nv].iter().map(|&v| wc[v]).sum::<f64>() / nv as f64;
        mean * e.measure * dot2(&e.grads[a], &e.grads[b])
    })
}

/// `∫ (b · Dφ_a) φ_c` on element `e` for the P1 drift or the element-constant drift.
fn drift_moment(drift: &Drift, k: usize, e: &Simplex, d: usize, grad_of: usize, test: usize) -> f64 {
    let g = &e.grads[grad_of];
    match drift {
        Drift::PerElement(b) => dot2(&b[k], g) * e.measure / (d + 1) as f64,
        Drift::Nodal(comps) => (0..d + 1)
            .map(|c| {
                let node = e.vertices[c];
                let bv: f64 = comps.iter().enumerate().map(|(dir, f)| f.coeffs()[node] * g[dir]).sum();
                bv * local_mass(e, d, c, test)
            })
            .sum(),
    }
}

/// Convection matrix `C_ij = ∫ (b · Dφ_j) φ_i`.
pub fn assemble_convection(mesh: &PeriodicMesh, drift: &Drift) -> CsrMatrix {
    drift.validate(mesh);
    let d = mesh.dim();
    assemble(mesh, |k, e, a, b| drift_moment(drift, k, e, d, b, a))
}

/// Transport matrix `T_ij = ∫ φ_j (b · Dφ_i)`, the weak form of `-div(ρ b)` tested against `φ_i`.
pub fn assemble_transport(mesh: &PeriodicMesh, drift: &Drift) -> CsrMatrix {
    drift.validate(mesh);
    let d = mesh.dim();
    assemble(mesh, |k, e, a, b| drift_moment(drift, k, e, d, a, b))
}

/// Vector `r_i = ∫ w Dv · Dφ_i` for P1 fields `w` and `v`.
pub fn transport_load(mesh: &PeriodicMesh, w: &Field, v: &Field) -> Vec<f64> {
    assert_eq!(w.len(), mesh.node_count());
    let grads = gradients(mesh, v);
    let nv = mesh.vertices_per_element();
    let wc = w.coeffs();
    let mut r = vec![0.0; mesh.node_count()];
    for (e, dv) in mesh.elements().iter().zip(&grads) {
        let mean = e.vertices[..nv].iter().map(|&i| wc[i]).sum::<f64>() / nv as f64;
        for a in 0..nv {
            r[e.vertices[a]] += mean * e.measure * dot2(dv, &e.grads[a]);
        }
    }
    r
}

/// Element-wise constant gradient of a P1 field.
pub fn gradients(mesh: &PeriodicMesh, v: &Field) -> Vec<[f64; 2]> {
    assert_eq!(v.len(), mesh.node_count());
    let nv = mesh.vertices_per_element();
    let c = v.coeffs();
    mesh.elements()
        .iter()
        .map(|e| {
            let mut g = [0.0; 2];
            for a in 0..nv {
                g[0] += c[e.vertices[a]] * e.grads[a][0];
                g[1] += c[e.vertices[a]] * e.grads[a][1];
            }
            g
        })
        .collect()
}

/// Load vector `∫ q φ_i` of a function that is constant (`q_e`) on each element.
pub fn elementwise_load(mesh: &PeriodicMesh, q: &[f64]) -> Vec<f64> {
    assert_eq!(q.len(), mesh.elements().len());
    let nv = mesh.vertices_per_element();
    let mut r = vec![0.0; mesh.node_count()];
    for (e, &qe) in mesh.elements().iter().zip(q) {
        let share = qe * e.measure / nv as f64;
        for &v in &e.vertices[..nv] {
            r[v] += share;
        }
    }
    r
}

/// Quadrature points on an element as `(point, weight, barycentric coordinates)`; weights sum
/// to the element measure.
fn quadrature(e: &Simplex, d: usize) -> Vec<(Point, f64, [f64; 3])> {
    if d == 1 {
        let (x0, x1) = (e.coords[0][0], e.coords[1][0]);
        GAUSS5
            .iter()
            .map(|&(t, w)| ([x0 + t * (x1 - x0), 0.0], w * e.measure, [1.0 - t, t, 0.0]))
            .collect()
    } else {
        TRI7.iter()
            .map(|&(l, w)| {
                let x = (0..2)
                    .map(|k| l[0] * e.coords[0][k] + l[1] * e.coords[1][k] + l[2] * e.coords[2][k])
                    .collect::<Vec<_>>();
                ([x[0], x[1]], w * e.measure, l)
            })
            .collect()
    }
}

/// Gauss-Legendre on `[0,1]`, exact for degree 9.
const GAUSS5: [(f64, f64); 5] = [
    (0.046_910_077_030_668_0, 0.118_463_442_528_094_5),
    (0.230_765_344_947_158_4, 0.239_314_335_249_683_2),
    (0.5, 0.284_444_444_444_444_4),
    (0.769_234_655_052_841_6, 0.239_314_335_249_683_2),
    (0.953_089_922_969_332, 0.118_463_442_528_094_5),
];

/// Seven-point rule on the triangle (barycentric points, weights relative to area), degree 5.
const TRI7: [([f64; 3], f64); 7] = {
    const A1: f64 = 0.059_715_871_789_769_82; // (9 - 2√15)/21
    const B1: f64 = 0.470_142_064_105_115; // (6 + √15)/21
    const W1: f64 = 0.132_394_152_788_506; // (155 + √15)/1200
    const A2: f64 = 0.797_426_985_353_087_3; // (9 + 2√15)/21
    const B2: f64 = 0.101_286_507_323_456_34; // (6 - √15)/21
    const W2: f64 = 0.125_939_180_544_827_15; // (155 - √15)/1200
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

/// Load vector `∫ g φ_i` of a function of position, by per-element quadrature.
pub fn function_load(mesh: &PeriodicMesh, g: impl Fn(&Point) -> f64) -> Vec<f64> {
    let d = mesh.dim();
    let nv = mesh.vertices_per_element();
    let mut r = vec![0.0; mesh.node_count()];
    for e in mesh.elements() {
        for (x, w, lam) in quadrature(e, d) {
            let gx = g(&x) * w;
            for a in 0..nv {
                r[e.vertices[a]] += gx * lam[a];
            }
        }
    }
    r
}

/// Mesh plus the matrices every discrete operator needs. Immutable once built.
#[derive(Debug)]
pub struct FemSpace {
    mesh: PeriodicMesh,
    stiffness: CsrMatrix,
    mass: CsrMatrix,
    h1_gram: CsrMatrix,
    mass_lu: LuFactor,
}

impl FemSpace {
    pub fn new(mesh: PeriodicMesh) -> Result<Arc<Self>> {
        let stiffness = assemble_stiffness(&mesh);
        let mass = assemble_mass(&mesh);
        let h1_gram = stiffness.linear_combination(1.0, &mass, 1.0);
        let mass_lu = mass.factorize("mass matrix")?;
        Ok(Arc::new(Self {
            mesh,
            stiffness,
            mass,
            h1_gram,
            mass_lu,
        }))
    }

    pub fn build(dim: usize, n: usize) -> Result<Arc<Self>> {
        Self::new(PeriodicMesh::new(dim, n)?)
    }

    pub fn mesh(&self) -> &PeriodicMesh {
        &self.mesh
    }

    pub fn node_count(&self) -> usize {
        self.mesh.node_count()
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    /// `K + M`, the Gram matrix of the discrete H1 inner product.
    pub fn h1_gram(&self) -> &CsrMatrix {
        &self.h1_gram
    }

    pub fn check(&self, f: &Field, what: &str) -> Result<()> {
        if f.len() != self.node_count() {
            return Err(Error::Validation(format!(
                "{what} has {} coefficients, mesh has {} nodes",
                f.len(),
                self.node_count()
            )));
        }
        if !f.is_finite() {
            return Err(Error::Validation(format!("{what} has non-finite entries")));
        }
        Ok(())
    }

    /// `∫ v` for a P1 field, i.e. `1ᵀ M v`.
    pub fn integral(&self, v: &Field) -> f64 {
        self.mass.matvec(v.coeffs()).iter().sum()
    }

    /// Load vector `M v` of a P1 field.
    pub fn load(&self, v: &Field) -> Vec<f64> {
        self.mass.matvec(v.coeffs())
    }

    /// L2 projection of a load vector onto the P1 space.
    pub fn project_load(&self, load: &[f64]) -> Result<Field> {
        Ok(Field(self.mass_lu.solve(load)?))
    }

    /// L2 projection of a function of position.
    pub fn project(&self, g: impl Fn(&Point) -> f64) -> Result<Field> {
        self.project_load(&function_load(&self.mesh, g))
    }

    pub fn interpolate(&self, g: impl Fn(&Point) -> f64) -> Field {
        Field(self.mesh.interpolate_fn(g))
    }

    /// Value of the P1 function at an arbitrary point.
    pub fn evaluate(&self, v: &Field, x: &[f64]) -> f64 {
        self.mesh.interpolate(v.coeffs(), x)
    }

    pub fn norms(&self, v: &Field) -> Norms {
        let c = v.coeffs();
        Norms {
            l2: dot(c, &self.mass.matvec(c)).max(0.0).sqrt(),
            h1: dot(c, &self.h1_gram.matvec(c)).max(0.0).sqrt(),
            linf: v.sup_norm(),
        }
    }

    pub fn l2_norm(&self, v: &Field) -> f64 {
        self.norms(v).l2
    }

    pub fn h1_norm(&self, v: &Field) -> f64 {
        self.norms(v).h1
    }

    pub fn gradients(&self, v: &Field) -> Vec<[f64; 2]> {
        gradients(&self.mesh, v)
    }

    /// L2 error and H1-seminorm error of a P1 field against an exact function with gradient,
    /// integrated by per-element quadrature.
    pub fn error_against(
        &self,
        v: &Field,
        exact: impl Fn(&Point) -> f64,
        exact_grad: impl Fn(&Point) -> [f64; 2],
    ) -> (f64, f64) {
        let d = self.mesh.dim();
        let nv = d + 1;
        let grads = self.gradients(v);
        let c = v.coeffs();
        let (mut l2, mut semi) = (0.0, 0.0);
        for (e, dv) in self.mesh.elements().iter().zip(&grads) {
            for (x, w, lam) in quadrature(e, d) {
                let vh: f64 = (0..nv).map(|a| lam[a] * c[e.vertices[a]]).sum();
                l2 += w * (vh - exact(&x)).powi(2);
                let g = exact_grad(&x);
                semi += w * ((dv[0] - g[0]).powi(2) + if d == 2 { (dv[1] - g[1]).powi(2) } else { 0.0 });
            }
        }
        (l2.sqrt(), semi.sqrt())
    }
}

/// The discrete solution operator `S_h = (K + λM)⁻¹` and its component-wise pair `T_h`.
#[derive(Debug)]
pub struct ShiftedLaplacian {
    space: Arc<FemSpace>,
    lambda: f64,
    matrix: CsrMatrix,
    lu: LuFactor,
}

/// Relative tolerance of the conjugate-gradient path.
pub const CG_TOLERANCE: f64 = 1e-12;

impl ShiftedLaplacian {
    pub fn new(space: Arc<FemSpace>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Validation(format!(
                "discount factor must be positive and finite, got {lambda}"
            )));
        }
        let matrix = space.stiffness.linear_combination(1.0, &space.mass, lambda);
        let lu = CsrMatrix::factorize_sum(
            &[(1.0, &space.stiffness), (lambda, &space.mass)],
            "shifted Laplacian K + λM",
        )?;
        Ok(Self {
            space,
            lambda,
            matrix,
            lu,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    /// `K + λM`.
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// `load - (K + λM) v`, accumulated in extended precision.
    pub fn residual(&self, load: &[f64], v: &Field) -> Vec<f64> {
        accurate_residual(
            &[(1.0, &self.space.stiffness), (self.lambda, &self.space.mass)],
            v.coeffs(),
            load,
        )
    }

    /// Factorizes `K + λM + extra` (refined term by term, see [`CsrMatrix::factorize_sum`]).
    pub fn factorize_with(&self, extra: &CsrMatrix, context: &str) -> Result<LuFactor> {
        CsrMatrix::factorize_sum(
            &[(1.0, &self.space.stiffness), (self.lambda, &self.space.mass), (1.0, extra)],
            context,
        )
    }

    /// `S_h ξ` for a load vector `ξ`.
    pub fn solve(&self, load: &[f64]) -> Result<Field> {
        Ok(Field(self.lu.solve(load)?))
    }

    /// `S_h ξ` by conjugate gradients (relative tolerance [`CG_TOLERANCE`]).
    pub fn solve_cg(&self, load: &[f64]) -> Result<Field> {
        let max_iter = 10 * self.matrix.nrows() + 100;
        Ok(Field(conjugate_gradient(&self.matrix, load, CG_TOLERANCE, max_iter)?))
    }

    /// `T_h(ξ, ζ) = (S_h ξ, S_h ζ)`.
    pub fn apply_th(&self, xi: &[f64], zeta: &[f64]) -> Result<(Field, Field)> {
        Ok((self.solve(xi)?, self.solve(zeta)?))
    }
}
