//! Uniform periodic triangulations of the unit torus in one and two dimensions.
//!
//! Nodes on opposite faces of `[0,1]^d` are identified, so a mesh with `n` cells per axis has
//! `n^d` nodes. In two dimensions every square `[ih,(i+1)h] x [jh,(j+1)h]` is split along its
//! lower-left to upper-right diagonal into the triangles `(p00, p10, p11)` and `(p00, p11, p01)`.

use crate::error::{Error, Result};

/// A point of the torus. The second coordinate is unused (and zero) in one dimension.
pub type Point = [f64; 2];

/// One interval (d = 1) or triangle (d = 2) of the mesh.
///
/// `coords` are unwrapped vertex coordinates (they may leave `[0,1)` across the periodic seam),
/// so gradients computed from them are the geometric ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Simplex {
    pub vertices: [usize; 3],
    pub coords: [Point; 3],
    /// Constant gradients of the barycentric (hat) functions restricted to the element.
    pub grads: [[f64; 2]; 3],
    pub measure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicMesh {
    dim: usize,
    n: usize,
    h: f64,
    nodes: Vec<Point>,
    elements: Vec<Simplex>,
}

impl PeriodicMesh {
    /// Builds the uniform periodic mesh with `n` cells per axis.
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Validation(format!(
                "mesh dimension must be 1 or 2, got {dim}"
            )));
        }
        if n < 2 {
            return Err(Error::Validation(format!(
                "mesh needs at least 2 cells per axis, got {n}"
            )));
        }
        let h = 1.0 / n as f64;
        Ok(if dim == 1 {
            Self::build_1d(n, h)
        } else {
            Self::build_2d(n, h)
        })
    }

    fn build_1d(n: usize, h: f64) -> Self {
        let nodes = (0..n).map(|i| [i as f64 * h, 0.0]).collect();
        let elements = (0..n)
            .map(|i| {
                let x0 = i as f64 * h;
                let inv = 1.0 / h;
                Simplex {
                    vertices: [i, (i + 1) % n, usize::MAX],
                    coords: [[x0, 0.0], [x0 + h, 0.0], [0.0, 0.0]],
                    grads: [[-inv, 0.0], [inv, 0.0], [0.0, 0.0]],
                    measure: h,
                }
            })
            .collect();
        Self {
            dim: 1,
            n,
            h,
            nodes,
            elements,
        }
    }

    fn build_2d(n: usize, h: f64) -> Self {
        let idx = |i: usize, j: usize| (j % n) * n + (i % n);
        let nodes = (0..n * n)
            .map(|k| [(k % n) as f64 * h, (k / n) as f64 * h])
            .collect();
        let mut elements = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (x0, y0) = (i as f64 * h, j as f64 * h);
                let p00 = [x0, y0];
                let p10 = [x0 + h, y0];
                let p11 = [x0 + h, y0 + h];
                let p01 = [x0, y0 + h];
                elements.push(triangle(
                    [idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)],
                    [p00, p10, p11],
                ));
                elements.push(triangle(
                    [idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)],
                    [p00, p11, p01],
                ));
            }
        }
        Self {
            dim: 2,
            n,
            h,
            nodes,
            elements,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cells per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn elements(&self) -> &[Simplex] {
        &self.elements
    }

    /// Vertices per element: `dim + 1`.
    pub fn vertices_per_element(&self) -> usize {
        self.dim + 1
    }

    /// The vertex indices of element `e`.
    pub fn element_nodes(&self, e: usize) -> &[usize] {
        &self.elements[e].vertices[..self.dim + 1]
    }

    /// Wraps a point into `[0,1)^d`.
    pub fn wrap(&self, x: &[f64]) -> Point {
        let w = |v: f64| {
            let r = v.rem_euclid(1.0);
            // rem_euclid can round up to exactly 1.0 for tiny negative inputs
            if r >= 1.0 {
                0.0
            } else {
                r
            }
        };
        if self.dim == 1 {
            [w(x[0]), 0.0]
        } else {
            [w(x[0]), w(x[1])]
        }
    }

    /// Value at `x` of the continuous piecewise-linear function with nodal values `coeffs`.
    pub fn interpolate(&self, coeffs: &[f64], x: &[f64]) -> f64 {
        assert_eq!(coeffs.len(), self.node_count(), "nodal vector length");
        let n = self.n;
        let p = self.wrap(x);
        // cell index and local coordinate in [0,1]; coordinates within rounding of a grid line
        // snap onto it so nodal values are reproduced exactly
        let locate = |v: f64| {
            let mut r = v * n as f64;
            if (r - r.round()).abs() < 1e-10 {
                r = r.round();
            }
            let i = (r.floor() as usize).min(n - 1);
            (i, r - i as f64)
        };
        if self.dim == 1 {
            let (i, t) = locate(p[0]);
            (1.0 - t) * coeffs[i] + t * coeffs[(i + 1) % n]
        } else {
            let ((i, s), (j, t)) = (locate(p[0]), locate(p[1]));
            let at = |a: usize, b: usize| coeffs[((j + b) % n) * n + (i + a) % n];
            let (c00, c10, c11, c01) = (at(0, 0), at(1, 0), at(1, 1), at(0, 1));
            if t <= s {
                c00 + s * (c10 - c00) + t * (c11 - c10)
            } else {
                c00 + t * (c01 - c00) + s * (c11 - c01)
            }
        }
    }

    /// Nodal interpolation of a function of position.
    pub fn interpolate_fn(&self, f: impl Fn(&Point) -> f64) -> Vec<f64> {
        self.nodes.iter().map(f).collect()
    }
}

fn triangle(vertices: [usize; 3], coords: [Point; 3]) -> Simplex {
    let [[x0, y0], [x1, y1], [x2, y2]] = coords;
    let det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
    let grads = [
        [(y1 - y2) / det, (x2 - x1) / det],
        [(y2 - y0) / det, (x0 - x2) / det],
        [(y0 - y1) / det, (x1 - x0) / det],
    ];
    Simplex {
        vertices,
        coords,
        grads,
        measure: 0.5 * det.abs(),
    }
}
