//! Manufactured solutions: smooth `(u*, m*)` made exact by adding forcings to both equations.
//!
//! With `P(x) = Π_k cos(2π x_k)` the exact pair is `u* = a P` and `m* = 1 + b P` (unit mass,
//! positive for `|b| < 1`), `m0 ≡ 1`, and the forcings are
//!
//! ```text
//!   s_u = -Δu* + ½|Du*|² + λu* - f(m*)
//!   s_m = -Δm* - div(m* Du*) + λm* - λ
//! ```

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::mesh::Point;
use crate::mfg::{Coupling, Density, Problem, State};

#[derive(Debug, Clone, PartialEq)]
pub struct Manufactured {
    pub u_amplitude: f64,
    pub m_amplitude: f64,
    pub lambda: f64,
    pub coupling: Coupling,
    pub dim: usize,
}

/// Errors of a discrete state against the exact pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactErrors {
    pub u_l2: f64,
    /// Full H1 norm of `u_h - u*`.
    pub u_h1: f64,
    pub m_l2: f64,
}

const K: f64 = 2.0 * PI;

impl Manufactured {
    pub fn new(dim: usize, lambda: f64, coupling: Coupling, u_amplitude: f64, m_amplitude: f64) -> Result<Self> {
        if m_amplitude.is_nan() || m_amplitude.abs() >= 1.0 {
            return Err(Error::Validation(format!(
                "manufactured density amplitude must lie in (-1, 1), got {m_amplitude}"
            )));
        }
        Ok(Self {
            u_amplitude,
            m_amplitude,
            lambda,
            coupling,
            dim,
        })
    }

    fn p(&self, x: &Point) -> f64 {
        x[..self.dim].iter().map(|&v| (K * v).cos()).product()
    }

    fn grad_p(&self, x: &Point) -> [f64; 2] {
        let (c0, s0) = ((K * x[0]).cos(), (K * x[0]).sin());
        if self.dim == 1 {
            [-K * s0, 0.0]
        } else {
            let (c1, s1) = ((K * x[1]).cos(), (K * x[1]).sin());
            [-K * s0 * c1, -K * c0 * s1]
        }
    }

    /// `ΔP = -4π² d P`.
    fn lap_p(&self, x: &Point) -> f64 {
        -K * K * self.dim as f64 * self.p(x)
    }

    pub fn u(&self, x: &Point) -> f64 {
        self.u_amplitude * self.p(x)
    }

    pub fn grad_u(&self, x: &Point) -> [f64; 2] {
        self.grad_p(x).map(|g| self.u_amplitude * g)
    }

    pub fn m(&self, x: &Point) -> f64 {
        1.0 + self.m_amplitude * self.p(x)
    }

    pub fn grad_m(&self, x: &Point) -> [f64; 2] {
        self.grad_p(x).map(|g| self.m_amplitude * g)
    }

    pub fn source_u(&self, x: &Point) -> f64 {
        let (a, g) = (self.u_amplitude, self.grad_p(x));
        let grad_sq = a * a * (g[0] * g[0] + g[1] * g[1]);
        -a * self.lap_p(x) + 0.5 * grad_sq + self.lambda * self.u(x) - self.coupling.eval(self.m(x))
    }

    pub fn source_m(&self, x: &Point) -> f64 {
        let (a, b) = (self.u_amplitude, self.m_amplitude);
        let g = self.grad_p(x);
        let lap = self.lap_p(x);
        let div_m_du = a * b * (g[0] * g[0] + g[1] * g[1]) + self.m(x) * a * lap;
        -b * lap - div_m_du + self.lambda * self.m(x) - self.lambda
    }

    /// The forced problem on `space`: uniform `m0` and L2-projected forcings.
    pub fn problem(&self, space: Arc<FemSpace>) -> Result<Problem> {
        if space.mesh().dim() != self.dim {
            return Err(Error::Validation(format!(
                "manufactured solution is {}-dimensional, mesh is {}-dimensional",
                self.dim,
                space.mesh().dim()
            )));
        }
        let m0 = Density::Uniform.project(&space)?;
        let su = space.project(|x| self.source_u(x))?;
        let sm = space.project(|x| self.source_m(x))?;
        Problem::new(space, self.lambda, m0, self.coupling.clone())?.with_sources(Some(su), Some(sm))
    }

    /// Nodal interpolant of the exact pair.
    pub fn interpolant(&self, space: &FemSpace) -> State {
        State::new(space.interpolate(|x| self.u(x)), space.interpolate(|x| self.m(x)))
    }

    pub fn errors(&self, space: &FemSpace, state: &State) -> ExactErrors {
        let (u_l2, u_semi) = space.error_against(&state.u, |x| self.u(x), |x| self.grad_u(x));
        let (m_l2, _) = space.error_against(&state.m, |x| self.m(x), |x| self.grad_m(x));
        ExactErrors {
            u_l2,
            u_h1: u_l2.hypot(u_semi),
            m_l2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solve::{newton_solve, SolverOptions};

    fn case(dim: usize) -> Manufactured {
        Manufactured::new(dim, 1.0, Coupling::Atan { scale: 1.0 }, 0.1, 0.3).unwrap()
    }

    #[test]
    fn forcings_vanish_for_the_trivial_pair() {
        let mf = Manufactured::new(2, 1.5, Coupling::Zero, 0.0, 0.0).unwrap();
        for x in [[0.1, 0.7], [0.5, 0.25]] {
            assert_eq!(mf.source_u(&x), 0.0);
            assert_eq!(mf.source_m(&x), 0.0);
        }
    }

    #[test]
    fn forcings_match_finite_differences() {
        // residuals of the PDEs evaluated with central differences of the exact pair
        let mf = case(2);
        let h = 1e-4;
        for x in [[0.13, 0.41], [0.77, 0.05]] {
            let shift = |d: usize, s: f64| {
                let mut y = x;
                y[d] += s;
                y
            };
            let lap = |f: &dyn Fn(&Point) -> f64| {
                (0..2)
                    .map(|d| (f(&shift(d, h)) - 2.0 * f(&x) + f(&shift(d, -h))) / (h * h))
                    .sum::<f64>()
            };
            let u = |y: &Point| mf.u(y);
            let m = |y: &Point| mf.m(y);
            let g = mf.grad_u(&x);
            let hjb = -lap(&u) + 0.5 * (g[0] * g[0] + g[1] * g[1]) + mf.lambda * mf.u(&x)
                - mf.coupling.eval(mf.m(&x));
            assert!((hjb - mf.source_u(&x)).abs() < 1e-5);
            let flux = |d: usize, y: &Point| mf.m(y) * mf.grad_u(y)[d];
            let div: f64 = (0..2)
                .map(|d| (flux(d, &shift(d, h)) - flux(d, &shift(d, -h))) / (2.0 * h))
                .sum();
            let fp = -lap(&m) - div + mf.lambda * mf.m(&x) - mf.lambda;
            assert!((fp - mf.source_m(&x)).abs() < 1e-5);
        }
    }

    #[test]
    fn density_forcing_has_zero_mean() {
        let mf = case(1);
        let space = FemSpace::build(1, 64).unwrap();
        let s = space.project(|x| mf.source_m(x)).unwrap();
        assert!(space.integral(&s).abs() < 1e-12);
    }

    #[test]
    fn discrete_solution_converges_to_the_exact_pair() {
        let mf = case(1);
        let errs: Vec<ExactErrors> = [32, 64]
            .iter()
            .map(|&n| {
                let space = FemSpace::build(1, n).unwrap();
                let p = mf.problem(space.clone()).unwrap();
                let (s, _) = newton_solve(&p, &mf.interpolant(&space), &SolverOptions::newton()).unwrap();
                mf.errors(&space, &s)
            })
            .collect();
        let rate = |a: f64, b: f64| (a / b).log2();
        assert!(rate(errs[0].u_l2, errs[1].u_l2) > 1.9);
        assert!(rate(errs[0].u_h1, errs[1].u_h1) > 0.95);
        assert!(rate(errs[0].m_l2, errs[1].m_l2) > 1.9);
    }
}
