#![allow(dead_code)]

use std::sync::Arc;

use mfg_core::analyze::loglog_slope;
use mfg_core::fem::{FemSpace, Field};
use mfg_core::mfg::{apply_g, assemble_df, assemble_dg, residual_f, state_norm, Coupling, Density, Problem, State};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEPS: [f64; 3] = [1e-2, 1e-3, 1e-4];

pub fn problem(dim: usize, n: usize, lambda: f64, m0: Density, coupling: Coupling) -> Problem {
    let space = FemSpace::build(dim, n).unwrap();
    let m0 = m0.project(&space).unwrap();
    Problem::new(space, lambda, m0, coupling).unwrap()
}

pub fn cosine(amplitude: f64) -> Density {
    Density::Cosine { amplitude, phase: 0.0 }
}

pub fn uniform_start(space: &Arc<FemSpace>) -> State {
    let n = space.node_count();
    State::new(Field::zeros(n), Field::constant(n, 1.0))
}

/// Random nodal state with `u` in `[-1, 1]` and `m` in `[0.5, 1.5]`.
pub fn random_state(n: usize, rng: &mut ChaCha8Rng) -> State {
    let u = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let m = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    State::new(Field::new(u), Field::new(m))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn concat((a, b): (Vec<f64>, Vec<f64>)) -> Vec<f64> {
    a.into_iter().chain(b).collect()
}

/// Slopes of the first-order Taylor remainders of `G` and `F` at `x` in direction `v`, measured
/// purely from evaluations of `G` and `F`.
pub fn fd_orders(problem: &Problem, x: &State, v: &State) -> (f64, f64) {
    let g0 = concat(apply_g(problem, x).unwrap());
    let dg_v = assemble_dg(problem, x).unwrap().matvec(&v.to_vec());
    let f0 = residual_f(problem, x).unwrap();
    let df_v = State::from_vec(&assemble_df(problem, x).unwrap().apply(&v.to_vec()).unwrap());
    let space = problem.space();
    let mut g_pts = Vec::new();
    let mut f_pts = Vec::new();
    for &t in &FD_STEPS {
        let xt = x.combine(1.0, v, t);
        let gt = concat(apply_g(problem, &xt).unwrap());
        let rg: Vec<f64> = (0..gt.len()).map(|i| gt[i] - g0[i] - t * dg_v[i]).collect();
        g_pts.push((t.ln(), norm2(&rg).ln()));
        let ft = residual_f(problem, &xt).unwrap();
        let rf = ft.combine(1.0, &f0, -1.0).combine(1.0, &df_v, -t);
        f_pts.push((t.ln(), state_norm(space, &rf).ln()));
    }
    (loglog_slope(&g_pts).unwrap(), loglog_slope(&f_pts).unwrap())
}

/// `(0, m0)`.
pub fn data_start(problem: &Problem) -> State {
    State::new(Field::zeros(problem.node_count()), problem.m0().clone())
}
