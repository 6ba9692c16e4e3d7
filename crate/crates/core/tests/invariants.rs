mod common;

use mfg_core::analyze::{random_perturbation, sensitivity_direction};
use mfg_core::fem::{assemble_mass, assemble_stiffness, FemSpace};
use mfg_core::mesh::PeriodicMesh;
use mfg_core::mfg::{assemble_df, Coupling, Density, State};
use mfg_core::solve::fp_solve;
use proptest::prelude::*;

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mesh_measures_and_operators_are_consistent(dim in 1usize..=2, n in 3usize..24) {
        let mesh = PeriodicMesh::new(dim, n).unwrap();
        prop_assert_eq!(mesh.node_count(), n.pow(dim as u32));
        let area: f64 = mesh.elements().iter().map(|e| e.measure).sum();
        prop_assert!((area - 1.0).abs() < 1e-12);
        let ones = vec![1.0; mesh.node_count()];
        let k1 = assemble_stiffness(&mesh).matvec(&ones);
        prop_assert!(k1.iter().all(|v| v.abs() < 1e-9));
        let mass: f64 = assemble_mass(&mesh).matvec(&ones).iter().sum();
        prop_assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fokker_planck_conserves_mass_and_positivity(
        lambda in 0.2f64..5.0,
        amp in -0.9f64..0.9,
        radius in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let p = common::problem(1, 32, lambda, common::cosine(amp), Coupling::Zero);
        let drift = random_perturbation(&p, &mut common::rng(seed), radius.max(1e-12));
        let m = fp_solve(&p, &drift.u).unwrap();
        prop_assert!((p.space().integral(&m) - 1.0).abs() < 1e-12);
        prop_assert!(m.min() > 0.0);
    }

    #[test]
    fn sensitivity_is_linear_in_the_perturbation(
        a in -3.0f64..3.0,
        b in -2.0f64..2.0,
        amp in -0.6f64..0.6,
        phase in 0.0f64..1.0,
    ) {
        let p = common::problem(1, 16, 1.5, common::cosine(0.4), Coupling::Atan { scale: 1.0 });
        let x = State::new(
            p.space().interpolate(|y| 0.05 * (6.0 * y[0]).sin()),
            p.m0().clone(),
        );
        let m1 = Density::Cosine { amplitude: amp, phase }.project(p.space()).unwrap();
        let f1 = Coupling::InverseQuadratic { scale: 1.0 };
        let f2 = Coupling::Atan { scale: 1.0 };
        let combined = Coupling::Sum(vec![f1.scaled(a), f2.scaled(b)]);
        let d = sensitivity_direction(&p, &x, &combined, &m1).unwrap().to_vec();
        let d1 = sensitivity_direction(&p, &x, &f1, p.m0()).unwrap().to_vec();
        let d2 = sensitivity_direction(&p, &x, &f2, p.m0()).unwrap().to_vec();
        let dm = sensitivity_direction(&p, &x, &Coupling::Zero, &m1).unwrap().to_vec();
        let expected: Vec<f64> = (0..d.len()).map(|i| a * d1[i] + b * d2[i] + dm[i]).collect();
        prop_assert!(rel_diff(&d, &expected) < 1e-10);
    }

    #[test]
    fn newton_matrix_solves_have_small_residuals(
        dim in 1usize..=2,
        scale in -4.0f64..4.0,
        lambda in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let n = if dim == 1 { 40 } else { 8 };
        let p = common::problem(dim, n, lambda, Density::Uniform, Coupling::RationalBump { scale });
        let mut rng = common::rng(seed);
        let x = common::random_state(p.node_count(), &mut rng);
        let df = assemble_df(&p, &x).unwrap();
        let b = common::random_state(p.node_count(), &mut rng).to_vec();
        if let Ok(sol) = df.solve_load(&b) {
            let back = df.newton_matrix().matvec(&sol);
            prop_assert!(rel_diff(&back, &b) <= 1e-10);
        }
    }
}

#[test]
fn projected_densities_have_unit_mass() {
    for (dim, n) in [(1, 7), (1, 64), (2, 5), (2, 16)] {
        let space = FemSpace::build(dim, n).unwrap();
        for amplitude in [-0.9, 0.0, 0.5] {
            let m = Density::Cosine { amplitude, phase: 0.3 }.project(&space).unwrap();
            assert!((space.integral(&m) - 1.0).abs() < 1e-14);
        }
    }
}
