use mfg_core::analyze::{
    apriori_check, certify_stability, perturbed_taylor_check, CertifyOptions, StabilityReport,
};
use mfg_core::fem::{FemSpace, Field};
use mfg_core::mfg::{Problem, State};
use mfg_core::solve::{newton_solve, picard_solve, residual_norm, SolveReport, SolverOptions};
use serde_json::{json, Value};

use crate::config::{Method, RunConfig};
use crate::error::CliError;
use crate::output::{num, opt_num, OutputDir};

/// Errors at or below this are treated as exact and get no convergence rate.
pub const RATE_FLOOR: f64 = 1e-13;

const SCHEMA_VERSION: u32 = 1;

pub fn run(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    use crate::config::Experiment::*;
    let summary = match cfg.experiment {
        Solve => run_solve(cfg, out)?,
        Converge => run_converge(cfg, out)?,
        NewtonRates => run_newton_rates(cfg, out)?,
        StabilitySweep => run_stability_sweep(cfg, out)?,
        Sensitivity => run_sensitivity(cfg, out)?,
    };
    let mut full = json!({
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment.name(),
        "status": "ok",
        "dim": cfg.dim,
    });
    for (k, v) in summary.as_object().expect("summaries are objects") {
        full[k] = v.clone();
    }
    out.summary(full)
}

fn solve(cfg: &RunConfig, p: &Problem) -> Result<(State, SolveReport), CliError> {
    let opts = cfg.solver.options();
    let (state, report) = match cfg.solver.method {
        Method::Newton => {
            let start = State::new(Field::zeros(p.node_count()), p.m0().clone());
            newton_solve(p, &start, &opts)?
        }
        Method::Picard => picard_solve(p, p.m0(), &opts)?,
    };
    Ok((state, report))
}

fn certify(cfg: &RunConfig, p: &Problem, s: &State) -> Result<StabilityReport, mfg_core::Error> {
    let opts = CertifyOptions {
        threshold: cfg.threshold(),
        ..CertifyOptions::default()
    };
    certify_stability(p, s, &opts)
}

fn stability_json(r: &StabilityReport, threshold: f64) -> Value {
    json!({
        "sigma_min": r.sigma_min,
        "sigma_converged": r.sigma_converged,
        "threshold": threshold,
        "stable": r.stable,
        "monotone": r.monotone_condition,
        "large_lambda": r.large_lambda_condition,
        "K_hat": r.k_hat,
        "M_hat": r.m_hat,
        "Lambda_hat": r.lambda_hat,
    })
}

fn state_json(p: &Problem, s: &State) -> Value {
    let a = apriori_check(p, s);
    json!({
        "mass": p.space().integral(&s.m),
        "mass_error": a.mass_error,
        "u_sup": a.u_sup,
        "m_sup": a.m_sup,
        "m_min": s.m.min(),
        "apriori": {
            "u_bound": a.u_bound,
            "m_bound": a.m_bound,
            "holds": a.holds(),
        },
    })
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Newton => "newton",
        Method::Picard => "picard",
    }
}

fn history_rows(report: &SolveReport) -> Vec<Vec<String>> {
    let quad = report.quadratic_ratios();
    report
        .residual_history
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            vec![
                k.to_string(),
                num(r),
                opt_num(report.step_history.get(k).copied()),
                opt_num(quad.get(k).copied()),
                opt_num(report.rate_estimates.get(k).copied()),
            ]
        })
        .collect()
}

const HISTORY_HEADER: [&str; 5] = ["k", "residual", "step_norm", "quad_ratio", "rate"];

fn run_solve(cfg: &RunConfig, out: &mut OutputDir) -> Result<Value, CliError> {
    let (n, lambda) = (cfg.n()?, cfg.lambda()?);
    let p = cfg.problem(n, lambda)?;
    let (s, report) = solve(cfg, &p)?;
    let residual = residual_norm(&p, &s)?;
    let stability = match certify(cfg, &p, &s) {
        Ok(r) => stability_json(&r, cfg.threshold()),
        Err(e) => json!({ "error": e.to_string() }),
    };
    out.field("fields_u.csv", p.space(), "u", &s.u)?;
    out.field("fields_m.csv", p.space(), "m", &s.m)?;
    out.csv("history.csv", &HISTORY_HEADER, &history_rows(&report))?;
    let mut summary = json!({
        "n": n,
        "lambda": lambda,
        "method": method_name(cfg.solver.method),
        "converged": report.converged,
        "iterations": report.iterations,
        "residual": residual,
        "stability": stability,
    });
    merge(&mut summary, state_json(&p, &s));
    Ok(summary)
}

fn merge(into: &mut Value, from: Value) {
    for (k, v) in from.as_object().expect("object").clone() {
        into[k] = v;
    }
}

struct StudyErrors {
    u_h1: f64,
    m_l2: f64,
    u_l2: f64,
}

fn rate(prev: Option<(usize, f64)>, n: usize, err: f64) -> f64 {
    match prev {
        Some((pn, pe)) if pe > RATE_FLOOR && err > RATE_FLOOR => (pe / err).ln() / (n as f64 / pn as f64).ln(),
        _ => f64::NAN,
    }
}

fn run_converge(cfg: &RunConfig, out: &mut OutputDir) -> Result<Value, CliError> {
    let lambda = cfg.lambda()?;
    let list = cfg.n_list()?.to_vec();
    let manufactured = cfg.manufactured(lambda);
    let reference = match (&manufactured, cfg.reference_n) {
        (None, Some(r)) => {
            let p = cfg.problem(r, lambda)?;
            let (s, _) = solve(cfg, &p)?;
            Some((p, s))
        }
        _ => None,
    };
    let mut errors = Vec::new();
    for &n in &list {
        let p = cfg.problem(n, lambda)?;
        let (s, _) = solve(cfg, &p)?;
        let e = match (&manufactured, &reference) {
            (Some(mf), _) => {
                let e = mf.errors(p.space(), &s);
                StudyErrors {
                    u_h1: e.u_h1,
                    m_l2: e.m_l2,
                    u_l2: e.u_l2,
                }
            }
            (None, Some((rp, rs))) => reference_errors(p.space(), &s, rp.space(), rs),
            (None, None) => unreachable!("validated: reference_n or manufactured"),
        };
        errors.push((n, e));
    }
    let mut rows = Vec::new();
    let mut prev: Option<&(usize, StudyErrors)> = None;
    let mut last_rates = (f64::NAN, f64::NAN, f64::NAN);
    for entry in &errors {
        let (n, e) = entry;
        let pick = |f: fn(&StudyErrors) -> f64| prev.map(|(pn, pe)| (*pn, f(pe)));
        let ru = rate(pick(|e| e.u_h1), *n, e.u_h1);
        let rm = rate(pick(|e| e.m_l2), *n, e.m_l2);
        let rl = rate(pick(|e| e.u_l2), *n, e.u_l2);
        last_rates = (ru, rm, rl);
        rows.push(vec![
            n.to_string(),
            num(1.0 / *n as f64),
            num(e.u_h1),
            num(e.m_l2),
            num(e.u_l2),
            num(ru),
            num(rm),
            num(rl),
        ]);
        prev = Some(entry);
    }
    out.csv(
        "converge.csv",
        &["n", "h", "err_u_H1", "err_m_L2", "err_u_L2", "rate_u", "rate_m", "rate_u_L2"],
        &rows,
    )?;
    let finite = |v: f64| v.is_finite().then_some(v);
    Ok(json!({
        "lambda": lambda,
        "n_list": list,
        "reference": if manufactured.is_some() { "manufactured" } else { "fine_mesh" },
        "reference_n": if manufactured.is_some() { None } else { cfg.reference_n },
        "methodology": if manufactured.is_some() {
            "errors against the exact manufactured pair by per-element quadrature"
        } else {
            "coarse solutions evaluated on the reference mesh; norms computed there"
        },
        "last_rate_u": finite(last_rates.0),
        "last_rate_m": finite(last_rates.1),
        "last_rate_u_L2": finite(last_rates.2),
    }))
}

/// Errors of a coarse solution against the reference solution, both on the reference mesh.
fn reference_errors(space: &FemSpace, s: &State, fine: &FemSpace, reference: &State) -> StudyErrors {
    let lift = |f: &Field| fine.interpolate(|x| space.evaluate(f, x));
    let du = lift(&s.u).combine(1.0, &reference.u, -1.0);
    let dm = lift(&s.m).combine(1.0, &reference.m, -1.0);
    let nu = fine.norms(&du);
    StudyErrors {
        u_h1: nu.h1,
        m_l2: fine.l2_norm(&dm),
        u_l2: nu.l2,
    }
}

fn run_newton_rates(cfg: &RunConfig, out: &mut OutputDir) -> Result<Value, CliError> {
    let (n, lambda) = (cfg.n()?, cfg.lambda()?);
    let p = cfg.problem(n, lambda)?;
    let (_, report) = solve(cfg, &p)?;
    out.csv("newton_rates.csv", &HISTORY_HEADER, &history_rows(&report))?;
    let quad = report.quadratic_ratios();
    let tail: Vec<f64> = quad.iter().rev().take(3).rev().copied().collect();
    Ok(json!({
        "n": n,
        "lambda": lambda,
        "method": method_name(cfg.solver.method),
        "converged": report.converged,
        "iterations": report.iterations,
        "final_residual": report.final_residual(),
        "final_quad_ratios": tail,
    }))
}

fn run_stability_sweep(cfg: &RunConfig, out: &mut OutputDir) -> Result<Value, CliError> {
    let n = cfg.n()?;
    let mut lambdas = cfg.lambda_list()?.to_vec();
    lambdas.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    let (mut stable_count, mut failures) = (0, 0);
    for &lambda in &lambdas {
        let outcome = cfg
            .problem(n, lambda)
            .and_then(|p| solve(cfg, &p).map(|(s, _)| (p, s)))
            .and_then(|(p, s)| certify(cfg, &p, &s).map_err(CliError::from));
        match outcome {
            Ok(r) => {
                stable_count += usize::from(r.stable);
                rows.push(vec![
                    num(lambda),
                    num(r.sigma_min),
                    num(r.k_hat),
                    num(r.m_hat),
                    num(r.lambda_hat),
                    r.monotone_condition.to_string(),
                    r.large_lambda_condition.to_string(),
                    r.stable.to_string(),
                    "ok".into(),
                ]);
            }
            Err(e) => {
                failures += 1;
                let status = match &e {
                    CliError::Solver { kind, .. } => kind.to_string(),
                    CliError::Config(_) => "validation".into(),
                    _ => "error".into(),
                };
                let mut row = vec![num(lambda)];
                row.extend(std::iter::repeat_n("NA".to_string(), 7));
                row.push(status);
                rows.push(row);
            }
        }
    }
    out.csv(
        "stability_sweep.csv",
        &[
            "lambda",
            "sigma_min",
            "K_hat",
            "M_hat",
            "Lambda_hat",
            "monotone",
            "large_lambda",
            "stable",
            "status",
        ],
        &rows,
    )?;
    Ok(json!({
        "n": n,
        "lambda_list": lambdas,
        "threshold": cfg.threshold(),
        "stable_count": stable_count,
        "failed_count": failures,
    }))
}

fn run_sensitivity(cfg: &RunConfig, out: &mut OutputDir) -> Result<Value, CliError> {
    let (n, lambda) = (cfg.n()?, cfg.lambda()?);
    let p = cfg.problem(n, lambda)?;
    let (s, _) = solve(cfg, &p)?;
    let report = certify(cfg, &p, &s)?;
    if !report.stable {
        return Err(CliError::Refused(format!(
            "solution is not certified stable (sigma_min {:e} <= threshold {:e})",
            report.sigma_min,
            cfg.threshold()
        )));
    }
    let f_hat = cfg
        .perturbation
        .f_hat
        .as_ref()
        .map_or(mfg_core::mfg::Coupling::Zero, |f| f.build());
    let m1 = match &cfg.perturbation.m1 {
        Some(d) => d.build().project(p.space())?,
        None => p.m0().clone(),
    };
    let opts = SolverOptions {
        tol: cfg.solver.tol.unwrap_or(SolverOptions::newton().tol),
        ..SolverOptions::newton()
    };
    let result = perturbed_taylor_check(&p, &s, &f_hat, &m1, &cfg.epsilons(), &opts)?;
    let rows: Vec<Vec<String>> = result
        .taylor_errors
        .iter()
        .map(|t| {
            vec![
                num(t.epsilon),
                opt_num(t.remainder),
                t.newton_iterations.map_or_else(|| "NA".into(), |k| k.to_string()),
                t.error.clone().unwrap_or_else(|| "ok".into()),
            ]
        })
        .collect();
    out.csv("taylor_errors.csv", &["epsilon", "remainder", "newton_iterations", "status"], &rows)?;
    out.field("fields_delta_u.csv", p.space(), "delta_u", &result.direction.u)?;
    out.field("fields_delta_m.csv", p.space(), "delta_m", &result.direction.m)?;
    let remainders: Vec<Option<f64>> = result.taylor_errors.iter().map(|t| t.remainder).collect();
    Ok(json!({
        "n": n,
        "lambda": lambda,
        "epsilons": cfg.epsilons(),
        "remainders": remainders,
        "observed_order": result.observed_order,
        "stability": stability_json(&report, cfg.threshold()),
    }))
}
