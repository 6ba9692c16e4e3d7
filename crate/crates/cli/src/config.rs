use std::path::Path;
use std::sync::Arc;

use mfg_core::analyze::{DEFAULT_EPSILONS, DEFAULT_STABILITY_THRESHOLD};
use mfg_core::fem::FemSpace;
use mfg_core::manufactured::Manufactured;
use mfg_core::mfg::{Coupling, Density, Problem};
use mfg_core::solve::SolverOptions;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Solve,
    Converge,
    NewtonRates,
    StabilitySweep,
    Sensitivity,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Solve => "solve",
            Experiment::Converge => "converge",
            Experiment::NewtonRates => "newton-rates",
            Experiment::StabilitySweep => "stability-sweep",
            Experiment::Sensitivity => "sensitivity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingFamily {
    Zero,
    Constant,
    Atan,
    NegAtan,
    RationalBump,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub family: CouplingFamily,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl CouplingSpec {
    pub fn build(&self) -> Coupling {
        let s = self.scale;
        match self.family {
            CouplingFamily::Zero => Coupling::Zero,
            CouplingFamily::Constant => Coupling::Constant(s),
            CouplingFamily::Atan => Coupling::Atan { scale: s },
            CouplingFamily::NegAtan => Coupling::Atan { scale: -s },
            CouplingFamily::RationalBump => Coupling::RationalBump { scale: s },
        }
    }

    fn validate(&self, path: &str) -> Result<(), CliError> {
        finite(self.scale, &format!("{path}.scale"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityFamily {
    Uniform,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    pub family: DensityFamily,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Default for DensitySpec {
    fn default() -> Self {
        Self {
            family: DensityFamily::Uniform,
            amplitude: 0.0,
            phase: 0.0,
        }
    }
}

impl DensitySpec {
    pub fn build(&self) -> Density {
        match self.family {
            DensityFamily::Uniform => Density::Uniform,
            DensityFamily::Cosine => Density::Cosine {
                amplitude: self.amplitude,
                phase: self.phase,
            },
        }
    }

    fn validate(&self, path: &str) -> Result<(), CliError> {
        if !(0.0..1.0).contains(&self.amplitude) {
            return Err(invalid(
                &format!("{path}.amplitude"),
                format!("must lie in [0, 1), got {}", self.amplitude),
            ));
        }
        finite(self.phase, &format!("{path}.phase"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Newton,
    Picard,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default)]
    pub method: Method,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub damping: Option<f64>,
}

impl SolverSpec {
    pub fn options(&self) -> SolverOptions {
        let base = match self.method {
            Method::Newton => SolverOptions::newton(),
            Method::Picard => SolverOptions::picard(),
        };
        SolverOptions {
            tol: self.tol.unwrap_or(base.tol),
            max_iter: self.max_iter.unwrap_or(base.max_iter),
            damping: self.damping.unwrap_or(base.damping),
            ..base
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if let Some(tol) = self.tol {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(invalid("solver.tol", format!("must be positive, got {tol}")));
            }
        }
        if self.max_iter == Some(0) {
            return Err(invalid("solver.max_iter", "must be at least 1"));
        }
        if let Some(d) = self.damping {
            if !(d > 0.0 && d <= 1.0) {
                return Err(invalid("solver.damping", format!("must lie in (0, 1], got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Coupling perturbation; none when absent.
    pub f_hat: Option<CouplingSpec>,
    /// Target initial density; `m0` itself (no perturbation) when absent.
    pub m1: Option<DensitySpec>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManufacturedSpec {
    pub u_amplitude: f64,
    pub m_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub dim: usize,
    pub n: Option<usize>,
    pub n_list: Option<Vec<usize>>,
    pub reference_n: Option<usize>,
    pub lambda: Option<f64>,
    pub lambda_list: Option<Vec<f64>>,
    pub coupling: CouplingSpec,
    #[serde(default)]
    pub m0: DensitySpec,
    #[serde(default)]
    pub solver: SolverSpec,
    pub epsilons: Option<Vec<f64>>,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    pub stability_threshold: Option<f64>,
    /// Exact smooth solution enforced by source terms; requires a uniform `m0`.
    pub manufactured: Option<ManufacturedSpec>,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn finite(v: f64, field: &str) -> Result<(), CliError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite, got {v}")))
    }
}

fn positive(v: f64, field: &str) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {v}")))
    }
}

fn mesh_size(n: usize, field: &str) -> Result<(), CliError> {
    if n >= 2 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be at least 2, got {n}")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                CliError::Config(e.into_inner().to_string())
            } else {
                CliError::Config(format!("{path}: {}", e.into_inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(1..=2).contains(&self.dim) {
            return Err(invalid("dim", format!("must be 1 or 2, got {}", self.dim)));
        }
        self.coupling.validate("coupling")?;
        self.m0.validate("m0")?;
        self.solver.validate()?;
        if let Some(t) = self.stability_threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(invalid("stability_threshold", format!("must be nonnegative, got {t}")));
            }
        }
        if let Some(mf) = &self.manufactured {
            finite(mf.u_amplitude, "manufactured.u_amplitude")?;
            if mf.m_amplitude.is_nan() || mf.m_amplitude.abs() >= 1.0 {
                return Err(invalid(
                    "manufactured.m_amplitude",
                    format!("must lie in (-1, 1), got {}", mf.m_amplitude),
                ));
            }
            if self.m0.family != DensityFamily::Uniform {
                return Err(invalid("m0.family", "must be \"uniform\" with a manufactured solution"));
            }
        }
        match self.experiment {
            Experiment::Converge => {
                self.lambda()?;
                let list = self.n_list()?;
                let largest = *list.last().expect("n_list is nonempty");
                match (self.reference_n, &self.manufactured) {
                    (None, None) => return Err(invalid("reference_n", "is required")),
                    (Some(r), _) if r < 8 * largest => {
                        return Err(invalid(
                            "reference_n",
                            format!("must be at least 8 x {largest} (largest n), got {r}"),
                        ))
                    }
                    _ => {}
                }
            }
            Experiment::StabilitySweep => {
                self.n()?;
                self.lambda_list()?;
            }
            Experiment::Solve | Experiment::NewtonRates | Experiment::Sensitivity => {
                self.n()?;
                self.lambda()?;
            }
        }
        if self.experiment == Experiment::Sensitivity {
            if let Some(f) = &self.perturbation.f_hat {
                f.validate("perturbation.f_hat")?;
            }
            if let Some(m1) = &self.perturbation.m1 {
                m1.validate("perturbation.m1")?;
            }
            let eps = self.epsilons();
            if eps.is_empty() {
                return Err(invalid("epsilons", "must not be empty"));
            }
            for (i, &e) in eps.iter().enumerate() {
                positive(e, &format!("epsilons[{i}]"))?;
            }
            if eps.windows(2).any(|w| w[1] >= w[0]) {
                return Err(invalid("epsilons", "must be strictly decreasing"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> Result<usize, CliError> {
        let n = self.n.ok_or_else(|| invalid("n", "is required"))?;
        mesh_size(n, "n")?;
        Ok(n)
    }

    pub fn n_list(&self) -> Result<&[usize], CliError> {
        let list = self.n_list.as_deref().ok_or_else(|| invalid("n_list", "is required"))?;
        if list.is_empty() {
            return Err(invalid("n_list", "must not be empty"));
        }
        for (i, &n) in list.iter().enumerate() {
            mesh_size(n, &format!("n_list[{i}]"))?;
        }
        if list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("n_list", "must be strictly increasing"));
        }
        Ok(list)
    }

    pub fn lambda(&self) -> Result<f64, CliError> {
        let l = self.lambda.ok_or_else(|| invalid("lambda", "is required"))?;
        positive(l, "lambda")?;
        Ok(l)
    }

    pub fn lambda_list(&self) -> Result<&[f64], CliError> {
        let list = self
            .lambda_list
            .as_deref()
            .ok_or_else(|| invalid("lambda_list", "is required"))?;
        if list.is_empty() {
            return Err(invalid("lambda_list", "must not be empty"));
        }
        for (i, &l) in list.iter().enumerate() {
            positive(l, &format!("lambda_list[{i}]"))?;
        }
        Ok(list)
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.epsilons.clone().unwrap_or_else(|| DEFAULT_EPSILONS.to_vec())
    }

    pub fn threshold(&self) -> f64 {
        self.stability_threshold.unwrap_or(DEFAULT_STABILITY_THRESHOLD)
    }

    pub fn manufactured(&self, lambda: f64) -> Option<Manufactured> {
        self.manufactured.as_ref().map(|mf| {
            Manufactured::new(self.dim, lambda, self.coupling.build(), mf.u_amplitude, mf.m_amplitude)
                .expect("amplitudes were validated")
        })
    }

    /// The problem on an `n`-cell mesh with discount `lambda`.
    pub fn problem(&self, n: usize, lambda: f64) -> Result<Problem, CliError> {
        let space: Arc<FemSpace> = FemSpace::build(self.dim, n)?;
        if let Some(mf) = self.manufactured(lambda) {
            return Ok(mf.problem(space)?);
        }
        let m0 = self.m0.build().project(&space)?;
        Ok(Problem::new(space, lambda, m0, self.coupling.build())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "experiment": "solve", "dim": 1, "n": 16, "lambda": 1.0,
        "coupling": {"family": "atan", "scale": 1.0},
        "m0": {"family": "cosine", "amplitude": 0.5}
    }"#;

    fn with(patch: &str) -> String {
        let mut v: serde_json::Value = serde_json::from_str(BASE).unwrap();
        let p: serde_json::Value = serde_json::from_str(patch).unwrap();
        for (k, x) in p.as_object().unwrap() {
            v[k] = x.clone();
        }
        v.to_string()
    }

    fn message(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(CliError::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn base_config_parses_with_defaults() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_eq!(c.experiment, Experiment::Solve);
        assert_eq!(c.solver.options(), SolverOptions::newton());
        assert_eq!(c.epsilons(), DEFAULT_EPSILONS.to_vec());
        assert_eq!(c.coupling.build(), Coupling::Atan { scale: 1.0 });
    }

    #[test]
    fn errors_name_the_offending_field() {
        assert!(message(&with(r#"{"m0": {"family": "cosine", "amplitude": 1.5}}"#)).starts_with("m0.amplitude"));
        assert!(message(&with(r#"{"m0": {"family": "cosine", "amplitude": "x"}}"#)).starts_with("m0.amplitude"));
        assert!(message(&with(r#"{"solver": {"damping": 0.0}}"#)).starts_with("solver.damping"));
        assert!(message(&with(r#"{"coupling": {"family": "cubic"}}"#)).starts_with("coupling.family"));
        assert!(message(&with(r#"{"lambda": -1.0}"#)).starts_with("lambda"));
        assert!(message(&with(r#"{"dim": 3}"#)).starts_with("dim"));
        assert!(message(&with(r#"{"colour": 3}"#)).contains("colour"));
    }

    #[test]
    fn studies_check_their_lists() {
        let sweep = with(r#"{"experiment": "stability-sweep", "lambda_list": []}"#);
        assert!(message(&sweep).starts_with("lambda_list"));
        let conv = with(r#"{"experiment": "converge", "n_list": [16, 16], "reference_n": 256}"#);
        assert!(message(&conv).starts_with("n_list"));
        let conv = with(r#"{"experiment": "converge", "n_list": [16, 32], "reference_n": 128}"#);
        assert!(message(&conv).starts_with("reference_n"));
        let sens = with(r#"{"experiment": "sensitivity", "epsilons": [0.01, 0.1]}"#);
        assert!(message(&sens).starts_with("epsilons"));
    }

    #[test]
    fn neg_atan_flips_the_sign() {
        let spec = CouplingSpec {
            family: CouplingFamily::NegAtan,
            scale: 2.0,
        };
        assert_eq!(spec.build(), Coupling::Atan { scale: -2.0 });
        assert!(!spec.build().is_monotone());
    }

    #[test]
    fn manufactured_runs_need_uniform_m0() {
        let text = with(r#"{"manufactured": {"u_amplitude": 0.1, "m_amplitude": 0.3}}"#);
        assert!(message(&text).starts_with("m0.family"));
    }
}
