use std::fs::File;
use std::path::{Path, PathBuf};

use mfg_core::fem::{FemSpace, Field};
use serde_json::Value;

use crate::error::CliError;

pub const NA: &str = "NA";

/// 17 significant digits; `NA` for non-finite values.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        NA.to_string()
    }
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), num)
}

/// Collects written file names so the summary can list them.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(File::create(self.root.join(name))?);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Nodal values with node coordinates.
    pub fn field(&mut self, name: &str, space: &FemSpace, label: &str, f: &Field) -> Result<(), CliError> {
        let mesh = space.mesh();
        let dim = mesh.dim();
        let header: Vec<&str> = if dim == 1 { vec!["x", label] } else { vec!["x", "y", label] };
        let rows: Vec<Vec<String>> = mesh
            .nodes()
            .iter()
            .zip(f.coeffs())
            .map(|(p, &v)| p[..dim].iter().map(|&c| num(c)).chain([num(v)]).collect())
            .collect();
        self.csv(name, &header, &rows)
    }

    pub fn summary(&mut self, mut summary: Value) -> Result<(), CliError> {
        self.written.push("summary.json".into());
        summary["outputs"] = Value::from(self.written.clone());
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(self.root.join("summary.json"), text + "\n")?;
        Ok(())
    }
}
