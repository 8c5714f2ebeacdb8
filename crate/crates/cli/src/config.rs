//! Flat TOML run configuration. Every key is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use bilevel_dual::dbp::InnerMethod;
use bilevel_dual::experiments::result::OutputFormat;
use bilevel_dual::homotopy::{DriverOptions, Schedule};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Invopt,
    Stackelberg,
    Solve,
    Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Invopt,
    Stackelberg,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must agree with the subcommand when given.
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub count: Option<usize>,
    pub n: Option<usize>,
    pub noiseless: Option<bool>,
    pub alphas: Option<Vec<f64>>,
    pub phis: Option<Vec<f64>>,
    // single solves
    pub problem: Option<ProblemKind>,
    pub alpha: Option<f64>,
    pub phi: Option<f64>,
    pub x0: Option<Vec<f64>>,
    // schedule
    pub epsilon0: Option<f64>,
    pub mu0: Option<f64>,
    pub gamma: Option<f64>,
    pub zeta: Option<f64>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    // solver
    pub constraint_tol: Option<f64>,
    pub stationarity_tol: Option<f64>,
    pub max_major: Option<usize>,
    pub max_inner: Option<usize>,
    pub method: Option<InnerMethod>,
    pub inner_tol: Option<f64>,
    pub inner_max_iter: Option<usize>,
    // output
    pub output_path: Option<PathBuf>,
    pub output_format: Option<OutputFormat>,
    pub jobs: Option<usize>,
    /// Test hook for `check`: corrupts one analytic gradient.
    pub inject_gradient_bug: Option<bool>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn schedule(&self) -> Result<Schedule, ConfigError> {
        let d = Schedule::default();
        let s = Schedule {
            epsilon0: self.epsilon0.unwrap_or(d.epsilon0),
            mu0: self.mu0.unwrap_or(d.mu0),
            gamma: self.gamma.unwrap_or(d.gamma),
            zeta: self.zeta.unwrap_or(d.zeta),
            k: self.k.unwrap_or(d.k),
        };
        s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(s)
    }

    pub fn driver_options(&self) -> Result<DriverOptions, ConfigError> {
        let mut o = DriverOptions::default();
        let d = &mut o.dbp;
        set_positive(&mut d.constraint_tol, self.constraint_tol, "constraint_tol")?;
        set_positive(&mut d.stationarity_tol, self.stationarity_tol, "stationarity_tol")?;
        set_count(&mut d.max_major, self.max_major, "max_major")?;
        set_count(&mut d.max_inner, self.max_inner, "max_inner")?;
        if let Some(m) = self.method {
            d.method = m;
        }
        let mut inner = o.inner;
        set_positive(&mut inner.tol, self.inner_tol, "inner_tol")?;
        set_count(&mut inner.max_iter, self.inner_max_iter, "inner_max_iter")?;
        o.inner = inner;
        o.dbp.inner = inner;
        o.ascent.inner = inner;
        Ok(o)
    }

    pub fn grid(&self) -> Result<(Vec<f64>, Vec<f64>), ConfigError> {
        let alphas = self.alphas.clone().unwrap_or_else(bilevel_dual::experiments::tenths);
        let phis = self.phis.clone().unwrap_or_else(bilevel_dual::experiments::tenths);
        if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(ConfigError::Invalid("alphas must lie in [0, 1]".into()));
        }
        if phis.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(ConfigError::Invalid("phis must lie in (0, 1)".into()));
        }
        Ok((alphas, phis))
    }

    pub fn format(&self) -> OutputFormat {
        self.output_format.unwrap_or(OutputFormat::Csv)
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1).max(1)
    }

    pub fn check_command(&self, expected: Command) -> Result<(), ConfigError> {
        match self.command {
            Some(c) if c != expected => Err(ConfigError::Invalid(format!(
                "config is for {c:?} but the {expected:?} command was run"
            ))),
            _ => Ok(()),
        }
    }
}

fn set_positive(slot: &mut f64, value: Option<f64>, key: &str) -> Result<(), ConfigError> {
    if let Some(v) = value {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ConfigError::Invalid(format!("{key} must be positive (got {v})")));
        }
        *slot = v;
    }
    Ok(())
}

fn set_count(slot: &mut usize, value: Option<usize>, key: &str) -> Result<(), ConfigError> {
    if let Some(v) = value {
        if v == 0 {
            return Err(ConfigError::Invalid(format!("{key} must be at least 1")));
        }
        *slot = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("seed = 1\ncolour = 3\n").is_err());
        let c = RunConfig::parse("seed = 1\nK = 4\nmethod = \"dense_bfgs\"\n").unwrap();
        assert_eq!(c.schedule().unwrap().k, 4);
        assert_eq!(c.driver_options().unwrap().dbp.method, InnerMethod::DenseBfgs);
    }

    #[test]
    fn ranges_are_checked() {
        let c = RunConfig::parse("gamma = 1.5").unwrap();
        assert!(c.schedule().is_err());
        let c = RunConfig::parse("max_major = 0").unwrap();
        assert!(c.driver_options().is_err());
        let c = RunConfig::parse("phis = [0.0]").unwrap();
        assert!(c.grid().is_err());
        let c = RunConfig::parse("command = \"check\"").unwrap();
        assert!(c.check_command(Command::Invopt).is_err());
        assert!(c.check_command(Command::Check).is_ok());
    }
}
