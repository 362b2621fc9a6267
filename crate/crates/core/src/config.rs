//! TOML configuration files: system description and experiment description.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}: cannot read: {message}")]
    Io { file: PathBuf, message: String },
    #[error("{file}: parse error: {message}")]
    Parse { file: PathBuf, message: String },
    #[error("{file}: key `{key}`: {message}")]
    Invalid { file: PathBuf, key: String, message: String },
}

pub type Matrix = Vec<Vec<f64>>;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub a: Matrix,
    pub c: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub pi0: Matrix,
    pub mx0: Vec<f64>,
    pub subsystems: Vec<SubsystemConfig>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SubsystemConfig {
    /// Global state indices owned by this subsystem.
    pub states: Vec<usize>,
    /// Rows of C observed by this subsystem.
    pub outputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi0: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<ConstraintConfig>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintConfig {
    Unbounded,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// { z : G z ≤ h }
    Polytope { g: Matrix, h: Vec<f64> },
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Noiseless,
    Gaussian,
}

/// How Model-2 schemes form the common collective estimate x̂_{t−N/t−1}.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum Model2Prior {
    /// A · x̂_{t−N−1/t−1}: one-step collective propagation of the previous first-window estimates.
    #[default]
    Propagated,
    /// The second element of the previous window, x̂_{t−N/t−1}, as computed at t−1.
    Window,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    I,
    II,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeConfig {
    Pmhe1 { choice: Choice },
    Pmhe2 { choice: Choice },
    Pmhe3 { mu: f64 },
    CentralizedKf,
    CentralizedMhe,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub horizon: usize,
    /// Total number of time instants simulated (times 0..rounds−1).
    pub rounds: usize,
    #[serde(default)]
    pub noise: NoiseKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub model2_prior: Model2Prior,
    #[serde(default)]
    pub strict_certificate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub schemes: Vec<SchemeConfig>,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io { file: path.to_path_buf(), message: e.to_string() })
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        file: path.to_path_buf(),
        message: e.to_string().lines().filter(|l| !l.trim().is_empty()).collect::<Vec<_>>().join(" | "),
    })
}

impl SystemConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        parse(Path::new("<string>"), text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        parse(path, &read(path)?)
    }

    /// Canonical serialization: fixed key order, shortest round-tripping reals.
    pub fn to_canonical_string(&self) -> String {
        toml::to_string(self).expect("system config serializes")
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        parse(Path::new("<string>"), text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = parse(path, &read(path)?)?;
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn validate(&self, path: &Path) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| ConfigError::Invalid {
            file: path.to_path_buf(),
            key: key.to_string(),
            message: message.to_string(),
        };
        if self.horizon < 1 {
            return Err(bad("horizon", "must be at least 1"));
        }
        if self.rounds < self.horizon {
            return Err(bad("rounds", "must be at least the horizon"));
        }
        if self.schemes.is_empty() {
            return Err(bad("schemes", "at least one scheme is required"));
        }
        for (k, s) in self.schemes.iter().enumerate() {
            if let SchemeConfig::Pmhe3 { mu } = s {
                if !(*mu >= 0.0) || !mu.is_finite() {
                    return Err(bad(&format!("schemes[{k}].mu"), "must be a finite non-negative real"));
                }
            }
        }
        Ok(())
    }

    pub fn to_canonical_string(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYS: &str = r#"
a = [[0.5, 0.1], [0.0, 0.4]]
c = [[1.0, 0.0], [0.0, 1.0]]
q = [[1.0, 0.0], [0.0, 1.0]]
r = [[1.0, 0.0], [0.0, 1.0]]
pi0 = [[1.0, 0.0], [0.0, 1.0]]
mx0 = [0.0, 0.0]

[[subsystems]]
states = [0]
outputs = [0]
constraint = { kind = "box", lower = [-1.0], upper = [1.0] }

[[subsystems]]
states = [1]
outputs = [1]
"#;

    #[test]
    fn system_round_trip() {
        let cfg = SystemConfig::from_toml_str(SYS).unwrap();
        let s1 = cfg.to_canonical_string();
        let again = SystemConfig::from_toml_str(&s1).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_canonical_string(), s1);
    }

    #[test]
    fn unknown_key_is_located() {
        let err = SystemConfig::from_toml_str(&SYS.replace("mx0", "m_x0")).unwrap_err();
        assert!(err.to_string().contains("m_x0"), "{err}");
    }

    #[test]
    fn experiment_defaults_and_validation() {
        let e = ExperimentConfig::from_toml_str(
            "horizon = 2\nrounds = 10\n[[schemes]]\nkind = \"pmhe1\"\nchoice = \"II\"\n[[schemes]]\nkind = \"pmhe3\"\nmu = 0.5\n",
        )
        .unwrap();
        assert_eq!(e.noise, NoiseKind::Noiseless);
        assert_eq!(e.model2_prior, Model2Prior::Propagated);
        assert!(e.validate(Path::new("x")).is_ok());
        let mut bad = e.clone();
        bad.rounds = 1;
        assert!(matches!(bad.validate(Path::new("x")), Err(ConfigError::Invalid { .. })));
        let s = e.to_canonical_string();
        assert_eq!(ExperimentConfig::from_toml_str(&s).unwrap(), e);
    }
}
