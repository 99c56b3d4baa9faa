//! Experiment configuration files: one `key = value` per line, `#` starts a
//! comment, unknown keys are rejected. All experiment parameters live here;
//! command-line flags carry only paths and method selection.

use std::collections::BTreeMap;

use psd_core::model::Mode;

use crate::CliError;

/// Parsed experiment configuration with typed accessors. Keys not present
/// in the file fall back to documented defaults where one exists; the
/// `require_*` accessors name the missing key otherwise.
#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

const KNOWN_KEYS: [&str; 14] = [
    "n",
    "m",
    "lambda",
    "alpha",
    "eta",
    "eta_decay",
    "eta_floor",
    "epochs",
    "seed",
    "mode",
    "patch_side",
    "patch_count",
    "tol",
    "max_iter",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::validation(format!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::validation(format!(
                    "config line {}: unknown key `{key}`",
                    lineno + 1
                )));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::validation(format!(
                    "config line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        let cfg = ExperimentConfig { values };
        cfg.type_check()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Every present value must parse as its target type, whether or not the
    /// command ends up using it.
    fn type_check(&self) -> Result<(), CliError> {
        for key in ["n", "m", "epochs", "patch_side", "patch_count", "max_iter"] {
            self.get_usize(key)?;
        }
        for key in ["lambda", "alpha", "eta", "eta_decay", "eta_floor", "tol"] {
            self.get_f64(key)?;
        }
        self.get_u64("seed")?;
        self.mode()?;
        Ok(())
    }

    fn get_usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<usize>().map_err(|_| {
                    CliError::validation(format!("config key `{key}`: `{v}` is not a count"))
                })
            })
            .transpose()
    }

    fn get_u64(&self, key: &str) -> Result<Option<u64>, CliError> {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<u64>().map_err(|_| {
                    CliError::validation(format!("config key `{key}`: `{v}` is not an integer"))
                })
            })
            .transpose()
    }

    fn get_f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    CliError::validation(format!("config key `{key}`: `{v}` is not a number"))
                })
            })
            .transpose()
    }

    fn require_usize(&self, key: &str) -> Result<usize, CliError> {
        self.get_usize(key)?
            .ok_or_else(|| CliError::validation(format!("missing config key `{key}`")))
    }

    fn require_f64(&self, key: &str) -> Result<f64, CliError> {
        self.get_f64(key)?
            .ok_or_else(|| CliError::validation(format!("missing config key `{key}`")))
    }

    pub fn n(&self) -> Result<usize, CliError> {
        self.require_usize("n")
    }

    pub fn m(&self) -> Result<usize, CliError> {
        self.require_usize("m")
    }

    pub fn lambda(&self) -> Result<f64, CliError> {
        self.require_f64("lambda")
    }

    pub fn alpha(&self) -> Result<f64, CliError> {
        Ok(self.get_f64("alpha")?.unwrap_or(1.0))
    }

    pub fn eta(&self) -> Result<f64, CliError> {
        Ok(self.get_f64("eta")?.unwrap_or(0.02))
    }

    pub fn eta_decay(&self) -> Result<f64, CliError> {
        Ok(self.get_f64("eta_decay")?.unwrap_or(1e-4))
    }

    pub fn eta_floor(&self) -> Result<f64, CliError> {
        Ok(self.get_f64("eta_floor")?.unwrap_or(1e-4))
    }

    pub fn epochs(&self) -> Result<usize, CliError> {
        self.require_usize("epochs")
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get_u64("seed")?
            .ok_or_else(|| CliError::validation("missing config key `seed`".into()))
    }

    pub fn mode(&self) -> Result<Mode, CliError> {
        match self.values.get("mode").map(String::as_str) {
            None | Some("joint") => Ok(Mode::Joint),
            Some("separate") => Ok(Mode::Separate),
            Some("autoencoder") => Ok(Mode::Autoencoder),
            Some(other) => Err(CliError::validation(format!(
                "config key `mode`: `{other}` is not one of joint, separate, autoencoder"
            ))),
        }
    }

    pub fn patch_side(&self) -> Result<usize, CliError> {
        self.require_usize("patch_side")
    }

    pub fn patch_count(&self) -> Result<usize, CliError> {
        self.require_usize("patch_count")
    }

    pub fn tol(&self) -> Result<f64, CliError> {
        Ok(self.get_f64("tol")?.unwrap_or(1e-8))
    }

    pub fn max_iter(&self) -> Result<usize, CliError> {
        Ok(self.get_usize("max_iter")?.unwrap_or(1000))
    }
}
