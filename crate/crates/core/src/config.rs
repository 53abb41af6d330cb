//! TOML run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::synthetic::{PhantomSpec, DEFAULT_MIXING};
use crate::training::TrainingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub smoothing: f64,
    pub mixing: [[f64; 4]; 4],
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = PhantomSpec::default();
        Self {
            n_train: 100,
            n_test: 25,
            noise_sigma: spec.noise_sigma,
            smoothing: spec.smoothing,
            mixing: DEFAULT_MIXING,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Probabilities at or above this are foreground.
    pub threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

/// Output locations. Everything except `out` is relative to `out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out: PathBuf,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub log: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            data: PathBuf::from("data"),
            checkpoint: PathBuf::from("checkpoint"),
            report: PathBuf::from("report.csv"),
            log: PathBuf::from("train_log.csv"),
        }
    }
}

impl PathsConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.out.join(&self.data)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join(&self.checkpoint)
    }

    pub fn report_path(&self) -> PathBuf {
        self.out.join(&self.report)
    }

    pub fn log_path(&self) -> PathBuf {
        self.out.join(&self.log)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates TOML text; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate().map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        self.phantom_spec().validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::InvalidConfig("data.n_train and data.n_test must be positive".into()));
        }
        let t = self.eval.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::InvalidConfig(format!("eval.threshold must lie in (0,1), got {t}")));
        }
        Ok(())
    }

    /// Phantom generator settings: extent from the network input size, seed
    /// from the run seed.
    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            size: self.network.input_size,
            seed: self.seed,
            noise_sigma: self.data.noise_sigma,
            smoothing: self.data.smoothing,
            mixing: self.data.mixing,
            ..PhantomSpec::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("test.toml"))
    }

    #[test]
    fn seed_only_gets_defaults() {
        let c = parse("seed = 7\n").unwrap();
        assert_eq!(c, RunConfig { seed: 7, ..RunConfig::default() });
        assert_eq!(c.training.learning_rate, 5e-4);
        assert_eq!(c.training.max_epochs, 50);
        assert_eq!(c.network.input_size, 32);
        assert_eq!((c.data.n_train, c.data.n_test), (100, 25));
        assert_eq!(parse("").unwrap().seed, 42);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("[training]\nlerning_rate = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("lerning_rate"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn type_errors_are_reported() {
        let err = parse("seed = \"x\"\n").unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn indivisible_input_size_rejected() {
        let err = parse("[network]\ninput_size = 30\nlevels = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn other_validation() {
        assert!(parse("[eval]\nthreshold = 1.5\n").is_err());
        assert!(parse("[data]\nn_test = 0\n").is_err());
        assert!(parse("[data]\nnoise_sigma = -0.1\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = parse("seed = 3\n[network]\ncr_enabled = false\n[paths]\nout = \"elsewhere\"\n").unwrap();
        assert_eq!(parse(&c.to_toml()).unwrap(), c);
        assert_eq!(c.paths.checkpoint_dir(), PathBuf::from("elsewhere/checkpoint"));
        let spec = c.phantom_spec();
        assert_eq!((spec.size, spec.seed), (32, 3));
    }
}
