//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! methods = ["plain", "aadl", "aadl_ma"]
//!
//! [problem]
//! kind = "mlp_synthetic"
//! samples = 500
//! features = 9
//!
//! [optimizer]
//! kind = "adam"
//!
//! [schedule]
//! kind = "milestones"
//! initial = 0.02
//! factor = 0.2
//! at = [1000]
//! unit = "epochs"
//!
//! [acceleration]
//! beta = 0.1
//! history_depth = 10
//!
//! [training]
//! batch_size = 40
//! epochs = 1500
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use aadl_core::data::SamplingStrategy;
use aadl_core::models::{Activation, NoiseModel};
use aadl_core::optimizers::{LrSchedule, OptimizerKind};
use aadl_core::AccelerationConfig;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The bare optimizer.
    Plain,
    /// Safeguarded alternating Anderson acceleration.
    Aadl,
    /// Acceleration plus moving-average regularization.
    AadlMa,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Plain, Method::Aadl, Method::AadlMa];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Plain => "plain",
            Method::Aadl => "aadl",
            Method::AadlMa => "aadl_ma",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// The trainer configuration this method runs with.
    pub fn acceleration(self, base: &AccelerationConfig) -> AccelerationConfig {
        let mut cfg = base.clone();
        match self {
            Method::Plain => {
                cfg.acceleration_period = usize::MAX;
                cfg.moving_average = false;
            }
            Method::Aadl => cfg.moving_average = false,
            Method::AadlMa => cfg.moving_average = true,
        }
        cfg
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

fn default_spectral_radius() -> f64 {
    0.9
}

fn default_target_error() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineProblem {
    pub dim: usize,
    /// Largest eigenvalue magnitude of the symmetric iteration matrix.
    #[serde(default = "default_spectral_radius")]
    pub spectral_radius: f64,
    /// Seed for the map; defaults to the run seed.
    #[serde(default)]
    pub map_seed: Option<u64>,
    #[serde(default)]
    pub noise: Option<NoiseModel>,
    /// Distance to the exact fixed point counted as converged.
    #[serde(default = "default_target_error")]
    pub target_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvProblem {
    pub path: PathBuf,
    pub target_columns: Vec<String>,
    #[serde(default)]
    pub drop_columns: Vec<String>,
    /// Z-score features with training-split statistics.
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Seed for the split; defaults to the run seed.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProblem {
    pub samples: usize,
    pub features: usize,
    pub noise_sd: f64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticProblem {
    pub samples: usize,
    pub features: usize,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Affine(AffineProblem),
    MlpCsv(CsvProblem),
    MlpSynthetic(SyntheticProblem),
    Logistic(LogisticProblem),
}

fn default_batch_size() -> usize {
    32
}

fn default_validation_cost() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Training length in passes over the training split. When set it
    /// overrides `acceleration.max_iterations`.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub sampling: SamplingStrategy,
    /// Validate every iteration while `parameters * validation rows` stays
    /// at or below this, otherwise once per epoch.
    #[serde(default = "default_validation_cost")]
    pub validation_cost_threshold: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            epochs: None,
            sampling: SamplingStrategy::default(),
            validation_cost_threshold: default_validation_cost(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub acceleration: AccelerationConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn field(path: impl Into<String>, message: impl Into<String>) -> HarnessError {
    HarnessError::Config { field: path.into(), message: message.into() }
}

fn check_fraction(path: &str, f: f64) -> Result<(), HarnessError> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(field(path, format!("{f} is not in (0, 1)")))
    }
}

fn check_hidden(hidden: &[usize]) -> Result<(), HarnessError> {
    match hidden.iter().position(|&h| h == 0) {
        Some(i) => Err(field(format!("problem.hidden[{i}]"), "layer width must be positive")),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::ConfigParse { path: None, message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| HarnessError::ConfigRead { path: path.to_path_buf(), source })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| HarnessError::ConfigParse {
            path: Some(path.to_path_buf()),
            message: e.to_string(),
        })?;
        // Relative data paths are taken relative to the config file.
        if let ProblemConfig::MlpCsv(p) = &mut cfg.problem {
            if p.path.is_relative() {
                if let Some(dir) = path.parent() {
                    p.path = dir.join(&p.path);
                }
            }
        }
        Ok(cfg)
    }

    /// Checks every section and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, HarnessError> {
        let mut warnings = self
            .acceleration
            .validate()
            .map_err(|e| field(format!("acceleration.{}", e.field), e.message))?;
        self.optimizer.validate().map_err(|m| field("optimizer", m))?;
        self.schedule.validate().map_err(|m| field("schedule", m))?;
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(field("methods", "at least one method is required"));
        }
        let mut seen = Vec::new();
        for (i, m) in self.methods.iter().enumerate() {
            if seen.contains(m) {
                return Err(field(format!("methods[{i}]"), format!("{m} listed twice")));
            }
            seen.push(*m);
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|p| p[0] == p[1]) {
            return Err(field("seeds", "seeds must be distinct"));
        }

        match &self.problem {
            ProblemConfig::Affine(p) => {
                if p.dim == 0 {
                    return Err(field("problem.dim", "must be positive"));
                }
                if !(p.spectral_radius >= 0.0 && p.spectral_radius < 1.0) {
                    return Err(field("problem.spectral_radius", "must be in [0, 1)"));
                }
                if p.target_error.is_nan() || p.target_error <= 0.0 {
                    return Err(field("problem.target_error", "must be positive"));
                }
                if self.training.epochs.is_some() {
                    return Err(field(
                        "training.epochs",
                        "affine problems are sized by acceleration.max_iterations",
                    ));
                }
            }
            ProblemConfig::MlpCsv(p) => {
                if p.target_columns.is_empty() {
                    return Err(field("problem.target_columns", "name at least one target column"));
                }
                check_hidden(&p.hidden)?;
                check_fraction("problem.train_fraction", p.train_fraction)?;
            }
            ProblemConfig::MlpSynthetic(p) => {
                if p.samples < 2 {
                    return Err(field("problem.samples", "need at least two samples"));
                }
                if p.features == 0 {
                    return Err(field("problem.features", "must be positive"));
                }
                if !(p.noise_sd >= 0.0 && p.noise_sd.is_finite()) {
                    return Err(field("problem.noise_sd", "must be non-negative"));
                }
                check_hidden(&p.hidden)?;
                check_fraction("problem.train_fraction", p.train_fraction)?;
            }
            ProblemConfig::Logistic(p) => {
                if p.samples < 2 {
                    return Err(field("problem.samples", "need at least two samples"));
                }
                if p.features == 0 {
                    return Err(field("problem.features", "must be positive"));
                }
                check_fraction("problem.train_fraction", p.train_fraction)?;
            }
        }
        if !matches!(self.problem, ProblemConfig::Affine(_)) {
            if self.training.batch_size == 0 {
                return Err(field("training.batch_size", "must be positive"));
            }
            if self.training.epochs == Some(0) {
                return Err(field("training.epochs", "must be positive"));
            }
        }
        if self.acceleration.moving_average && !self.methods.contains(&Method::AadlMa) {
            warnings.push("acceleration.moving_average is set per method and is ignored here".into());
        }
        Ok(warnings)
    }

    /// A 50-dimensional noiseless affine map with spectral radius 0.9, run
    /// until every method is within 1e-8 of the fixed point.
    pub fn demo_affine() -> Self {
        let acceleration = AccelerationConfig {
            beta: 1.0,
            history_depth: 10,
            max_iterations: 400,
            loss_tolerance: 1e-14,
            ..AccelerationConfig::default()
        };
        Self {
            problem: ProblemConfig::Affine(AffineProblem {
                dim: 50,
                spectral_radius: 0.9,
                map_seed: None,
                noise: None,
                target_error: 1e-8,
            }),
            optimizer: OptimizerKind::default(),
            schedule: LrSchedule::default(),
            acceleration,
            training: TrainingConfig::default(),
            seeds: vec![0],
            methods: default_methods(),
            output_dir: None,
        }
    }

    /// Output directory from the command line, the config, `AADL_OUTPUT_DIR`
    /// or `runs`, in that order.
    pub fn resolve_output_dir(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os("AADL_OUTPUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTHETIC: &str = r#"
seeds = [0, 1]

[problem]
kind = "mlp_synthetic"
samples = 100
features = 3
noise_sd = 0.1
hidden = [8]

[optimizer]
kind = "adam"

[schedule]
kind = "constant"
lr = 0.01

[acceleration]
beta = 0.1
history_depth = 4

[training]
batch_size = 10
epochs = 3
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_toml(SYNTHETIC).unwrap();
        assert_eq!(cfg.seeds, vec![0, 1]);
        assert_eq!(cfg.methods, Method::ALL.to_vec());
        assert_eq!(cfg.acceleration.history_depth, 4);
        assert!(matches!(cfg.problem, ProblemConfig::MlpSynthetic(ref p) if p.hidden == vec![8]));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for (from, to) in [
            ("beta = 0.1", "betta = 0.1"),
            ("hidden = [8]", "hiden = [8]"),
            ("batch_size = 10", "batch = 10"),
            ("seeds = [0, 1]", "seed = [0, 1]"),
        ] {
            let text = SYNTHETIC.replace(from, to);
            let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
            assert!(err.contains("unknown field"), "{to}: {err}");
        }
    }

    #[test]
    fn validation_reports_field_paths() {
        let cases = [
            ("beta = 0.1", "beta = 1.5", "acceleration.beta"),
            ("hidden = [8]", "hidden = [8, 0]", "problem.hidden[1]"),
            ("batch_size = 10", "batch_size = 0", "training.batch_size"),
            ("seeds = [0, 1]", "seeds = []", "seeds"),
            ("noise_sd = 0.1", "noise_sd = -1.0", "problem.noise_sd"),
        ];
        for (from, to, path) in cases {
            let cfg = ExperimentConfig::from_toml(&SYNTHETIC.replace(from, to)).unwrap();
            match cfg.validate() {
                Err(HarnessError::Config { field, .. }) => assert_eq!(field, path),
                other => panic!("{to}: {other:?}"),
            }
        }
    }

    #[test]
    fn methods_configure_the_trainer() {
        let base = AccelerationConfig::default();
        let plain = Method::Plain.acceleration(&base);
        assert!(plain.acceleration_period > 1 << 40 && !plain.moving_average);
        assert!(!Method::Aadl.acceleration(&base).moving_average);
        assert!(Method::AadlMa.acceleration(&base).moving_average);
        assert_eq!(Method::parse("aadl_ma"), Some(Method::AadlMa));
    }

    #[test]
    fn output_dir_precedence() {
        let mut cfg = ExperimentConfig::from_toml(SYNTHETIC).unwrap();
        cfg.output_dir = Some("from_cfg".into());
        assert_eq!(cfg.resolve_output_dir(Some(Path::new("cli"))), PathBuf::from("cli"));
        assert_eq!(cfg.resolve_output_dir(None), PathBuf::from("from_cfg"));
    }
}
