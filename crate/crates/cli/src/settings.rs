//! Resolved per-command settings. Values come from the defaults, then the
//! optional JSON config file, then command-line flags.

use std::path::{Path, PathBuf};

use dnsspp::features::LayerSpec;
use dnsspp::simulation::DatasetKind;
use dnsspp::training::{FitConfig, GradientMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub kind: DatasetKind,
    /// First seed. Without `shared_latent`, seeds `seed .. seed + seeds`
    /// each draw their own latent function.
    pub seed: u64,
    pub seeds: usize,
    /// Draw one latent function from `seed` and thin `seeds` event sets from it.
    pub shared_latent: bool,
    pub out_dir: PathBuf,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Stationary,
            seed: 0,
            seeds: 10,
            shared_latent: false,
            out_dir: default_out_dir(),
        }
    }
}

impl SimulateSettings {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds == 0 {
            return Err(CliError::Usage("--seeds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub events: Option<PathBuf>,
    /// Per-axis `[lo, hi]`; read from a `manifest.json` next to the events
    /// file when absent.
    pub window: Option<Vec<[f64; 2]>>,
    pub layers: Vec<usize>,
    pub tie: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub quadrature_order: Option<usize>,
    pub alpha_init: f64,
    pub gradient: GradientMode,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for FitSettings {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            events: None,
            window: None,
            layers: f.layers.iter().map(|l| l.width).collect(),
            tie: false,
            epochs: f.epochs,
            learning_rate: f.learning_rate,
            tol: f.tol,
            max_iter: f.max_iter,
            quadrature_order: f.quadrature_order,
            alpha_init: f.alpha_init,
            gradient: f.gradient,
            seed: f.seed,
            out_dir: default_out_dir(),
        }
    }
}

impl FitSettings {
    pub fn fit_config(&self) -> Result<FitConfig, CliError> {
        let cfg = FitConfig {
            layers: self
                .layers
                .iter()
                .map(|&w| LayerSpec {
                    width: w,
                    tie: self.tie,
                })
                .collect(),
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            tol: self.tol,
            max_iter: self.max_iter,
            quadrature_order: self.quadrature_order,
            seed: self.seed,
            alpha_init: self.alpha_init,
            gradient: self.gradient,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSettings {
    pub model: Option<PathBuf>,
    /// Nodes per axis; 1000 in one dimension and 128 otherwise when unset.
    pub resolution: Option<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self {
            model: None,
            resolution: None,
            seed: 0,
            out_dir: default_out_dir(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub model: Option<PathBuf>,
    pub test: Vec<PathBuf>,
    pub truth: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            model: None,
            test: Vec::new(),
            truth: None,
            seed: 0,
            out_dir: default_out_dir(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSettings {
    pub kind: DatasetKind,
    /// Latent-function seed; also the initialization seed of every fit.
    pub seed: u64,
    pub datasets: usize,
    pub train_sets: Vec<usize>,
    pub models: Vec<String>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub resolution: usize,
    pub threads: usize,
    /// Train on the first dataset only.
    pub dry_run: bool,
    pub out_dir: PathBuf,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        let b = dnsspp::benchmark::BenchmarkConfig::default();
        Self {
            kind: b.kind,
            seed: b.latent_seed,
            datasets: b.datasets,
            train_sets: Vec::new(),
            models: vec![
                "NSSPP".into(),
                "DNSSPP-[50,30]".into(),
                "DNSSPP-[100,50]".into(),
                "DNSSPP-[30,50,30]".into(),
                "DSSPP-[50,30]".into(),
                "DSSPP-[100,50]".into(),
                "DSSPP-[30,50,30]".into(),
                "SSPP".into(),
            ],
            epochs: b.fit.epochs,
            learning_rate: b.fit.learning_rate,
            resolution: b.resolution,
            threads: 1,
            dry_run: false,
            out_dir: default_out_dir(),
        }
    }
}

impl BenchmarkSettings {
    pub fn benchmark_config(&self) -> Result<dnsspp::benchmark::BenchmarkConfig, CliError> {
        for m in &self.models {
            dnsspp::benchmark::BenchModel::parse(m).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        let fit = FitConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..FitConfig::default()
        };
        fit.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let train_sets = if self.dry_run {
            vec![0]
        } else {
            self.train_sets.clone()
        };
        Ok(dnsspp::benchmark::BenchmarkConfig {
            kind: self.kind,
            latent_seed: self.seed,
            datasets: self.datasets,
            train_sets,
            models: self.models.clone(),
            fit,
            resolution: self.resolution,
            threads: self.threads,
        })
    }
}
