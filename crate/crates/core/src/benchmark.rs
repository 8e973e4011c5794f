//! Synthetic benchmark: one latent intensity, several thinned event sets,
//! each set used in turn for training while the others serve as test sets.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::LayerSpec;
use crate::predict::{expected_test_loglik, intensity_on, rmse};
use crate::simulation::{synth_protocol, DatasetKind};
use crate::training::{fit, FitConfig};

/// A named layer configuration. Names follow the `NSSPP`, `SSPP`,
/// `DNSSPP-[w1,w2,...]` and `DSSPP-[w1,w2,...]` convention; the `S` prefix
/// without `N` ties every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchModel {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

pub const DEFAULT_WIDTH: usize = 50;

impl BenchModel {
    pub fn parse(name: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("unrecognized model name '{name}'"));
        let (prefix, widths) = match name.split_once('-') {
            Some((p, rest)) => {
                let inner = rest
                    .strip_prefix('[')
                    .and_then(|r| r.strip_suffix(']'))
                    .ok_or_else(bad)?;
                let widths = inner
                    .split(',')
                    .map(|w| w.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                (p, widths)
            }
            None => (name, vec![DEFAULT_WIDTH]),
        };
        if widths.contains(&0) {
            return Err(bad());
        }
        let tie = match prefix {
            "NSSPP" | "DNSSPP" => false,
            "SSPP" | "DSSPP" => true,
            _ => return Err(bad()),
        };
        let layers = widths
            .into_iter()
            .map(|w| LayerSpec { width: w, tie })
            .collect();
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub kind: DatasetKind,
    /// Seed of the latent function; event sets derive their seeds from it.
    pub latent_seed: u64,
    pub datasets: usize,
    /// Indices used as training sets; all of them when empty.
    pub train_sets: Vec<usize>,
    pub models: Vec<String>,
    /// Settings shared by every model; `layers` is replaced per model.
    pub fit: FitConfig,
    pub resolution: usize,
    pub threads: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Stationary,
            latent_seed: 0,
            datasets: 10,
            train_sets: Vec::new(),
            models: vec!["NSSPP".into()],
            fit: FitConfig::default(),
            resolution: crate::simulation::TRUTH_NODES_1D,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: String,
    pub train_set: usize,
    pub n_train: usize,
    /// Mean over the held-out sets.
    pub l_test: f64,
    pub rmse: f64,
    pub log_marginal: f64,
    pub runtime_seconds: f64,
}

/// A training run whose fit returned an error, typically a hyperparameter
/// step that left the valid parameter range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub model: String,
    pub train_set: usize,
    pub epoch: Option<usize>,
    pub message: String,
}

/// Statistics over the successful runs of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub runs: usize,
    pub failures: usize,
    pub l_test_mean: f64,
    pub l_test_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub runtime_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub truth_integral: f64,
    pub event_counts: Vec<usize>,
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    /// Models with at least one successful run.
    pub summaries: Vec<ModelSummary>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl BenchmarkReport {
    pub fn summary(&self, model: &str) -> Option<&ModelSummary> {
        self.summaries.iter().find(|s| s.model == model)
    }

    pub fn runs_for<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.model == model)
    }

    /// Plain-text table: model, L_test mean (std), RMSE mean (std), seconds.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} data, latent seed {}, {} datasets",
            self.config.kind.name(),
            self.config.latent_seed,
            self.config.datasets
        );
        let _ = writeln!(
            out,
            "{:<22} {:>22} {:>20} {:>10} {:>8}",
            "model", "L_test", "RMSE", "time (s)", "failed"
        );
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:<22} {:>22} {:>20} {:>10.2} {:>8}",
                s.model,
                format!("{:.2}(± {:.2})", s.l_test_mean, s.l_test_std),
                format!("{:.3}(± {:.3})", s.rmse_mean, s.rmse_std),
                s.runtime_mean,
                s.failures
            );
        }
        for f in &self.failures {
            let _ = writeln!(
                out,
                "failed: {} on set {}: {}",
                f.model, f.train_set, f.message
            );
        }
        out
    }
}

pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if config.datasets < 2 {
        return Err(Error::Validation(
            "the benchmark needs at least two datasets".into(),
        ));
    }
    if config.models.is_empty() {
        return Err(Error::Validation("no models requested".into()));
    }
    let models = config
        .models
        .iter()
        .map(|m| BenchModel::parse(m))
        .collect::<Result<Vec<_>>>()?;
    let train_sets: Vec<usize> = if config.train_sets.is_empty() {
        (0..config.datasets).collect()
    } else {
        config.train_sets.clone()
    };
    if let Some(&j) = train_sets.iter().find(|&&j| j >= config.datasets) {
        return Err(Error::Validation(format!(
            "train set {j} out of range for {} datasets",
            config.datasets
        )));
    }
    let (truth, sets) = synth_protocol(config.kind, config.latent_seed, config.datasets)?;
    let truth_lattice =
        crate::lattice::Lattice::uniform(truth.window().clone(), config.resolution)?;
    let truth_grid = if truth_lattice == truth.lattice {
        truth.as_grid()
    } else {
        let nodes = truth_lattice.nodes();
        let d = truth_lattice.dim();
        let mean = nodes.chunks(d).map(|x| truth.intensity_at(x)).collect();
        crate::predict::IntensityGrid::new(
            truth_lattice.clone(),
            mean,
            vec![0.0; truth_lattice.len()],
        )?
    };

    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| train_sets.iter().map(move |&j| (m, j)))
        .collect();
    // Outer `Err` aborts the benchmark; an inner `Err` is a failed fit.
    let run_job = |&(m, j): &(usize, usize)| -> Result<Result<RunResult>> {
        let model = &models[m];
        let cfg = FitConfig {
            layers: model.layers.clone(),
            ..config.fit.clone()
        };
        let start = Instant::now();
        let fitted = match fit(&sets[j], &cfg) {
            Ok(f) => f,
            Err(e @ Error::Fit { .. }) => return Ok(Err(e)),
            Err(e) => return Err(e),
        };
        let runtime_seconds = start.elapsed().as_secs_f64();
        let mut ls = Vec::with_capacity(sets.len() - 1);
        for (k, test) in sets.iter().enumerate() {
            if k != j {
                ls.push(expected_test_loglik(&fitted, test)?);
            }
        }
        let grid = intensity_on(&fitted, truth_lattice.clone())?;
        Ok(Ok(RunResult {
            model: model.name.clone(),
            train_set: j,
            n_train: sets[j].len(),
            l_test: mean_std(&ls).0,
            rmse: rmse(&grid, &truth_grid)?,
            log_marginal: fitted.log_marginal(),
            runtime_seconds,
        }))
    };

    let threads = config.threads.max(1).min(jobs.len());
    let outcomes: Vec<Result<RunResult>> = if threads == 1 {
        jobs.iter().map(run_job).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<Result<RunResult>>>> =
            (0..jobs.len()).map(|_| None).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = run_job(&jobs[i]);
                    results
                        .lock()
                        .expect("no worker panics while holding the lock")[i] = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|r| r.expect("every job ran"))
            .collect::<Result<_>>()?
    };
    let mut runs = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (outcome, &(m, j)) in outcomes.into_iter().zip(&jobs) {
        match outcome {
            Ok(r) => runs.push(r),
            Err(e) => failures.push(RunFailure {
                model: models[m].name.clone(),
                train_set: j,
                epoch: match &e {
                    Error::Fit { epoch, .. } => Some(*epoch),
                    _ => None,
                },
                message: e.to_string(),
            }),
        }
    }

    let summaries = models
        .iter()
        .filter_map(|m| {
            let rs: Vec<&RunResult> = runs.iter().filter(|r| r.model == m.name).collect();
            if rs.is_empty() {
                return None;
            }
            let (l_test_mean, l_test_std) =
                mean_std(&rs.iter().map(|r| r.l_test).collect::<Vec<_>>());
            let (rmse_mean, rmse_std) = mean_std(&rs.iter().map(|r| r.rmse).collect::<Vec<_>>());
            let runtime_mean =
                mean_std(&rs.iter().map(|r| r.runtime_seconds).collect::<Vec<_>>()).0;
            Some(ModelSummary {
                model: m.name.clone(),
                runs: rs.len(),
                failures: failures.iter().filter(|f| f.model == m.name).count(),
                l_test_mean,
                l_test_std,
                rmse_mean,
                rmse_std,
                runtime_mean,
            })
        })
        .collect();

    Ok(BenchmarkReport {
        config: config.clone(),
        truth_integral: truth.integral(),
        event_counts: sets.iter().map(|s| s.len()).collect(),
        runs,
        failures,
        summaries,
    })
}
