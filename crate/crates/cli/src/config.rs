//! Experiment configuration: a TOML file merged with command-line flags
//! (flags win), expanded into sweep cells.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use selfcond_core::data::{make_grid, make_ring, MixtureSpec, GRID_VARIANCE};
use selfcond_core::TrainConfig;

use crate::error::{CliError, CliResult};

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "SELFCOND_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    Ring,
    Grid,
}

impl Dataset {
    pub fn default_variance(self) -> f64 {
        match self {
            Dataset::Ring => make_ring().variance,
            Dataset::Grid => GRID_VARIANCE,
        }
    }

    pub fn mixture(self, variance: f64) -> selfcond_core::Result<MixtureSpec> {
        match self {
            Dataset::Ring => MixtureSpec::new("ring", make_ring().means, variance),
            Dataset::Grid => make_grid(variance),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Ring => "ring",
            Dataset::Grid => "grid",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Selfcond,
    SelfcondOnline,
    Unconditional,
    RandomLabels,
}

impl Method {
    /// Sets the method's switches on a base config.
    pub fn apply(self, train: &mut TrainConfig) {
        train.online = self == Method::SelfcondOnline;
        train.unconditional = self == Method::Unconditional;
        train.random_labels = self == Method::RandomLabels;
        if train.unconditional {
            train.k = 1;
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Selfcond => "selfcond",
            Method::SelfcondOnline => "selfcond-online",
            Method::Unconditional => "unconditional",
            Method::RandomLabels => "random-labels",
        })
    }
}

/// Contents of a `--config` file. Sweep axes are lists; `[train]` holds any
/// trainer field.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<Dataset>,
    pub method: Option<Method>,
    pub k: Option<Vec<usize>>,
    pub variance: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub export_data: Option<bool>,
    pub train: Option<TrainConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Command-line values; `None` means "not given".
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub dataset: Option<Dataset>,
    pub method: Option<Method>,
    pub k: Option<Vec<usize>>,
    pub variance: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub force: bool,
    pub export_data: bool,
    pub infinite_data: bool,
    pub iterations: Option<u64>,
    pub recluster_every: Option<u64>,
    pub online_start: Option<u64>,
    pub eval_every: Option<u64>,
    pub eval_samples: Option<usize>,
    pub train_size: Option<usize>,
    pub no_warm_start: bool,
    pub no_matching: bool,
}

/// Fully resolved sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub method: Method,
    pub ks: Vec<usize>,
    pub variances: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub jobs: usize,
    pub force: bool,
    pub export_data: bool,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn resolve(file: FileConfig, flags: Overrides, env_out: Option<PathBuf>) -> CliResult<Self> {
        let dataset = flags.dataset.or(file.dataset).unwrap_or(Dataset::Grid);
        let method = flags.method.or(file.method).unwrap_or(Method::Selfcond);
        let mut train = file.train.unwrap_or_default();
        if let Some(v) = flags.iterations {
            train.iterations = Some(v);
        }
        if let Some(v) = flags.recluster_every {
            train.recluster_every = v;
        }
        if let Some(v) = flags.online_start {
            train.online_start = v;
        }
        if let Some(v) = flags.eval_every {
            train.eval_every = v;
        }
        if let Some(v) = flags.eval_samples {
            train.eval_samples = v;
        }
        if let Some(v) = flags.train_size {
            train.train_size = v;
            train.subset_size = train.subset_size.min(v);
        }
        train.infinite_data |= flags.infinite_data;
        train.no_warm_start |= flags.no_warm_start;
        train.no_matching |= flags.no_matching;

        let ks = match method {
            Method::Unconditional => vec![1],
            _ => flags.k.or(file.k).unwrap_or_else(|| vec![train.k]),
        };
        let variances = flags
            .variance
            .or(file.variance)
            .unwrap_or_else(|| vec![dataset.default_variance()]);
        let seeds = flags.seeds.or(file.seeds).unwrap_or_else(|| vec![train.seed]);
        let out = flags
            .out
            .or(file.out)
            .or(env_out)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        let jobs = flags.jobs.or(file.jobs).unwrap_or(1);

        let cfg = Self {
            dataset,
            method,
            ks,
            variances,
            seeds,
            out,
            jobs,
            force: flags.force,
            export_data: flags.export_data || file.export_data.unwrap_or(false),
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.ks.is_empty() {
            return usage("k: at least one value required".into());
        }
        if let Some(i) = self.ks.iter().position(|&k| k == 0) {
            return usage(format!("k[{i}]: must be at least 1"));
        }
        if self.variances.is_empty() {
            return usage("variance: at least one value required".into());
        }
        if let Some(i) = self.variances.iter().position(|v| v.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !v.is_finite()) {
            return usage(format!("variance[{i}]: must be positive and finite"));
        }
        if self.seeds.is_empty() {
            return usage("seeds: at least one seed required".into());
        }
        if self.jobs == 0 {
            return usage("jobs: must be at least 1".into());
        }
        for cell in self.cells() {
            if let Err(e) = cell.train.validate() {
                return usage(format!("train ({}): {e}", cell.id));
            }
        }
        Ok(())
    }

    /// Cross product of the sweep axes and seeds, in a fixed order.
    pub fn cells(&self) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for &k in &self.ks {
            for &variance in &self.variances {
                for &seed in &self.seeds {
                    let mut train = self.train.clone();
                    train.k = k;
                    train.seed = seed;
                    self.method.apply(&mut train);
                    out.push(CellSpec {
                        id: cell_id(self.method, self.dataset, train.k, variance, seed),
                        method: self.method,
                        dataset: self.dataset,
                        variance,
                        seed,
                        export_data: self.export_data,
                        train,
                    });
                }
            }
        }
        out
    }
}

pub fn cell_id(method: Method, dataset: Dataset, k: usize, variance: f64, seed: u64) -> String {
    format!("{method}_{dataset}_k{k}_var{variance}_seed{seed}")
}

/// One sweep cell; serialized as the cell's `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub id: String,
    pub method: Method,
    pub dataset: Dataset,
    pub variance: f64,
    pub seed: u64,
    #[serde(default)]
    pub export_data: bool,
    pub train: TrainConfig,
}

impl CellSpec {
    pub fn mixture(&self) -> selfcond_core::Result<MixtureSpec> {
        self.dataset.mixture(self.variance)
    }
}
