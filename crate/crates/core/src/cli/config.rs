//! Run configuration: one JSON document per run, validated before any computation.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::allocator::PreferenceSpec;
use crate::backtest::{BacktestSpec, EmOptions};
use crate::error::{Error, Result};
use crate::estimation::Criterion;
use crate::io::{read_returns_csv, ReturnsKind};
use crate::market::{HmmModel, PricePath, DEFAULT_DT};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Step for returns files; price paths carry their own grid.
    pub dt: Option<f64>,
    pub out: Option<PathBuf>,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: Option<String>,
    pub simulate: Option<SimulateConfig>,
    pub fit: Option<FitConfig>,
    pub filter: Option<FilterConfig>,
    pub allocate: Option<AllocateConfig>,
    pub backtest: Option<BacktestConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `t, asset_1.., [state]` log prices, as written by `simulate`.
    #[default]
    PricePath,
    /// `date, asset_1..` per-step returns.
    Returns,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub file: PathBuf,
    #[serde(default)]
    pub format: DataFormat,
    #[serde(default)]
    pub returns_kind: ReturnsKind,
}

/// A model given inline or by file.
#[derive(Debug, Clone, Copy)]
pub struct ModelRef<'a> {
    pub model: Option<&'a HmmModel>,
    pub model_file: Option<&'a Path>,
}

macro_rules! model_ref {
    ($($t:ty),*) => {$(
        impl $t {
            pub fn model_ref(&self) -> ModelRef<'_> {
                ModelRef { model: self.model.as_ref(), model_file: self.model_file.as_deref() }
            }
        }
    )*};
}

model_ref!(SimulateConfig, FilterConfig, AllocateConfig);

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: Option<HmmModel>,
    pub model_file: Option<PathBuf>,
    pub horizon_steps: usize,
}

fn default_candidates() -> Vec<usize> {
    vec![1, 2, 3, 4, 5]
}

fn default_criteria() -> Vec<Criterion> {
    Criterion::ALL.to_vec()
}

fn default_select_by() -> Criterion {
    Criterion::Icl
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub data: DataConfig,
    #[serde(default = "default_candidates")]
    pub candidate_states: Vec<usize>,
    #[serde(default = "default_criteria")]
    pub criteria: Vec<Criterion>,
    #[serde(default = "default_select_by")]
    pub select_by: Criterion,
    #[serde(default)]
    pub em: EmOptions,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub model: Option<HmmModel>,
    pub model_file: Option<PathBuf>,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocateConfig {
    pub model: Option<HmmModel>,
    pub model_file: Option<PathBuf>,
    /// Observations to filter before allocating; the model prior is used otherwise.
    pub data: Option<DataConfig>,
    /// Explicit posterior, overriding both the prior and any filtered data.
    pub posterior: Option<Vec<f64>>,
    #[serde(default)]
    pub prefs: PreferenceSpec,
    /// Index into per-step preference schedules.
    #[serde(default)]
    pub step: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub spec: BacktestSpec,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Input(e.to_string()))?;
        if let Some(dt) = config.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Input(format!("dt must be positive, got {dt}")));
            }
        }
        Ok(config)
    }
}

/// Observations loaded from a data file.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub path: PricePath,
    /// Date label of each increment, when the source had one.
    pub dates: Option<Vec<String>>,
    pub dt: f64,
}

fn resolve(base: &Path, file: &Path) -> PathBuf {
    if file.is_absolute() {
        file.to_path_buf()
    } else {
        base.join(file)
    }
}

impl DataConfig {
    /// Load relative to `base`; `dt` applies to returns files and must match a path's own grid.
    pub fn load(&self, base: &Path, dt: Option<f64>) -> Result<Dataset> {
        let file = resolve(base, &self.file);
        let open = || std::fs::File::open(&file).map_err(|e| Error::Input(format!("cannot open {}: {e}", file.display())));
        let tag = |e: Error| match e {
            Error::Input(m) => Error::Input(format!("{}: {m}", file.display())),
            Error::Csv(c) => Error::Input(format!("{}: {c}", file.display())),
            other => other,
        };
        match self.format {
            DataFormat::PricePath => {
                let path = PricePath::read_csv(open()?).map_err(tag)?;
                let own = path.dt().ok_or_else(|| Error::Input(format!("{}: need at least two rows", file.display())))?;
                if let Some(dt) = dt {
                    if ((own - dt) / dt).abs() > 1e-9 {
                        return Err(Error::Input(format!("config dt {dt} differs from the path's step {own}")));
                    }
                }
                Ok(Dataset { path, dates: None, dt: own })
            }
            DataFormat::Returns => {
                let dt = dt.unwrap_or(DEFAULT_DT);
                let table = read_returns_csv(open()?, self.returns_kind).map_err(tag)?;
                if table.is_empty() {
                    return Err(Error::Input(format!("{}: no data rows", file.display())));
                }
                let path = PricePath::from_log_returns(&table.log_returns, dt)?;
                Ok(Dataset { path, dates: Some(table.dates), dt })
            }
        }
    }
}

impl ModelRef<'_> {
    pub fn load(&self, base: &Path) -> Result<HmmModel> {
        match (self.model, self.model_file) {
            (Some(m), None) => Ok(m.clone()),
            (None, Some(f)) => {
                let file = resolve(base, f);
                let text = std::fs::read_to_string(&file)
                    .map_err(|e| Error::Input(format!("cannot read model {}: {e}", file.display())))?;
                HmmModel::from_json(&text).map_err(|e| Error::Input(format!("{}: {e}", file.display())))
            }
            (Some(_), Some(_)) => Err(Error::Input("give either `model` or `model_file`, not both".into())),
            (None, None) => Err(Error::Input("missing field `model` (or `model_file`)".into())),
        }
    }
}
