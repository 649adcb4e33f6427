//! Covariate files and run configuration.
//!
//! CSV input is deliberately strict: comma separated, `.` decimals, and a
//! header only when the caller says so. No sniffing, so the same bytes
//! always give the same matrix.

use std::fs;
use std::path::{Path, PathBuf};

use allocrisk::allocator::OptimizerConfig;
use allocrisk::model::{CovariateMatrix, NigPrior};
use allocrisk::PriorSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Reads an `n x p` covariate matrix; rows keep file order.
pub fn load_covariates(path: &Path, has_header: bool) -> Result<CovariateMatrix, CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if let Some(first) = rows.first() {
            if record.len() != first.len() {
                return Err(CliError::RaggedRows {
                    path: path.to_path_buf(),
                    line,
                    expected: first.len(),
                    found: record.len(),
                });
            }
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(CliError::Parse {
                    path: path.to_path_buf(),
                    line,
                    column: j + 1,
                    value: cell.to_string(),
                }),
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(CovariateMatrix::from_rows(&rows)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Json,
    CsvSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(alias = "prior_spec")]
    pub prior: PriorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_sigma2_override: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub output_format: OutputFormat,
}

impl RunConfig {
    pub fn new(prior: PriorSpec) -> Self {
        Self {
            prior,
            e_sigma2_override: None,
            optimizer: OptimizerConfig::default(),
            output_format: OutputFormat::Json,
        }
    }

    /// The prior for covariates of dimension `p`, and the `E[sigma^2]` to
    /// scale risks by.
    pub fn resolve(&self, p: usize) -> Result<(NigPrior, f64), CliError> {
        let prior = self.prior.to_prior(p)?;
        let e = match self.e_sigma2_override {
            Some(e) if e.is_finite() && e > 0.0 => e,
            Some(e) => return Err(CliError::Config(format!("e_sigma2_override must be positive, got {e}"))),
            None => prior.expected_sigma2(),
        };
        Ok((prior, e))
    }
}

/// Where a run's configuration came from, before command-line overrides.
pub fn base_config(config: Option<&PathBuf>, prior: Option<&PathBuf>, flat: bool) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(path) => Some(read_json::<RunConfig>(path)?),
        None => None,
    };
    let spec = if flat {
        Some(PriorSpec::flat())
    } else {
        prior.map(|p| read_json::<PriorSpec>(p)).transpose()?
    };
    match (&mut cfg, spec) {
        (Some(c), Some(s)) => c.prior = s,
        (None, Some(s)) => cfg = Some(RunConfig::new(s)),
        (Some(_), None) => {}
        (None, None) => return Err(CliError::Config("no prior given; pass --flat, --prior or --config".into())),
    }
    Ok(cfg.expect("set above"))
}
