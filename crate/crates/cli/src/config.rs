//! Run configuration: one TOML file fully determines a run.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::DVector;
use onlinepm::backtest::HyperParams;
use onlinepm::data::FactorConfig;
use onlinepm::evaluate::{CalibrationSpec, GridSpec, DEFAULT_BLOCKS};
use onlinepm::pricing::ActiveModel;
use onlinepm::synth::{GeneratorSpec, Innovations};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub parallel: Option<usize>,
    pub data: Option<DataConfig>,
    pub synthetic: Option<SyntheticConfig>,
    pub hyper: HyperParams,
    pub calibration: CalibrationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            parallel: None,
            data: None,
            synthetic: None,
            hyper: HyperParams::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

/// Input files in the panel CSV schema. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub prices: PathBuf,
    pub characteristics: PathBuf,
    pub rf: PathBuf,
    /// Precomputed factor returns (`date,<factor>...`, one row per rf date).
    /// SMB and HML are built from the panel when absent.
    #[serde(default)]
    pub factors: Option<PathBuf>,
    #[serde(default)]
    pub factor_construction: FactorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_assets: usize,
    pub n_periods: usize,
    /// Weekly payoff to the BVTP score.
    pub payoff: f64,
    pub intercept_payoff: f64,
    pub payoff_half_life: Option<f64>,
    pub factor_premium: f64,
    pub factor_vol: f64,
    pub idio_vol: f64,
    pub char_persistence: f64,
    pub rf: f64,
    pub missing_prob: f64,
    pub innovations: Innovations,
    pub start_date: Option<NaiveDate>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let g = GeneratorSpec::new(1, 2, 0);
        Self {
            n_assets: 100,
            n_periods: 600,
            payoff: g.planted_payoffs[1],
            intercept_payoff: g.planted_payoffs[0],
            payoff_half_life: None,
            factor_premium: g.factor_premia[0],
            factor_vol: g.factor_vol[0],
            idio_vol: g.idio_vol[0],
            char_persistence: g.char_persistence,
            rf: g.rf,
            missing_prob: g.missing_prob,
            innovations: Innovations::Gaussian,
            start_date: None,
        }
    }
}

impl SyntheticConfig {
    pub fn generator(&self, seed: u64) -> GeneratorSpec {
        let mut g = GeneratorSpec::new(self.n_assets, self.n_periods, seed);
        let p = g.n_factors();
        g.planted_payoffs = DVector::from_vec(vec![self.intercept_payoff, self.payoff]);
        g.payoff_half_life = self.payoff_half_life;
        g.factor_premia = DVector::from_element(p, self.factor_premium);
        g.factor_vol = DVector::from_element(p, self.factor_vol);
        g.idio_vol = DVector::from_element(self.n_assets, self.idio_vol);
        g.char_persistence = self.char_persistence;
        g.rf = self.rf;
        g.missing_prob = self.missing_prob;
        g.innovations = self.innovations;
        if let Some(d) = self.start_date {
            g.start_date = d;
        }
        g
    }
}

/// Walk-forward calibration; the grid's fixed settings come from `hyper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub is_fraction: f64,
    pub n_folds: usize,
    pub min_train: Option<usize>,
    pub pbo_blocks: usize,
    pub grid: GridAxes,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let s = CalibrationSpec::default();
        Self {
            is_fraction: s.is_fraction,
            n_folds: s.n_folds,
            min_train: s.min_train,
            pbo_blocks: DEFAULT_BLOCKS,
            grid: GridAxes::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub active_models: Vec<ActiveModel>,
    pub lambda_s: Vec<f64>,
    pub lambda_a: Vec<f64>,
    pub kappa_s: Vec<f64>,
    pub kappa_a: Vec<f64>,
    pub gamma_s: Vec<f64>,
    pub gamma_a: Vec<f64>,
}

impl Default for GridAxes {
    fn default() -> Self {
        let g = GridSpec::default();
        Self {
            active_models: g.active_models,
            lambda_s: g.lambda_s,
            lambda_a: g.lambda_a,
            kappa_s: g.kappa_s,
            kappa_a: g.kappa_a,
            gamma_s: g.gamma_s,
            gamma_a: g.gamma_a,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let Some(d) = cfg.data.as_mut() {
            let base = path.parent().unwrap_or(Path::new(""));
            for p in [&mut d.prices, &mut d.characteristics, &mut d.rf] {
                *p = base.join(&*p);
            }
            if let Some(f) = d.factors.as_mut() {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    pub fn calibration_spec(&self) -> CalibrationSpec {
        let c = &self.calibration;
        let a = &c.grid;
        CalibrationSpec {
            grid: GridSpec {
                base: self.hyper.clone(),
                active_models: a.active_models.clone(),
                lambda_s: a.lambda_s.clone(),
                lambda_a: a.lambda_a.clone(),
                kappa_s: a.kappa_s.clone(),
                kappa_a: a.kappa_a.clone(),
                gamma_s: a.gamma_s.clone(),
                gamma_a: a.gamma_a.clone(),
            },
            is_fraction: c.is_fraction,
            n_folds: c.n_folds,
            min_train: c.min_train,
            pbo_blocks: c.pbo_blocks,
        }
    }

    /// Checks every section against its module's domain without touching data.
    pub fn validate(&self, path: &Path, needs_grid: bool) -> Result<(), CliError> {
        let field = |section: &str, e: onlinepm::Error| CliError::Config {
            path: path.to_path_buf(),
            message: format!("[{section}] {e}"),
        };
        self.hyper.validate().map_err(|e| field("hyper", e))?;
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config {
                    path: path.to_path_buf(),
                    message: "[data] and [synthetic] are mutually exclusive".into(),
                })
            }
            (None, None) => {
                return Err(CliError::Config {
                    path: path.to_path_buf(),
                    message: "one of [data] or [synthetic] is required".into(),
                })
            }
            (Some(d), None) => {
                let f = d.factor_construction;
                if !(f.size_split > 0.0 && f.size_split < 1.0) || !(f.value_quantile > 0.0 && f.value_quantile <= 0.5) {
                    return Err(CliError::Config {
                        path: path.to_path_buf(),
                        message: "[data.factor_construction] size_split must lie in (0, 1) and value_quantile in (0, 0.5]"
                            .into(),
                    });
                }
            }
            (None, Some(s)) => s.generator(self.seed).validate().map_err(|e| field("synthetic", e))?,
        }
        if self.parallel == Some(0) {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                message: "parallel must be at least 1".into(),
            });
        }
        if needs_grid {
            let spec = self.calibration_spec();
            spec.grid.validate().map_err(|e| field("calibration.grid", e))?;
            let c = &self.calibration;
            if !(c.is_fraction > 0.0 && c.is_fraction < 1.0) {
                return Err(field(
                    "calibration",
                    onlinepm::Error::InvalidParameter(format!("is_fraction {} must lie in (0, 1)", c.is_fraction)),
                ));
            }
            if c.n_folds == 0 || c.pbo_blocks < 2 || c.pbo_blocks % 2 != 0 {
                return Err(field(
                    "calibration",
                    onlinepm::Error::InvalidParameter(
                        "n_folds must be positive and pbo_blocks even and at least 2".into(),
                    ),
                ));
            }
        }
        Ok(())
    }
}
