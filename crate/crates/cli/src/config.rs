//! Run configuration: an optional JSON file overridden field by field by
//! command-line flags.

use std::path::{Path, PathBuf};

use diskopt_core::Tolerances;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config file {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("`{flag}` expects {expected} comma-separated numbers, got `{value}`")]
    Vector { flag: &'static str, expected: usize, value: String },
    #[error("missing required setting `{0}`")]
    Missing(&'static str),
    #[error("invalid setting `{name}`: {reason}")]
    Invalid { name: &'static str, reason: String },
}

/// Every field optional: the on-disk shape and the flag overrides share it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialConfig {
    pub system: Option<String>,
    pub x0: Option<[f64; 4]>,
    pub p0: Option<[f64; 4]>,
    pub p0cost: Option<f64>,
    pub xf: Option<[f64; 4]>,
    pub tf: Option<f64>,
    pub horizon: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub tolerances: Option<serde_json::Value>,
    pub tol_int: Option<f64>,
    pub tol_switch: Option<f64>,
    pub n: Option<usize>,
    pub half_width: Option<f64>,
    pub direction: Option<[f64; 4]>,
    pub axes: Option<[usize; 2]>,
    pub global_optimality: Option<bool>,
}

impl PartialConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    /// Fields set in `over` replace those in `self`.
    pub fn merge(self, over: PartialConfig) -> PartialConfig {
        PartialConfig {
            system: over.system.or(self.system),
            x0: over.x0.or(self.x0),
            p0: over.p0.or(self.p0),
            p0cost: over.p0cost.or(self.p0cost),
            xf: over.xf.or(self.xf),
            tf: over.tf.or(self.tf),
            horizon: over.horizon.or(self.horizon),
            out_dir: over.out_dir.or(self.out_dir),
            tolerances: over.tolerances.or(self.tolerances),
            tol_int: over.tol_int.or(self.tol_int),
            tol_switch: over.tol_switch.or(self.tol_switch),
            n: over.n.or(self.n),
            half_width: over.half_width.or(self.half_width),
            direction: over.direction.or(self.direction),
            axes: over.axes.or(self.axes),
            global_optimality: over.global_optimality.or(self.global_optimality),
        }
    }
}

/// Fully resolved settings; serialized into every output file.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub system: String,
    pub x0: [f64; 4],
    pub p0: Option<[f64; 4]>,
    pub p0cost: f64,
    pub xf: Option<[f64; 4]>,
    pub tf: Option<f64>,
    pub horizon: f64,
    pub out_dir: PathBuf,
    pub n: Option<usize>,
    pub half_width: Option<f64>,
    pub direction: Option<[f64; 4]>,
    pub axes: Option<[usize; 2]>,
    pub global_optimality: bool,
    pub tolerances: Tolerances,
}

/// Subcommand-dependent defaults of the grid parameters.
#[derive(Debug, Clone, Copy)]
pub struct GridDefaults {
    pub n: Option<usize>,
    pub half_width: Option<f64>,
    pub direction: Option<[f64; 4]>,
    pub axes: Option<[usize; 2]>,
}

impl RunConfig {
    pub fn resolve(command: &str, cfg: PartialConfig, grid: GridDefaults) -> Result<Self, ConfigError> {
        let system = cfg.system.ok_or(ConfigError::Missing("system"))?;
        let mut tolerances = match cfg.tolerances {
            Some(v) => serde_json::from_value::<Tolerances>(v)
                .map_err(|e| ConfigError::Invalid { name: "tolerances", reason: e.to_string() })?,
            None => Tolerances::default(),
        };
        if let Some(t) = cfg.tol_int {
            tolerances.tol_int = t;
        }
        if let Some(t) = cfg.tol_switch {
            tolerances.tol_switch_rho = t;
        }
        tolerances.validate().map_err(|reason| ConfigError::Invalid { name: "tolerances", reason })?;
        let horizon = cfg.horizon.unwrap_or(5.0);
        positive("horizon", horizon)?;
        if let Some(tf) = cfg.tf {
            if !(tf.is_finite() && tf >= 0.0) {
                return Err(ConfigError::Invalid { name: "tf", reason: format!("{tf} is not a non-negative number") });
            }
        }
        let p0cost = cfg.p0cost.unwrap_or(-1.0);
        if !(p0cost == -1.0 || p0cost == 0.0) {
            return Err(ConfigError::Invalid { name: "p0cost", reason: "must be -1 (normal) or 0 (abnormal)".into() });
        }
        let half_width = cfg.half_width.or(grid.half_width);
        if let Some(w) = half_width {
            positive("half_width", w)?;
        }
        let n = cfg.n.or(grid.n);
        if n == Some(0) {
            return Err(ConfigError::Invalid { name: "n", reason: "must be at least 1".into() });
        }
        let axes = cfg.axes.or(grid.axes);
        if let Some([a, b]) = axes {
            if a == b || !(1..=4).contains(&a) || !(1..=4).contains(&b) {
                return Err(ConfigError::Invalid { name: "axes", reason: "two distinct indices in 1..=4".into() });
            }
        }
        let direction = cfg.direction.or(grid.direction);
        if let Some(d) = direction {
            if d.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                return Err(ConfigError::Invalid { name: "direction", reason: "zero vector".into() });
            }
        }
        Ok(RunConfig {
            command: command.to_string(),
            system,
            x0: cfg.x0.unwrap_or([0.0; 4]),
            p0: cfg.p0,
            p0cost,
            xf: cfg.xf,
            tf: cfg.tf,
            horizon,
            out_dir: cfg.out_dir.unwrap_or_else(|| PathBuf::from(".")),
            n,
            half_width,
            direction,
            axes,
            global_optimality: cfg.global_optimality.unwrap_or(false),
            tolerances,
        })
    }

    pub fn require_p0(&self) -> Result<[f64; 4], ConfigError> {
        self.p0.ok_or(ConfigError::Missing("p0"))
    }

    pub fn require_tf(&self) -> Result<f64, ConfigError> {
        self.tf.ok_or(ConfigError::Missing("tf"))
    }

    pub fn require_xf(&self) -> Result<[f64; 4], ConfigError> {
        self.xf.ok_or(ConfigError::Missing("xf"))
    }

    /// Single-line JSON used as the reproducibility header.
    pub fn header(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn positive(name: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::Invalid { name, reason: format!("{v} is not a positive number") })
    }
}

/// Parses `a,b,c,d`.
pub fn parse_vector<const N: usize, T: std::str::FromStr>(flag: &'static str, s: &str) -> Result<[T; N], ConfigError> {
    let err = || ConfigError::Vector { flag, expected: N, value: s.to_string() };
    let parts: Vec<T> = s.split(',').map(|v| v.trim().parse::<T>().map_err(|_| err())).collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| err())
}
