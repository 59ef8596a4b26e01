//! Strict TOML configuration shared by all commands.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use fnbridge::basis::{build_cosine_basis, build_kernel_basis_1d, DEFAULT_DECAY_FLOOR};
use fnbridge::bayesian_learning::LrSchedule;
use fnbridge::control_net::NetArch;
use fnbridge::datasets::{QuadraticNoise, QUADRATIC_NOISE_STD};
use fnbridge::grid::GridSpec;
use fnbridge::ou_bridge::OUBridgeParams;
use fnbridge::sde::{SchemeKind, StepScheme};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Bad or missing user input; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub grid: GridCfg,
    pub process: ProcessCfg,
    #[serde(default)]
    pub train: TrainCfg,
    #[serde(default)]
    pub net: NetCfg,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeCfg>,
    #[serde(default)]
    pub eval: EvalCfg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    /// Points per axis.
    pub res: Vec<usize>,
    pub bounds: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisChoice {
    Kernel,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessCfg {
    pub sigma: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub basis_kind: BasisChoice,
    /// Kernel: leading modes kept (all above the jitter when absent).
    /// Cosine: modes per axis (required).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<usize>,
    /// RBF width of the kernel basis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default = "default_floor")]
    pub decay_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_DECAY_FLOOR
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeChoice {
    Euler,
    Exponential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema: f64,
    pub steps: usize,
    pub seed: u64,
    pub scheme: SchemeChoice,
    pub time_power: f64,
    pub denoise_final_step: bool,
    pub lr_schedule: LrSchedule,
    pub eps_frac: f64,
    pub target_clamp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub learnable_x0: bool,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            iters: 1000,
            batch: 64,
            lr: 1e-3,
            ema: 0.0,
            steps: 30,
            seed: 0,
            scheme: SchemeChoice::Euler,
            time_power: 1.0,
            denoise_final_step: false,
            lr_schedule: LrSchedule::Constant,
            eps_frac: 1e-3,
            target_clamp: 1e4,
            grad_clip: None,
            learnable_x0: false,
        }
    }
}

impl TrainCfg {
    pub fn scheme(&self) -> StepScheme {
        StepScheme {
            kind: match self.scheme {
                SchemeChoice::Euler => SchemeKind::EulerMaruyama,
                SchemeChoice::Exponential => SchemeKind::Exponential,
            },
            n_steps: self.steps,
            denoise_final_step: self.denoise_final_step,
            time_power: self.time_power,
        }
    }
}

/// Overrides of the default network for the grid's dimension.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetCfg {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_spectral_modes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fourier_features_m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fourier_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_hidden: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Quadratic,
    #[serde(rename = "density-2d")]
    Density2d,
    GpTask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCfg {
    pub dataset: DatasetKind,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticParams {
    pub n_train: usize,
    pub n_heldout: usize,
    pub noise: QuadraticNoise,
    pub noise_std: f64,
    pub data_seed: u64,
}

impl Default for QuadraticParams {
    fn default() -> Self {
        QuadraticParams {
            n_train: 25_600,
            n_heldout: 25_600,
            noise: QuadraticNoise::CurveOffset,
            noise_std: QUADRATIC_NOISE_STD,
            data_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Density2dParams {}

/// Either a task file or a task drawn from an RBF GP on the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpTaskParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    pub n_context: usize,
    pub n_target: usize,
    pub noise_var: f64,
    /// Observation noise of the likelihood; `sqrt(noise_var)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_obs: Option<f64>,
    pub learnable_sigma: bool,
    pub data_seed: u64,
}

impl Default for GpTaskParams {
    fn default() -> Self {
        GpTaskParams {
            task_file: None,
            l1: None,
            l2: None,
            n_context: 10,
            n_target: 20,
            noise_var: 1e-2,
            sigma_obs: None,
            learnable_sigma: false,
            data_seed: 3,
        }
    }
}

/// A bridge endpoint: a constant or one value per grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Endpoint {
    Constant(f64),
    Values(Vec<f64>),
}

impl Endpoint {
    pub fn values(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            Endpoint::Constant(c) => Ok(vec![*c; n]),
            Endpoint::Values(v) if v.len() == n => Ok(v.clone()),
            Endpoint::Values(v) => Err(config_err(format!("bridge.{what} has {} values, grid has {n} points", v.len()))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeCfg {
    pub x0: Endpoint,
    pub xt: Endpoint,
    #[serde(default = "default_bridge_steps")]
    pub steps: usize,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
}

fn default_bridge_steps() -> usize {
    100
}

fn default_paths() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCfg {
    pub repeats: usize,
    pub n: usize,
    pub alpha: f64,
    pub n_perm: usize,
    /// Default number of draws for the sample commands.
    pub n_samples: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg { repeats: 100, n: 256, alpha: 0.05, n_perm: 200, n_samples: 512 }
    }
}

fn typed<T: DeserializeOwned + Serialize>(table: &toml::Table, what: &str) -> Result<(T, toml::Table)> {
    let v: T = toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| config_err(format!("[data.params] for {what}: {}", e.message())))?;
    let back = toml::Table::try_from(&v).context("re-serializing dataset parameters")?;
    Ok((v, back))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        // fill dataset defaults so the snapshot is complete
        if let Some(d) = &mut cfg.data {
            d.params = match d.dataset {
                DatasetKind::Quadratic => typed::<QuadraticParams>(&d.params, "quadratic")?.1,
                DatasetKind::Density2d => typed::<Density2dParams>(&d.params, "density-2d")?.1,
                DatasetKind::GpTask => typed::<GpTaskParams>(&d.params, "gp-task")?.1,
            };
        }
        cfg.grid()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing resolved config")
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).context("serializing resolved config")
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.res.clone(), self.grid.bounds.clone()).map_err(|e| config_err(format!("[grid]: {e}")))
    }

    pub fn data(&self) -> Result<&DataCfg> {
        self.data.as_ref().ok_or_else(|| config_err("this command needs a [data] section"))
    }

    pub fn quadratic(&self) -> Result<QuadraticParams> {
        self.params(DatasetKind::Quadratic)
    }

    pub fn gp_task(&self) -> Result<GpTaskParams> {
        self.params(DatasetKind::GpTask)
    }

    fn params<T: DeserializeOwned + Serialize>(&self, kind: DatasetKind) -> Result<T> {
        let d = self.data()?;
        if d.dataset != kind {
            return Err(config_err(format!("expected dataset {kind:?}, config has {:?}", d.dataset)));
        }
        Ok(typed::<T>(&d.params, "dataset")?.0)
    }

    /// Grid and process described by `[grid]` and `[process]`.
    pub fn process(&self) -> Result<(GridSpec, OUBridgeParams)> {
        let grid = self.grid()?;
        let pc = &self.process;
        let eigs = match pc.basis_kind {
            BasisChoice::Kernel => {
                let gamma = pc.gamma.ok_or_else(|| config_err("process.gamma is required for the kernel basis"))?;
                let e = build_kernel_basis_1d(&grid, gamma, None)?;
                match pc.modes {
                    Some(m) => e.truncated(m)?,
                    None => e,
                }
            }
            BasisChoice::Cosine => {
                let m = pc.modes.ok_or_else(|| config_err("process.modes is required for the cosine basis"))?;
                build_cosine_basis(&grid, &vec![m; grid.dims()], pc.decay_floor)?
            }
        };
        let p = OUBridgeParams::new(Arc::new(eigs), pc.sigma, pc.horizon)?;
        Ok((grid, p))
    }

    pub fn arch(&self, dims: usize) -> NetArch {
        let mut a = if dims == 1 { NetArch::default_1d(self.process.horizon) } else { NetArch::default_2d(self.process.horizon) };
        let n = &self.net;
        a.n_layers = n.n_layers.unwrap_or(a.n_layers);
        a.width = n.width.unwrap_or(a.width);
        a.mlp_width = n.mlp_width.unwrap_or(a.mlp_width);
        a.n_spectral_modes = n.n_spectral_modes.unwrap_or(a.n_spectral_modes);
        a.fourier_features_m = n.fourier_features_m.unwrap_or(a.fourier_features_m);
        a.fourier_scale = n.fourier_scale.unwrap_or(a.fourier_scale);
        a.time_embed_dim = n.time_embed_dim.unwrap_or(a.time_embed_dim);
        a.time_hidden = n.time_hidden.unwrap_or(a.time_hidden);
        a
    }
}
