//! Files written and read by the commands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fnbridge::control_net::ControlNet;
use fnbridge::grid::{GridField, GridSpec};
use fnbridge::io::{decode_f64s, encode_f64s, fmt_f64, write_csv};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::config::{config_err, Config};

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))
}

/// Output directory plus the resolved configuration written next to every artifact.
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn new(root: &Path, cfg: Option<&Config>) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        if let Some(cfg) = cfg {
            write_text(&root.join("resolved_config.toml"), &cfg.to_toml()?)?;
        }
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// One row per field, one column per grid point.
pub fn write_fields(path: &Path, rows: ArrayView2<f64>) -> Result<()> {
    let header: Vec<String> = (0..rows.ncols()).map(|i| format!("v{i}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = create(path)?;
    write_csv(&mut w, &header, rows.outer_iter().map(|r| r.iter().map(|&v| fmt_f64(v)).collect()))?;
    w.flush()?;
    Ok(())
}

pub fn read_fields(path: &Path) -> Result<Array2<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let width = rdr.headers()?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
        for f in rec.iter() {
            values.push(f.trim().parse::<f64>().map_err(|e| config_err(format!("{}: bad number {f:?}: {e}", path.display())))?);
        }
        n += 1;
    }
    Array2::from_shape_vec((n, width), values).map_err(|e| config_err(format!("{}: ragged rows: {e}", path.display())))
}

/// Per-iteration records: the reproducible log and the wall-clock log.
pub struct TrainLogs {
    log: BufWriter<File>,
    timing: BufWriter<File>,
}

#[derive(Serialize)]
struct Timing {
    iter: usize,
    elapsed_ms: f64,
}

impl TrainLogs {
    pub fn new(out: &OutDir) -> Result<Self> {
        Ok(TrainLogs { log: create(&out.path("train_log.jsonl"))?, timing: create(&out.path("train_timing.jsonl"))? })
    }

    pub fn push<T: Serialize>(&mut self, iter: usize, entry: &T, elapsed_ms: f64) -> std::io::Result<()> {
        writeln!(self.log, "{}", serde_json::to_string(entry)?)?;
        writeln!(self.timing, "{}", serde_json::to_string(&Timing { iter, elapsed_ms })?)
    }

    pub fn finish(mut self) -> Result<()> {
        self.log.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

pub const BAYES_CHECKPOINT_VERSION: u32 = 1;

/// Trained posterior sampler: control, initial condition and noise scale.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesCheckpoint {
    pub version: u32,
    pub sigma_obs: f64,
    pub x0: String,
    pub net: serde_json::Value,
}

impl BayesCheckpoint {
    pub fn new(net: &ControlNet, x0: &GridField, sigma_obs: f64) -> Result<Self> {
        Ok(BayesCheckpoint {
            version: BAYES_CHECKPOINT_VERSION,
            sigma_obs,
            x0: encode_f64s(&x0.values),
            net: serde_json::from_str(&net.to_json()?)?,
        })
    }

    pub fn load(path: &Path, grid: &GridSpec) -> Result<(ControlNet, GridField, f64)> {
        let ck: BayesCheckpoint = serde_json::from_str(&read_text(path)?)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if ck.version != BAYES_CHECKPOINT_VERSION {
            return Err(config_err(format!("{}: checkpoint version {} (expected {BAYES_CHECKPOINT_VERSION})", path.display(), ck.version)));
        }
        let net = ControlNet::from_json(&ck.net.to_string())?;
        let x0 = GridField::new(grid.clone(), decode_f64s(&ck.x0)?)?;
        Ok((net, x0, ck.sigma_obs))
    }
}

pub fn load_net(path: &Path) -> Result<ControlNet> {
    Ok(ControlNet::from_json(&read_text(path)?)?)
}
