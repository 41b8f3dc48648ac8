use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, RunSpec};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::selection::Topology;
use crate::training::{ModelConfig, ObjectiveConfig};

/// Link budgets shared by every receiver and every transmitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    /// Transmitters per receiver.
    pub rx_budget: usize,
    /// Modality-task slots per transmitter.
    pub tx_budget: usize,
    /// When false the budgets are relaxed until they can never bind.
    pub limits: bool,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            rx_budget: 2,
            tx_budget: 4,
            limits: true,
        }
    }
}

/// A complete experiment description, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: BaselineKind,
    /// Independent seeds per method in `bench`.
    pub repeats: usize,
    /// Held-out rows per task used for the final metrics.
    pub eval_rows: usize,
    /// Epoch cadence of the selection heatmap.
    pub heatmap_every: usize,
    /// Draws of `u` averaged into each heatmap row.
    pub heatmap_samples: usize,
    /// Epoch cadence of information-plane points in `sweep-beta`.
    pub trajectory_every: usize,
    /// Held-out rows per task for each information-plane point.
    pub trajectory_rows: usize,
    pub out: PathBuf,
    pub data: DataConfig,
    pub topology: TopologyConfig,
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            method: BaselineKind::Pom2Dib,
            repeats: 1,
            eval_rows: 1000,
            heatmap_every: 50,
            heatmap_samples: 64,
            trajectory_every: 50,
            trajectory_rows: 200,
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            topology: TopologyConfig::default(),
            objective: ObjectiveConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[s].trim().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| "<document>".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.objective.validate()?;
        self.model.validate()?;
        self.topology()?;
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        if self.heatmap_every == 0 {
            return Err(Error::config("heatmap_every", "must be at least 1"));
        }
        if self.heatmap_samples == 0 {
            return Err(Error::config("heatmap_samples", "must be at least 1"));
        }
        if self.trajectory_every == 0 {
            return Err(Error::config("trajectory_every", "must be at least 1"));
        }
        if self.trajectory_rows < 2 {
            return Err(Error::config("trajectory_rows", "must be at least 2"));
        }
        if self.eval_rows < 4 {
            return Err(Error::config("eval_rows", "must be at least 4"));
        }
        if self.objective.batch_size > self.data.n {
            return Err(Error::config(
                "objective.batch_size",
                format!("{} exceeds data.n = {}", self.objective.batch_size, self.data.n),
            ));
        }
        Ok(())
    }

    /// Budgets are checked against the device counts here.
    pub fn topology(&self) -> Result<Topology> {
        let counts = self.data.matrix.modality_counts();
        let k = counts.len();
        let t = self.data.tasks.len();
        let rx = self.topology.rx_budget;
        if rx == 0 || rx > k {
            return Err(Error::config("topology.rx_budget", format!("{rx} outside 1..={k}")));
        }
        if self.topology.tx_budget == 0 {
            return Err(Error::config("topology.tx_budget", "must be at least 1"));
        }
        let topo = Topology::uniform(counts, t, rx, self.topology.tx_budget)?;
        Ok(if self.topology.limits { topo } else { topo.unlimited() })
    }

    pub fn spec(&self) -> Result<RunSpec> {
        Ok(RunSpec {
            topology: Arc::new(self.topology()?),
            data: self.data.clone(),
            model: self.model.clone(),
            objective: self.objective.clone(),
            seed: self.seed,
        })
    }
}
