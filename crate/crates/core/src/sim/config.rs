use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::tree::ReplicaId;

/// One-way latencies of the three-site deployment (Paris, Bangalore, New York).
pub const REAL_LATENCY_MS: [[f64; 3]; 3] = [[0.0, 144.0, 75.0], [144.0, 0.0, 215.0], [75.0, 215.0, 0.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Maram,
    Udr,
    #[serde(alias = "globallock", alias = "global")]
    GlobalLock,
    #[serde(alias = "subtreelock", alias = "subtree")]
    SubtreeLock,
    Naive,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::Maram, Algorithm::Udr, Algorithm::GlobalLock, Algorithm::SubtreeLock, Algorithm::Naive];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Maram => "maram",
            Algorithm::Udr => "udr",
            Algorithm::GlobalLock => "global_lock",
            Algorithm::SubtreeLock => "subtree_lock",
            Algorithm::Naive => "naive",
        }
    }

    pub fn uses_locks(self) -> bool {
        matches!(self, Algorithm::GlobalLock | Algorithm::SubtreeLock)
    }

    /// Whether the algorithm reports ops as transient until peers catch up.
    pub fn tracks_stability(self) -> bool {
        matches!(self, Algorithm::Maram | Algorithm::Udr)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| SimError::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyPreset {
    Zero,
    Real,
    RealX10,
}

impl LatencyPreset {
    pub fn name(self) -> &'static str {
        match self {
            LatencyPreset::Zero => "zero",
            LatencyPreset::Real => "real",
            LatencyPreset::RealX10 => "real_x10",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatencySpec {
    Preset { preset: LatencyPreset },
    Matrix { matrix: Vec<Vec<f64>> },
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec::Preset { preset: LatencyPreset::Real }
    }
}

impl LatencySpec {
    pub fn label(&self) -> &'static str {
        match self {
            LatencySpec::Preset { preset } => preset.name(),
            LatencySpec::Matrix { .. } => "matrix",
        }
    }
}

/// Symmetric one-way link latencies, stored in microseconds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatencyMatrix {
    us: Vec<Vec<u64>>,
}

impl LatencyMatrix {
    pub fn from_ms(ms: &[Vec<f64>]) -> Result<Self, SimError> {
        let n = ms.len();
        if n == 0 {
            return Err(SimError::Config("latency matrix is empty".into()));
        }
        for (i, row) in ms.iter().enumerate() {
            if row.len() != n {
                return Err(SimError::Config(format!("latency row {i} has {} entries, expected {n}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(SimError::Config(format!("latency[{i}][{j}] = {v} is not a non-negative number")));
                }
                if i == j && v != 0.0 {
                    return Err(SimError::Config(format!("latency[{i}][{i}] must be 0")));
                }
                if ms[j][i] != v {
                    return Err(SimError::Config(format!("latency matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        let us = ms.iter().map(|row| row.iter().map(|&v| (v * 1000.0).round() as u64).collect()).collect();
        Ok(LatencyMatrix { us })
    }

    pub fn preset(preset: LatencyPreset, replicas: usize) -> Result<Self, SimError> {
        let scale = match preset {
            LatencyPreset::Zero => return Self::from_ms(&vec![vec![0.0; replicas]; replicas]),
            LatencyPreset::Real => 1.0,
            LatencyPreset::RealX10 => 10.0,
        };
        if replicas != 3 {
            return Err(SimError::Config(format!(
                "latency preset {:?} describes 3 sites, got {replicas} replicas",
                preset.name()
            )));
        }
        let ms: Vec<Vec<f64>> = REAL_LATENCY_MS.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        Self::from_ms(&ms)
    }

    pub fn replicas(&self) -> usize {
        self.us.len()
    }

    pub fn us(&self, from: ReplicaId, to: ReplicaId) -> u64 {
        self.us[from as usize][to as usize]
    }

    pub fn ms(&self, from: ReplicaId, to: ReplicaId) -> f64 {
        self.us(from, to) as f64 / 1000.0
    }
}

/// Request mix in percent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mix {
    pub add: u32,
    pub remove: u32,
    pub upmove: u32,
    pub downmove: u32,
}

impl Default for Mix {
    fn default() -> Self {
        Mix { add: 60, remove: 12, upmove: 14, downmove: 14 }
    }
}

impl Mix {
    pub fn total(&self) -> u32 {
        self.add + self.remove + self.upmove + self.downmove
    }

    pub fn moves(&self) -> u32 {
        self.upmove + self.downmove
    }
}

fn default_replicas() -> usize {
    3
}
fn default_warmup() -> usize {
    997
}
fn default_ops() -> usize {
    250
}
fn default_seed() -> u64 {
    42
}
fn default_heartbeat() -> f64 {
    100.0
}
fn default_runs() -> usize {
    1
}
fn default_gap() -> f64 {
    200.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub latency: LatencySpec,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Node count (root included) the warm-up phase grows the tree to.
    #[serde(default = "default_warmup")]
    pub warmup_nodes: usize,
    #[serde(default = "default_ops")]
    pub ops_per_replica: usize,
    #[serde(default)]
    pub mix: Mix,
    /// Percent of move requests issued as crossing pairs.
    #[serde(default)]
    pub conflict_rate: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_ms: f64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Mean of the exponential gap between two requests at one replica.
    #[serde(default = "default_gap")]
    pub mean_gap_ms: f64,
}

impl SimConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        SimConfig {
            algorithm,
            latency: LatencySpec::default(),
            replicas: default_replicas(),
            warmup_nodes: default_warmup(),
            ops_per_replica: default_ops(),
            mix: Mix::default(),
            conflict_rate: 0.0,
            seed: default_seed(),
            heartbeat_ms: default_heartbeat(),
            runs: default_runs(),
            mean_gap_ms: default_gap(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn latency_matrix(&self) -> Result<LatencyMatrix, SimError> {
        let m = match &self.latency {
            LatencySpec::Preset { preset } => LatencyMatrix::preset(*preset, self.replicas)?,
            LatencySpec::Matrix { matrix } => LatencyMatrix::from_ms(matrix)?,
        };
        if m.replicas() != self.replicas {
            return Err(SimError::Config(format!(
                "latency matrix covers {} replicas, config has {}",
                m.replicas(),
                self.replicas
            )));
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.replicas == 0 {
            return bad("replicas must be at least 1".into());
        }
        if self.warmup_nodes == 0 {
            return bad("warmup_nodes counts the root and must be at least 1".into());
        }
        if self.mix.total() != 100 {
            return bad(format!("mix sums to {}%, expected 100%", self.mix.total()));
        }
        if !(0.0..=100.0).contains(&self.conflict_rate) {
            return bad(format!("conflict_rate {} is outside 0..=100", self.conflict_rate));
        }
        if self.conflict_rate > 0.0 && self.replicas < 2 {
            return bad("conflicting pairs need at least 2 replicas".into());
        }
        if !(self.heartbeat_ms.is_finite() && self.heartbeat_ms > 0.0) {
            return bad(format!("heartbeat_ms {} must be positive", self.heartbeat_ms));
        }
        if !(self.mean_gap_ms.is_finite() && self.mean_gap_ms >= 0.0) {
            return bad(format!("mean_gap_ms {} must be non-negative", self.mean_gap_ms));
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        self.latency_matrix()?;
        Ok(())
    }

    /// Seed of the `run`-th simulation in a batch.
    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}
