//! Experiment configuration: scenario files describing the simulated world
//! and run configs tying scenarios, models, and seeds together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::baselines::BaselineSpec;
use crate::env::{EnvConfig, WbanEnv, SENSOR_CRITICALITY_LEVELS, USER_CRITICALITY_LEVELS};
use crate::error::{Error, Result};
use crate::geo::{self, SynthParams};
use crate::predictor::PredictorConfig;

/// Where user traces come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSource {
    Synthetic {
        seed: u64,
        length: usize,
        #[serde(default)]
        params: Option<SynthParams>,
    },
    Csv {
        path: String,
        #[serde(default = "default_max_gap")]
        max_gap: i64,
    },
}

fn default_max_gap() -> i64 {
    10
}

impl TraceSource {
    /// Produce one gap-free Cartesian trace per requested user.
    pub fn load(&self, users: usize, base_dir: &Path) -> Result<Vec<Vec<[f64; 2]>>> {
        match self {
            TraceSource::Synthetic {
                seed,
                length,
                params,
            } => {
                let p = params.clone().unwrap_or_default();
                geo::gen_synthetic_traces_with(users, *length, *seed, &p)
            }
            TraceSource::Csv { path, max_gap } => {
                let resolved = resolve(base_dir, path);
                let file = std::fs::File::open(&resolved).map_err(|e| {
                    Error::config(format!("cannot open trace file {}: {e}", resolved.display()))
                })?;
                let (cleaned, _) = geo::parse_and_clean(file, *max_gap)?;
                if cleaned.len() < users {
                    return Err(Error::config(format!(
                        "trace file has {} users, scenario needs {users}",
                        cleaned.len()
                    )));
                }
                // longest segment per user, all projected around one origin
                let mut origin = None;
                let mut traces = Vec::with_capacity(users);
                for user in cleaned.iter().take(users) {
                    let segment = user
                        .segments
                        .iter()
                        .max_by_key(|s| s.len())
                        .ok_or_else(|| Error::config(format!("user {} has no points", user.user_id)))?;
                    let anchor = *origin.get_or_insert((segment[0].lat, segment[0].lon));
                    traces.push(geo::project_to_local(segment, anchor)?.points);
                }
                Ok(traces)
            }
        }
    }
}

/// World description: environment parameters, trace source, criticality
/// assignments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub env: EnvConfig,
    pub trace: TraceSource,
    /// Per-user criticality; cycles through the legal levels when omitted.
    #[serde(default)]
    pub phi: Option<Vec<f64>>,
    /// Per-sensor criticality; cycles through the legal levels when omitted.
    #[serde(default)]
    pub rho: Option<Vec<f64>>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read scenario {}: {e}", path.display())))?;
        let mut sc: Scenario = serde_json::from_str(&text)?;
        sc.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(sc)
    }

    pub fn user_criticalities(&self) -> Vec<f64> {
        self.phi.clone().unwrap_or_else(|| {
            (0..self.env.users)
                .map(|u| USER_CRITICALITY_LEVELS[u % USER_CRITICALITY_LEVELS.len()])
                .collect()
        })
    }

    pub fn sensor_criticalities(&self) -> Vec<f64> {
        self.rho.clone().unwrap_or_else(|| {
            (0..self.env.tasks_per_user)
                .map(|n| SENSOR_CRITICALITY_LEVELS[n % SENSOR_CRITICALITY_LEVELS.len()])
                .collect()
        })
    }

    pub fn build_env(&self, seed: u64) -> Result<WbanEnv> {
        let traces = self.trace.load(self.env.users, &self.base_dir)?;
        WbanEnv::new(
            self.env.clone(),
            self.user_criticalities(),
            self.sensor_criticalities(),
            traces,
            seed,
        )
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Top-level run description consumed by the command line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    /// Path to a scenario file, for agent and baseline pipelines.
    #[serde(default)]
    pub scenario: Option<String>,
    /// Trace source for predictor training datasets.
    #[serde(default)]
    pub trace: Option<TraceSource>,
    /// Users drawn from `trace` when building predictor datasets.
    #[serde(default = "default_trace_users")]
    pub trace_users: usize,
    /// Window stride for predictor datasets.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub predictor: Option<PredictorConfig>,
    #[serde(default)]
    pub predictor_checkpoint: Option<String>,
    #[serde(default)]
    pub agent: Option<AgentConfig>,
    #[serde(default)]
    pub baseline: Option<BaselineSpec>,
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_stride() -> usize {
    1
}

fn default_trace_users() -> usize {
    4
}

fn default_out_dir() -> String {
    "out".to_string()
}

fn default_eval_episodes() -> usize {
    10
}

impl RunConfig {
    /// Load and check that every referenced path exists.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut rc: RunConfig = serde_json::from_str(&text)?;
        rc.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        for (field, p) in [
            ("scenario", rc.scenario.as_ref()),
            ("predictor_checkpoint", rc.predictor_checkpoint.as_ref()),
        ] {
            if let Some(p) = p {
                let resolved = rc.resolve(p);
                if !resolved.exists() {
                    return Err(Error::config(format!(
                        "`{field}` points at missing path {}",
                        resolved.display()
                    )));
                }
            }
        }
        if let Some(TraceSource::Csv { path: p, .. }) = &rc.trace {
            let resolved = rc.resolve(p);
            if !resolved.exists() {
                return Err(Error::config(format!(
                    "`trace.path` points at missing path {}",
                    resolved.display()
                )));
            }
        }
        Ok(rc)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        resolve(&self.base_dir, p)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let p = self
            .scenario
            .as_ref()
            .ok_or_else(|| Error::config("config is missing the `scenario` field".to_string()))?;
        Scenario::load(&self.resolve(p))
    }
}
