use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{AdaptConfig, PlannerKind};
use crate::envworld::{EnvConfig, FamilyConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::metatrain::{MetaTrainConfig, ModelConfig};
use crate::planner::PlannerConfig;

/// The systems compared by an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PlannerName {
    /// Embedding-free model with MPC.
    Rmpc,
    /// Embedding model with MPC.
    Fmpc,
    /// Embedding model with the meta adaptation controller.
    Mac,
    /// Embedding model with anchor-constrained MPC.
    AnchorMpc,
}

impl PlannerName {
    pub const ALL: [PlannerName; 4] = [
        PlannerName::Rmpc,
        PlannerName::Fmpc,
        PlannerName::Mac,
        PlannerName::AnchorMpc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlannerName::Rmpc => "rmpc",
            PlannerName::Fmpc => "fmpc",
            PlannerName::Mac => "mac",
            PlannerName::AnchorMpc => "anchor-mpc",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == name)
            .ok_or_else(|| Error::UnknownPlanner {
                name: name.to_string(),
                valid: Self::ALL.map(|p| p.as_str()).join(", "),
            })
    }

    pub fn kind(self) -> PlannerKind {
        match self {
            PlannerName::Rmpc | PlannerName::Fmpc => PlannerKind::Mpc,
            PlannerName::Mac => PlannerKind::Mac,
            PlannerName::AnchorMpc => PlannerKind::AnchorMpc,
        }
    }

    /// Whether the planner runs on the embedding model.
    pub fn uses_embeddings(self) -> bool {
        self != PlannerName::Rmpc
    }
}

impl fmt::Display for PlannerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestProtocol {
    /// Held-out tasks sampled when `task_list` is absent.
    pub tasks: usize,
    /// Explicit test tasks; overrides `tasks`.
    pub task_list: Option<Vec<TaskSpec>>,
    pub task_seed: u64,
    /// Control steps per episode.
    pub steps: usize,
    /// Environment seeds; every task runs once per seed.
    pub seeds: Vec<u64>,
    /// Planners, in report column order.
    pub compare: Vec<String>,
    /// Nominal-task transitions used to pick the reference embedding.
    pub reference_samples: usize,
}

impl Default for TestProtocol {
    fn default() -> Self {
        TestProtocol {
            tasks: 2,
            task_list: None,
            task_seed: 7,
            steps: 200,
            seeds: vec![0, 1, 2, 3, 4],
            compare: ["rmpc", "fmpc", "mac"].map(String::from).to_vec(),
            reference_samples: 256,
        }
    }
}

/// One experiment: a task family, training, adaptation, planners and test protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub meta_train: MetaTrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    /// Planner settings keyed by planner name; missing names use defaults.
    #[serde(default)]
    pub planners: BTreeMap<String, PlannerConfig>,
    #[serde(default)]
    pub test: TestProtocol,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn new(name: &str, family: FamilyConfig) -> Self {
        ExperimentConfig {
            name: name.to_string(),
            env: EnvConfig::new(family),
            model: ModelConfig::default(),
            meta_train: MetaTrainConfig::default(),
            adapt: AdaptConfig::default(),
            planners: BTreeMap::new(),
            test: TestProtocol::default(),
            out_dir: default_out_dir(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let cfg = Self::from_json(&text)?;
        Ok(cfg)
    }

    /// Parses and validates; errors carry the JSON path of the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn planner(&self, name: PlannerName) -> PlannerConfig {
        self.planners.get(name.as_str()).cloned().unwrap_or_default()
    }

    pub fn compared_planners(&self) -> Result<Vec<PlannerName>> {
        self.test.compare.iter().map(|n| PlannerName::parse(n)).collect()
    }

    /// SHA-256 of the configuration with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        self.env.validate("env")?;
        self.model.validate("model")?;
        self.meta_train.validate("meta_train")?;
        self.adapt.validate("adapt")?;
        for (name, p) in &self.planners {
            PlannerName::parse(name)
                .map_err(|e| Error::config(format!("planners.{name}"), e.to_string()))?;
            p.validate(&format!("planners.{name}"))?;
            if let Some(bad) = p.similarity_dims.iter().flatten().find(|&&d| d >= self.env.family.state_dim()) {
                return Err(Error::config(
                    format!("planners.{name}.similarity_dims"),
                    format!("dimension {bad} out of range for state dimension {}", self.env.family.state_dim()),
                ));
            }
        }
        let t = &self.test;
        if t.seeds.is_empty() {
            return Err(Error::config("test.seeds", "must list at least one seed"));
        }
        if t.compare.is_empty() {
            return Err(Error::config("test.compare", "must list at least one planner"));
        }
        let mut seen = Vec::new();
        for (i, n) in t.compare.iter().enumerate() {
            let p = PlannerName::parse(n)
                .map_err(|e| Error::config(format!("test.compare[{i}]"), e.to_string()))?;
            if seen.contains(&p) {
                return Err(Error::config(format!("test.compare[{i}]"), format!("duplicate planner {n}")));
            }
            seen.push(p);
        }
        if t.reference_samples == 0 {
            return Err(Error::config("test.reference_samples", "must be >= 1"));
        }
        match &t.task_list {
            Some(list) => {
                if list.is_empty() {
                    return Err(Error::config("test.task_list", "must not be empty"));
                }
                for (i, task) in list.iter().enumerate() {
                    let path = format!("test.task_list[{i}]");
                    if task.family() != self.env.family.family() {
                        return Err(Error::config(
                            path,
                            format!("task family {} differs from env family {}", task.family().name(), self.env.family.family().name()),
                        ));
                    }
                    if task.state_dim() != self.env.family.state_dim() || task.action_dim() != self.env.family.action_dim() {
                        return Err(Error::config(path, "task dimensions differ from the env family"));
                    }
                    task.validate().map_err(|e| Error::config(path, e.to_string()))?;
                }
            }
            None if t.tasks == 0 => return Err(Error::config("test.tasks", "must be >= 1")),
            None => {}
        }
        Ok(())
    }
}
