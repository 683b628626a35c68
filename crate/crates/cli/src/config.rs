//! Run configuration: one document covering data, training, evaluation,
//! robustness sweeps and ablation. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use shapefsl::data::{EpisodeSpec, Split, ToyConfig};
use shapefsl::metatest::EvalConfig;
use shapefsl::robustness::TintScenario;
use shapefsl::training::TrainConfig;
use shapefsl::transforms::TintPalette;

pub const DATA_ROOT_ENV: &str = "SHAPEFSL_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds training, toy-data generation and episode sampling.
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub evaluation: EvaluationConfig,
    pub robustness: RobustnessConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            evaluation: EvaluationConfig::default(),
            robustness: RobustnessConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated in memory from `toy`, seeded by the run seed.
    #[default]
    Toy,
    /// `<root>/<split>/<class>/*.png` with `<root>/manifest.json`.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Folder root; falls back to the `SHAPEFSL_DATA_ROOT` environment variable.
    pub root: Option<PathBuf>,
    /// Split manifest; defaults to `<root>/manifest.json`.
    pub manifest: Option<PathBuf>,
    pub toy: ToyConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Toy,
            root: None,
            manifest: None,
            toy: ToyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// `[n_way, k_shot]` pairs.
    pub episodes: Vec<[usize; 2]>,
    pub n_query: usize,
    pub n_tasks: usize,
    pub split: Split,
    pub head: EvalConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            episodes: vec![[5, 1], [5, 5]],
            n_query: 15,
            n_tasks: 600,
            split: Split::Test,
            head: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    /// `[n_way, k_shot]` of every sweep.
    pub episode: [usize; 2],
    pub n_tasks: usize,
    pub tint: Option<TintSweep>,
    pub fourier: Option<FourierSweep>,
    pub attack: Option<AttackSweep>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            episode: [5, 1],
            n_tasks: 200,
            tint: Some(TintSweep::default()),
            fourier: Some(FourierSweep::default()),
            attack: Some(AttackSweep::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TintSweep {
    pub scenarios: Vec<TintScenario>,
    pub strength: f32,
}

impl Default for TintSweep {
    fn default() -> Self {
        Self {
            scenarios: TintScenario::ALL.to_vec(),
            strength: TintPalette::DEFAULT_STRENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FourierSweep {
    /// Filter radii; empty means 0, 1, 2, 4, ... up to the identity radius.
    pub radii: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSweep {
    pub epsilons: Vec<f32>,
    pub n_iters: usize,
    pub p_init: f64,
    /// Tasks attacked per budget (attacks are costly).
    pub n_tasks: usize,
}

impl Default for AttackSweep {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0],
            n_iters: 500,
            p_init: 0.8,
            n_tasks: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Training seeds; empty means the run seed only.
    pub seeds: Vec<u64>,
    pub episode: [usize; 2],
    pub n_query: usize,
    pub n_tasks: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![],
            episode: [5, 1],
            n_query: 15,
            n_tasks: 200,
        }
    }
}

impl RunConfig {
    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }

    /// Copies the run seed into the training config and validates.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        if self.data.source == DataSource::Toy {
            self.data.toy.validate()?;
        }
        let e = &self.evaluation;
        if e.episodes.is_empty() {
            bail!("evaluation.episodes: at least one [n_way, k_shot] pair is required");
        }
        for &[n, k] in &e.episodes {
            self.episode_spec(n, k, e.n_query)
                .validate()
                .with_context(|| format!("evaluation.episodes [{n}, {k}]"))?;
        }
        if e.n_tasks == 0 {
            bail!("evaluation.n_tasks must be >= 1");
        }
        if e.head.reg <= 0.0 {
            bail!("evaluation.head.reg must be positive");
        }
        let r = &self.robustness;
        if r.n_tasks == 0 {
            bail!("robustness.n_tasks must be >= 1");
        }
        if let Some(t) = &r.tint {
            if !(0.0..=1.0).contains(&t.strength) {
                bail!("robustness.tint.strength {} outside [0, 1]", t.strength);
            }
        }
        if let Some(f) = &r.fourier {
            if f.radii.iter().any(|r| !(*r >= 0.0)) {
                bail!("robustness.fourier.radii must be non-negative");
            }
        }
        if let Some(a) = &r.attack {
            if a.epsilons.iter().any(|e| !(0.0..=1.0).contains(e)) {
                bail!("robustness.attack.epsilons must lie in [0, 1]");
            }
            if !(a.p_init > 0.0 && a.p_init <= 1.0) {
                bail!("robustness.attack.p_init must lie in (0, 1]");
            }
        }
        if self.ablation.n_tasks == 0 {
            bail!("ablation.n_tasks must be >= 1");
        }
        Ok(())
    }

    pub fn episode_spec(&self, n_way: usize, k_shot: usize, n_query: usize) -> EpisodeSpec {
        EpisodeSpec::new(n_way, k_shot, n_query, self.seed)
    }

    pub fn data_root(&self) -> anyhow::Result<PathBuf> {
        match &self.data.root {
            Some(r) => Ok(r.clone()),
            None => std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .with_context(|| format!("data.root is unset and {DATA_ROOT_ENV} is not defined")),
        }
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        if self.ablation.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablation.seeds.clone()
        }
    }
}
