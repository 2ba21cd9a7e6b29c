//! Command configurations. Files are TOML; unknown keys are rejected.
//! Relative paths are taken relative to the directory holding the config
//! file.

use std::fs;
use std::path::{Path, PathBuf};

use partforge_core::dataset::Thresholds;
use partforge_core::geometry::{DEFAULT_RESOLUTION, DEFAULT_SAMPLES, DEFAULT_TAU};
use partforge_core::{DenoiserConfig, SamplerConfig, ToyKind, TrainingPlan};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Resolved config written into every output directory.
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";

// Absolute, so the resolved config stays valid wherever it is written.
fn rebase(base: &Path, p: &mut PathBuf) {
    let joined = base.join(&*p);
    *p = std::path::absolute(&joined).unwrap_or(joined);
}

/// A config that can absorb command-line overrides.
pub trait RunConfig: Serialize + DeserializeOwned {
    const COMMAND: &'static str;

    fn rebase(&mut self, base: &Path);

    /// Applies `--seed`. Commands without randomness refuse it.
    fn set_seed(&mut self, seed: u64) -> CliResult<()>;

    fn validate(&self) -> CliResult<()> {
        Ok(())
    }

    fn from_toml(text: &str, base: &Path) -> CliResult<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.rebase(base);
        Ok(cfg)
    }

    fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
}

/// Creates `out` and records the resolved config and tool version in it.
pub fn prepare_output<C: RunConfig>(out: &Path, config: &C) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::at(out, e))?;
    let text = toml::to_string(config).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(out.join(CONFIG_FILE), text)?;
    let info = RunInfo { tool: TOOL, version: VERSION, command: C::COMMAND };
    let mut json = serde_json::to_string_pretty(&info).expect("plain struct");
    json.push('\n');
    fs::write(out.join(RUN_FILE), json)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurateConfig {
    /// Directory of `.gltf` / `.glb` files.
    pub input: PathBuf,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Split each node into vertex-connected components before counting.
    #[serde(default)]
    pub split_components: bool,
    /// Reject triangle strips and fans instead of triangulating them.
    #[serde(default)]
    pub triangles_only: bool,
}

impl RunConfig for CurateConfig {
    const COMMAND: &'static str = "curate";

    fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.input);
    }

    fn set_seed(&mut self, _: u64) -> CliResult<()> {
        Err(CliError::Usage("curate is deterministic and takes no seed".into()))
    }
}

fn all_kinds() -> Vec<ToyKind> {
    ToyKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToygenConfig {
    #[serde(default)]
    pub seed: u64,
    /// Part counts to generate.
    pub part_counts: Vec<usize>,
    /// Assets per part count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_count: Option<usize>,
    /// Total assets, split as evenly as possible over `part_counts` with
    /// earlier counts taking the remainder. Exclusive with `per_count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<usize>,
    /// Families cycled through within each part count.
    #[serde(default = "all_kinds")]
    pub kinds: Vec<ToyKind>,
}

impl ToygenConfig {
    /// Assets to generate for each entry of `part_counts`.
    pub fn counts(&self) -> Vec<usize> {
        let m = self.part_counts.len();
        match (self.per_count, self.total) {
            (Some(c), _) => vec![c; m],
            (None, Some(t)) => (0..m).map(|i| t / m + usize::from(i < t % m)).collect(),
            (None, None) => vec![0; m],
        }
    }
}

impl RunConfig for ToygenConfig {
    const COMMAND: &'static str = "toygen";

    fn rebase(&mut self, _: &Path) {}

    fn set_seed(&mut self, seed: u64) -> CliResult<()> {
        self.seed = seed;
        Ok(())
    }

    fn validate(&self) -> CliResult<()> {
        if self.part_counts.is_empty() || self.part_counts.contains(&0) {
            return Err(CliError::Config("part_counts must be non-empty and positive".into()));
        }
        let mut seen = self.part_counts.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("part_counts lists a count twice".into()));
        }
        if self.per_count.is_some() == self.total.is_some() {
            return Err(CliError::Config("set exactly one of per_count and total".into()));
        }
        if self.kinds.is_empty() {
            return Err(CliError::Config("kinds must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Toy archive produced by `toygen`.
    pub data: PathBuf,
    /// Seeds model initialization and, through `plan.seed`, every batch.
    #[serde(default)]
    pub seed: u64,
    /// Seed of the fixed condition projection.
    #[serde(default)]
    pub condition_seed: u64,
    pub model: DenoiserConfig,
    pub plan: TrainingPlan,
    /// Continue from this checkpoint instead of a fresh model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl RunConfig for TrainConfig {
    const COMMAND: &'static str = "train";

    fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.data);
        if let Some(r) = &mut self.resume {
            rebase(base, r);
        }
        // Batches always follow the top-level seed.
        self.plan.seed = self.seed;
    }

    fn set_seed(&mut self, seed: u64) -> CliResult<()> {
        self.seed = seed;
        self.plan.seed = seed;
        Ok(())
    }

    fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.plan.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub checkpoint: PathBuf,
    /// Toy archive whose assets supply the conditions.
    pub data: PathBuf,
    /// Part counts to generate; empty uses each asset's own count.
    #[serde(default)]
    pub part_counts: Vec<usize>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Only the first `limit` assets of the archive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl RunConfig for SampleConfig {
    const COMMAND: &'static str = "sample";

    fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.checkpoint);
        rebase(base, &mut self.data);
    }

    fn set_seed(&mut self, seed: u64) -> CliResult<()> {
        self.seed = seed;
        Ok(())
    }

    fn validate(&self) -> CliResult<()> {
        if self.sampler.num_steps == 0 {
            return Err(CliError::Config("sampler.num_steps must be positive".into()));
        }
        if self.part_counts.contains(&0) {
            return Err(CliError::Config("part_counts must be positive".into()));
        }
        Ok(())
    }
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_resolution() -> usize {
    DEFAULT_RESOLUTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// One directory of part files per asset.
    pub pred: PathBuf,
    /// Same layout, ground truth.
    pub gt: PathBuf,
    /// Surface samples per mesh.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Ball radius used to voxelize point-cloud parts; one cell pitch if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_radius: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl EvalConfig {
    pub fn radius(&self) -> f64 {
        self.point_radius.unwrap_or(2.0 / self.resolution as f64)
    }
}

impl RunConfig for EvalConfig {
    const COMMAND: &'static str = "eval";

    fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.pred);
        rebase(base, &mut self.gt);
    }

    fn set_seed(&mut self, seed: u64) -> CliResult<()> {
        self.seed = seed;
        Ok(())
    }

    fn validate(&self) -> CliResult<()> {
        if self.samples == 0 || self.resolution == 0 {
            return Err(CliError::Config("samples and resolution must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(CliError::Config("tau must be positive".into()));
        }
        if self.point_radius.is_some_and(|r| !(r >= 0.0)) {
            return Err(CliError::Config("point_radius must be non-negative".into()));
        }
        Ok(())
    }
}
