//! Pipeline configuration: a TOML file with one section per stage. Every
//! field has a default, so an empty file is a valid configuration. The
//! resolved configuration (after CLI overrides) is hashed and embedded in
//! every artifact.

use crate::error::{Error, Result};
use crate::metrics::{Connectivity, EvalParams, MetricKind};
use crate::postprocess::{Objective, PpGrids};
use crate::stratify::KMeansParams;
use crate::taskspec::{builtin_task, TaskSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// Builtin task name (PED, MEN, MEN-RT, MET) ...
    pub name: String,
    /// ... or a task spec file that takes precedence when set.
    pub file: Option<PathBuf>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            name: "PED".into(),
            file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub set: Vec<String>,
    pub connectivity: u8,
    pub dilation_radius: usize,
    pub tau_mm: f64,
    pub min_lesion_voxels: Option<usize>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            set: vec!["lw_dice".into(), "lw_nsd".into()],
            connectivity: 26,
            dilation_radius: 3,
            tau_mm: 1.0,
            min_lesion_voxels: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StratifySection {
    pub k_min: usize,
    pub k_max: usize,
    pub variance_target: f64,
    pub n_folds: u32,
    pub bin_width: f64,
    /// Image sequences whose first-order features join the shape features.
    pub sequences: Vec<String>,
    /// Optional CSV of externally computed features, merged by case id.
    pub external_features: Option<PathBuf>,
    pub kmeans_restarts: usize,
    pub kmeans_max_iterations: usize,
    pub kmeans_tolerance: f64,
}

impl Default for StratifySection {
    fn default() -> Self {
        StratifySection {
            k_min: 2,
            k_max: 6,
            variance_target: 0.90,
            n_folds: 5,
            bin_width: 25.0,
            sequences: Vec::new(),
            external_features: None,
            kmeans_restarts: 10,
            kmeans_max_iterations: 300,
            kmeans_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Weighted,
    Staple,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub mode: FusionMode,
    pub normalize: bool,
    pub staple_max_iterations: usize,
    pub staple_tolerance: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            mode: FusionMode::Weighted,
            normalize: true,
            staple_max_iterations: 100,
            staple_tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessSection {
    pub cc_max: usize,
    pub cc_step: usize,
    pub ratio_max_hundredths: u32,
    pub ratio_step_hundredths: u32,
    pub min_offdiag: f64,
    pub objective: Objective,
}

impl Default for PostprocessSection {
    fn default() -> Self {
        PostprocessSection {
            cc_max: 500,
            cc_step: 25,
            ratio_max_hundredths: 25,
            ratio_step_hundredths: 1,
            min_offdiag: 0.10,
            objective: Objective::Rank,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; 0 means all available cores.
    pub jobs: usize,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            jobs: 0,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: TaskSection,
    pub metrics: MetricsSection,
    pub stratify: StratifySection,
    pub fusion: FusionSection,
    pub postprocess: PostprocessSection,
    pub run: RunSection,
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config file: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics.tau_mm <= 0.0 {
            return Err(Error::Config(format!(
                "tau_mm must be positive, got {}",
                self.metrics.tau_mm
            )));
        }
        Connectivity::from_u8(self.metrics.connectivity).ok_or_else(|| {
            Error::Config(format!(
                "connectivity must be 6, 18 or 26, got {}",
                self.metrics.connectivity
            ))
        })?;
        for m in &self.metrics.set {
            MetricKind::parse(m)?;
        }
        if self.metrics.set.is_empty() {
            return Err(Error::Config("metric set is empty".into()));
        }
        if self.stratify.k_min < 2 {
            return Err(Error::Config("k_min must be at least 2".into()));
        }
        if self.stratify.k_max < self.stratify.k_min {
            return Err(Error::Config("k_max must be >= k_min".into()));
        }
        if !(0.0 < self.stratify.variance_target && self.stratify.variance_target <= 1.0) {
            return Err(Error::Config("variance_target must be in (0, 1]".into()));
        }
        if self.stratify.n_folds == 0 {
            return Err(Error::Config("n_folds must be positive".into()));
        }
        if self.postprocess.cc_step == 0 || self.postprocess.ratio_step_hundredths == 0 {
            return Err(Error::Config("grid steps must be positive".into()));
        }
        Ok(())
    }

    pub fn task_spec(&self, base_dir: &Path) -> Result<TaskSpec> {
        match &self.task.file {
            Some(file) => {
                let path = if file.is_absolute() {
                    file.clone()
                } else {
                    base_dir.join(file)
                };
                TaskSpec::from_file(path)
            }
            None => builtin_task(&self.task.name),
        }
    }

    pub fn eval_params(&self) -> Result<EvalParams> {
        let metrics = self
            .metrics
            .set
            .iter()
            .map(|m| MetricKind::parse(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalParams {
            metrics,
            connectivity: Connectivity::from_u8(self.metrics.connectivity)
                .expect("validated connectivity"),
            dilation_radius: self.metrics.dilation_radius,
            tau_mm: self.metrics.tau_mm,
            min_lesion_voxels: self.metrics.min_lesion_voxels,
        })
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            restarts: self.stratify.kmeans_restarts,
            max_iterations: self.stratify.kmeans_max_iterations,
            tolerance: self.stratify.kmeans_tolerance,
        }
    }

    pub fn pp_grids(&self) -> PpGrids {
        PpGrids {
            cc_max: self.postprocess.cc_max,
            cc_step: self.postprocess.cc_step,
            ratio_max_hundredths: self.postprocess.ratio_max_hundredths,
            ratio_step_hundredths: self.postprocess.ratio_step_hundredths,
            min_offdiag: self.postprocess.min_offdiag,
        }
    }

    /// Hash of the resolved configuration (after CLI overrides), embedded in
    /// every artifact for provenance.
    pub fn config_hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid_defaults() {
        let config: PipelineConfig = toml::from_str("").unwrap();
        config.validate().unwrap();
        assert_eq!(config.task.name, "PED");
        assert_eq!(config.metrics.set, vec!["lw_dice", "lw_nsd"]);
        assert_eq!(config.run.seed, 42);
    }

    #[test]
    fn hash_changes_with_content() {
        let a: PipelineConfig = toml::from_str("").unwrap();
        let mut b = a.clone();
        b.run.seed = 43;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash(), a.clone().config_hash());
    }

    #[test]
    fn bad_values_rejected() {
        let bad: PipelineConfig = toml::from_str("[metrics]\ntau_mm = -1.0\n").unwrap();
        assert!(bad.validate().is_err());
        let bad2: PipelineConfig = toml::from_str("[metrics]\nconnectivity = 7\n").unwrap();
        assert!(bad2.validate().is_err());
        assert!(toml::from_str::<PipelineConfig>("[metrics]\nnope = 1\n").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.toml");
        std::fs::write(
            &p,
            "[task]\nname = \"MET\"\n\n[fusion]\nmode = \"staple\"\n\n[run]\nseed = 7\n",
        )
        .unwrap();
        let config = PipelineConfig::from_file(&p).unwrap();
        assert_eq!(config.task.name, "MET");
        assert_eq!(config.fusion.mode, FusionMode::Staple);
        assert_eq!(config.run.seed, 7);
        let spec = config.task_spec(dir.path()).unwrap();
        assert_eq!(spec.name, "MET");
    }
}
