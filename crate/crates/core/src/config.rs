//! Run configuration: every module's hyperparameters in one TOML-backed
//! struct, validated against the modules' preconditions at load time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Bandwidth, DetectorConfig, MomentSource};
use crate::error::{Error, Result};
use crate::learner::{Arch, ModelConfig};
use crate::memory::{EvictionScope, MemoryPolicy};
use crate::stream::{DomainSpec, EpisodeParams, Schedule};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Which pipeline variant a run executes.
///
/// `Reservoir` and `UniformReplay` are the same baseline pathway (reservoir
/// memory, uniform sampling, weights 1); both names are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ours,
    Reservoir,
    Sequential,
    UniformReplay,
}

impl Method {
    pub fn uses_detector(&self) -> bool {
        matches!(self, Method::Ours)
    }

    pub fn uses_memory(&self) -> bool {
        !matches!(self, Method::Sequential)
    }

    pub fn uses_adaptive_sampling(&self) -> bool {
        matches!(self, Method::Ours)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Reservoir => "reservoir",
            Method::Sequential => "sequential",
            Method::UniformReplay => "uniform-replay",
        }
    }
}

fn default_schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSettings {
    pub alpha: f64,
    pub history_len: usize,
    pub window_size: usize,
    pub rho: f64,
    pub delta: f64,
    pub moment_source: MomentSource,
    pub bandwidth: Bandwidth,
    pub moment_warmup: usize,
    pub refractory: Option<usize>,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        // Harness default uses raw moments: the quantile reading of
        // delta = 1.64 applies to W itself, not W².
        DetectorSettings {
            alpha: 0.1,
            history_len: 5,
            window_size: 100,
            rho: 0.05,
            delta: 1.64,
            moment_source: MomentSource::Raw,
            bandwidth: Bandwidth::Auto,
            moment_warmup: 100,
            refractory: None,
        }
    }
}

impl DetectorSettings {
    pub fn to_detector_config(self) -> DetectorConfig {
        DetectorConfig {
            alpha: self.alpha,
            history_len: self.history_len,
            window_size: self.window_size,
            rho: self.rho,
            delta: self.delta,
            moment_source: self.moment_source,
            bandwidth: self.bandwidth,
            moment_warmup: self.moment_warmup,
            refractory: self.refractory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemorySettings {
    /// Total stored-task capacity. 0 disables the buffer entirely.
    pub capacity: usize,
    /// Sharpness of the eviction softmax (the proportionality constant in
    /// the cluster factor).
    pub eviction_beta: f64,
    /// "all" keeps memory balanced under long domain tails; "older" is the
    /// strict earlier-clusters-only rule.
    pub eviction_scope: EvictionScope,
}

impl Default for MemorySettings {
    fn default() -> Self {
        let policy = MemoryPolicy::balanced();
        MemorySettings {
            capacity: 60,
            eviction_beta: policy.eviction_beta,
            eviction_scope: policy.eviction_scope,
        }
    }
}

impl MemorySettings {
    pub fn policy(&self) -> MemoryPolicy {
        MemoryPolicy {
            eviction_beta: self.eviction_beta,
            eviction_scope: self.eviction_scope,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    /// Plan refresh cadence s.
    pub refresh_every: u64,
    /// Tasks sampled per cluster (R) when estimating cluster importance.
    pub tasks_per_cluster: usize,
    /// Replay batch size; 0 means "same as stream_batch".
    pub replay_batch: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            refresh_every: 10,
            tasks_per_cluster: 2,
            replay_batch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub input_dim: usize,
    pub embed_dim: usize,
    /// Hidden width; 0 selects the linear architecture.
    pub hidden: usize,
    pub learning_rate: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            input_dim: 16,
            embed_dim: 8,
            hidden: 0,
            learning_rate: 0.05,
        }
    }
}

impl ModelSettings {
    pub fn to_model_config(self) -> ModelConfig {
        ModelConfig {
            input_dim: self.input_dim,
            embed_dim: self.embed_dim,
            arch: if self.hidden == 0 {
                Arch::Linear
            } else {
                Arch::Mlp(self.hidden)
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSettings {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    /// Stream tasks per step fed to the meta update.
    pub stream_batch: usize,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        EpisodeSettings {
            n_way: 5,
            k_shot: 5,
            query_per_class: 10,
            stream_batch: 1,
        }
    }
}

impl EpisodeSettings {
    pub fn to_params(self) -> EpisodeParams {
        EpisodeParams {
            n_way: self.n_way,
            k_shot: self.k_shot,
            query_per_class: self.query_per_class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub episodes_per_domain: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            episodes_per_domain: 750,
        }
    }
}

/// Compact schedule description expanded into per-domain generator specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSettings {
    /// Per-segment step counts (the imbalance pattern).
    pub steps: Vec<usize>,
    pub class_count: usize,
    pub class_mean_scale: f64,
    /// One entry per segment, or a single entry shared by all.
    pub within_class_std: Vec<f64>,
    /// Pairwise domain-center distance in units of within_class_std.
    pub separation: f64,
    pub domain_seed: u64,
    /// Multiplies the step counts by 10 (the source pattern's full scale).
    pub paper_scale: bool,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        ScheduleSettings {
            steps: vec![500, 200, 600, 200, 200, 2400],
            class_count: 20,
            class_mean_scale: 2.5,
            within_class_std: vec![1.0, 1.4, 0.8, 1.2, 1.0, 1.6],
            separation: 6.0,
            domain_seed: 7,
            paper_scale: false,
        }
    }
}

/// Deterministic domain centers: random unit directions scaled so pairwise
/// distances land near `separation * std` (unit vectors in high dimension
/// are near-orthogonal, giving pairwise distance ≈ radius·√2).
pub fn domain_centers(count: usize, dim: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.iter().map(|x| x / norm * radius).collect()
        })
        .collect()
}

impl ScheduleSettings {
    pub fn segment_std(&self, index: usize) -> f64 {
        if self.within_class_std.len() == 1 {
            self.within_class_std[0]
        } else {
            self.within_class_std[index]
        }
    }

    pub fn build(&self, input_dim: usize) -> Result<Schedule> {
        if self.steps.is_empty() {
            return Err(Error::Config("schedule.steps is empty".into()));
        }
        if self.within_class_std.len() != 1 && self.within_class_std.len() != self.steps.len() {
            return Err(Error::Config(
                "within_class_std must have one entry or one per segment".into(),
            ));
        }
        let mean_std =
            self.within_class_std.iter().sum::<f64>() / self.within_class_std.len() as f64;
        let radius = self.separation * mean_std / std::f64::consts::SQRT_2;
        let centers = domain_centers(self.steps.len(), input_dim, radius, self.domain_seed);
        let scale = if self.paper_scale { 10 } else { 1 };
        let segments = self
            .steps
            .iter()
            .enumerate()
            .map(|(i, &steps)| {
                (
                    DomainSpec {
                        id: i as u64,
                        class_count: self.class_count,
                        class_mean_scale: self.class_mean_scale,
                        center: centers[i].clone(),
                        within_class_std: self.segment_std(i),
                        seed: self.domain_seed.wrapping_mul(1000).wrapping_add(i as u64),
                    },
                    steps * scale,
                )
            })
            .collect();
        let schedule = Schedule { segments };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Full experiment configuration. Flags on the CLI override file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub detector: DetectorSettings,
    pub memory: MemorySettings,
    pub sampler: SamplerSettings,
    pub model: ModelSettings,
    pub episodes: EpisodeSettings,
    pub eval: EvalSettings,
    pub schedule: ScheduleSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: default_schema_version(),
            method: Method::Ours,
            seed: 0,
            detector: DetectorSettings::default(),
            memory: MemorySettings::default(),
            sampler: SamplerSettings::default(),
            model: ModelSettings::default(),
            episodes: EpisodeSettings::default(),
            eval: EvalSettings::default(),
            schedule: ScheduleSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn effective_replay_batch(&self) -> usize {
        if self.sampler.replay_batch == 0 {
            self.episodes.stream_batch
        } else {
            self.sampler.replay_batch
        }
    }

    /// Checks every module's preconditions up front so a run can only abort
    /// on numeric grounds.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {}",
                self.schema_version
            )));
        }
        self.detector
            .to_detector_config()
            .validate()
            .map_err(|e| Error::Config(format!("detector: {e}")))?;
        if self.sampler.refresh_every == 0 {
            return Err(Error::Config("sampler.refresh_every must be >= 1".into()));
        }
        if self.sampler.tasks_per_cluster == 0 {
            return Err(Error::Config("sampler.tasks_per_cluster must be >= 1".into()));
        }
        if self.model.input_dim == 0 || self.model.embed_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(self.model.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.episodes.n_way == 0
            || self.episodes.k_shot == 0
            || self.episodes.query_per_class == 0
            || self.episodes.stream_batch == 0
        {
            return Err(Error::Config("episode shape parameters must be positive".into()));
        }
        if self.eval.episodes_per_domain == 0 {
            return Err(Error::Config("eval.episodes_per_domain must be >= 1".into()));
        }
        let schedule = self.schedule.build(self.model.input_dim)?;
        // Both splits must support n_way-way episodes: training episodes
        // draw from the 70% split, evaluation from the 30% split.
        let test_classes = self.schedule.class_count
            - ((0.7 * self.schedule.class_count as f64).round() as usize)
                .clamp(1, self.schedule.class_count - 1);
        if test_classes < self.episodes.n_way {
            return Err(Error::Config(format!(
                "test split has {} classes, need n_way = {}",
                test_classes, self.episodes.n_way
            )));
        }
        for (spec, _) in &schedule.segments {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Byte-stable canonical form used for comparing schedule compatibility.
    pub fn shared_setup_key(&self) -> String {
        format!(
            "{:?}|{:?}|{:?}|{:?}",
            self.schedule, self.episodes, self.model, self.eval
        )
    }
}
