//! Flat `key = value` run configuration. Every key is optional and falls
//! back to the task default; unknown keys and out-of-range values are
//! rejected at load.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ifnet::geometry::{ShapeKind, Vec3};
use ifnet::mesher::MesherConfig;
use ifnet::metrics::MetricConfig;
use ifnet::model::{DecoderConfig, EncoderConfig, ModelConfig, QueryConfig};
use ifnet::sampler::SamplerConfig;
use ifnet::trainer::TrainerConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("{key}: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    PointcloudSparse,
    PointcloudDense,
    Voxel32,
    Voxel128,
    SingleView,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::PointcloudSparse,
        Task::PointcloudDense,
        Task::Voxel32,
        Task::Voxel128,
        Task::SingleView,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::PointcloudSparse => "pointcloud_sparse",
            Task::PointcloudDense => "pointcloud_dense",
            Task::Voxel32 => "voxel_32",
            Task::Voxel128 => "voxel_128",
            Task::SingleView => "single_view",
        }
    }

    pub fn default_resolution(self) -> usize {
        match self {
            Task::PointcloudDense | Task::Voxel128 => 128,
            _ => 32,
        }
    }

    /// Points per input cloud; 0 for tasks without a sampled cloud.
    pub fn default_cloud_points(self) -> usize {
        match self {
            Task::PointcloudSparse => 300,
            Task::PointcloudDense => 3000,
            _ => 0,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task, expected one of {:?}", Task::ALL.map(Task::name)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub shape_count: usize,
    /// Kinds are assigned round-robin.
    pub kinds: Vec<ShapeKind>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub cloud_points: usize,
    pub view_direction: Vec3,
    pub depth_resolution: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub encoder: EncoderConfig,
    /// `None` means one input voxel, `1 / N`.
    pub neighbor_distance: Option<f64>,
    pub decoder: DecoderConfig,
    pub sampler: SamplerConfig,
    pub trainer: TrainerConfig,
    /// Steps between resumable checkpoints.
    pub checkpoint_interval: u64,
    pub mesher: MesherConfig,
    pub metrics: MetricConfig,
    pub data: DataConfig,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub seed: u64,
}

/// Keys in serialization order.
pub const KEYS: &[&str] = &[
    "task",
    "seed",
    "data_dir",
    "run_dir",
    "shape_count",
    "shape_kinds",
    "val_fraction",
    "test_fraction",
    "cloud_points",
    "view_direction",
    "depth_resolution",
    "resolution",
    "scales",
    "channels",
    "convs_per_scale",
    "neighbor_distance",
    "hidden",
    "samples",
    "sigma1",
    "sigma2",
    "near_ratio",
    "batch_shapes",
    "subsample",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_epsilon",
    "max_steps",
    "val_interval",
    "patience",
    "val_points",
    "checkpoint_interval",
    "output_resolution",
    "threshold",
    "chunk",
    "memory_budget_mb",
    "iou_points",
    "surface_points",
];

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        let n = task.default_resolution();
        Self {
            task,
            encoder: EncoderConfig {
                resolution: n,
                ..EncoderConfig::default()
            },
            neighbor_distance: None,
            decoder: DecoderConfig::default(),
            sampler: SamplerConfig::default(),
            trainer: TrainerConfig::default(),
            checkpoint_interval: 500,
            mesher: MesherConfig::default(),
            metrics: MetricConfig::default(),
            data: DataConfig {
                shape_count: 60,
                kinds: ShapeKind::ALL.to_vec(),
                val_fraction: 0.1,
                test_fraction: 0.2,
                cloud_points: task.default_cloud_points(),
                view_direction: Vec3::new(0.0, 0.0, -1.0),
                depth_resolution: 128,
            },
            data_dir: "data".into(),
            run_dir: "run".into(),
            seed: 0,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let n = self.encoder.resolution;
        ModelConfig {
            encoder: self.encoder.clone(),
            query: match self.neighbor_distance {
                Some(d) => QueryConfig { d },
                None => QueryConfig::for_resolution(n),
            },
            decoder: self.decoder.clone(),
        }
    }

    /// Applies the global seed to every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sampler.seed = seed;
        self.trainer.seed = seed;
        self.metrics.seed = seed;
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: k.into(),
                });
            }
            if pairs.iter().any(|(_, seen, _)| *seen == k) {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: k.into(),
                });
            }
            pairs.push((i + 1, k, v));
        }
        // the task picks the defaults every other key overrides
        let task = match pairs.iter().find(|(_, k, _)| *k == "task") {
            Some((_, k, v)) => parse_value(k, v)?,
            None => Task::Voxel32,
        };
        let mut cfg = Self::for_task(task);
        for (_, k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "task" => self.task = parse_value(key, v)?,
            "seed" => {
                let seed = parse_value(key, v)?;
                self.set_seed(seed);
            }
            "data_dir" => self.data_dir = v.into(),
            "run_dir" => self.run_dir = v.into(),
            "shape_count" => self.data.shape_count = parse_value(key, v)?,
            "shape_kinds" => self.data.kinds = parse_list(key, v)?,
            "val_fraction" => self.data.val_fraction = parse_value(key, v)?,
            "test_fraction" => self.data.test_fraction = parse_value(key, v)?,
            "cloud_points" => self.data.cloud_points = parse_value(key, v)?,
            "view_direction" => {
                let c: Vec<f64> = parse_list(key, v)?;
                if c.len() != 3 {
                    return Err(value_error(key, v, "expected three components"));
                }
                self.data.view_direction = Vec3::new(c[0], c[1], c[2]);
            }
            "depth_resolution" => self.data.depth_resolution = parse_value(key, v)?,
            "resolution" => self.encoder.resolution = parse_value(key, v)?,
            "scales" => self.encoder.scales = parse_value(key, v)?,
            "channels" => self.encoder.channels = parse_list(key, v)?,
            "convs_per_scale" => self.encoder.convs_per_scale = parse_value(key, v)?,
            "neighbor_distance" => self.neighbor_distance = if v == "auto" { None } else { Some(parse_value(key, v)?) },
            "hidden" => self.decoder.hidden = parse_list(key, v)?,
            "samples" => self.sampler.count = parse_value(key, v)?,
            "sigma1" => self.sampler.sigma1 = parse_value(key, v)?,
            "sigma2" => self.sampler.sigma2 = parse_value(key, v)?,
            "near_ratio" => self.sampler.ratio = parse_value(key, v)?,
            "batch_shapes" => self.trainer.batch_shapes = parse_value(key, v)?,
            "subsample" => self.trainer.r_size = parse_value(key, v)?,
            "learning_rate" => self.trainer.learning_rate = parse_value(key, v)?,
            "beta1" => self.trainer.beta1 = parse_value(key, v)?,
            "beta2" => self.trainer.beta2 = parse_value(key, v)?,
            "adam_epsilon" => self.trainer.adam_epsilon = parse_value(key, v)?,
            "max_steps" => self.trainer.max_steps = parse_value(key, v)?,
            "val_interval" => self.trainer.val_interval = parse_value(key, v)?,
            "patience" => self.trainer.patience = parse_value(key, v)?,
            "val_points" => self.trainer.val_points = parse_value(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_value(key, v)?,
            "output_resolution" => self.mesher.resolution = parse_value(key, v)?,
            "threshold" => self.mesher.threshold = parse_value(key, v)?,
            "chunk" => self.mesher.chunk = parse_value(key, v)?,
            "memory_budget_mb" => {
                let mb: usize = parse_value(key, v)?;
                self.mesher.memory_budget = mb.saturating_mul(1 << 20);
            }
            "iou_points" => self.metrics.iou_points = parse_value(key, v)?,
            "surface_points" => self.metrics.surface_points = parse_value(key, v)?,
            _ => unreachable!("keys are checked against KEYS"),
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        match key {
            "task" => self.task.to_string(),
            "seed" => self.seed.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "run_dir" => self.run_dir.display().to_string(),
            "shape_count" => self.data.shape_count.to_string(),
            "shape_kinds" => list(&self.data.kinds),
            "val_fraction" => self.data.val_fraction.to_string(),
            "test_fraction" => self.data.test_fraction.to_string(),
            "cloud_points" => self.data.cloud_points.to_string(),
            "view_direction" => list(self.data.view_direction.as_slice()),
            "depth_resolution" => self.data.depth_resolution.to_string(),
            "resolution" => self.encoder.resolution.to_string(),
            "scales" => self.encoder.scales.to_string(),
            "channels" => list(&self.encoder.channels),
            "convs_per_scale" => self.encoder.convs_per_scale.to_string(),
            "neighbor_distance" => self.neighbor_distance.map_or("auto".into(), |d| d.to_string()),
            "hidden" => list(&self.decoder.hidden),
            "samples" => self.sampler.count.to_string(),
            "sigma1" => self.sampler.sigma1.to_string(),
            "sigma2" => self.sampler.sigma2.to_string(),
            "near_ratio" => self.sampler.ratio.to_string(),
            "batch_shapes" => self.trainer.batch_shapes.to_string(),
            "subsample" => self.trainer.r_size.to_string(),
            "learning_rate" => self.trainer.learning_rate.to_string(),
            "beta1" => self.trainer.beta1.to_string(),
            "beta2" => self.trainer.beta2.to_string(),
            "adam_epsilon" => self.trainer.adam_epsilon.to_string(),
            "max_steps" => self.trainer.max_steps.to_string(),
            "val_interval" => self.trainer.val_interval.to_string(),
            "patience" => self.trainer.patience.to_string(),
            "val_points" => self.trainer.val_points.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "output_resolution" => self.mesher.resolution.to_string(),
            "threshold" => self.mesher.threshold.to_string(),
            "chunk" => self.mesher.chunk.to_string(),
            "memory_budget_mb" => (self.mesher.memory_budget >> 20).to_string(),
            "iou_points" => self.metrics.iou_points.to_string(),
            "surface_points" => self.metrics.surface_points.to_string(),
            _ => unreachable!("keys come from KEYS"),
        }
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value(k))).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn fmt::Display| ConfigError::Invalid(e.to_string());
        self.model_config().validate().map_err(|e| invalid(&e))?;
        self.sampler.validate().map_err(|e| invalid(&e))?;
        self.trainer.validate().map_err(|e| invalid(&e))?;
        self.mesher.validate().map_err(|e| invalid(&e))?;
        let d = &self.data;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if d.shape_count == 0 {
            return bad("shape_count must be positive".into());
        }
        if d.kinds.is_empty() {
            return bad("shape_kinds must name at least one kind".into());
        }
        for (name, f) in [("val_fraction", d.val_fraction), ("test_fraction", d.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("{name} {f} outside [0, 1)"));
            }
        }
        if d.val_fraction + d.test_fraction >= 1.0 {
            return bad("val_fraction + test_fraction must leave room for training shapes".into());
        }
        let needs_cloud = matches!(self.task, Task::PointcloudSparse | Task::PointcloudDense);
        if needs_cloud && d.cloud_points == 0 {
            return bad(format!("task {} needs cloud_points > 0", self.task));
        }
        if !(d.view_direction.norm() > 0.0 && d.view_direction.iter().all(|c| c.is_finite())) {
            return bad("view_direction must be a nonzero vector".into());
        }
        if d.depth_resolution < 2 {
            return bad("depth_resolution must be at least 2".into());
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be positive".into());
        }
        if self.trainer.r_size > self.sampler.count {
            return bad(format!(
                "subsample {} exceeds samples per shape {}",
                self.trainer.r_size, self.sampler.count
            ));
        }
        if self.metrics.iou_points == 0 || self.metrics.surface_points == 0 {
            return bad("metric sample counts must be positive".into());
        }
        Ok(())
    }
}

fn value_error(key: &str, value: &str, reason: impl fmt::Display) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: reason.to_string(),
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| value_error(key, v, e))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .map(|s| s.trim().parse().map_err(|e| value_error(key, v, e)))
        .collect()
}
