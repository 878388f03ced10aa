//! Run configuration: one JSON document with defaults for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use simgap::adapt::TrainConfig;
use simgap::bev::GridSpec;
use simgap::nn::ArchConfig;
use simgap::sampling::NpcCountSampler;
use simgap::sensor::{make_palette, Domain, DomainRenderParams};
use simgap::world::{MapId, NuisanceParams};

use crate::CliError;

const MAX_SCENES: usize = 1_000_000;
const MAX_NPCS: usize = 500;

/// How NPC positions are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerSpec {
    /// Road-agnostic lateral density.
    SpatialPrior {},
    /// Lane spawn points of a procedural map, weighted by distance to the ego.
    RoadStructure {
        #[serde(default = "default_min_distance")]
        min_distance: f64,
        /// Decay scale in meters; `null` weights all lane points equally.
        #[serde(default = "default_decay")]
        decay: Option<f64>,
    },
    /// Cell weights from a label marginal: a marginal blob or a dataset directory.
    TargetPrior { marginal: PathBuf },
    /// `alpha · spatial prior + (1 − alpha) · target prior`.
    Blend { alpha: f64, marginal: PathBuf },
}

fn default_min_distance() -> f64 {
    5.0
}

fn default_decay() -> Option<f64> {
    Some(25.0)
}

impl SamplerSpec {
    pub fn describe(&self) -> String {
        match self {
            SamplerSpec::SpatialPrior {} => "spatial_prior".into(),
            SamplerSpec::RoadStructure { min_distance, decay } => match decay {
                Some(d) => format!("road_structure(min_distance={min_distance}, decay={d})"),
                None => format!("road_structure(min_distance={min_distance}, uniform)"),
            },
            SamplerSpec::TargetPrior { marginal } => format!("target_prior({})", marginal.display()),
            SamplerSpec::Blend { alpha, marginal } => format!("blend(alpha={alpha}, {})", marginal.display()),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        match self {
            SamplerSpec::SpatialPrior {} => Ok(()),
            SamplerSpec::RoadStructure { min_distance, decay } => {
                if !(*min_distance >= 0.0 && min_distance.is_finite()) {
                    return invalid("dataset.sampler.min_distance", format!("{min_distance} must be >= 0"));
                }
                match decay {
                    Some(d) if !(*d > 0.0 && d.is_finite()) => invalid("dataset.sampler.decay", format!("{d} must be positive")),
                    _ => Ok(()),
                }
            }
            SamplerSpec::TargetPrior { .. } => Ok(()),
            SamplerSpec::Blend { alpha, .. } => {
                if (0.0..=1.0).contains(alpha) {
                    Ok(())
                } else {
                    invalid("dataset.sampler.alpha", format!("{alpha} outside [0, 1]"))
                }
            }
        }
    }

    /// The marginal path this sampler reads, if any.
    pub fn marginal_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            SamplerSpec::TargetPrior { marginal } | SamplerSpec::Blend { marginal, .. } => Some(marginal),
            _ => None,
        }
    }
}

/// Renderer preset plus optional nuisance overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub domain: Domain,
    pub weather: Option<f64>,
    pub postprocess_on: Option<bool>,
    pub palette_size: Option<usize>,
    pub noise_std: Option<f64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { domain: Domain::Sim, weather: None, postprocess_on: None, palette_size: None, noise_std: None }
    }
}

impl RenderConfig {
    pub fn real() -> Self {
        Self { domain: Domain::Real, ..Self::default() }
    }

    pub fn params(&self) -> DomainRenderParams {
        let mut p = DomainRenderParams::preset(self.domain);
        let base = p.nuisance();
        let n = NuisanceParams {
            weather: self.weather.unwrap_or(base.weather),
            postprocess_on: self.postprocess_on.unwrap_or(base.postprocess_on),
            palette_size: self.palette_size.unwrap_or(base.palette_size),
            noise_std: self.noise_std.unwrap_or(base.noise_std),
        };
        if n != base {
            p = p.with_nuisance(&n);
        }
        if self.palette_size.is_none() {
            p.palette = make_palette(base.palette_size);
        }
        p
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.palette_size == Some(0) {
            return invalid("dataset.render.palette_size", "must be positive");
        }
        self.params().validate().map_err(|e| CliError::Validation(format!("dataset.render: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Map archetypes drawn uniformly per scene.
    pub map_ids: Vec<MapId>,
    /// Half-size of procedural maps used by the road-structure sampler.
    pub map_extent: f64,
    pub scenes: usize,
    pub sampler: SamplerSpec,
    pub npc_count: NpcCountSampler,
    pub render: RenderConfig,
    /// Number of entries of the built-in asset table in use.
    pub asset_count: usize,
    pub grid: GridSpec,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            map_ids: vec![MapId::Straight, MapId::Curved, MapId::Intersection, MapId::GridTown],
            map_extent: 64.0,
            scenes: 2000,
            sampler: SamplerSpec::SpatialPrior {},
            npc_count: NpcCountSampler::Uniform { lo: 0, hi: 30 },
            render: RenderConfig::default(),
            asset_count: 32,
            grid: GridSpec::training(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// The stand-in for real-world traffic: dense urban grids with vehicles
    /// spread evenly over every lane, rendered with the real-domain preset.
    pub fn real_world() -> Self {
        Self {
            map_ids: vec![MapId::GridTown],
            sampler: SamplerSpec::RoadStructure { min_distance: default_min_distance(), decay: None },
            render: RenderConfig::real(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.map_ids.is_empty() {
            return invalid("dataset.map_ids", "must list at least one map");
        }
        if !(self.map_extent > 0.0 && self.map_extent.is_finite()) {
            return invalid("dataset.map_extent", format!("{} must be positive", self.map_extent));
        }
        if self.scenes == 0 || self.scenes > MAX_SCENES {
            return invalid("dataset.scenes", format!("{} outside 1..={MAX_SCENES}", self.scenes));
        }
        self.sampler.validate()?;
        self.npc_count.validate().map_err(|e| CliError::Validation(format!("dataset.npc_count: {e}")))?;
        let max_npcs = match &self.npc_count {
            NpcCountSampler::Uniform { hi, .. } => *hi,
            NpcCountSampler::Fixed { n } => *n,
            NpcCountSampler::Empirical { histogram } => histogram.len().saturating_sub(1),
        };
        if max_npcs > MAX_NPCS {
            return invalid("dataset.npc_count", format!("up to {max_npcs} NPCs exceeds {MAX_NPCS}"));
        }
        self.render.validate()?;
        let n_assets = simgap::world::AssetTable::builtin().len();
        if self.asset_count == 0 || self.asset_count > n_assets {
            return invalid("dataset.asset_count", format!("{} outside 1..={n_assets}", self.asset_count));
        }
        self.grid.validate().map_err(|e| CliError::Validation(format!("dataset.grid: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub adapt: TrainConfig,
    pub arch: ArchConfig,
    /// Labeled simulator dataset directory.
    pub source: Option<PathBuf>,
    /// Unlabeled target dataset directory.
    pub target: Option<PathBuf>,
    /// Labeled target dataset scored after each epoch.
    pub eval: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { adapt: TrainConfig::default(), arch: ArchConfig::default(), source: None, target: None, eval: None }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.adapt.validate().map_err(|e| CliError::Validation(format!("training.adapt: {e}")))?;
        self.arch.validate().map_err(|e| CliError::Validation(format!("training.arch: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { dataset: DatasetConfig::default(), training: TrainingConfig::default(), output_dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.training.validate()?;
        if self.training.arch.grid != self.dataset.grid.size() {
            return invalid(
                "training.arch.grid",
                format!("{} does not match the dataset grid of {} cells", self.training.arch.grid, self.dataset.grid.size()),
            );
        }
        Ok(())
    }

    /// Applies a `--seed` override to both the dataset and the trainer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.training.adapt.seed = seed;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn invalid<T>(field: &str, msg: impl std::fmt::Display) -> Result<T, CliError> {
    Err(CliError::Validation(format!("{field}: {msg}")))
}
