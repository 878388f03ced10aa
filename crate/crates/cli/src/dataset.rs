//! Dataset directories: per-scene files plus a checksummed manifest.
//!
//! Layout: `manifest.json`, `observation.json` (shared `{C,H,W}` sidecar),
//! `scenes/NNNNNN.json`, `labels/NNNNNN.pgm`, `obs/NNNNNN.f32`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use simgap::adapt::Dataset;
use simgap::bev::{estimate_marginal, rasterize, GridSpec, LabelGrid, MarginalAccumulator, MarginalMap};
use simgap::sampling::{
    blend, prior_to_grid, road_structure_sample_with, sample_from_grid, sample_npc_count, target_prior_from_marginal,
    BlendSpec, PriorGrid, RoadStructureParams, SpatialPrior,
};
use simgap::seed::derive_seed;
use simgap::sensor::{render, DomainRenderParams, Observation};
use simgap::world::{build_map, AssetTable, Pose2, Scene};

use crate::config::{DatasetConfig, SamplerSpec};
use crate::CliError;

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const SIDECAR_FILE: &str = "observation.json";
const SCENE_STREAM: u64 = 0x7363_656e;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: usize,
    pub seed: u64,
    pub npcs: usize,
    pub scene: String,
    pub label: String,
    pub observation: String,
    pub scene_sha256: String,
    pub label_sha256: String,
    pub observation_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub scene_count: usize,
    pub grid: GridSpec,
    pub sampler: String,
    pub observation_sidecar: String,
    pub config: DatasetConfig,
    pub records: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.schema_version != MANIFEST_SCHEMA {
            bail!("{}: unsupported schema version {}", path.display(), m.schema_version);
        }
        if m.records.len() != m.scene_count {
            bail!("{}: {} records for {} scenes", path.display(), m.records.len(), m.scene_count);
        }
        Ok(m)
    }

    /// Histogram of NPC counts: entry `k` counts scenes with `k` NPCs.
    pub fn npc_histogram(&self) -> Vec<usize> {
        let max = self.records.iter().map(|r| r.npcs).max().unwrap_or(0);
        let mut h = vec![0; max + 1];
        for r in &self.records {
            h[r.npcs] += 1;
        }
        h
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A sampler ready to place NPCs.
enum Placement {
    Grid(PriorGrid),
    Road(RoadStructureParams),
}

/// Reads a label marginal from a dataset directory or a marginal blob whose
/// header sits next to it with a `.json` extension.
pub fn load_marginal(path: &Path) -> anyhow::Result<MarginalMap> {
    if path.is_dir() {
        let (_, labels) = load_labels(path)?;
        return Ok(estimate_marginal(&labels)?);
    }
    let header = path.with_extension("json");
    MarginalMap::load(path, &header).with_context(|| format!("loading marginal {}", path.display()))
}

fn placement(cfg: &DatasetConfig) -> anyhow::Result<Placement> {
    let grid = cfg.grid;
    let target = |path: &Path| -> anyhow::Result<PriorGrid> {
        let m = load_marginal(path)?;
        if m.spec != grid {
            return Err(CliError::Validation(format!(
                "dataset.sampler.marginal: grid {:?} does not match dataset grid {:?}",
                m.spec, grid
            ))
            .into());
        }
        Ok(target_prior_from_marginal(&m)?)
    };
    Ok(match &cfg.sampler {
        SamplerSpec::SpatialPrior {} => Placement::Grid(prior_to_grid(&SpatialPrior::default(), grid)?),
        SamplerSpec::RoadStructure { min_distance, decay } => {
            Placement::Road(RoadStructureParams { min_distance: *min_distance, decay: *decay })
        }
        SamplerSpec::TargetPrior { marginal } => Placement::Grid(target(marginal)?),
        SamplerSpec::Blend { alpha, marginal } => Placement::Grid(blend(&BlendSpec {
            alpha: *alpha,
            a: prior_to_grid(&SpatialPrior::default(), grid)?,
            b: target(marginal)?,
        })?),
    })
}

/// Builds scene `index` of the dataset: the scene, its label and observation.
fn build_scene(
    cfg: &DatasetConfig,
    placement: &Placement,
    assets: &AssetTable,
    render_params: &DomainRenderParams,
    index: usize,
) -> anyhow::Result<(Scene, LabelGrid, Observation)> {
    let seed = derive_seed(cfg.seed, SCENE_STREAM, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map_id = cfg.map_ids[rng.gen_range(0..cfg.map_ids.len())];
    let n = sample_npc_count(&cfg.npc_count, &mut rng);
    let mut scene = Scene::new(map_id, cfg.grid.extent, render_params.nuisance(), seed);
    match placement {
        Placement::Grid(g) => {
            sample_from_grid(&mut scene, g, n, &mut rng, assets);
        }
        Placement::Road(params) => {
            let map = build_map(map_id, cfg.map_extent, seed)?;
            let ego = pick_ego(&map.spawn_candidates, cfg.map_extent - cfg.grid.extent, &mut rng)
                .ok_or_else(|| anyhow!("map {map_id} (seed {seed}) has no spawn points"))?;
            scene.ego = ego;
            road_structure_sample_with(&mut scene, &map, n, ego, &mut rng, assets, *params)?;
        }
    }
    let label = rasterize(&scene, &cfg.grid);
    let obs = render(&scene, render_params, &cfg.grid, &mut rng);
    Ok((scene, label, obs))
}

/// A uniformly drawn lane point whose view window stays inside the map when
/// possible.
fn pick_ego(candidates: &[Pose2], margin: f64, rng: &mut ChaCha8Rng) -> Option<Pose2> {
    let inner: Vec<&Pose2> = candidates.iter().filter(|p| p.x1.abs() <= margin && p.x2.abs() <= margin).collect();
    if inner.is_empty() {
        return candidates.get(rng.gen_range(0..candidates.len().max(1))).copied();
    }
    Some(*inner[rng.gen_range(0..inner.len())])
}

fn scene_bytes(scene: &Scene, label: &LabelGrid, obs: &Observation) -> anyhow::Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
    let s = serde_json::to_vec(scene)?;
    let mut l = Vec::new();
    label.write_pgm(&mut l)?;
    let mut o = Vec::new();
    obs.write(&mut o)?;
    Ok((s, l, o))
}

/// Writes a dataset to `out`. Scenes are built in parallel on `threads`
/// workers (all cores when `None`); output does not depend on the count.
pub fn generate(cfg: &DatasetConfig, out: &Path, threads: Option<usize>) -> anyhow::Result<DatasetManifest> {
    cfg.validate()?;
    let placement = placement(cfg)?;
    let assets = AssetTable::builtin().truncated(cfg.asset_count)?;
    let render_params = cfg.render.params();
    for sub in ["scenes", "labels", "obs"] {
        fs::create_dir_all(out.join(sub)).with_context(|| format!("creating {}", out.join(sub).display()))?;
    }
    let work = |i: usize| -> anyhow::Result<SceneRecord> {
        let (scene, label, obs) = build_scene(cfg, &placement, &assets, &render_params, i)?;
        let (s, l, o) = scene_bytes(&scene, &label, &obs)?;
        let rec = SceneRecord {
            id: i,
            seed: scene.seed,
            npcs: scene.npcs.len(),
            scene: format!("scenes/{i:06}.json"),
            label: format!("labels/{i:06}.pgm"),
            observation: format!("obs/{i:06}.f32"),
            scene_sha256: sha256_hex(&s),
            label_sha256: sha256_hex(&l),
            observation_sha256: sha256_hex(&o),
        };
        for (rel, bytes) in [(&rec.scene, &s), (&rec.label, &l), (&rec.observation, &o)] {
            fs::write(out.join(rel), bytes).with_context(|| format!("writing {}", out.join(rel).display()))?;
        }
        Ok(rec)
    };
    let records: Vec<SceneRecord> = in_pool(threads, || (0..cfg.scenes).into_par_iter().map(work).collect::<anyhow::Result<Vec<_>>>())?;
    let sidecar = serde_json::json!({ "C": Observation::CHANNELS, "H": cfg.grid.size(), "W": cfg.grid.size() });
    fs::write(out.join(SIDECAR_FILE), sidecar.to_string())?;
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA,
        seed: cfg.seed,
        scene_count: cfg.scenes,
        grid: cfg.grid,
        sampler: cfg.sampler.describe(),
        observation_sidecar: SIDECAR_FILE.into(),
        config: cfg.clone(),
        records,
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Runs `f` on a dedicated pool of `threads` workers, or the global pool.
pub fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().expect("thread pool").install(f),
        None => f(),
    }
}

fn read_checked(dir: &Path, rel: &str, sha: &str) -> anyhow::Result<Vec<u8>> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    if sha256_hex(&bytes) != sha {
        bail!("checksum mismatch for {}", path.display());
    }
    Ok(bytes)
}

/// Checks every file referenced by the manifest against its checksum.
pub fn verify(dir: &Path) -> anyhow::Result<DatasetManifest> {
    let m = DatasetManifest::load(dir)?;
    m.records.par_iter().try_for_each(|r| -> anyhow::Result<()> {
        read_checked(dir, &r.scene, &r.scene_sha256)?;
        read_checked(dir, &r.label, &r.label_sha256)?;
        read_checked(dir, &r.observation, &r.observation_sha256)?;
        Ok(())
    })?;
    Ok(m)
}

pub fn load_labels(dir: &Path) -> anyhow::Result<(DatasetManifest, Vec<LabelGrid>)> {
    let m = DatasetManifest::load(dir)?;
    let labels = m
        .records
        .par_iter()
        .map(|r| Ok(LabelGrid::read_pgm(&read_checked(dir, &r.label, &r.label_sha256)?[..], m.grid)?))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((m, labels))
}

/// Streams the label marginal without holding every label in memory.
pub fn marginal_of(dir: &Path) -> anyhow::Result<(DatasetManifest, MarginalMap)> {
    let m = DatasetManifest::load(dir)?;
    let mut acc = MarginalAccumulator::new(m.grid);
    for r in &m.records {
        acc.add(&LabelGrid::read_pgm(&read_checked(dir, &r.label, &r.label_sha256)?[..], m.grid)?)?;
    }
    let marginal = acc.finish()?;
    Ok((m, marginal))
}

/// Loads observations and labels, verifying checksums.
pub fn load_dataset(dir: &Path) -> anyhow::Result<(DatasetManifest, Dataset)> {
    let m = DatasetManifest::load(dir)?;
    let sidecar = fs::read_to_string(dir.join(&m.observation_sidecar))
        .with_context(|| format!("reading {}", dir.join(&m.observation_sidecar).display()))?;
    let pairs = m
        .records
        .par_iter()
        .map(|r| {
            let label = LabelGrid::read_pgm(&read_checked(dir, &r.label, &r.label_sha256)?[..], m.grid)?;
            let obs = Observation::read(&read_checked(dir, &r.observation, &r.observation_sha256)?[..], &sidecar)?;
            Ok((obs, label))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let (images, labels) = pairs.into_iter().unzip();
    Ok((m, Dataset::new(images, labels)?))
}

pub fn load_scene(dir: &Path, rec: &SceneRecord) -> anyhow::Result<Scene> {
    Ok(serde_json::from_slice(&read_checked(dir, &rec.scene, &rec.scene_sha256)?)?)
}

/// Path of a dataset's manifest.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
