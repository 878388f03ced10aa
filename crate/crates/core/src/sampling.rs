//! NPC placement strategies: the road-agnostic lateral prior, priors read
//! off label marginals and their blends, the map-following sampler, and
//! NPC-count distributions.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::{GridSpec, MarginalMap};
use crate::pgm::{read_pgm, write_pgm, Pgm};
use crate::world::{AssetTable, MapSpec, NpcSpec, Pose2, Scene};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("degenerate prior: {0}")]
    DegeneratePrior(String),
    #[error("grid geometry mismatch: {0:?} vs {1:?}")]
    GeometryMismatch(GridSpec, GridSpec),
    #[error("no valid spawn points beyond {0} m of the ego")]
    NoSpawnPoints(f64),
    #[error("invalid sampler: {0}")]
    InvalidSampler(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Piecewise-linear lateral density: 0.6 at the ego's lane, 0.5 at 12.5 m,
/// falling to zero at 50 m; constant along the driving direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialPrior {
    pub breakpoints: [f64; 3],
    pub values: [f64; 3],
}

impl Default for SpatialPrior {
    fn default() -> Self {
        Self { breakpoints: [0.0, 12.5, 50.0], values: [0.6, 0.5, 0.0] }
    }
}

impl SpatialPrior {
    pub fn density(&self, x2: f64) -> f64 {
        let d = x2.abs();
        let [b0, b1, b2] = self.breakpoints;
        let [v0, v1, v2] = self.values;
        if d <= b1 {
            v0 + (v1 - v0) * (d - b0) / (b1 - b0)
        } else if d <= b2 {
            v1 + (v2 - v1) * (d - b1) / (b2 - b1)
        } else {
            0.0
        }
    }
}

/// Unnormalized lateral placement density of the default [`SpatialPrior`].
pub fn spatial_prior_density(x2: f64) -> f64 {
    let d = x2.abs();
    if d <= 12.5 {
        -d / 125.0 + 0.6
    } else if d <= 50.0 {
        -(d - 50.0) / 75.0
    } else {
        0.0
    }
}

/// Normalized placement weights over grid cells, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorGrid {
    pub spec: GridSpec,
    pub weights: Vec<f64>,
}

impl PriorGrid {
    /// Normalizes non-negative weights.
    pub fn from_weights(spec: GridSpec, weights: Vec<f64>) -> Result<Self, SamplingError> {
        spec.validate().map_err(|e| SamplingError::DegeneratePrior(e.to_string()))?;
        if weights.len() != spec.len() {
            return Err(SamplingError::DegeneratePrior(format!("{} weights for {} cells", weights.len(), spec.len())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SamplingError::DegeneratePrior("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(SamplingError::DegeneratePrior("all weights are zero".into()));
        }
        Ok(Self { spec, weights: weights.into_iter().map(|w| w / total).collect() })
    }

    pub fn uniform(spec: GridSpec) -> Result<Self, SamplingError> {
        Self::from_weights(spec, vec![1.0; spec.len()])
    }

    /// PGM (16-bit, scaled so the largest weight is 65535) plus a JSON sidecar.
    pub fn write<W: Write>(&self, w: W) -> Result<String, SamplingError> {
        let n = self.spec.size();
        let max = self.weights.iter().cloned().fold(0.0, f64::max);
        let data = self.weights.iter().map(|&v| (v / max * 65535.0).round() as u16).collect();
        write_pgm(w, &Pgm { width: n, height: n, maxval: 65535, data })?;
        let sidecar = PriorSidecar {
            extent: self.spec.extent,
            resolution: self.spec.resolution,
            max_weight: max,
            normalization: 65535.0 / max,
        };
        serde_json::to_string(&sidecar).map_err(|e| SamplingError::Format(e.to_string()))
    }

    pub fn read<R: Read>(r: R, sidecar_json: &str) -> Result<Self, SamplingError> {
        let side: PriorSidecar = serde_json::from_str(sidecar_json).map_err(|e| SamplingError::Format(e.to_string()))?;
        let spec = GridSpec::new(side.extent, side.resolution).map_err(|e| SamplingError::Format(e.to_string()))?;
        let img = read_pgm(r)?;
        if img.width != spec.size() || img.height != spec.size() {
            return Err(SamplingError::Format(format!("prior is {}x{}, sidecar implies {}", img.width, img.height, spec.size())));
        }
        let scale = side.max_weight / img.maxval as f64;
        Self::from_weights(spec, img.data.iter().map(|&v| v as f64 * scale).collect())
    }

    pub fn save(&self, pgm: &Path, sidecar: &Path) -> Result<(), SamplingError> {
        let json = self.write(std::io::BufWriter::new(std::fs::File::create(pgm)?))?;
        std::fs::write(sidecar, json)?;
        Ok(())
    }

    pub fn load(pgm: &Path, sidecar: &Path) -> Result<Self, SamplingError> {
        let json = std::fs::read_to_string(sidecar)?;
        Self::read(std::fs::File::open(pgm)?, &json)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorSidecar {
    extent: f64,
    resolution: f64,
    max_weight: f64,
    /// Multiply a normalized weight by this to get its PGM sample.
    normalization: f64,
}

/// Evaluates the prior at every cell center of `spec` and normalizes.
pub fn prior_to_grid(prior: &SpatialPrior, spec: GridSpec) -> Result<PriorGrid, SamplingError> {
    let n = spec.size();
    let row: Vec<f64> = (0..n).map(|c| prior.density(spec.x2_of_col(c))).collect();
    let weights = (0..n).flat_map(|_| row.iter().copied()).collect();
    PriorGrid::from_weights(spec, weights)
}

pub fn target_prior_from_marginal(m: &MarginalMap) -> Result<PriorGrid, SamplingError> {
    PriorGrid::from_weights(m.spec, m.freq.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendSpec {
    pub alpha: f64,
    pub a: PriorGrid,
    pub b: PriorGrid,
}

/// `alpha·a + (1 − alpha)·b`.
pub fn blend(spec: &BlendSpec) -> Result<PriorGrid, SamplingError> {
    if !(0.0..=1.0).contains(&spec.alpha) {
        return Err(SamplingError::InvalidSampler(format!("blend alpha {} outside [0, 1]", spec.alpha)));
    }
    if spec.a.spec != spec.b.spec {
        return Err(SamplingError::GeometryMismatch(spec.a.spec, spec.b.spec));
    }
    let (al, be) = (spec.alpha, 1.0 - spec.alpha);
    let w = spec.a.weights.iter().zip(&spec.b.weights).map(|(x, y)| al * x + be * y).collect();
    PriorGrid::from_weights(spec.a.spec, w)
}

// Weighted ordering without replacement: sorting by U^(1/w) is equivalent to
// successive weighted draws (Gumbel-top-k in exponential form).
fn weighted_order<R: Rng>(weights: impl Iterator<Item = (usize, f64)>, rng: &mut R) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .filter(|&(_, w)| w > 0.0)
        .map(|(i, w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Draws cells without replacement in proportion to their weight and tries
/// to place one NPC (uniform yaw, uniform asset) at each cell center until
/// `n` are accepted or the cells run out.
pub fn sample_from_grid<R: Rng>(
    scene: &mut Scene,
    grid: &PriorGrid,
    n: usize,
    rng: &mut R,
    assets: &AssetTable,
) -> Vec<NpcSpec> {
    let mut placed = Vec::new();
    if n == 0 {
        return placed;
    }
    let size = grid.spec.size();
    for cell in weighted_order(grid.weights.iter().copied().enumerate(), rng) {
        let (r, c) = (cell / size, cell % size);
        let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
        let npc = assets.draw(rng, Pose2::new(grid.spec.x1_of_row(r), grid.spec.x2_of_col(c), yaw));
        if scene.try_place(npc) {
            placed.push(npc);
            if placed.len() == n {
                break;
            }
        }
    }
    placed
}

/// Map-following sampler parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoadStructureParams {
    /// Candidates at or within this distance of the ego are excluded.
    pub min_distance: f64,
    /// Length scale of the `exp(-d / scale)` preference for nearby candidates;
    /// `None` weights all remaining candidates equally.
    pub decay: Option<f64>,
}

impl Default for RoadStructureParams {
    fn default() -> Self {
        Self { min_distance: 5.0, decay: Some(25.0) }
    }
}

/// Places NPCs at lane spawn candidates (with lane headings), preferring
/// candidates near the ego. Map poses are expressed in the ego frame.
pub fn road_structure_sample<R: Rng>(
    scene: &mut Scene,
    map: &MapSpec,
    n: usize,
    ego: Pose2,
    rng: &mut R,
    assets: &AssetTable,
) -> Result<Vec<NpcSpec>, SamplingError> {
    road_structure_sample_with(scene, map, n, ego, rng, assets, RoadStructureParams::default())
}

pub fn road_structure_sample_with<R: Rng>(
    scene: &mut Scene,
    map: &MapSpec,
    n: usize,
    ego: Pose2,
    rng: &mut R,
    assets: &AssetTable,
    params: RoadStructureParams,
) -> Result<Vec<NpcSpec>, SamplingError> {
    let weights: Vec<(usize, f64)> = map
        .spawn_candidates
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let d = ego.distance(p);
            (d > params.min_distance).then(|| (i, params.decay.map_or(1.0, |s| (-d / s).exp())))
        })
        .collect();
    if weights.is_empty() {
        return Err(SamplingError::NoSpawnPoints(params.min_distance));
    }
    let mut placed = Vec::new();
    if n == 0 {
        return Ok(placed);
    }
    for i in weighted_order(weights.into_iter(), rng) {
        let pose = ego.to_local(&map.spawn_candidates[i]);
        if !scene.in_bounds(&pose) {
            continue;
        }
        let npc = assets.draw(rng, pose);
        if scene.try_place(npc) {
            placed.push(npc);
            if placed.len() == n {
                break;
            }
        }
    }
    Ok(placed)
}

/// Distribution of the number of NPCs requested per scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NpcCountSampler {
    /// Inclusive range.
    Uniform { lo: usize, hi: usize },
    Fixed { n: usize },
    /// `histogram[k]` is the relative weight of `k` NPCs.
    Empirical { histogram: Vec<f64> },
}

impl NpcCountSampler {
    pub fn validate(&self) -> Result<(), SamplingError> {
        match self {
            NpcCountSampler::Uniform { lo, hi } if lo > hi => {
                Err(SamplingError::InvalidSampler(format!("uniform count range {lo}..={hi} is empty")))
            }
            NpcCountSampler::Empirical { histogram } => {
                if histogram.is_empty() || histogram.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(SamplingError::InvalidSampler("histogram must be nonempty and non-negative".into()));
                }
                if histogram.iter().sum::<f64>() <= 0.0 {
                    return Err(SamplingError::InvalidSampler("histogram has no mass".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            NpcCountSampler::Uniform { lo, hi } => (*lo + *hi) as f64 / 2.0,
            NpcCountSampler::Fixed { n } => *n as f64,
            NpcCountSampler::Empirical { histogram } => {
                let total: f64 = histogram.iter().sum();
                histogram.iter().enumerate().map(|(k, w)| k as f64 * w).sum::<f64>() / total
            }
        }
    }
}

pub fn sample_npc_count<R: Rng>(s: &NpcCountSampler, rng: &mut R) -> usize {
    match s {
        NpcCountSampler::Uniform { lo, hi } => rng.gen_range(*lo..=*hi),
        NpcCountSampler::Fixed { n } => *n,
        NpcCountSampler::Empirical { histogram } => {
            WeightedIndex::new(histogram).expect("validated histogram").sample(rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::world::{build_map, MapId, NuisanceParams};

    fn empty_scene() -> Scene {
        Scene::new(MapId::Straight, 50.0, NuisanceParams::default(), 0)
    }

    #[test]
    fn density_fixtures() {
        assert_eq!(spatial_prior_density(0.0), 0.6);
        assert!((spatial_prior_density(12.5) - 0.5).abs() < 1e-15);
        assert!((spatial_prior_density(-12.5) - 0.5).abs() < 1e-15);
        assert!((spatial_prior_density(25.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(spatial_prior_density(60.0), 0.0);
        let p = SpatialPrior::default();
        for x in [-70.0, -50.0, -20.0, -3.0, 0.0, 7.7, 12.5, 33.0, 50.0] {
            assert!((p.density(x) - spatial_prior_density(x)).abs() < 1e-15, "{x}");
        }
    }

    #[test]
    fn grid_is_x1_independent_and_normalized() {
        let g = prior_to_grid(&SpatialPrior::default(), GridSpec::new(50.0, 1.0).unwrap()).unwrap();
        let n = g.spec.size();
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for r in 1..n {
            assert_eq!(g.weights[r * n..(r + 1) * n], g.weights[..n]);
        }
        // centers sit at half-cell offsets, so the lane cell nearest the ego is x2 = 0.5
        let col = |x2: f64| g.spec.cell_of(0.0, x2).unwrap().1;
        assert!((g.weights[col(0.5)] / g.weights[col(12.5)] - 0.596 / 0.5).abs() < 1e-9);
        assert!((g.weights[col(-12.5)] / g.weights[col(25.5)] - 0.5 / (24.5 / 75.0)).abs() < 1e-9);
    }

    #[test]
    fn degenerate_prior_is_rejected() {
        let p = SpatialPrior { breakpoints: [0.0, 12.5, 50.0], values: [0.0, 0.0, 0.0] };
        assert!(matches!(prior_to_grid(&p, GridSpec::default()), Err(SamplingError::DegeneratePrior(_))));
    }

    #[test]
    fn marginal_normalizes_into_prior() {
        let spec = GridSpec::new(1.0, 1.0).unwrap();
        let m = MarginalMap { spec, freq: vec![0.2, 0.0, 0.6, 0.0], count: 5 };
        let p = target_prior_from_marginal(&m).unwrap();
        for (w, want) in p.weights.iter().zip([0.25, 0.0, 0.75, 0.0]) {
            assert!((w - want).abs() < 1e-15);
        }
        let zero = MarginalMap { spec, freq: vec![0.0; 4], count: 5 };
        assert!(target_prior_from_marginal(&zero).is_err());
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let spec = GridSpec::new(1.0, 1.0).unwrap();
        let a = PriorGrid::from_weights(spec, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = PriorGrid::from_weights(spec, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let mk = |alpha| blend(&BlendSpec { alpha, a: a.clone(), b: b.clone() }).unwrap();
        assert_eq!(mk(1.0), a);
        assert_eq!(mk(0.0), b);
        assert_eq!(mk(0.5).weights, vec![0.5, 0.0, 0.0, 0.5]);
        let other = PriorGrid::uniform(GridSpec::new(2.0, 1.0).unwrap()).unwrap();
        assert!(blend(&BlendSpec { alpha: 0.5, a, b: other }).is_err());
    }

    #[test]
    fn delta_prior_places_one() {
        let spec = GridSpec::new(10.0, 1.0).unwrap();
        let mut w = vec![0.0; spec.len()];
        w[37] = 1.0;
        let g = PriorGrid::from_weights(spec, w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let assets = AssetTable::builtin();
        assert!(sample_from_grid(&mut empty_scene(), &g, 0, &mut rng, &assets).is_empty());
        assert_eq!(sample_from_grid(&mut empty_scene(), &g, 3, &mut rng, &assets).len(), 1);
    }

    #[test]
    fn near_candidates_are_excluded() {
        let map = build_map(MapId::Straight, 20.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let assets = AssetTable::builtin();
        let mut scene = empty_scene();
        let npcs = road_structure_sample(&mut scene, &map, 1000, Pose2::origin(), &mut rng, &assets).unwrap();
        assert!(!npcs.is_empty());
        assert!(npcs.iter().all(|n| n.pose.x1.hypot(n.pose.x2) > 5.0));
        let tiny = build_map(MapId::Straight, 2.0, 0).unwrap();
        let err = road_structure_sample(&mut empty_scene(), &tiny, 1, Pose2::origin(), &mut rng, &assets);
        assert!(matches!(err, Err(SamplingError::NoSpawnPoints(_))));
    }

    #[test]
    fn count_samplers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!((0..100).all(|_| sample_npc_count(&NpcCountSampler::Fixed { n: 10 }, &mut rng) == 10));
        let single = NpcCountSampler::Empirical { histogram: vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0] };
        assert!((0..100).all(|_| sample_npc_count(&single, &mut rng) == 7));
        assert!(NpcCountSampler::Uniform { lo: 3, hi: 2 }.validate().is_err());
        assert!(NpcCountSampler::Empirical { histogram: vec![] }.validate().is_err());
    }

    #[test]
    fn prior_file_round_trip() {
        let g = prior_to_grid(&SpatialPrior::default(), GridSpec::new(50.0, 2.0).unwrap()).unwrap();
        let mut buf = Vec::new();
        let side = g.write(&mut buf).unwrap();
        let back = PriorGrid::read(&buf[..], &side).unwrap();
        let l1: f64 = back.weights.iter().zip(&g.weights).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 < 1e-3, "{l1}");
    }
}
