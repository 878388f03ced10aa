//! Procedural top-down driving worlds: road maps with spawn candidates and
//! scenes of rectangular NPC vehicles around an ego car at the origin.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Road half-width shared by every archetype (8 m roads).
pub const ROAD_HALF_WIDTH: f64 = 4.0;
/// Spacing of the drivable-area discretization.
pub const MAP_RESOLUTION: f64 = 1.0;

pub const MIN_LENGTH: f64 = 2.0;
pub const MAX_LENGTH: f64 = 12.0;
pub const MIN_WIDTH: f64 = 1.2;
pub const MAX_WIDTH: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("unknown map `{0}`")]
    UnknownMap(String),
    #[error("invalid extent {0}: must be positive and finite")]
    InvalidExtent(f64),
    #[error("npc size {length}x{width} outside asset bounds")]
    InvalidNpc { length: f64, width: f64 },
    #[error("asset table: {0}")]
    Assets(String),
}

/// Position in meters relative to the ego car (x1 forward, x2 left) and a heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x1: f64,
    pub x2: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x1: f64, x2: f64, yaw: f64) -> Self {
        debug_assert!(x1.is_finite() && x2.is_finite() && yaw.is_finite());
        let mut yaw = yaw.rem_euclid(TAU);
        // rem_euclid can round up to exactly TAU for tiny negative inputs
        if yaw >= TAU {
            yaw = 0.0;
        }
        Self { x1, x2, yaw }
    }

    pub fn origin() -> Self {
        Self { x1: 0.0, x2: 0.0, yaw: 0.0 }
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        (self.x1 - other.x1).hypot(self.x2 - other.x2)
    }

    /// Expresses `world` (given in the same frame as `self`) in `self`'s local frame.
    pub fn to_local(&self, world: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (world.x1 - self.x1, world.x2 - self.x2);
        Pose2::new(c * dx + s * dy, -s * dx + c * dy, world.yaw - self.yaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapId {
    Straight,
    Curved,
    Intersection,
    GridTown,
}

impl MapId {
    pub const ALL: [MapId; 4] = [MapId::Straight, MapId::Curved, MapId::Intersection, MapId::GridTown];

    pub fn as_str(self) -> &'static str {
        match self {
            MapId::Straight => "straight",
            MapId::Curved => "curved",
            MapId::Intersection => "intersection",
            MapId::GridTown => "grid_town",
        }
    }
}

impl fmt::Display for MapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapId {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MapId::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| WorldError::UnknownMap(s.to_string()))
    }
}

/// Drivable mask over 1 m cells covering `[-extent, extent]²` plus the
/// spawn candidates at every drivable cell center.
///
/// Cell `(r, c)` has center `x1 = extent - (r + ½)`, `x2 = extent - (c + ½)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub map_id: MapId,
    pub extent: f64,
    pub seed: u64,
    pub cells: usize,
    #[serde(with = "mask_rows")]
    pub drivable: Vec<bool>,
    pub spawn_candidates: Vec<Pose2>,
}

mod mask_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(mask: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let side = (mask.len() as f64).sqrt().round() as usize;
        let rows: Vec<String> = mask
            .chunks(side.max(1))
            .map(|row| row.iter().map(|&b| if b { '#' } else { '.' }).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        Ok(rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect())
    }
}

impl MapSpec {
    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        (self.extent - (r as f64 + 0.5) * MAP_RESOLUTION, self.extent - (c as f64 + 0.5) * MAP_RESOLUTION)
    }

    /// Cell containing a map-frame point, if inside the map.
    pub fn cell_of(&self, x1: f64, x2: f64) -> Option<(usize, usize)> {
        let r = ((self.extent - x1) / MAP_RESOLUTION).floor();
        let c = ((self.extent - x2) / MAP_RESOLUTION).floor();
        let n = self.cells as f64;
        (r >= 0.0 && c >= 0.0 && r < n && c < n).then_some((r as usize, c as usize))
    }

    pub fn is_drivable(&self, x1: f64, x2: f64) -> bool {
        self.cell_of(x1, x2).is_some_and(|(r, c)| self.drivable[r * self.cells + c])
    }

    pub fn drivable_fraction(&self) -> f64 {
        self.drivable.iter().filter(|&&b| b).count() as f64 / self.drivable.len() as f64
    }
}

// Heading of a lane on a road running along `dir`; right-hand traffic,
// `side` > 0 when the point lies left of the road axis.
fn lane_heading(dir: f64, side: f64) -> f64 {
    if side > 0.0 {
        dir + PI
    } else {
        dir
    }
}

pub fn build_map(map_id: MapId, extent: f64, seed: u64) -> Result<MapSpec, WorldError> {
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(WorldError::InvalidExtent(extent));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_7073);
    let cells = ((2.0 * extent) / MAP_RESOLUTION).round().max(1.0) as usize;

    // Per-archetype classifier: Some(heading) for drivable points.
    let classify: Box<dyn Fn(f64, f64) -> Option<f64>> = match map_id {
        MapId::Straight => Box::new(|_x1, x2| (x2.abs() <= ROAD_HALF_WIDTH).then(|| lane_heading(0.0, x2))),
        MapId::Curved => {
            let amp = rng.gen_range(10.0..25.0);
            let wavelength = rng.gen_range(120.0..200.0);
            let phase = rng.gen_range(0.0..TAU);
            let k = TAU / wavelength;
            Box::new(move |x1: f64, x2: f64| {
                let center = amp * (k * x1 + phase).sin();
                let slope = amp * k * (k * x1 + phase).cos();
                // perpendicular distance to the center line, first order
                let off = (x2 - center) / (1.0 + slope * slope).sqrt();
                (off.abs() <= ROAD_HALF_WIDTH).then(|| lane_heading(slope.atan(), off))
            })
        }
        MapId::Intersection => Box::new(|x1: f64, x2: f64| {
            if x2.abs() <= ROAD_HALF_WIDTH {
                Some(lane_heading(0.0, x2))
            } else if x1.abs() <= ROAD_HALF_WIDTH {
                // road along x2; its left side is -x1
                Some(lane_heading(FRAC_PI_2, -x1))
            } else {
                None
            }
        }),
        MapId::GridTown => {
            let spacing = rng.gen_range(25.0..40.0);
            let off1 = rng.gen_range(0.0..spacing);
            let off2 = rng.gen_range(0.0..spacing);
            Box::new(move |x1: f64, x2: f64| {
                // signed offset to the nearest road of each family
                let d2 = (x2 - off2) - spacing * ((x2 - off2) / spacing).round();
                let d1 = (x1 - off1) - spacing * ((x1 - off1) / spacing).round();
                if d2.abs() <= ROAD_HALF_WIDTH {
                    Some(lane_heading(0.0, d2))
                } else if d1.abs() <= ROAD_HALF_WIDTH {
                    Some(lane_heading(FRAC_PI_2, -d1))
                } else {
                    None
                }
            })
        }
    };

    let mut drivable = vec![false; cells * cells];
    let mut spawn_candidates = Vec::new();
    for r in 0..cells {
        for c in 0..cells {
            let x1 = extent - (r as f64 + 0.5) * MAP_RESOLUTION;
            let x2 = extent - (c as f64 + 0.5) * MAP_RESOLUTION;
            if let Some(yaw) = classify(x1, x2) {
                drivable[r * cells + c] = true;
                spawn_candidates.push(Pose2::new(x1, x2, yaw));
            }
        }
    }
    Ok(MapSpec { map_id, extent, seed, cells, drivable, spawn_candidates })
}

/// One vehicle asset: footprint and base paint color.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Asset {
    pub length: f64,
    pub width: f64,
    pub color: [f64; 3],
}

/// Frozen table of vehicle assets (see `data/assets.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetTable {
    pub seed: u64,
    pub assets: Vec<Asset>,
}

const ASSETS_JSON: &str = include_str!("../data/assets.json");

impl AssetTable {
    pub const SEED: u64 = 20_210_806;
    pub const SIZE: usize = 32;

    /// The checked-in table.
    pub fn builtin() -> Self {
        serde_json::from_str(ASSETS_JSON).expect("embedded asset table parses")
    }

    /// Regenerates a table: 80% passenger cars, the rest vans/trucks/buses.
    pub fn generate(seed: u64, count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let round = |v: f64| (v * 100.0).round() / 100.0;
        let assets = (0..count)
            .map(|_| {
                let (length, width) = if rng.gen_bool(0.8) {
                    (rng.gen_range(3.6..5.2), rng.gen_range(1.6..2.1))
                } else {
                    (rng.gen_range(5.5..12.0), rng.gen_range(2.0..2.9))
                };
                let color = [round(rng.gen()), round(rng.gen()), round(rng.gen())];
                Asset { length: round(length), width: round(width), color }
            })
            .collect();
        Self { seed, assets }
    }

    /// Restricts the table to its first `n` entries (asset-count ablations).
    pub fn truncated(&self, n: usize) -> Result<Self, WorldError> {
        if n == 0 || n > self.assets.len() {
            return Err(WorldError::Assets(format!("cannot keep {n} of {} assets", self.assets.len())));
        }
        Ok(Self { seed: self.seed, assets: self.assets[..n].to_vec() })
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    /// NPC at `pose` built from a uniformly drawn asset.
    pub fn draw<R: Rng>(&self, rng: &mut R, pose: Pose2) -> NpcSpec {
        let asset_id = rng.gen_range(0..self.assets.len());
        let a = self.assets[asset_id];
        NpcSpec { pose, length: a.length, width: a.width, asset_id, color: a.color }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpcSpec {
    pub pose: Pose2,
    pub length: f64,
    pub width: f64,
    pub asset_id: usize,
    pub color: [f64; 3],
}

impl NpcSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        let ok = (MIN_LENGTH..=MAX_LENGTH).contains(&self.length) && (MIN_WIDTH..=MAX_WIDTH).contains(&self.width);
        if ok {
            Ok(())
        } else {
            Err(WorldError::InvalidNpc { length: self.length, width: self.width })
        }
    }

    /// Corners counter-clockwise starting front-right.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.pose.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let at = |a: f64, b: f64| (self.pose.x1 + c * a - s * b, self.pose.x2 + s * a + c * b);
        [at(hl, -hw), at(hl, hw), at(-hl, hw), at(-hl, -hw)]
    }

    /// Strict interior test for a point in the scene frame.
    pub fn contains(&self, x1: f64, x2: f64) -> bool {
        let (s, c) = self.pose.yaw.sin_cos();
        let (dx, dy) = (x1 - self.pose.x1, x2 - self.pose.x2);
        let along = c * dx + s * dy;
        let across = -s * dx + c * dy;
        along.abs() < self.length / 2.0 && across.abs() < self.width / 2.0
    }

    /// Axis-aligned bounds `(min_x1, max_x1, min_x2, max_x2)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let pts = self.corners();
        let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| pts.iter().map(sel).fold(init, f);
        (
            fold(f64::min, f64::INFINITY, |p| p.0),
            fold(f64::max, f64::NEG_INFINITY, |p| p.0),
            fold(f64::min, f64::INFINITY, |p| p.1),
            fold(f64::max, f64::NEG_INFINITY, |p| p.1),
        )
    }
}

/// Separating-axis test on oriented rectangles. Touching edges do not count
/// as overlap; any positive-area intersection does.
pub fn rects_overlap(a: &NpcSpec, b: &NpcSpec) -> bool {
    let (ca, cb) = (a.corners(), b.corners());
    let axes = [a.pose.yaw, a.pose.yaw + FRAC_PI_2, b.pose.yaw, b.pose.yaw + FRAC_PI_2];
    for theta in axes {
        let (s, c) = theta.sin_cos();
        let project = |pts: &[(f64, f64); 4]| {
            pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let v = p.0 * c + p.1 * s;
                (lo.min(v), hi.max(v))
            })
        };
        let (alo, ahi) = project(&ca);
        let (blo, bhi) = project(&cb);
        if ahi <= blo || bhi <= alo {
            return false;
        }
    }
    true
}

/// Appearance nuisances of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NuisanceParams {
    /// 0 = clear, 1 = dark and foggy.
    pub weather: f64,
    pub postprocess_on: bool,
    pub palette_size: usize,
    pub noise_std: f64,
}

impl Default for NuisanceParams {
    fn default() -> Self {
        Self { weather: 0.0, postprocess_on: false, palette_size: 8, noise_std: 0.0 }
    }
}

impl NuisanceParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.weather) {
            return Err(format!("weather {} outside [0, 1]", self.weather));
        }
        if self.palette_size == 0 {
            return Err("palette_size must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(format!("noise_std {} must be >= 0", self.noise_std));
        }
        Ok(())
    }
}

/// A static scene in the ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ego: Pose2,
    /// Half-width of the square region NPC centers must lie in.
    pub extent: f64,
    pub npcs: Vec<NpcSpec>,
    pub map_id: MapId,
    pub nuisance: NuisanceParams,
    pub seed: u64,
}

impl Scene {
    pub fn new(map_id: MapId, extent: f64, nuisance: NuisanceParams, seed: u64) -> Self {
        Self { ego: Pose2::origin(), extent, npcs: Vec::new(), map_id, nuisance, seed }
    }

    pub fn in_bounds(&self, pose: &Pose2) -> bool {
        pose.x1.abs() <= self.extent && pose.x2.abs() <= self.extent
    }

    /// Appends `npc` unless it is out of bounds, malformed or overlaps an
    /// existing NPC. Returns whether it was placed.
    pub fn try_place(&mut self, npc: NpcSpec) -> bool {
        if !self.in_bounds(&npc.pose) || npc.validate().is_err() {
            return false;
        }
        if self.npcs.iter().any(|other| rects_overlap(other, &npc)) {
            return false;
        }
        self.npcs.push(npc);
        true
    }
}
