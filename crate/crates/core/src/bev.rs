//! Bird's-eye-view occupancy labels, label marginals, Jensen-Shannon
//! divergence, the label/representation JSD bound and IoU.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pgm::{read_pgm, write_pgm, Pgm};
use crate::world::Scene;

#[derive(Debug, Error)]
pub enum BevError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("grid mismatch: {0:?} vs {1:?}")]
    Mismatch(GridSpec, GridSpec),
    #[error("degenerate marginal: {0}")]
    Degenerate(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Square ego-centred grid over `[-extent, extent]²`.
///
/// Row `r` covers `x1 = extent - (r + ½)·res` (forward is up) and column `c`
/// covers `x2 = extent - (c + ½)·res` (left is left).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub extent: f64,
    pub resolution: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { extent: 50.0, resolution: 0.5 }
    }
}

impl GridSpec {
    pub fn new(extent: f64, resolution: f64) -> Result<Self, BevError> {
        let g = Self { extent, resolution };
        g.validate()?;
        Ok(g)
    }

    /// 64×64 cells of 1 m.
    pub fn training() -> Self {
        Self { extent: 32.0, resolution: 1.0 }
    }

    pub fn validate(&self) -> Result<(), BevError> {
        if !(self.extent > 0.0 && self.resolution > 0.0 && self.extent.is_finite() && self.resolution.is_finite()) {
            return Err(BevError::Grid(format!("extent {} and resolution {} must be positive", self.extent, self.resolution)));
        }
        let ratio = self.extent / self.resolution;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(BevError::Grid(format!("extent/resolution = {ratio} is not a positive integer")));
        }
        Ok(())
    }

    /// Side length `H = W`.
    pub fn size(&self) -> usize {
        (2.0 * self.extent / self.resolution).round() as usize
    }

    pub fn len(&self) -> usize {
        self.size() * self.size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x1_of_row(&self, r: usize) -> f64 {
        self.extent - (r as f64 + 0.5) * self.resolution
    }

    pub fn x2_of_col(&self, c: usize) -> f64 {
        self.extent - (c as f64 + 0.5) * self.resolution
    }

    /// Cell containing the point, if on the grid.
    pub fn cell_of(&self, x1: f64, x2: f64) -> Option<(usize, usize)> {
        let r = ((self.extent - x1) / self.resolution).floor();
        let c = ((self.extent - x2) / self.resolution).floor();
        let n = self.size() as f64;
        (r >= 0.0 && c >= 0.0 && r < n && c < n).then_some((r as usize, c as usize))
    }

    fn check_same(&self, other: &GridSpec) -> Result<(), BevError> {
        if self != other {
            return Err(BevError::Mismatch(*self, *other));
        }
        Ok(())
    }

    // Inclusive row/column range whose centers may fall inside [lo, hi] along each axis.
    fn rows_spanning(&self, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let n = self.size() as f64;
        let first = ((self.extent - hi) / self.resolution - 0.5).floor().max(0.0);
        let last = ((self.extent - lo) / self.resolution - 0.5).ceil().min(n - 1.0);
        (first <= last).then_some((first as usize, last as usize))
    }
}

/// Binary occupancy, row-major, values 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub spec: GridSpec,
    pub cells: Vec<u8>,
}

impl LabelGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, cells: vec![0; spec.len()] }
    }

    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|&&v| v != 0).count()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.cells.iter().map(|&v| v as f32).collect()
    }

    pub fn write_pgm<W: Write>(&self, w: W) -> Result<(), BevError> {
        let n = self.spec.size();
        let img = Pgm { width: n, height: n, maxval: 255, data: self.cells.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect() };
        Ok(write_pgm(w, &img)?)
    }

    pub fn read_pgm<R: Read>(r: R, spec: GridSpec) -> Result<Self, BevError> {
        let img = read_pgm(r)?;
        if img.width != spec.size() || img.height != spec.size() {
            return Err(BevError::Format(format!("label is {}x{}, grid expects {}", img.width, img.height, spec.size())));
        }
        Ok(Self { spec, cells: img.data.iter().map(|&v| u8::from(v != 0)).collect() })
    }
}

/// Marks every cell whose center lies strictly inside an NPC rectangle.
pub fn rasterize(scene: &Scene, spec: &GridSpec) -> LabelGrid {
    let mut grid = LabelGrid::zeros(*spec);
    let n = spec.size();
    for npc in &scene.npcs {
        let (lo1, hi1, lo2, hi2) = npc.bounds();
        let (Some((r0, r1)), Some((c0, c1))) = (spec.rows_spanning(lo1, hi1), spec.rows_spanning(lo2, hi2)) else {
            continue;
        };
        for r in r0..=r1 {
            let x1 = spec.x1_of_row(r);
            for c in c0..=c1 {
                if npc.contains(x1, spec.x2_of_col(c)) {
                    grid.cells[r * n + c] = 1;
                }
            }
        }
    }
    grid
}

/// Per-cell positive frequency over a set of label grids.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalMap {
    pub spec: GridSpec,
    pub freq: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
struct MarginalHeader {
    h: usize,
    w: usize,
    #[serde(rename = "extent")]
    extent: f64,
    #[serde(rename = "resolution")]
    resolution: f64,
    #[serde(rename = "count")]
    count: usize,
}

impl MarginalMap {
    pub fn total_mass(&self) -> f64 {
        self.freq.iter().sum()
    }

    /// Writes the float blob and returns the JSON header for the sidecar.
    pub fn write_blob<W: Write>(&self, mut w: W) -> Result<String, BevError> {
        let mut bytes = Vec::with_capacity(self.freq.len() * 4);
        for &v in &self.freq {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
        let n = self.spec.size();
        let header =
            MarginalHeader { h: n, w: n, extent: self.spec.extent, resolution: self.spec.resolution, count: self.count };
        serde_json::to_string(&header).map_err(|e| BevError::Format(e.to_string()))
    }

    pub fn read_blob<R: Read>(mut r: R, header_json: &str) -> Result<Self, BevError> {
        let h: MarginalHeader = serde_json::from_str(header_json).map_err(|e| BevError::Format(e.to_string()))?;
        let spec = GridSpec::new(h.extent, h.resolution)?;
        if h.h != spec.size() || h.w != spec.size() {
            return Err(BevError::Format(format!("header {}x{} disagrees with grid size {}", h.h, h.w, spec.size())));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != spec.len() * 4 {
            return Err(BevError::Format(format!("blob holds {} bytes, expected {}", bytes.len(), spec.len() * 4)));
        }
        let freq = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Ok(Self { spec, freq, count: h.count })
    }

    pub fn save(&self, blob: &Path, header: &Path) -> Result<(), BevError> {
        let json = self.write_blob(std::io::BufWriter::new(std::fs::File::create(blob)?))?;
        std::fs::write(header, json)?;
        Ok(())
    }

    pub fn load(blob: &Path, header: &Path) -> Result<Self, BevError> {
        let json = std::fs::read_to_string(header)?;
        Self::read_blob(std::fs::File::open(blob)?, &json)
    }

    /// 8-bit heatmap scaled to the maximum frequency.
    pub fn write_pgm<W: Write>(&self, w: W) -> Result<(), BevError> {
        let n = self.spec.size();
        let max = self.freq.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let data = self.freq.iter().map(|&v| (v * scale).round() as u16).collect();
        Ok(write_pgm(w, &Pgm { width: n, height: n, maxval: 255, data })?)
    }
}

/// Streaming marginal estimate; merging is associative.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalAccumulator {
    spec: GridSpec,
    hits: Vec<u64>,
    count: usize,
}

impl MarginalAccumulator {
    pub fn new(spec: GridSpec) -> Self {
        Self { spec, hits: vec![0; spec.len()], count: 0 }
    }

    pub fn add(&mut self, label: &LabelGrid) -> Result<(), BevError> {
        self.spec.check_same(&label.spec)?;
        for (h, &v) in self.hits.iter_mut().zip(&label.cells) {
            *h += u64::from(v != 0);
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MarginalAccumulator) -> Result<(), BevError> {
        self.spec.check_same(&other.spec)?;
        for (h, o) in self.hits.iter_mut().zip(&other.hits) {
            *h += o;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<MarginalMap, BevError> {
        if self.count == 0 {
            return Err(BevError::Degenerate("no label grids".into()));
        }
        let n = self.count as f64;
        Ok(MarginalMap { spec: self.spec, freq: self.hits.iter().map(|&h| h as f64 / n).collect(), count: self.count })
    }
}

pub fn estimate_marginal(labels: &[LabelGrid]) -> Result<MarginalMap, BevError> {
    let first = labels.first().ok_or_else(|| BevError::Degenerate("empty label list".into()))?;
    let mut acc = MarginalAccumulator::new(first.spec);
    for l in labels {
        acc.add(l)?;
    }
    acc.finish()
}

/// How two occupancy heatmaps are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsdMode {
    /// Each heatmap normalized to a distribution over cells.
    #[default]
    Categorical,
    /// Mean over cells of the JSD between per-cell Bernoulli occupancies.
    Bernoulli,
}

fn xlogx_over(x: f64, m: f64) -> f64 {
    if x > 0.0 {
        x * (x / m).ln()
    } else {
        0.0
    }
}

fn jsd_terms(p: impl Iterator<Item = (f64, f64)>) -> f64 {
    p.map(|(a, b)| {
        let m = 0.5 * (a + b);
        0.5 * xlogx_over(a, m) + 0.5 * xlogx_over(b, m)
    })
    .sum()
}

/// Jensen-Shannon divergence in nats between the cell-normalized heatmaps.
pub fn jsd(p: &MarginalMap, q: &MarginalMap) -> Result<f64, BevError> {
    jsd_with(p, q, JsdMode::Categorical)
}

pub fn jsd_with(p: &MarginalMap, q: &MarginalMap, mode: JsdMode) -> Result<f64, BevError> {
    p.spec.check_same(&q.spec)?;
    match mode {
        JsdMode::Categorical => {
            let (sp, sq) = (p.total_mass(), q.total_mass());
            if !(sp > 0.0 && sq > 0.0) {
                return Err(BevError::Degenerate("zero total mass".into()));
            }
            let v = jsd_terms(p.freq.iter().zip(&q.freq).map(|(&a, &b)| (a / sp, b / sq)));
            Ok(v.clamp(0.0, std::f64::consts::LN_2))
        }
        JsdMode::Bernoulli => {
            let per_cell: f64 =
                p.freq.iter().zip(&q.freq).map(|(&a, &b)| jsd_terms([(a, b), (1.0 - a, 1.0 - b)].into_iter())).sum();
            Ok((per_cell / p.freq.len() as f64).clamp(0.0, std::f64::consts::LN_2))
        }
    }
}

/// Lower bound on the target risk gap from label and representation JSDs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JsdBound {
    Value { nats: f64 },
    /// The representation JSD exceeds the label JSD, so no bound follows.
    PremiseNotMet,
}

impl JsdBound {
    pub fn value(&self) -> Option<f64> {
        match *self {
            JsdBound::Value { nats } => Some(nats),
            JsdBound::PremiseNotMet => None,
        }
    }
}

/// `½(√jsd_y − √jsd_z)²`, valid when `jsd_y ≥ jsd_z ≥ 0`.
pub fn thm2_lower_bound(jsd_y: f64, jsd_z: f64) -> JsdBound {
    if !(jsd_z >= 0.0 && jsd_y >= jsd_z) {
        return JsdBound::PremiseNotMet;
    }
    let d = (0.5 * jsd_y).sqrt() - (0.5 * jsd_z).sqrt();
    JsdBound::Value { nats: d * d }
}

/// Intersection over union of `pred ≥ threshold` against the label; 1 when both are empty.
pub fn iou(pred: &[f32], label: &LabelGrid, threshold: f32) -> f64 {
    assert_eq!(pred.len(), label.cells.len(), "iou: prediction and label sizes differ");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &y) in pred.iter().zip(&label.cells) {
        let (a, b) = (p >= threshold, y != 0);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, LN_2};

    use super::*;
    use crate::world::{MapId, NpcSpec, NuisanceParams, Pose2};

    fn scene_with(npcs: Vec<NpcSpec>) -> Scene {
        let mut s = Scene::new(MapId::Straight, 50.0, NuisanceParams::default(), 0);
        for n in npcs {
            assert!(s.try_place(n));
        }
        s
    }

    fn npc(x1: f64, x2: f64, yaw: f64, length: f64, width: f64) -> NpcSpec {
        NpcSpec { pose: Pose2::new(x1, x2, yaw), length, width, asset_id: 0, color: [1.0; 3] }
    }

    fn marginal(freq: Vec<f64>) -> MarginalMap {
        let side = (freq.len() as f64).sqrt() as usize;
        MarginalMap { spec: GridSpec::new(side as f64 / 2.0, 1.0).unwrap(), freq, count: 1 }
    }

    #[test]
    fn grid_geometry() {
        let g = GridSpec::default();
        assert_eq!(g.size(), 200);
        assert_eq!(g.cell_of(49.9, 49.9), Some((0, 0)));
        assert_eq!(g.cell_of(-49.9, -49.9), Some((199, 199)));
        assert_eq!(g.cell_of(50.1, 0.0), None);
        assert!(GridSpec::new(10.0, 3.0).is_err());
    }

    #[test]
    fn empty_scene_rasterizes_to_zero() {
        assert_eq!(rasterize(&scene_with(vec![]), &GridSpec::default()).positives(), 0);
    }

    #[test]
    fn car_at_origin_covers_eight_by_four() {
        let g = GridSpec::default();
        let l = rasterize(&scene_with(vec![npc(0.0, 0.0, 0.0, 4.0, 2.0)]), &g);
        assert_eq!(l.positives(), 32);
        let rows: Vec<usize> = (0..g.size()).filter(|&r| l.cells[r * 200 + 100] == 1).collect();
        assert_eq!(rows.len(), 8);
        let rot = rasterize(&scene_with(vec![npc(0.0, 0.0, FRAC_PI_2, 4.0, 2.0)]), &g);
        assert_eq!(rot.positives(), 32);
        for r in 0..200 {
            for c in 0..200 {
                assert_eq!(rot.cells[r * 200 + c], l.cells[c * 200 + r]);
            }
        }
    }

    #[test]
    fn marginal_of_grid_and_complement_is_half() {
        let g = GridSpec::new(2.0, 1.0).unwrap();
        let a = LabelGrid { spec: g, cells: (0..16).map(|i| (i % 3 == 0) as u8).collect() };
        let b = LabelGrid { spec: g, cells: a.cells.iter().map(|v| 1 - v).collect() };
        let m = estimate_marginal(&[a.clone(), b]).unwrap();
        assert!(m.freq.iter().all(|&f| f == 0.5));
        assert_eq!(estimate_marginal(&[a.clone()]).unwrap().freq, a.as_f32().iter().map(|&v| v as f64).collect::<Vec<_>>());
        assert!(estimate_marginal(&[]).is_err());
    }

    #[test]
    fn jsd_fixtures() {
        let p = marginal(vec![0.3, 0.0, 0.1, 0.2]);
        assert!(jsd(&p, &p).unwrap().abs() < 1e-12);
        let a = marginal(vec![1.0, 0.0, 0.0, 0.0]);
        let b = marginal(vec![0.0, 0.0, 0.0, 0.4]);
        assert!((jsd(&a, &b).unwrap() - LN_2).abs() < 1e-12);
        let z = marginal(vec![0.0; 4]);
        assert!(matches!(jsd(&a, &z), Err(BevError::Degenerate(_))));
        assert!(jsd_with(&a, &z, JsdMode::Bernoulli).unwrap() > 0.0);
    }

    #[test]
    fn risk_gap_bound_fixtures() {
        assert_eq!(thm2_lower_bound(0.3, 0.3).value(), Some(0.0));
        assert_eq!(thm2_lower_bound(0.04, 0.01), JsdBound::Value { nats: 0.005 });
        assert_eq!(thm2_lower_bound(0.01, 0.04), JsdBound::PremiseNotMet);
    }

    #[test]
    fn iou_fixtures() {
        let g = GridSpec::new(1.0, 1.0).unwrap();
        let label = LabelGrid { spec: g, cells: vec![1, 0, 0, 0] };
        assert_eq!(iou(&[1.0, 0.0, 0.0, 0.0], &label, 0.5), 1.0);
        assert_eq!(iou(&[0.0, 1.0, 0.0, 0.0], &label, 0.5), 0.0);
        assert_eq!(iou(&[0.9, 0.9, 0.0, 0.0], &label, 0.5), 0.5);
        assert_eq!(iou(&[0.0; 4], &LabelGrid::zeros(g), 0.5), 1.0);
    }

    #[test]
    fn label_and_marginal_files_round_trip() {
        let g = GridSpec::new(2.0, 0.5).unwrap();
        let l = rasterize(&scene_with(vec![npc(0.3, -0.2, 0.4, 2.5, 1.3)]), &g);
        let mut buf = Vec::new();
        l.write_pgm(&mut buf).unwrap();
        assert_eq!(LabelGrid::read_pgm(&buf[..], g).unwrap(), l);

        let m = estimate_marginal(&[l.clone(), LabelGrid::zeros(g)]).unwrap();
        let mut blob = Vec::new();
        let header = m.write_blob(&mut blob).unwrap();
        assert!(header.contains("\"H\":8"));
        assert_eq!(MarginalMap::read_blob(&blob[..], &header).unwrap(), m);
    }
}
