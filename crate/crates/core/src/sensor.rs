//! Top-down pseudo-camera: renders scenes into 3-channel images whose look
//! depends on the domain preset, plus label-preserving strong augmentation.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::GridSpec;
use crate::world::{NuisanceParams, Scene};

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("invalid render params: {0}")]
    Params(String),
    #[error("invalid augment policy: {0}")]
    Policy(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Channel-major `[3, H, W]` image in `[0, 1]`, aligned with the BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub size: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationHeader {
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
}

impl Observation {
    pub const CHANNELS: usize = 3;

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let plane = size * size;
        let mut data = vec![0.0; 3 * plane];
        for (ch, &v) in rgb.iter().enumerate() {
            data[ch * plane..(ch + 1) * plane].fill(v);
        }
        Self { size, data }
    }

    pub fn plane(&self) -> usize {
        self.size * self.size
    }

    /// Writes the float blob and returns the `{C, H, W}` sidecar JSON.
    pub fn write<W: Write>(&self, mut w: W) -> Result<String, SensorError> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        let h = ObservationHeader { c: Self::CHANNELS, h: self.size, w: self.size };
        serde_json::to_string(&h).map_err(|e| SensorError::Format(e.to_string()))
    }

    pub fn read<R: Read>(mut r: R, sidecar_json: &str) -> Result<Self, SensorError> {
        let h: ObservationHeader = serde_json::from_str(sidecar_json).map_err(|e| SensorError::Format(e.to_string()))?;
        if h.c != Self::CHANNELS || h.h != h.w {
            return Err(SensorError::Format(format!("unsupported observation shape {}x{}x{}", h.c, h.h, h.w)));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 4 * h.c * h.h * h.w {
            return Err(SensorError::Format(format!("blob holds {} bytes, expected {}", bytes.len(), 4 * h.c * h.h * h.w)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { size: h.h, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Sim,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BackgroundStyle {
    Flat { color: [f32; 3] },
    /// Smooth brightness blotches of `cell` pixels plus per-pixel grit.
    Textured { color: [f32; 3], amplitude: f32, cell: usize, grit: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRenderParams {
    pub domain: Domain,
    pub texture_noise_std: f64,
    pub palette: Vec<[f32; 3]>,
    pub background: BackgroundStyle,
    pub postprocess_on: bool,
    pub weather: f64,
    /// Distance at which vehicle contrast against the background drops to 1/e.
    pub fade_distance: Option<f64>,
}

const SIM_BACKGROUND: [f32; 3] = [0.36, 0.36, 0.38];
const REAL_BACKGROUND: [f32; 3] = [0.34, 0.35, 0.33];
const FOG: f32 = 0.7;

/// `n` distinct colors; every smaller palette is a prefix of a larger one.
pub fn make_palette(n: usize) -> Vec<[f32; 3]> {
    const GOLDEN: f64 = 0.618_033_988_749_895;
    (0..n)
        .map(|i| {
            let hue = (i as f64 * GOLDEN).fract();
            let sat = [0.85, 0.55, 0.3, 0.7][i % 4];
            let val = [0.95, 0.75, 0.6, 0.85, 0.7][i % 5];
            hsv_to_rgb(hue, sat, val)
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = h * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

impl DomainRenderParams {
    /// Flat background, 8 colors, no noise, no post-processing.
    pub fn sim() -> Self {
        Self {
            domain: Domain::Sim,
            texture_noise_std: 0.0,
            palette: make_palette(8),
            background: BackgroundStyle::Flat { color: SIM_BACKGROUND },
            postprocess_on: false,
            weather: 0.0,
            fade_distance: Some(40.0),
        }
    }

    /// Textured background, 64 colors, noise 0.05, post-processing on.
    pub fn real() -> Self {
        Self {
            domain: Domain::Real,
            texture_noise_std: 0.05,
            palette: make_palette(64),
            background: BackgroundStyle::Textured { color: REAL_BACKGROUND, amplitude: 0.12, cell: 8, grit: 0.03 },
            postprocess_on: true,
            weather: 0.0,
            fade_distance: Some(40.0),
        }
    }

    pub fn preset(domain: Domain) -> Self {
        match domain {
            Domain::Sim => Self::sim(),
            Domain::Real => Self::real(),
        }
    }

    /// Overrides weather, post-processing, palette size and noise from a scene's nuisances.
    pub fn with_nuisance(mut self, n: &NuisanceParams) -> Self {
        self.weather = n.weather;
        self.postprocess_on = n.postprocess_on;
        self.palette = make_palette(n.palette_size);
        self.texture_noise_std = n.noise_std;
        self
    }

    /// The nuisance values this preset implies.
    pub fn nuisance(&self) -> NuisanceParams {
        NuisanceParams {
            weather: self.weather,
            postprocess_on: self.postprocess_on,
            palette_size: self.palette.len(),
            noise_std: self.texture_noise_std,
        }
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if self.palette.is_empty() {
            return Err(SensorError::Params("palette is empty".into()));
        }
        if !(self.texture_noise_std >= 0.0 && self.texture_noise_std.is_finite()) {
            return Err(SensorError::Params(format!("texture_noise_std {} must be >= 0", self.texture_noise_std)));
        }
        if !(0.0..=1.0).contains(&self.weather) {
            return Err(SensorError::Params(format!("weather {} outside [0, 1]", self.weather)));
        }
        if let Some(d) = self.fade_distance {
            if !(d > 0.0) {
                return Err(SensorError::Params(format!("fade_distance {d} must be positive")));
            }
        }
        if let BackgroundStyle::Textured { cell: 0, .. } = self.background {
            return Err(SensorError::Params("texture cell must be positive".into()));
        }
        Ok(())
    }

    fn snap(&self, color: [f64; 3]) -> [f32; 3] {
        let d2 = |p: &[f32; 3]| (0..3).map(|i| (p[i] as f64 - color[i]).powi(2)).sum::<f64>();
        *self.palette.iter().min_by(|a, b| d2(a).total_cmp(&d2(b))).expect("validated palette")
    }
}

fn paint_background(img: &mut Observation, style: &BackgroundStyle, rng: &mut ChaCha8Rng) {
    match *style {
        BackgroundStyle::Flat { color } => *img = Observation::filled(img.size, color),
        BackgroundStyle::Textured { color, amplitude, cell, grit } => {
            let n = img.size;
            let knots = n / cell + 2;
            let coarse: Vec<f32> = (0..knots * knots).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let plane = img.plane();
            for r in 0..n {
                let fr = r as f32 / cell as f32;
                let (r0, tr) = (fr.floor() as usize, fr.fract());
                for c in 0..n {
                    let fc = c as f32 / cell as f32;
                    let (c0, tc) = (fc.floor() as usize, fc.fract());
                    let k = |i: usize, j: usize| coarse[i * knots + j];
                    let smooth = (1.0 - tr) * ((1.0 - tc) * k(r0, c0) + tc * k(r0, c0 + 1))
                        + tr * ((1.0 - tc) * k(r0 + 1, c0) + tc * k(r0 + 1, c0 + 1));
                    let shade = 1.0 + amplitude * smooth + grit * rng.gen_range(-1.0f32..1.0);
                    for (ch, &base) in color.iter().enumerate() {
                        img.data[ch * plane + r * n + c] = base * shade;
                    }
                }
            }
        }
    }
}

/// Renders `scene` on the grid `spec`. Vehicles are drawn with 2×2
/// supersampled coverage in their palette-snapped asset color.
pub fn render(scene: &Scene, params: &DomainRenderParams, spec: &GridSpec, rng: &mut ChaCha8Rng) -> Observation {
    let n = spec.size();
    let plane = n * n;
    let mut img = Observation::filled(n, [0.0; 3]);
    paint_background(&mut img, &params.background, rng);

    let offsets = [-0.25, 0.25];
    for npc in &scene.npcs {
        let color = params.snap(npc.color);
        let (lo1, hi1, lo2, hi2) = npc.bounds();
        let Some((r0, c0)) = spec.cell_of(hi1.min(spec.extent - 1e-9), hi2.min(spec.extent - 1e-9)) else {
            continue;
        };
        let Some((r1, c1)) = spec.cell_of(lo1.max(-spec.extent + 1e-9), lo2.max(-spec.extent + 1e-9)) else {
            continue;
        };
        let alpha = params.fade_distance.map_or(1.0, |d| (-npc.pose.x1.hypot(npc.pose.x2) / d).exp()) as f32;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (x1, x2) = (spec.x1_of_row(r), spec.x2_of_col(c));
                let hits = offsets
                    .iter()
                    .flat_map(|&a| offsets.iter().map(move |&b| (a, b)))
                    .filter(|&(a, b)| npc.contains(x1 + a * spec.resolution, x2 + b * spec.resolution))
                    .count();
                if hits == 0 {
                    continue;
                }
                let w = alpha * hits as f32 / 4.0;
                for (ch, &v) in color.iter().enumerate() {
                    let px = &mut img.data[ch * plane + r * n + c];
                    *px = (1.0 - w) * *px + w * v;
                }
            }
        }
    }

    let wthr = params.weather as f32;
    if wthr > 0.0 {
        let (gain, fog) = (1.0 - 0.5 * wthr, 0.4 * wthr);
        for v in &mut img.data {
            *v = (1.0 - fog) * (*v * gain) + fog * FOG;
        }
    }
    if params.texture_noise_std > 0.0 {
        let normal = Normal::new(0.0, params.texture_noise_std).expect("validated std");
        for v in &mut img.data {
            *v += normal.sample(rng) as f32;
        }
    }
    if params.postprocess_on {
        // vignette plus monochrome film grain
        let half = n as f32 / 2.0;
        let grain = Normal::new(0.0f32, 0.02).expect("constant std");
        for r in 0..n {
            for c in 0..n {
                let (dr, dc) = ((r as f32 + 0.5 - half) / half, (c as f32 + 0.5 - half) / half);
                let gain = 1.0 - 0.25 * (dr * dr + dc * dc) / 2.0;
                let g = grain.sample(rng);
                for ch in 0..3 {
                    let px = &mut img.data[ch * plane + r * n + c];
                    *px = *px * gain + g;
                }
            }
        }
    }
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Renders with a fresh generator seeded from the scene seed.
pub fn render_seeded(scene: &Scene, params: &DomainRenderParams, spec: &GridSpec) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x7265_6e64);
    render(scene, params, spec, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Brightness,
    Contrast,
    GaussianNoise,
    Cutout,
    ChannelDrop,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] =
        [AugmentOp::Brightness, AugmentOp::Contrast, AugmentOp::GaussianNoise, AugmentOp::Cutout, AugmentOp::ChannelDrop];
}

/// Strength of each op at the maximum magnitude 30; strength scales linearly with magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentStrengths {
    /// Largest additive brightness shift.
    pub brightness: f32,
    /// Largest relative contrast change.
    pub contrast: f32,
    pub noise_std: f32,
    /// Range of the zeroed fraction of the image.
    pub cutout_area: [f64; 2],
    /// Fraction of one channel's intensity removed.
    pub channel_drop: f32,
}

impl Default for AugmentStrengths {
    fn default() -> Self {
        Self { brightness: 0.4, contrast: 0.8, noise_std: 0.15, cutout_area: [0.1, 0.4], channel_drop: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub n_ops: usize,
    pub magnitude: u32,
    pub pool: Vec<AugmentOp>,
    #[serde(default)]
    pub strengths: AugmentStrengths,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { n_ops: 2, magnitude: 10, pool: AugmentOp::ALL.to_vec(), strengths: AugmentStrengths::default() }
    }
}

impl AugmentPolicy {
    pub const MAX_MAGNITUDE: u32 = 30;

    pub fn validate(&self) -> Result<(), SensorError> {
        if self.n_ops > self.pool.len() {
            return Err(SensorError::Policy(format!("n_ops {} exceeds pool size {}", self.n_ops, self.pool.len())));
        }
        if self.magnitude > Self::MAX_MAGNITUDE {
            return Err(SensorError::Policy(format!("magnitude {} outside [0, 30]", self.magnitude)));
        }
        let [lo, hi] = self.strengths.cutout_area;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(SensorError::Policy(format!("cutout area range [{lo}, {hi}] invalid")));
        }
        Ok(())
    }

    fn fraction(&self) -> f32 {
        self.magnitude as f32 / Self::MAX_MAGNITUDE as f32
    }

    /// Zeroed-area range of a cutout at this magnitude.
    pub fn cutout_area_range(&self) -> [f64; 2] {
        let f = self.fraction() as f64;
        let [lo, hi] = self.strengths.cutout_area;
        [lo * f, hi * f]
    }
}

/// Applies `n_ops` distinct ops drawn uniformly from the pool. Purely
/// photometric: pixels never move, so labels stay aligned.
pub fn strong_augment<R: Rng>(obs: &Observation, policy: &AugmentPolicy, rng: &mut R) -> Observation {
    let mut out = obs.clone();
    let f = policy.fraction();
    let ops: Vec<AugmentOp> = policy.pool.choose_multiple(rng, policy.n_ops).copied().collect();
    let s = &policy.strengths;
    let plane = out.plane();
    for op in ops {
        match op {
            AugmentOp::Brightness => {
                let delta = s.brightness * f * rng.gen_range(-1.0f32..=1.0);
                out.data.iter_mut().for_each(|v| *v += delta);
            }
            AugmentOp::Contrast => {
                let factor = 1.0 + s.contrast * f * rng.gen_range(-1.0f32..=1.0);
                for ch in out.data.chunks_mut(plane) {
                    let mean = ch.iter().sum::<f32>() / plane as f32;
                    ch.iter_mut().for_each(|v| *v = mean + factor * (*v - mean));
                }
            }
            AugmentOp::GaussianNoise => {
                let std = s.noise_std * f;
                if std > 0.0 {
                    let normal = Normal::new(0.0f32, std).expect("positive std");
                    out.data.iter_mut().for_each(|v| *v += normal.sample(rng));
                }
            }
            AugmentOp::Cutout => {
                let [lo, hi] = policy.cutout_area_range();
                if hi > 0.0 {
                    let (r0, c0, h, w) = cutout_rect(out.size, lo, hi, rng);
                    for ch in out.data.chunks_mut(plane) {
                        for r in r0..r0 + h {
                            ch[r * out.size + c0..r * out.size + c0 + w].fill(0.0);
                        }
                    }
                }
            }
            AugmentOp::ChannelDrop => {
                let ch = rng.gen_range(0..Observation::CHANNELS);
                let keep = 1.0 - s.channel_drop * f;
                out.data[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v *= keep);
            }
        }
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

// Rectangle (row, col, height, width) whose area fraction lies in [lo, hi].
fn cutout_rect<R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> (usize, usize, usize, usize) {
    let total = (n * n) as f64;
    let area = rng.gen_range(lo..=hi) * total;
    let aspect: f64 = rng.gen_range(0.5f64..2.0);
    let mut h = ((area * aspect).sqrt().round() as usize).clamp(1, n);
    let mut w = ((area / h as f64).round() as usize).clamp(1, n);
    while ((h * w) as f64) < lo * total && (w < n || h < n) {
        if w < n {
            w += 1;
        } else {
            h += 1;
        }
    }
    while ((h * w) as f64) > hi * total && w > 1 {
        w -= 1;
    }
    let r0 = rng.gen_range(0..=n - h);
    let c0 = rng.gen_range(0..=n - w);
    (r0, c0, h, w)
}
