use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use super::NnError;

/// How the segmentation head returns from the latent grid to the label grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// One logit per latent cell, repeated over its block.
    Nearest,
    /// `factor²` logits per latent cell rearranged into the block.
    SubPixel,
}

const LATENT_NORM_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Side length of the (square) input and label grid.
    pub grid: usize,
    pub encoder_widths: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub head_width: usize,
    pub critic_width: usize,
    pub leaky_slope: f64,
    pub upsample: Upsample,
    /// Scale every latent feature vector to unit root-mean-square, so the
    /// encoder cannot inflate critic outputs by growing its activations.
    pub latent_norm: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            grid: 64,
            encoder_widths: vec![16, 32, 32, 32],
            encoder_strides: vec![2, 2, 2, 1],
            head_width: 32,
            critic_width: 32,
            leaky_slope: 0.1,
            upsample: Upsample::SubPixel,
            latent_norm: true,
        }
    }
}

impl ArchConfig {
    pub fn downsample(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn latent_grid(&self) -> usize {
        self.grid / self.downsample()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |detail: String| Err(NnError::Shape { op: "arch", detail });
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.encoder_strides.len() {
            return bad(format!("{} widths vs {} strides", self.encoder_widths.len(), self.encoder_strides.len()));
        }
        if self.encoder_strides.iter().any(|&s| s == 0) || self.grid % self.downsample() != 0 {
            return bad(format!("grid {} not divisible by total stride {}", self.grid, self.downsample()));
        }
        if self.in_channels == 0 || self.head_width == 0 || self.critic_width == 0 {
            return bad("zero-width layer".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Head,
    Critic,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvSpec {
    stride: usize,
    pad: usize,
}

/// Encoder `g`, segmentation head `ĥ` and per-location critic `ĥ′`
/// sharing the latent map `Z = g(x)` at `grid / 8`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptModel {
    arch: ArchConfig,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    convs: Vec<ConvSpec>,
    params: Vec<Tensor<f32>>,
}

/// The model parameters placed on one tape.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl AdaptModel {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self { arch: arch.clone(), names: vec![], groups: vec![], convs: vec![], params: vec![] };
        let slope = arch.leaky_slope;
        let mut c_in = arch.in_channels;
        for (i, (&w, &s)) in arch.encoder_widths.iter().zip(&arch.encoder_strides).enumerate() {
            model.push_conv(&mut rng, &format!("enc.{i}"), ParamGroup::Encoder, c_in, w, 3, s, 1, slope, 0.0);
            c_in = w;
        }
        let latent = c_in;
        let f = arch.downsample();
        let head_out = match arch.upsample {
            Upsample::SubPixel => f * f,
            Upsample::Nearest => 1,
        };
        model.push_conv(&mut rng, "head.0", ParamGroup::Head, latent, arch.head_width, 3, 1, 1, slope, 0.0);
        // start from a low-occupancy prior
        model.push_conv(&mut rng, "head.1", ParamGroup::Head, arch.head_width, head_out, 1, 1, 0, 1.0, -2.0);
        model.push_conv(&mut rng, "critic.0", ParamGroup::Critic, latent, arch.critic_width, 3, 1, 1, slope, 0.0);
        model.push_conv(&mut rng, "critic.1", ParamGroup::Critic, arch.critic_width, 1, 1, 1, 0, 1.0, 0.0);
        Ok(model)
    }

    #[allow(clippy::too_many_arguments)]
    fn push_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        slope: f64,
        bias: f32,
    ) {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        let w: Vec<f32> = (0..c_out * c_in * k * k).map(|_| rng.gen_range(-bound..bound) as f32).collect();
        self.params.push(Tensor::new(vec![c_out, c_in, k, k], w).expect("conv weight shape"));
        self.params.push(Tensor::new(vec![c_out], vec![bias; c_out]).expect("bias shape"));
        self.names.push(format!("{name}.w"));
        self.names.push(format!("{name}.b"));
        self.groups.extend([group, group]);
        self.convs.push(ConvSpec { stride, pad });
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters from a flat blob in declaration order.
    pub fn load_flat(&mut self, flat: &[f32]) -> Result<(), NnError> {
        if flat.len() != self.num_scalars() {
            return Err(NnError::Checkpoint(format!("expected {} parameters, found {}", self.num_scalars(), flat.len())));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams { vars: self.params.iter().map(|p| g.param(p.cast())).collect() }
    }

    /// Like [`AdaptModel::bind`] but nothing receives a gradient.
    pub fn bind_frozen<T: Scalar>(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams { vars: self.params.iter().map(|p| g.constant(p.cast())).collect() }
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, layer: usize, x: Var) -> Result<Var, NnError> {
        let spec = &self.convs[layer];
        g.conv2d(x, p.vars[2 * layer], p.vars[2 * layer + 1], spec.stride, spec.pad)
    }

    fn slope<T: Scalar>(&self) -> T {
        T::of(self.arch.leaky_slope)
    }

    /// `g(x)`: `[N, C, H, W] -> [N, width, H/8, W/8]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var, NnError> {
        // map [0, 1] pixels to [-1, 1]; plain SGD stalls on uncentred inputs
        let h = g.scale(x, T::from(2.0).unwrap());
        let mut h = g.add_scalar(h, T::from(-1.0).unwrap());
        for layer in 0..self.arch.encoder_widths.len() {
            h = self.conv(g, p, layer, h)?;
            h = g.leaky_relu(h, self.slope());
        }
        if self.arch.latent_norm {
            h = g.channel_norm(h, T::of(LATENT_NORM_EPS))?;
        }
        Ok(h)
    }

    /// `ĥ(z)`: occupancy probabilities `[N, 1, H, W]`.
    pub fn segment<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, z: Var) -> Result<Var, NnError> {
        let base = self.arch.encoder_widths.len();
        let h = self.conv(g, p, base, z)?;
        let h = g.leaky_relu(h, self.slope());
        let logits = self.conv(g, p, base + 1, h)?;
        let f = self.arch.downsample();
        let up = match self.arch.upsample {
            Upsample::SubPixel => g.depth_to_space(logits, f)?,
            Upsample::Nearest => g.nearest_upsample(logits, f)?,
        };
        Ok(g.sigmoid(up))
    }

    /// `ĥ′(z)`: unbounded per-location domain scores `[N, 1, H/8, W/8]`.
    /// Callers insert the gradient-reversal node before this.
    pub fn critic<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, z: Var) -> Result<Var, NnError> {
        let base = self.arch.encoder_widths.len() + 2;
        let h = self.conv(g, p, base, z)?;
        let h = g.leaky_relu(h, self.slope());
        self.conv(g, p, base + 1, h)
    }

    /// Inference on a batch of `[C, H, W]` images; returns one probability map per image.
    pub fn predict(&self, images: &[&[f32]]) -> Result<Vec<Vec<f32>>, NnError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (c, s) = (self.arch.in_channels, self.arch.grid);
        let mut data = Vec::with_capacity(images.len() * c * s * s);
        for im in images {
            data.extend_from_slice(im);
        }
        let x = Tensor::new(vec![images.len(), c, s, s], data)?;
        let mut g = Graph::<f32>::new();
        let p = self.bind_frozen(&mut g);
        let xv = g.constant(x);
        let z = self.encode(&mut g, &p, xv)?;
        let y = self.segment(&mut g, &p, z)?;
        Ok(g.value(y).data().chunks(s * s).map(<[f32]>::to_vec).collect())
    }

    /// Frozen critic scores for a batch of images, one `[H/8 · W/8]` map per image.
    pub fn critic_scores(&self, images: &[&[f32]]) -> Result<Vec<Vec<f32>>, NnError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (c, s) = (self.arch.in_channels, self.arch.grid);
        let mut data = Vec::with_capacity(images.len() * c * s * s);
        for im in images {
            data.extend_from_slice(im);
        }
        let x = Tensor::new(vec![images.len(), c, s, s], data)?;
        let mut g = Graph::<f32>::new();
        let p = self.bind_frozen(&mut g);
        let xv = g.constant(x);
        let z = self.encode(&mut g, &p, xv)?;
        let u = self.critic(&mut g, &p, z)?;
        let l = self.arch.latent_grid();
        Ok(g.value(u).data().chunks(l * l).map(<[f32]>::to_vec).collect())
    }
}
