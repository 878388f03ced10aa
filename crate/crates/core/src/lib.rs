//! Sim-to-real laboratory for BEV vehicle segmentation: procedural scenes,
//! placement priors, label-marginal divergences, a small autodiff network and
//! domain-adversarial training.

pub mod adapt;
pub mod bev;
pub mod nn;
mod pgm;
pub mod sampling;
pub mod seed;
pub mod sensor;
pub mod world;
