//! Domain-adaptive training of the BEV segmenter: weighted BCE on labeled
//! source scenes, an adversarial per-location discrepancy between source and
//! target latents, and confidence-thresholded pseudo-labels on strongly
//! augmented target views.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::{iou, LabelGrid};
use crate::nn::{
    log_sigmoid, sgd_step, AdaptModel, Graph, GrlSchedule, NnError, OptimizerConfig, OptimizerState, ParamGroup, Tensor,
    Var,
};
use crate::seed::derive_seed;
use crate::sensor::{strong_augment, AugmentPolicy, Observation};

/// Probabilities are clamped into `[CLAMP, 1 - CLAMP]` before taking logs.
pub const CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: u64, reason: String, last_finite: Box<TrainState> },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of positive pixels in the segmentation and pseudo losses.
    pub beta: f64,
    /// Coefficient of the adversarial discrepancy.
    pub lambda_dst: f64,
    /// Coefficient of the pseudo-label loss.
    pub mu_pseudo: f64,
    /// Confidence threshold for pseudo-labels.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 2.13, lambda_dst: 1.87, mu_pseudo: 1.0, tau: 0.9 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(AdaptError::Config(format!("beta {} must be positive", self.beta)));
        }
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(AdaptError::Config(format!("tau {} outside (0.5, 1)", self.tau)));
        }
        if !(self.lambda_dst >= 0.0 && self.lambda_dst.is_finite()) {
            return Err(AdaptError::Config(format!("lambda_dst {} must be >= 0", self.lambda_dst)));
        }
        if !(self.mu_pseudo >= 0.0 && self.mu_pseudo.is_finite()) {
            return Err(AdaptError::Config(format!("mu_pseudo {} must be >= 0", self.mu_pseudo)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    NoAdapt,
    Dann,
    FdalJensen,
    FdalPearson,
    FdalPearsonPseudo,
    PseudoOnly,
}

/// Which adversarial discrepancy a strategy trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discrepancy {
    Dann,
    Jensen,
    Pearson,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::NoAdapt,
        StrategyKind::Dann,
        StrategyKind::FdalJensen,
        StrategyKind::FdalPearson,
        StrategyKind::FdalPearsonPseudo,
        StrategyKind::PseudoOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::NoAdapt => "no_adapt",
            StrategyKind::Dann => "dann",
            StrategyKind::FdalJensen => "fdal_jensen",
            StrategyKind::FdalPearson => "fdal_pearson",
            StrategyKind::FdalPearsonPseudo => "fdal_pearson_pseudo",
            StrategyKind::PseudoOnly => "pseudo_only",
        }
    }

    pub fn discrepancy(self) -> Option<Discrepancy> {
        match self {
            StrategyKind::Dann => Some(Discrepancy::Dann),
            StrategyKind::FdalJensen => Some(Discrepancy::Jensen),
            StrategyKind::FdalPearson | StrategyKind::FdalPearsonPseudo => Some(Discrepancy::Pearson),
            StrategyKind::NoAdapt | StrategyKind::PseudoOnly => None,
        }
    }

    pub fn uses_pseudo(self) -> bool {
        matches!(self, StrategyKind::FdalPearsonPseudo | StrategyKind::PseudoOnly)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = AdaptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AdaptError::Config(format!("unknown strategy `{s}`")))
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

/// Mean positive-weighted binary cross-entropy.
pub fn seg_loss(pred: &[f64], label: &[f64], beta: f64) -> f64 {
    assert_eq!(pred.len(), label.len(), "seg_loss: prediction and label sizes differ");
    let sum: f64 = pred
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = clamp(p);
            beta * y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    -sum / pred.len() as f64
}

fn mean_of_means<S: AsRef<[f64]>>(items: &[S], f: impl Fn(f64) -> f64) -> f64 {
    let per: Vec<f64> = items
        .iter()
        .map(|u| {
            let u = u.as_ref();
            u.iter().map(|&v| f(v)).sum::<f64>() / u.len() as f64
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// `E_s[u] − E_t[¼u² + u]`, averaging locations then items.
pub fn pearson_dst<S: AsRef<[f64]>>(critic_src: &[S], critic_tgt: &[S]) -> f64 {
    mean_of_means(critic_src, |u| u) - mean_of_means(critic_tgt, |u| 0.25 * u * u + u)
}

/// Negated logistic domain-classification loss (source = 1, target = 0),
/// averaged over the two domains.
pub fn dann_dst<S: AsRef<[f64]>>(critic_src: &[S], critic_tgt: &[S]) -> f64 {
    0.5 * (mean_of_means(critic_src, log_sigmoid) + mean_of_means(critic_tgt, |u| log_sigmoid(-u)))
}

/// Jensen-Shannon f-discrepancy with activation `ln 2 − ln(1 + e^{−u})` and
/// conjugate `−ln(2 − e^t)`; simplifies to `2 ln 2 + E_s[ln σ(u)] + E_t[ln σ(−u)]`.
pub fn jensen_dst<S: AsRef<[f64]>>(critic_src: &[S], critic_tgt: &[S]) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    let act = |u: f64| ln2 + log_sigmoid(u);
    let conj = |t: f64| -(2.0 - t.exp()).ln();
    mean_of_means(critic_src, act) - mean_of_means(critic_tgt, |u| conj(act(u)))
}

/// Pseudo-label loss on the augmented prediction from the clean prediction's
/// confident pixels. Returns `(loss, confident pixel count)`.
pub fn pseudo_loss(p: &[f64], p_aug: &[f64], tau: f64, beta: f64) -> (f64, usize) {
    assert_eq!(p.len(), p_aug.len(), "pseudo_loss: sizes differ");
    let (mut sum, mut count) = (0.0, 0usize);
    for (&pc, &pa) in p.iter().zip(p_aug) {
        if pc >= tau {
            sum += beta * clamp(pa).ln();
            count += 1;
        } else if pc <= 1.0 - tau {
            sum += (1.0 - clamp(pa)).ln();
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (-sum / count as f64, count)
    }
}

/// Rendered observations with their labels; labels of unlabeled target data
/// are used only for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Observation>,
    pub labels: Vec<LabelGrid>,
}

impl Dataset {
    pub fn new(images: Vec<Observation>, labels: Vec<LabelGrid>) -> Result<Self, AdaptError> {
        if images.len() != labels.len() {
            return Err(AdaptError::Config(format!("{} images vs {} labels", images.len(), labels.len())));
        }
        if let (Some(im), Some(l)) = (images.first(), labels.first()) {
            if im.plane() != l.cells.len() {
                return Err(AdaptError::Config(format!("image plane {} vs label {}", im.plane(), l.cells.len())));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` items.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { images: self.images[..n].to_vec(), labels: self.labels[..n].to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: StrategyKind,
    pub weights: LossWeights,
    pub schedule: GrlSchedule,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Leading epochs trained on the source segmentation loss alone.
    pub warm_start_epochs: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub augment: AugmentPolicy,
    /// Fraction of target scenes whose labels join the segmentation loss.
    pub target_label_fraction: f64,
    /// Target scenes scored at the end of every epoch (0 disables).
    pub epoch_eval_scenes: usize,
    pub threshold: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::FdalPearsonPseudo,
            weights: LossWeights::default(),
            schedule: GrlSchedule::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 35,
            warm_start_epochs: 0,
            batch_source: 4,
            batch_target: 4,
            augment: AugmentPolicy::default(),
            target_label_fraction: 0.0,
            epoch_eval_scenes: 200,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        self.weights.validate()?;
        self.augment.validate().map_err(|e| AdaptError::Config(e.to_string()))?;
        if self.epochs == 0 {
            return Err(AdaptError::Config("epochs must be positive".into()));
        }
        if self.warm_start_epochs >= self.epochs {
            return Err(AdaptError::Config(format!(
                "warm_start_epochs {} must be below epochs {}",
                self.warm_start_epochs, self.epochs
            )));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(AdaptError::Config("batch sizes must be positive".into()));
        }
        if self.batch_source != self.batch_target {
            return Err(AdaptError::Config(format!(
                "source and target batches must match ({} vs {})",
                self.batch_source, self.batch_target
            )));
        }
        if !(0.0..=1.0).contains(&self.target_label_fraction) {
            return Err(AdaptError::Config(format!("target_label_fraction {} outside [0, 1]", self.target_label_fraction)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(AdaptError::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, source_len: usize) -> usize {
        (source_len / self.batch_source).max(1)
    }

    pub fn total_iterations(&self, source_len: usize) -> u64 {
        (self.steps_per_epoch(source_len) * self.epochs) as u64
    }
}

/// One optimizer step's diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub seg_loss: f64,
    pub d_st: f64,
    pub pseudo_loss: f64,
    pub lambda_t: f64,
    pub confident_frac: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iter,seg_loss,d_st,pseudo_loss,lambda_t,confident_frac,lr";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.iter, self.seg_loss, self.d_st, self.pseudo_loss, self.lambda_t, self.confident_frac, self.lr
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub iter: u64,
    pub target_iou: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: AdaptModel,
    pub optimizer: OptimizerState,
    /// Completed optimizer steps.
    pub iteration: u64,
}

impl TrainState {
    pub fn fresh(model: AdaptModel, config: &TrainConfig) -> Self {
        let optimizer = OptimizerState::new(config.optimizer, config.epochs, model.params());
        Self { model, optimizer, iteration: 0 }
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

const TAG_SOURCE: u64 = 1;
const TAG_TARGET: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_LABELED: u64 = 4;

fn batch_tensor(images: &[&Observation]) -> Result<Tensor<f32>, NnError> {
    let s = images[0].size;
    let mut data = Vec::with_capacity(images.len() * 3 * s * s);
    for im in images {
        data.extend_from_slice(&im.data);
    }
    Tensor::new(vec![images.len(), 3, s, s], data)
}

/// Graph form of the discrepancies over critic maps `[N, 1, h, w]`.
pub fn discrepancy_node(g: &mut Graph<f32>, kind: Discrepancy, u_s: Var, u_t: Var) -> Result<Var, NnError> {
    match kind {
        Discrepancy::Pearson => {
            let src = g.mean(u_s);
            let sq = g.square(u_t);
            let quarter = g.scale(sq, 0.25);
            let conj = g.add(quarter, u_t)?;
            let tgt = g.mean(conj);
            let neg = g.scale(tgt, -1.0);
            g.add(src, neg)
        }
        Discrepancy::Dann | Discrepancy::Jensen => {
            let ls = g.log_sigmoid(u_s);
            let src = g.mean(ls);
            let flipped = g.scale(u_t, -1.0);
            let lt = g.log_sigmoid(flipped);
            let tgt = g.mean(lt);
            let both = g.add(src, tgt)?;
            Ok(if kind == Discrepancy::Dann {
                g.scale(both, 0.5)
            } else {
                g.add_scalar(both, (2.0 * std::f64::consts::LN_2) as f32)
            })
        }
    }
}

struct StepOutcome {
    grads: Vec<Vec<f32>>,
    row: MetricsRow,
    total: f64,
}

/// Owns the data and configuration of one training run.
pub struct Trainer<'a> {
    config: TrainConfig,
    source: &'a Dataset,
    target: &'a Dataset,
    /// Held-out labeled target data for per-epoch scores.
    eval: Option<&'a Dataset>,
    labeled_target: Vec<bool>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        source: &'a Dataset,
        target: &'a Dataset,
        eval: Option<&'a Dataset>,
    ) -> Result<Self, AdaptError> {
        config.validate()?;
        if source.is_empty() {
            return Err(AdaptError::EmptyDataset("source"));
        }
        if target.is_empty() {
            return Err(AdaptError::EmptyDataset("target"));
        }
        let n_labeled = (config.target_label_fraction * target.len() as f64).round() as usize;
        let mut labeled_target = vec![false; target.len()];
        for &i in permutation(target.len(), derive_seed(config.seed, TAG_LABELED, 0)).iter().take(n_labeled) {
            labeled_target[i] = true;
        }
        Ok(Self { config, source, target, eval, labeled_target })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn total_iterations(&self) -> u64 {
        self.config.total_iterations(self.source.len())
    }

    fn batch_indices(&self, iter: u64) -> (usize, Vec<usize>, Vec<usize>) {
        let cfg = &self.config;
        let spe = cfg.steps_per_epoch(self.source.len());
        let epoch = (iter / spe as u64) as usize;
        let within = (iter % spe as u64) as usize;
        let src_perm = permutation(self.source.len(), derive_seed(cfg.seed, TAG_SOURCE, epoch as u64));
        let src = (0..cfg.batch_source).map(|k| src_perm[(within * cfg.batch_source + k) % src_perm.len()]).collect();
        let tgt_perm = permutation(self.target.len(), derive_seed(cfg.seed, TAG_TARGET, epoch as u64));
        let tgt = (0..cfg.batch_target).map(|k| tgt_perm[(within * cfg.batch_target + k) % tgt_perm.len()]).collect();
        (epoch, src, tgt)
    }

    fn step(&self, model: &AdaptModel, iter: u64, epoch: usize, src: &[usize], tgt: &[usize]) -> Result<StepOutcome, AdaptError> {
        let cfg = &self.config;
        let w = cfg.weights;
        // source-only warm start; the reversal ramp restarts when adaptation begins
        let warm = (cfg.warm_start_epochs * cfg.steps_per_epoch(self.source.len())) as u64;
        let adapting = iter >= warm;
        let lambda_t = if adapting { cfg.schedule.lambda(iter - warm) } else { 0.0 };
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let disc = cfg.strategy.discrepancy().filter(|_| adapting);
        let pseudo = adapting && cfg.strategy.uses_pseudo();
        let labeled: Vec<usize> = tgt.iter().copied().filter(|&i| self.labeled_target[i]).collect();
        let need_target = disc.is_some() || pseudo || !labeled.is_empty();

        let mut g = Graph::<f32>::new();
        let p = model.bind(&mut g);
        let xs = g.constant(batch_tensor(&src.iter().map(|&i| &self.source.images[i]).collect::<Vec<_>>())?);
        let zs = model.encode(&mut g, &p, xs)?;
        let ps = model.segment(&mut g, &p, zs)?;

        let pixels = self.source.images[0].plane();
        let seg_norm = ((src.len() + labeled.len()) * pixels) as f32;
        let mut pos = Vec::with_capacity(src.len() * pixels);
        let mut neg = Vec::with_capacity(src.len() * pixels);
        for &i in src {
            for &y in &self.source.labels[i].cells {
                pos.push(w.beta as f32 * y as f32);
                neg.push(1.0 - y as f32);
            }
        }
        let mut seg = g.weighted_bce(ps, pos, neg, seg_norm, CLAMP as f32)?;

        let mut total = seg;
        let mut d_value = 0.0;
        let mut pseudo_value = 0.0;
        let mut confident_frac = 0.0;
        if need_target {
            let xt = g.constant(batch_tensor(&tgt.iter().map(|&i| &self.target.images[i]).collect::<Vec<_>>())?);
            let zt = model.encode(&mut g, &p, xt)?;
            let needs_pt = pseudo || !labeled.is_empty();
            let pt = if needs_pt { Some(model.segment(&mut g, &p, zt)?) } else { None };

            if let (Some(pt), false) = (pt, labeled.is_empty()) {
                let mut pos = Vec::with_capacity(tgt.len() * pixels);
                let mut neg = Vec::with_capacity(tgt.len() * pixels);
                for &i in tgt {
                    let on = self.labeled_target[i];
                    for &y in &self.target.labels[i].cells {
                        let y = if on { y as f32 } else { 0.0 };
                        pos.push(w.beta as f32 * y);
                        neg.push(if on { 1.0 - y } else { 0.0 });
                    }
                }
                let tl = g.weighted_bce(pt, pos, neg, seg_norm, CLAMP as f32)?;
                seg = g.add(seg, tl)?;
                total = seg;
            }

            if let Some(kind) = disc {
                let rs = g.grl(zs, lambda_t as f32);
                let rt = g.grl(zt, lambda_t as f32);
                let us = model.critic(&mut g, &p, rs)?;
                let ut = model.critic(&mut g, &p, rt)?;
                let d = discrepancy_node(&mut g, kind, us, ut)?;
                d_value = g.value(d).data()[0] as f64;
                // the critic ascends d_st; the reversal makes the encoder descend it
                let term = g.scale(d, -(w.lambda_dst as f32));
                total = g.add(total, term)?;
            }

            if pseudo {
                let pt = pt.expect("pseudo strategies compute clean target predictions");
                let clean = g.value(pt).data().to_vec();
                let tau = w.tau as f32;
                let mut pos = Vec::with_capacity(clean.len());
                let mut neg = Vec::with_capacity(clean.len());
                let mut count = 0usize;
                for &q in &clean {
                    let (hi, lo) = (q >= tau, q <= 1.0 - tau);
                    count += usize::from(hi || lo);
                    pos.push(if hi { w.beta as f32 } else { 0.0 });
                    neg.push(if lo { 1.0 } else { 0.0 });
                }
                confident_frac = count as f64 / clean.len() as f64;
                let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_AUGMENT, iter));
                let augmented: Vec<Observation> =
                    tgt.iter().map(|&i| strong_augment(&self.target.images[i], &cfg.augment, &mut aug_rng)).collect();
                let xa = g.constant(batch_tensor(&augmented.iter().collect::<Vec<_>>())?);
                let za = model.encode(&mut g, &p, xa)?;
                let pa = model.segment(&mut g, &p, za)?;
                let pl = g.weighted_bce(pa, pos, neg, count as f32, CLAMP as f32)?;
                pseudo_value = g.value(pl).data()[0] as f64;
                let term = g.scale(pl, w.mu_pseudo as f32);
                total = g.add(total, term)?;
            }
        }

        let seg_value = g.value(seg).data()[0] as f64;
        let total_value = g.value(total).data()[0] as f64;
        g.backward(total)?;
        let grads = p
            .vars()
            .iter()
            .zip(model.params())
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
            .collect();
        let row = MetricsRow { iter, seg_loss: seg_value, d_st: d_value, pseudo_loss: pseudo_value, lambda_t, confident_frac, lr };
        Ok(StepOutcome { grads, row, total: total_value })
    }

    /// Advances `state` until `stop_at` steps (or the end of training) are done.
    /// Calls `on_step` after every step and `on_epoch` after every completed epoch.
    pub fn run(
        &self,
        state: &mut TrainState,
        stop_at: Option<u64>,
        on_step: &mut dyn FnMut(&MetricsRow),
        on_epoch: &mut dyn FnMut(&EpochRow, &TrainState),
    ) -> Result<(), AdaptError> {
        let total = self.total_iterations();
        let end = stop_at.map_or(total, |s| s.min(total));
        let spe = self.config.steps_per_epoch(self.source.len()) as u64;
        while state.iteration < end {
            let iter = state.iteration;
            let (epoch, src, tgt) = self.batch_indices(iter);
            let out = self.step(&state.model, iter, epoch, &src, &tgt)?;
            if !out.total.is_finite() {
                return Err(AdaptError::Diverged {
                    iteration: iter,
                    reason: format!("non-finite total loss {}", out.total),
                    last_finite: Box::new(state.clone()),
                });
            }
            let before = state.clone();
            let names = state.model.names().to_vec();
            if let Err(e) = sgd_step(state.model.params_mut(), &out.grads, &names, &mut state.optimizer, epoch) {
                return Err(AdaptError::Diverged { iteration: iter, reason: e.to_string(), last_finite: Box::new(before) });
            }
            state.iteration += 1;
            on_step(&out.row);
            if state.iteration % spe == 0 {
                let n = self.config.epoch_eval_scenes;
                if let (Some(eval), true) = (self.eval, n > 0) {
                    let report = evaluate(&state.model, &eval.head(n), self.config.threshold)?;
                    let row = EpochRow { epoch: epoch + 1, iter: state.iteration, target_iou: report.mean_iou };
                    on_epoch(&row, state);
                } else {
                    on_epoch(&EpochRow { epoch: epoch + 1, iter: state.iteration, target_iou: f64::NAN }, state);
                }
            }
        }
        Ok(())
    }
}

/// Collected output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    pub epochs: Vec<EpochRow>,
}

/// Trains a fresh model from `model_seed` to completion.
pub fn train(
    config: &TrainConfig,
    model: AdaptModel,
    source: &Dataset,
    target: &Dataset,
    eval: Option<&Dataset>,
) -> Result<TrainOutcome, AdaptError> {
    let trainer = Trainer::new(config.clone(), source, target, eval)?;
    let mut state = TrainState::fresh(model, config);
    let mut metrics = Vec::new();
    let mut epochs = Vec::new();
    trainer.run(&mut state, None, &mut |r| metrics.push(*r), &mut |e, _| epochs.push(*e))?;
    Ok(TrainOutcome { state, metrics, epochs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_iou: f64,
    pub per_scene: Vec<f64>,
}

/// Mean of per-scene IoUs.
pub fn evaluate_predictions(preds: &[Vec<f32>], labels: &[LabelGrid], threshold: f32) -> EvalReport {
    let per_scene: Vec<f64> = preds.iter().zip(labels).map(|(p, l)| iou(p, l, threshold)).collect();
    let mean_iou = if per_scene.is_empty() { 0.0 } else { per_scene.iter().sum::<f64>() / per_scene.len() as f64 };
    EvalReport { mean_iou, per_scene }
}

const EVAL_BATCH: usize = 16;

pub fn evaluate(model: &AdaptModel, data: &Dataset, threshold: f32) -> Result<EvalReport, AdaptError> {
    if data.is_empty() {
        return Err(AdaptError::EmptyDataset("evaluation"));
    }
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.images.chunks(EVAL_BATCH) {
        let refs: Vec<&[f32]> = chunk.iter().map(|o| o.data.as_slice()).collect();
        preds.extend(model.predict(&refs)?);
    }
    Ok(evaluate_predictions(&preds, &data.labels, threshold))
}

fn critic_maps(model: &AdaptModel, data: &Dataset) -> Result<Vec<Vec<f64>>, AdaptError> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.images.chunks(EVAL_BATCH) {
        let refs: Vec<&[f32]> = chunk.iter().map(|o| o.data.as_slice()).collect();
        out.extend(model.critic_scores(&refs)?.into_iter().map(|m| m.into_iter().map(f64::from).collect()));
    }
    Ok(out)
}

/// Pearson discrepancy of the frozen critic on held-out data: a lower
/// estimate of the supremum over critics.
pub fn estimate_discrepancy(model: &AdaptModel, source: &Dataset, target: &Dataset) -> Result<f64, AdaptError> {
    if source.is_empty() || target.is_empty() {
        return Err(AdaptError::EmptyDataset("discrepancy"));
    }
    Ok(pearson_dst(&critic_maps(model, source)?, &critic_maps(model, target)?))
}

/// Ascends the Pearson discrepancy with respect to the critic only, keeping
/// the encoder and head fixed. Returns the updated model.
pub fn fine_tune_critic(
    model: &AdaptModel,
    source: &Dataset,
    target: &Dataset,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<AdaptModel, AdaptError> {
    if source.is_empty() || target.is_empty() || batch == 0 {
        return Err(AdaptError::EmptyDataset("critic fine-tuning"));
    }
    let mut model = model.clone();
    let cfg = OptimizerConfig { lr, momentum: 0.9, nesterov: true, poly_power: 0.0, clip_norm: Some(5.0) };
    let mut opt = OptimizerState::new(cfg, 0, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = model.groups().to_vec();
    for _ in 0..steps {
        let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            (0..batch).map(|_| rand::Rng::gen_range(rng, 0..n)).collect()
        };
        let (si, ti) = (pick(source.len(), &mut rng), pick(target.len(), &mut rng));
        let mut g = Graph::<f32>::new();
        let frozen = model.bind_frozen(&mut g);
        let vars: Vec<Var> = frozen
            .vars()
            .iter()
            .zip(&groups)
            .zip(model.params())
            .map(|((&v, grp), t)| if *grp == ParamGroup::Critic { g.param(t.clone()) } else { v })
            .collect();
        let p = crate::nn::BoundParams::from_vars(vars);
        let xs = g.constant(batch_tensor(&si.iter().map(|&i| &source.images[i]).collect::<Vec<_>>())?);
        let xt = g.constant(batch_tensor(&ti.iter().map(|&i| &target.images[i]).collect::<Vec<_>>())?);
        let zs = model.encode(&mut g, &p, xs)?;
        let zt = model.encode(&mut g, &p, xt)?;
        let us = model.critic(&mut g, &p, zs)?;
        let ut = model.critic(&mut g, &p, zt)?;
        let d = discrepancy_node(&mut g, Discrepancy::Pearson, us, ut)?;
        let loss = g.scale(d, -1.0);
        g.backward(loss)?;
        let grads: Vec<Vec<f32>> = p
            .vars()
            .iter()
            .zip(model.params())
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
            .collect();
        let names = model.names().to_vec();
        sgd_step(model.params_mut(), &grads, &names, &mut opt, 0)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::LN_2;

    use super::*;
    use crate::bev::GridSpec;

    #[test]
    fn seg_loss_fixtures() {
        assert!(seg_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 2.13) <= 1e-5);
        assert!((seg_loss(&[0.5], &[1.0], 1.0) - LN_2).abs() < 1e-12);
        assert!((seg_loss(&[0.5], &[1.0], 2.13) - 2.13 * LN_2).abs() < 1e-12);
        assert!(seg_loss(&[0.3, 0.2], &[1.0, 0.0], 3.0) > seg_loss(&[0.3, 0.2], &[1.0, 0.0], 2.0));
    }

    #[test]
    fn pearson_fixtures() {
        let z = vec![vec![0.0; 4]; 2];
        let two = vec![vec![2.0; 4]; 2];
        assert_eq!(pearson_dst(&z, &z), 0.0);
        assert!((pearson_dst(&two, &z) - 2.0).abs() < 1e-12);
        assert!((pearson_dst(&z, &two) + 3.0).abs() < 1e-12);
        let u = vec![vec![0.3, -1.0, 2.0]];
        assert!(pearson_dst(&u, &u) < 0.0);
    }

    #[test]
    fn dann_and_jensen_fixtures() {
        let z = vec![vec![0.0; 3]];
        assert!((dann_dst(&z, &z) + LN_2).abs() < 1e-12);
        let hi = vec![vec![60.0; 3]];
        let lo = vec![vec![-60.0; 3]];
        assert!(dann_dst(&hi, &lo).abs() < 1e-12);
        assert_ne!(dann_dst(&hi, &z), dann_dst(&z, &hi));
        assert!(jensen_dst(&z, &z).abs() < 1e-12);
        for u in [-10.0, -3.0, 0.0, 4.0, 10.0] {
            assert!(LN_2 + log_sigmoid(u) < LN_2);
            assert!(jensen_dst(&[vec![u]], &[vec![-u]]).is_finite());
        }
    }

    #[test]
    fn pseudo_fixtures() {
        assert_eq!(pseudo_loss(&[0.5, 0.8, 0.2], &[0.1, 0.1, 0.1], 0.9, 1.0), (0.0, 0));
        let (l, n) = pseudo_loss(&[0.95], &[0.95], 0.9, 1.0);
        assert_eq!(n, 1);
        assert!((l - 0.051_293_294_387_550_5).abs() < 1e-12);
        assert!((pseudo_loss(&[0.02], &[0.5], 0.9, 1.0).0 - LN_2).abs() < 1e-12);
    }

    #[test]
    fn graph_discrepancies_match_slices() {
        let us = [0.3f32, -1.2, 2.0, 0.7, -0.4, 1.1, 0.0, 0.9];
        let ut = [-0.5f32, 0.25, 1.5, -2.0, 0.6, 0.1, -0.3, 0.8];
        let slices = |v: &[f32]| v.chunks(4).map(|c| c.iter().map(|&x| x as f64).collect::<Vec<_>>()).collect::<Vec<_>>();
        for (kind, want) in [
            (Discrepancy::Pearson, pearson_dst(&slices(&us), &slices(&ut))),
            (Discrepancy::Dann, dann_dst(&slices(&us), &slices(&ut))),
            (Discrepancy::Jensen, jensen_dst(&slices(&us), &slices(&ut))),
        ] {
            let mut g = Graph::<f32>::new();
            let a = g.param(Tensor::new(vec![2, 1, 2, 2], us.to_vec()).unwrap());
            let b = g.param(Tensor::new(vec![2, 1, 2, 2], ut.to_vec()).unwrap());
            let d = discrepancy_node(&mut g, kind, a, b).unwrap();
            assert!((g.value(d).data()[0] as f64 - want).abs() < 1e-5, "{kind:?}");
        }
    }

    #[test]
    fn evaluate_fixtures() {
        let g = GridSpec::new(1.0, 1.0).unwrap();
        let labels = vec![
            LabelGrid { spec: g, cells: vec![1, 1, 0, 0] },
            LabelGrid { spec: g, cells: vec![0, 1, 0, 0] },
        ];
        let exact: Vec<Vec<f32>> = labels.iter().map(LabelGrid::as_f32).collect();
        assert_eq!(evaluate_predictions(&exact, &labels, 0.5).mean_iou, 1.0);
        assert_eq!(evaluate_predictions(&[vec![0.0; 4], vec![0.0; 4]], &labels, 0.5).mean_iou, 0.0);
        // {0} vs {0,1} scores 1/2; {1,2,3} vs {1} scores 1/3
        let preds = vec![vec![0.9, 0.1, 0.0, 0.0], vec![0.0, 0.7, 0.6, 0.55]];
        let r = evaluate_predictions(&preds, &labels, 0.5);
        assert!((r.mean_iou - (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("mmd".parse::<StrategyKind>().is_err());
    }
}
