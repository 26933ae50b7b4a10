//! Alternating labeled/unlabeled optimization.
//!
//! Each epoch runs a labeled pass (batch-averaged L2 + Adam), rebuilds the
//! latent bank with the updated encoder, then runs an unlabeled pass whose
//! targets come from the GP posterior over that bank (or, for the ranking
//! arm, from sub-image count constraints).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::{synthesize_density, DensityMap};
use crate::error::{Error, Result};
use crate::gp::{self, GpConfig, LatentBank, NeighborMetric};
use crate::losses::{self, LossValue};
use crate::model::{self, init_params, ModelConfig, ModelParams};
use crate::optim::Adam;
use crate::synth::AnnotatedImage;
use crate::tensor::{Array, Graph, NodeId};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_un: f64,
    pub n_neighbors: usize,
    pub noise_variance: f64,
    pub neighbor_metric: NeighborMetric,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Side of the square training crop; ≥ the image side disables cropping.
    pub crop_size: usize,
    pub seed: u64,
    pub gp_enabled: bool,
    pub ranking_enabled: bool,
    pub ranking_margin: f64,
    /// Treat the pseudo ground truth as a constant target.
    pub detach_pseudo: bool,
    /// One combined step per (labeled, unlabeled) batch pair instead of
    /// alternating whole passes.
    pub interleave: bool,
    pub flip: bool,
    pub density_sigma: f64,
    pub encoder_channels: [usize; 3],
    pub latent_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_un: losses::DEFAULT_LAMBDA_UN,
            n_neighbors: 8,
            noise_variance: 1.0,
            neighbor_metric: NeighborMetric::Cosine,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 30,
            crop_size: 64,
            seed: 0,
            gp_enabled: false,
            ranking_enabled: false,
            ranking_margin: 0.0,
            detach_pseudo: true,
            interleave: false,
            flip: true,
            density_sigma: 2.0,
            encoder_channels: [8, 16, 16],
            latent_channels: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be ≥ 0, got {}", self.learning_rate)));
        }
        let positive = [
            ("adam_eps", self.adam_eps),
            ("noise_variance", self.noise_variance),
            ("density_sigma", self.density_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.lambda_un >= 0.0) {
            return Err(Error::Config(format!("lambda_un must be ≥ 0, got {}", self.lambda_un)));
        }
        if self.batch_size == 0 || self.n_neighbors == 0 || self.crop_size == 0 {
            return Err(Error::Config("batch_size, n_neighbors and crop_size must be ≥ 1".into()));
        }
        if self.gp_enabled && self.ranking_enabled {
            return Err(Error::Config("gp_enabled and ranking_enabled are mutually exclusive".into()));
        }
        if self.latent_channels == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::Config("channel counts must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn gp_config(&self) -> GpConfig {
        GpConfig {
            n_neighbors: self.n_neighbors,
            noise_variance: self.noise_variance,
            metric: self.neighbor_metric,
        }
    }

    /// Model geometry for images of the given size (crops shrink it).
    pub fn model_config(&self, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            height: height.min(self.crop_size),
            width: width.min(self.crop_size),
            encoder_channels: self.encoder_channels,
            latent_channels: self.latent_channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Labeled,
    Unlabeled,
    Ranking,
    Interleaved,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Labeled => "labeled",
            Stage::Unlabeled => "unlabeled",
            Stage::Ranking => "ranking",
            Stage::Interleaved => "interleaved",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub mean_loss: f64,
    pub steps: usize,
    /// Mean predictive variance over the pass (GP stages only).
    pub mean_variance: Option<f64>,
    /// Fraction of sub-image pairs already satisfying the ranking constraint.
    pub satisfied_fraction: Option<f64>,
    pub skipped: usize,
}

/// Running summary of every predictive variance computed during training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VarianceStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub sum: f64,
    /// Values outside `[σ², 1 + σ²]`.
    pub violations: usize,
}

impl VarianceStats {
    fn record(&mut self, v: f64, noise: f64) {
        if self.count == 0 {
            self.min = v;
            self.max = v;
        } else {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += 1;
        self.sum += v;
        if !(v >= noise && v <= 1.0 + noise) {
            self.violations += 1;
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    pub bank: Option<LatentBank>,
    pub epoch: usize,
    pub history: Vec<StageRecord>,
    pub variance: VarianceStats,
    /// Unlabeled samples skipped for a zero-norm latent.
    pub skipped_latents: usize,
    labeled_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, model_config: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(model_config, cfg.seed)?;
        let adam = Adam::new(&params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let mut labeled_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        labeled_rng.set_stream(1);
        let mut unlabeled_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        unlabeled_rng.set_stream(2);
        Ok(Self {
            params,
            adam,
            bank: None,
            epoch: 0,
            history: Vec::new(),
            variance: VarianceStats::default(),
            skipped_latents: 0,
            labeled_rng,
            unlabeled_rng,
        })
    }
}

/// Random flip and crop for one training sample.
fn augment(
    img: &AnnotatedImage,
    density: Option<&DensityMap>,
    cfg: &TrainConfig,
    mc: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AnnotatedImage, Option<DensityMap>)> {
    let flip = cfg.flip && rng.random_bool(0.5);
    let (mut img, mut density) = if flip {
        (img.flipped(), density.map(DensityMap::flipped))
    } else {
        (img.clone(), density.cloned())
    };
    if img.height != mc.height || img.width != mc.width {
        let top = rng.random_range(0..=img.height - mc.height);
        let left = rng.random_range(0..=img.width - mc.width);
        density = density
            .map(|d| crop_density(&d, top, left, mc.height, mc.width))
            .transpose()?;
        img = img.crop(top, left, mc.height, mc.width)?;
    }
    Ok((img, density))
}

fn crop_density(d: &DensityMap, top: usize, left: usize, h: usize, w: usize) -> Result<DensityMap> {
    let mut v = Vec::with_capacity(h * w);
    for r in top..top + h {
        v.extend_from_slice(&d.values()[r * d.width() + left..r * d.width() + left + w]);
    }
    DensityMap::from_values(h, w, v)
}

/// Deterministic center crop to the model size (identity when sizes match).
fn center_crop(img: &AnnotatedImage, mc: &ModelConfig) -> Result<AnnotatedImage> {
    if img.height == mc.height && img.width == mc.width {
        return Ok(img.clone());
    }
    img.crop((img.height - mc.height) / 2, (img.width - mc.width) / 2, mc.height, mc.width)
}

fn check_images(set: &[AnnotatedImage], what: &str, mc: &ModelConfig) -> Result<()> {
    for img in set {
        if img.height < mc.height || img.width < mc.width {
            return Err(Error::Shape(format!(
                "{what} image {} is {}×{}, smaller than the {}×{} model input",
                img.id, img.height, img.width, mc.height, mc.width
            )));
        }
    }
    Ok(())
}

/// Backward from `loss` and apply Adam. A gradient that is identically zero
/// leaves parameters and optimizer moments untouched; returns whether a step
/// was taken.
fn apply_step(
    state: &mut TrainState,
    graph: &mut Graph,
    param_nodes: &[NodeId],
    loss: &LossValue,
    stage: Stage,
) -> Result<bool> {
    if !loss.value.is_finite() {
        return Err(Error::Divergence {
            epoch: state.epoch,
            stage: stage.name(),
            loss: loss.value,
        });
    }
    if !graph.requires_grad(loss.node) {
        return Ok(false);
    }
    graph.backward(loss.node)?;
    let grads: Vec<Option<Array>> = param_nodes.iter().map(|&n| graph.grad(n).cloned()).collect();
    let any_nonzero = grads
        .iter()
        .flatten()
        .any(|g| g.data().iter().any(|&v| v != 0.0));
    if !any_nonzero {
        return Ok(false);
    }
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(Error::Divergence {
            epoch: state.epoch,
            stage: stage.name(),
            loss: f64::NAN,
        });
    }
    state.adam.step(&mut state.params, &grads);
    Ok(true)
}

fn labeled_densities(labeled: &[AnnotatedImage], sigma: f64) -> Result<Vec<DensityMap>> {
    labeled
        .iter()
        .map(|img| synthesize_density(&img.points, img.height, img.width, sigma))
        .collect()
}

/// Build the supervised loss for one labeled batch on an existing graph.
fn labeled_batch_loss(
    state: &mut TrainState,
    graph: &mut Graph,
    bound: &model::BoundParams,
    batch: &[usize],
    labeled: &[AnnotatedImage],
    densities: &[DensityMap],
    cfg: &TrainConfig,
) -> Result<LossValue> {
    let mc = state.params.config.clone();
    let mut preds = Vec::with_capacity(batch.len());
    let mut gts = Vec::with_capacity(batch.len());
    for &i in batch {
        let (img, gt) = augment(&labeled[i], Some(&densities[i]), cfg, &mc, &mut state.labeled_rng)?;
        let enc = model::encode(graph, bound, &mc, &img.pixels)?;
        preds.push(model::decode(graph, bound, &mc, enc.node)?);
        gts.push(gt.expect("labeled density"));
    }
    let refs: Vec<&DensityMap> = gts.iter().collect();
    losses::supervised_loss(graph, &preds, &refs)
}

/// Refresh the latent bank from the labeled set with the current parameters.
pub fn refresh_bank(state: &mut TrainState, labeled: &[AnnotatedImage], cfg: &TrainConfig) -> Result<()> {
    let mc = state.params.config.clone();
    let crops: Vec<AnnotatedImage> = if labeled.iter().all(|i| i.height == mc.height && i.width == mc.width) {
        labeled.to_vec()
    } else {
        labeled.iter().map(|i| center_crop(i, &mc)).collect::<Result<_>>()?
    };
    let (bank, _skipped) = gp::rebuild_bank(&crops, &state.params, cfg.density_sigma)?;
    if bank.is_empty() {
        return Err(Error::State("every labeled latent is degenerate; bank is empty".into()));
    }
    state.bank = Some(bank);
    Ok(())
}

/// One supervised pass over the labeled set, then a bank rebuild.
pub fn labeled_stage(state: &mut TrainState, labeled: &[AnnotatedImage], cfg: &TrainConfig) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::State("labeled set is empty".into()));
    }
    let mc = state.params.config.clone();
    check_images(labeled, "labeled", &mc)?;
    let densities = labeled_densities(labeled, cfg.density_sigma)?;
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut state.labeled_rng);

    let (mut total, mut steps) = (0.0, 0);
    for batch in order.chunks(cfg.batch_size) {
        let mut graph = Graph::new();
        let bound = state.params.bind(&mut graph, true);
        let loss = labeled_batch_loss(state, &mut graph, &bound, batch, labeled, &densities, cfg)?;
        apply_step(state, &mut graph, &bound.nodes, &loss, Stage::Labeled)?;
        total += loss.value;
        steps += 1;
    }
    state.history.push(StageRecord {
        epoch: state.epoch,
        stage: Stage::Labeled,
        mean_loss: total / steps as f64,
        steps,
        mean_variance: None,
        satisfied_fraction: None,
        skipped: 0,
    });
    refresh_bank(state, labeled, cfg)
}

struct UnlabeledTerms {
    losses: Vec<LossValue>,
    variances: Vec<f64>,
    skipped: usize,
}

/// Per-sample GP losses for one unlabeled batch.
fn gp_batch_terms(
    state: &mut TrainState,
    graph: &mut Graph,
    bound: &model::BoundParams,
    batch: &[usize],
    unlabeled: &[AnnotatedImage],
    cfg: &TrainConfig,
) -> Result<UnlabeledTerms> {
    let mc = state.params.config.clone();
    let noise = cfg.noise_variance;
    let mut out = UnlabeledTerms {
        losses: Vec::with_capacity(batch.len()),
        variances: Vec::with_capacity(batch.len()),
        skipped: 0,
    };
    for &i in batch {
        let (img, _) = augment(&unlabeled[i], None, cfg, &mc, &mut state.unlabeled_rng)?;
        let enc = model::encode(graph, bound, &mc, &img.pixels)?;
        if !(enc.latent.norm() > 0.0) {
            out.skipped += 1;
            continue;
        }
        let bank = state
            .bank
            .as_ref()
            .ok_or_else(|| Error::State("unlabeled stage needs a latent bank".into()))?;
        let nb = gp::nearest(enc.latent.as_slice(), bank, cfg.n_neighbors, cfg.neighbor_metric)?;
        let post = gp::posterior_with(enc.latent.as_slice(), &nb, bank, noise)?;
        let var = gp::variance_node(graph, enc.node, &nb.features, noise)?;
        state.variance.record(post.variance, noise);
        out.variances.push(post.variance);
        let pred = model::decode(graph, bound, &mc, enc.node)?;
        let loss = if cfg.detach_pseudo {
            losses::unsupervised_loss(graph, pred, &post, var)?
        } else {
            let mean = gp::mean_node(graph, enc.node, &nb, noise)?;
            losses::unsupervised_loss_with_mean(graph, pred, mean, var)?
        };
        out.losses.push(loss);
    }
    Ok(out)
}

/// Sub-image crop used by the ranking arm: half the side, rounded down to a
/// multiple of the encoder stride.
fn ranking_crop_side(side: usize) -> usize {
    ((side / 2) / ModelConfig::DOWNSAMPLE * ModelConfig::DOWNSAMPLE).max(ModelConfig::DOWNSAMPLE)
}

/// Per-sample ranking hinge losses for one unlabeled batch.
fn ranking_batch_terms(
    state: &mut TrainState,
    graph: &mut Graph,
    bound: &model::BoundParams,
    batch: &[usize],
    unlabeled: &[AnnotatedImage],
    cfg: &TrainConfig,
) -> Result<(Vec<LossValue>, usize)> {
    let mc = state.params.config.clone();
    let mut out = Vec::with_capacity(batch.len());
    let mut satisfied = 0;
    for &i in batch {
        let (img, _) = augment(&unlabeled[i], None, cfg, &mc, &mut state.unlabeled_rng)?;
        let enc = model::encode(graph, bound, &mc, &img.pixels)?;
        let full = model::decode(graph, bound, &mc, enc.node)?;
        let full_count = graph.sum(full);
        let (ch, cw) = (ranking_crop_side(img.height), ranking_crop_side(img.width));
        let top = state.unlabeled_rng.random_range(0..=img.height - ch);
        let left = state.unlabeled_rng.random_range(0..=img.width - cw);
        let sub = img.crop(top, left, ch, cw)?;
        let sub_pred = model::forward_region(graph, bound, &sub.pixels, ch, cw)?;
        let sub_count = graph.sum(sub_pred);
        let loss = losses::ranking_hinge_loss(graph, full_count, sub_count, cfg.ranking_margin)?;
        if loss.value == 0.0 {
            satisfied += 1;
        }
        out.push(loss);
    }
    Ok((out, satisfied))
}

/// One pass over the unlabeled set with GP pseudo ground truth.
pub fn unlabeled_stage(
    state: &mut TrainState,
    unlabeled: &[AnnotatedImage],
    cfg: &TrainConfig,
) -> Result<()> {
    if unlabeled.is_empty() || cfg.lambda_un == 0.0 {
        return Ok(());
    }
    if state.bank.is_none() {
        return Err(Error::State("unlabeled stage needs a preceding labeled stage".into()));
    }
    check_images(unlabeled, "unlabeled", &state.params.config)?;
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    order.shuffle(&mut state.unlabeled_rng);

    let (mut total, mut steps, mut skipped) = (0.0, 0, 0);
    let (mut var_sum, mut var_n) = (0.0, 0);
    for batch in order.chunks(cfg.batch_size) {
        let mut graph = Graph::new();
        let bound = state.params.bind(&mut graph, true);
        let terms = gp_batch_terms(state, &mut graph, &bound, batch, unlabeled, cfg)?;
        skipped += terms.skipped;
        var_sum += terms.variances.iter().sum::<f64>();
        var_n += terms.variances.len();
        if terms.losses.is_empty() {
            continue;
        }
        let unsup = losses::mean_loss(&mut graph, &terms.losses)?;
        let zero = LossValue::zero(&mut graph);
        let loss = losses::combined_loss(&mut graph, &zero, &unsup, cfg.lambda_un)?;
        apply_step(state, &mut graph, &bound.nodes, &loss, Stage::Unlabeled)?;
        total += loss.value;
        steps += 1;
    }
    state.skipped_latents += skipped;
    state.history.push(StageRecord {
        epoch: state.epoch,
        stage: Stage::Unlabeled,
        mean_loss: if steps > 0 { total / steps as f64 } else { 0.0 },
        steps,
        mean_variance: (var_n > 0).then(|| var_sum / var_n as f64),
        satisfied_fraction: None,
        skipped,
    });
    Ok(())
}

/// One pass over the unlabeled set with the ranking hinge baseline.
pub fn ranking_stage(state: &mut TrainState, unlabeled: &[AnnotatedImage], cfg: &TrainConfig) -> Result<()> {
    if unlabeled.is_empty() || cfg.lambda_un == 0.0 {
        return Ok(());
    }
    check_images(unlabeled, "unlabeled", &state.params.config)?;
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    order.shuffle(&mut state.unlabeled_rng);
    let (mut total, mut steps, mut satisfied, mut seen) = (0.0, 0, 0, 0);
    for batch in order.chunks(cfg.batch_size) {
        let mut graph = Graph::new();
        let bound = state.params.bind(&mut graph, true);
        let (terms, ok) = ranking_batch_terms(state, &mut graph, &bound, batch, unlabeled, cfg)?;
        satisfied += ok;
        seen += terms.len();
        let unsup = losses::mean_loss(&mut graph, &terms)?;
        let zero = LossValue::zero(&mut graph);
        let loss = losses::combined_loss(&mut graph, &zero, &unsup, cfg.lambda_un)?;
        apply_step(state, &mut graph, &bound.nodes, &loss, Stage::Ranking)?;
        total += loss.value;
        steps += 1;
    }
    state.history.push(StageRecord {
        epoch: state.epoch,
        stage: Stage::Ranking,
        mean_loss: total / steps.max(1) as f64,
        steps,
        mean_variance: None,
        satisfied_fraction: (seen > 0).then(|| satisfied as f64 / seen as f64),
        skipped: 0,
    });
    Ok(())
}

/// Batch-level interleaving: every step combines one labeled batch (cycled)
/// with one unlabeled batch. The bank is rebuilt after each epoch.
fn interleaved_epoch(
    state: &mut TrainState,
    labeled: &[AnnotatedImage],
    unlabeled: &[AnnotatedImage],
    cfg: &TrainConfig,
) -> Result<()> {
    let mc = state.params.config.clone();
    check_images(labeled, "labeled", &mc)?;
    check_images(unlabeled, "unlabeled", &mc)?;
    let densities = labeled_densities(labeled, cfg.density_sigma)?;
    let mut lab_order: Vec<usize> = (0..labeled.len()).collect();
    lab_order.shuffle(&mut state.labeled_rng);
    let mut unl_order: Vec<usize> = (0..unlabeled.len()).collect();
    unl_order.shuffle(&mut state.unlabeled_rng);
    let lab_batches: Vec<&[usize]> = lab_order.chunks(cfg.batch_size).collect();
    let (mut total, mut steps) = (0.0, 0);
    let (mut var_sum, mut var_n) = (0.0, 0);
    for (k, ubatch) in unl_order.chunks(cfg.batch_size).enumerate() {
        let lbatch = lab_batches[k % lab_batches.len()];
        let mut graph = Graph::new();
        let bound = state.params.bind(&mut graph, true);
        let sup = labeled_batch_loss(state, &mut graph, &bound, lbatch, labeled, &densities, cfg)?;
        let unsup = if cfg.gp_enabled {
            let terms = gp_batch_terms(state, &mut graph, &bound, ubatch, unlabeled, cfg)?;
            state.skipped_latents += terms.skipped;
            var_sum += terms.variances.iter().sum::<f64>();
            var_n += terms.variances.len();
            losses::mean_loss(&mut graph, &terms.losses)?
        } else {
            let (terms, _) = ranking_batch_terms(state, &mut graph, &bound, ubatch, unlabeled, cfg)?;
            losses::mean_loss(&mut graph, &terms)?
        };
        let loss = losses::combined_loss(&mut graph, &sup, &unsup, cfg.lambda_un)?;
        apply_step(state, &mut graph, &bound.nodes, &loss, Stage::Interleaved)?;
        total += loss.value;
        steps += 1;
    }
    state.history.push(StageRecord {
        epoch: state.epoch,
        stage: Stage::Interleaved,
        mean_loss: total / steps.max(1) as f64,
        steps,
        mean_variance: (var_n > 0).then(|| var_sum / var_n as f64),
        satisfied_fraction: None,
        skipped: 0,
    });
    refresh_bank(state, labeled, cfg)
}

/// Full training run. With both `gp_enabled` and `ranking_enabled` off this
/// is the labeled-only baseline.
pub fn train(labeled: &[AnnotatedImage], unlabeled: &[AnnotatedImage], cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let first = labeled
        .first()
        .ok_or_else(|| Error::State("labeled set is empty".into()))?;
    let mc = cfg.model_config(first.height, first.width);
    let mut state = TrainState::new(cfg, &mc)?;
    let semi = (cfg.gp_enabled || cfg.ranking_enabled) && !unlabeled.is_empty();
    if cfg.interleave && semi {
        refresh_bank(&mut state, labeled, cfg)?;
    }
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        if cfg.interleave && semi {
            interleaved_epoch(&mut state, labeled, unlabeled, cfg)?;
            continue;
        }
        labeled_stage(&mut state, labeled, cfg)?;
        if cfg.gp_enabled {
            unlabeled_stage(&mut state, unlabeled, cfg)?;
        } else if cfg.ranking_enabled {
            ranking_stage(&mut state, unlabeled, cfg)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DomainStyle};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            encoder_channels: [2, 4, 4],
            latent_channels: 4,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize, seed: u64) -> Vec<AnnotatedImage> {
        generate_dataset(n, (32, 32), (2, 8), &DomainStyle::default(), seed).unwrap()
    }

    #[test]
    fn mutually_exclusive_arms_rejected() {
        let cfg = TrainConfig {
            gp_enabled: true,
            ranking_enabled: true,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn baseline_history_is_supervised_only() {
        let d = data(6, 1);
        let state = train(&d[..3], &d[3..], &tiny_cfg()).unwrap();
        assert!(state.history.iter().all(|r| r.stage == Stage::Labeled));
        assert_eq!(state.history.len(), 2);
    }

    #[test]
    fn empty_unlabeled_reduces_to_baseline() {
        let d = data(4, 2);
        let base = train(&d, &[], &tiny_cfg()).unwrap();
        let gp = train(
            &d,
            &[],
            &TrainConfig {
                gp_enabled: true,
                ..tiny_cfg()
            },
        )
        .unwrap();
        assert_eq!(base.params, gp.params);
    }

    #[test]
    fn zero_lambda_leaves_params_after_labeled_stage() {
        let d = data(6, 3);
        let cfg = TrainConfig {
            gp_enabled: true,
            lambda_un: 0.0,
            ..tiny_cfg()
        };
        let mut state = TrainState::new(&cfg, &cfg.model_config(32, 32)).unwrap();
        labeled_stage(&mut state, &d[..2], &cfg).unwrap();
        let before = state.params.clone();
        unlabeled_stage(&mut state, &d[2..], &cfg).unwrap();
        assert_eq!(state.params, before);
    }

    #[test]
    fn unlabeled_stage_without_bank_is_state_error() {
        let d = data(2, 4);
        let cfg = TrainConfig {
            gp_enabled: true,
            ..tiny_cfg()
        };
        let mut state = TrainState::new(&cfg, &cfg.model_config(32, 32)).unwrap();
        assert!(matches!(unlabeled_stage(&mut state, &d, &cfg), Err(Error::State(_))));
    }

    #[test]
    fn ranking_crop_side_is_stride_multiple() {
        assert_eq!(ranking_crop_side(64), 32);
        assert_eq!(ranking_crop_side(40), 16);
        assert_eq!(ranking_crop_side(8), 8);
    }
}
