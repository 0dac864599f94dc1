//! One alternating discriminator/generator update.

use radiogan_tensor::{Adam, AdamConfig, BatchStats, Bound, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::discriminator::Discriminators;
use crate::model::generator::GenForward;
use crate::model::layers::{update_running_stats, BatchNorm, Ctx};
use crate::model::losses::{loss_d_i, loss_d_is, loss_d_isg, loss_g, GeneratorLoss};
use crate::model::morphology::erode_background_batch;
use crate::model::{BnMode, GateOverride, Generator, ModelConfig};

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: Generator<f32>,
    pub discriminators: Discriminators<f32>,
    pub opt_generator: Adam<f32>,
    pub opt_discriminator: Adam<f32>,
    /// Completed generator updates.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: ModelConfig, cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(model.clone(), cfg.seed)?;
        let discriminators = Discriminators::new(model, cfg.seed)?;
        let opt_generator = Adam::new(adam(cfg.lr_generator), &generator.params);
        let opt_discriminator = Adam::new(adam(cfg.lr_discriminator), &discriminators.params);
        Ok(Self { generator, discriminators, opt_generator, opt_discriminator, step: 0 })
    }

    /// Applies learning rates from `cfg` (moments are kept).
    pub fn set_learning_rates(&mut self, cfg: &TrainingConfig) {
        self.opt_generator.config.lr = cfg.lr_generator;
        self.opt_discriminator.config.lr = cfg.lr_discriminator;
    }
}

fn adam(lr: f64) -> AdamConfig {
    AdamConfig { lr, ..AdamConfig::default() }
}

/// Losses logged for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_d_i: f64,
    pub l_d_is: f64,
    pub l_d_isg: f64,
    pub l_g: f64,
    pub masked_l1: f64,
}

fn scalar(g: &Graph<f32>, v: Var, term: &str) -> Result<f64> {
    let x = g.value(v).data()[0] as f64;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { term: term.into() })
    }
}

struct DLosses {
    d_i: Var,
    d_is: Var,
    d_isg: Var,
}

/// All three discriminator objectives on one batch and detached fakes. Each
/// input group gets its own batch-norm statistics.
fn discriminator_losses(
    d: &Discriminators<f32>,
    ctx: &mut Ctx<f32>,
    batch: &Batch,
    fake_image: &Tensor<f32>,
    fake_mask: &Tensor<f32>,
) -> Result<DLosses> {
    let reals = Tensor::stack_batch(&[&batch.images, &batch.backgrounds])?;
    let reals = ctx.graph.constant(reals);
    let x = ctx.graph.constant(batch.images.clone());
    let m = ctx.graph.constant(batch.masks.clone());
    let wm = ctx.graph.constant(batch.wrong_masks.clone());
    let g = ctx.graph.constant(batch.genes.clone());
    let wg = ctx.graph.constant(batch.wrong_genes.clone());
    let fx = ctx.graph.constant(fake_image.clone());
    let fm = ctx.graph.constant(fake_mask.clone());

    let s_real = d.score_i(ctx, reals)?;
    let s_fake = d.score_i(ctx, fx)?;
    let d_i = loss_d_i(ctx.graph, s_real, s_fake)?;

    let f_match = d.seg_features(ctx, x, m)?;
    let f_wrong = d.seg_features(ctx, x, wm)?;
    let f_fake = d.seg_features(ctx, fx, fm)?;
    let is_match = d.score_is(ctx, f_match)?;
    let is_wrong = d.score_is(ctx, f_wrong)?;
    let is_fake = d.score_is(ctx, f_fake)?;
    let d_is = loss_d_is(ctx.graph, is_match, is_wrong, is_fake)?;

    let c = d.map_gene(ctx, g)?;
    let wc = d.map_gene(ctx, wg)?;
    let isg_match = d.score_isg(ctx, f_match, c)?;
    let isg_wrong_mask = d.score_isg(ctx, f_wrong, c)?;
    let isg_wrong_gene = d.score_isg(ctx, f_match, wc)?;
    let isg_fake = d.score_isg(ctx, f_fake, c)?;
    let d_isg = loss_d_isg(ctx.graph, isg_match, isg_wrong_mask, isg_wrong_gene, isg_fake)?;
    Ok(DLosses { d_i, d_is, d_isg })
}

/// `L_G` for a generator pass already on `gg`, scored by constant
/// discriminators in batch-statistics mode.
fn score_generator(
    gg: &mut Graph<f32>,
    d: &Discriminators<f32>,
    fwd: &GenForward,
    batch: &Batch,
    region: &Tensor<f32>,
    lambda: f64,
) -> Result<GeneratorLoss> {
    let d_bound = d.params.bind(gg, false);
    let base = gg.constant(batch.backgrounds.clone());
    let gene = gg.constant(batch.genes.clone());
    let mut dctx = d.ctx(gg, &d_bound, BnMode::Batch);
    let s_i = d.score_i(&mut dctx, fwd.image)?;
    let feats = d.seg_features(&mut dctx, fwd.image, fwd.mask)?;
    let s_is = d.score_is(&mut dctx, feats)?;
    let code = d.map_gene(&mut dctx, gene)?;
    let s_isg = d.score_isg(&mut dctx, feats, code)?;
    loss_g(gg, s_i, s_is, s_isg, fwd.image, base, region, lambda)
}

/// Generator pass plus its loss. Returns the graph, the trainable handles,
/// the loss vars and the batch statistics seen by the generator.
fn generator_objective_graph(
    state: &TrainState,
    cfg: &TrainingConfig,
    batch: &Batch,
) -> Result<(Graph<f32>, Bound, GeneratorLoss, Vec<(BatchNorm, BatchStats<f32>)>)> {
    let gen = &state.generator;
    let mut gg = Graph::new();
    let g_bound = gen.params.bind(&mut gg, true);
    let bg = gg.constant(batch.backgrounds.clone());
    let gene = gg.constant(batch.genes.clone());
    let noise = gg.constant(batch.noise.clone());
    let mut gctx = gen.ctx(&mut gg, &g_bound, BnMode::Batch);
    let fwd = gen.forward(&mut gctx, bg, gene, noise, GateOverride::Learned)?;
    let observed = std::mem::take(&mut gctx.observed);
    drop(gctx);
    let mask = gg.value(fwd.mask).clone();
    let region = erode_background_batch(&mask, cfg.erosion_radius_px, gen.config.mask_threshold as f32)?;
    let lg = score_generator(&mut gg, &state.discriminators, &fwd, batch, &region, cfg.lambda)?;
    Ok((gg, g_bound, lg, observed))
}

/// `(L_G, masked L1)` at the current parameters, without updating anything.
pub fn generator_objective(state: &TrainState, cfg: &TrainingConfig, batch: &Batch) -> Result<(f64, f64)> {
    let (gg, _, lg, _) = generator_objective_graph(state, cfg, batch)?;
    Ok((scalar(&gg, lg.total, "L_G")?, scalar(&gg, lg.masked_l1, "masked L1")?))
}

/// One generator update against frozen discriminators; returns the loss
/// before the update.
pub fn generator_update(state: &mut TrainState, cfg: &TrainingConfig, batch: &Batch) -> Result<(f64, f64)> {
    let (gg, g_bound, lg, observed) = generator_objective_graph(state, cfg, batch)?;
    let out = (scalar(&gg, lg.total, "L_G")?, scalar(&gg, lg.masked_l1, "masked L1")?);
    let mut grads = gg.backward(lg.total)?;
    let grads = g_bound.collect(&gg, &mut grads);
    let gen = &mut state.generator;
    state.opt_generator.update(&mut gen.params, &grads)?;
    update_running_stats(&mut gen.buffers, &observed, gen.config.bn_momentum);
    Ok(out)
}

/// `d_steps_per_g_step` discriminator updates on fakes from one generator
/// pass, then one generator update scored by the updated discriminators.
pub fn train_step(state: &mut TrainState, cfg: &TrainingConfig, batch: &Batch) -> Result<StepMetrics> {
    let gen = &state.generator;
    let mut gg = Graph::new();
    let g_bound = gen.params.bind(&mut gg, true);
    let bg = gg.constant(batch.backgrounds.clone());
    let gene = gg.constant(batch.genes.clone());
    let noise = gg.constant(batch.noise.clone());
    let mut gctx = gen.ctx(&mut gg, &g_bound, BnMode::Batch);
    let fwd = gen.forward(&mut gctx, bg, gene, noise, GateOverride::Learned)?;
    let g_observed = std::mem::take(&mut gctx.observed);
    drop(gctx);
    let fake_image = gg.value(fwd.image).clone();
    let fake_mask = gg.value(fwd.mask).clone();
    if !fake_image.all_finite() || !fake_mask.all_finite() {
        return Err(Error::NonFinite { term: "generator output".into() });
    }

    let mut d_vals = (0.0, 0.0, 0.0);
    for _ in 0..cfg.d_steps_per_g_step {
        let d = &state.discriminators;
        let mut dg = Graph::new();
        let d_bound = d.params.bind(&mut dg, true);
        let mut dctx = d.ctx(&mut dg, &d_bound, BnMode::Batch);
        let l = discriminator_losses(d, &mut dctx, batch, &fake_image, &fake_mask)?;
        let observed = std::mem::take(&mut dctx.observed);
        drop(dctx);
        d_vals = (scalar(&dg, l.d_i, "L_D_I")?, scalar(&dg, l.d_is, "L_D_IS")?, scalar(&dg, l.d_isg, "L_D_ISG")?);
        let total = dg.add_all(&[l.d_i, l.d_is, l.d_isg])?;
        let mut grads = dg.backward(total)?;
        let grads = d_bound.collect(&dg, &mut grads);
        let d = &mut state.discriminators;
        state.opt_discriminator.update(&mut d.params, &grads)?;
        update_running_stats(&mut d.buffers, &observed, d.config.bn_momentum);
    }

    let region = erode_background_batch(&fake_mask, cfg.erosion_radius_px, gen.config.mask_threshold as f32)?;
    let lg = score_generator(&mut gg, &state.discriminators, &fwd, batch, &region, cfg.lambda)?;
    let l_g = scalar(&gg, lg.total, "L_G")?;
    let masked_l1 = scalar(&gg, lg.masked_l1, "masked L1")?;
    let mut grads = gg.backward(lg.total)?;
    let grads = g_bound.collect(&gg, &mut grads);
    let gen = &mut state.generator;
    state.opt_generator.update(&mut gen.params, &grads)?;
    update_running_stats(&mut gen.buffers, &g_observed, gen.config.bn_momentum);
    state.step += 1;

    Ok(StepMetrics { step: state.step, l_d_i: d_vals.0, l_d_is: d_vals.1, l_d_isg: d_vals.2, l_g, masked_l1 })
}
