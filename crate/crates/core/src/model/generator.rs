//! Background-conditioned, gene-styled generator.
//!
//! The background is encoded into a pyramid of `L` levels. The gene vector is
//! mapped to a code, concatenated with noise into the style base, projected to
//! a coarse seed and decoded from the coarsest level to the finest. At every
//! level a fusion block gates decoded object features against the background
//! features of the same level and restyles the object part with AdaIN.

use radiogan_tensor::{Graph, ParamSet, Real, Tensor, Var};

use super::config::ModelConfig;
use super::layers::{cast_params, leaky_gain, BatchNorm, BnMode, Builder, Conv, Ctx, Linear};
use crate::data::{ImagePatch, SegMask};
use crate::error::{Error, Result};
use crate::rng::{domain, stream};

/// Forces the fusion gate for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateOverride {
    #[default]
    Learned,
    /// `plus = 0`: pass the background through unchanged.
    Closed,
    /// `plus = 1`: drop the background.
    Open,
}

#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub channels: usize,
    pub conv1: Conv,
    pub bn1: BatchNorm,
    /// Doubles the channel count: gate logits then object features.
    pub conv2: Conv,
    pub bn2: BatchNorm,
    /// Style base to per-channel AdaIN `(scale, shift)`.
    pub style: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    map1: Linear,
    map2: Linear,
    seed: Linear,
    encoder: Vec<(Conv, BatchNorm)>,
    /// Index `l - 1` holds the block of level `l`.
    fusion: Vec<FusionBlock>,
    /// Index `l - 2` decodes level `l` into level `l - 1`.
    up: Vec<(Conv, BatchNorm)>,
    final_up: (Conv, BatchNorm),
    image_head: Conv,
    mask_head: Conv,
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
    layout: Layout,
}

/// Gate maps and output of one fusion block.
#[derive(Debug, Clone, Copy)]
pub struct FusionOut {
    pub out: Var,
    pub plus: Var,
    pub minus: Var,
}

/// Graph handles of one generator pass.
#[derive(Debug, Clone)]
pub struct GenForward {
    pub code: Var,
    pub style: Var,
    /// Soft image in `[-1, 1]`, `(N, 1, H, W)`.
    pub image: Var,
    /// Soft mask in `[0, 1]`, `(N, 1, H, W)`.
    pub mask: Var,
    /// Background gate of the finest fusion block.
    pub finest_minus: Var,
}

/// Concrete outputs for one background.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutput {
    pub image: ImagePatch,
    pub mask: SegMask,
    pub soft_mask: Vec<f32>,
    /// Channel mean of the finest background gate, upsampled to the image grid.
    pub weight_map: Vec<f32>,
}

/// `scale * (x - mu) / (sigma + eps) + shift` per sample and channel.
pub fn adain<T: Real>(g: &mut Graph<T>, content: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
    let z = g.instance_standardize(content, eps)?;
    Ok(g.channel_affine(z, scale, shift)?)
}

impl Generator<f32> {
    /// Fresh weights from the generator init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init(config, seed)
    }
}

impl<T: Real> Generator<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let mut rng = stream(seed, domain::INIT_GENERATOR, 0);
        let mut b = Builder { params: &mut params, buffers: &mut buffers, rng: &mut rng };
        let gain = leaky_gain(config.leaky_slope);
        let c = &config.channels;
        let l = c.len();
        let s = config.style_dim();

        let map1 = b.linear("mapping.fc1", config.gene_dim, config.mapping_hidden, gain)?;
        let map2 = b.linear("mapping.fc2", config.mapping_hidden, config.code_dim, 1.0)?;
        let side = config.level_size(l);
        let seed_fc = b.linear("seed", s, c[l - 1] * side * side, 1.0)?;
        let mut encoder = Vec::with_capacity(l);
        let mut cin = 1;
        for (i, &co) in c.iter().enumerate() {
            let name = format!("encoder.{}", i + 1);
            encoder.push((b.conv(&name, cin, co, 3, 2, gain)?, b.batch_norm(&format!("{name}.bn"), co)?));
            cin = co;
        }
        let mut fusion = Vec::with_capacity(l);
        for (i, &ch) in c.iter().enumerate() {
            let name = format!("fusion.{}", i + 1);
            let style = b.linear(&format!("{name}.style"), s, 2 * ch, 0.5)?;
            // scale starts at 1
            let bias = style.b.expect("linear layers carry a bias");
            b.params.get_mut(bias).data_mut()[..ch].fill(T::one());
            fusion.push(FusionBlock {
                channels: ch,
                conv1: b.conv(&format!("{name}.conv1"), ch, ch, 3, 1, gain)?,
                bn1: b.batch_norm(&format!("{name}.bn1"), ch)?,
                conv2: b.conv(&format!("{name}.conv2"), ch, 2 * ch, 3, 1, 1.0)?,
                bn2: b.batch_norm(&format!("{name}.bn2"), 2 * ch)?,
                style,
            });
        }
        let mut up = Vec::with_capacity(l.saturating_sub(1));
        for i in 1..l {
            let name = format!("up.{}", i + 1);
            up.push((b.conv(&name, c[i], c[i - 1], 3, 1, gain)?, b.batch_norm(&format!("{name}.bn"), c[i - 1])?));
        }
        let hc = config.head_channels;
        let final_up = (b.conv("up.out", c[0], hc, 3, 1, gain)?, b.batch_norm("up.out.bn", hc)?);
        let image_head = b.conv("head.image", hc, 1, 3, 1, 1.0)?;
        let mask_head = b.conv("head.mask", hc, 1, 3, 1, 1.0)?;
        let layout = Layout { map1, map2, seed: seed_fc, encoder, fusion, up, final_up, image_head, mask_head };
        Ok(Self { config, params, buffers, layout })
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: cast_params(&self.params),
            buffers: cast_params(&self.buffers),
            layout: self.layout.clone(),
        }
    }

    pub fn fusion_blocks(&self) -> &[FusionBlock] {
        &self.layout.fusion
    }

    /// Builds a forward context over this generator's parameters.
    pub fn ctx<'a>(&'a self, graph: &'a mut Graph<T>, bound: &'a radiogan_tensor::Bound, mode: BnMode) -> Ctx<'a, T> {
        Ctx::new(graph, bound, &self.buffers, mode, self.config.leaky_slope, self.config.bn_eps)
    }

    /// Two fully connected layers with a leaky ReLU in between.
    pub fn map_gene(&self, ctx: &mut Ctx<T>, gene: Var) -> Result<Var> {
        let w = ctx.graph.value(gene).shape().get(1).copied();
        if w != Some(self.config.gene_dim) {
            return Err(Error::Dimension { expected: self.config.gene_dim, got: w.unwrap_or(0) });
        }
        let h = ctx.linear(&self.layout.map1, gene)?;
        let h = ctx.lrelu(h);
        ctx.linear(&self.layout.map2, h)
    }

    /// Level `l` (1-based) of the result has shape `(N, C_l, W / 2^l, W / 2^l)`.
    pub fn encode_background(&self, ctx: &mut Ctx<T>, bg: Var) -> Result<Vec<Var>> {
        let shape = ctx.graph.value(bg).shape().to_vec();
        let n = self.config.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != n || shape[3] != n {
            return Err(Error::Shape(format!("background batch {shape:?} is not (N, 1, {n}, {n})")));
        }
        let mut out = Vec::with_capacity(self.layout.encoder.len());
        let mut h = bg;
        for (conv, bn) in &self.layout.encoder {
            h = ctx.conv_bn_act(conv, bn, h)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Gates decoded features `prev` against background features `bg` of
    /// level `level` and restyles the object part with the style base.
    pub fn fusion_block(&self, ctx: &mut Ctx<T>, level: usize, prev: Var, bg: Var, style: Var, gate: GateOverride) -> Result<FusionOut> {
        let block = self
            .layout
            .fusion
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("no fusion block at level {level}")))?;
        let c = block.channels;
        if ctx.graph.value(prev).shape() != ctx.graph.value(bg).shape() {
            return Err(Error::Shape(format!(
                "fusion level {level}: decoded {:?} vs background {:?}",
                ctx.graph.value(prev).shape(),
                ctx.graph.value(bg).shape()
            )));
        }
        let h = ctx.conv_bn_act(&block.conv1, &block.bn1, prev)?;
        let h = ctx.conv(&block.conv2, h)?;
        let h = ctx.bn(&block.bn2, h)?;
        let logits = ctx.graph.narrow(h, 0, c)?;
        let object = ctx.graph.narrow(h, c, c)?;
        let plus = match gate {
            GateOverride::Learned => ctx.graph.sigmoid(logits),
            GateOverride::Closed => ctx.graph.constant(Tensor::zeros(ctx.graph.value(logits).shape())),
            GateOverride::Open => ctx.graph.constant(Tensor::ones(ctx.graph.value(logits).shape())),
        };
        let minus = ctx.graph.one_minus(plus);
        let gated = ctx.graph.mul(object, plus)?;
        let st = ctx.linear(&block.style, style)?;
        let scale = ctx.graph.narrow(st, 0, c)?;
        let shift = ctx.graph.narrow(st, c, c)?;
        let styled = adain(ctx.graph, gated, scale, shift, self.config.adain_eps)?;
        let kept = ctx.graph.mul(bg, minus)?;
        let out = ctx.graph.add(styled, kept)?;
        Ok(FusionOut { out, plus, minus })
    }

    /// Full pass: `bg (N,1,W,W)`, `gene (N,D)`, `noise (N,C_n)`.
    pub fn forward(&self, ctx: &mut Ctx<T>, bg: Var, gene: Var, noise: Var, gate: GateOverride) -> Result<GenForward> {
        let cfg = &self.config;
        let nb = ctx.graph.value(bg).shape()[0];
        if ctx.graph.value(noise).shape() != [nb, cfg.noise_dim] {
            return Err(Error::Shape(format!(
                "noise batch {:?} is not ({nb}, {})",
                ctx.graph.value(noise).shape(),
                cfg.noise_dim
            )));
        }
        if ctx.graph.value(gene).shape().first() != Some(&nb) {
            return Err(Error::Shape("gene and background batch sizes differ".into()));
        }
        let code = self.map_gene(ctx, gene)?;
        let style = ctx.graph.concat(&[code, noise])?;
        let pyramid = self.encode_background(ctx, bg)?;
        let l = cfg.levels();
        let side = cfg.level_size(l);
        let seed = ctx.linear(&self.layout.seed, style)?;
        let mut prev = ctx.graph.reshape(seed, &[nb, cfg.channels[l - 1], side, side])?;
        let mut finest_minus = None;
        for level in (1..=l).rev() {
            let f = self.fusion_block(ctx, level, prev, pyramid[level - 1], style, gate)?;
            let up = ctx.graph.upsample2x(f.out)?;
            prev = if level > 1 {
                let (conv, bn) = &self.layout.up[level - 2];
                ctx.conv_bn_act(conv, bn, up)?
            } else {
                finest_minus = Some(f.minus);
                ctx.conv_bn_act(&self.layout.final_up.0, &self.layout.final_up.1, up)?
            };
        }
        let img = ctx.conv(&self.layout.image_head, prev)?;
        let image = ctx.graph.tanh(img);
        let m = ctx.conv(&self.layout.mask_head, prev)?;
        let mask = ctx.graph.sigmoid(m);
        Ok(GenForward { code, style, image, mask, finest_minus: finest_minus.expect("at least one level") })
    }

    /// Channel mean of a `(N, C, h, w)` gate, nearest-upsampled to the image grid.
    pub fn weight_map(&self, minus: &Tensor<T>) -> Result<Vec<Vec<f32>>> {
        let (n, c, h, w) = minus.dims4()?;
        let side = self.config.image_size;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut mean = vec![0f32; h * w];
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                for (m, &v) in mean.iter_mut().zip(&minus.data()[base..base + h * w]) {
                    *m += v.as_f64() as f32 / c as f32;
                }
            }
            out.push(crate::data::image::resample_nearest(&mean, h, w, side, side));
        }
        Ok(out)
    }

    /// Inference with frozen batch-norm statistics.
    pub fn synthesize_batch(&self, backgrounds: &[&ImagePatch], genes: &[&[f64]], noise: &Tensor<T>) -> Result<Vec<SynthesisOutput>> {
        let cfg = &self.config;
        let n = backgrounds.len();
        if n == 0 || genes.len() != n {
            return Err(Error::Shape(format!("{n} backgrounds for {} gene vectors", genes.len())));
        }
        let side = cfg.image_size;
        let mut bg = Vec::with_capacity(n * side * side);
        for b in backgrounds {
            if b.rows() != side || b.cols() != side {
                return Err(Error::Shape(format!("background is {}x{}, model expects {side}x{side}", b.rows(), b.cols())));
            }
            bg.extend(b.pixels().iter().map(|&v| T::lit(v as f64)));
        }
        let mut gv = Vec::with_capacity(n * cfg.gene_dim);
        for g in genes {
            if g.len() != cfg.gene_dim {
                return Err(Error::Dimension { expected: cfg.gene_dim, got: g.len() });
            }
            gv.extend(g.iter().map(|&v| T::lit(v)));
        }
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, false);
        let bg_v = graph.constant(Tensor::new(&[n, 1, side, side], bg)?);
        let gene_v = graph.constant(Tensor::new(&[n, cfg.gene_dim], gv)?);
        let noise_v = graph.constant(noise.clone());
        let mut ctx = self.ctx(&mut graph, &bound, BnMode::Frozen);
        let fwd = self.forward(&mut ctx, bg_v, gene_v, noise_v, GateOverride::Learned)?;
        let wm = self.weight_map(graph.value(fwd.finest_minus))?;
        let img = graph.value(fwd.image).data();
        let msk = graph.value(fwd.mask).data();
        let spacing = backgrounds[0].spacing_mm;
        let px = side * side;
        let mut out = Vec::with_capacity(n);
        for (i, weight_map) in wm.into_iter().enumerate() {
            let pixels: Vec<f32> = img[i * px..(i + 1) * px].iter().map(|v| v.as_f64() as f32).collect();
            if pixels.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { term: "generator image".into() });
            }
            let soft: Vec<f32> = msk[i * px..(i + 1) * px].iter().map(|v| v.as_f64() as f32).collect();
            out.push(SynthesisOutput {
                image: ImagePatch::from_clamped(side, side, pixels, spacing)?,
                mask: SegMask::from_soft(side, side, &soft, cfg.mask_threshold as f32)?,
                soft_mask: soft,
                weight_map,
            });
        }
        Ok(out)
    }

    pub fn synthesize(&self, bg: &ImagePatch, gene: &[f64], noise: &[f64]) -> Result<SynthesisOutput> {
        if noise.len() != self.config.noise_dim {
            return Err(Error::Dimension { expected: self.config.noise_dim, got: noise.len() });
        }
        let nz = Tensor::new(&[1, noise.len()], noise.iter().map(|&v| T::lit(v)).collect())?;
        Ok(self.synthesize_batch(&[bg], &[gene], &nz)?.remove(0))
    }

    /// Gene codes with frozen statistics (the mapping network has no batch norm).
    pub fn embed(&self, genes: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.gene_dim;
        let mut flat = Vec::with_capacity(genes.len() * d);
        for g in genes {
            if g.len() != d {
                return Err(Error::Dimension { expected: d, got: g.len() });
            }
            flat.extend(g.iter().map(|&v| T::lit(v)));
        }
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, false);
        let gv = graph.constant(Tensor::new(&[genes.len(), d], flat)?);
        let mut ctx = self.ctx(&mut graph, &bound, BnMode::Frozen);
        let code = self.map_gene(&mut ctx, gv)?;
        let cd = self.config.code_dim;
        Ok(graph.value(code).data().chunks(cd).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }
}
