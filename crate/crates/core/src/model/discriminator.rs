//! Image, image+mask and image+mask+gene discriminators.
//!
//! `D_I` has its own convolutional trunk. `D_IS` and `D_ISG` share a trunk
//! over the image stacked with its mask; `D_ISG` broadcasts a gene code over
//! the trunk features and runs one more conv stage. The gene code comes from
//! a discriminator-owned mapping network. All scores are unbounded scalars per
//! input (global average pooling then a linear head).

use radiogan_tensor::{Bound, Graph, ParamSet, Real, Var};

use super::config::ModelConfig;
use super::layers::{cast_params, leaky_gain, BatchNorm, BnMode, Builder, Conv, Ctx, Linear};
use crate::error::{Error, Result};
use crate::rng::{domain, stream};

#[derive(Debug, Clone)]
struct Trunk {
    /// Stride-2 convs; the first has no batch norm.
    layers: Vec<(Conv, Option<BatchNorm>)>,
}

#[derive(Debug, Clone)]
struct Layout {
    image: Trunk,
    image_head: Linear,
    seg: Trunk,
    seg_head: Linear,
    map1: Linear,
    map2: Linear,
    gene_conv: Conv,
    gene_bn: BatchNorm,
    gene_head: Linear,
}

#[derive(Debug, Clone)]
pub struct Discriminators<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
    layout: Layout,
}

fn build_trunk<T: Real, R: rand::Rng>(b: &mut Builder<T, R>, name: &str, cin: usize, channels: &[usize], gain: f64) -> Result<Trunk> {
    let mut layers = Vec::with_capacity(channels.len());
    let mut c = cin;
    for (i, &co) in channels.iter().enumerate() {
        let lname = format!("{name}.{}", i + 1);
        let conv = b.conv(&lname, c, co, 3, 2, gain)?;
        let bn = if i == 0 { None } else { Some(b.batch_norm(&format!("{lname}.bn"), co)?) };
        layers.push((conv, bn));
        c = co;
    }
    Ok(Trunk { layers })
}

impl Discriminators<f32> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init(config, seed)
    }
}

impl<T: Real> Discriminators<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let mut rng = stream(seed, domain::INIT_DISCRIMINATOR, 0);
        let mut b = Builder { params: &mut params, buffers: &mut buffers, rng: &mut rng };
        let gain = leaky_gain(config.leaky_slope);
        let dc = &config.disc_channels;
        let top = *dc.last().expect("validated non-empty");
        let image = build_trunk(&mut b, "d_i.trunk", 1, dc, gain)?;
        let image_head = b.linear("d_i.head", top, 1, 1.0)?;
        let seg = build_trunk(&mut b, "d_is.trunk", 2, dc, gain)?;
        let seg_head = b.linear("d_is.head", top, 1, 1.0)?;
        let map1 = b.linear("d_isg.mapping.fc1", config.gene_dim, config.mapping_hidden, gain)?;
        let map2 = b.linear("d_isg.mapping.fc2", config.mapping_hidden, config.code_dim, 1.0)?;
        let gene_conv = b.conv("d_isg.fuse", top + config.code_dim, top, 3, 1, gain)?;
        let gene_bn = b.batch_norm("d_isg.fuse.bn", top)?;
        let gene_head = b.linear("d_isg.head", top, 1, 1.0)?;
        let layout = Layout { image, image_head, seg, seg_head, map1, map2, gene_conv, gene_bn, gene_head };
        Ok(Self { config, params, buffers, layout })
    }

    pub fn cast<U: Real>(&self) -> Discriminators<U> {
        Discriminators {
            config: self.config.clone(),
            params: cast_params(&self.params),
            buffers: cast_params(&self.buffers),
            layout: self.layout.clone(),
        }
    }

    pub fn ctx<'a>(&'a self, graph: &'a mut Graph<T>, bound: &'a Bound, mode: BnMode) -> Ctx<'a, T> {
        Ctx::new(graph, bound, &self.buffers, mode, self.config.leaky_slope, self.config.bn_eps)
    }

    fn run_trunk(&self, ctx: &mut Ctx<T>, trunk: &Trunk, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in &trunk.layers {
            h = ctx.conv(conv, h)?;
            if let Some(bn) = bn {
                h = ctx.bn(bn, h)?;
            }
            h = ctx.lrelu(h);
        }
        Ok(h)
    }

    fn check_image(&self, ctx: &Ctx<T>, x: Var, channels: usize) -> Result<()> {
        let s = ctx.graph.value(x).shape();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != channels || s[2] != n || s[3] != n {
            return Err(Error::Shape(format!("discriminator input {s:?} is not (N, {channels}, {n}, {n})")));
        }
        Ok(())
    }

    /// `D_I`: `(N,1,W,W) -> (N,1)`.
    pub fn score_i(&self, ctx: &mut Ctx<T>, image: Var) -> Result<Var> {
        self.check_image(ctx, image, 1)?;
        let h = self.run_trunk(ctx, &self.layout.image, image)?;
        let p = ctx.graph.global_avg_pool(h)?;
        ctx.linear(&self.layout.image_head, p)
    }

    /// Shared image+mask trunk features.
    pub fn seg_features(&self, ctx: &mut Ctx<T>, image: Var, mask: Var) -> Result<Var> {
        self.check_image(ctx, image, 1)?;
        self.check_image(ctx, mask, 1)?;
        let x = ctx.graph.concat(&[image, mask])?;
        self.run_trunk(ctx, &self.layout.seg, x)
    }

    /// `D_IS` head on trunk features.
    pub fn score_is(&self, ctx: &mut Ctx<T>, features: Var) -> Result<Var> {
        let p = ctx.graph.global_avg_pool(features)?;
        ctx.linear(&self.layout.seg_head, p)
    }

    /// Discriminator-side gene code.
    pub fn map_gene(&self, ctx: &mut Ctx<T>, gene: Var) -> Result<Var> {
        let w = ctx.graph.value(gene).shape().get(1).copied();
        if w != Some(self.config.gene_dim) {
            return Err(Error::Dimension { expected: self.config.gene_dim, got: w.unwrap_or(0) });
        }
        let h = ctx.linear(&self.layout.map1, gene)?;
        let h = ctx.lrelu(h);
        ctx.linear(&self.layout.map2, h)
    }

    /// `D_ISG` head on trunk features and a gene code `(N, C_g)`.
    pub fn score_isg(&self, ctx: &mut Ctx<T>, features: Var, code: Var) -> Result<Var> {
        let (n, _, h, w) = ctx.graph.value(features).dims4()?;
        if ctx.graph.value(code).shape() != [n, self.config.code_dim] {
            return Err(Error::Shape(format!(
                "gene code {:?} does not match {n} trunk feature maps",
                ctx.graph.value(code).shape()
            )));
        }
        let tiled = ctx.graph.broadcast_spatial(code, h, w)?;
        let x = ctx.graph.concat(&[features, tiled])?;
        let x = ctx.conv_bn_act(&self.layout.gene_conv, &self.layout.gene_bn, x)?;
        let p = ctx.graph.global_avg_pool(x)?;
        ctx.linear(&self.layout.gene_head, p)
    }

    /// Parameter-name prefixes of the three score heads.
    pub const HEADS: [&'static str; 3] = ["d_i.head", "d_is.head", "d_isg.head"];
}

#[cfg(test)]
mod tests {
    use super::*;
    use radiogan_tensor::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig {
            gene_dim: 5,
            code_dim: 6,
            mapping_hidden: 7,
            image_size: 8,
            channels: vec![2, 4],
            disc_channels: vec![3, 4],
            ..ModelConfig::default()
        }
    }

    fn scores(d: &Discriminators<f64>, gene_rows: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let bound = d.params.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn(&[3, 1, 8, 8], |i| ((i as f64) * 0.21).sin()));
        let m = g.constant(Tensor::from_fn(&[3, 1, 8, 8], |i| ((i * 7) % 5 == 0) as u8 as f64));
        let base = Tensor::from_fn(&[3, 5], |i| ((i as f64) * 0.9).cos() * 2.0);
        let genes = g.constant(base.select_batch(gene_rows).unwrap());
        let mut ctx = d.ctx(&mut g, &bound, BnMode::Frozen);
        let si = d.score_i(&mut ctx, x).unwrap();
        let f = d.seg_features(&mut ctx, x, m).unwrap();
        let sis = d.score_is(&mut ctx, f).unwrap();
        let code = d.map_gene(&mut ctx, genes).unwrap();
        let sisg = d.score_isg(&mut ctx, f, code).unwrap();
        let v = |x: Var| g.value(x).data().to_vec();
        (v(si), v(sis), v(sisg))
    }

    #[test]
    fn one_score_per_input() {
        let d = Discriminators::<f64>::init(tiny(), 0).unwrap();
        let (a, b, c) = scores(&d, &[0, 1, 2]);
        assert_eq!((a.len(), b.len(), c.len()), (3, 3, 3));
    }

    #[test]
    fn zero_heads_score_zero() {
        let mut d = Discriminators::<f64>::init(tiny(), 0).unwrap();
        let names: Vec<String> = d
            .params
            .iter()
            .map(|(_, n, _)| n.to_string())
            .filter(|n| Discriminators::<f64>::HEADS.iter().any(|h| n.starts_with(h)))
            .collect();
        assert_eq!(names.len(), 6);
        for n in names {
            let shape = d.params.by_name(&n).unwrap().shape().to_vec();
            d.params.assign(&n, Tensor::zeros(&shape)).unwrap();
        }
        let (a, b, c) = scores(&d, &[0, 1, 2]);
        assert!(a.iter().chain(&b).chain(&c).all(|&v| v == 0.0));
    }

    #[test]
    fn gene_permutation_changes_isg_only() {
        let d = Discriminators::<f64>::init(tiny(), 4).unwrap();
        let (a1, b1, c1) = scores(&d, &[0, 1, 2]);
        let (a2, b2, c2) = scores(&d, &[2, 0, 1]);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert!(c1.iter().zip(&c2).all(|(p, q)| p != q));
    }
}
