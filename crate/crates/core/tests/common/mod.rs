#![allow(dead_code)]

use radiogan::model::discriminator::Discriminators;
use radiogan::model::losses::{loss_d_i, loss_d_is, loss_d_isg, loss_g};
use radiogan::model::{BnMode, GateOverride, Generator, ModelConfig};
use radiogan::rng::stream;
use radiogan_tensor::check::{relative_error, GroupCheck};
use radiogan_tensor::{Graph, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

/// 8x8 two-level networks in f64.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        gene_dim: 3,
        code_dim: 4,
        noise_dim: 2,
        mapping_hidden: 4,
        image_size: 8,
        channels: vec![2, 4],
        head_channels: 2,
        disc_channels: vec![2, 4],
        ..ModelConfig::default()
    }
}

pub struct ToyBatch {
    pub bg: Tensor<f64>,
    pub real: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub wrong_mask: Tensor<f64>,
    pub gene: Tensor<f64>,
    pub wrong_gene: Tensor<f64>,
    pub noise: Tensor<f64>,
    pub region: Tensor<f64>,
}

pub fn toy_batch(seed: u64) -> ToyBatch {
    let mut rng = stream(seed, 99, 0);
    let mut normal = |shape: &[usize], s: f64| Tensor::from_fn(shape, |_| s * rng.sample::<f64, _>(StandardNormal));
    let n = 3;
    let img = [n, 1, 8, 8];
    let bg = normal(&img, 0.4);
    let real = normal(&img, 0.4);
    let gene = normal(&[n, 3], 1.0);
    let wrong_gene = normal(&[n, 3], 1.0);
    let noise = normal(&[n, 2], 1.0);
    let blob = |cy: f64, cx: f64| {
        Tensor::from_fn(&img, move |i| {
            let (y, x) = (((i / 8) % 8) as f64, (i % 8) as f64);
            f64::from((y - cy).powi(2) + (x - cx).powi(2) <= 4.0)
        })
    };
    let region = Tensor::from_fn(&img, |i| f64::from((i * 7) % 5 != 0));
    ToyBatch { bg, real, mask: blob(3.0, 4.0), wrong_mask: blob(5.0, 2.0), gene, wrong_gene, noise, region }
}

pub struct ToyEval {
    pub value: f64,
    pub generator_grads: Vec<Tensor<f64>>,
    pub discriminator_grads: Vec<Tensor<f64>>,
    /// Sign of every leaky-ReLU input.
    pub pattern: Vec<bool>,
}

/// Sum of every discriminator loss and the generator loss, with fakes kept
/// attached so one scalar depends on all parameters.
pub fn toy_objective(gen: &Generator<f64>, disc: &Discriminators<f64>, b: &ToyBatch) -> ToyEval {
    let mut g = Graph::new();
    let gb = gen.params.bind(&mut g, true);
    let db = disc.params.bind(&mut g, true);
    let c = |g: &mut Graph<f64>, t: &Tensor<f64>| g.constant(t.clone());
    let (bg, gene, noise) = (c(&mut g, &b.bg), c(&mut g, &b.gene), c(&mut g, &b.noise));
    let (real, mask, wm, wg) = (c(&mut g, &b.real), c(&mut g, &b.mask), c(&mut g, &b.wrong_mask), c(&mut g, &b.wrong_gene));
    let (fwd, mut pre) = {
        let mut ctx = gen.ctx(&mut g, &gb, BnMode::Batch);
        let fwd = gen.forward(&mut ctx, bg, gene, noise, GateOverride::Learned).unwrap();
        (fwd, ctx.preactivations)
    };
    let mut ctx = disc.ctx(&mut g, &db, BnMode::Batch);
    let s_real = disc.score_i(&mut ctx, real).unwrap();
    let s_fake = disc.score_i(&mut ctx, fwd.image).unwrap();
    let f_real = disc.seg_features(&mut ctx, real, mask).unwrap();
    let f_wrong = disc.seg_features(&mut ctx, real, wm).unwrap();
    let f_fake = disc.seg_features(&mut ctx, fwd.image, fwd.mask).unwrap();
    let is = [f_real, f_wrong, f_fake].map(|f| disc.score_is(&mut ctx, f).unwrap());
    let code = disc.map_gene(&mut ctx, gene).unwrap();
    let wcode = disc.map_gene(&mut ctx, wg).unwrap();
    let isg_m = disc.score_isg(&mut ctx, f_real, code).unwrap();
    let isg_wm = disc.score_isg(&mut ctx, f_wrong, code).unwrap();
    let isg_wg = disc.score_isg(&mut ctx, f_real, wcode).unwrap();
    let isg_f = disc.score_isg(&mut ctx, f_fake, code).unwrap();
    pre.append(&mut ctx.preactivations);
    drop(ctx);
    let pattern = pre.iter().flat_map(|&v| g.value(v).data().iter().map(|&x| x > 0.0).collect::<Vec<_>>()).collect();
    let l1 = loss_d_i(&mut g, s_real, s_fake).unwrap();
    let l2 = loss_d_is(&mut g, is[0], is[1], is[2]).unwrap();
    let l3 = loss_d_isg(&mut g, isg_m, isg_wm, isg_wg, isg_f).unwrap();
    let lg = loss_g(&mut g, s_fake, is[2], isg_f, fwd.image, bg, &b.region, 10.0).unwrap();
    let total = g.add_all(&[l1, l2, l3, lg.total]).unwrap();
    let value = g.value(total).data()[0];
    let mut grads = g.backward(total).unwrap();
    let generator_grads = gb.collect(&g, &mut grads);
    let discriminator_grads = db.collect(&g, &mut grads);
    ToyEval { value, generator_grads, discriminator_grads, pattern }
}

fn flatten(set: &ParamSet<f64>) -> Vec<f64> {
    set.iter().flat_map(|(_, _, t)| t.data().to_vec()).collect()
}

fn unflatten(set: &mut ParamSet<f64>, flat: &[f64]) {
    let mut off = 0;
    let ids: Vec<_> = set.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let t = set.get_mut(id);
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Flat coordinates of `name` in `set`, restricted to output rows `rows`
/// (first axis) when given.
fn coords(set: &ParamSet<f64>, name: &str, rows: Option<std::ops::Range<usize>>) -> Vec<usize> {
    let mut off = 0;
    for (_, n, t) in set.iter() {
        if n == name {
            let per_row = t.numel() / t.shape()[0];
            return match &rows {
                Some(r) => (r.start * per_row..r.end * per_row).map(|i| off + i).collect(),
                None => (0..t.numel()).map(|i| off + i).collect(),
            };
        }
        off += t.numel();
    }
    panic!("no parameter {name}");
}

pub struct GroupSpec {
    pub label: &'static str,
    pub discriminator: bool,
    pub tensors: Vec<(String, Option<std::ops::Range<usize>>)>,
}

pub fn groups(cfg: &ModelConfig) -> Vec<GroupSpec> {
    let whole = |names: &[&str]| names.iter().map(|n| (n.to_string(), None)).collect::<Vec<_>>();
    let mut gate = Vec::new();
    let mut object = Vec::new();
    let mut adain = Vec::new();
    for (i, &c) in cfg.channels.iter().enumerate() {
        let f = format!("fusion.{}", i + 1);
        gate.push((format!("{f}.conv2.weight"), Some(0..c)));
        gate.push((format!("{f}.bn2.gamma"), Some(0..c)));
        gate.push((format!("{f}.bn2.beta"), Some(0..c)));
        gate.push((format!("{f}.conv1.weight"), None));
        object.push((format!("{f}.conv2.weight"), Some(c..2 * c)));
        object.push((format!("{f}.bn2.gamma"), Some(c..2 * c)));
        object.push((format!("{f}.bn2.beta"), Some(c..2 * c)));
        adain.push((format!("{f}.style.weight"), None));
        adain.push((format!("{f}.style.bias"), None));
    }
    vec![
        GroupSpec { label: "mapping network", discriminator: false, tensors: whole(&["mapping.fc1.weight", "mapping.fc1.bias", "mapping.fc2.weight", "mapping.fc2.bias"]) },
        GroupSpec { label: "fusion gate path", discriminator: false, tensors: gate },
        GroupSpec { label: "fusion object path", discriminator: false, tensors: object },
        GroupSpec { label: "AdaIN affine", discriminator: false, tensors: adain },
        GroupSpec { label: "image head", discriminator: false, tensors: whole(&["head.image.weight", "head.image.bias"]) },
        GroupSpec { label: "mask head", discriminator: false, tensors: whole(&["head.mask.weight", "head.mask.bias"]) },
        GroupSpec { label: "D_I head", discriminator: true, tensors: whole(&["d_i.head.weight", "d_i.head.bias"]) },
        GroupSpec { label: "D_IS head", discriminator: true, tensors: whole(&["d_is.head.weight", "d_is.head.bias"]) },
        GroupSpec {
            label: "D_ISG head",
            discriminator: true,
            tensors: whole(&["d_isg.head.weight", "d_isg.head.bias", "d_isg.mapping.fc1.weight", "d_isg.fuse.weight"]),
        },
    ]
}

pub struct GroupResult {
    pub check: GroupCheck,
    /// Coordinates whose +-h evaluations flipped a leaky-ReLU input sign.
    pub skipped_kinks: usize,
}

/// Central differences at `h` against the tape, up to `per_group`
/// coordinates per group. A coordinate is skipped when the perturbation moves
/// any leaky-ReLU input across zero, since the difference quotient then
/// straddles a kink.
pub fn gradient_checks(seed: u64, h: f64, per_group: usize) -> Vec<GroupResult> {
    let cfg = toy_model();
    let gen = Generator::<f64>::init(cfg.clone(), seed).unwrap();
    let disc = Discriminators::<f64>::init(cfg.clone(), seed).unwrap();
    let batch = toy_batch(seed);
    let base = toy_objective(&gen, &disc, &batch);
    let g_analytic: Vec<f64> = base.generator_grads.iter().flat_map(|t| t.data().to_vec()).collect();
    let d_analytic: Vec<f64> = base.discriminator_grads.iter().flat_map(|t| t.data().to_vec()).collect();
    let mut rng = stream(seed, 98, 0);
    let mut out = Vec::new();
    for spec in groups(&cfg) {
        let set = if spec.discriminator { &disc.params } else { &gen.params };
        let analytic = if spec.discriminator { &d_analytic } else { &g_analytic };
        let mut idx: Vec<usize> = spec.tensors.iter().flat_map(|(n, r)| coords(set, n, r.clone())).collect();
        idx.shuffle(&mut rng);
        let x = flatten(set);
        let (mut g, mut d) = (gen.clone(), disc.clone());
        let mut eval = |v: &[f64]| {
            if spec.discriminator {
                unflatten(&mut d.params, v);
            } else {
                unflatten(&mut g.params, v);
            }
            toy_objective(&g, &d, &batch)
        };
        let mut check = GroupCheck {
            name: spec.label.to_string(),
            checked: 0,
            max_relative_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        let mut skipped_kinks = 0;
        for &i in &idx {
            if check.checked == per_group {
                break;
            }
            let mut xp = x.clone();
            xp[i] += h;
            let plus = eval(&xp);
            xp[i] = x[i] - h;
            let minus = eval(&xp);
            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * h);
            let err = relative_error(analytic[i], numeric, 1e-6);
            check.checked += 1;
            if err >= check.max_relative_error {
                check.max_relative_error = err;
                check.worst_index = i;
                check.worst_analytic = analytic[i];
                check.worst_numeric = numeric;
            }
        }
        out.push(GroupResult { check, skipped_kinks });
    }
    out
}
