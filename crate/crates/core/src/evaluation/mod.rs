//! Gene-code structure, factor recovery and background preservation.

pub mod cluster;
pub mod render;
pub mod stats;
pub mod tsne;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use radiogan_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{BackgroundPatch, Corpus, ImagePatch};
use crate::error::{Error, Result};
use crate::model::{erode_background, Generator};
use crate::rng::{domain, stream};

pub use cluster::{cluster_sweep, kmeans, silhouette, ClusterChoice};
pub use render::{render_grid, render_scatter, Tile};
pub use stats::{factor_recovery, max_abs_spearman, probe_r2, spearman, FactorRecovery};
pub use tsne::{project_2d, TsneConfig};

/// One gene code per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeMatrix {
    pub subject_ids: Vec<String>,
    pub codes: Vec<Vec<f64>>,
}

impl CodeMatrix {
    pub fn width(&self) -> usize {
        self.codes.first().map_or(0, Vec::len)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut header = vec!["subject_id".to_string()];
        header.extend((0..self.width()).map(|j| format!("code_{j}")));
        let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        w.write_record(&header).map_err(csv_err)?;
        for (id, row) in self.subject_ids.iter().zip(&self.codes) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mapping-network code of every subject's gene vector.
pub fn embed_genes(generator: &Generator<f32>, corpus: &Corpus) -> Result<CodeMatrix> {
    if generator.config.gene_dim != corpus.gene_dim() {
        return Err(Error::Dimension { expected: generator.config.gene_dim, got: corpus.gene_dim() });
    }
    let rows: Vec<&[f64]> = corpus.genes.iter().map(|g| g.values.as_slice()).collect();
    let codes = generator.embed(&rows)?;
    if codes.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { term: "gene code".into() });
    }
    Ok(CodeMatrix { subject_ids: corpus.genes.iter().map(|g| g.subject_id.clone()).collect(), codes })
}

/// Mean `|G_x - x|` over the background region left after eroding the
/// generated mask by `radius_px`.
pub fn background_preservation(generated: &ImagePatch, base: &ImagePatch, soft_mask: &[f32], radius_px: u32, threshold: f32) -> Result<f64> {
    let (r, c) = (base.rows(), base.cols());
    if generated.rows() != r || generated.cols() != c {
        return Err(Error::Shape(format!("generated {}x{} vs base {r}x{c}", generated.rows(), generated.cols())));
    }
    let region = erode_background(soft_mask, r, c, radius_px, threshold)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((g, x), keep) in generated.pixels().iter().zip(base.pixels()).zip(&region) {
        if *keep == 1 {
            sum += (*g as f64 - *x as f64).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Domain("eroded background region is empty".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub seed: u64,
    pub erosion_radius_px: u32,
    pub perplexity: f64,
    /// Backgrounds each gene code is synthesized on.
    pub backgrounds_per_code: usize,
    pub permutations: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { seed: 0, erosion_radius_px: 2, perplexity: 10.0, backgrounds_per_code: 4, permutations: 200 }
    }
}

/// Clustering of one representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub k: usize,
    pub silhouette: f64,
    /// Silhouette of the same labels on the 2-D projection.
    pub silhouette_2d: Option<f64>,
    pub sweep: Vec<(usize, f64)>,
    pub factor_recovery: Option<FactorRecovery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    pub mean: f64,
    pub max: f64,
    pub syntheses: usize,
    /// Syntheses whose eroded background was empty (excluded from the mean).
    pub empty_regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_subjects: usize,
    pub code_dim: usize,
    pub perplexity_used: Option<f64>,
    pub gene_code: StructureReport,
    pub raw_genes: StructureReport,
    pub background_preservation: PreservationReport,
    /// Fraction of syntheses with a nonempty thresholded mask.
    pub mask_nonempty_fraction: f64,
    /// Fraction of gene codes whose masks were nonempty on every background.
    pub codes_always_nonempty_fraction: f64,
    /// Per planted factor, Spearman between a subject's mean generated mask
    /// area and the factor.
    pub mask_area_factor_spearman: Option<Vec<f64>>,
}

/// Outputs kept for figures.
pub struct Evaluation {
    pub report: EvaluationReport,
    pub codes: CodeMatrix,
    pub projection: Option<Vec<[f64; 2]>>,
    pub labels: Vec<usize>,
    /// `(background index, subject, output)` for the first background of
    /// each subject.
    pub examples: Vec<(usize, usize, crate::model::SynthesisOutput)>,
}

fn structure(points: &[Vec<f64>], planted: Option<&[Vec<f64>]>, perplexity: Option<f64>, opts: &EvalOptions, stream_index: u64) -> Result<(StructureReport, Option<Vec<[f64; 2]>>, Vec<usize>)> {
    let mut rng = stream(opts.seed, domain::EVAL, stream_index);
    let choice = cluster_sweep(points, 2..=6, &mut rng)?;
    let projection = match perplexity {
        Some(p) => Some(project_2d(points, &TsneConfig { perplexity: p, ..Default::default() }, opts.seed)?),
        None => None,
    };
    let silhouette_2d = match &projection {
        Some(y) => Some(silhouette(&y.iter().map(|p| p.to_vec()).collect::<Vec<_>>(), &choice.labels)?),
        None => None,
    };
    let factor_recovery = match planted {
        Some(f) => Some(factor_recovery(points, f, opts.permutations, &mut rng)?),
        None => None,
    };
    let report = StructureReport { k: choice.k, silhouette: choice.silhouette, silhouette_2d, sweep: choice.sweep, factor_recovery };
    Ok((report, projection, choice.labels))
}

/// Full evaluation of a trained generator against a corpus and a set of
/// backgrounds to synthesize on.
pub fn evaluate(generator: &Generator<f32>, corpus: &Corpus, backgrounds: &[BackgroundPatch], opts: &EvalOptions) -> Result<Evaluation> {
    if backgrounds.is_empty() {
        return Err(Error::EmptyTable("no backgrounds to evaluate on".into()));
    }
    let codes = embed_genes(generator, corpus)?;
    let n = codes.codes.len();
    // largest usable perplexity is just under n / 3
    let perplexity = if (n as f64) > 3.0 * opts.perplexity {
        Some(opts.perplexity)
    } else if n >= 7 {
        let p = ((n - 1) / 3) as f64;
        log::warn!("{n} subjects are too few for perplexity {}; using {p}", opts.perplexity);
        Some(p)
    } else {
        log::warn!("{n} subjects are too few for a 2-D projection");
        None
    };
    let planted = corpus.planted_by_subject();
    let (gene_code, projection, labels) = structure(&codes.codes, planted.as_deref(), perplexity, opts, 10)?;
    let raw: Vec<Vec<f64>> = corpus.genes.iter().map(|g| g.values.clone()).collect();
    let (raw_genes, _, _) = structure(&raw, planted.as_deref(), None, opts, 11)?;

    let cfg = &generator.config;
    let per = opts.backgrounds_per_code.max(1);
    let mut pres = Vec::new();
    let mut empty_regions = 0;
    let mut nonempty = 0usize;
    let mut always = 0usize;
    let mut areas = Vec::with_capacity(n);
    let mut examples = Vec::new();
    for (s, gene) in corpus.genes.iter().enumerate() {
        let idx: Vec<usize> = (0..per).map(|r| (s * per + r) % backgrounds.len()).collect();
        let bgs: Vec<&ImagePatch> = idx.iter().map(|&i| &backgrounds[i].image).collect();
        let genes: Vec<&[f64]> = vec![gene.values.as_slice(); per];
        let mut rng = stream(opts.seed, domain::EVAL, 1000 + s as u64);
        let noise = Tensor::from_fn(&[per, cfg.noise_dim], |_| rng.sample::<f64, _>(StandardNormal) as f32);
        let outs = generator.synthesize_batch(&bgs, &genes, &noise)?;
        let mut all = true;
        let mut area = 0.0;
        for (out, bg) in outs.iter().zip(&bgs) {
            area += out.mask.area() as f64 / per as f64;
            if out.mask.area() > 0 {
                nonempty += 1;
            } else {
                all = false;
            }
            match background_preservation(&out.image, bg, &out.soft_mask, opts.erosion_radius_px, cfg.mask_threshold as f32) {
                Ok(v) => pres.push(v),
                Err(Error::Domain(_)) => empty_regions += 1,
                Err(e) => return Err(e),
            }
        }
        always += usize::from(all);
        areas.push(area);
        examples.push((idx[0], s, outs.into_iter().next().expect("per >= 1")));
    }
    if pres.is_empty() {
        return Err(Error::Domain("every synthesized mask covered the whole background".into()));
    }
    let mask_area_factor_spearman = match &planted {
        Some(p) => Some((0..p[0].len()).map(|f| spearman(&areas, &p.iter().map(|r| r[f]).collect::<Vec<_>>())).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let report = EvaluationReport {
        n_subjects: n,
        code_dim: codes.width(),
        perplexity_used: perplexity,
        gene_code,
        raw_genes,
        background_preservation: PreservationReport {
            mean: pres.iter().sum::<f64>() / pres.len() as f64,
            max: pres.iter().copied().fold(0.0, f64::max),
            syntheses: n * per,
            empty_regions,
        },
        mask_nonempty_fraction: nonempty as f64 / (n * per) as f64,
        codes_always_nonempty_fraction: always as f64 / n as f64,
        mask_area_factor_spearman,
    };
    Ok(Evaluation { report, codes, projection, labels, examples })
}

/// Writes `report.json`, `codes.csv`, `tsne.png` (when projected) and
/// `synthesis_grid.png` (background / image / mask / weight map rows).
pub fn write_evaluation(eval: &Evaluation, backgrounds: &[BackgroundPatch], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = dir.join("report.json");
    let text = serde_json::to_string_pretty(&eval.report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&report, text).map_err(|e| Error::io(&report, e))?;
    eval.codes.write_csv(&dir.join("codes.csv"))?;
    if let Some(p) = &eval.projection {
        render_scatter(p, Some(&eval.labels), 400, &dir.join("tsne.png"))?;
    }
    let shown: Vec<_> = eval.examples.iter().take(6).collect();
    if !shown.is_empty() {
        let side = backgrounds[0].image.rows();
        let mut rows = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for (bi, _, out) in &shown {
            rows[0].push(Tile::new(side, side, backgrounds[*bi].image.pixels().to_vec())?);
            rows[1].push(Tile::new(side, side, out.image.pixels().to_vec())?);
            rows[2].push(Tile::unit(side, side, &out.soft_mask)?);
            rows[3].push(Tile::unit(side, side, &out.weight_map)?);
        }
        render_grid(&rows, &dir.join("synthesis_grid.png"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(v: Vec<f32>) -> ImagePatch {
        ImagePatch::new(4, 4, v, (1.0, 1.0)).unwrap()
    }

    #[test]
    fn identical_images_preserve_exactly() {
        let x = patch((0..16).map(|i| (i as f32 / 16.0) - 0.5).collect());
        let mut m = vec![0.0; 16];
        m[5] = 1.0;
        assert_eq!(background_preservation(&x, &x, &m, 1, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset() {
        let x = patch(vec![0.1; 16]);
        let g = patch(vec![0.3; 16]);
        let v = background_preservation(&g, &x, &[0.0; 16], 2, 0.5).unwrap();
        assert!((v - 0.2).abs() < 1e-6);
    }

    #[test]
    fn hand_case_two_by_two_nodule() {
        let x = patch(vec![0.0; 16]);
        let g = patch((0..16).map(|i| i as f32 / 20.0).collect());
        let mut m = vec![0.0f32; 16];
        for i in [5, 6, 9, 10] {
            m[i] = 1.0;
        }
        let want: f64 = (0..16).filter(|i| ![5, 6, 9, 10].contains(i)).map(|i| (i as f32 / 20.0) as f64).sum::<f64>() / 12.0;
        assert!((background_preservation(&g, &x, &m, 0, 0.5).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn full_mask_is_error() {
        let x = patch(vec![0.0; 16]);
        assert!(background_preservation(&x, &x, &[1.0; 16], 0, 0.5).is_err());
    }
}
