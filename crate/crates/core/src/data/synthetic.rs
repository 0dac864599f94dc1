//! Procedural corpus with planted gene-to-image factors.
//!
//! Each subject draws latent factors `f` in `[0, 1]^k`. Its gene vector is a
//! fixed random linear embedding of `f` plus Gaussian noise. Its images are
//! crops of a procedural lung slice with an elliptical nodule painted in:
//! factor 0 sets the nodule radius, factor 1 its mean intensity, factor 2 the
//! edge blur. Further factors only reach the genes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::background::{sample_background_centers, BackgroundPatch};
use super::image::{ImagePatch, SegMask};
use super::manifest::{Corpus, DatasetManifest, Provenance, SampleEntry, SubjectEntry, TrainingSample};
use super::volume::Mask3;
use crate::error::{Error, Result};
use crate::genomics::{fit_normalizer, normalize_table, GeneTable, NormalizationScheme};
use crate::rng::{domain, stream};

/// Physical width of every patch.
pub const PATCH_MM: f64 = 60.0;
/// Lung slice width as a multiple of the patch width.
const FIELD_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub n_subjects: usize,
    pub gene_dim: usize,
    pub n_factors: usize,
    pub image_size: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub slices_per_subject: usize,
    pub backgrounds_per_subject: usize,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            n_subjects: 24,
            gene_dim: 64,
            n_factors: 3,
            image_size: 64,
            noise_level: 0.1,
            seed: 0,
            slices_per_subject: 3,
            backgrounds_per_subject: 4,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("n_subjects must be positive".into()));
        }
        if self.n_factors == 0 || self.n_factors > self.gene_dim {
            return Err(Error::Config(format!(
                "n_factors must be in 1..={} (gene_dim), got {}",
                self.gene_dim, self.n_factors
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!("image_size must be >= 32, got {}", self.image_size)));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::Config("noise_level must be finite and >= 0".into()));
        }
        if self.slices_per_subject == 0 {
            return Err(Error::Config("slices_per_subject must be positive".into()));
        }
        Ok(())
    }

    pub fn spacing_mm(&self) -> f64 {
        PATCH_MM / self.image_size as f64
    }
}

/// Nodule appearance derived from planted factors, in pixels of a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoduleLook {
    pub radius_px: f64,
    pub intensity: f64,
    pub blur_px: f64,
}

impl NoduleLook {
    /// Monotone maps from `f0, f1, f2` (missing factors default to 0.5).
    pub fn from_factors(factors: &[f64], image_size: usize) -> Self {
        let f = |k: usize| factors.get(k).copied().unwrap_or(0.5).clamp(0.0, 1.0);
        let scale = image_size as f64 / 64.0;
        Self {
            radius_px: (3.0 + 9.0 * f(0)) * scale,
            intensity: -0.35 + 0.8 * f(1),
            blur_px: (0.4 + 2.6 * f(2)) * scale,
        }
    }
}

/// Procedural axial lung slice: intensities in `[-1, 1]` and the lung mask.
pub struct LungField {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub lung: Vec<u8>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn in_ellipse(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
}

pub fn render_lung_field(size: usize, rng: &mut ChaCha8Rng) -> LungField {
    let s = size as f64;
    let c = s / 2.0;
    let body = (0.36 * s, 0.47 * s);
    let lungs = [
        (c + normal(rng) * 0.01 * s, c - 0.2 * s, 0.25 * s, 0.15 * s),
        (c + normal(rng) * 0.01 * s, c + 0.2 * s, 0.25 * s, 0.15 * s),
    ];
    let mut pixels = vec![0f32; size * size];
    let mut lung = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f64, x as f64);
            let i = y * size + x;
            if lungs.iter().any(|&(cy, cx, ry, rx)| in_ellipse(yf, xf, cy, cx, ry, rx)) {
                lung[i] = 1;
                pixels[i] = -0.78;
            } else if in_ellipse(yf, xf, c, c, body.0, body.1) {
                pixels[i] = 0.45;
            } else {
                pixels[i] = -1.0;
            }
        }
    }
    // slow parenchymal density variation
    let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| (rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(0.05..0.12) * s, normal(rng) * 0.04))
        .collect();
    // vessels: gaussian-profile line segments
    let vessels: Vec<[f64; 6]> = (0..(size / 6))
        .map(|_| {
            let y0 = rng.gen_range(0.0..s);
            let x0 = rng.gen_range(0.0..s);
            let len = rng.gen_range(0.03..0.12) * s;
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let width = rng.gen_range(0.5..1.6) * s / 256.0 * 1.2;
            let amp = rng.gen_range(0.25..0.7);
            [y0, x0, y0 + len * th.sin(), x0 + len * th.cos(), width, amp]
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            if lung[i] == 0 {
                continue;
            }
            let (yf, xf) = (y as f64, x as f64);
            let mut v = pixels[i] as f64;
            for &(by, bx, bs, ba) in &bumps {
                v += ba * (-((yf - by).powi(2) + (xf - bx).powi(2)) / (2.0 * bs * bs)).exp();
            }
            for &[y0, x0, y1, x1, w, a] in &vessels {
                let (dy, dx) = (y1 - y0, x1 - x0);
                let l2 = dy * dy + dx * dx;
                let t = (((yf - y0) * dy + (xf - x0) * dx) / l2).clamp(0.0, 1.0);
                let d2 = (yf - y0 - t * dy).powi(2) + (xf - x0 - t * dx).powi(2);
                if d2 < 16.0 * w * w {
                    v += a * (-d2 / (2.0 * w * w)).exp();
                }
            }
            pixels[i] = v as f32;
        }
    }
    // soften tissue edges with one 3x3 box pass, then add acquisition noise
    let src = pixels.clone();
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    acc += src[(y + dy - 1) * size + x + dx - 1];
                }
            }
            pixels[y * size + x] = acc / 9.0;
        }
    }
    for p in &mut pixels {
        *p = (*p as f64 + 0.015 * normal(rng)).clamp(-1.0, 1.0) as f32;
    }
    LungField { size, pixels, lung }
}

/// Crops a square patch centered at `(cy, cx)`, shifted to stay inside the field.
fn crop(field: &LungField, cy: usize, cx: usize, n: usize) -> Vec<f32> {
    let s = field.size;
    let y0 = (cy as i64 - n as i64 / 2).clamp(0, (s - n) as i64) as usize;
    let x0 = (cx as i64 - n as i64 / 2).clamp(0, (s - n) as i64) as usize;
    let mut out = Vec::with_capacity(n * n);
    for y in y0..y0 + n {
        out.extend_from_slice(&field.pixels[y * s + x0..y * s + x0 + n]);
    }
    out
}

/// Paints an elliptical nodule onto `pixels` (an `n x n` patch) and returns its support mask.
pub fn paint_nodule(pixels: &mut [f32], n: usize, look: &NoduleLook, slice_scale: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let aspect: f64 = rng.gen_range(0.8..1.25);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let jitter = n as f64 / 32.0;
    let cy = n as f64 / 2.0 + rng.gen_range(-jitter..jitter);
    let cx = n as f64 / 2.0 + rng.gen_range(-jitter..jitter);
    let r = look.radius_px * slice_scale;
    let (a, b) = (r * aspect, r / aspect);
    let (sn, cs) = theta.sin_cos();
    let mut mask = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let u = dx * cs + dy * sn;
            let v = -dx * sn + dy * cs;
            let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            let i = y * n + x;
            if rho <= 1.0 {
                mask[i] = 1;
            }
            let sd = (rho - 1.0) * r;
            let alpha = 1.0 / (1.0 + (sd / look.blur_px).exp());
            if alpha < 1e-4 {
                continue;
            }
            let tex = look.intensity + 0.03 * normal(rng);
            let bg = pixels[i] as f64;
            pixels[i] = (bg * (1.0 - alpha) + tex * alpha).clamp(-1.0, 1.0) as f32;
        }
    }
    mask
}

/// Renders one subject: nodule slices then pure background patches.
fn render_subject(
    cfg: &SyntheticCorpusConfig,
    factors: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(ImagePatch, SegMask)>, Vec<BackgroundPatch>)> {
    let n = cfg.image_size;
    let field = render_lung_field(n * FIELD_FACTOR, rng);
    let spacing = cfg.spacing_mm();
    let lung = Mask3::new([1, field.size, field.size], [spacing; 3], field.lung.clone())?;
    let total = cfg.slices_per_subject + cfg.backgrounds_per_subject;
    let centers = sample_background_centers(&lung, None, 5.0, 25.0, total, rng)?;
    let look = NoduleLook::from_factors(factors, n);
    let mut slices = Vec::with_capacity(cfg.slices_per_subject);
    let mut backgrounds = Vec::with_capacity(cfg.backgrounds_per_subject);
    for (k, c) in centers.iter().enumerate() {
        let mut px = crop(&field, c.index[1], c.index[2], n);
        if k < cfg.slices_per_subject {
            // successive slices cut the nodule further from its equator
            let scale = 1.0 - 0.25 * k as f64 / cfg.slices_per_subject as f64;
            let mask = paint_nodule(&mut px, n, &look, scale, rng);
            slices.push((ImagePatch::new(n, n, px, (spacing, spacing))?, SegMask::new(n, n, mask)?));
        } else {
            backgrounds.push(BackgroundPatch {
                image: ImagePatch::new(n, n, px, (spacing, spacing))?,
                center_distance_mm: c.distance_mm,
            });
        }
    }
    Ok((slices, backgrounds))
}

/// Builds the full in-memory corpus; bit-identical for identical configs.
pub fn generate_synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut erng = stream(cfg.seed, domain::GENE_EMBEDDING, 0);
    let embedding: Vec<f64> = (0..cfg.gene_dim * cfg.n_factors).map(|_| normal(&mut erng)).collect();

    let mut subject_ids = Vec::with_capacity(cfg.n_subjects);
    let mut raw = Vec::with_capacity(cfg.n_subjects * cfg.gene_dim);
    let mut subject_factors = Vec::with_capacity(cfg.n_subjects);
    let mut samples = Vec::new();
    let mut entries = Vec::new();
    let mut planted = Vec::new();
    let mut backgrounds = Vec::new();
    for s in 0..cfg.n_subjects {
        let id = format!("S{s:03}");
        let mut rng = stream(cfg.seed, domain::SUBJECT, s as u64);
        let f: Vec<f64> = (0..cfg.n_factors).map(|_| rng.gen_range(0.0..1.0)).collect();
        for g in 0..cfg.gene_dim {
            let signal: f64 = (0..cfg.n_factors).map(|k| embedding[g * cfg.n_factors + k] * f[k]).sum();
            let noise = if cfg.noise_level > 0.0 { cfg.noise_level * normal(&mut rng) } else { 0.0 };
            raw.push(Some(signal + noise));
        }
        let (slices, bgs) = render_subject(cfg, &f, &mut rng)?;
        for (k, (image, mask)) in slices.into_iter().enumerate() {
            entries.push(SampleEntry {
                subject_id: id.clone(),
                slice_index: k,
                image: format!("subjects/{id}/slice_{k:03}_image.npy"),
                mask: format!("subjects/{id}/slice_{k:03}_mask.npy"),
            });
            samples.push(TrainingSample { image, mask, subject: s });
            planted.push(f.clone());
        }
        backgrounds.extend(bgs);
        subject_ids.push(id);
        subject_factors.push(f);
    }
    let gene_names = (0..cfg.gene_dim).map(|g| format!("G{g:04}")).collect();
    let table = GeneTable::new(subject_ids.clone(), gene_names, raw)?;
    let norm = fit_normalizer(&table, NormalizationScheme::Zscore)?;
    let genes = normalize_table(&table, &norm)?;
    let manifest = DatasetManifest {
        version: DatasetManifest::VERSION,
        provenance: Provenance::Synthetic,
        seed: cfg.seed,
        image_size: cfg.image_size,
        pixel_spacing_mm: cfg.spacing_mm(),
        gene_dim: cfg.gene_dim,
        subjects: subject_ids.iter().enumerate().map(|(row, id)| SubjectEntry { id: id.clone(), gene_row: row }).collect(),
        samples: entries,
        backgrounds: (0..backgrounds.len()).map(|k| super::manifest::BackgroundEntry::indexed(k, &backgrounds[k])).collect(),
        planted_factors: Some(planted),
        normalization: Some(norm),
        synthetic: Some(cfg.clone()),
        report: None,
    };
    Corpus::assemble(manifest, genes, Some(table), samples, backgrounds)
}

/// Nodule-free patches from subjects never seen in training (separate stream domain).
pub fn holdout_backgrounds(cfg: &SyntheticCorpusConfig, n: usize) -> Result<Vec<BackgroundPatch>> {
    cfg.validate()?;
    let per_field = cfg.backgrounds_per_subject.max(1);
    let mut out = Vec::with_capacity(n);
    let mut field_idx = 0u64;
    while out.len() < n {
        let mut rng = stream(cfg.seed, domain::HOLDOUT, field_idx);
        let field = render_lung_field(cfg.image_size * FIELD_FACTOR, &mut rng);
        let spacing = cfg.spacing_mm();
        let lung = Mask3::new([1, field.size, field.size], [spacing; 3], field.lung.clone())?;
        let take = per_field.min(n - out.len());
        for c in sample_background_centers(&lung, None, 5.0, 25.0, take, &mut rng)? {
            let px = crop(&field, c.index[1], c.index[2], cfg.image_size);
            out.push(BackgroundPatch {
                image: ImagePatch::new(cfg.image_size, cfg.image_size, px, (spacing, spacing))?,
                center_distance_mm: c.distance_mm,
            });
        }
        field_idx += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticCorpusConfig {
        SyntheticCorpusConfig { n_subjects: 4, gene_dim: 8, n_factors: 3, image_size: 32, seed: 5, ..Default::default() }
    }

    #[test]
    fn validation() {
        assert!(SyntheticCorpusConfig { n_factors: 9, ..small() }.validate().is_err());
        assert!(SyntheticCorpusConfig { image_size: 16, ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn radius_factor_controls_area() {
        let mut lo_rng = stream(1, 99, 0);
        let mut hi_rng = stream(1, 99, 0);
        let n = 64;
        let mut px = vec![-0.8f32; n * n];
        let lo = paint_nodule(&mut px.clone(), n, &NoduleLook::from_factors(&[0.0, 0.5, 0.5], n), 1.0, &mut lo_rng);
        let hi = paint_nodule(&mut px, n, &NoduleLook::from_factors(&[1.0, 0.5, 0.5], n), 1.0, &mut hi_rng);
        let area = |m: &[u8]| m.iter().map(|&v| v as usize).sum::<usize>();
        assert!(area(&hi) > area(&lo), "{} vs {}", area(&hi), area(&lo));
        assert!(area(&lo) > 0);
    }

    #[test]
    fn corpus_shapes_and_invariants() {
        let c = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(c.samples.len(), 12);
        assert_eq!(c.backgrounds.len(), 16);
        assert_eq!(c.genes.len(), 4);
        assert_eq!(c.manifest.planted_factors.as_ref().unwrap().len(), c.samples.len());
        for s in &c.samples {
            assert!(s.mask.area() > 0);
            assert!(s.mask.same_grid(&s.image));
        }
        for b in &c.backgrounds {
            assert!((5.0..=25.0).contains(&b.center_distance_mm));
        }
    }

    #[test]
    fn holdout_differs_from_training_backgrounds() {
        let cfg = small();
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let h = holdout_backgrounds(&cfg, 6).unwrap();
        assert_eq!(h.len(), 6);
        assert!(h.iter().all(|b| c.backgrounds.iter().all(|t| t.image != b.image)));
    }
}
