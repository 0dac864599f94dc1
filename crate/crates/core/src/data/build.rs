//! Corpus construction from per-subject CT volumes.
//!
//! Expected layout under `image_root`, one directory per subject:
//!
//! ```text
//! <subject_id>/image.npy         (z, y, x) intensities in HU, any numeric dtype
//! <subject_id>/nodule_mask.npy   (z, y, x) u8
//! <subject_id>/lung_mask.npy     (z, y, x) u8
//! <subject_id>/spacing.json      {"spacing_mm": [z, y, x]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::background::{sample_background_centers, BackgroundPatch};
use super::image::{resample_bilinear, resample_nearest, ImagePatch, SegMask, Window};
use super::manifest::{
    BackgroundEntry, BuildReport, Corpus, DatasetManifest, Provenance, SampleEntry, SkippedSubject, SubjectEntry,
    TrainingSample,
};
use super::npy::{read_npy, read_npy_as_f32};
use super::volume::{extract_voi, place_voi, sample_nodule_slices, Grid3, Mask3, Volume};
use crate::error::{Error, Result};
use crate::genomics::{clean_genes, fit_normalizer, normalize_table, GeneTable, NormalizationScheme};
use crate::rng::{domain, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub voi_mm: f64,
    pub image_size: usize,
    pub bg_min_distance_mm: f64,
    pub bg_max_distance_mm: f64,
    pub backgrounds_per_subject: usize,
    pub window: Window,
    /// Shift VOIs that overhang the volume instead of failing.
    pub clamp_voi: bool,
    pub normalization: NormalizationScheme,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            voi_mm: 60.0,
            image_size: 64,
            bg_min_distance_mm: 5.0,
            bg_max_distance_mm: 25.0,
            backgrounds_per_subject: 20,
            window: Window::default(),
            clamp_voi: true,
            normalization: NormalizationScheme::default(),
            seed: 0,
        }
    }
}

#[derive(Deserialize)]
struct SpacingFile {
    spacing_mm: [f64; 3],
}

struct SubjectVolumes {
    image: Volume,
    nodule: Mask3,
    lung: Mask3,
}

fn load_grid<V: Copy>(path: &Path, data: Vec<V>, shape: Vec<usize>, spacing: [f64; 3]) -> Result<Grid3<V>> {
    let dims: [usize; 3] = shape
        .try_into()
        .map_err(|s: Vec<usize>| Error::Shape(format!("{}: expected 3 axes, got {s:?}", path.display())))?;
    Grid3::new(dims, spacing, data)
}

fn load_subject(dir: &Path) -> Result<SubjectVolumes> {
    let sp_path = dir.join("spacing.json");
    let text = fs::read_to_string(&sp_path).map_err(|e| Error::io(&sp_path, e))?;
    let spacing: SpacingFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", sp_path.display())))?;
    let ip = dir.join("image.npy");
    let (shape, data) = read_npy_as_f32(&ip)?;
    let image = load_grid(&ip, data, shape, spacing.spacing_mm)?;
    let mut masks = ["nodule_mask.npy", "lung_mask.npy"].into_iter().map(|name| {
        let p = dir.join(name);
        let (shape, data) = read_npy::<u8>(&p)?;
        let m = load_grid(&p, data, shape, spacing.spacing_mm)?;
        if !m.same_geometry(&image) {
            return Err(Error::Shape(format!("{} does not match image.npy", p.display())));
        }
        Ok(m)
    });
    let nodule = masks.next().unwrap()?;
    let lung = masks.next().unwrap()?;
    Ok(SubjectVolumes { image, nodule, lung })
}

fn centroid_mm(mask: &Mask3) -> Option<[f64; 3]> {
    let [_, ny, nx] = mask.dims;
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (i, &v) in mask.data.iter().enumerate() {
        if v > 0 {
            let idx = [i / (ny * nx), (i / nx) % ny, i % nx];
            for a in 0..3 {
                acc[a] += idx[a] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| [0, 1, 2].map(|a| (acc[a] / n as f64 + 0.5) * mask.spacing_mm[a]))
}

fn window_all(pixels: &mut [f32], window: &Window) {
    for v in pixels {
        *v = window.apply(*v as f64);
    }
}

/// Resamples one windowed axial slice onto the output grid.
fn to_patch(pixels: &[f32], rows: usize, cols: usize, cfg: &ProtocolConfig) -> Result<ImagePatch> {
    let n = cfg.image_size;
    let spacing = cfg.voi_mm / n as f64;
    ImagePatch::from_clamped(n, n, resample_bilinear(pixels, rows, cols, n, n), (spacing, spacing))
}

fn subject_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Pairs every nodule slice with its subject's normalized gene vector and
/// samples background patches away from the lung boundary.
pub fn build_dataset(image_root: &Path, gene_table: &GeneTable, cfg: &ProtocolConfig) -> Result<Corpus> {
    if cfg.image_size == 0 || !(cfg.voi_mm > 0.0) {
        return Err(Error::Config("image_size and voi_mm must be positive".into()));
    }
    let table = clean_genes(gene_table)?;
    let norm = fit_normalizer(&table, cfg.normalization)?;
    let genes_all = normalize_table(&table, &norm)?;
    let n = cfg.image_size;

    let mut report = BuildReport::default();
    let mut subjects = Vec::new();
    let mut genes = Vec::new();
    let mut samples = Vec::new();
    let mut entries = Vec::new();
    let mut backgrounds = Vec::new();
    for (sidx, (id, dir)) in subject_dirs(image_root)?.into_iter().enumerate() {
        let Some(row) = table.row_of(&id) else {
            log::warn!("subject {id} has images but no gene row; skipped");
            report.skipped.push(SkippedSubject { id, reason: "no gene row".into() });
            continue;
        };
        let vols = load_subject(&dir)?;
        let Some(center) = centroid_mm(&vols.nodule) else {
            log::warn!("subject {id} has an empty nodule mask; skipped");
            report.skipped.push(SkippedSubject { id, reason: "empty nodule mask".into() });
            continue;
        };
        let mut voi = extract_voi(&vols.image, center, cfg.voi_mm, cfg.clamp_voi)?;
        window_all(&mut voi.data, &cfg.window);
        let voi_mask = extract_voi(&vols.nodule, center, cfg.voi_mm, cfg.clamp_voi)?;
        let subject = subjects.len();
        let mut kept = 0usize;
        for (z, img, m) in sample_nodule_slices(&voi, &voi_mask)? {
            let image = to_patch(img.pixels(), img.rows(), img.cols(), cfg)?;
            let mask = SegMask::new(n, n, resample_nearest(m.pixels(), m.rows(), m.cols(), n, n))?;
            if mask.area() == 0 {
                report.empty_slices_dropped += 1;
                continue;
            }
            entries.push(SampleEntry {
                subject_id: id.clone(),
                slice_index: z,
                image: format!("subjects/{id}/slice_{z:03}_image.npy"),
                mask: format!("subjects/{id}/slice_{z:03}_mask.npy"),
            });
            samples.push(TrainingSample { image, mask, subject });
            kept += 1;
        }
        if kept == 0 {
            report.skipped.push(SkippedSubject { id, reason: "no nodule slice survived resampling".into() });
            continue;
        }

        let mut rng = stream(cfg.seed, domain::PREPARE, sidx as u64);
        let centers = sample_background_centers(
            &vols.lung,
            Some(&vols.nodule),
            cfg.bg_min_distance_mm,
            cfg.bg_max_distance_mm,
            cfg.backgrounds_per_subject,
            &mut rng,
        )?;
        for c in centers {
            let pos = c.position_mm(vols.image.spacing_mm);
            let p = place_voi(vols.image.dims, vols.image.spacing_mm, pos, cfg.voi_mm, true)?;
            let start = [c.index[0], p.start[1], p.start[2]];
            let size = [1, p.size[1], p.size[2]];
            if vols.nodule.crop(start, size)?.data.iter().any(|&v| v > 0) {
                report.backgrounds_rejected += 1;
                continue;
            }
            let mut slab = vols.image.crop(start, size)?;
            window_all(&mut slab.data, &cfg.window);
            backgrounds.push(BackgroundPatch {
                image: to_patch(&slab.data, size[1], size[2], cfg)?,
                center_distance_mm: c.distance_mm,
            });
        }
        subjects.push(SubjectEntry { id: id.clone(), gene_row: subject });
        genes.push(genes_all[row].clone());
    }
    report.subjects_used = subjects.len();
    if subjects.is_empty() {
        return Err(Error::EmptyTable("no subject has both images and a gene row".into()));
    }
    let manifest = DatasetManifest {
        version: DatasetManifest::VERSION,
        provenance: Provenance::Prepared,
        seed: cfg.seed,
        image_size: n,
        pixel_spacing_mm: cfg.voi_mm / n as f64,
        gene_dim: table.n_genes(),
        subjects,
        samples: entries,
        backgrounds: backgrounds.iter().enumerate().map(|(k, b)| BackgroundEntry::indexed(k, b)).collect(),
        planted_factors: None,
        normalization: Some(norm),
        synthetic: None,
        report: Some(report),
    };
    Corpus::assemble(manifest, genes, Some(table), samples, backgrounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::npy::write_npy;

    /// Writes a 40x64x64 volume at 1.5 mm with a spherical nodule and a box lung.
    fn write_subject(root: &Path, id: &str) {
        let dir = root.join(id);
        fs::create_dir_all(&dir).unwrap();
        let dims = [40usize, 64, 64];
        let total = dims.iter().product::<usize>();
        let mut img = vec![-800i16; total];
        let mut nod = vec![0u8; total];
        let mut lung = vec![0u8; total];
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let i = (z * dims[1] + y) * dims[2] + x;
                    if (2..38).contains(&z) && (4..60).contains(&y) && (4..60).contains(&x) {
                        lung[i] = 1;
                    }
                    let d2 = (z as i64 - 20).pow(2) + (y as i64 - 32).pow(2) + (x as i64 - 32).pow(2);
                    if d2 <= 9 {
                        nod[i] = 1;
                        img[i] = 30;
                    }
                }
            }
        }
        write_npy(&dir.join("image.npy"), &dims, &img).unwrap();
        write_npy(&dir.join("nodule_mask.npy"), &dims, &nod).unwrap();
        write_npy(&dir.join("lung_mask.npy"), &dims, &lung).unwrap();
        fs::write(dir.join("spacing.json"), r#"{"spacing_mm": [1.5, 1.5, 1.5]}"#).unwrap();
    }

    #[test]
    fn joins_slices_with_genes_and_reports_skips() {
        let root = tempfile::tempdir().unwrap();
        for id in ["A", "B", "C"] {
            write_subject(root.path(), id);
        }
        let table = GeneTable::new(
            vec!["A".into(), "B".into()],
            vec!["g1".into(), "g2".into(), "g3".into()],
            vec![Some(1.0), Some(2.0), None, Some(3.0), Some(5.0), Some(1.0)],
        )
        .unwrap();
        let cfg = ProtocolConfig { image_size: 32, backgrounds_per_subject: 3, ..Default::default() };
        let c = build_dataset(root.path(), &table, &cfg).unwrap();
        assert_eq!(c.n_subjects(), 2);
        assert_eq!(c.gene_dim(), 2);
        // nodule spans 7 axial slices (|dz| <= 3)
        assert_eq!(c.samples.len(), 14);
        assert!(c.samples.iter().all(|s| s.mask.area() > 0));
        let report = c.manifest.report.as_ref().unwrap();
        assert_eq!(report.skipped, vec![SkippedSubject { id: "C".into(), reason: "no gene row".into() }]);
        assert_eq!(c.backgrounds.len() + report.backgrounds_rejected, 6);
        for b in &c.backgrounds {
            assert!((5.0..=25.0).contains(&b.center_distance_mm));
        }
    }
}
