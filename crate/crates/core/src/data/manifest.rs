//! Corpus index, in-memory corpus and its on-disk layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/genes.npy                      normalized genes, f64 (subjects, D)
//! <dir>/genes_raw.csv                  optional raw table
//! <dir>/subjects/<id>/slice_KKK_image.npy   f32 (H, W)
//! <dir>/subjects/<id>/slice_KKK_mask.npy    u8  (H, W)
//! <dir>/backgrounds/bg_KKKKK.npy       f32 (H, W)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::background::BackgroundPatch;
use super::image::{ImagePatch, SegMask};
use super::npy::{read_npy, write_npy};
use super::synthetic::SyntheticCorpusConfig;
use crate::error::{Error, Result};
use crate::genomics::{load_gene_table, GeneTable, GeneVector, NormalizationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic,
    Prepared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Row in `genes.npy`.
    pub gene_row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub subject_id: String,
    pub slice_index: usize,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundEntry {
    pub image: String,
    pub center_distance_mm: f64,
}

impl BackgroundEntry {
    pub fn indexed(k: usize, patch: &BackgroundPatch) -> Self {
        Self { image: format!("backgrounds/bg_{k:05}.npy"), center_distance_mm: patch.center_distance_mm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSubject {
    pub id: String,
    pub reason: String,
}

/// What `build_dataset` kept and dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub subjects_used: usize,
    pub skipped: Vec<SkippedSubject>,
    pub empty_slices_dropped: usize,
    pub backgrounds_rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub provenance: Provenance,
    pub seed: u64,
    pub image_size: usize,
    pub pixel_spacing_mm: f64,
    pub gene_dim: usize,
    pub subjects: Vec<SubjectEntry>,
    pub samples: Vec<SampleEntry>,
    pub backgrounds: Vec<BackgroundEntry>,
    /// One row per sample, synthetic corpora only.
    pub planted_factors: Option<Vec<Vec<f64>>>,
    pub normalization: Option<NormalizationSpec>,
    pub synthetic: Option<SyntheticCorpusConfig>,
    pub report: Option<BuildReport>,
}

impl DatasetManifest {
    pub const VERSION: u32 = 1;

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }
}

/// Nodule slice with its subject (index into `Corpus::genes`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: ImagePatch,
    pub mask: SegMask,
    pub subject: usize,
}

/// Fully materialized corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    /// Normalized gene vector per subject, in manifest subject order.
    pub genes: Vec<GeneVector>,
    pub raw_genes: Option<GeneTable>,
    pub samples: Vec<TrainingSample>,
    pub backgrounds: Vec<BackgroundPatch>,
}

impl Corpus {
    /// Checks every cross-reference before handing out a corpus.
    pub fn assemble(
        manifest: DatasetManifest,
        genes: Vec<GeneVector>,
        raw_genes: Option<GeneTable>,
        samples: Vec<TrainingSample>,
        backgrounds: Vec<BackgroundPatch>,
    ) -> Result<Self> {
        if genes.len() != manifest.subjects.len() {
            return Err(Error::Schema(format!("{} gene vectors for {} subjects", genes.len(), manifest.subjects.len())));
        }
        for (s, g) in manifest.subjects.iter().zip(&genes) {
            if g.len() != manifest.gene_dim {
                return Err(Error::Dimension { expected: manifest.gene_dim, got: g.len() });
            }
            if g.subject_id != s.id {
                return Err(Error::Schema(format!("gene row for {:?} is labelled {:?}", s.id, g.subject_id)));
            }
        }
        if samples.len() != manifest.samples.len() || backgrounds.len() != manifest.backgrounds.len() {
            return Err(Error::Schema("manifest entries and loaded patches disagree".into()));
        }
        for (s, e) in samples.iter().zip(&manifest.samples) {
            let Some(owner) = manifest.subjects.get(s.subject) else {
                return Err(Error::Schema(format!("sample references subject #{}", s.subject)));
            };
            if owner.id != e.subject_id {
                return Err(Error::Schema(format!("sample subject {:?} != {:?}", owner.id, e.subject_id)));
            }
            if !s.mask.same_grid(&s.image) || s.image.rows() != manifest.image_size || s.image.cols() != manifest.image_size {
                return Err(Error::Shape(format!("sample {} is not {}x{}", e.image, manifest.image_size, manifest.image_size)));
            }
            if s.mask.area() == 0 {
                return Err(Error::Schema(format!("sample {} has an empty nodule mask", e.image)));
            }
        }
        for b in &backgrounds {
            if b.image.rows() != manifest.image_size || b.image.cols() != manifest.image_size {
                return Err(Error::Shape("background patch size differs from image_size".into()));
            }
        }
        if let Some(p) = &manifest.planted_factors {
            if p.len() != samples.len() {
                return Err(Error::Schema(format!("{} planted-factor rows for {} samples", p.len(), samples.len())));
            }
        }
        Ok(Self { manifest, genes, raw_genes, samples, backgrounds })
    }

    pub fn n_subjects(&self) -> usize {
        self.genes.len()
    }

    pub fn gene_dim(&self) -> usize {
        self.manifest.gene_dim
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    /// Planted factors per subject (every sample of a subject shares them).
    pub fn planted_by_subject(&self) -> Option<Vec<Vec<f64>>> {
        let planted = self.manifest.planted_factors.as_ref()?;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; self.n_subjects()];
        for (s, row) in self.samples.iter().zip(planted) {
            out[s.subject].get_or_insert_with(|| row.clone());
        }
        out.into_iter().collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(dir)?;
        mkdir(&dir.join("backgrounds"))?;
        let n = self.image_size();
        for (s, e) in self.samples.iter().zip(&self.manifest.samples) {
            let img = dir.join(&e.image);
            if let Some(parent) = img.parent() {
                mkdir(parent)?;
            }
            write_npy(&img, &[n, n], s.image.pixels())?;
            write_npy(&dir.join(&e.mask), &[n, n], s.mask.pixels())?;
        }
        for (b, e) in self.backgrounds.iter().zip(&self.manifest.backgrounds) {
            write_npy(&dir.join(&e.image), &[n, n], b.image.pixels())?;
        }
        let flat: Vec<f64> = self.genes.iter().flat_map(|g| g.values.iter().copied()).collect();
        write_npy(&dir.join("genes.npy"), &[self.n_subjects(), self.gene_dim()], &flat)?;
        if let Some(t) = &self.raw_genes {
            t.write_csv(&dir.join("genes_raw.csv"))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join("manifest.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.version != DatasetManifest::VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
        }
        let (shape, flat) = read_npy::<f64>(&dir.join("genes.npy"))?;
        if shape != [manifest.subjects.len(), manifest.gene_dim] {
            return Err(Error::Shape(format!("genes.npy has shape {shape:?}")));
        }
        let mut genes = Vec::with_capacity(manifest.subjects.len());
        for s in &manifest.subjects {
            let row = flat
                .get(s.gene_row * manifest.gene_dim..(s.gene_row + 1) * manifest.gene_dim)
                .ok_or_else(|| Error::Schema(format!("gene row {} out of range", s.gene_row)))?;
            genes.push(GeneVector::new(s.id.clone(), row.to_vec())?);
        }
        let index: HashMap<&str, usize> = manifest.subjects.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let spacing = (manifest.pixel_spacing_mm, manifest.pixel_spacing_mm);
        let n = manifest.image_size;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let subject = *index
                .get(e.subject_id.as_str())
                .ok_or_else(|| Error::Schema(format!("sample references unknown subject {:?}", e.subject_id)))?;
            let image = load_patch(&dir.join(&e.image), n, spacing)?;
            let (mshape, m) = read_npy::<u8>(&dir.join(&e.mask))?;
            if mshape != [n, n] {
                return Err(Error::Shape(format!("{}: shape {mshape:?}", e.mask)));
            }
            samples.push(TrainingSample { image, mask: SegMask::new(n, n, m)?, subject });
        }
        let backgrounds = manifest
            .backgrounds
            .iter()
            .map(|e| {
                Ok(BackgroundPatch {
                    image: load_patch(&dir.join(&e.image), n, spacing)?,
                    center_distance_mm: e.center_distance_mm,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let raw_path = dir.join("genes_raw.csv");
        let raw_genes = if raw_path.exists() { Some(load_gene_table(&raw_path)?) } else { None };
        Self::assemble(manifest, genes, raw_genes, samples, backgrounds)
    }
}

fn load_patch(path: &Path, n: usize, spacing: (f64, f64)) -> Result<ImagePatch> {
    let (shape, px) = read_npy::<f32>(path)?;
    if shape != [n, n] {
        return Err(Error::Shape(format!("{}: shape {shape:?}, expected [{n}, {n}]", path.display())));
    }
    ImagePatch::new(n, n, px, spacing)
}
