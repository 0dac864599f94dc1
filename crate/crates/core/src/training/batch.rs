//! Minibatch draws with mismatched genes and masks.

use rand::Rng;
use rand_distr::StandardNormal;
use radiogan_tensor::Tensor;

use crate::data::Corpus;
use crate::error::{Error, Result};

/// Indices drawn for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchIndices {
    /// Anchor samples.
    pub samples: Vec<usize>,
    /// Subject whose gene vector serves as the wrong gene for each anchor.
    pub wrong_gene_subjects: Vec<usize>,
    /// Sample whose mask serves as the wrong mask for each anchor.
    pub wrong_mask_samples: Vec<usize>,
    pub backgrounds: Vec<usize>,
    /// Generator noise, `batch_size x noise_dim`.
    pub noise: Vec<f64>,
}

/// Uniform anchors; the wrong gene comes from a uniformly chosen other
/// subject and the wrong mask from a uniformly chosen other sample.
pub fn sample_batch<R: Rng>(corpus: &Corpus, batch_size: usize, noise_dim: usize, rng: &mut R) -> Result<BatchIndices> {
    let n_subjects = corpus.n_subjects();
    if n_subjects < 2 {
        return Err(Error::Sampling(format!("mismatched genes need at least 2 subjects, corpus has {n_subjects}")));
    }
    let n_samples = corpus.samples.len();
    if n_samples < 2 {
        return Err(Error::Sampling(format!("mismatched masks need at least 2 samples, corpus has {n_samples}")));
    }
    if corpus.backgrounds.is_empty() {
        return Err(Error::Sampling("corpus has no background patches".into()));
    }
    let mut out = BatchIndices {
        samples: Vec::with_capacity(batch_size),
        wrong_gene_subjects: Vec::with_capacity(batch_size),
        wrong_mask_samples: Vec::with_capacity(batch_size),
        backgrounds: Vec::with_capacity(batch_size),
        noise: Vec::with_capacity(batch_size * noise_dim),
    };
    for _ in 0..batch_size {
        let s = rng.gen_range(0..n_samples);
        let own = corpus.samples[s].subject;
        // skip over the excluded index to stay uniform over the rest
        let mut g = rng.gen_range(0..n_subjects - 1);
        if g >= own {
            g += 1;
        }
        let mut m = rng.gen_range(0..n_samples - 1);
        if m >= s {
            m += 1;
        }
        out.samples.push(s);
        out.wrong_gene_subjects.push(g);
        out.wrong_mask_samples.push(m);
        out.backgrounds.push(rng.gen_range(0..corpus.backgrounds.len()));
    }
    out.noise.extend((0..batch_size * noise_dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok(out)
}

/// Batch tensors in `(N, 1, W, W)` / `(N, D)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub wrong_masks: Tensor<f32>,
    pub genes: Tensor<f32>,
    pub wrong_genes: Tensor<f32>,
    pub backgrounds: Tensor<f32>,
    pub noise: Tensor<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn materialize(corpus: &Corpus, idx: &BatchIndices) -> Result<Self> {
        let n = idx.samples.len();
        let w = corpus.image_size();
        let d = corpus.gene_dim();
        let img = |pixels: &mut Vec<f32>, p: &[f32]| pixels.extend_from_slice(p);
        let mut images = Vec::with_capacity(n * w * w);
        let mut masks = Vec::with_capacity(n * w * w);
        let mut wrong_masks = Vec::with_capacity(n * w * w);
        let mut genes = Vec::with_capacity(n * d);
        let mut wrong_genes = Vec::with_capacity(n * d);
        let mut backgrounds = Vec::with_capacity(n * w * w);
        for k in 0..n {
            let s = &corpus.samples[idx.samples[k]];
            img(&mut images, s.image.pixels());
            masks.extend(s.mask.pixels().iter().map(|&v| v as f32));
            wrong_masks.extend(corpus.samples[idx.wrong_mask_samples[k]].mask.pixels().iter().map(|&v| v as f32));
            genes.extend(corpus.genes[s.subject].values.iter().map(|&v| v as f32));
            wrong_genes.extend(corpus.genes[idx.wrong_gene_subjects[k]].values.iter().map(|&v| v as f32));
            img(&mut backgrounds, corpus.backgrounds[idx.backgrounds[k]].image.pixels());
        }
        if idx.noise.len() % n.max(1) != 0 {
            return Err(Error::Shape(format!("{} noise values for {n} batch rows", idx.noise.len())));
        }
        let nd = idx.noise.len() / n.max(1);
        let grid = [n, 1, w, w];
        Ok(Self {
            images: Tensor::new(&grid, images)?,
            masks: Tensor::new(&grid, masks)?,
            wrong_masks: Tensor::new(&grid, wrong_masks)?,
            genes: Tensor::new(&[n, d], genes)?,
            wrong_genes: Tensor::new(&[n, d], wrong_genes)?,
            backgrounds: Tensor::new(&grid, backgrounds)?,
            noise: Tensor::new(&[n, nd], idx.noise.iter().map(|&v| v as f32).collect())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, SyntheticCorpusConfig};
    use crate::rng::stream;

    fn corpus(n_subjects: usize) -> Corpus {
        generate_synthetic_corpus(&SyntheticCorpusConfig {
            n_subjects,
            gene_dim: 6,
            image_size: 32,
            slices_per_subject: 2,
            backgrounds_per_subject: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn single_subject_is_error() {
        let c = corpus(1);
        assert!(matches!(sample_batch(&c, 4, 3, &mut stream(0, 0, 0)), Err(Error::Sampling(_))));
    }

    #[test]
    fn two_subjects_force_the_other_gene() {
        let c = corpus(2);
        let b = sample_batch(&c, 64, 3, &mut stream(0, 0, 0)).unwrap();
        for (s, g) in b.samples.iter().zip(&b.wrong_gene_subjects) {
            assert_eq!(*g, 1 - c.samples[*s].subject);
        }
    }

    #[test]
    fn shapes_and_distinct_masks() {
        let c = corpus(4);
        let idx = sample_batch(&c, 8, 3, &mut stream(1, 0, 0)).unwrap();
        assert!(idx.samples.iter().zip(&idx.wrong_mask_samples).all(|(a, b)| a != b));
        let b = Batch::materialize(&c, &idx).unwrap();
        assert_eq!(b.images.shape(), &[8, 1, 32, 32]);
        assert_eq!(b.backgrounds.shape(), &[8, 1, 32, 32]);
        assert_eq!(b.wrong_genes.shape(), &[8, 6]);
        assert_eq!(b.noise.shape(), &[8, 3]);
    }
}
