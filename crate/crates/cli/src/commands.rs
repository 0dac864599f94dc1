use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use radiogan::data::npy::{read_npy_as_f32, write_npy};
use radiogan::data::{build_dataset, generate_synthetic_corpus, holdout_backgrounds, Corpus, ImagePatch, ProtocolConfig, SyntheticCorpusConfig};
use radiogan::evaluation::{embed_genes, evaluate, render_grid, write_evaluation, EvalOptions, Tile};
use radiogan::genomics::load_gene_table;
use radiogan::rng::{domain, stream};
use radiogan::training::{fit, load_generator, read_checkpoint_info, Start, TrainFile};

use crate::{Command, Common};

const SNAPSHOT: &str = "resolved_config.toml";

fn output_dir(common: &Common, command: &str) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    match std::env::var_os("RADIOGAN_OUT") {
        Some(root) => PathBuf::from(root).join(command),
        None => PathBuf::from("runs").join(command),
    }
}

fn load_file<T: DeserializeOwned + Default>(common: &Common) -> Result<T> {
    match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).map_err(|e| radiogan::Error::Config(format!("{}: {e}", path.display())).into())
        }
        None => Ok(T::default()),
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn write_snapshot<T: Serialize>(out: &Path, value: &T) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(SNAPSHOT);
    let text = toml::to_string(value).context("serializing resolved config")?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn require(value: Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    match value {
        Some(p) => Ok(p),
        None => bail!(radiogan::Error::Config(format!("no {what} given (use {flag} or set it in the config file)"))),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct PrepareFile {
    images: Option<PathBuf>,
    genes: Option<PathBuf>,
    #[serde(flatten)]
    protocol: ProtocolConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainRun {
    resume: Option<PathBuf>,
    #[serde(flatten)]
    file: TrainFile,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct SynthesizeFile {
    checkpoint: Option<PathBuf>,
    background: Option<PathBuf>,
    gene_row: Option<usize>,
    corpus: Option<PathBuf>,
    seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct EmbedFile {
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvaluateFile {
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    #[serde(flatten)]
    options: EvalOptions,
}

pub fn run(command: Command) -> Result<()> {
    let name = command.name();
    match command {
        Command::MakeSynthetic { common, subjects, image_size } => {
            let mut cfg: SyntheticCorpusConfig = load_file(&common)?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.n_subjects = subjects.unwrap_or(cfg.n_subjects);
            cfg.image_size = image_size.unwrap_or(cfg.image_size);
            let out = output_dir(&common, name);
            let corpus = generate_synthetic_corpus(&cfg)?;
            corpus.save(&out)?;
            write_snapshot(&out, &cfg)?;
            log::info!("wrote {} subjects, {} samples, {} backgrounds to {}", corpus.n_subjects(), corpus.samples.len(), corpus.backgrounds.len(), out.display());
        }
        Command::PrepareData { common, images, genes, image_size } => {
            let mut file: PrepareFile = load_file(&common)?;
            file.protocol.seed = common.seed.unwrap_or(file.protocol.seed);
            file.protocol.image_size = image_size.unwrap_or(file.protocol.image_size);
            let images = absolute(&require(images.or(file.images), "image directory", "--images")?);
            let genes = absolute(&require(genes.or(file.genes), "gene table", "--genes")?);
            file.images = Some(images.clone());
            file.genes = Some(genes.clone());
            let out = output_dir(&common, name);
            let table = load_gene_table(&genes)?;
            let corpus = build_dataset(&images, &table, &file.protocol)?;
            corpus.save(&out)?;
            write_snapshot(&out, &file)?;
            if let Some(r) = &corpus.manifest.report {
                log::info!("{} subjects used, {} skipped", r.subjects_used, r.skipped.len());
            }
        }
        Command::Train { common, corpus, checkpoint, steps, lambda, image_size } => {
            let mut run: TrainRun = load_file(&common)?;
            let f = &mut run.file;
            f.training.seed = common.seed.unwrap_or(f.training.seed);
            f.training.steps = steps.unwrap_or(f.training.steps);
            f.training.lambda = lambda.unwrap_or(f.training.lambda);
            let corpus_path = absolute(&require(corpus.or(f.corpus.take()), "corpus", "--corpus")?);
            f.corpus = Some(corpus_path.clone());
            run.resume = checkpoint.or(run.resume).map(|p| absolute(&p));
            let data = Corpus::load(&corpus_path).with_context(|| format!("loading corpus {}", corpus_path.display()))?;
            let f = &mut run.file;
            f.model.gene_dim = data.gene_dim();
            f.model.image_size = image_size.unwrap_or(data.image_size());
            f.training.validate()?;
            f.model.validate()?;
            let out = output_dir(&common, name);
            write_snapshot(&out, &run)?;
            let start = match &run.resume {
                Some(p) => Start::Resume(p),
                None => Start::Fresh(run.file.model.clone()),
            };
            let report = fit(&run.file.training, &data, start, &out, Some(&corpus_path))?;
            log::info!("{} steps run; checkpoint {}", report.steps_run, report.final_checkpoint.display());
        }
        Command::Synthesize { common, checkpoint, background, gene_row, corpus } => {
            let mut file: SynthesizeFile = load_file(&common)?;
            file.seed = common.seed.unwrap_or(file.seed);
            let ck = absolute(&require(checkpoint.or(file.checkpoint.take()), "checkpoint", "--checkpoint")?);
            let bg_path = absolute(&require(background.or(file.background.take()), "background patch", "--background")?);
            let row = match gene_row.or(file.gene_row) {
                Some(r) => r,
                None => bail!(radiogan::Error::Config("no gene row given (use --gene-row)".into())),
            };
            let corpus_path = match corpus.or(file.corpus.take()) {
                Some(p) => p,
                None => read_checkpoint_info(&ck)?.corpus.context("checkpoint records no corpus; pass --corpus")?,
            };
            let corpus_path = absolute(&corpus_path);
            file.checkpoint = Some(ck.clone());
            file.background = Some(bg_path.clone());
            file.gene_row = Some(row);
            file.corpus = Some(corpus_path.clone());
            let data = Corpus::load(&corpus_path).with_context(|| format!("loading corpus {}", corpus_path.display()))?;
            let gen = load_generator(&ck, Some(data.gene_dim()))?;
            let Some(gene) = data.genes.get(row) else {
                bail!(radiogan::Error::Bounds(format!("gene row {row} outside 0..{}", data.n_subjects())));
            };
            let (shape, pixels) = read_npy_as_f32(&bg_path)?;
            let side = gen.config.image_size;
            if shape.iter().product::<usize>() != side * side || shape.iter().filter(|&&d| d != 1).count() > 2 {
                bail!(radiogan::Error::Shape(format!("{}: shape {shape:?} is not a {side}x{side} patch", bg_path.display())));
            }
            let sp = data.manifest.pixel_spacing_mm;
            let bg = ImagePatch::new(side, side, pixels, (sp, sp)).with_context(|| format!("background {}", bg_path.display()))?;
            let mut rng = stream(file.seed, domain::EVAL, 2);
            let noise: Vec<f64> = (0..gen.config.noise_dim).map(|_| rng.sample(StandardNormal)).collect();
            let out_dir = output_dir(&common, name);
            write_snapshot(&out_dir, &file)?;
            let out = gen.synthesize(&bg, &gene.values, &noise)?;
            let mask: Vec<f32> = out.mask.pixels().iter().map(|&v| v as f32).collect();
            write_npy(&out_dir.join("image.npy"), &[side, side], out.image.pixels())?;
            write_npy(&out_dir.join("mask.npy"), &[side, side], out.mask.pixels())?;
            write_npy(&out_dir.join("soft_mask.npy"), &[side, side], &out.soft_mask)?;
            write_npy(&out_dir.join("weight_map.npy"), &[side, side], &out.weight_map)?;
            let single = |t: Tile, file: &str| render_grid(&[vec![t]], &out_dir.join(file));
            single(Tile::new(side, side, out.image.pixels().to_vec())?, "image.png")?;
            single(Tile::unit(side, side, &mask)?, "mask.png")?;
            single(Tile::unit(side, side, &out.weight_map)?, "weight_map.png")?;
            render_grid(
                &[vec![
                    Tile::new(side, side, bg.pixels().to_vec())?,
                    Tile::new(side, side, out.image.pixels().to_vec())?,
                    Tile::unit(side, side, &mask)?,
                    Tile::unit(side, side, &out.weight_map)?,
                ]],
                &out_dir.join("panel.png"),
            )?;
            log::info!("mask area {} px; outputs in {}", out.mask.area(), out_dir.display());
        }
        Command::EmbedGenes { common, checkpoint, corpus } => {
            let mut file: EmbedFile = load_file(&common)?;
            let ck = absolute(&require(checkpoint.or(file.checkpoint.take()), "checkpoint", "--checkpoint")?);
            let corpus_path = absolute(&require(corpus.or(file.corpus.take()), "corpus", "--corpus")?);
            file.checkpoint = Some(ck.clone());
            file.corpus = Some(corpus_path.clone());
            let data = Corpus::load(&corpus_path).with_context(|| format!("loading corpus {}", corpus_path.display()))?;
            let gen = load_generator(&ck, Some(data.gene_dim()))?;
            let out = output_dir(&common, name);
            write_snapshot(&out, &file)?;
            let codes = embed_genes(&gen, &data)?;
            codes.write_csv(&out.join("codes.csv"))?;
            log::info!("{} codes of width {}", codes.codes.len(), codes.width());
        }
        Command::Evaluate { common, checkpoint, corpus } => {
            let mut file: EvaluateFile = load_file(&common)?;
            file.options.seed = common.seed.unwrap_or(file.options.seed);
            let ck = absolute(&require(checkpoint.or(file.checkpoint.take()), "checkpoint", "--checkpoint")?);
            let corpus_path = match corpus.or(file.corpus.take()) {
                Some(p) => p,
                None => read_checkpoint_info(&ck)?.corpus.context("checkpoint records no corpus; pass --corpus")?,
            };
            let corpus_path = absolute(&corpus_path);
            file.checkpoint = Some(ck.clone());
            file.corpus = Some(corpus_path.clone());
            let data = Corpus::load(&corpus_path).with_context(|| format!("loading corpus {}", corpus_path.display()))?;
            let gen = load_generator(&ck, Some(data.gene_dim()))?;
            let out = output_dir(&common, name);
            write_snapshot(&out, &file)?;
            let backgrounds = match &data.manifest.synthetic {
                Some(cfg) => holdout_backgrounds(cfg, data.n_subjects() * file.options.backgrounds_per_code)?,
                None => {
                    log::warn!("corpus is not synthetic; evaluating on its own training backgrounds");
                    data.backgrounds.clone()
                }
            };
            let eval = evaluate(&gen, &data, &backgrounds, &file.options)?;
            write_evaluation(&eval, &backgrounds, &out)?;
            let r = &eval.report;
            log::info!(
                "background L1 mean {:.4}, nonempty masks {:.2}, code silhouette {:.3} (k={})",
                r.background_preservation.mean,
                r.mask_nonempty_fraction,
                r.gene_code.silhouette,
                r.gene_code.k
            );
        }
    }
    Ok(())
}
