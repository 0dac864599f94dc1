//! Single-file training checkpoints.
//!
//! One safetensors archive holds every tensor under a namespace prefix
//! (`generator/`, `generator_buffers/`, `discriminator/`,
//! `discriminator_buffers/`, `optim/<net>/{m,v}/`) and JSON metadata with the
//! architecture, training config and counters.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use radiogan_tensor::{Adam, ParamSet, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::config::TrainingConfig;
use super::step::TrainState;
use crate::error::{Error, Result};
use crate::model::{Generator, ModelConfig};

const FORMAT: &str = "radiogan-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimMeta {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl OptimMeta {
    fn of(a: &Adam<f32>) -> Self {
        Self { step: a.step, lr: a.config.lr, beta1: a.config.beta1, beta2: a.config.beta2, eps: a.config.eps }
    }

    fn apply(&self, a: &mut Adam<f32>) {
        a.step = self.step;
        a.config.lr = self.lr;
        a.config.beta1 = self.beta1;
        a.config.beta2 = self.beta2;
        a.config.eps = self.eps;
    }
}

/// Metadata stored next to the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub step: u64,
    pub corpus: Option<PathBuf>,
}

fn bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn json<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

fn ck_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

pub fn save_checkpoint(path: &Path, state: &TrainState, training: &TrainingConfig, corpus: Option<&Path>) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut put = |prefix: &str, set: &ParamSet<f32>| {
        for (_, name, t) in set.iter() {
            entries.push((format!("{prefix}/{name}"), t.shape().to_vec(), bytes(t)));
        }
    };
    put("generator", &state.generator.params);
    put("generator_buffers", &state.generator.buffers);
    put("discriminator", &state.discriminators.params);
    put("discriminator_buffers", &state.discriminators.buffers);
    for (net, params, opt) in [
        ("generator", &state.generator.params, &state.opt_generator),
        ("discriminator", &state.discriminators.params, &state.opt_discriminator),
    ] {
        for (((_, name, _), m), v) in params.iter().zip(&opt.first).zip(&opt.second) {
            entries.push((format!("optim/{net}/m/{name}"), m.shape().to_vec(), bytes(m)));
            entries.push((format!("optim/{net}/v/{name}"), v.shape().to_vec(), bytes(v)));
        }
    }
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("model".to_string(), json(&state.generator.config)?);
    meta.insert("training".to_string(), json(training)?);
    meta.insert("step".to_string(), state.step.to_string());
    meta.insert("optim_generator".to_string(), json(&OptimMeta::of(&state.opt_generator))?);
    meta.insert("optim_discriminator".to_string(), json(&OptimMeta::of(&state.opt_discriminator))?);
    if let Some(c) = corpus {
        meta.insert("corpus".to_string(), c.display().to_string());
    }
    let views = entries
        .iter()
        .map(|(n, s, b)| Ok((n.as_str(), TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| ck_err(path, e))?)))
        .collect::<Result<Vec<_>>>()?;
    let buf = safetensors::serialize(views, &Some(meta)).map_err(|e| ck_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write then rename so a crash never leaves a truncated archive
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Archive {
    path: PathBuf,
    bytes: Vec<u8>,
    meta: HashMap<String, String>,
}

impl Archive {
    fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(path, e))?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(ck_err(path, "not a radiogan checkpoint"));
        }
        Ok(Self { path: path.to_path_buf(), bytes, meta })
    }

    fn field<D: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<D> {
        let raw = self.meta.get(key).ok_or_else(|| ck_err(&self.path, format!("metadata lacks {key:?}")))?;
        serde_json::from_str(raw).map_err(|e| ck_err(&self.path, format!("metadata {key:?}: {e}")))
    }

    fn info(&self) -> Result<CheckpointInfo> {
        Ok(CheckpointInfo {
            model: self.field("model")?,
            training: self.field("training")?,
            step: self.field("step")?,
            corpus: self.meta.get("corpus").map(PathBuf::from),
        })
    }

    /// Overwrites every tensor of `set` from `prefix/<name>`; the archive must
    /// hold exactly that set of names and shapes under the prefix.
    fn fill(&self, st: &SafeTensors, prefix: &str, set: &mut ParamSet<f32>) -> Result<()> {
        let lead = format!("{prefix}/");
        let stored = st.names().into_iter().filter(|n| n.strip_prefix(&lead).is_some_and(|r| !r.contains('/'))).count();
        if stored != set.len() {
            return Err(ck_err(
                &self.path,
                format!("architecture mismatch: {stored} tensors under {prefix}/, model has {}", set.len()),
            ));
        }
        let ids: Vec<_> = set.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in ids {
            let key = format!("{lead}{name}");
            let view = st.tensor(&key).map_err(|_| ck_err(&self.path, format!("architecture mismatch: missing {key}")))?;
            if view.dtype() != Dtype::F32 {
                return Err(ck_err(&self.path, format!("{key} is {:?}, expected F32", view.dtype())));
            }
            let want = set.get(id).shape().to_vec();
            if view.shape() != want.as_slice() {
                return Err(ck_err(
                    &self.path,
                    format!("architecture mismatch: {key} has shape {:?}, model expects {want:?}", view.shape()),
                ));
            }
            let data: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            *set.get_mut(id) = Tensor::new(&want, data)?;
        }
        Ok(())
    }
}

/// Reads only the metadata.
pub fn read_checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    Archive::open(path)?.info()
}

/// Restores the full training state.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, CheckpointInfo)> {
    let ar = Archive::open(path)?;
    let info = ar.info()?;
    let mut state = TrainState::new(info.model.clone(), &info.training).map_err(|e| ck_err(path, e))?;
    let st = SafeTensors::deserialize(&ar.bytes).map_err(|e| ck_err(path, e))?;
    ar.fill(&st, "generator", &mut state.generator.params)?;
    ar.fill(&st, "generator_buffers", &mut state.generator.buffers)?;
    ar.fill(&st, "discriminator", &mut state.discriminators.params)?;
    ar.fill(&st, "discriminator_buffers", &mut state.discriminators.buffers)?;
    for (net, params, opt) in [
        ("generator", &state.generator.params, &mut state.opt_generator),
        ("discriminator", &state.discriminators.params, &mut state.opt_discriminator),
    ] {
        let mut m = params.clone();
        let mut v = params.clone();
        ar.fill(&st, &format!("optim/{net}/m"), &mut m)?;
        ar.fill(&st, &format!("optim/{net}/v"), &mut v)?;
        opt.first = m.iter().map(|(_, _, t)| t.clone()).collect();
        opt.second = v.iter().map(|(_, _, t)| t.clone()).collect();
        ar.field::<OptimMeta>(&format!("optim_{net}"))?.apply(opt);
    }
    state.step = info.step;
    Ok((state, info))
}

/// Generator only, for inference. When `expected_gene_dim` is given the
/// stored architecture must match it.
pub fn load_generator(path: &Path, expected_gene_dim: Option<usize>) -> Result<Generator<f32>> {
    let ar = Archive::open(path)?;
    let model: ModelConfig = ar.field("model")?;
    if let Some(d) = expected_gene_dim {
        if d != model.gene_dim {
            return Err(Error::Dimension { expected: model.gene_dim, got: d });
        }
    }
    let mut gen = Generator::new(model, 0)?;
    let st = SafeTensors::deserialize(&ar.bytes).map_err(|e| ck_err(path, e))?;
    ar.fill(&st, "generator", &mut gen.params)?;
    ar.fill(&st, "generator_buffers", &mut gen.buffers)?;
    Ok(gen)
}
