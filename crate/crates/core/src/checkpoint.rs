//! Checkpoints: one TNSR file per parameter plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::Config;
use crate::encoders::PyramidConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{read_tnsr, write_tnsr};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub pyramid: PyramidConfig,
    pub image_size: [usize; 3],
    pub vocab: usize,
    /// Training step at which the parameters were written.
    pub step: usize,
    /// Effective flat config the parameters were trained with.
    pub config: Map<String, Value>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub store: ParamStore,
}

fn file_name(name: &str) -> Result<String> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_') {
        return Err(Error::Usage(format!("parameter name `{name}` cannot be used as a file name")));
    }
    Ok(format!("{name}.tnsr"))
}

/// Writes `store` under `dir` (created if missing). Gradient buffers are not saved.
pub fn save(dir: &Path, cfg: &Config, model: &Model, store: &ParamStore, step: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let file = file_name(name)?;
        write_tnsr(&dir.join(&file), t)?;
        params.push(ParamEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
            requires_grad: t.requires_grad(),
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        pyramid: model.image.pyramid.clone(),
        image_size: model.image_size(),
        vocab: model.vocab,
        step,
        config: cfg.to_flat(),
        params,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint version {}", manifest.format_version),
        ));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        if file_name(&entry.name)? != entry.file {
            return Err(Error::format(&path, format!("unexpected file `{}` for `{}`", entry.file, entry.name)));
        }
        let file = dir.join(&entry.file);
        let t = read_tnsr(&file)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                &file,
                format!("shape {:?} disagrees with manifest {:?}", t.shape(), entry.shape),
            ));
        }
        store.insert(entry.name.clone(), t.with_requires_grad(entry.requires_grad));
    }
    Ok(Checkpoint { manifest, store })
}

impl Checkpoint {
    pub fn config(&self) -> Result<Config> {
        Config::from_flat(&self.manifest.config)
    }

    /// Rebuilds the model the parameters belong to and checks every expected
    /// parameter is present with the right shape.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(&self.config()?, self.manifest.image_size, self.manifest.vocab)?;
        let fresh = model.init_params(0);
        for (name, t) in fresh.iter() {
            let got = self
                .store
                .get(name)
                .map_err(|_| Error::Usage(format!("checkpoint is missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::dim("checkpoint parameter", got.shape(), t.shape()));
            }
        }
        Ok(model)
    }

    /// Refuses to continue training under a config whose pyramid differs.
    pub fn ensure_resumable(&self, cfg: &Config) -> Result<()> {
        let wanted = cfg.pyramid.pyramid()?;
        if wanted != self.manifest.pyramid {
            return Err(Error::Usage(format!(
                "cannot resume: checkpoint pyramid {:?} differs from configured {:?}",
                self.manifest.pyramid, wanted
            )));
        }
        Ok(())
    }
}
