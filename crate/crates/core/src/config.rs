//! Experiment configuration.
//!
//! Config files are flat JSON objects keyed by dotted names such as
//! `"hfa.kind"` or `"loss.lambda2"`; unknown keys are rejected. Missing keys
//! take the desk-scale defaults below.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::encoders::PyramidConfig;
use crate::error::{Error, Result};
use crate::hfa::AggregatorKind;
use crate::losses::LossWeights;
use crate::sampling::NegativePolicy;
use crate::sft::SftConfig;
use crate::vlc::CompositionKind;

/// Which query embedder to train. Only `Trace` uses the full
/// transform/aggregate/compose stack; the rest are single-modality or
/// late-fusion references sharing the same target path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Trace,
    ImageOnly,
    TextOnly,
    ConcatBaseline,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Trace => "trace",
            Variant::ImageOnly => "image_only",
            Variant::TextOnly => "text_only",
            Variant::ConcatBaseline => "concat_baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { variant: Variant::Trace }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidSection {
    pub channels: Vec<usize>,
    /// Level-1 `[height, width]`; later levels halve.
    pub size: [usize; 2],
}

impl Default for PyramidSection {
    fn default() -> Self {
        PyramidSection {
            channels: vec![8, 16, 32],
            size: [16, 16],
        }
    }
}

impl PyramidSection {
    pub fn pyramid(&self) -> Result<PyramidConfig> {
        PyramidConfig::halving(self.channels.clone(), self.size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSection {
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for TextSection {
    fn default() -> Self {
        TextSection {
            embed_dim: 32,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HfaSection {
    pub kind: AggregatorKind,
    pub symmetric_heads: bool,
}

impl Default for HfaSection {
    fn default() -> Self {
        HfaSection {
            kind: AggregatorKind::Lstm,
            symmetric_heads: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlcSection {
    pub kind: CompositionKind,
    pub normalize_target: bool,
}

impl Default for VlcSection {
    fn default() -> Self {
        VlcSection {
            kind: CompositionKind::ResidualOffset,
            normalize_target: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub disc_lr: f64,
    /// Main learning rate is divided by this on a plateau.
    pub main_decay: f64,
    pub disc_decay: f64,
    pub patience: usize,
    /// Minimum absolute validation-loss improvement that resets patience.
    pub plateau_threshold: f64,
    pub lr_floor: f64,
    /// Image-encoder weights stay frozen for epochs before this one.
    pub unfreeze_epoch: usize,
    pub eval_every: usize,
    /// Cap on validation queries scored at each evaluation (0 = all).
    pub val_queries: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            disc_lr: 2e-4,
            main_decay: 2.0,
            disc_decay: 10.0,
            patience: 3,
            plateau_threshold: 1e-4,
            lr_floor: 1e-6,
            unfreeze_epoch: 2,
            eval_every: 50,
            val_queries: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: vec![1, 10, 50] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelSection,
    pub pyramid: PyramidSection,
    pub text: TextSection,
    pub sft: SftConfig,
    pub hfa: HfaSection,
    pub vlc: VlcSection,
    pub loss: LossWeights,
    pub neg: NegativePolicy,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Expands `{"a.b": v}` into `{"a": {"b": v}}`.
fn nest(flat: &Map<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Usage(format!("bad config key `{key}`")))?;
        let mut node = &mut root;
        for part in parts {
            let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::Usage(format!("config key `{key}` conflicts with a scalar")))?;
        }
        if node.insert(leaf.to_string(), value.clone()).is_some() {
            return Err(Error::Usage(format!("duplicate config key `{key}`")));
        }
    }
    Ok(Value::Object(root))
}

/// Inverse of [`nest`] for recording effective configs.
fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl Config {
    /// Full-scale training protocol (longer frozen phase).
    pub fn paper_preset() -> Config {
        let mut cfg = Config::default();
        cfg.train.unfreeze_epoch = 10;
        cfg.train.epochs = 50;
        cfg
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Config> {
        let mut flat = flat.clone();
        let base = match flat.remove("preset") {
            None => Config::default(),
            Some(Value::String(s)) if s == "desk" => Config::default(),
            Some(Value::String(s)) if s == "paper" => Config::paper_preset(),
            Some(other) => return Err(Error::Usage(format!("unknown preset {other} (desk, paper)"))),
        };
        let mut merged = base.to_flat();
        for (k, v) in flat {
            if !merged.contains_key(&k) {
                return Err(Error::Usage(format!("unknown config key `{k}`")));
            }
            merged.insert(k, v);
        }
        let cfg: Config =
            serde_json::from_value(nest(&merged)?).map_err(|e| Error::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Config> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Usage(format!("config is not JSON: {e}")))?;
        match v {
            Value::Object(m) => Config::from_flat(&m),
            _ => Err(Error::Usage("config must be a JSON object".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_json_str(&text)
    }

    pub fn to_flat(&self) -> Map<String, Value> {
        let v = serde_json::to_value(self).expect("config serialises");
        let mut out = Map::new();
        flatten("", &v, &mut out);
        out
    }

    /// Sets one dotted key from a JSON value.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut flat = self.to_flat();
        if !flat.contains_key(key) {
            return Err(Error::Usage(format!("unknown config key `{key}`")));
        }
        flat.insert(key.to_string(), value);
        *self = Config::from_flat(&flat)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.pyramid()?;
        self.sft.validate()?;
        self.loss.validate()?;
        self.neg.validate()?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::Parameter("train.batch must be positive".into()));
        }
        for (name, v) in [("train.lr", t.lr), ("train.disc_lr", t.disc_lr), ("train.lr_floor", t.lr_floor)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if t.main_decay < 1.0 || t.disc_decay < 1.0 {
            return Err(Error::Parameter("learning-rate decay factors must be >= 1".into()));
        }
        if t.eval_every == 0 {
            return Err(Error::Parameter("train.eval_every must be positive".into()));
        }
        if self.text.embed_dim == 0 || self.text.hidden == 0 {
            return Err(Error::Parameter("text dimensions must be positive".into()));
        }
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            return Err(Error::Parameter("eval.k must list positive cut-offs".into()));
        }
        Ok(())
    }
}
