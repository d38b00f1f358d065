//! Layered run configuration: built-in defaults, then an optional JSON file,
//! then command-line flags. The merged result is written next to every run's
//! outputs and can be fed back with `--config` to replay it.

use std::path::{Path, PathBuf};

use anyhow::Context;
use demenscan::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Checkpoint path; defaults to `<out_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub train_fraction: f64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            data_dir: None,
            out_dir: PathBuf::from("demenscan-run"),
            checkpoint: None,
            train_fraction: 0.8,
            train: TrainConfig::default(),
        }
    }
}

impl TrainRun {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldRun {
    pub folds: usize,
    #[serde(flatten)]
    pub run: TrainRun,
}

impl Default for KFoldRun {
    fn default() -> Self {
        KFoldRun {
            folds: 5,
            run: TrainRun {
                out_dir: PathBuf::from("demenscan-kfold"),
                ..TrainRun::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// Every sample in the corpus.
    All,
    /// The held-out part of the stratified split (uses seed and train_fraction).
    Val,
    /// The training part of the stratified split.
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRun {
    pub data_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub split: EvalSplit,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        EvaluateRun {
            data_dir: None,
            model: None,
            out_dir: PathBuf::from("demenscan-eval"),
            split: EvalSplit::All,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainRun {
    pub model: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub class: Option<usize>,
    pub maps: usize,
}

impl Default for ExplainRun {
    fn default() -> Self {
        ExplainRun {
            model: None,
            image: None,
            out_dir: PathBuf::from("demenscan-explain"),
            class: None,
            maps: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiltersRun {
    pub model: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub layer: usize,
    pub count: usize,
    pub scale: usize,
}

impl Default for FiltersRun {
    fn default() -> Self {
        FiltersRun {
            model: None,
            out_dir: PathBuf::from("demenscan-filters"),
            layer: 1,
            count: 6,
            scale: 16,
        }
    }
}

/// Recursively overlay `patch` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults overlaid with the JSON file at `path`, if any. A file whose
/// `config` member is an object (as in `prediction.json`) contributes that
/// member.
pub fn resolve<T>(path: Option<&Path>) -> anyhow::Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut patch: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(inner) = patch.get_mut("config").filter(|c| c.is_object()) {
            patch = inner.take();
        }
        merge(&mut value, patch);
    }
    serde_json::from_value(value).context("config does not match the expected schema")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
