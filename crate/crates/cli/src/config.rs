//! Run configuration: one TOML file per invocation, patched by `--set`,
//! `--seed` and `--out` before it is deserialized into the subcommand's
//! typed config. Unknown keys are rejected.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use toml::{Table, Value};
use wrinkle_core::bake::NormalizationSpec;
use wrinkle_core::dataset::{DatasetConfig, Subset};
use wrinkle_core::denoiser::TrainConfig;
use wrinkle_core::design::DesignParams;
use wrinkle_core::diffusion::{SamplingMode, ScheduleConfig};
use wrinkle_core::metrics::Reduction;
use wrinkle_core::temporal::AugmentationConfig;
use wrinkle_core::Error;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), Error> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| invalid(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads the config file (if any), applies the overrides and deserializes.
/// `seed_key` is where `--seed` lands.
pub fn load<T: DeserializeOwned>(common: &Common, seed_key: &str) -> Result<T, Error> {
    let mut table = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for o in &common.overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| invalid(format!("override `{o}` is not KEY=VALUE")))?;
        set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| invalid("seed must fit in a signed 64-bit integer"))?;
        set_path(&mut table, seed_key, Value::Integer(seed))?;
    }
    if let Some(out) = &common.out {
        set_path(&mut table, "out", Value::String(out.display().to_string()))?;
    }
    T::deserialize(table).map_err(|e| invalid(format!("config: {e}")))
}

/// Frame selection as written in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetName {
    Train,
    Validation,
    All,
}

impl From<SubsetName> for Subset {
    fn from(s: SubsetName) -> Self {
        match s {
            SubsetName::Train => Subset::Train,
            SubsetName::Validation => Subset::Validation,
            SubsetName::All => Subset::All,
        }
    }
}

fn train_subset() -> SubsetName {
    SubsetName::Train
}

fn validation_subset() -> SubsetName {
    SubsetName::Validation
}

fn default_resolution() -> usize {
    128
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetGenRun {
    pub out: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
}

/// Where the body and garment template come from: a dataset directory,
/// explicit files, or the built-in desk body and default template.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneFiles {
    pub dataset: Option<PathBuf>,
    pub body: Option<PathBuf>,
    pub template: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BakeRun {
    /// Posed garment OBJ.
    pub mesh: PathBuf,
    pub out: PathBuf,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    pub design: DesignParams,
    pub shape: Vec<f64>,
    /// Flattened pose: three axis-angle values per joint, then the root translation.
    pub pose: Vec<f64>,
    /// Stored in the output; defaults to the dataset's when `scene.dataset` is set.
    pub normalization: Option<NormalizationSpec>,
    #[serde(default)]
    pub scene: SceneFiles,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructRun {
    pub texture: PathBuf,
    pub out: PathBuf,
    /// Flat condition vector; otherwise taken from the texture's provenance
    /// or the dataset manifest.
    pub condition: Option<Vec<f64>>,
    #[serde(default)]
    pub scene: SceneFiles,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    #[serde(default = "train_subset")]
    pub subset: SubsetName,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTemporalRun {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    #[serde(default = "train_subset")]
    pub subset: SubsetName,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRun {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub mode: SamplingMode,
    /// Explicit flat condition vectors.
    #[serde(default)]
    pub conditions: Vec<Vec<f64>>,
    /// Otherwise the conditions of this dataset's frames.
    pub dataset: Option<PathBuf>,
    #[serde(default = "validation_subset")]
    pub subset: SubsetName,
    pub limit: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRun {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub design: usize,
    pub sequence: usize,
    pub out: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub mode: SamplingMode,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub label: String,
    /// Sequence directory written by `rollout`.
    pub dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub dataset: PathBuf,
    pub design: usize,
    pub sequence: usize,
    pub out: PathBuf,
    pub predictions: Vec<Prediction>,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub overwrite: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportPngRun {
    /// A `.disp` file or a directory of them.
    pub input: PathBuf,
    pub out: PathBuf,
    /// Used when a texture carries no normalization.
    pub dataset: Option<PathBuf>,
}
