//! Run configuration: one JSON document with dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::{DigitParams, SyntheticParams};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::hashmodel::train::TrainConfig;
use crate::hashmodel::SUPPORTED_CODE_LENGTHS;

/// Where the source and target embeddings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticParams),
    Digits(DigitParams),
    Files {
        source_manifest: PathBuf,
        target_manifest: PathBuf,
        /// Optional hidden target labels (LBL1 file) for evaluation.
        #[serde(default)]
        target_labels: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticParams::default())
    }
}

impl DataSource {
    /// Copy with the generator seed replaced; file sources are unchanged.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DataSource::Synthetic(p) => p.seed = seed,
            DataSource::Digits(p) => p.seed = seed,
            DataSource::Files { .. } => {}
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Parent of all run directories.
    pub output_root: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output_root: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// L2-normalise every feature row before training.
    pub normalize: bool,
    pub data: DataSource,
    pub eval: EvalOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            normalize: true,
            data: DataSource::default(),
            eval: EvalOptions::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Manifest {
                path: path.to_path_buf(),
                message: j.to_string(),
            },
            other => other,
        })
    }

    /// Loads `path` (or the defaults) and applies `overrides` in order.
    pub fn resolve<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if !overrides.is_empty() {
            cfg = cfg.with_overrides(overrides)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !SUPPORTED_CODE_LENGTHS.contains(&self.train.code_length) {
            out.push(format!(
                "code_length {} is not one of {:?}",
                self.train.code_length, SUPPORTED_CODE_LENGTHS
            ));
        }
        out
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Applies one `dotted.key=value` override. The value is parsed as JSON
    /// and falls back to a plain string. Unknown keys are rejected.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        self.with_overrides(&[assignment])
    }

    /// Applies overrides in order, then validates once, so a data section can
    /// be switched to another kind and filled in key by key.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut root = self.to_value();
        let mut keys = Vec::with_capacity(assignments.len());
        for a in assignments {
            keys.push(apply_override(&mut root, a.as_ref())?);
        }
        let cfg: Self = serde_json::from_value(root)
            .map_err(|e| Error::InvalidArgument(format!("config overrides: {e}")))?;
        // a key that does not survive the typed round trip is not a config field
        let echo = cfg.to_value();
        for key in keys {
            if lookup(&echo, &key).is_none() {
                return Err(Error::InvalidArgument(format!("unknown config key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.to_value()).expect("config serialises");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `seed<seed>-<first 12 hash chars>`.
    pub fn run_id(&self) -> String {
        format!("seed{}-{}", self.train.seed, &self.hash()[..12])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.output_root.join(self.run_id())
    }
}

fn lookup<'v>(root: &'v Value, key: &str) -> Option<&'v Value> {
    key.split('.').try_fold(root, |v, part| v.get(part))
}

/// Writes one `dotted.key=value` into the JSON form and returns the key.
/// Intermediate objects must exist; the last segment may be new.
fn apply_override(root: &mut Value, assignment: &str) -> Result<String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::InvalidArgument(format!("bad override key `{key}`")));
    }
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let unknown = || Error::InvalidArgument(format!("unknown config key `{key}`"));
    let (parent, last) = match key.rsplit_once('.') {
        Some((p, l)) => (Some(p), l),
        None => (None, key),
    };
    let mut slot = &mut *root;
    for part in parent.into_iter().flat_map(|p| p.split('.')) {
        slot = slot.get_mut(part).ok_or_else(unknown)?;
    }
    let obj = slot.as_object_mut().ok_or_else(unknown)?;
    obj.insert(last.to_string(), value);
    // switching the data kind resets that section to the new kind's defaults
    if key == "data.kind" {
        obj.retain(|k, _| k == "kind");
    }
    Ok(key.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
        assert_eq!(cfg.train.gamma, 0.5);
        assert_eq!(cfg.train.walk_k, 5);
        assert_eq!(cfg.train.k_mnn, 3);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.train.code_length, 64);
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default();
        let c = cfg.with_override("gamma=0.3").unwrap();
        assert_eq!(c.train.gamma, 0.3);
        let c = c.with_override("loss_weights.mix=0.5").unwrap();
        assert_eq!(c.train.loss_weights.mix, 0.5);
        let c = c.with_override("paths.output_root=/tmp/x").unwrap();
        assert_eq!(c.paths.output_root, PathBuf::from("/tmp/x"));
        let c = c.with_override("data.kind=digits").unwrap();
        assert_eq!(c.data, DataSource::Digits(DigitParams::default()));
        assert!(cfg.with_override("gama=0.3").is_err());
        assert!(cfg.with_override("gamma=1.5").is_err());
        assert!(cfg.with_override("gamma").is_err());
        assert!(cfg.with_override("data.bogus=1").is_err());
        assert!(cfg.with_override("loss_weights.mix.deep=1").is_err());
    }

    #[test]
    fn data_kind_switch_is_filled_key_by_key() {
        let c = RunConfig::resolve(
            None,
            &["data.kind=files", "data.source_manifest=s.json", "data.target_manifest=t.json"],
        )
        .unwrap();
        assert_eq!(
            c.data,
            DataSource::Files {
                source_manifest: "s.json".into(),
                target_manifest: "t.json".into(),
                target_labels: None,
            }
        );
        assert!(RunConfig::default().with_override("data.kind=files").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.with_override("walk_k=7").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert!(a.run_id().starts_with("seed0-"));
    }

    #[test]
    fn odd_code_length_warns() {
        let c = RunConfig::default().with_override("code_length=40").unwrap();
        assert_eq!(c.warnings().len(), 1);
        assert!(RunConfig::default().warnings().is_empty());
    }
}
