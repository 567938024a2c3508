//! TOML run configuration shared by `train`, `eval` and `ablate`.
//!
//! ```toml
//! dataset = "beauty.snapshot"    # or a [synthetic] table
//! output_dir = "runs/beauty"
//!
//! [train]
//! dim = 64
//! window = 50
//! weights = { alpha = 1.0, beta = 0.1, gamma = 1.0, delta = 0.1, lambda_reg = 1e-4 }
//!
//! [ablation]
//! variants = ["full", "sequential-only", "graph-only"]
//! seeds = [0, 1, 2]
//! ```
//!
//! Every key of [`Hyperparams`] may appear under `[train]`; unknown keys are
//! rejected everywhere. Relative paths resolve against the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::Variant;
use crate::data::{hex_digest, DatasetSnapshot, SplitDataset};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, NormalizedAdjacency};
use crate::synthetic::{SyntheticConfig, SyntheticData};
use crate::trainer::Hyperparams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Snapshot written by `prepare`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Generated data, used when no snapshot is given.
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    /// Adjacency dump to use instead of building one from the train split.
    #[serde(default)]
    pub adjacency: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: Hyperparams,
    #[serde(default)]
    pub ablation: AblationSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            msg: e.message().to_string(),
        })?;
        let base = origin.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.dataset.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.adjacency.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("give either dataset or [synthetic], not both".into())),
            (None, None) => return Err(Error::Config("no dataset: set dataset or a [synthetic] table".into())),
            _ => {}
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.ablation.variants.is_empty() || self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one variant and one seed".into()));
        }
        self.train.validate()
    }

    /// Content hash of the effective configuration, excluding where outputs go.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        hex_digest(&serde_json::to_vec(&canonical).expect("config serializes"))
    }

    pub fn load_dataset(&self) -> Result<SplitDataset> {
        match (&self.dataset, &self.synthetic) {
            (Some(path), _) => Ok(DatasetSnapshot::load(path)?.split),
            (None, Some(s)) => SyntheticData::generate(s)?.split(),
            (None, None) => Err(Error::Config("no dataset configured".into())),
        }
    }

    /// The configured adjacency dump, or the one built from the train split.
    pub fn load_adjacency(&self, dataset: &SplitDataset) -> Result<NormalizedAdjacency> {
        match &self.adjacency {
            Some(path) => NormalizedAdjacency::read_dump(path, dataset.n_users, dataset.n_items),
            None => Ok(build_adjacency(dataset, dataset.n_users, dataset.n_items)?.1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_synthetic_config() {
        let cfg = RunConfig::from_toml(
            "output_dir = \"out\"\n[synthetic]\nn_users = 20\n[train]\ndim = 8\nn_heads = 2\n",
            Path::new("/tmp/cfg/run.toml"),
        )
        .unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/cfg/out"));
        assert_eq!(cfg.train.dim, 8);
        assert_eq!(cfg.synthetic.as_ref().unwrap().n_users, 20);
        assert_eq!(cfg.ablation, AblationSettings::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = "output_dir = \"o\"\n[synthetic]\n[train]\nlearning_rat = 0.1\n";
        match RunConfig::from_toml(text, Path::new("c.toml")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_toml("output_dir = \"o\"\nbogus = 1\n[synthetic]\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn exactly_one_data_source() {
        assert!(RunConfig::from_toml("output_dir = \"o\"\n", Path::new("c.toml")).is_err());
        assert!(RunConfig::from_toml("output_dir = \"o\"\ndataset = \"d\"\n[synthetic]\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::from_toml("output_dir = \"o\"\n[synthetic]\n", Path::new("c.toml")).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.train.seed += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
