//! Helpers shared by the subcommands: run manifests, model loading and
//! dataset access.

use std::path::{Path, PathBuf};

use firmil::bagstore::{DatasetManifest, Split};
use firmil::ensemble::{Ensemble, EnsembleManifest};
use firmil::milnet::{predict, read_checkpoint, AttentionResult, LabeledBag, MilParams};
use firmil::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written as `run.json` next to a command's outputs.
#[derive(Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub config: &'a C,
    pub inputs: Vec<InputHash>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::File { path: path.into(), source: Box::new(e.into()) })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn hash_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<Vec<InputHash>> {
    paths.into_iter().map(|p| Ok(InputHash { path: p.to_path_buf(), sha256: sha256_file(p)? })).collect()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::File { path: path.into(), source: Box::new(e.into()) })
}

pub fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

/// Manifest plus the paths of every bag it lists.
pub struct Dataset {
    pub path: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        Ok(Self { path: path.to_path_buf(), manifest })
    }

    pub fn bag_path(&self, bag: &Path) -> PathBuf {
        if bag.is_absolute() {
            bag.to_path_buf()
        } else {
            base_dir(&self.path).join(bag)
        }
    }

    pub fn labeled(&self, split: Split) -> Result<Vec<LabeledBag>> {
        self.manifest.load_split(base_dir(&self.path), split)?.iter().map(LabeledBag::from_bag).collect()
    }

    /// The manifest file followed by every bag file.
    pub fn input_paths(&self) -> Vec<PathBuf> {
        std::iter::once(self.path.clone())
            .chain(self.manifest.entries.iter().map(|e| self.bag_path(&e.bag)))
            .collect()
    }
}

/// A single checkpoint or an AUROC-weighted ensemble.
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Single(MilParams),
    Ensemble(Ensemble),
}

impl Model {
    /// `.json` files are ensemble manifests; anything else is a checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            let manifest = EnsembleManifest::load(path)?;
            Ok(Model::Ensemble(Ensemble::from_manifest(&manifest, base_dir(path))?))
        } else {
            Ok(Model::Single(read_checkpoint(path)?.params))
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Single(p) => p.arch.input_dim,
            Model::Ensemble(e) => e.input_dim(),
        }
    }

    pub fn predict(&self, x: &firmil::linalg::Matrix) -> Result<AttentionResult> {
        match self {
            Model::Single(p) => predict(p, x),
            Model::Ensemble(e) => e.predict_attention(x),
        }
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.input_dim() != dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: dim });
        }
        Ok(())
    }
}
