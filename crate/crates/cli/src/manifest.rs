//! Run manifest: everything needed to repeat a reconstruction exactly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dccvt::optimizer::{Normalization, OptimConfig};
use dccvt::pipeline::SiteLayout;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let hash = Sha256::digest(&bytes);
        Ok(Self {
            path: fs::canonicalize(path)?,
            sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
        })
    }

    /// Fails when the file changed since the digest was taken.
    pub fn verify(&self) -> Result<()> {
        let now = Self::of(&self.path)?;
        if now.sha256 != self.sha256 {
            bail!("{} changed since the manifest was written", self.path.display());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub reference: FileDigest,
    pub samples: usize,
    pub tau: f64,
}

/// File names inside the output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outputs {
    pub dir: PathBuf,
    pub mesh: String,
    pub loss_csv: String,
    pub sites: String,
    pub metrics: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub input: FileDigest,
    pub init: String,
    /// Grid files referenced by `init`.
    pub init_files: Vec<FileDigest>,
    pub normalize: bool,
    pub normalization: Normalization,
    pub layout: SiteLayout,
    pub optim: OptimConfig,
    pub eval: Option<EvalSettings>,
    pub outputs: Outputs,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn verify_inputs(&self) -> Result<()> {
        self.input.verify()?;
        for f in &self.init_files {
            f.verify()?;
        }
        if let Some(e) = &self.eval {
            e.reference.verify()?;
        }
        Ok(())
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.outputs.dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_sha256_hex() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, "abc").unwrap();
        let d = FileDigest::of(&p).unwrap();
        assert_eq!(d.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        d.verify().unwrap();
        fs::write(&p, "abd").unwrap();
        assert!(d.verify().is_err());
    }
}
