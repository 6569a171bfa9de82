//! Run directories: write-once artifacts plus a manifest of their digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::errors::{tagged, Tagged};

pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// External inputs by role, with their digests.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub artifacts: BTreeMap<String, Artifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub sha256: String,
    pub stage: String,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Opens `root`, creating it with the config and an empty manifest if
    /// needed. A manifest written under another config is a staleness error.
    pub fn open(root: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display())).tag("io")?;
        let manifest_path = root.join(MANIFEST);
        let hash = config.hash();
        if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path).tag("io")?;
            let manifest: Manifest = toml::from_str(&text)
                .map_err(|e| tagged("manifest", format!("{}: {}", manifest_path.display(), e.message())))?;
            if manifest.config_hash != hash {
                return Err(tagged(
                    "stale",
                    format!(
                        "{} was produced under config {} but the current config (seed {}) hashes to {}; use a fresh --run-dir",
                        root.display(),
                        short(&manifest.config_hash),
                        config.seed,
                        short(&hash)
                    ),
                ));
            }
            return Ok(Self {
                root: root.to_owned(),
                manifest,
            });
        }
        let dir = Self {
            root: root.to_owned(),
            manifest: Manifest {
                config_hash: hash,
                seed: config.seed,
                ..Default::default()
            },
        };
        dir.put(CONFIG, config.canonical().as_bytes())?;
        dir.save_manifest()?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn has(&self, name: &str) -> bool {
        self.root.join(name).exists()
    }

    /// Names of recorded artifacts.
    pub fn artifacts(&self) -> impl Iterator<Item = &str> {
        self.manifest.artifacts.keys().map(String::as_str)
    }

    /// Reads an artifact after checking it against the manifest.
    /// `producer` names the command that creates it.
    pub fn read(&self, name: &str, producer: &str) -> Result<Vec<u8>> {
        let path = self.root.join(name);
        if !path.exists() {
            return Err(tagged(
                "missing-artifact",
                format!("{name} not found in {}; run `kgeu {producer}` first", self.root.display()),
            ));
        }
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display())).tag("io")?;
        match self.manifest.artifacts.get(name) {
            None => Err(tagged("stale", format!("{name} is not recorded in the manifest of {}", self.root.display()))),
            Some(a) if a.sha256 != digest(&bytes) => Err(tagged(
                "stale",
                format!("{name} no longer matches the digest recorded by `{}`", a.stage),
            )),
            Some(_) => Ok(bytes),
        }
    }

    pub fn read_string(&self, name: &str, producer: &str) -> Result<String> {
        String::from_utf8(self.read(name, producer)?).map_err(|_| tagged("manifest", format!("{name} is not UTF-8")))
    }

    /// Writes a new artifact. Rewriting identical bytes is a no-op; any other
    /// existing content is never replaced.
    pub fn write(&mut self, name: &str, bytes: &[u8], stage: &str) -> Result<()> {
        let sha = digest(bytes);
        let path = self.root.join(name);
        if path.exists() {
            let old = fs::read(&path).tag("io")?;
            if old != bytes {
                return Err(tagged(
                    "exists",
                    format!("{name} already exists in {} with different content; use a fresh --run-dir", self.root.display()),
                ));
            }
        } else {
            self.put(name, bytes)?;
        }
        self.manifest.artifacts.insert(
            name.to_owned(),
            Artifact {
                sha256: sha.clone(),
                stage: stage.to_owned(),
            },
        );
        self.save_manifest()?;
        println!("{name}  sha256:{}", short(&sha));
        Ok(())
    }

    pub fn record_input(&mut self, role: &str, sha: String) -> Result<()> {
        self.manifest.inputs.insert(role.to_owned(), sha);
        self.save_manifest()
    }

    fn put(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        let tmp = self.root.join(format!(".{name}.partial"));
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display())).tag("io")?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display())).tag("io")
    }

    fn save_manifest(&self) -> Result<()> {
        let text = toml::to_string(&self.manifest).expect("manifest serializes");
        let path = self.root.join(MANIFEST);
        let tmp = self.root.join(format!(".{MANIFEST}.partial"));
        fs::write(&tmp, text).tag("io")?;
        fs::rename(&tmp, &path).tag("io")
    }
}

pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
