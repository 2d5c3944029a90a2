use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// A prerequisite produced by another subcommand is not on disk.
#[derive(Debug)]
pub struct MissingArtifact {
    pub path: PathBuf,
    pub producer: &'static str,
}

impl fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "missing {}; run `tablediff {}` with the same config first",
            self.path.display(),
            self.producer
        )
    }
}

impl std::error::Error for MissingArtifact {}

pub fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(MissingArtifact { path, producer }.into())
    }
}

/// First 12 hex digits of the SHA-256 of the JSON encoding of `parts`.
pub fn content_hash<T: Serialize>(parts: &T) -> String {
    let bytes = serde_json::to_vec(parts).expect("config values serialize");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Artifact directory names under one run directory.
pub struct Layout {
    pub root: PathBuf,
    pub data: PathBuf,
    pub vae: PathBuf,
    pub latents: PathBuf,
    pub dit: PathBuf,
}

impl Layout {
    pub fn new(root: &Path, cfg: &RunConfig) -> Result<Self> {
        let dit_cfg = cfg.dit_config()?;
        let data = content_hash(&cfg.data);
        let vae = content_hash(&(&cfg.data, &cfg.vae));
        let dit = content_hash(&(&cfg.data, &cfg.vae, &cfg.schedule, &dit_cfg, &cfg.train));
        Ok(Self {
            root: root.to_path_buf(),
            data: root.join(format!("data-{data}")),
            vae: root.join(format!("vae-{vae}")),
            latents: root.join(format!("latents-{vae}")),
            dit: root.join(format!("dit-{dit}")),
        })
    }

    pub fn vae_stem(&self) -> PathBuf {
        self.vae.join("vae")
    }

    pub fn latent_file(&self) -> PathBuf {
        self.latents.join("latents.tdlc")
    }

    pub fn checkpoint_stem(&self) -> PathBuf {
        self.dit.join("checkpoint")
    }
}

/// Directory written under a temporary name and renamed into place once
/// complete, so a present artifact is always a finished one.
pub struct Staging {
    pub dir: PathBuf,
    target: PathBuf,
}

impl Staging {
    pub fn begin(target: &Path) -> Result<Self> {
        let mut name = target.file_name().expect("artifact has a name").to_os_string();
        name.push(".partial");
        let dir = target.with_file_name(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
        })
    }

    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.dir, &self.target).with_context(|| format!("finalizing {}", self.target.display()))?;
        Ok(self.target)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    tablediff::image_io::write_atomic(path, text.as_bytes())?;
    Ok(())
}
