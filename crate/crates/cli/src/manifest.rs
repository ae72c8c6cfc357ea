//! Output directory bookkeeping and the per-run manifest.

use std::path::{Path, PathBuf};

use facefit_core::image::{write_mask_png, write_png};
use facefit_core::pipeline::PipelineConfig;
use facefit_core::{Image, Mask, UvTexture};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult, Command};

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a Command,
    seed: u64,
    config_hash: String,
    config: &'a PipelineConfig,
    inputs: &'a [FileRecord],
    outputs: &'a [FileRecord],
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn config_hash(cfg: &PipelineConfig) -> CliResult<String> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

/// Writes artifacts under one directory and records their digests.
pub struct Recorder {
    dir: PathBuf,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

impl Recorder {
    pub fn new(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        Ok(Recorder {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Hashes an input file; a missing file is a data error.
    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.inputs.push(FileRecord {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn record(&mut self, name: &str) -> CliResult<()> {
        let bytes = std::fs::read(self.path(name))?;
        self.outputs.push(FileRecord {
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        std::fs::write(self.path(name), bytes)?;
        self.record(name)
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    pub fn text(&mut self, name: &str, text: &str) -> CliResult<()> {
        self.bytes(name, text.as_bytes())
    }

    pub fn image(&mut self, name: &str, image: &Image) -> CliResult<()> {
        write_png(image, &self.path(name))?;
        self.record(name)
    }

    pub fn mask(&mut self, name: &str, mask: &Mask) -> CliResult<()> {
        write_mask_png(mask, &self.path(name))?;
        self.record(name)
    }

    /// `stem.png` plus `stem_visibility.png`.
    pub fn texture(&mut self, stem: &str, tex: &UvTexture) -> CliResult<()> {
        tex.write_png(&self.dir, stem)?;
        self.record(&format!("{stem}.png"))?;
        self.record(&format!("{stem}_visibility.png"))
    }

    pub fn finish(self, command: &Command, seed: u64, cfg: &PipelineConfig) -> CliResult<()> {
        let manifest = Manifest {
            tool: "facefit",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config_hash: config_hash(cfg)?,
            config: cfg,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.path("manifest.json"), text)?;
        Ok(())
    }
}
