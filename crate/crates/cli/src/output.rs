//! Run outputs: artifacts under `--out-dir`, their hashes in `manifest.json`,
//! and the resolved configuration of each command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub bytes: u64,
    /// Command that last wrote the file.
    pub command: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// Keyed by path relative to the output directory when possible.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub struct OutputDir {
    root: PathBuf,
    command: String,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>, command: &str) -> CliResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| CliError::input(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root,
            command: command.to_string(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `name` under the output directory; absolute names are kept as is.
    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records a file written by the caller so it lands in the manifest.
    pub fn record(&mut self, path: impl Into<PathBuf>) {
        self.written.push(path.into());
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CliResult<PathBuf> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text)?;
        self.record(path.clone());
        Ok(path)
    }

    /// Writes `<command>_config.json` with the fully resolved settings.
    pub fn write_config(&mut self, config: &impl Serialize) -> CliResult<PathBuf> {
        let name = format!("{}_config.json", self.command.replace('-', "_"));
        self.write_json(&name, config)
    }

    /// Hashes every recorded artifact into `manifest.json`, keeping entries
    /// from earlier commands that wrote to the same directory.
    pub fn finish(self) -> CliResult<Manifest> {
        let manifest_path = self.root.join(MANIFEST);
        let mut manifest = match fs::read(&manifest_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
            Err(_) => Manifest::default(),
        };
        manifest.tool = "xagg".into();
        manifest.version = env!("CARGO_PKG_VERSION").into();
        for path in &self.written {
            let key = path
                .strip_prefix(&self.root)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/");
            let entry = ArtifactEntry {
                sha256: sha256_file(path)?,
                bytes: fs::metadata(path)?.len(),
                command: self.command.clone(),
            };
            manifest.artifacts.insert(key, entry);
        }
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&manifest_path, text)?;
        Ok(manifest)
    }
}
