//! Run manifests: a JSON record of how every artifact was produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub arguments: Vec<String>,
    /// Effective configuration, defaults included.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    pub wall_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {} for hashing", path.display()))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

/// Collects manifest fields while a subcommand runs.
pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        ManifestBuilder {
            started: Instant::now(),
            manifest: RunManifest {
                tool: "opf-learn".to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                arguments: std::env::args().collect(),
                config,
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                artifacts: Vec::new(),
                wall_seconds: 0.0,
            },
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.manifest.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(&mut self, digest: FileDigest) -> &mut Self {
        self.manifest.inputs.push(digest);
        self
    }

    pub fn input_file(&mut self, path: &Path) -> Result<&mut Self> {
        let digest = digest_file(path)?;
        Ok(self.input(digest))
    }

    pub fn artifact(&mut self, path: &Path) -> Result<&mut Self> {
        let digest = digest_file(path)?;
        self.manifest.artifacts.push(digest);
        Ok(self)
    }

    /// Stamps the wall time and writes the manifest to `path`.
    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.manifest.wall_seconds = self.started.elapsed().as_secs_f64();
        let w = crate::io::create(path)?;
        serde_json::to_writer_pretty(w, &self.manifest)?;
        Ok(())
    }
}

/// Manifest location for a single-file artifact: `<artifact>.manifest.json`.
pub fn beside(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

/// Reads the manifest written next to `artifact`, if there is one.
pub fn read_beside(artifact: &Path) -> Option<RunManifest> {
    let text = std::fs::read_to_string(beside(artifact)).ok()?;
    serde_json::from_str(&text).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_sits_beside_its_artifact() {
        assert_eq!(beside(Path::new("out/data.csv")), PathBuf::from("out/data.csv.manifest.json"));
        assert_eq!(beside(Path::new("m.bin")), PathBuf::from("m.bin.manifest.json"));
    }

    #[test]
    fn written_manifest_reads_back() {
        let dir = tempfile::TempDir::new().unwrap();
        let artifact = dir.path().join("a.txt");
        std::fs::write(&artifact, "hello").unwrap();
        let mut builder = ManifestBuilder::new("test", serde_json::json!({ "k": 1 }));
        builder.seed("sampler", 9).artifact(&artifact).unwrap();
        builder.write(&beside(&artifact)).unwrap();
        let m = read_beside(&artifact).unwrap();
        assert_eq!(m.tool, "opf-learn");
        assert_eq!(m.seeds["sampler"], 9);
        assert_eq!(m.artifacts[0].sha256, sha256_hex(b"hello"));
        assert_eq!(m.config["k"], 1);
    }
}
