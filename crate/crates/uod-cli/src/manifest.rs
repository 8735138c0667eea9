//! Run manifests: every artifact-producing command writes exactly one
//! `manifest.json` alongside its outputs, capturing the command, the full
//! effective configuration, seeds, input/output paths, and content hashes
//! of the checkpoints it consumed or produced. A run is reproducible from
//! its manifest alone.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use uod::error::{Result, UodError};

/// A path plus, for regular files, the SHA-256 of its bytes.
#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    /// `None` for directories (their contents carry their own manifests).
    pub sha256: Option<String>,
}

/// Hex SHA-256 of a file's contents, streamed in chunks.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)
        .map_err(|e| UodError::data(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Effective configuration after defaults, config file, and flags.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_unix: u64,
    pub seconds: f64,
    #[serde(skip)]
    started: Instant,
}

impl RunManifest {
    /// Start a manifest for `command`, capturing the process argv and the
    /// wall-clock start time.
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: serde_json::Value::Null,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seconds: 0.0,
            started: Instant::now(),
        }
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config = serde_json::to_value(config)
            .map_err(|e| UodError::config(format!("config snapshot: {e}")))?;
        Ok(())
    }

    /// Record an input directory (not hashed; datasets are trees).
    pub fn input_dir(&mut self, path: &Path) {
        self.inputs.push(FileHash { path: path.display().to_string(), sha256: None });
    }

    /// Record and hash an input file (e.g. a consumed checkpoint).
    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: Some(sha256_file(path)?),
        });
        Ok(())
    }

    pub fn output_dir(&mut self, path: &Path) {
        self.outputs.push(FileHash { path: path.display().to_string(), sha256: None });
    }

    pub fn output_file(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileHash {
            path: path.display().to_string(),
            sha256: Some(sha256_file(path)?),
        });
        Ok(())
    }

    /// Stamp the elapsed time and write `manifest.json` into `out_dir`.
    pub fn write(mut self, out_dir: &Path) -> Result<()> {
        self.seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| UodError::config(format!("manifest encode: {e}")))?;
        fs::write(out_dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

/// Create `out` (and parents). A pre-existing non-empty directory is refused
/// unless `force` is set, so reruns cannot silently clobber artifacts.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(UodError::config(format!(
                "output path {} exists and is not a directory",
                out.display()
            )));
        }
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(UodError::config(format!(
                "output directory {} is not empty (pass --force to write into it)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lands_next_to_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::start("synth");
        m.config(&serde_json::json!({"seed": 7})).unwrap();
        m.seeds.push(7);
        m.output_dir(&dir.path().join("d0"));
        m.write(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["command"], "synth");
        assert_eq!(v["config"]["seed"], 7);
        assert!(v["seconds"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn out_dir_policy_requires_force_for_non_empty() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        prepare_out_dir(&out, false).unwrap();
        // Empty existing dir: fine without force.
        prepare_out_dir(&out, false).unwrap();
        fs::write(out.join("left-over"), "x").unwrap();
        let err = prepare_out_dir(&out, false).unwrap_err();
        assert!(matches!(err, UodError::Config(_)), "{err}");
        prepare_out_dir(&out, true).unwrap();
        // A plain file in place of the directory is refused outright.
        let file = dir.path().join("file");
        fs::write(&file, "x").unwrap();
        assert!(prepare_out_dir(&file, true).is_err());
    }
}
