//! Run manifests, output-directory locking and artifact bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LOCK_FILE: &str = ".smoothlab.lock";

/// Flat `key=value` record of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub kind: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub binary_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Relative to the output directory, sorted.
    pub artifacts: Vec<PathBuf>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("kind={}\n", self.kind));
        out.push_str(&format!("config_sha256={}\n", self.config_sha256));
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        out.push_str(&format!("seeds={}\n", seeds.join(",")));
        out.push_str(&format!("binary_version={}\n", self.binary_version));
        out.push_str(&format!("started_unix={}\n", self.started_unix));
        out.push_str(&format!("finished_unix={}\n", self.finished_unix));
        out.push_str(&format!("artifact_count={}\n", self.artifacts.len()));
        for (i, a) in self.artifacts.iter().enumerate() {
            out.push_str(&format!("artifact.{i}={}\n", a.display()));
        }
        for (k, v) in &self.metrics {
            out.push_str(&format!("metric.{k}={v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        let mut count = None;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("manifest line {}", i + 1), "expected key=value"))?;
            let bad = |what: &str| Error::format(format!("manifest.{k}"), format!("invalid {what}"));
            match k {
                "kind" => m.kind = v.to_string(),
                "config_sha256" => m.config_sha256 = v.to_string(),
                "seeds" => {
                    m.seeds = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',')
                            .map(|s| s.parse().map_err(|_| bad("seed")))
                            .collect::<Result<_>>()?
                    }
                }
                "binary_version" => m.binary_version = v.to_string(),
                "started_unix" => m.started_unix = v.parse().map_err(|_| bad("timestamp"))?,
                "finished_unix" => m.finished_unix = v.parse().map_err(|_| bad("timestamp"))?,
                "artifact_count" => count = Some(v.parse::<usize>().map_err(|_| bad("count"))?),
                _ => {
                    if let Some(idx) = k.strip_prefix("artifact.") {
                        let idx: usize = idx.parse().map_err(|_| bad("artifact index"))?;
                        if idx != m.artifacts.len() {
                            return Err(bad("artifact order"));
                        }
                        m.artifacts.push(PathBuf::from(v));
                    } else if let Some(name) = k.strip_prefix("metric.") {
                        m.metrics
                            .insert(name.to_string(), v.parse().map_err(|_| bad("metric"))?);
                    } else {
                        return Err(Error::format(format!("manifest.{k}"), "unknown key"));
                    }
                }
            }
        }
        if count != Some(m.artifacts.len()) {
            return Err(Error::format("manifest.artifact_count", "does not match artifact lines"));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Crate version plus a content hash of the running executable.
pub fn binary_version() -> String {
    let hash = std::env::current_exe()
        .ok()
        .and_then(|p| fs::read(p).ok())
        .map(|b| sha256_hex(&b)[..12].to_string())
        .unwrap_or_else(|| "unknown".into());
    format!("{}+{hash}", env!("CARGO_PKG_VERSION"))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(
                "experiment.output",
                format!(
                    "{} is in use by another run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Output directory of one run: holds the lock and records artifacts and
/// metrics until [`RunContext::finish`] writes the manifest.
pub struct RunContext {
    dir: PathBuf,
    _lock: DirLock,
    manifest: RunManifest,
}

impl RunContext {
    pub fn open(dir: &Path, kind: &str, config_text: &str, seeds: &[u64]) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = DirLock::acquire(dir)?;
        Ok(RunContext {
            dir: dir.to_path_buf(),
            _lock: lock,
            manifest: RunManifest {
                kind: kind.to_string(),
                config_sha256: sha256_hex(config_text.as_bytes()),
                seeds: seeds.to_vec(),
                binary_version: binary_version(),
                started_unix: unix_now(),
                ..RunManifest::default()
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }

    /// Writes a text artifact at `rel` and records it.
    pub fn write(&mut self, rel: impl AsRef<Path>, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(rel.as_ref());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.record(&path)?;
        Ok(path)
    }

    /// Records a file already written under the output directory.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(&self.dir)
            .map_err(|_| Error::Contract(format!("{} is outside the run directory", path.display())))?
            .to_path_buf();
        if !self.manifest.artifacts.contains(&rel) {
            self.manifest.artifacts.push(rel);
        }
        Ok(())
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.manifest.metrics.insert(name.into(), value);
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.artifacts.sort();
        self.manifest.finished_unix = unix_now();
        write_atomic(&self.dir.join(MANIFEST_FILE), self.manifest.to_text().as_bytes())?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut m = RunManifest {
            kind: "train".into(),
            config_sha256: "ab".into(),
            seeds: vec![1, 2],
            binary_version: "0.1.0+x".into(),
            started_unix: 5,
            finished_unix: 9,
            artifacts: vec!["a.csv".into(), "seed-1/b.svg".into()],
            metrics: BTreeMap::new(),
        };
        m.metrics.insert("seed-1.test_acc".into(), 0.25);
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
        assert!(RunManifest::parse("kind=x\nartifact_count=2\nartifact.0=a\n").is_err());
        assert!(RunManifest::parse("nonsense\n").is_err());
    }

    #[test]
    fn lock_excludes_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::open(dir.path(), "train", "", &[1]).unwrap();
        assert!(matches!(
            RunContext::open(dir.path(), "train", "", &[1]),
            Err(Error::Config { .. })
        ));
        ctx.finish().unwrap();
        assert!(!dir.path().join(LOCK_FILE).exists());
        RunContext::open(dir.path(), "train", "", &[1]).unwrap();
    }

    #[test]
    fn artifacts_are_listed_and_exist() {
        let dir = tempfile::tempdir().unwrap();
        let mut ctx = RunContext::open(dir.path(), "train", "cfg", &[3]).unwrap();
        ctx.write("seed-3/z.csv", "a\n").unwrap();
        ctx.write("a.csv", "b\n").unwrap();
        ctx.metric("x", 1.5);
        let m = ctx.finish().unwrap();
        assert_eq!(m.artifacts, vec![PathBuf::from("a.csv"), PathBuf::from("seed-3/z.csv")]);
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        for a in &loaded.artifacts {
            assert!(dir.path().join(a).exists());
        }
        assert_eq!(loaded.config_sha256, sha256_hex(b"cfg"));
    }
}
