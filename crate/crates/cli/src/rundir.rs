//! Run directory layout, locking and provenance headers.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gradex::digest::{from_hex, to_hex, Digest};

pub const CONFIG_FILE: &str = "config.toml";
pub const CORPUS_FILE: &str = "corpus.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const META_SUMMARY_FILE: &str = "meta_train.txt";
pub const CACHE_FILE: &str = "cache.bin";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const REPORT_FILE: &str = "report.md";
pub const BENCH_DIR: &str = "bench";
const LOCK_FILE: &str = ".gradex.lock";

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn selection_file(method: &str) -> String {
        format!("selection_{method}.txt")
    }

    /// Fails with a pointer to the producing stage when `name` is absent.
    pub fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("{} not found in {}: run `gradex {stage}` first", name, self.root.display());
        }
        Ok(p)
    }

    /// Takes exclusive ownership of the directory until the guard drops.
    pub fn lock(&self) -> Result<LockGuard> {
        fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        let path = self.path(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow::anyhow!(
                    "{} is locked by another gradex command (remove {} if that command is gone)",
                    self.root.display(),
                    path.display()
                )
            } else {
                anyhow::Error::new(e).context(format!("creating {}", path.display()))
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(LockGuard { path })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial artifact.
    pub fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let dest = self.path(name);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = dest.with_extension("partial");
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &dest).with_context(|| format!("renaming to {}", dest.display()))?;
        Ok(())
    }
}

pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// `# key: value` header lines for text artifacts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance(pub BTreeMap<String, String>);

impl Provenance {
    pub fn new() -> Self {
        Provenance::default()
    }

    pub fn digest(mut self, key: &str, d: &Digest) -> Self {
        self.0.insert(key.to_string(), to_hex(d));
        self
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
    }

    /// Collects the `# key: value` lines of a text artifact.
    pub fn read(path: &Path) -> Result<Provenance> {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let mut map = BTreeMap::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if let Some((k, v)) = line.strip_prefix("# ").and_then(|rest| rest.split_once(": ")) {
                map.insert(k.to_string(), v.to_string());
            }
        }
        Ok(Provenance(map))
    }

    pub fn get_digest(&self, key: &str) -> Option<Digest> {
        self.0.get(key).and_then(|v| from_hex(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let guard = run.lock().unwrap();
        assert!(run.lock().is_err());
        drop(guard);
        assert!(run.lock().is_ok());
    }

    #[test]
    fn provenance_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Provenance::new().digest("config", &[3; 32]).digest("corpus", &[4; 32]);
        let path = dir.path().join("a.csv");
        fs::write(&path, format!("{}x,y\n1,2\n", p.render())).unwrap();
        let back = Provenance::read(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.get_digest("corpus"), Some([4; 32]));
    }
}
