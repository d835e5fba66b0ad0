//! Append-only record of every artifact a run produced.
//!
//! One line per record: `<stage> seed <u64>`, `<stage> i0 <value>` or
//! `<stage> output <relative path> <kind> sha256:<hex>`. Appends hold an
//! exclusive lock on the file, so concurrent commands never interleave lines.
//! Re-recording an identical line is a no-op, which keeps reruns byte-identical.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct OutputEntry {
    pub stage: String,
    pub path: String,
    pub kind: String,
    pub sha256: String,
}

pub struct Manifest {
    root: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a file followed by its `.hdr` sidecar, when it has one.
pub fn artifact_digest(path: &Path) -> std::io::Result<String> {
    let mut bytes = fs::read(path)?;
    if path.extension().is_some_and(|e| e == "raw") {
        bytes.extend(fs::read(crate::formats::sidecar(path))?);
    }
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            root: out_dir.to_path_buf(),
        }
    }

    pub fn path(&self) -> PathBuf {
        self.root.join(FILE_NAME)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lines(&self) -> CliResult<Vec<String>> {
        match fs::read_to_string(self.path()) {
            Ok(t) => Ok(t.lines().map(str::to_owned).collect()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(CliError::Io {
                context: format!("reading {}", self.path().display()),
                source: e,
            }),
        }
    }

    /// Appends the lines not already present, under an exclusive lock.
    fn append(&self, new_lines: &[String]) -> CliResult<()> {
        let path = self.path();
        let ctx = || format!("updating {}", path.display());
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(CliError::io(ctx()))?;
        file.lock().map_err(CliError::io(ctx()))?;
        let mut existing = String::new();
        file.seek(SeekFrom::Start(0)).map_err(CliError::io(ctx()))?;
        file.read_to_string(&mut existing).map_err(CliError::io(ctx()))?;
        let mut text = String::new();
        for line in new_lines {
            if !existing.lines().any(|l| l == line) && !text.lines().any(|l| l == line) {
                text.push_str(line);
                text.push('\n');
            }
        }
        file.write_all(text.as_bytes()).map_err(CliError::io(ctx()))?;
        file.unlock().map_err(CliError::io(ctx()))
    }

    pub fn record_run(&self, stage: &str, seed: u64, i0: f64) -> CliResult<()> {
        self.append(&[format!("{stage} seed {seed}"), format!("{stage} i0 {i0:?}")])
    }

    /// Records files (relative to the output dir) with their digests.
    pub fn record_outputs(&self, stage: &str, files: &[(String, &str)]) -> CliResult<()> {
        let mut lines = Vec::with_capacity(files.len());
        for (rel, kind) in files {
            let digest = artifact_digest(&self.root.join(rel)).map_err(CliError::io(format!("hashing {rel}")))?;
            lines.push(format!("{stage} output {rel} {kind} sha256:{digest}"));
        }
        self.append(&lines)
    }

    pub fn outputs(&self) -> CliResult<Vec<OutputEntry>> {
        let mut out = Vec::new();
        for line in self.lines()? {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if let [stage, "output", path, kind, digest] = cols[..] {
                out.push(OutputEntry {
                    stage: stage.into(),
                    path: path.into(),
                    kind: kind.into(),
                    sha256: digest.trim_start_matches("sha256:").into(),
                });
            }
        }
        Ok(out)
    }

    /// Values of `<stage> <key> <value>` records, oldest first.
    pub fn values(&self, stage: &str, key: &str) -> CliResult<Vec<String>> {
        Ok(self
            .lines()?
            .iter()
            .filter_map(|l| {
                let mut it = l.split_whitespace();
                (it.next() == Some(stage) && it.next() == Some(key)).then(|| it.next().unwrap_or("").to_string())
            })
            .collect())
    }

    /// Latest entry for `rel`, checked to exist on disk with the recorded digest.
    pub fn require(&self, rel: &str, hint: &str) -> CliResult<PathBuf> {
        let full = self.root.join(rel);
        let missing = |why: &str| CliError::Dependency {
            path: full.clone(),
            hint: format!("{why}; {hint}"),
        };
        let entry = self
            .outputs()?
            .into_iter()
            .rev()
            .find(|e| e.path == rel)
            .ok_or_else(|| missing("not listed in the manifest"))?;
        let digest = artifact_digest(&full).map_err(|_| missing("listed in the manifest but absent"))?;
        if digest != entry.sha256 {
            return Err(missing("contents differ from the manifest digest"));
        }
        Ok(full)
    }

    /// Listed outputs of `kind`, in manifest order without duplicates.
    pub fn listed(&self, kind: &str) -> CliResult<Vec<String>> {
        let mut paths: Vec<String> = Vec::new();
        for e in self.outputs()? {
            if e.kind == kind && !paths.contains(&e.path) {
                paths.push(e.path);
            }
        }
        Ok(paths)
    }
}

/// Fails early if `dir` cannot be created or written.
pub fn ensure_writable(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating output directory {}", dir.display())))?;
    let probe = dir.join(".write-probe");
    File::create(&probe)
        .and_then(|mut f| f.write_all(b"ok"))
        .and_then(|_| fs::remove_file(&probe))
        .map_err(CliError::io(format!(
            "output directory {} is not writable",
            dir.display()
        )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn identical_records_are_not_duplicated() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(dir.path());
        fs::write(dir.path().join("a.bin"), b"1").unwrap();
        for _ in 0..2 {
            m.record_run("simulate", 7, 1e5).unwrap();
            m.record_outputs("simulate", &[("a.bin".into(), "truth")]).unwrap();
        }
        let text = fs::read_to_string(m.path()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("simulate i0 100000.0"));
        assert_eq!(m.values("simulate", "seed").unwrap(), vec!["7"]);
        assert_eq!(m.listed("truth").unwrap(), vec!["a.bin"]);
    }

    #[test]
    fn require_checks_listing_presence_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(dir.path());
        let err = m.require("model/x.dec", "run fit-decomp").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("model/x.dec"));

        fs::create_dir(dir.path().join("model")).unwrap();
        fs::write(dir.path().join("model/x.dec"), b"v1").unwrap();
        m.record_outputs("fit-decomp", &[("model/x.dec".into(), "decomposer")])
            .unwrap();
        assert!(m.require("model/x.dec", "").is_ok());

        fs::write(dir.path().join("model/x.dec"), b"v2").unwrap();
        assert_eq!(m.require("model/x.dec", "").unwrap_err().exit_code(), 3);
        m.record_outputs("fit-decomp", &[("model/x.dec".into(), "decomposer")])
            .unwrap();
        assert!(m.require("model/x.dec", "").is_ok());
    }

    #[test]
    fn concurrent_appends_keep_whole_lines() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let root = root.clone();
                std::thread::spawn(move || {
                    let m = Manifest::new(&root);
                    for s in 0..20u64 {
                        m.record_run(&format!("stage{t}"), s, 1.0).unwrap();
                    }
                })
            })
            .collect();
        handles.into_iter().for_each(|h| h.join().unwrap());
        let text = fs::read_to_string(root.join(FILE_NAME)).unwrap();
        assert_eq!(text.lines().count(), 8 * 21);
        assert!(text.lines().all(|l| l.split_whitespace().count() == 3));
    }
}
