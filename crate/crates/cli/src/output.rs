//! Output directory handling: lockfile, tracked writes, manifest.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where an effective setting came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Flag,
    File,
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub library_version: String,
    pub wall_time_seconds: f64,
    pub deterministic: bool,
    /// Origin of each setting a flag can override.
    pub sources: BTreeMap<String, Source>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

/// An output directory owned by one command invocation.
///
/// Files written through it are removed again unless [`RunDir::finish`] is
/// reached.
pub struct RunDir {
    dir: PathBuf,
    written: Vec<PathBuf>,
    created: bool,
    done: bool,
}

impl RunDir {
    pub fn open(dir: &Path, force: bool) -> CliResult<Self> {
        let created = !dir.exists();
        if !created {
            let occupied = fs::read_dir(dir)
                .map_err(|e| CliError::io(dir, e))?
                .filter_map(|e| e.ok())
                .any(|e| e.file_name() != LOCK_FILE);
            if occupied && !force {
                return Err(CliError::Exists(dir.display().to_string()));
            }
        }
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let lock = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(CliError::Locked(dir.display().to_string()));
            }
            Err(e) => return Err(CliError::io(&lock, e)),
        }
        if force {
            let _ = fs::remove_file(dir.join(MANIFEST_FILE));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            created,
            done: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        hetnoise::checkpoint::write_atomic(&path, bytes)?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> CliResult<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::io(self.path(name), e.into_error()))?;
        self.write_bytes(name, &bytes)
    }

    /// Writes the manifest and keeps every output.
    pub fn finish(
        mut self,
        command: &str,
        started: Instant,
        config: &ExperimentConfig,
        seed: u64,
        deterministic: bool,
        sources: BTreeMap<String, Source>,
        inputs: Vec<String>,
    ) -> CliResult<Manifest> {
        let mut outputs: Vec<String> = self
            .written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        outputs.push(MANIFEST_FILE.to_string());
        let manifest = Manifest {
            command: command.to_string(),
            config_hash: config.hash(),
            seed,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
            deterministic,
            sources,
            inputs,
            outputs,
            config: config.clone(),
        };
        self.write_json(MANIFEST_FILE, &manifest)?;
        self.done = true;
        Ok(manifest)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.done {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
        let _ = fs::remove_file(self.dir.join(LOCK_FILE));
        if !self.done && self.created {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropped_run_removes_its_files() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        {
            let mut run = RunDir::open(&dir, false).unwrap();
            run.write_bytes("a.txt", b"x").unwrap();
            assert!(dir.join("a.txt").exists());
        }
        assert!(!dir.exists());
    }

    #[test]
    fn occupied_directory_needs_force() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("old.txt"), "x").unwrap();
        assert!(matches!(
            RunDir::open(tmp.path(), false),
            Err(CliError::Exists(_))
        ));
        let run = RunDir::open(tmp.path(), true).unwrap();
        drop(run);
        assert!(tmp.path().join("old.txt").exists());
    }

    #[test]
    fn second_writer_is_locked_out() {
        let tmp = tempfile::tempdir().unwrap();
        let _first = RunDir::open(tmp.path(), true).unwrap();
        assert!(matches!(
            RunDir::open(tmp.path(), true),
            Err(CliError::Locked(_))
        ));
    }

    #[test]
    fn finished_run_keeps_outputs_and_releases_lock() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = RunDir::open(tmp.path(), false).unwrap();
        run.write_csv("t.csv", &["a", "b"], &[vec!["1".into(), "2".into()]])
            .unwrap();
        let m = run
            .finish(
                "test",
                Instant::now(),
                &ExperimentConfig::default(),
                3,
                true,
                BTreeMap::new(),
                vec![],
            )
            .unwrap();
        assert_eq!(m.outputs, vec!["t.csv", MANIFEST_FILE]);
        assert_eq!(
            fs::read_to_string(tmp.path().join("t.csv")).unwrap(),
            "a,b\n1,2\n"
        );
        assert!(!tmp.path().join(LOCK_FILE).exists());
    }
}
