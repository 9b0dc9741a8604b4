//! Errors, the working-directory lock and the run-log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage} needs {} which does not exist; run `{needs}` first", path.display())]
    Dependency { stage: &'static str, path: PathBuf, needs: String },
    #[error("{} exists; another stage is running in this directory (delete the file if it is stale)", .0.display())]
    Locked(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] cardiocap::Error),
}

impl CliError {
    pub fn core(e: cardiocap::Error) -> Self {
        CliError::Core(e)
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        use cardiocap::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Core(E::Config(_) | E::Argument(_) | E::Compatibility(_)) => 2,
            CliError::Core(e) if e.is_numeric() || matches!(e, E::Invariant(_)) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Fails with a dependency error when an upstream artifact is missing.
pub fn require(path: &Path, stage: &'static str, needs: impl Into<String>) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Dependency { stage, path: path.to_path_buf(), needs: needs.into() })
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("artifact serialises");
    write_file(path, json + "\n")
}

/// Held for the lifetime of a stage; removed on drop.
#[derive(Debug)]
pub struct Lock(PathBuf);

impl Lock {
    pub fn acquire(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path.to_path_buf()))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path.to_path_buf())),
            Err(e) => Err(CliError::io(path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn git_describe(dir: &Path) -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .current_dir(dir)
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Serialize)]
struct Entry<'a> {
    stage: &'a str,
    started_unix: f64,
    wall_time_s: f64,
    seed: u64,
    config_hash: &'a str,
    git_describe: String,
    artifacts: &'a [PathBuf],
    trajectory: &'a serde_json::Value,
}

/// Collects what a stage did and appends one JSON line when finished.
#[derive(Debug)]
pub struct StageLog {
    pub stage: String,
    pub seed: u64,
    pub artifacts: Vec<PathBuf>,
    pub trajectory: serde_json::Value,
    started: SystemTime,
    clock: Instant,
}

impl StageLog {
    pub fn start(stage: impl Into<String>, seed: u64) -> Self {
        StageLog { stage: stage.into(), seed, artifacts: Vec::new(), trajectory: serde_json::Value::Null, started: SystemTime::now(), clock: Instant::now() }
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn finish(self, log_file: &Path, config_hash: &str, repo_dir: &Path) -> Result<()> {
        let entry = Entry {
            stage: &self.stage,
            started_unix: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            wall_time_s: self.clock.elapsed().as_secs_f64(),
            seed: self.seed,
            config_hash,
            git_describe: git_describe(repo_dir),
            artifacts: &self.artifacts,
            trajectory: &self.trajectory,
        };
        if let Some(parent) = log_file.parent() {
            create_dir(parent)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(log_file).map_err(|e| CliError::io(log_file, e))?;
        writeln!(f, "{}", serde_json::to_string(&entry).expect("log entry serialises")).map_err(|e| CliError::io(log_file, e))
    }
}
