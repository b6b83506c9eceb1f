//! One command's output directory: resolved config, metrics lines,
//! checkpoints and caches, guarded by a lock file.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use memcom::cacheio::write_atomic;
use memcom::Error;

use crate::CliError;

/// Overrides the directory run names are resolved against.
pub const RUN_ROOT_ENV: &str = "MEMCOM_RUN_ROOT";
pub const LOCK_FILE: &str = ".lock";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CONFIG_FILE: &str = "config.resolved";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// `name` under the run root; absolute paths are used as given.
pub fn resolve(name: &Path) -> PathBuf {
    run_root().join(name)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    /// Derived from the command and resolved config, so replays share it.
    pub id: String,
    metrics: File,
}

impl RunDir {
    /// Claim `path` for one command. A non-empty directory is only reused
    /// with `overwrite`, and never while another command holds its lock.
    pub fn create(path: PathBuf, overwrite: bool, command: &str, config: &str, invocation: Value) -> Result<Self, CliError> {
        if path.join(LOCK_FILE).exists() {
            return Err(CliError::Usage(format!("{} is locked by another command", path.display())));
        }
        let occupied = fs::read_dir(&path).map(|mut d| d.next().is_some()).unwrap_or(false);
        if occupied {
            if !overwrite {
                return Err(CliError::Usage(format!(
                    "run directory {} already exists; pass --overwrite to replace it",
                    path.display()
                )));
            }
            fs::remove_dir_all(&path).map_err(io(&path))?;
        }
        for sub in ["", "checkpoints", "caches"] {
            let p = path.join(sub);
            fs::create_dir_all(&p).map_err(io(&p))?;
        }
        let lock = path.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Usage(format!("{} is locked by another command", path.display()))
            } else {
                io(&lock)(e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());

        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(config.as_bytes());
        h.update([0]);
        h.update(invocation.to_string().as_bytes());
        let id: String = h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();

        let dir = RunDir {
            metrics: OpenOptions::new()
                .create(true)
                .append(true)
                .open(path.join(METRICS_FILE))
                .map_err(io(&path))?,
            path,
            id,
        };
        dir.write(CONFIG_FILE, config.as_bytes())?;
        let inv = json!({ "command": command, "run": dir.id, "args": invocation });
        dir.write("invocation.json", pretty(&inv).as_bytes())?;
        Ok(dir)
    }

    /// Append one metrics line. The wall-clock time lives only in `ts`.
    pub fn record(&mut self, kind: &str, payload: Value) -> Result<(), CliError> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        let mut line = Map::new();
        line.insert("ts".into(), json!(ts));
        line.insert("run".into(), json!(self.id));
        line.insert("kind".into(), json!(kind));
        if let Value::Object(fields) = payload {
            line.extend(fields);
        }
        let path = self.path.join(METRICS_FILE);
        writeln!(self.metrics, "{}", Value::Object(line)).map_err(io(&path))?;
        self.metrics.flush().map_err(io(&path))
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        Ok(write_atomic(&self.path.join(name), bytes)?)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.path.join("checkpoints").join(name)
    }

    pub fn cache(&self, name: &str) -> PathBuf {
        self.path.join("caches").join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

pub fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value");
    s.push('\n');
    s
}
