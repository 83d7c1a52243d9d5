//! Output directories and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aird::synth::dataset::sha256_hex;
use aird::Error;
use serde::Serialize;

pub const RUN_MANIFEST: &str = "manifest.json";
pub const OUT_ROOT_ENV: &str = "AIRD_OUT_ROOT";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Config(_) | Error::MissingArtifact(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    verb: &'a str,
    version: &'a str,
    seed: u64,
    config: serde_json::Value,
    inputs: &'a BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
    wall_seconds: f64,
}

/// A run under construction. Artifacts go to a staging directory that is
/// renamed onto the output path once the manifest is written, so the
/// output never holds a partial run.
pub struct RunDir {
    verb: &'static str,
    out: PathBuf,
    staging: PathBuf,
    force: bool,
    started: Instant,
    inputs: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(verb: &'static str, out: PathBuf, force: bool) -> CliResult<Self> {
        if out.exists() && !force {
            return Err(CliError::Usage(format!(
                "output directory {} already exists; pass --force to overwrite it",
                out.display()
            )));
        }
        let name = out
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("invalid output path {}", out.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = out.parent().map(Path::to_path_buf).unwrap_or_default();
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(&parent).map_err(|e| io_err(&parent, e))?;
        }
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| io_err(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| io_err(&staging, e))?;
        Ok(Self {
            verb,
            out,
            staging,
            force,
            started: Instant::now(),
            inputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs
            .insert(name.to_string(), path.display().to_string());
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, v: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(v).map_err(Error::from)?;
        self.write(name, text + "\n")
    }

    pub fn finish<C: Serialize>(self, seed: u64, config: &C) -> CliResult<PathBuf> {
        let mut artifacts = BTreeMap::new();
        collect_checksums(&self.staging, &self.staging, &mut artifacts)?;
        let manifest = Manifest {
            verb: self.verb,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: serde_json::to_value(config).map_err(Error::from)?,
            inputs: &self.inputs,
            artifacts,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        self.write_json(RUN_MANIFEST, &manifest)?;
        if self.out.exists() {
            debug_assert!(self.force);
            fs::remove_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        }
        fs::rename(&self.staging, &self.out).map_err(|e| io_err(&self.out, e))?;
        Ok(self.out.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

fn collect_checksums(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> CliResult<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let p = entry.path();
        if p.is_dir() {
            collect_checksums(root, &p, out)?;
        } else {
            let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
            let rel = p.strip_prefix(root).expect("walk stays under root");
            out.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
        }
    }
    Ok(())
}

/// `path` itself when it is a file, `path/default` when it is a directory.
pub fn artifact(path: &Path, default: &str) -> CliResult<PathBuf> {
    let p = if path.is_dir() {
        path.join(default)
    } else {
        path.to_path_buf()
    };
    if !p.is_file() {
        return Err(Error::MissingArtifact(p).into());
    }
    Ok(p)
}

pub fn default_out(verb: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(verb)
}
