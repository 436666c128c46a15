use std::fs;
use std::path::{Path, PathBuf};

use mammoclip::util::{read, write_atomic};
use mammoclip::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const PROVENANCE: &str = "provenance.json";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    arguments: &'a [String],
    seed: u64,
    config: &'a str,
    inputs: &'a [InputDigest],
}

/// Output directory of one subcommand invocation.
pub struct RunDir {
    pub path: PathBuf,
    inputs: Vec<InputDigest>,
}

impl RunDir {
    /// Claim `path`. An existing non-empty directory is only replaced with
    /// `overwrite`, and only if it is a previous run directory.
    pub fn create(path: &Path, overwrite: bool) -> Result<Self> {
        if path.exists() {
            let empty = fs::read_dir(path)
                .map_err(|e| Error::Io {
                    path: path.into(),
                    source: e,
                })?
                .next()
                .is_none();
            if !empty {
                if !overwrite {
                    return Err(Error::Config(format!(
                        "{} already exists; pass --overwrite to replace it",
                        path.display()
                    )));
                }
                if !path.join(PROVENANCE).is_file() {
                    return Err(Error::Config(format!(
                        "refusing to overwrite {}: it is not a run directory",
                        path.display()
                    )));
                }
                fs::remove_dir_all(path).map_err(|e| Error::Io {
                    path: path.into(),
                    source: e,
                })?;
            }
        }
        fs::create_dir_all(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        write_atomic(&path.join(PROVENANCE), b"{\"status\": \"incomplete\"}\n")?;
        Ok(Self {
            path: path.to_path_buf(),
            inputs: Vec::new(),
        })
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }

    pub fn record_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let sha256 = hex::encode(Sha256::digest(read(path)?));
        self.inputs.push(InputDigest {
            name: name.into(),
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    /// One digest over many files, in the given order.
    pub fn record_inputs(&mut self, name: &str, base: &Path, files: &[&str]) -> Result<()> {
        let mut hasher = Sha256::new();
        for f in files {
            hasher.update(f.as_bytes());
            hasher.update(Sha256::digest(read(&base.join(f))?));
        }
        self.inputs.push(InputDigest {
            name: name.into(),
            path: base.display().to_string(),
            sha256: hex::encode(hasher.finalize()),
        });
        Ok(())
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        write_atomic(&self.join(name), text.as_bytes())
    }

    pub fn finish(&self, command: &str, arguments: &[String], seed: u64, config: &str) -> Result<()> {
        self.write_json(
            PROVENANCE,
            &Provenance {
                tool: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                command,
                arguments,
                seed,
                config,
                inputs: &self.inputs,
            },
        )
    }
}
