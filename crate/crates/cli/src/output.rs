//! Artifact set for one run: files are rendered in memory, the manifest with
//! their checksums is written first, then the files themselves.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use superflow::lln::Table;
use superflow::stats::sha256_hex;

#[derive(Debug, Serialize)]
struct Entry {
    file: String,
    bytes: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    toolkit: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_hash: &'a str,
    settings: &'a Value,
    outputs: Vec<Entry>,
}

pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn new() -> Artifacts {
        Artifacts { files: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, body: impl Into<Vec<u8>>) {
        self.files.push((name.into(), body.into()));
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut s = serde_json::to_string_pretty(value).expect("output serializes");
        s.push('\n');
        self.add(name, s);
    }

    pub fn table(&mut self, t: &Table) {
        self.add(format!("{}.csv", t.name), t.to_csv());
    }

    /// Writes `manifest.json` and then every artifact under `dir`.
    pub fn write(self, dir: &Path, command: &str, seed: u64, settings: &Value) -> io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let config_hash = sha256_hex(&serde_json::to_vec(settings).expect("settings serialize"));
        let outputs = self
            .files
            .iter()
            .map(|(name, body)| Entry { file: name.clone(), bytes: body.len(), sha256: sha256_hex(body) })
            .collect();
        let manifest = Manifest {
            toolkit: "superflow",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config_hash: &config_hash,
            settings,
            outputs,
        };
        let path = dir.join("manifest.json");
        let mut m = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        m.push('\n');
        fs::write(&path, m)?;
        for (name, body) in &self.files {
            fs::write(dir.join(name), body)?;
        }
        Ok(path)
    }
}
