//! Output files. Every file starts with the tool version and the hash of
//! the resolved configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Serialize)]
pub struct Header {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config_sha256: String,
    pub config: ExperimentConfig,
}

impl Header {
    pub fn new(command: &'static str, config: &ExperimentConfig) -> Self {
        Self {
            tool: "spgptd",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: config.seed,
            config_sha256: config.hash(),
            config: config.clone(),
        }
    }

    /// One-line form for CSV comment headers.
    pub fn line(&self) -> String {
        format!(
            "{} {} command={} seed={} config_sha256={}",
            self.tool, self.version, self.command, self.seed, self.config_sha256
        )
    }
}

pub struct OutDir {
    root: PathBuf,
    header: Header,
}

impl OutDir {
    pub fn create(header: Header, root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            header,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// A CSV writer whose file begins with a `#` header line.
    pub fn csv(&self, name: &str) -> std::io::Result<csv::Writer<BufWriter<File>>> {
        let mut file = BufWriter::new(File::create(self.path(name))?);
        writeln!(file, "# {}", self.header.line())?;
        Ok(csv::Writer::from_writer(file))
    }

    pub fn raw(&self, name: &str) -> std::io::Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    /// Writes `{"header": .., <body fields>}`.
    pub fn json<T: Serialize>(&self, name: &str, body: &T) -> anyhow::Result<()> {
        let mut value = serde_json::to_value(body)?;
        let map = value
            .as_object_mut()
            .ok_or_else(|| anyhow::anyhow!("report body must be a JSON object"))?;
        map.insert("header".into(), serde_json::to_value(&self.header)?);
        let mut file = self.raw(name)?;
        serde_json::to_writer_pretty(&mut file, &value)?;
        writeln!(file)?;
        file.flush()?;
        Ok(())
    }
}

/// Shortest round-trip text for a float.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}
