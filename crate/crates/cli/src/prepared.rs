//! On-disk layout of parse and prepare outputs.
//!
//! A parsed directory holds `templates.txt` and `keys.txt`. A prepared
//! directory holds `meta.toml`, `templates.txt`, `windows.txt` (every
//! window) and the split into `train.txt` and `test.txt`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mlad_core::dataset::{windows_from_text, SystemCorpus, Window, WindowMode};
use mlad_core::logparse::TemplateStore;
use mlad_core::{MladError, Result};

pub const TEMPLATES: &str = "templates.txt";
pub const KEYS: &str = "keys.txt";
pub const META: &str = "meta.toml";
pub const WINDOWS: &str = "windows.txt";
pub const TRAIN: &str = "train.txt";
pub const TEST: &str = "test.txt";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub origin: String,
    pub mode: WindowMode,
    /// Sliding window length; 0 in session mode.
    pub window: usize,
    /// Seed of the train/test split.
    pub seed: u64,
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| MladError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| MladError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| MladError::io(path, e))
}

pub struct Prepared {
    pub dir: PathBuf,
    pub meta: Meta,
    pub store: TemplateStore,
}

impl Prepared {
    pub fn open(dir: &Path) -> Result<Prepared> {
        if !dir.is_dir() {
            return Err(MladError::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "not a prepared directory"),
            ));
        }
        let meta_path = dir.join(META);
        let meta: Meta = toml::from_str(&read_text(&meta_path)?)
            .map_err(|e| MladError::parse(meta_path.display().to_string(), 1, e.to_string()))?;
        let templates = dir.join(TEMPLATES);
        let store = TemplateStore::from_text(&read_text(&templates)?, &templates.display().to_string())?;
        Ok(Prepared {
            dir: dir.to_path_buf(),
            meta,
            store,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn windows(&self, file: &str) -> Result<Vec<Window>> {
        let path = self.path(file);
        windows_from_text(&read_text(&path)?, &path.display().to_string())
    }

    pub fn corpus(&self) -> Result<SystemCorpus> {
        Ok(SystemCorpus {
            origin: self.meta.origin.clone(),
            store: self.store.clone(),
            windows: self.windows(WINDOWS)?,
        })
    }

    /// The files a consumer of this directory depends on.
    pub fn inputs(&self) -> [PathBuf; 3] {
        [self.path(META), self.path(TEMPLATES), self.path(WINDOWS)]
    }
}
