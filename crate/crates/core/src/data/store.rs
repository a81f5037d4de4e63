//! File access for a dataset root. Every read is logged so tests can prove
//! which files a code path touched.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image::{decode_ppm, ppm_dims};

pub const EXO_DIR: &str = "exocentric";
pub const EGO_DIR: &str = "egocentric";
pub const ANNOTATION_DIR: &str = "annotations";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessKind {
    Image,
    ImageHeader,
    Annotation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Access {
    pub path: PathBuf,
    pub kind: AccessKind,
}

#[derive(Debug)]
pub struct DataStore {
    root: PathBuf,
    log: Mutex<Vec<Access>>,
}

impl DataStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn annotation_root(&self) -> PathBuf {
        self.root.join(ANNOTATION_DIR)
    }

    fn classify(&self, path: &Path, requested: AccessKind) -> AccessKind {
        if path.starts_with(self.annotation_root()) {
            AccessKind::Annotation
        } else {
            requested
        }
    }

    fn read(&self, path: &Path, kind: AccessKind) -> Result<Vec<u8>> {
        let kind = self.classify(path, kind);
        self.log.lock().expect("access log poisoned").push(Access {
            path: path.to_path_buf(),
            kind,
        });
        std::fs::read(path).map_err(|e| Error::io(path, e))
    }

    pub fn read_image(&self, path: &Path) -> Result<Tensor> {
        decode_ppm(&self.read(path, AccessKind::Image)?)
            .map_err(|e| with_path(e, path))
    }

    pub fn read_image_dims(&self, path: &Path) -> Result<(usize, usize)> {
        ppm_dims(&self.read(path, AccessKind::ImageHeader)?)
            .map_err(|e| with_path(e, path))
    }

    pub fn read_annotation_text(&self, path: &Path) -> Result<String> {
        let bytes = self.read(path, AccessKind::Annotation)?;
        String::from_utf8(bytes).map_err(|_| Error::data(path, None, "annotation is not UTF-8"))
    }

    pub fn accesses(&self) -> Vec<Access> {
        self.log.lock().expect("access log poisoned").clone()
    }

    pub fn count(&self, kind: AccessKind) -> usize {
        self.log
            .lock()
            .expect("access log poisoned")
            .iter()
            .filter(|a| a.kind == kind)
            .count()
    }

    pub fn annotation_reads(&self) -> usize {
        self.count(AccessKind::Annotation)
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("access log poisoned").clear();
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Sorted names of subdirectories, skipping hidden entries.
pub fn list_dirs(path: &Path) -> Result<Vec<String>> {
    list(path, true)
}

/// Sorted names of regular files, skipping hidden entries.
pub fn list_files(path: &Path) -> Result<Vec<String>> {
    list(path, false)
}

fn list(path: &Path, dirs: bool) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let ty = entry.file_type().map_err(|e| Error::io(path, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || ty.is_dir() != dirs || !(ty.is_dir() || ty.is_file()) {
            continue;
        }
        out.push(name);
    }
    out.sort();
    Ok(out)
}
