use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, DetectorParams};

/// Writes the run-directory artefacts: `events.log` and `eval.jsonl` (one
/// JSON object per line), `checkpoints/step_<N>` and the best-model copies.
/// A log without a directory records nothing, which keeps tests quiet.
#[derive(Debug, Default)]
pub struct RunLog {
    dir: Option<PathBuf>,
    events: Option<File>,
    evals: Option<File>,
    /// Write a checkpoint at every evaluation, not only the best ones.
    pub keep_checkpoints: bool,
}

fn append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

impl RunLog {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            events: Some(append(&dir.join("events.log"))?),
            evals: Some(append(&dir.join("eval.jsonl"))?),
            keep_checkpoints: true,
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn line<T: Serialize>(file: Option<&mut File>, dir: &Option<PathBuf>, value: &T) -> Result<()> {
        let Some(f) = file else { return Ok(()) };
        let s = serde_json::to_string(value)
            .map_err(|e| Error::Contract(format!("unserialisable log record: {e}")))?;
        writeln!(f, "{s}").map_err(|e| Error::io(dir.clone().unwrap_or_default(), e))
    }

    pub fn event<T: Serialize>(&mut self, value: &T) -> Result<()> {
        Self::line(self.events.as_mut(), &self.dir, value)
    }

    pub fn eval<T: Serialize>(&mut self, value: &T) -> Result<()> {
        Self::line(self.evals.as_mut(), &self.dir, value)
    }

    pub fn checkpoint(&self, name: &str, params: &DetectorParams) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = dir.join("checkpoints").join(name);
        save_checkpoint(&path, params)?;
        Ok(Some(path))
    }

    /// Saves a top-level copy such as `best_teacher`.
    pub fn best(&self, name: &str, params: &DetectorParams) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = dir.join(name);
        save_checkpoint(&path, params)?;
        Ok(Some(path))
    }
}
