//! Staged writes into the output directory. Nothing becomes visible until
//! every file of a stage has been written, then each is renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const SAMPLED: &str = "sampled.jsonl";
pub const SAMPLE_SUMMARY: &str = "sample_summary.json";
pub const RETRIEVAL: &str = "retrieval.jsonl";
pub const TYPE_MODEL: &str = "type_model.txt";
pub const PREFERENCES: &str = "preferences.jsonl";
pub const TRAINER_CONFIG: &str = "trainer_config.json";
pub const PROMPTS: &str = "prompts.jsonl";
pub const REPORT: &str = "report.json";

pub struct Staged {
    dir: PathBuf,
    files: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    pub fn new(dir: &Path) -> Self {
        Staged { dir: dir.to_path_buf(), files: Vec::new() }
    }

    pub fn add(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir).map_err(|source| CliError::File { path: self.dir.clone(), source })?;
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp-{}", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()
        };
        if let Err(source) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(CliError::File { path: tmp, source });
        }
        self.files.push((tmp, target));
        Ok(())
    }

    pub fn add_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(pathwise_core::Error::from)?;
        bytes.push(b'\n');
        self.add(name, &bytes)
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>, CliError> {
        let mut done = Vec::new();
        for (tmp, target) in std::mem::take(&mut self.files) {
            fs::rename(&tmp, &target).map_err(|source| CliError::File { path: target.clone(), source })?;
            done.push(target);
        }
        Ok(done)
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        for (tmp, _) in &self.files {
            let _ = fs::remove_file(tmp);
        }
    }
}
