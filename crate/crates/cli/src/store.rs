//! Append-only JSON-lines store of episode reports.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use peft_forge::finetune::EpisodeReport;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One line of the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReport {
    pub experiment: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub report: EpisodeReport,
}

pub struct ResultsStore {
    path: PathBuf,
    file: File,
}

impl ResultsStore {
    /// Opens `path` for appending, creating it and its parent directory.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref().to_path_buf();
        let fail = |e: std::io::Error| CliError::Io(format!("cannot open results store {}: {e}", path.display()));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(fail)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(fail)?;
        Ok(ResultsStore { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one line with a single `write_all`, then syncs.
    pub fn append(&mut self, record: &StoredReport) -> Result<(), CliError> {
        let mut line = serde_json::to_vec(record).map_err(peft_forge::Error::from)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct StoreContents {
    pub records: Vec<StoredReport>,
    /// 1-based line numbers that could not be parsed.
    pub malformed: Vec<usize>,
}

/// Reads every well-formed line, skipping and counting the others. Lines of
/// one experiment that disagree on the config hash are an integrity error.
pub fn read_store(path: impl AsRef<Path>) -> Result<StoreContents, CliError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CliError::Io(format!("cannot read results store {}: {e}", path.display())))?;
    let mut out = StoreContents::default();
    let mut hashes: HashMap<String, (String, usize)> = HashMap::new();
    for (i, line) in BufReader::new(file).split(b'\n').enumerate() {
        let line = line?;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match serde_json::from_slice::<StoredReport>(&line) {
            Ok(r) => {
                match hashes.get(&r.experiment) {
                    Some((h, first)) if *h != r.config_hash => {
                        return Err(CliError::Integrity(format!(
                            "experiment `{}` has config hash {} on line {} but {} on line {}",
                            r.experiment,
                            &h[..h.len().min(12)],
                            first,
                            &r.config_hash[..r.config_hash.len().min(12)],
                            i + 1
                        )));
                    }
                    Some(_) => {}
                    None => {
                        hashes.insert(r.experiment.clone(), (r.config_hash.clone(), i + 1));
                    }
                }
                out.records.push(r);
            }
            Err(e) => {
                log::warn!("{}:{}: skipping malformed line: {e}", path.display(), i + 1);
                out.malformed.push(i + 1);
            }
        }
    }
    Ok(out)
}
