use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{LogRow, TrainingLog};
use crate::error::{Error, Result};
use crate::policy::Checkpoint;

pub const TRAINING_FILE: &str = "training.csv";
pub const MATRIX_FILE: &str = "matrices.txt";
pub const ACTIONS_FILE: &str = "actions.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Receives run artifacts as training produces them.
pub trait TrainSink {
    /// One communication-matrix line per collected episode.
    fn matrix_lines(&mut self, lines: &[String]) -> Result<()>;
    /// Action-log text for the logged episodes of an update.
    fn actions(&mut self, text: &str) -> Result<()>;
    /// One CSV row per update; `logging` marks the logging interval.
    fn row(&mut self, row: &LogRow, logging: bool) -> Result<()>;
    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()>;
}

/// Keeps every artifact in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub log: TrainingLog,
    pub matrix_lines: Vec<String>,
    pub action_log: String,
    pub checkpoint: Option<Checkpoint>,
}

impl TrainSink for MemorySink {
    fn matrix_lines(&mut self, lines: &[String]) -> Result<()> {
        self.matrix_lines.extend_from_slice(lines);
        Ok(())
    }

    fn actions(&mut self, text: &str) -> Result<()> {
        self.action_log.push_str(text);
        Ok(())
    }

    fn row(&mut self, row: &LogRow, _logging: bool) -> Result<()> {
        self.log.rows.push(row.clone());
        Ok(())
    }

    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        self.checkpoint = Some(checkpoint.clone());
        Ok(())
    }
}

/// Writes the four artifacts into a directory, flushing after every write
/// so a failed run leaves complete records behind.
pub struct RunDirectory<'a> {
    dir: PathBuf,
    csv: csv::Writer<File>,
    matrices: File,
    actions: File,
    wrote_header: bool,
    on_log: Option<Box<dyn FnMut(&LogRow) + 'a>>,
}

impl<'a> RunDirectory<'a> {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            OpenOptions::new()
                .write(true)
                .create(true)
                .truncate(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))
        };
        let csv_file = open(TRAINING_FILE)?;
        // the header goes out with the first row
        let csv = csv::WriterBuilder::new().has_headers(false).from_writer(csv_file);
        Ok(Self {
            dir: dir.to_path_buf(),
            csv,
            matrices: open(MATRIX_FILE)?,
            actions: open(ACTIONS_FILE)?,
            wrote_header: false,
            on_log: None,
        })
    }

    /// Called with every row written at the logging interval.
    pub fn on_log(mut self, f: impl FnMut(&LogRow) + 'a) -> Self {
        self.on_log = Some(Box::new(f));
        self
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn csv_err(&self, e: impl Into<std::io::Error>) -> Error {
        Error::io(self.path(TRAINING_FILE), e.into())
    }
}

impl TrainSink for RunDirectory<'_> {
    fn matrix_lines(&mut self, lines: &[String]) -> Result<()> {
        let p = self.path(MATRIX_FILE);
        let mut text = lines.join("\n");
        text.push('\n');
        self.matrices
            .write_all(text.as_bytes())
            .and_then(|_| self.matrices.flush())
            .map_err(|e| Error::io(&p, e))
    }

    fn actions(&mut self, text: &str) -> Result<()> {
        let p = self.path(ACTIONS_FILE);
        self.actions
            .write_all(text.as_bytes())
            .and_then(|_| self.actions.flush())
            .map_err(|e| Error::io(&p, e))
    }

    fn row(&mut self, row: &LogRow, logging: bool) -> Result<()> {
        if !self.wrote_header {
            self.csv.write_record(super::CSV_COLUMNS).map_err(|e| self.csv_err(e))?;
            self.wrote_header = true;
        }
        self.csv.serialize(row).map_err(|e| self.csv_err(e))?;
        self.csv.flush().map_err(|e| self.csv_err(e))?;
        if logging {
            if let Some(f) = self.on_log.as_mut() {
                f(row);
            }
        }
        Ok(())
    }

    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        // write then rename, so a crash never leaves a torn checkpoint
        let tmp = self.path("checkpoint.json.tmp");
        checkpoint.save(&tmp)?;
        let dst = self.path(CHECKPOINT_FILE);
        std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }
}
