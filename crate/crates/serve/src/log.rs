use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use onesug_core::feedback::FeedbackEvent;

use crate::{Result, ServeError};

/// Append-only JSONL feedback log. One `write` per event keeps lines whole.
#[derive(Debug)]
pub struct FeedbackLog {
    path: PathBuf,
    file: File,
    last_server_ts: i64,
}

fn now_millis() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64)
}

impl FeedbackLog {
    /// Opens or creates the log. Server timestamps continue after the
    /// largest one already present.
    pub fn open(path: &Path) -> Result<Self> {
        let err = |source| ServeError::Log {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(err)?;
        }
        let mut last_server_ts = i64::MIN;
        if let Ok(f) = File::open(path) {
            for line in BufReader::new(f).lines() {
                let line = line.map_err(err)?;
                if let Ok(ev) = serde_json::from_str::<FeedbackEvent>(&line) {
                    last_server_ts = last_server_ts.max(ev.server_ts);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last_server_ts,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Stamps `event` with a server time strictly after the previous one and
    /// appends it.
    pub fn append(&mut self, mut event: FeedbackEvent) -> Result<FeedbackEvent> {
        event.server_ts = now_millis().max(self.last_server_ts.saturating_add(1));
        let mut line = serde_json::to_vec(&event).map_err(onesug_core::CoreError::from)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|source| ServeError::Log {
            path: self.path.clone(),
            source,
        })?;
        self.last_server_ts = event.server_ts;
        Ok(event)
    }
}
