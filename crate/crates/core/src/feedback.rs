//! Serving feedback events and their conversion back into interaction
//! records.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{FeedbackLevel, InteractionRecord};
use crate::error::{CoreError, Result};

/// One line of the feedback log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub user: String,
    pub prefix: String,
    pub query: String,
    pub level: FeedbackLevel,
    /// Client timestamp, seconds.
    pub ts: i64,
    /// Assigned by the writer, strictly increasing per log.
    pub server_ts: i64,
}

impl FeedbackEvent {
    pub fn to_record(&self) -> InteractionRecord {
        InteractionRecord {
            user_id: self.user.clone(),
            prefix: self.prefix.clone(),
            query: self.query.clone(),
            level: self.level,
            ts: self.ts,
        }
    }

    fn is_valid(&self) -> bool {
        !self.user.is_empty() && !self.prefix.is_empty() && !self.query.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedbackExport {
    pub records: Vec<InteractionRecord>,
    /// Lines that failed to parse or carried empty fields.
    pub corrupt: usize,
}

/// Reads a feedback log in file order. A missing file is an empty log; blank
/// lines are ignored.
pub fn export_feedback_dataset(path: &Path) -> Result<FeedbackExport> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(FeedbackExport::default()),
        Err(source) => {
            return Err(CoreError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let mut out = FeedbackExport::default();
    for line in BufReader::new(file).split(b'\n') {
        let line = line.map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match serde_json::from_slice::<FeedbackEvent>(&line) {
            Ok(ev) if ev.is_valid() => out.records.push(ev.to_record()),
            _ => out.corrupt += 1,
        }
    }
    Ok(out)
}
