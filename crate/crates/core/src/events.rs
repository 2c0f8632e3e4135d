//! Line-oriented JSON event logging: every event goes to stdout and,
//! when a run directory is attached, to `events.jsonl` inside it.

use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};

pub struct EventLog {
    file: Option<std::fs::File>,
    quiet: bool,
}

impl EventLog {
    pub fn stdout() -> Self {
        Self {
            file: None,
            quiet: false,
        }
    }

    /// Suppress stdout (used by tests).
    pub fn quiet() -> Self {
        Self {
            file: None,
            quiet: true,
        }
    }

    pub fn with_dir(dir: &Path, quiet: bool) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("events.jsonl"))?;
        Ok(Self {
            file: Some(file),
            quiet,
        })
    }

    pub fn emit(&mut self, event: &str, fields: &[(&str, Value)]) {
        let mut map = Map::new();
        map.insert("event".into(), Value::String(event.to_string()));
        for (k, v) in fields {
            map.insert((*k).into(), v.clone());
        }
        let line = Value::Object(map).to_string();
        if !self.quiet {
            println!("{line}");
        }
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{line}");
        }
    }
}
