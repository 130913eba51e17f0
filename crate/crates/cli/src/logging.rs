//! Console plus JSONL logging.
//!
//! Human-readable lines go to stderr. Records with target `progress` are
//! dropped from the console unless stderr is a terminal. With a log file,
//! every record is also appended there as one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::{IsTerminal, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{Level, LevelFilter, Log, Metadata, Record};

pub const PROGRESS: &str = "progress";

struct Logger {
    console_level: Level,
    tty: bool,
    file: Option<Mutex<File>>,
}

impl Log for Logger {
    fn enabled(&self, _: &Metadata<'_>) -> bool {
        true
    }

    fn log(&self, record: &Record<'_>) {
        let progress = record.target() == PROGRESS;
        if record.level() <= self.console_level && (!progress || self.tty) {
            eprintln!(
                "[{}] {}",
                record.level().as_str().to_lowercase(),
                record.args()
            );
        }
        if let Some(f) = &self.file {
            let ts = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64());
            let line = serde_json::json!({
                "ts": ts,
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            if let Ok(mut f) = f.lock() {
                let _ = writeln!(f, "{line}");
            }
        }
    }

    fn flush(&self) {
        if let Some(f) = &self.file {
            if let Ok(mut f) = f.lock() {
                let _ = f.flush();
            }
        }
    }
}

/// Installs the logger once. `NAREM_LOG=debug|info|warn|error` sets the
/// console level (default info).
pub fn init(file: Option<&Path>) -> anyhow::Result<()> {
    let console_level = match std::env::var("NAREM_LOG").as_deref() {
        Ok("debug") => Level::Debug,
        Ok("warn") => Level::Warn,
        Ok("error") => Level::Error,
        Ok("trace") => Level::Trace,
        _ => Level::Info,
    };
    let file = match file {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(Mutex::new(
                OpenOptions::new().create(true).append(true).open(p)?,
            ))
        }
        None => None,
    };
    let logger = Logger {
        console_level,
        tty: std::io::stderr().is_terminal(),
        file,
    };
    log::set_boxed_logger(Box::new(logger))
        .map_err(|e| anyhow::anyhow!("logger already installed: {e}"))?;
    log::set_max_level(LevelFilter::Debug);
    Ok(())
}
