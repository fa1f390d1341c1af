//! Line-delimited JSON logging on stderr.

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde::Serialize;

struct JsonLogger;

static LOGGER: JsonLogger = JsonLogger;

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &Record) {
        if self.enabled(record.metadata()) {
            let line = serde_json::json!({
                "level": record.level().as_str().to_ascii_lowercase(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            eprintln!("{line}");
        }
    }

    fn flush(&self) {}
}

pub fn init(verbose: bool) {
    let level = if verbose { LevelFilter::Debug } else { LevelFilter::Info };
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(level);
    }
}

/// Writes one progress record (an epoch or step log) as a JSON line.
pub fn record<T: Serialize>(value: &T) {
    if log::log_enabled!(Level::Info) {
        if let Ok(s) = serde_json::to_string(value) {
            eprintln!("{s}");
        }
    }
}
