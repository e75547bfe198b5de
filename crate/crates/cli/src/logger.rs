//! One JSON object per line on stderr.

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::json;

struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = json!({
            "level": record.level().as_str().to_lowercase(),
            "target": record.target(),
            "msg": record.args().to_string(),
        });
        eprintln!("{line}");
    }

    fn flush(&self) {}
}

/// Level from `SRST_LOG` (error, warn, info, debug, trace); info otherwise.
pub fn init() {
    let level = std::env::var("SRST_LOG")
        .ok()
        .and_then(|v| v.parse::<Level>().ok())
        .map_or(LevelFilter::Info, |l| l.to_level_filter());
    let logger: &'static JsonLogger = Box::leak(Box::new(JsonLogger { level }));
    if log::set_logger(logger).is_ok() {
        log::set_max_level(level);
    }
}
