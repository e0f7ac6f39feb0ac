use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Optional JSON-lines sink; every line is `{"event": ..., "data": ...}`.
pub struct JsonLog(Option<BufWriter<File>>);

impl JsonLog {
    pub fn open(path: Option<&Path>) -> std::io::Result<Self> {
        Ok(Self(path.map(File::create).transpose()?.map(BufWriter::new)))
    }

    pub fn write<T: Serialize>(&mut self, event: &str, data: &T) -> std::io::Result<()> {
        if let Some(w) = &mut self.0 {
            let line = serde_json::json!({ "event": event, "data": data });
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        Ok(())
    }
}
