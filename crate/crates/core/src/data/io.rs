use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde_json::Value;

use super::Segment;
use crate::error::{Error, Result};
use crate::util::write_atomic;

/// Write one JSON record per line.
pub fn save_dataset(segments: &[Segment], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    for seg in segments {
        serde_json::to_writer(&mut buf, seg).map_err(|e| Error::Data(e.to_string()))?;
        buf.write_all(b"\n").expect("in-memory write");
    }
    write_atomic(path.as_ref(), &buf)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Segment>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, lineno)?);
    }
    Ok(out)
}

fn parse_record(line: &str, lineno: usize) -> Result<Segment> {
    let value: Value = serde_json::from_str(line)
        .map_err(|e| Error::Data(format!("line {lineno}: malformed record: {e}")))?;
    let id = value
        .get("id")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| Error::Data(format!("line {lineno}: record has no string `id`")))?;
    let seg: Segment = serde_json::from_value(value)
        .map_err(|e| Error::Data(format!("line {lineno}, segment {id}: {e}")))?;
    seg.validate()
        .map_err(|e| Error::Data(format!("line {lineno}, segment {id}: {e}")))?;
    Ok(seg)
}
