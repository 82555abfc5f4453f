use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

pub fn open(out: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

#[derive(Serialize)]
struct Document<'a, C: Serialize, R: Serialize> {
    config: &'a C,
    results: &'a R,
    version: &'static str,
}

pub fn write_json<C: Serialize, R: Serialize>(w: &mut dyn Write, config: &C, results: &R) -> io::Result<()> {
    let doc = Document { config, results, version: env!("CARGO_PKG_VERSION") };
    serde_json::to_writer_pretty(&mut *w, &doc)?;
    writeln!(w)?;
    w.flush()
}

/// Writes an explicit header row followed by the serialized rows.
pub fn write_csv_with_header<T: Serialize>(w: &mut dyn Write, header: &[&str], rows: &[T]) -> Result<(), csv::Error> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    writer.write_record(header)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}
