use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pnnh_core::Result;

/// CSV file whose first line is `# config_hash: <hash>`, followed by a header row.
pub struct CsvReport {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvReport {
    pub fn create(path: &Path, hash: &str, header: &[&str]) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "# config_hash: {hash}")?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header).map_err(csv_err)?;
        Ok(CsvReport { path: path.to_path_buf(), writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.writer.flush()?;
        Ok(self.path)
    }
}

fn csv_err(e: csv::Error) -> pnnh_core::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => pnnh_core::Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Shortest round-tripping decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}
