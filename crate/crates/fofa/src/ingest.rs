//! Reading event logs from disk.

use std::path::Path;

use fofa_core::data::{parse_log, EventLog, LogFormat, ParseReport};

use crate::error::{Error, Result};

/// `.dat` files and files whose first record line contains `::` are
/// double-colon logs; anything else is tab/comma delimited.
pub fn detect_format(path: &Path, text: &str) -> LogFormat {
    let dat = path.extension().is_some_and(|e| e == "dat");
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if dat || first.contains("::") {
        LogFormat::DoubleColon
    } else {
        LogFormat::Delimited
    }
}

pub fn ingest(path: &Path, format: Option<LogFormat>) -> Result<(EventLog, ParseReport)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    // MovieLens ships Latin-1 titles in sibling files; ratings are ASCII, but be lenient
    let text = String::from_utf8_lossy(&bytes);
    let format = format.unwrap_or_else(|| detect_format(path, &text));
    Ok(parse_log(&text, format)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn reads_double_colon_and_counts_malformed() {
        let mut f = tempfile::Builder::new().suffix(".dat").tempfile().unwrap();
        for i in 0..99 {
            writeln!(f, "{}::{}::5::{}", i % 7 + 1, 1000 + i, 978300760 + i).unwrap();
        }
        writeln!(f, "oops").unwrap();
        let (log, report) = ingest(f.path(), None).unwrap();
        assert_eq!(log.records.len(), 99);
        assert_eq!(report.malformed, 1);
        assert_eq!(report.malformed_lines, vec![100]);
    }

    #[test]
    fn empty_file_is_an_empty_log() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let (log, report) = ingest(f.path(), None).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(report.records, 0);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = ingest(Path::new("/nonexistent/ratings.dat"), None).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ratings.dat"));
    }

    #[test]
    fn detects_delimited_with_header() {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        writeln!(f, "user,item,rating,ts\n1,2,4.5,10\n1,3,1,11").unwrap();
        let (log, _) = ingest(f.path(), None).unwrap();
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.records[0].rating, 4.5);
    }
}
