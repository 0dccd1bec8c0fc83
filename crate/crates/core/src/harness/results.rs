use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column names of the result table, in order. Changing this list changes the
/// schema; readers reject any other header.
pub const RESULT_COLUMNS: [&str; 9] = [
    "scheme",
    "n",
    "m_u",
    "m_d",
    "channel",
    "mean_utility",
    "std_error",
    "runtime_s",
    "seed",
];

/// One (scheme, sweep point) measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scheme: String,
    pub n: usize,
    pub m_u: usize,
    pub m_d: usize,
    /// `perfect`, `snr=<dB>dB` or `B=<bits>`.
    pub channel: String,
    pub mean_utility: f64,
    pub std_error: f64,
    /// Wall-clock inference time for the whole test set.
    pub runtime_s: f64,
    pub seed: u64,
}

pub fn write_results<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    // the header is written by hand so that an empty table still has one
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(RESULT_COLUMNS)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_results(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    write_results(File::create(path)?, rows)
}

/// Reads a result table, failing on missing, extra or reordered columns.
pub fn read_results<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Format("empty result file".into()))??;
    if header.iter().ne(RESULT_COLUMNS) {
        let unknown: Vec<&str> = header.iter().filter(|c| !RESULT_COLUMNS.contains(c)).collect();
        let missing: Vec<&str> = RESULT_COLUMNS
            .iter()
            .copied()
            .filter(|c| !header.iter().any(|h| h == *c))
            .collect();
        return Err(Error::Format(format!(
            "result header mismatch: unknown columns {unknown:?}, missing columns {missing:?}"
        )));
    }
    let header = csv::StringRecord::from(RESULT_COLUMNS.to_vec());
    records
        .map(|r| Ok(r?.deserialize(Some(&header))?))
        .collect()
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    read_results(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> ResultRow {
        ResultRow {
            scheme: "cecil-noma".into(),
            n: 5,
            m_u: 15,
            m_d: 5,
            channel: "snr=0dB".into(),
            mean_utility: 3.141,
            std_error: 0.01,
            runtime_s: 0.25,
            seed: 7,
        }
    }

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        write_results(&mut buf, &[row(), row()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("scheme,n,m_u,m_d,channel,mean_utility,std_error,runtime_s,seed\n"));
        assert_eq!(read_results(buf.as_slice()).unwrap(), vec![row(), row()]);
    }

    #[test]
    fn header_only_is_empty_table() {
        let mut buf = Vec::new();
        write_results(&mut buf, &[]).unwrap();
        assert!(read_results(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn unknown_columns_are_rejected() {
        let text = "scheme,n,m_u,m_d,channel,mean_utility,std_error,runtime_s,seed,extra\n\
                    ic,5,25,5,perfect,3.0,0.01,0.1,0,1\n";
        let err = read_results(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn reordered_or_missing_columns_are_rejected() {
        let text = "n,scheme,m_u,m_d,channel,mean_utility,std_error,runtime_s,seed\n";
        assert!(matches!(read_results(text.as_bytes()), Err(Error::Format(_))));
        let text = "scheme,n,m_u,m_d,channel,mean_utility,std_error,seed\n";
        let err = read_results(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("runtime_s"), "{err}");
    }
}
