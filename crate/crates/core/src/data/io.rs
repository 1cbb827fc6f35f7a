//! Line-delimited JSON dataset files.
//!
//! Line 1 is a header `{"name","d","n","count"}`; every following line is one
//! instance record `{"id","label","split","values","truth_mask"}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, TimeSeries};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub name: String,
    pub d: usize,
    pub n: usize,
    pub count: usize,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

pub fn read_dataset(reader: impl Read) -> Result<Dataset> {
    let mut lines = BufReader::new(reader).lines();
    let header_line = match lines.next() {
        Some(line) => line.map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header line".into(),
            })
        }
    };
    let header: DatasetHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        message: format!("header: {e}"),
    })?;

    let mut instances = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TimeSeries = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if s.channels() != header.d {
            return Err(Error::instance(
                &s.id,
                format!("has {} channels, header declares d={}", s.channels(), header.d),
            ));
        }
        if s.len() != header.n {
            return Err(Error::instance(
                &s.id,
                format!("has length {}, header declares n={}", s.len(), header.n),
            ));
        }
        instances.push(s);
    }
    if instances.len() != header.count {
        return Err(Error::InvalidDataset(format!(
            "header declares {} instances, file holds {}",
            header.count,
            instances.len()
        )));
    }
    let ds = Dataset {
        name: header.name,
        instances,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(|e| match e {
        Error::Json(j) if j.is_io() => Error::io(path, j.into()),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &Dataset, mut w: impl Write) -> Result<()> {
    let header = DatasetHeader {
        name: ds.name.clone(),
        d: ds.channels(),
        n: ds.series_len(),
        count: ds.instances.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(serde_json::Error::io)?;
    for s in &ds.instances {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(serde_json::Error::io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::tiny;

    #[test]
    fn round_trip_in_memory() {
        let ds = tiny();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn empty_name_round_trips() {
        let mut ds = tiny();
        ds.name.clear();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap().name, "");
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "{\"name\":\"x\",\"d\":1,\"n\":3,\"count\":2}\n\
                    {\"id\":\"a\",\"label\":\"normal\",\"split\":\"train\",\"values\":[[0,1,2]],\"truth_mask\":null}\n\
                    {\"id\":\"b\",\"label\":\"weird\"}\n";
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn channel_mismatch_names_instance() {
        let text = "{\"name\":\"x\",\"d\":1,\"n\":3,\"count\":2}\n\
                    {\"id\":\"a\",\"label\":\"normal\",\"split\":\"train\",\"values\":[[0,1,2]],\"truth_mask\":null}\n\
                    {\"id\":\"b\",\"label\":\"anomaly\",\"split\":\"train\",\"values\":[[0,1,2],[1,1,1]],\"truth_mask\":null}\n";
        let err = read_dataset(text.as_bytes()).unwrap_err();
        assert!(matches!(&err, Error::InvalidInstance { id, .. } if id == "b"), "{err}");
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_dataset(&tiny(), "/nonexistent-dir/x/y.jsonl").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
