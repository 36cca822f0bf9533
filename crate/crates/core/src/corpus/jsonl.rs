use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One dataset line before tokenization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub text: String,
    pub group: String,
    pub ideology: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_post_date: Option<NaiveDate>,
    /// Pre-assigned split; exported synthetic streams carry it so a reload
    /// reproduces the exact same partition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestWarning {
    pub line: usize,
    pub message: String,
}

fn parse_line(line_no: usize, line: &str) -> Result<RawRecord> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Ingest {
        line: line_no,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Ingest {
        line: line_no,
        message: "expected a JSON object".into(),
    })?;
    let field = |name: &'static str| -> Result<String> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(Error::Ingest {
                line: line_no,
                message: format!("field `{name}` must be a string"),
            }),
            None => Err(Error::MissingField {
                line: line_no,
                field: name,
            }),
        }
    };
    let text = field("text")?;
    let group = field("group")?;
    let ideology = field("ideology")?;
    let first_post_date = match obj.get("first_post_date") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| {
            Error::Ingest {
                line: line_no,
                message: format!("bad first_post_date `{s}`: {e}"),
            }
        })?),
        Some(_) => {
            return Err(Error::Ingest {
                line: line_no,
                message: "field `first_post_date` must be a string".into(),
            })
        }
    };
    let split = match obj.get("split") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| Error::Ingest {
            line: line_no,
            message: format!("bad split: {e}"),
        })?),
    };
    Ok(RawRecord {
        text,
        group,
        ideology,
        first_post_date,
        split,
    })
}

/// Reads records in file order. Blank lines are skipped. With `lenient`,
/// malformed lines become warnings instead of errors.
pub fn load_jsonl(path: &Path, lenient: bool) -> Result<(Vec<RawRecord>, Vec<IngestWarning>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        match parse_line(line_no, &line) {
            Ok(r) => records.push(r),
            Err(e) if lenient => warnings.push(IngestWarning {
                line: line_no,
                message: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((records, warnings))
}

pub fn write_jsonl(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_with(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_record() {
        let f = file_with("{\"text\":\"a b\",\"group\":\"g1\",\"ideology\":\"i1\"}\n");
        let (recs, warns) = load_jsonl(f.path(), false).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(warns.is_empty());
        assert_eq!(recs[0].group, "g1");
        assert_eq!(recs[0].first_post_date, None);
    }

    #[test]
    fn missing_group_names_line_and_field() {
        let f = file_with("{\"text\":\"a b\",\"ideology\":\"i1\"}\n");
        match load_jsonl(f.path(), false) {
            Err(Error::MissingField { line, field }) => {
                assert_eq!((line, field), (1, "group"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lenient_collects_warnings() {
        let f = file_with(concat!(
            "{\"text\":\"a\",\"group\":\"g1\",\"ideology\":\"i1\"}\n",
            "{\"text\":\"b\",\"group\":\"g1\",\"ideology\":\"i1\"}\n",
            "not json\n",
            "{\"text\":\"c\",\"group\":\"g2\",\"ideology\":\"i1\",\"first_post_date\":\"2011-02-03\"}\n",
        ));
        let (recs, warns) = load_jsonl(f.path(), true).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(warns.len(), 1);
        assert_eq!(warns[0].line, 3);
        assert_eq!(
            recs[2].first_post_date,
            NaiveDate::from_ymd_opt(2011, 2, 3)
        );
        assert!(load_jsonl(f.path(), false).is_err());
    }

    #[test]
    fn empty_file_is_empty() {
        let f = file_with("");
        assert!(load_jsonl(f.path(), false).unwrap().0.is_empty());
    }
}
