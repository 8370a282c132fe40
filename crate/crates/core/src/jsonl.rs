//! Streaming JSONL readers and writers.
//!
//! Every file the pipeline exchanges is one JSON object per line, UTF-8.
//! Reading is lazy: records are deserialized one line at a time so memory
//! stays bounded by the largest single record, not the corpus.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The offending line is retained verbatim for diagnostics.
    #[error("{path}:{line_no}: malformed JSON line: {source} (line: {line:?})")]
    MalformedLine {
        path: PathBuf,
        line_no: usize,
        line: String,
        #[source]
        source: serde_json::Error,
    },
}

impl JsonlError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        JsonlError::Io { path: path.to_path_buf(), source }
    }
}

/// Lazy line-by-line reader. Blank lines are skipped; any line that fails to
/// deserialize yields [`JsonlError::MalformedLine`] with its 1-based number.
pub struct JsonlReader<T> {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    _marker: PhantomData<T>,
}

impl<T: DeserializeOwned> JsonlReader<T> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, JsonlError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            lines: BufReader::new(file).lines(),
            line_no: 0,
            _marker: PhantomData,
        })
    }
}

impl<T: DeserializeOwned> Iterator for JsonlReader<T> {
    type Item = Result<T, JsonlError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(JsonlError::io(&self.path, e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(match serde_json::from_str(&line) {
                Ok(record) => Ok(record),
                Err(source) => Err(JsonlError::MalformedLine {
                    path: self.path.clone(),
                    line_no: self.line_no,
                    line,
                    source,
                }),
            });
        }
    }
}

/// Reads a whole JSONL file into memory. Convenience for small files;
/// pipelines over large ones should iterate [`JsonlReader`] directly.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    JsonlReader::open(path)?.collect()
}

/// Streaming writer: one record per line, flushed per record so partially
/// written files survive a crash with only the final line at risk.
pub struct JsonlWriter<T> {
    path: PathBuf,
    writer: BufWriter<File>,
    written: usize,
    _marker: PhantomData<T>,
}

impl<T: Serialize> JsonlWriter<T> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, JsonlError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| JsonlError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
            written: 0,
            _marker: PhantomData,
        })
    }

    pub fn write(&mut self, record: &T) -> Result<(), JsonlError> {
        let json = serde_json::to_string(record).map_err(|source| JsonlError::MalformedLine {
            path: self.path.clone(),
            line_no: self.written + 1,
            line: String::new(),
            source,
        })?;
        self.writer
            .write_all(json.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|e| JsonlError::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn finish(mut self) -> Result<usize, JsonlError> {
        self.writer.flush().map_err(|e| JsonlError::io(&self.path, e))?;
        Ok(self.written)
    }
}

/// Writes all records to `path`, replacing any existing file.
pub fn write_jsonl<T: Serialize>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = T>,
) -> Result<usize, JsonlError> {
    let mut writer = JsonlWriter::create(path)?;
    for record in records {
        writer.write(&record)?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Annotation, AnnotationRecord, ErrorSpan, Segment, Severity};

    fn segment(id: &str) -> Segment {
        Segment {
            segment_id: id.into(),
            system_id: "sysA".into(),
            source_lang: "en".into(),
            target_lang: "de".into(),
            source: "hello".into(),
            translation: "hallo".into(),
        }
    }

    #[test]
    fn round_trips_segments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("segments.jsonl");
        let records = vec![segment("s1"), segment("s2")];
        write_jsonl(&path, records.iter()).unwrap();
        let back: Vec<Segment> = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        File::create(&path).unwrap();
        let back: Vec<Segment> = read_jsonl(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn malformed_line_reports_number_and_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut file = File::create(&path).unwrap();
        writeln!(file, "{{").unwrap();
        drop(file);

        let err = read_jsonl::<Segment>(&path).unwrap_err();
        match err {
            JsonlError::MalformedLine { line_no, line, .. } => {
                assert_eq!(line_no, 1);
                assert_eq!(line, "{");
            }
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_number_counts_from_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        let mut file = File::create(&path).unwrap();
        writeln!(file, "{}", serde_json::to_string(&segment("ok")).unwrap()).unwrap();
        writeln!(file).unwrap();
        writeln!(file, "not json").unwrap();
        drop(file);

        let mut reader = JsonlReader::<Segment>::open(&path).unwrap();
        assert!(reader.next().unwrap().is_ok());
        match reader.next().unwrap().unwrap_err() {
            JsonlError::MalformedLine { line_no, .. } => assert_eq!(line_no, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = read_jsonl::<Segment>("/nonexistent/x.jsonl").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.jsonl"));
    }

    #[test]
    fn annotation_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        let records = vec![AnnotationRecord {
            segment_id: "s1".into(),
            system_id: "sysA".into(),
            spans: Annotation::new(vec![ErrorSpan::new(0, 2, Severity::Minor)]),
        }];
        write_jsonl(&path, records.iter()).unwrap();
        let back: Vec<AnnotationRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }

    mod round_trip_properties {
        use super::*;
        use proptest::prelude::*;

        prop_compose! {
            fn arb_segment()(
                segment_id in "[a-z0-9]{1,8}",
                system_id in "[A-Za-z0-9_-]{1,8}",
                source in "\\PC{0,40}",
                translation in "\\PC{0,40}",
            ) -> Segment {
                Segment {
                    segment_id,
                    system_id,
                    source_lang: "en".into(),
                    target_lang: "ja".into(),
                    source,
                    translation,
                }
            }
        }

        prop_compose! {
            fn arb_record()(
                segment_id in "[a-z0-9]{1,8}",
                raw_spans in prop::collection::vec(
                    (0usize..40, 1usize..6, prop::bool::ANY, prop::option::of("[a-z/]{1,12}")),
                    0..5,
                ),
            ) -> AnnotationRecord {
                AnnotationRecord {
                    segment_id,
                    system_id: "sys".into(),
                    spans: Annotation::new(
                        raw_spans
                            .into_iter()
                            .map(|(start, len, major, category)| ErrorSpan {
                                start,
                                end: start + len,
                                severity: if major { Severity::Major } else { Severity::Minor },
                                category,
                            })
                            .collect(),
                    ),
                }
            }
        }

        proptest! {
            #[test]
            fn segments_survive_write_read(records in prop::collection::vec(arb_segment(), 0..8)) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("segments.jsonl");
                write_jsonl(&path, records.iter()).unwrap();
                let back: Vec<Segment> = read_jsonl(&path).unwrap();
                prop_assert_eq!(back, records);
            }

            #[test]
            fn annotation_records_survive_write_read(
                records in prop::collection::vec(arb_record(), 0..8)
            ) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("annotations.jsonl");
                write_jsonl(&path, records.iter()).unwrap();
                let back: Vec<AnnotationRecord> = read_jsonl(&path).unwrap();
                prop_assert_eq!(back, records);
            }
        }
    }
}
