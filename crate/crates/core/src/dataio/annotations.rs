//! Challenge-format annotation CSV parsing and prediction writing.
//!
//! Layout: a header row `Audiofilename,Starttime,Endtime` followed by zero or
//! more class columns whose cells hold POS / NEG / UNK. Prediction files
//! carry only the three time columns; their rows are implicitly positive.

use std::path::Path;

use super::{AnnotationEvent, Polarity};
use crate::detect::DetectionEvent;
use crate::{Error, Result};

/// Events of one annotation file grouped by class column.
#[derive(Debug, Clone)]
pub struct AnnotationTable {
    /// `(class column name, events in row order)`
    pub classes: Vec<(String, Vec<AnnotationEvent>)>,
}

impl AnnotationTable {
    pub fn class(&self, name: &str) -> Option<&[AnnotationEvent]> {
        self.classes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, evs)| evs.as_slice())
    }

    /// All events of all classes, preserving row order within a class.
    pub fn flattened(&self) -> Vec<AnnotationEvent> {
        let mut out = Vec::new();
        for (_, evs) in &self.classes {
            out.extend(evs.iter().cloned());
        }
        out
    }
}

/// Parse an annotation CSV into per-class event lists.
pub fn parse_annotation_table(path: &Path) -> Result<AnnotationTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3
        || !cols[0].eq_ignore_ascii_case("Audiofilename")
        || !cols[1].eq_ignore_ascii_case("Starttime")
        || !cols[2].eq_ignore_ascii_case("Endtime")
    {
        return Err(Error::Format(format!(
            "{}: header must start with Audiofilename,Starttime,Endtime",
            path.display()
        )));
    }
    let class_names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    // A bare three-column file is a prediction/positive list.
    let implicit_positive = class_names.is_empty();

    let mut classes: Vec<(String, Vec<AnnotationEvent>)> = if implicit_positive {
        vec![("Q".to_string(), Vec::new())]
    } else {
        class_names.iter().map(|n| (n.clone(), Vec::new())).collect()
    };

    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after header
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() < 3 {
            return Err(Error::Format(format!("{}:{row}: fewer than 3 columns", path.display())));
        }
        let file_id = record[0].to_string();
        let onset: f64 = record[1]
            .parse()
            .map_err(|_| Error::Format(format!("{}:{row}: bad Starttime {:?}", path.display(), &record[1])))?;
        let offset: f64 = record[2]
            .parse()
            .map_err(|_| Error::Format(format!("{}:{row}: bad Endtime {:?}", path.display(), &record[2])))?;
        if offset <= onset {
            return Err(Error::Validation(format!(
                "{}:{row}: Endtime {offset} <= Starttime {onset}",
                path.display()
            )));
        }
        if implicit_positive {
            classes[0].1.push(AnnotationEvent::new(&file_id, onset, offset, Polarity::Pos)?);
            continue;
        }
        for (c, (_, events)) in classes.iter_mut().enumerate() {
            let cell = record.get(3 + c).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            let polarity = Polarity::parse(cell)
                .map_err(|e| Error::Format(format!("{}:{row}: {e}", path.display())))?;
            events.push(AnnotationEvent::new(&file_id, onset, offset, polarity)?);
        }
    }

    Ok(AnnotationTable { classes })
}

/// Parse an annotation CSV into a flat event list (row order preserved,
/// one event per row per labeled class column).
pub fn parse_annotations(path: &Path) -> Result<Vec<AnnotationEvent>> {
    Ok(parse_annotation_table(path)?.flattened())
}

/// Write detection events as a prediction CSV.
///
/// Header `Audiofilename,Starttime,Endtime`; times printed with 4 decimal
/// places so a parse round trip reproduces them within 1e-4 s.
pub fn write_predictions(events: &[DetectionEvent], path: &Path) -> Result<()> {
    let mut out = String::from("Audiofilename,Starttime,Endtime\n");
    for ev in events {
        out.push_str(&format!("{},{:.4},{:.4}\n", ev.file_id, ev.onset_s, ev.offset_s));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn parses_single_class_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write(&p, "Audiofilename,Starttime,Endtime,Q\na.wav,1.00,1.50,POS\n");
        let evs = parse_annotations(&p).unwrap();
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].file_id, "a.wav");
        assert!((evs[0].onset_s - 1.0).abs() < 1e-12);
        assert!((evs[0].offset_s - 1.5).abs() < 1e-12);
        assert_eq!(evs[0].polarity, Polarity::Pos);
    }

    #[test]
    fn rejects_reversed_times_with_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write(&p, "Audiofilename,Starttime,Endtime,Q\na.wav,2.00,1.50,POS\n");
        let err = parse_annotations(&p).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains(":2:"), "message: {msg}"),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn five_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let mut text = String::from("Audiofilename,Starttime,Endtime,Q\n");
        for i in 0..5 {
            text.push_str(&format!("a.wav,{}.0,{}.5,POS\n", i, i));
        }
        write(&p, &text);
        let evs = parse_annotations(&p).unwrap();
        assert_eq!(evs.len(), 5);
        for (i, ev) in evs.iter().enumerate() {
            assert!((ev.onset_s - i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_class_columns_and_unk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write(
            &p,
            "Audiofilename,Starttime,Endtime,OWL,JAY\n\
             a.wav,0.5,1.0,POS,NEG\n\
             a.wav,2.0,3.0,UNK,\n",
        );
        let table = parse_annotation_table(&p).unwrap();
        assert_eq!(table.classes.len(), 2);
        let owl = table.class("OWL").unwrap();
        assert_eq!(owl.len(), 2);
        assert_eq!(owl[1].polarity, Polarity::Unk);
        let jay = table.class("JAY").unwrap();
        assert_eq!(jay.len(), 1);
        assert_eq!(jay[0].polarity, Polarity::Neg);
    }

    #[test]
    fn missing_columns_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        write(&p, "Audiofilename,Starttime\na.wav,1.0\n");
        assert!(matches!(parse_annotations(&p), Err(Error::Format(_))));
    }

    #[test]
    fn empty_prediction_list_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.csv");
        write_predictions(&[], &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "Audiofilename,Starttime,Endtime\n"
        );
    }

    #[test]
    fn single_event_row_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.csv");
        let ev = DetectionEvent {
            file_id: "a.wav".into(),
            onset_s: 0.5,
            offset_s: 1.25,
            score: 1.0,
        };
        write_predictions(&[ev], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "Audiofilename,Starttime,Endtime\na.wav,0.5000,1.2500\n");
    }
}
