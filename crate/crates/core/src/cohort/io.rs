//! Line-delimited JSON cohort files.
//!
//! The first line is a header carrying the schema version and the four
//! action vocabularies; every following line is one [`Trajectory`].

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_trajectory, ActionVocabulary, TaskKind, Trajectory, Vocabularies};
use crate::{Error, Result};

pub const SCHEMA_VERSION: &str = "dtr-cohort/1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortFile {
    pub vocabularies: Vocabularies,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: String,
    vocabularies: BTreeMap<TaskKind, Vec<String>>,
}

/// Reads and validates a cohort file, returning it with the record count.
pub fn load_cohort(path: impl AsRef<Path>) -> Result<(CohortFile, usize)> {
    let file = File::open(path.as_ref())?;
    let cohort = read_cohort(BufReader::new(file))?;
    let n = cohort.trajectories.len();
    Ok((cohort, n))
}

pub fn read_cohort(reader: impl BufRead) -> Result<CohortFile> {
    let mut lines = reader.lines().enumerate();
    let mut out = CohortFile::default();

    let header = loop {
        match lines.next() {
            None => return Ok(out),
            Some((i, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break (i + 1, line);
                }
            }
        }
    };
    let (line_no, text) = header;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: line_no, message: format!("bad header: {e}") })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion { found: header.schema_version, expected: SCHEMA_VERSION });
    }
    for (task, labels) in header.vocabularies {
        let vocab =
            ActionVocabulary::new(task, labels).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        out.vocabularies.insert(task, vocab);
    }

    let mut ids = HashSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        let invalid = |field: String, message: String| Error::InvalidRecord {
            patient_id: traj.patient_id.clone(),
            field,
            message,
        };
        if let Some(v) = validate_trajectory(&traj).into_iter().next() {
            return Err(invalid(v.field, v.message));
        }
        for (k, stage) in traj.stages.iter().enumerate() {
            for (task, &id) in &stage.action {
                let size = out.vocabularies.get(task).map_or(0, ActionVocabulary::size);
                if id >= size {
                    return Err(invalid(
                        format!("stages[{k}].action"),
                        format!("{task} action {id} outside vocabulary of size {size}"),
                    ));
                }
            }
        }
        if !ids.insert(traj.patient_id.clone()) {
            return Err(invalid("patient_id".into(), "duplicate patient_id".into()));
        }
        out.trajectories.push(traj);
    }
    Ok(out)
}

pub fn write_cohort(mut writer: impl Write, cohort: &CohortFile) -> Result<()> {
    let header = Header {
        schema_version: SCHEMA_VERSION.to_string(),
        vocabularies: cohort.vocabularies.iter().map(|(task, v)| (*task, v.labels().to_vec())).collect(),
    };
    serde_json::to_writer(&mut writer, &header)?;
    writer.write_all(b"\n")?;
    for traj in &cohort.trajectories {
        serde_json::to_writer(&mut writer, traj)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_cohort(path: impl AsRef<Path>, cohort: &CohortFile) -> Result<()> {
    let file = File::create(path.as_ref())?;
    write_cohort(BufWriter::new(file), cohort)
}
