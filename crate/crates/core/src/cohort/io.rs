//! Cohort ingestion and serialization.
//!
//! JSONL: one patient per line,
//! `{"id": 0, "label": 1, "covariates": {...}, "visits": [["M:a", "D:b"], ...]}`.
//!
//! CSV (long form, one row per patient/visit/code):
//! `patient_id,label,age_at_start,observation_window,gender,race,ethnicity,brain_injury,brain_tumor,stroke,visit,code`.
//! Booleans are `0`/`1`. A patient without visits is one row with empty
//! `visit` and `code` fields. Rows of a visit share the same `visit` number,
//! and visits are ordered by that number.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Cohort, Covariates, Entity, EntityKind, Label, Patient, Provenance, Visit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortFormat {
    Jsonl,
    Csv,
}

impl CohortFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" | "ndjson" => Some(CohortFormat::Jsonl),
            "csv" => Some(CohortFormat::Csv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: CohortFormat,
    /// Keep only codes carried by more than this fraction of patients.
    pub min_prevalence: Option<f64>,
}

impl LoadOptions {
    pub fn jsonl() -> Self {
        Self {
            format: CohortFormat::Jsonl,
            min_prevalence: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientRecord {
    id: usize,
    label: i64,
    covariates: Covariates,
    visits: Vec<Vec<String>>,
}

struct RawPatient {
    line: usize,
    id: usize,
    label: Label,
    covariates: Covariates,
    visits: Vec<Vec<String>>,
}

pub fn load_cohort(path: &Path, opts: &LoadOptions) -> Result<Cohort> {
    let raw = match opts.format {
        CohortFormat::Jsonl => read_jsonl(path, BufReader::new(File::open(path)?))?,
        CohortFormat::Csv => read_csv(path)?,
    };
    assemble(path, raw, opts.min_prevalence)
}

/// Parses JSONL text already in memory.
pub fn cohort_from_jsonl_str(text: &str, min_prevalence: Option<f64>) -> Result<Cohort> {
    let path = PathBuf::from("<memory>");
    let raw = read_jsonl(&path, text.as_bytes())?;
    assemble(&path, raw, min_prevalence)
}

fn ingest_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_jsonl(path: &Path, reader: impl BufRead) -> Result<Vec<RawPatient>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord =
            serde_json::from_str(&line).map_err(|e| ingest_err(path, line_no, e.to_string()))?;
        let label = Label::from_sign(rec.label)
            .ok_or_else(|| ingest_err(path, line_no, format!("label must be 1 or -1, got {}", rec.label)))?;
        out.push(RawPatient {
            line: line_no,
            id: rec.id,
            label,
            covariates: rec.covariates,
            visits: rec.visits,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    patient_id: usize,
    label: i64,
    age_at_start: f64,
    observation_window: f64,
    gender: u32,
    race: u32,
    ethnicity: u32,
    brain_injury: u8,
    brain_tumor: u8,
    stroke: u8,
    visit: Option<usize>,
    code: Option<String>,
}

fn read_csv(path: &Path) -> Result<Vec<RawPatient>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut by_id: BTreeMap<usize, (RawPatient, BTreeMap<usize, Vec<String>>)> = BTreeMap::new();
    let mut order = Vec::new();
    for (n, row) in reader.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let line_no = n + 2;
        let row = row.map_err(|e| ingest_err(path, line_no, e.to_string()))?;
        let label = Label::from_sign(row.label)
            .ok_or_else(|| ingest_err(path, line_no, format!("label must be 1 or -1, got {}", row.label)))?;
        let flag = |v: u8, name: &str| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(ingest_err(path, line_no, format!("{name} must be 0 or 1"))),
        };
        let covariates = Covariates {
            age_at_start: row.age_at_start,
            observation_window: row.observation_window,
            gender: row.gender,
            race: row.race,
            ethnicity: row.ethnicity,
            brain_injury: flag(row.brain_injury, "brain_injury")?,
            brain_tumor: flag(row.brain_tumor, "brain_tumor")?,
            stroke: flag(row.stroke, "stroke")?,
        };
        let entry = by_id.entry(row.patient_id).or_insert_with(|| {
            order.push(row.patient_id);
            (
                RawPatient {
                    line: line_no,
                    id: row.patient_id,
                    label,
                    covariates: covariates.clone(),
                    visits: Vec::new(),
                },
                BTreeMap::new(),
            )
        });
        if entry.0.label != label || entry.0.covariates != covariates {
            return Err(ingest_err(
                path,
                line_no,
                format!("patient {} has inconsistent label or covariates across rows", row.patient_id),
            ));
        }
        match (row.visit, row.code) {
            (Some(v), Some(code)) if !code.is_empty() => entry.1.entry(v).or_default().push(code),
            (None, None) => {}
            (Some(_), _) => {
                return Err(ingest_err(path, line_no, "visit row without a code"));
            }
            (None, Some(_)) => return Err(ingest_err(path, line_no, "code without a visit number")),
        }
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let (mut raw, visits) = by_id.remove(&id).expect("id recorded");
            raw.visits = visits.into_values().collect();
            raw
        })
        .collect())
}

fn assemble(path: &Path, raw: Vec<RawPatient>, min_prevalence: Option<f64>) -> Result<Cohort> {
    let mut seen = BTreeSet::new();
    for p in &raw {
        if !seen.insert(p.id) {
            return Err(Error::Validation(format!(
                "duplicate patient id {} (line {})",
                p.id, p.line
            )));
        }
        for (t, v) in p.visits.iter().enumerate() {
            if v.is_empty() {
                return Err(Error::Validation(format!(
                    "patient {} visit {t} has no entities (line {})",
                    p.id, p.line
                )));
            }
            for code in v {
                if EntityKind::from_code(code).is_none() {
                    return Err(ingest_err(
                        path,
                        p.line,
                        format!("code `{code}` lacks an `M:` or `D:` kind prefix"),
                    ));
                }
            }
        }
    }

    // patients carrying each code
    let mut prevalence: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &raw {
        let codes: BTreeSet<&str> = p.visits.iter().flatten().map(String::as_str).collect();
        for c in codes {
            *prevalence.entry(c).or_default() += 1;
        }
    }
    let n = raw.len().max(1) as f64;
    let vocabulary: Vec<Entity> = prevalence
        .iter()
        .filter(|(_, &count)| min_prevalence.is_none_or(|m| count as f64 / n > m))
        .enumerate()
        .map(|(index, (code, _))| Entity {
            index,
            kind: EntityKind::from_code(code).expect("checked above"),
            code: code.to_string(),
        })
        .collect();
    let index: BTreeMap<&str, usize> = vocabulary.iter().map(|e| (e.code.as_str(), e.index)).collect();

    let mut patients: Vec<Patient> = raw
        .into_iter()
        .map(|p| {
            let visits = p
                .visits
                .iter()
                .map(|codes| codes.iter().filter_map(|c| index.get(c.as_str()).copied()).collect::<Vec<_>>())
                .filter(|v| !v.is_empty())
                .enumerate()
                .map(|(ordinal, e)| Visit::new(ordinal, e))
                .collect();
            Patient {
                id: p.id,
                visits,
                label: p.label,
                covariates: p.covariates,
            }
        })
        .collect();
    patients.sort_by_key(|p| p.id);
    Cohort::new(vocabulary, patients, Provenance::Ingested)
}

fn record(cohort: &Cohort, p: &Patient) -> PatientRecord {
    let vocab = cohort.vocabulary();
    PatientRecord {
        id: p.id,
        label: p.label.as_i64(),
        covariates: p.covariates.clone(),
        visits: p
            .visits
            .iter()
            .map(|v| v.entities.iter().map(|&e| vocab[e].code.clone()).collect())
            .collect(),
    }
}

pub fn cohort_to_jsonl_string(cohort: &Cohort) -> String {
    let mut out = String::new();
    for p in cohort.patients() {
        out.push_str(&serde_json::to_string(&record(cohort, p)).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(cohort_to_jsonl_string(cohort).as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn save_csv(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let vocab = cohort.vocabulary();
    for p in cohort.patients() {
        let c = &p.covariates;
        let row = |visit: Option<usize>, code: Option<String>| CsvRow {
            patient_id: p.id,
            label: p.label.as_i64(),
            age_at_start: c.age_at_start,
            observation_window: c.observation_window,
            gender: c.gender,
            race: c.race,
            ethnicity: c.ethnicity,
            brain_injury: u8::from(c.brain_injury),
            brain_tumor: u8::from(c.brain_tumor),
            stroke: u8::from(c.stroke),
            visit,
            code,
        };
        if p.visits.is_empty() {
            w.serialize(row(None, None))?;
        }
        for v in &p.visits {
            for &e in &v.entities {
                w.serialize(row(Some(v.ordinal), Some(vocab[e].code.clone())))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const COV: &str = r#"{"age_at_start":60.0,"observation_window":2.0,"gender":0,"race":1,"ethnicity":0,"brain_injury":false,"brain_tumor":false,"stroke":true}"#;

    fn line(id: usize, label: i64, visits: &str) -> String {
        format!(r#"{{"id":{id},"label":{label},"covariates":{COV},"visits":{visits}}}"#)
    }

    #[test]
    fn two_patients_three_codes() {
        let text = [
            line(0, 1, r#"[["M:a","D:x"],["D:x"]]"#),
            line(1, -1, r#"[["M:b"]]"#),
        ]
        .join("\n");
        let c = cohort_from_jsonl_str(&text, None).unwrap();
        assert_eq!(c.n_patients(), 2);
        assert_eq!(c.n_entities(), 3);
        let codes: Vec<_> = c.vocabulary().iter().map(|e| e.code.as_str()).collect();
        assert_eq!(codes, ["D:x", "M:a", "M:b"]);
    }

    #[test]
    fn empty_visit_is_a_validation_error() {
        let text = line(0, 1, r#"[["M:a"],[]]"#);
        assert!(matches!(
            cohort_from_jsonl_str(&text, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duplicate_id_is_a_validation_error() {
        let text = [line(0, 1, r#"[["M:a"]]"#), line(0, -1, r#"[["M:a"]]"#)].join("\n");
        assert!(matches!(
            cohort_from_jsonl_str(&text, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn parse_error_reports_line_number() {
        let text = [line(0, 1, r#"[["M:a"]]"#), "{not json".to_string()].join("\n");
        match cohort_from_jsonl_str(&text, None) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected ingest error, got {other:?}"),
        }
        let bad_label = line(0, 2, r#"[["M:a"]]"#);
        assert!(matches!(
            cohort_from_jsonl_str(&bad_label, None),
            Err(Error::Ingest { line: 1, .. })
        ));
    }

    #[test]
    fn duplicated_codes_in_visit_collapse() {
        let text = line(0, 1, r#"[["M:a","M:a","D:x"]]"#);
        let c = cohort_from_jsonl_str(&text, None).unwrap();
        assert_eq!(c.patients()[0].visits[0].entities.len(), 2);
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(CohortFormat::from_path(Path::new("a.jsonl")), Some(CohortFormat::Jsonl));
        assert_eq!(CohortFormat::from_path(Path::new("a.csv")), Some(CohortFormat::Csv));
        assert_eq!(CohortFormat::from_path(Path::new("a.txt")), None);
    }
}
