//! Longitudinal cohort data model.
//!
//! A [`Cohort`] is a dense vocabulary of coded entities plus an ordered
//! sequence of visits per patient, a binary outcome label and a fixed set of
//! matching covariates. Values are immutable once validated.

mod io;
mod synth;

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{cohort_from_jsonl_str, cohort_to_jsonl_string, load_cohort, save_csv, save_jsonl, CohortFormat, LoadOptions};
pub use synth::{generate_exposure_pools, generate_synthetic, synthetic_covariates, PoolConfig, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityKind {
    Medication,
    Diagnosis,
}

impl EntityKind {
    /// Kind encoded in a code's prefix: `M:` for medications, `D:` for diagnoses.
    pub fn from_code(code: &str) -> Option<Self> {
        if code.starts_with("M:") {
            Some(EntityKind::Medication)
        } else if code.starts_with("D:") {
            Some(EntityKind::Diagnosis)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub index: usize,
    pub kind: EntityKind,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub ordinal: usize,
    /// Sorted, duplicate-free vocabulary indices.
    pub entities: Vec<usize>,
}

impl Visit {
    pub fn new(ordinal: usize, mut entities: Vec<usize>) -> Self {
        entities.sort_unstable();
        entities.dedup();
        Self { ordinal, entities }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_sign(value: i64) -> Option<Self> {
        match value {
            1 => Some(Label::Positive),
            -1 => Some(Label::Negative),
            _ => None,
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    pub fn as_i64(self) -> i64 {
        match self {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_i64())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Covariates {
    pub age_at_start: f64,
    pub observation_window: f64,
    pub gender: u32,
    pub race: u32,
    pub ethnicity: u32,
    pub brain_injury: bool,
    pub brain_tumor: bool,
    pub stroke: bool,
}

impl Default for Covariates {
    fn default() -> Self {
        Self {
            age_at_start: 60.0,
            observation_window: 3.0,
            gender: 0,
            race: 0,
            ethnicity: 0,
            brain_injury: false,
            brain_tumor: false,
            stroke: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: usize,
    pub visits: Vec<Visit>,
    pub label: Label,
    pub covariates: Covariates,
}

impl Patient {
    /// Consecutive visit pairs `(t, t + 1)`.
    pub fn transitions(&self) -> impl Iterator<Item = (&Visit, &Visit)> {
        self.visits.windows(2).map(|w| (&w[0], &w[1]))
    }
}

/// Generating factors of a synthetic cohort, kept for recovery checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub rank: usize,
    /// J x R, columns with unit L1 norm.
    pub true_b: Array2<f64>,
    /// J x R, columns with unit L1 norm.
    pub true_c: Array2<f64>,
    /// I x R.
    pub true_memberships: Array2<f64>,
    pub label_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Ingested,
    Synthetic { seed: u64, planted: Box<PlantedTruth> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    vocabulary: Vec<Entity>,
    patients: Vec<Patient>,
    provenance: Provenance,
}

impl Cohort {
    /// Validates and assembles a cohort.
    pub fn new(vocabulary: Vec<Entity>, patients: Vec<Patient>, provenance: Provenance) -> Result<Self> {
        for (i, e) in vocabulary.iter().enumerate() {
            if e.index != i {
                return Err(Error::Validation(format!(
                    "vocabulary entry `{}` has index {} at position {i}",
                    e.code, e.index
                )));
            }
        }
        let j = vocabulary.len();
        for (i, p) in patients.iter().enumerate() {
            if p.id != i {
                return Err(Error::Validation(format!(
                    "patient ids must be dense 0..{}; found {} at position {i}",
                    patients.len(),
                    p.id
                )));
            }
            let mut last: Option<usize> = None;
            for v in &p.visits {
                if v.entities.is_empty() {
                    return Err(Error::Validation(format!(
                        "patient {} has an empty visit at ordinal {}",
                        p.id, v.ordinal
                    )));
                }
                if last.is_some_and(|o| v.ordinal <= o) {
                    return Err(Error::Validation(format!(
                        "patient {} visit ordinals are not strictly increasing",
                        p.id
                    )));
                }
                last = Some(v.ordinal);
                if v.entities.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Validation(format!(
                        "patient {} visit {} entities are not a sorted set",
                        p.id, v.ordinal
                    )));
                }
                if let Some(&bad) = v.entities.iter().find(|&&e| e >= j) {
                    return Err(Error::Validation(format!(
                        "patient {} references entity {bad} outside a vocabulary of {j}",
                        p.id
                    )));
                }
            }
        }
        Ok(Self {
            vocabulary,
            patients,
            provenance,
        })
    }

    pub fn vocabulary(&self) -> &[Entity] {
        &self.vocabulary
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn planted(&self) -> Option<&PlantedTruth> {
        match &self.provenance {
            Provenance::Synthetic { planted, .. } => Some(planted),
            Provenance::Ingested => None,
        }
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_entities(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.patients.iter().map(|p| p.label).collect()
    }

    pub fn covariates(&self) -> Vec<Covariates> {
        self.patients.iter().map(|p| p.covariates.clone()).collect()
    }

    pub fn code_index(&self) -> HashMap<&str, usize> {
        self.vocabulary
            .iter()
            .map(|e| (e.code.as_str(), e.index))
            .collect()
    }

    pub fn kinds(&self) -> Vec<EntityKind> {
        self.vocabulary.iter().map(|e| e.kind).collect()
    }

    /// Returns a cohort holding only `ids`, renumbered densely in the given
    /// order. Planted truth is dropped.
    pub fn subset(&self, ids: &[usize]) -> Result<Cohort> {
        let patients = ids
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let p = self.patients.get(old).ok_or_else(|| {
                    Error::Precondition(format!("patient {old} not in cohort"))
                })?;
                Ok(Patient {
                    id: new_id,
                    ..p.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Cohort::new(self.vocabulary.clone(), patients, Provenance::Ingested)
    }
}
