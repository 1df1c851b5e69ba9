//! Sparse patient x from-entity x to-entity transition tensor.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TensorMode {
    Counts,
    /// Each non-empty patient slice sums to one.
    #[default]
    PatientNormalized,
}

/// One stored cell of a patient slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub from: usize,
    pub to: usize,
    pub value: f64,
}

/// Coordinate storage grouped by patient; within a slice entries are sorted
/// by `(from, to)` and every stored value is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTensor {
    n_entities: usize,
    slices: Vec<Vec<Entry>>,
    mode: TensorMode,
}

impl TransitionTensor {
    pub fn from_slices(n_entities: usize, mut slices: Vec<Vec<Entry>>, mode: TensorMode) -> Result<Self> {
        for (i, s) in slices.iter_mut().enumerate() {
            s.sort_by_key(|e| (e.from, e.to));
            if s.windows(2).any(|w| (w[0].from, w[0].to) == (w[1].from, w[1].to)) {
                return Err(Error::Validation(format!("patient {i} has duplicate cells")));
            }
            for e in s.iter() {
                if e.from >= n_entities || e.to >= n_entities {
                    return Err(Error::Dimension(format!(
                        "cell ({i}, {}, {}) outside {n_entities} entities",
                        e.from, e.to
                    )));
                }
                if !(e.value > 0.0 && e.value.is_finite()) {
                    return Err(Error::Validation(format!(
                        "cell ({i}, {}, {}) has non-positive value {}",
                        e.from, e.to, e.value
                    )));
                }
            }
            if mode == TensorMode::PatientNormalized && !s.is_empty() {
                let total: f64 = s.iter().map(|e| e.value).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "normalized slice {i} sums to {total}"
                    )));
                }
            }
        }
        Ok(Self {
            n_entities,
            slices,
            mode,
        })
    }

    /// `(I, J, J)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.slices.len(), self.n_entities, self.n_entities)
    }

    pub fn n_patients(&self) -> usize {
        self.slices.len()
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn mode(&self) -> TensorMode {
        self.mode
    }

    pub fn slices(&self) -> &[Vec<Entry>] {
        &self.slices
    }

    pub fn slice(&self, patient: usize) -> &[Entry] {
        &self.slices[patient]
    }

    pub fn nnz(&self) -> usize {
        self.slices.iter().map(Vec::len).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.slices.iter().flatten().map(|e| e.value).sum()
    }

    /// Frobenius norm squared.
    pub fn squared_norm(&self) -> f64 {
        self.slices.iter().flatten().map(|e| e.value * e.value).sum()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.slices[i]
            .binary_search_by_key(&(j, k), |e| (e.from, e.to))
            .map(|p| self.slices[i][p].value)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Array3<f64> {
        let (i, j, k) = self.shape();
        let mut d = Array3::zeros((i, j, k));
        for (p, s) in self.slices.iter().enumerate() {
            for e in s {
                d[[p, e.from, e.to]] = e.value;
            }
        }
        d
    }

    /// Same tensor with each non-empty slice scaled to unit sum.
    pub fn normalized(&self) -> TransitionTensor {
        let slices = self
            .slices
            .iter()
            .map(|s| {
                let total: f64 = s.iter().map(|e| e.value).sum();
                s.iter()
                    .map(|e| Entry {
                        value: e.value / total,
                        ..*e
                    })
                    .collect()
            })
            .collect();
        TransitionTensor {
            n_entities: self.n_entities,
            slices,
            mode: TensorMode::PatientNormalized,
        }
    }

    /// Slices for `patients`, in that order.
    pub fn select(&self, patients: &[usize]) -> TransitionTensor {
        TransitionTensor {
            n_entities: self.n_entities,
            slices: patients.iter().map(|&p| self.slices[p].clone()).collect(),
            mode: self.mode,
        }
    }
}

/// Counts every ordered pair `(e_from in visit t, e_to in visit t+1)` per
/// patient; optionally drops `e_from == e_to`.
pub fn build_transition_tensor(cohort: &Cohort, mode: TensorMode, include_self_loops: bool) -> TransitionTensor {
    let slices = par::map_slice(cohort.patients(), |p| {
        let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (a, b) in p.transitions() {
            for &from in &a.entities {
                for &to in &b.entities {
                    if include_self_loops || from != to {
                        *counts.entry((from, to)).or_default() += 1.0;
                    }
                }
            }
        }
        let total: f64 = counts.values().sum();
        counts
            .into_iter()
            .map(|((from, to), c)| Entry {
                from,
                to,
                value: match mode {
                    TensorMode::Counts => c,
                    TensorMode::PatientNormalized => c / total,
                },
            })
            .collect::<Vec<_>>()
    });
    TransitionTensor {
        n_entities: cohort.n_entities(),
        slices,
        mode,
    }
}

/// Population-average transition probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTransitionMatrix {
    pub values: Array2<f64>,
}

/// Entrywise mean of normalized slices over patients with at least one
/// transition. Count tensors are normalized first.
pub fn mean_transition_matrix(tensor: &TransitionTensor) -> Result<MeanTransitionMatrix> {
    let normalized;
    let t = match tensor.mode {
        TensorMode::PatientNormalized => tensor,
        TensorMode::Counts => {
            normalized = tensor.normalized();
            &normalized
        }
    };
    let j = t.n_entities;
    let mut values = Array2::<f64>::zeros((j, j));
    let mut active = 0usize;
    for s in &t.slices {
        if s.is_empty() {
            continue;
        }
        active += 1;
        for e in s {
            values[[e.from, e.to]] += e.value;
        }
    }
    if active == 0 {
        return Err(Error::Precondition("tensor holds no transitions".into()));
    }
    values.mapv_inplace(|v| v / active as f64);
    Ok(MeanTransitionMatrix { values })
}

/// Coordinate-list CSV `patient_id,from_code,to_code,value`.
pub fn save_tensor(tensor: &TransitionTensor, codes: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "from_code", "to_code", "value"])?;
    for (i, s) in tensor.slices.iter().enumerate() {
        for e in s {
            w.write_record([
                i.to_string(),
                codes[e.from].clone(),
                codes[e.to].clone(),
                e.value.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct TensorRow {
    patient_id: usize,
    from_code: String,
    to_code: String,
    value: f64,
}

/// Reads a coordinate-list CSV against a known vocabulary and patient count.
pub fn load_tensor(path: &Path, codes: &[String], n_patients: usize, mode: TensorMode) -> Result<TransitionTensor> {
    let index: HashMap<&str, usize> = codes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut slices: Vec<Vec<Entry>> = vec![Vec::new(); n_patients];
    let mut r = csv::Reader::from_path(path)?;
    for (n, row) in r.deserialize::<TensorRow>().enumerate() {
        let line = n + 2;
        let err = |m: String| Error::Ingest {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let row = row.map_err(|e| err(e.to_string()))?;
        let from = *index
            .get(row.from_code.as_str())
            .ok_or_else(|| err(format!("unknown code {}", row.from_code)))?;
        let to = *index
            .get(row.to_code.as_str())
            .ok_or_else(|| err(format!("unknown code {}", row.to_code)))?;
        let slice = slices
            .get_mut(row.patient_id)
            .ok_or_else(|| err(format!("patient {} outside 0..{n_patients}", row.patient_id)))?;
        slice.push(Entry {
            from,
            to,
            value: row.value,
        });
    }
    TransitionTensor::from_slices(codes.len(), slices, mode)
}
