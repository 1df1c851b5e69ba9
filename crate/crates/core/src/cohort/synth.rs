//! Seeded synthetic cohorts with planted transition phenotypes.
//!
//! Entities are split into `rank` disjoint groups. Each group carries a
//! per-entity inclusion probability; a patient follows one group for its
//! whole timeline, drawing every visit independently from that group, so the
//! expected transition slice is the rank-one outer product of the group's
//! inclusion profile with itself. With `noise_rate > 0` each drawn entity is
//! replaced by a uniformly random one with that probability.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Cohort, Covariates, Entity, EntityKind, Label, Patient, PlantedTruth, Provenance, Visit};
use crate::error::{Error, Result};
use crate::special::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub patients: usize,
    pub entities: usize,
    pub rank: usize,
    /// Inclusive range of visits per patient.
    pub visits_per_patient: (usize, usize),
    pub noise_rate: f64,
    pub seed: u64,
    /// Scale of the planted label logits.
    pub label_temperature: f64,
    pub medication_fraction: f64,
    /// Shift (in standard deviations) of positive-label covariates.
    pub covariate_shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patients: 200,
            entities: 40,
            rank: 5,
            visits_per_patient: (4, 8),
            noise_rate: 0.05,
            seed: 0,
            label_temperature: 3.0,
            medication_fraction: 0.5,
            covariate_shift: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patients < 2 {
            return fail(format!("patients must be >= 2, got {}", self.patients));
        }
        if self.entities < 4 {
            return fail(format!("entities must be >= 4, got {}", self.entities));
        }
        if self.rank < 1 {
            return fail("rank must be >= 1".into());
        }
        if self.entities < self.rank {
            return fail(format!(
                "entities ({}) must be at least the planted rank ({})",
                self.entities, self.rank
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return fail(format!("noise_rate must be in [0, 1), got {}", self.noise_rate));
        }
        let (lo, hi) = self.visits_per_patient;
        if lo < 1 || lo > hi {
            return fail(format!("invalid visits_per_patient range ({lo}, {hi})"));
        }
        if !(0.0..=1.0).contains(&self.medication_fraction) {
            return fail("medication_fraction must be in [0, 1]".into());
        }
        if !self.label_temperature.is_finite() || self.label_temperature < 0.0 {
            return fail("label_temperature must be finite and >= 0".into());
        }
        Ok(())
    }
}

fn vocabulary(entities: usize, medication_fraction: f64) -> Vec<Entity> {
    let meds = ((entities as f64) * medication_fraction).round() as usize;
    let mut codes: Vec<String> = (0..entities)
        .map(|j| {
            if j < meds {
                format!("M:{j:04}")
            } else {
                format!("D:{j:04}")
            }
        })
        .collect();
    codes.sort();
    codes
        .into_iter()
        .enumerate()
        .map(|(index, code)| Entity {
            index,
            kind: EntityKind::from_code(&code).expect("generated prefix"),
            code,
        })
        .collect()
}

fn bernoulli_shift(p: f64, shift: f64) -> f64 {
    (p + shift * (p * (1.0 - p)).sqrt()).clamp(0.01, 0.99)
}

/// Draws one covariate record; `shift` moves every covariate by that many
/// standard deviations.
pub fn synthetic_covariates<R: Rng + ?Sized>(rng: &mut R, shift: f64) -> Covariates {
    let age = Normal::new(60.0 + 10.0 * shift, 10.0).expect("valid normal");
    let window = Normal::new(4.0 + 2.0 * shift, 2.0).expect("valid normal");
    let gender_p = bernoulli_shift(0.5, shift);
    let eth_p = bernoulli_shift(0.1, shift);
    let race_1 = bernoulli_shift(0.2, shift);
    let race_2 = 0.1;
    let race = {
        let u: f64 = rng.random();
        if u < race_1 {
            1
        } else if u < race_1 + race_2 {
            2
        } else {
            0
        }
    };
    Covariates {
        age_at_start: age.sample(rng).max(0.0),
        observation_window: window.sample(rng).max(0.0),
        gender: u32::from(rng.random_bool(gender_p)),
        race,
        ethnicity: u32::from(rng.random_bool(eth_p)),
        brain_injury: rng.random_bool(bernoulli_shift(0.05, shift)),
        brain_tumor: rng.random_bool(bernoulli_shift(0.03, shift)),
        stroke: rng.random_bool(bernoulli_shift(0.15, shift)),
    }
}

/// Generates a synthetic phenotyping cohort; a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let j = cfg.entities;
    let rank = cfg.rank;
    let vocab = vocabulary(j, cfg.medication_fraction);

    let mut perm: Vec<usize> = (0..j).collect();
    perm.shuffle(&mut rng);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); rank];
    for (pos, &e) in perm.iter().enumerate() {
        groups[pos % rank].push(e);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    // Raw draws are rescaled so every group has the same expected visit
    // size (half its entities); otherwise count slices of heavy groups
    // dominate the reconstruction error.
    let mut inclusion: Vec<f64> = (0..j).map(|_| rng.random_range(0.25..0.75)).collect();
    for g in &groups {
        let total: f64 = g.iter().map(|&e| inclusion[e]).sum();
        let scale = 0.5 * g.len() as f64 / total;
        for &e in g {
            inclusion[e] = (inclusion[e] * scale).clamp(0.05, 0.95);
        }
    }

    let mut true_b = Array2::<f64>::zeros((j, rank));
    for (r, g) in groups.iter().enumerate() {
        let total: f64 = g.iter().map(|&e| inclusion[e]).sum();
        for &e in g {
            true_b[[e, r]] = inclusion[e] / total;
        }
    }
    let true_c = true_b.clone();
    let weight = |r: usize| if r.is_multiple_of(2) { 1.0 } else { -1.0 };

    let mut memberships = Array2::<f64>::zeros((cfg.patients, rank));
    let mut logits = Vec::with_capacity(cfg.patients);
    let mut patients = Vec::with_capacity(cfg.patients);
    for id in 0..cfg.patients {
        let r = rng.random_range(0..rank);
        memberships[[id, r]] = 1.0;
        let logit = cfg.label_temperature * weight(r);
        logits.push(logit);
        let label = if rng.random_bool(sigmoid(logit)) {
            Label::Positive
        } else {
            Label::Negative
        };
        let n_visits = rng.random_range(cfg.visits_per_patient.0..=cfg.visits_per_patient.1);
        let group = &groups[r];
        let visits = (0..n_visits)
            .map(|t| {
                let mut drawn: Vec<usize> = group
                    .iter()
                    .copied()
                    .filter(|&e| rng.random_bool(inclusion[e]))
                    .collect();
                if drawn.is_empty() {
                    let total: f64 = group.iter().map(|&e| inclusion[e]).sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = group[group.len() - 1];
                    for &e in group {
                        u -= inclusion[e];
                        if u <= 0.0 {
                            pick = e;
                            break;
                        }
                    }
                    drawn.push(pick);
                }
                if cfg.noise_rate > 0.0 {
                    for e in &mut drawn {
                        if rng.random_bool(cfg.noise_rate) {
                            *e = rng.random_range(0..j);
                        }
                    }
                }
                Visit::new(t, drawn)
            })
            .collect();
        let shift = if label.is_positive() { cfg.covariate_shift } else { 0.0 };
        patients.push(Patient {
            id,
            visits,
            label,
            covariates: synthetic_covariates(&mut rng, shift),
        });
    }

    let planted = PlantedTruth {
        rank,
        true_b,
        true_c,
        true_memberships: memberships,
        label_logits: logits,
    };
    Cohort::new(
        vocab,
        patients,
        Provenance::Synthetic {
            seed: cfg.seed,
            planted: Box::new(planted),
        },
    )
}

/// Exposed/unexposed pools for propensity matching: covariates only, with
/// the label carrying the downstream outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub cases: usize,
    pub controls: usize,
    /// Covariate shift of the cases, in standard deviations.
    pub shift_sd: f64,
    pub outcome_rate_controls: f64,
    pub outcome_rate_cases: f64,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            cases: 1000,
            controls: 5000,
            shift_sd: 0.5,
            outcome_rate_controls: 0.011,
            outcome_rate_cases: 0.023,
            seed: 0,
        }
    }
}

pub fn generate_exposure_pools(cfg: &PoolConfig) -> Result<(Cohort, Cohort)> {
    if cfg.cases == 0 || cfg.controls == 0 {
        return Err(Error::Config("both pools need at least one patient".into()));
    }
    for rate in [cfg.outcome_rate_cases, cfg.outcome_rate_controls] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("outcome rate {rate} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool = |n: usize, shift: f64, rate: f64| {
        let patients = (0..n)
            .map(|id| {
                let covariates = synthetic_covariates(&mut rng, shift);
                let label = if rng.random_bool(rate) {
                    Label::Positive
                } else {
                    Label::Negative
                };
                Patient {
                    id,
                    visits: Vec::new(),
                    label,
                    covariates,
                }
            })
            .collect();
        Cohort::new(Vec::new(), patients, Provenance::Ingested)
    };
    let cases = pool(cfg.cases, cfg.shift_sd, cfg.outcome_rate_cases)?;
    let controls = pool(cfg.controls, 0.0, cfg.outcome_rate_controls)?;
    Ok((cases, controls))
}
