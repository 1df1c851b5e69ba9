//! Cohort-construction statistics: propensity scores, greedy caliper
//! matching under a standardized-bias budget, and the continuity-corrected
//! chi-square test on the resulting exposure/outcome table.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cohort::Covariates;
use crate::error::{Error, Result};
use crate::logistic::{fit_logistic, LogisticOptions};
use crate::special::{chi2_ln_sf, ln_to_log10, logit, sigmoid};

/// Covariate names in encoding and reporting order.
pub const COVARIATE_NAMES: [&str; 8] = [
    "age_at_start",
    "observation_window",
    "gender",
    "race",
    "ethnicity",
    "brain_injury",
    "brain_tumor",
    "stroke",
];

/// Feature encoding for the propensity model.
///
/// Order: standardized age, standardized observation window, then one-hot
/// indicators for gender, race and ethnicity levels (lowest level is the
/// reference and is dropped), then the three risk-factor flags. Features
/// that are constant in the fitting data are left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateEncoder {
    numeric: Vec<(usize, f64, f64)>,
    gender_levels: Vec<u32>,
    race_levels: Vec<u32>,
    ethnicity_levels: Vec<u32>,
    flags: Vec<usize>,
}

fn numeric_value(c: &Covariates, which: usize) -> f64 {
    match which {
        0 => c.age_at_start,
        _ => c.observation_window,
    }
}

fn flag_value(c: &Covariates, which: usize) -> bool {
    match which {
        0 => c.brain_injury,
        1 => c.brain_tumor,
        _ => c.stroke,
    }
}

fn levels(values: impl Iterator<Item = u32>) -> Vec<u32> {
    let set: BTreeSet<u32> = values.collect();
    set.into_iter().skip(1).collect()
}

impl CovariateEncoder {
    pub fn fit(covs: &[Covariates]) -> Self {
        let n = covs.len().max(1) as f64;
        let mut numeric = Vec::new();
        for which in 0..2 {
            let mean = covs.iter().map(|c| numeric_value(c, which)).sum::<f64>() / n;
            let var = covs
                .iter()
                .map(|c| (numeric_value(c, which) - mean).powi(2))
                .sum::<f64>()
                / n;
            if var > 0.0 {
                numeric.push((which, mean, var.sqrt()));
            }
        }
        let flags = (0..3)
            .filter(|&w| {
                let on = covs.iter().filter(|c| flag_value(c, w)).count();
                on > 0 && on < covs.len()
            })
            .collect();
        Self {
            numeric,
            gender_levels: levels(covs.iter().map(|c| c.gender)),
            race_levels: levels(covs.iter().map(|c| c.race)),
            ethnicity_levels: levels(covs.iter().map(|c| c.ethnicity)),
            flags,
        }
    }

    pub fn n_features(&self) -> usize {
        self.numeric.len()
            + self.gender_levels.len()
            + self.race_levels.len()
            + self.ethnicity_levels.len()
            + self.flags.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .numeric
            .iter()
            .map(|&(w, _, _)| COVARIATE_NAMES[w].to_string())
            .collect();
        names.extend(self.gender_levels.iter().map(|l| format!("gender={l}")));
        names.extend(self.race_levels.iter().map(|l| format!("race={l}")));
        names.extend(self.ethnicity_levels.iter().map(|l| format!("ethnicity={l}")));
        names.extend(self.flags.iter().map(|&w| COVARIATE_NAMES[5 + w].to_string()));
        names
    }

    pub fn encode(&self, c: &Covariates) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.n_features());
        row.extend(
            self.numeric
                .iter()
                .map(|&(w, mean, sd)| (numeric_value(c, w) - mean) / sd),
        );
        let one_hot = |levels: &[u32], v: u32, row: &mut Vec<f64>| {
            row.extend(levels.iter().map(|&l| if l == v { 1.0 } else { 0.0 }));
        };
        one_hot(&self.gender_levels, c.gender, &mut row);
        one_hot(&self.race_levels, c.race, &mut row);
        one_hot(&self.ethnicity_levels, c.ethnicity, &mut row);
        row.extend(
            self.flags
                .iter()
                .map(|&w| if flag_value(c, w) { 1.0 } else { 0.0 }),
        );
        row
    }

    pub fn design(&self, covs: &[Covariates]) -> Array2<f64> {
        let p = self.n_features();
        let mut x = Array2::<f64>::zeros((covs.len(), p));
        for (i, c) in covs.iter().enumerate() {
            x.row_mut(i).assign(&Array1::from(self.encode(c)));
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub encoder: CovariateEncoder,
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// In-sample accuracy at the 0.5 threshold.
    pub accuracy: f64,
}

impl PropensityModel {
    pub fn score(&self, c: &Covariates) -> f64 {
        let eta: f64 = self
            .encoder
            .encode(c)
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .sum::<f64>()
            + self.intercept;
        sigmoid(eta)
    }
}

pub fn fit_propensity(covs: &[Covariates], exposure: &[bool], l2: f64) -> Result<PropensityModel> {
    fit_propensity_with(
        covs,
        exposure,
        &LogisticOptions {
            l2,
            ..Default::default()
        },
    )
}

/// Penalized logistic propensity model fitted by Newton iterations.
pub fn fit_propensity_with(
    covs: &[Covariates],
    exposure: &[bool],
    opts: &LogisticOptions,
) -> Result<PropensityModel> {
    if covs.len() != exposure.len() {
        return Err(Error::Dimension(format!(
            "{} covariate rows but {} exposure flags",
            covs.len(),
            exposure.len()
        )));
    }
    if !opts.l2.is_finite() || opts.l2 < 0.0 {
        return Err(Error::Config("l2 must be finite and >= 0".into()));
    }
    let encoder = CovariateEncoder::fit(covs);
    let x = encoder.design(covs);
    let fit = fit_logistic(x.view(), exposure, opts)?;
    let eta = fit.linear_predictor(x.view());
    let correct = eta
        .iter()
        .zip(exposure)
        .filter(|(&e, &y)| (e >= 0.0) == y)
        .count();
    Ok(PropensityModel {
        encoder,
        weights: fit.weights.to_vec(),
        intercept: fit.intercept,
        accuracy: correct as f64 / exposure.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bias {
    /// Percentage; `+inf` when degenerate.
    pub percent: f64,
    /// Both samples are constant but at different values.
    pub degenerate: bool,
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// `100 |mean_case - mean_control| / sqrt((var_case + var_control) / 2)`
/// with population variances.
pub fn standardized_bias(case: &[f64], control: &[f64]) -> Result<Bias> {
    if case.is_empty() || control.is_empty() {
        return Err(Error::Precondition("standardized bias needs non-empty samples".into()));
    }
    let (m1, v1) = moments(case);
    let (m0, v0) = moments(control);
    let pooled = ((v1 + v0) / 2.0).sqrt();
    let diff = (m1 - m0).abs();
    if pooled == 0.0 {
        return Ok(if diff == 0.0 {
            Bias {
                percent: 0.0,
                degenerate: false,
            }
        } else {
            Bias {
                percent: f64::INFINITY,
                degenerate: true,
            }
        });
    }
    Ok(Bias {
        percent: 100.0 * diff / pooled,
        degenerate: false,
    })
}

/// Largest per-level bias over the indicator variables of a categorical.
pub fn categorical_bias(case: &[u32], control: &[u32]) -> Result<Bias> {
    let all: BTreeSet<u32> = case.iter().chain(control).copied().collect();
    let mut worst = Bias {
        percent: 0.0,
        degenerate: false,
    };
    for level in all {
        let ind = |v: &[u32]| v.iter().map(|&x| f64::from(u8::from(x == level))).collect::<Vec<_>>();
        let b = standardized_bias(&ind(case), &ind(control))?;
        if b.percent > worst.percent {
            worst = b;
        }
    }
    Ok(worst)
}

type Field<T> = fn(&Covariates) -> T;

/// Standardized bias of every covariate, keyed by name.
pub fn covariate_biases(cases: &[&Covariates], controls: &[&Covariates]) -> Result<BTreeMap<String, Bias>> {
    let num = |f: fn(&Covariates) -> f64, s: &[&Covariates]| s.iter().map(|c| f(c)).collect::<Vec<_>>();
    let cat = |f: fn(&Covariates) -> u32, s: &[&Covariates]| s.iter().map(|c| f(c)).collect::<Vec<_>>();
    let flag = |f: fn(&Covariates) -> bool, s: &[&Covariates]| {
        s.iter().map(|c| f64::from(u8::from(f(c)))).collect::<Vec<_>>()
    };
    let mut out = BTreeMap::new();
    let age: fn(&Covariates) -> f64 = |c| c.age_at_start;
    let window: fn(&Covariates) -> f64 = |c| c.observation_window;
    out.insert(COVARIATE_NAMES[0].into(), standardized_bias(&num(age, cases), &num(age, controls))?);
    out.insert(COVARIATE_NAMES[1].into(), standardized_bias(&num(window, cases), &num(window, controls))?);
    let cats: [(usize, Field<u32>); 3] = [(2, |c| c.gender), (3, |c| c.race), (4, |c| c.ethnicity)];
    for (k, f) in cats {
        out.insert(COVARIATE_NAMES[k].into(), categorical_bias(&cat(f, cases), &cat(f, controls))?);
    }
    let flags: [(usize, Field<bool>); 3] =
        [(5, |c| c.brain_injury), (6, |c| c.brain_tumor), (7, |c| c.stroke)];
    for (k, f) in flags {
        out.insert(COVARIATE_NAMES[k].into(), standardized_bias(&flag(f, cases), &flag(f, controls))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: usize,
    /// Propensity score in (0, 1).
    pub score: f64,
    pub covariates: Covariates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(case_id, control_id)` in matching order.
    pub pairs: Vec<(usize, usize)>,
    /// Percent bias per covariate on the matched sets.
    pub standardized_bias: BTreeMap<String, f64>,
    /// Percent bias per covariate on the full pools.
    pub bias_before: BTreeMap<String, f64>,
    /// Covariates whose bias is degenerate (constant but unequal samples).
    pub degenerate: Vec<String>,
    pub dropped_cases: usize,
    /// Caliper (logit units) of the final round.
    pub caliper: f64,
    pub rounds: usize,
    pub diagnostic: Option<String>,
}

impl MatchResult {
    pub fn max_bias(&self) -> f64 {
        self.standardized_bias.values().copied().fold(0.0, f64::max)
    }
}

/// Nearest-unused lookups over a sorted array via path-compressed skips.
struct Skips {
    right: Vec<usize>,
    left: Vec<usize>,
}

impl Skips {
    fn new(n: usize) -> Self {
        // index n (right) and 0 (left, shifted by one) are sentinels
        Self {
            right: (0..=n).collect(),
            left: (0..=n).collect(),
        }
    }

    fn find(parent: &mut [usize], mut i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        while parent[i] != root {
            let next = parent[i];
            parent[i] = root;
            i = next;
        }
        root
    }

    /// Smallest unused index >= i, or n.
    fn next_right(&mut self, i: usize) -> usize {
        Self::find(&mut self.right, i)
    }

    /// Largest unused index < i, or None.
    fn next_left(&mut self, i: usize) -> Option<usize> {
        let r = Self::find(&mut self.left, i);
        r.checked_sub(1)
    }

    fn remove(&mut self, k: usize) {
        self.right[k] = k + 1;
        self.left[k + 1] = k;
    }
}

fn greedy_round(
    case_order: &[(f64, usize)],
    controls: &[(f64, usize)],
    caliper: f64,
) -> Vec<(usize, usize, f64)> {
    let n = controls.len();
    let mut skips = Skips::new(n);
    let mut pairs = Vec::new();
    for &(lc, case_idx) in case_order {
        let pos = controls.partition_point(|&(l, _)| l < lc);
        let mut best: Option<(f64, usize, usize)> = None;
        let right = skips.next_right(pos);
        if right < n {
            best = Some(((controls[right].0 - lc).abs(), controls[right].1, right));
        }
        if let Some(mut left) = skips.next_left(pos) {
            // among equal logits prefer the lowest control id
            while let Some(prev) = skips.next_left(left) {
                if controls[prev].0 == controls[left].0 {
                    left = prev;
                } else {
                    break;
                }
            }
            let d = (lc - controls[left].0).abs();
            let cand = (d, controls[left].1, left);
            best = match best {
                Some(b) if b.0 < d || (b.0 == d && b.1 < cand.1) => Some(b),
                _ => Some(cand),
            };
        }
        if let Some((d, _, k)) = best {
            if d <= caliper {
                skips.remove(k);
                pairs.push((case_idx, k, d));
            }
        }
    }
    pairs
}

/// Greedy 1:1 nearest-neighbour matching without replacement on the logit of
/// the propensity score.
///
/// Cases are visited in descending score order (ties by id). When any
/// covariate's matched bias exceeds `bias_budget` percent the caliper is
/// multiplied by 0.8 (starting from the largest distance actually used if
/// that is smaller) and matching is redone, for at most 20 rounds.
pub fn match_cohort(
    cases: &[Candidate],
    controls: &[Candidate],
    caliper: f64,
    bias_budget: f64,
) -> Result<MatchResult> {
    const MAX_ROUNDS: usize = 20;
    const SHRINK: f64 = 0.8;
    for c in cases.iter().chain(controls) {
        if !(c.score > 0.0 && c.score < 1.0) {
            return Err(Error::Precondition(format!(
                "propensity score {} of patient {} is outside (0, 1)",
                c.score, c.id
            )));
        }
    }
    if caliper.is_nan() || caliper < 0.0 {
        return Err(Error::Config("caliper must be >= 0".into()));
    }

    let mut case_order: Vec<(f64, usize)> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| (logit(c.score), i))
        .collect();
    case_order.sort_by(|a, b| {
        cases[b.1]
            .score
            .total_cmp(&cases[a.1].score)
            .then(cases[a.1].id.cmp(&cases[b.1].id))
    });
    let mut sorted_controls: Vec<(f64, usize)> = controls
        .iter()
        .enumerate()
        .map(|(i, c)| (logit(c.score), i))
        .collect();
    sorted_controls.sort_by(|a, b| a.0.total_cmp(&b.0).then(controls[a.1].id.cmp(&controls[b.1].id)));
    // carry ids for tie-breaking
    let keyed: Vec<(f64, usize)> = sorted_controls.iter().map(|&(l, i)| (l, controls[i].id)).collect();

    let all_cases: Vec<&Covariates> = cases.iter().map(|c| &c.covariates).collect();
    let all_controls: Vec<&Covariates> = controls.iter().map(|c| &c.covariates).collect();
    let bias_before = if cases.is_empty() || controls.is_empty() {
        BTreeMap::new()
    } else {
        covariate_biases(&all_cases, &all_controls)?
            .into_iter()
            .map(|(k, b)| (k, b.percent))
            .collect()
    };

    let mut current = caliper;
    let mut last = None;
    for round in 1..=MAX_ROUNDS {
        let raw = greedy_round(&case_order, &keyed, current);
        if raw.is_empty() {
            return Ok(MatchResult {
                pairs: Vec::new(),
                standardized_bias: BTreeMap::new(),
                bias_before,
                degenerate: Vec::new(),
                dropped_cases: cases.len(),
                caliper: current,
                rounds: round,
                diagnostic: Some(format!(
                    "no admissible matches within caliper {current:.3e} (logit units)"
                )),
            });
        }
        let matched_cases: Vec<&Covariates> = raw.iter().map(|&(ci, _, _)| &cases[ci].covariates).collect();
        let matched_controls: Vec<&Covariates> = raw
            .iter()
            .map(|&(_, k, _)| &controls[sorted_controls[k].1].covariates)
            .collect();
        let biases = covariate_biases(&matched_cases, &matched_controls)?;
        let over = biases.values().any(|b| b.degenerate || b.percent > bias_budget);
        let max_used = raw.iter().map(|r| r.2).fold(0.0, f64::max);
        let result = MatchResult {
            pairs: raw
                .iter()
                .map(|&(ci, k, _)| (cases[ci].id, controls[sorted_controls[k].1].id))
                .collect(),
            degenerate: biases
                .iter()
                .filter(|(_, b)| b.degenerate)
                .map(|(k, _)| k.clone())
                .collect(),
            standardized_bias: biases.into_iter().map(|(k, b)| (k, b.percent)).collect(),
            bias_before: bias_before.clone(),
            dropped_cases: cases.len() - raw.len(),
            caliper: current,
            rounds: round,
            diagnostic: None,
        };
        if !over {
            return Ok(result);
        }
        last = Some(result);
        current = SHRINK * current.min(max_used);
    }
    let mut result = last.expect("at least one round ran");
    result.diagnostic = Some(format!(
        "bias budget of {bias_budget}% not met after {MAX_ROUNDS} rounds"
    ));
    Ok(result)
}

/// 2x2 table, rows = exposure (unexposed, exposed), columns = outcome
/// (absent, present).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable2x2 {
    pub counts: [[u64; 2]; 2],
}

impl ContingencyTable2x2 {
    pub fn new(counts: [[u64; 2]; 2]) -> Result<Self> {
        if counts.iter().flatten().sum::<u64>() == 0 {
            return Err(Error::Precondition("contingency table is empty".into()));
        }
        Ok(Self { counts })
    }

    /// Table of matched pairs against a binary outcome.
    pub fn from_outcomes(unexposed: impl IntoIterator<Item = bool>, exposed: impl IntoIterator<Item = bool>) -> Result<Self> {
        let mut counts = [[0u64; 2]; 2];
        for o in unexposed {
            counts[0][usize::from(o)] += 1;
        }
        for o in exposed {
            counts[1][usize::from(o)] += 1;
        }
        Self::new(counts)
    }

    pub fn transposed(&self) -> Self {
        let c = self.counts;
        Self {
            counts: [[c[0][0], c[1][0]], [c[0][1], c[1][1]]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: u32,
    /// Natural log of the upper-tail p-value.
    pub ln_p: f64,
    pub log10_p: f64,
    /// May underflow to 0; use `ln_p` for extreme tails.
    pub p: f64,
}

/// Pearson chi-square with the Yates continuity correction, clamped so
/// that no cell contributes a negative correction.
pub fn chi_square_yates(table: &ContingencyTable2x2) -> Result<ChiSquare> {
    let c = table.counts.map(|r| r.map(|v| v as f64));
    let rows = [c[0][0] + c[0][1], c[1][0] + c[1][1]];
    let cols = [c[0][0] + c[1][0], c[0][1] + c[1][1]];
    let total = rows[0] + rows[1];
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let expected = rows[i] * cols[j] / total;
            if expected <= 0.0 {
                return Err(Error::Precondition(format!(
                    "expected count of cell ({i}, {j}) is zero"
                )));
            }
            let dev = ((c[i][j] - expected).abs() - 0.5).max(0.0);
            stat += dev * dev / expected;
        }
    }
    let ln_p = chi2_ln_sf(stat, 1);
    Ok(ChiSquare {
        statistic: stat,
        df: 1,
        ln_p,
        log10_p: ln_to_log10(ln_p),
        p: ln_p.exp(),
    })
}
