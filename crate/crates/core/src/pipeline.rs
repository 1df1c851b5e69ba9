//! Stage orchestration: synth/ingest, match, embed, tensorize, fit, evaluate
//! and export, driven by one TOML config.
//!
//! Every stage writes its artifacts under a run directory and is recorded in
//! `manifest.json` with a cache key. The key hashes the stage name, its
//! config, its derived seed, the content of any external input files and the
//! keys of the stages it reads from. A stage whose key and artifact hashes
//! are unchanged is skipped.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml            resolved configuration
//! manifest.json
//! cohort.jsonl           synth (plus planted.json for synthetic cohorts)
//! match/                 result.json, bias.csv, chi_square.json
//! embed/                 embeddings.csv, similarity.csv
//! tensor/                tensor.csv, meta.json
//! fit/                   model/, trace.csv, split.json, test_memberships.csv, fit.json
//! evaluate/              metrics.json, significance.csv, significant.json,
//!                        stratification.csv, recovery.json (synthetic only)
//! export/                phenotype_<r>.{dot,json}, graphs.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    align_patterns, auc, edge_scores, export_graph, gini_sparsity, logit_significance, membership_stratification, mse,
    overlap, Direction, EdgeOptions, GraphFormat, MetricsReport, SignificanceOptions,
};
use crate::cohort::{
    generate_exposure_pools, generate_synthetic, load_cohort, save_jsonl, Cohort, CohortFormat, Label, LoadOptions,
    PoolConfig, SynthConfig,
};
use crate::embedding::{
    build_pairs, load_similarity, save_embeddings, save_similarity, similarity_matrix, train_skipgram, SgdConfig,
};
use crate::error::{Error, Result};
use crate::factorization::{
    fit, load_model, predict, project_new_patients, read_matrix, save_model, save_trace, write_matrix, HyperParams,
    Problem,
};
use crate::matching::{
    chi_square_yates, fit_propensity, match_cohort, Candidate, ChiSquare, ContingencyTable2x2, MatchResult,
};
use crate::tensor::{build_transition_tensor, load_tensor, mean_transition_matrix, save_tensor, TensorMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Match,
    Embed,
    Tensorize,
    Fit,
    Evaluate,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Match,
        Stage::Embed,
        Stage::Tensorize,
        Stage::Fit,
        Stage::Evaluate,
        Stage::Export,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Match => "match",
            Stage::Embed => "embed",
            Stage::Tensorize => "tensorize",
            Stage::Fit => "fit",
            Stage::Evaluate => "evaluate",
            Stage::Export => "export",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Synth | Stage::Match => &[],
            Stage::Embed | Stage::Tensorize => &[Stage::Synth],
            Stage::Fit => &[Stage::Synth, Stage::Embed, Stage::Tensorize],
            Stage::Evaluate => &[Stage::Synth, Stage::Tensorize, Stage::Fit],
            Stage::Export => &[Stage::Synth, Stage::Tensorize, Stage::Fit, Stage::Evaluate],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Cohort to ingest (JSONL or long CSV); a synthetic cohort is
    /// generated when absent.
    pub cohort: Option<PathBuf>,
    /// Prevalence filter applied on ingest.
    pub min_prevalence: Option<f64>,
    /// Exposed pool for matching; synthetic pools are generated when both
    /// pool paths are absent.
    pub cases: Option<PathBuf>,
    pub controls: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageFlags {
    pub synth: bool,
    #[serde(rename = "match")]
    pub matching: bool,
    pub embed: bool,
    pub tensorize: bool,
    pub fit: bool,
    pub evaluate: bool,
    pub export: bool,
}

impl Default for StageFlags {
    fn default() -> Self {
        Self {
            synth: true,
            matching: true,
            embed: true,
            tensorize: true,
            fit: true,
            evaluate: true,
            export: true,
        }
    }
}

impl StageFlags {
    pub fn enabled(&self, stage: Stage) -> bool {
        match stage {
            Stage::Synth => self.synth,
            Stage::Match => self.matching,
            Stage::Embed => self.embed,
            Stage::Tensorize => self.tensorize,
            Stage::Fit => self.fit,
            Stage::Evaluate => self.evaluate,
            Stage::Export => self.export,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Synthetic pools, used when no pool files are given.
    pub pools: PoolConfig,
    /// Initial caliper in logit units.
    pub caliper: f64,
    /// Largest acceptable standardized bias, in percent.
    pub bias_budget: f64,
    /// Ridge penalty of the propensity model.
    pub l2: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            pools: PoolConfig::default(),
            caliper: 0.2,
            bias_budget: 5.0,
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TensorConfig {
    pub mode: TensorMode,
    pub include_self_loops: bool,
}

impl Default for TensorConfig {
    fn default() -> Self {
        Self {
            mode: TensorMode::default(),
            include_self_loops: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Fraction of patients held out and projected after training.
    pub holdout: f64,
    pub hyper: HyperParams,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            holdout: 0.3,
            hyper: HyperParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub significance: SignificanceOptions,
    /// Ridge penalty used to refit when the plain fit hits separation.
    /// `None` turns separation into a stage failure.
    pub separation_l2: Option<f64>,
    /// Phenotypes with `p` below this are significant and get exported.
    pub alpha: f64,
    /// Membership bin edges for the stratification table.
    pub thresholds: Vec<f64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            significance: SignificanceOptions::default(),
            separation_l2: Some(1.0),
            alpha: 0.05,
            thresholds: vec![0.0, 0.1, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub format: GraphFormat,
    pub edges: EdgeOptions,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            format: GraphFormat::Dot,
            edges: EdgeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; each stage uses a seed hashed from it and the stage
    /// name, overriding any seed in the stage's own section.
    pub seed: u64,
    /// Root under which `run` creates one directory per config hash. Not
    /// part of the hash.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub input: InputConfig,
    pub stages: StageFlags,
    pub synth: SynthConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub embed: SgdConfig,
    pub tensor: TensorConfig,
    pub fit: FitConfig,
    pub evaluate: EvaluateConfig,
    pub export: ExportConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form (the output root excluded).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage.name())
    }

    /// Checks every enabled stage's settings and input paths, plus stage
    /// dependencies when `stages` are run together.
    pub fn validate(&self, stages: &[Stage]) -> Result<()> {
        for &stage in stages {
            self.validate_stage(stage)?;
        }
        Ok(())
    }

    fn validate_stage(&self, stage: Stage) -> Result<()> {
        let exists = |p: &Option<PathBuf>, what: &str| -> Result<()> {
            match p {
                Some(p) if !p.is_file() => Err(Error::Config(format!("{what} input {} does not exist", p.display()))),
                _ => Ok(()),
            }
        };
        match stage {
            Stage::Synth => {
                exists(&self.input.cohort, "cohort")?;
                if let Some(p) = &self.input.cohort {
                    if CohortFormat::from_path(p).is_none() {
                        return Err(Error::Config(format!("cannot infer cohort format of {}", p.display())));
                    }
                }
                if let Some(m) = self.input.min_prevalence {
                    if !(0.0..1.0).contains(&m) {
                        return Err(Error::Config("min_prevalence must be in [0, 1)".into()));
                    }
                }
                if self.input.cohort.is_none() {
                    self.synth.validate()?;
                }
            }
            Stage::Match => {
                exists(&self.input.cases, "cases")?;
                exists(&self.input.controls, "controls")?;
                if self.input.cases.is_some() != self.input.controls.is_some() {
                    return Err(Error::Config("give both cases and controls, or neither".into()));
                }
                let m = &self.matching;
                if !(m.caliper >= 0.0) || !(m.bias_budget > 0.0) || !(m.l2 >= 0.0) {
                    return Err(Error::Config("caliper, bias_budget and l2 must be non-negative".into()));
                }
            }
            Stage::Embed => self.embed.validate()?,
            Stage::Tensorize => {}
            Stage::Fit => {
                self.fit.hyper.validate()?;
                if !(self.fit.holdout > 0.0 && self.fit.holdout < 1.0) {
                    return Err(Error::Config("holdout must be in (0, 1)".into()));
                }
            }
            Stage::Evaluate => {
                if self.fit.hyper.rank < 2 {
                    return Err(Error::Config("evaluation needs rank >= 2 for the overlap metric".into()));
                }
                if !(self.evaluate.alpha > 0.0 && self.evaluate.alpha < 1.0) {
                    return Err(Error::Config("alpha must be in (0, 1)".into()));
                }
                if self.evaluate.thresholds.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config("thresholds must be strictly ascending".into()));
                }
                if self.evaluate.separation_l2.is_some_and(|l| !(l > 0.0)) {
                    return Err(Error::Config("separation_l2 must be positive".into()));
                }
            }
            Stage::Export => {
                if !(self.export.edges.epsilon > 0.0) {
                    return Err(Error::Config("epsilon must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// 63-bit seed from the global seed and a stage name (63 bits so the value
/// also fits a TOML integer).
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{name}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes) >> 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Cached,
    Failed,
    Disabled,
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub seed: u64,
    pub key: Option<String>,
    /// Relative artifact path to content SHA-256.
    pub artifacts: BTreeMap<String, String>,
    /// Wall time in milliseconds; absent for stages that did not run.
    pub timing_ms: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub failure: Option<Failure>,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    fn fresh(cfg: &PipelineConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            stages: Stage::ALL
                .into_iter()
                .map(|stage| StageRecord {
                    stage,
                    status: StageStatus::NotRun,
                    seed: cfg.stage_seed(stage),
                    key: None,
                    artifacts: BTreeMap::new(),
                    timing_ms: None,
                    error: None,
                })
                .collect(),
            failure: None,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::artifact(&path, format!("cannot read manifest: {e}")))?;
        serde_json::from_str(&text).map_err(|e| Error::artifact(&path, format!("corrupted manifest: {e}")))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn record(&self, stage: Stage) -> &StageRecord {
        self.stages.iter().find(|r| r.stage == stage).expect("every stage has a record")
    }

    fn record_mut(&mut self, stage: Stage) -> &mut StageRecord {
        self.stages.iter_mut().find(|r| r.stage == stage).expect("every stage has a record")
    }

    fn completed(&self, stage: Stage) -> bool {
        matches!(self.record(stage).status, StageStatus::Ran | StageStatus::Cached)
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn stage_config(cfg: &PipelineConfig, stage: Stage) -> serde_json::Value {
    match stage {
        Stage::Synth => serde_json::json!({ "input": &cfg.input.cohort, "min_prevalence": cfg.input.min_prevalence, "synth": &cfg.synth }),
        Stage::Match => serde_json::json!({ "cases": &cfg.input.cases, "controls": &cfg.input.controls, "match": &cfg.matching }),
        Stage::Embed => serde_json::to_value(&cfg.embed).expect("serializes"),
        Stage::Tensorize => serde_json::to_value(&cfg.tensor).expect("serializes"),
        Stage::Fit => serde_json::to_value(&cfg.fit).expect("serializes"),
        Stage::Evaluate => serde_json::to_value(&cfg.evaluate).expect("serializes"),
        Stage::Export => serde_json::to_value(&cfg.export).expect("serializes"),
    }
}

fn stage_key(cfg: &PipelineConfig, stage: Stage, manifest: &Manifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update(serde_json::to_vec(&stage_config(cfg, stage))?);
    h.update(cfg.stage_seed(stage).to_le_bytes());
    let external: Vec<&PathBuf> = match stage {
        Stage::Synth => cfg.input.cohort.iter().collect(),
        Stage::Match => cfg.input.cases.iter().chain(cfg.input.controls.iter()).collect(),
        _ => Vec::new(),
    };
    for p in external {
        h.update(file_hash(p)?.as_bytes());
    }
    for dep in stage.dependencies() {
        h.update(manifest.record(*dep).key.as_deref().unwrap_or("").as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn artifacts_intact(dir: &Path, record: &StageRecord) -> bool {
    !record.artifacts.is_empty()
        && record
            .artifacts
            .iter()
            .all(|(rel, hash)| file_hash(&dir.join(rel)).is_ok_and(|h| &h == hash))
}

/// Result of a pipeline invocation.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Runs every enabled stage in order under `out_root/<config hash prefix>`.
///
/// Configuration and input paths are validated before any stage starts.
/// A failing stage leaves earlier artifacts in place, marks the failure in
/// the manifest and returns [`Error::Stage`].
pub fn run_pipeline(cfg: &PipelineConfig, out_root: &Path) -> Result<RunOutcome> {
    let enabled: Vec<Stage> = Stage::ALL.into_iter().filter(|s| cfg.stages.enabled(*s)).collect();
    cfg.validate(&enabled)?;
    for &stage in &enabled {
        for dep in stage.dependencies() {
            if !cfg.stages.enabled(*dep) {
                return Err(Error::Config(format!("stage {stage} needs stage {dep}, which is disabled")));
            }
        }
    }
    let dir = out_root.join(&cfg.hash()[..16]);
    execute(cfg, &dir, &enabled, true)
}

/// Runs a single stage in `dir`, reusing artifacts of earlier stages found
/// there. Used by the per-stage CLI subcommands.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, dir: &Path) -> Result<RunOutcome> {
    cfg.validate(&[stage])?;
    if dir.join(MANIFEST).exists() {
        let manifest = Manifest::load(dir)?;
        for dep in stage.dependencies() {
            if !manifest.completed(*dep) {
                return Err(Error::Precondition(format!(
                    "stage {stage} needs the {dep} artifacts in {}; run `{dep}` first",
                    dir.display()
                )));
            }
        }
    } else if let Some(dep) = stage.dependencies().first() {
        return Err(Error::Precondition(format!(
            "stage {stage} needs the {dep} artifacts in {}; run `{dep}` first",
            dir.display()
        )));
    }
    execute(cfg, dir, &[stage], false)
}

fn execute(cfg: &PipelineConfig, dir: &Path, stages: &[Stage], full_run: bool) -> Result<RunOutcome> {
    fs::create_dir_all(dir)?;
    let mut manifest = if dir.join(MANIFEST).exists() {
        let m = Manifest::load(dir)?;
        if full_run && m.config_hash != cfg.hash() {
            Manifest::fresh(cfg)
        } else {
            m
        }
    } else {
        Manifest::fresh(cfg)
    };
    manifest.config_hash = cfg.hash();
    manifest.seed = cfg.seed;
    manifest.failure = None;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    if full_run {
        for stage in Stage::ALL {
            if !cfg.stages.enabled(stage) {
                let rec = manifest.record_mut(stage);
                rec.status = StageStatus::Disabled;
                rec.key = None;
                rec.artifacts.clear();
                rec.timing_ms = None;
                rec.error = None;
            }
        }
    }

    for &stage in stages {
        let key = stage_key(cfg, stage, &manifest)?;
        let seed = cfg.stage_seed(stage);
        {
            let rec = manifest.record(stage);
            if rec.key.as_deref() == Some(key.as_str())
                && matches!(rec.status, StageStatus::Ran | StageStatus::Cached)
                && artifacts_intact(dir, rec)
            {
                log::info!("{stage}: cached");
                let rec = manifest.record_mut(stage);
                rec.status = StageStatus::Cached;
                rec.timing_ms = None;
                continue;
            }
        }
        log::info!("{stage}: running");
        let started = Instant::now();
        let outcome = run_one(cfg, stage, seed, dir);
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        let rec = manifest.record_mut(stage);
        rec.seed = seed;
        rec.timing_ms = Some(elapsed);
        match outcome {
            Ok(files) => {
                let mut artifacts = BTreeMap::new();
                for rel in files {
                    let hash = file_hash(&dir.join(&rel))?;
                    artifacts.insert(rel, hash);
                }
                rec.status = StageStatus::Ran;
                rec.key = Some(key);
                rec.artifacts = artifacts;
                rec.error = None;
            }
            Err(e) => {
                rec.status = StageStatus::Failed;
                rec.key = None;
                rec.artifacts.clear();
                rec.error = Some(e.to_string());
                manifest.failure = Some(Failure {
                    stage,
                    error: e.to_string(),
                });
                manifest.save(dir)?;
                return Err(Error::Stage {
                    stage: stage.name().to_string(),
                    source: Box::new(e),
                });
            }
        }
        manifest.save(dir)?;
    }
    manifest.save(dir)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        manifest,
    })
}

fn run_one(cfg: &PipelineConfig, stage: Stage, seed: u64, dir: &Path) -> Result<Vec<String>> {
    let sub = dir.join(match stage {
        Stage::Tensorize => "tensor",
        other => other.name(),
    });
    if stage != Stage::Synth {
        if sub.exists() {
            fs::remove_dir_all(&sub)?;
        }
        fs::create_dir_all(&sub)?;
    }
    match stage {
        Stage::Synth => stage_synth(cfg, seed, dir),
        Stage::Match => stage_match(cfg, seed, dir),
        Stage::Embed => stage_embed(cfg, seed, dir),
        Stage::Tensorize => stage_tensorize(cfg, dir),
        Stage::Fit => stage_fit(cfg, seed, dir),
        Stage::Evaluate => stage_evaluate(cfg, dir),
        Stage::Export => stage_export(cfg, dir),
    }
}

fn write_json<T: Serialize>(dir: &Path, rel: &str, value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(rel), text)?;
    Ok(rel.to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, rel: &str) -> Result<T> {
    let path = dir.join(rel);
    let text = fs::read_to_string(&path).map_err(|e| Error::artifact(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::artifact(&path, e.to_string()))
}

fn load_run_cohort(dir: &Path) -> Result<Cohort> {
    load_cohort(&dir.join("cohort.jsonl"), &LoadOptions::jsonl())
}

fn codes(cohort: &Cohort) -> Vec<String> {
    cohort.vocabulary().iter().map(|e| e.code.clone()).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct PlantedFile {
    codes: Vec<String>,
    true_b: Array2<f64>,
    true_c: Array2<f64>,
}

fn stage_synth(cfg: &PipelineConfig, seed: u64, dir: &Path) -> Result<Vec<String>> {
    let stale = dir.join("planted.json");
    if stale.exists() {
        fs::remove_file(&stale)?;
    }
    let mut files = Vec::new();
    let cohort = match &cfg.input.cohort {
        Some(path) => {
            let format = CohortFormat::from_path(path).expect("validated");
            load_cohort(
                path,
                &LoadOptions {
                    format,
                    min_prevalence: cfg.input.min_prevalence,
                },
            )?
        }
        None => {
            let cohort = generate_synthetic(&SynthConfig {
                seed,
                ..cfg.synth.clone()
            })?;
            let planted = cohort.planted().expect("synthetic cohorts carry planted truth");
            files.push(write_json(
                dir,
                "planted.json",
                &PlantedFile {
                    codes: codes(&cohort),
                    true_b: planted.true_b.clone(),
                    true_c: planted.true_c.clone(),
                },
            )?);
            cohort
        }
    };
    save_jsonl(&cohort, &dir.join("cohort.jsonl"))?;
    files.insert(0, "cohort.jsonl".to_string());
    Ok(files)
}

#[derive(Debug, Serialize, Deserialize)]
struct PropensitySummary {
    features: Vec<String>,
    weights: Vec<f64>,
    intercept: f64,
    accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatchFile {
    propensity: PropensitySummary,
    result: MatchResult,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChiSquareFile {
    table: ContingencyTable2x2,
    test: ChiSquare,
}

fn stage_match(cfg: &PipelineConfig, seed: u64, dir: &Path) -> Result<Vec<String>> {
    let (cases, controls) = match (&cfg.input.cases, &cfg.input.controls) {
        (Some(a), Some(b)) => {
            let opts = |p: &Path| LoadOptions {
                format: CohortFormat::from_path(p).unwrap_or(CohortFormat::Jsonl),
                min_prevalence: None,
            };
            (load_cohort(a, &opts(a))?, load_cohort(b, &opts(b))?)
        }
        _ => generate_exposure_pools(&PoolConfig {
            seed,
            ..cfg.matching.pools.clone()
        })?,
    };
    let mut covs = cases.covariates();
    covs.extend(controls.covariates());
    let exposure: Vec<bool> = (0..covs.len()).map(|i| i < cases.n_patients()).collect();
    let model = fit_propensity(&covs, &exposure, cfg.matching.l2)?;
    let candidates = |c: &Cohort| -> Vec<Candidate> {
        c.patients()
            .iter()
            .map(|p| Candidate {
                id: p.id,
                score: model.score(&p.covariates),
                covariates: p.covariates.clone(),
            })
            .collect()
    };
    let result = match_cohort(
        &candidates(&cases),
        &candidates(&controls),
        cfg.matching.caliper,
        cfg.matching.bias_budget,
    )?;
    if let Some(d) = &result.diagnostic {
        log::warn!("matching: {d}");
    }

    let mut bias = String::from("covariate,before,after\n");
    for (name, before) in &result.bias_before {
        let after = result.standardized_bias.get(name).copied().unwrap_or(f64::NAN);
        let _ = writeln!(bias, "{name},{before},{after}");
    }
    fs::write(dir.join("match/bias.csv"), bias)?;

    let outcome = |c: &Cohort, id: usize| c.patients()[id].label.is_positive();
    let table = ContingencyTable2x2::from_outcomes(
        result.pairs.iter().map(|&(_, ctl)| outcome(&controls, ctl)),
        result.pairs.iter().map(|&(case, _)| outcome(&cases, case)),
    )?;
    let test = chi_square_yates(&table)?;
    let files = vec![
        write_json(
            dir,
            "match/result.json",
            &MatchFile {
                propensity: PropensitySummary {
                    features: model.encoder.feature_names(),
                    weights: model.weights.clone(),
                    intercept: model.intercept,
                    accuracy: model.accuracy,
                },
                result,
            },
        )?,
        "match/bias.csv".to_string(),
        write_json(dir, "match/chi_square.json", &ChiSquareFile { table, test })?,
    ];
    Ok(files)
}

fn stage_embed(cfg: &PipelineConfig, seed: u64, dir: &Path) -> Result<Vec<String>> {
    let cohort = load_run_cohort(dir)?;
    let sgd = SgdConfig {
        seed,
        ..cfg.embed.clone()
    };
    let table = train_skipgram(&build_pairs(&cohort), &cohort.kinds(), &sgd)?;
    let s = similarity_matrix(&table, sgd.similarity_source);
    let codes = codes(&cohort);
    save_embeddings(&table, &codes, &dir.join("embed/embeddings.csv"))?;
    save_similarity(&s, &codes, &dir.join("embed/similarity.csv"))?;
    Ok(vec!["embed/embeddings.csv".into(), "embed/similarity.csv".into()])
}

fn stage_tensorize(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<String>> {
    let cohort = load_run_cohort(dir)?;
    let tensor = build_transition_tensor(&cohort, cfg.tensor.mode, cfg.tensor.include_self_loops);
    save_tensor(&tensor, &codes(&cohort), &dir.join("tensor/tensor.csv"))?;
    Ok(vec!["tensor/tensor.csv".into(), write_json(dir, "tensor/meta.json", &cfg.tensor)?])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Split {
    train: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FitSummary {
    converged: bool,
    iterations: usize,
    objective: Option<f64>,
}

/// Seeded holdout split; both lists are returned in ascending order.
fn split_patients(n: usize, holdout: f64, seed: u64) -> Split {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * holdout).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Split { train, test }
}

fn load_run_tensor(dir: &Path, cohort: &Cohort) -> Result<crate::tensor::TransitionTensor> {
    let meta: TensorConfig = read_json(dir, "tensor/meta.json")?;
    load_tensor(&dir.join("tensor/tensor.csv"), &codes(cohort), cohort.n_patients(), meta.mode)
}

fn stage_fit(cfg: &PipelineConfig, seed: u64, dir: &Path) -> Result<Vec<String>> {
    let cohort = load_run_cohort(dir)?;
    let codes = codes(&cohort);
    let tensor = load_run_tensor(dir, &cohort)?;
    let (sim_codes, similarity) = load_similarity(&dir.join("embed/similarity.csv"))?;
    if sim_codes != codes {
        return Err(Error::artifact(
            dir.join("embed/similarity.csv"),
            "similarity codes do not match the cohort vocabulary",
        ));
    }
    let split = split_patients(cohort.n_patients(), cfg.fit.holdout, seed);
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Precondition("holdout split leaves an empty side".into()));
    }
    let labels = cohort.labels();
    let train_labels: Vec<Label> = split.train.iter().map(|&i| labels[i]).collect();
    let train = tensor.select(&split.train);
    let hyper = HyperParams {
        seed,
        ..cfg.fit.hyper.clone()
    };
    let out = fit(
        &Problem {
            tensor: &train,
            similarity: &similarity,
            labels: &train_labels,
        },
        &hyper,
    )?;
    let model = &out.model;
    let a_test = project_new_patients(&tensor.select(&split.test), model.b.view(), model.c.view())?;

    fs::create_dir_all(dir.join("fit/model"))?;
    save_model(model, &codes, &dir.join("fit/model"))?;
    save_trace(&out.trace, &dir.join("fit/trace.csv"))?;
    let ids: Vec<String> = split.test.iter().map(usize::to_string).collect();
    write_matrix(&dir.join("fit/test_memberships.csv"), "patient_id", &ids, &a_test)?;
    let mut files: Vec<String> = ["A.csv", "B.csv", "C.csv", "theta.csv", "hyperparams.toml"]
        .iter()
        .map(|f| format!("fit/model/{f}"))
        .collect();
    files.push("fit/trace.csv".into());
    files.push("fit/test_memberships.csv".into());
    files.push(write_json(dir, "fit/split.json", &split)?);
    files.push(write_json(
        dir,
        "fit/fit.json",
        &FitSummary {
            converged: out.converged,
            iterations: out.trace.records.len(),
            objective: out.trace.last().map(|t| t.total),
        },
    )?);
    Ok(files)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificantPhenotype {
    pub phenotype: usize,
    pub coefficient: f64,
    pub p: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SignificantFile {
    alpha: f64,
    rank: usize,
    penalized: bool,
    phenotypes: Vec<SignificantPhenotype>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecoveryFile {
    mean_cosine: f64,
    pairs: Vec<(usize, usize, f64)>,
}

fn stage_evaluate(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<String>> {
    let cohort = load_run_cohort(dir)?;
    let tensor = load_run_tensor(dir, &cohort)?;
    let (model_codes, model) = load_model(&dir.join("fit/model"))?;
    if model_codes != codes(&cohort) {
        return Err(Error::artifact(dir.join("fit/model"), "model codes do not match the cohort"));
    }
    let split: Split = read_json(dir, "fit/split.json")?;
    let (_, a_test) = read_matrix(&dir.join("fit/test_memberships.csv"))?;
    let labels = cohort.labels();
    let train_labels: Vec<Label> = split.train.iter().map(|&i| labels[i]).collect();
    let test_labels: Vec<Label> = split.test.iter().map(|&i| labels[i]).collect();

    let scores = predict(a_test.view(), &model.theta)?;
    let metrics = MetricsReport {
        auc: auc(scores.as_slice().expect("contiguous"), &test_labels)?,
        sparsity: gini_sparsity(&model),
        overlap: overlap(&model)?,
        mse: mse(&model, &tensor.select(&split.train))?,
    };

    let significance = match logit_significance(model.a.view(), &train_labels, &cfg.evaluate.significance) {
        Err(Error::NonConvergence(msg)) if cfg.evaluate.separation_l2.is_some() => {
            let l2 = cfg.evaluate.separation_l2.expect("checked");
            log::warn!("significance: {msg}; refitting with l2 = {l2}");
            logit_significance(
                model.a.view(),
                &train_labels,
                &SignificanceOptions {
                    l2,
                    ..cfg.evaluate.significance
                },
            )?
        }
        other => other?,
    };
    let significant = SignificantFile {
        alpha: cfg.evaluate.alpha,
        rank: model.rank(),
        penalized: significance.penalized,
        phenotypes: significance
            .significant(cfg.evaluate.alpha)
            .into_iter()
            .map(|c| SignificantPhenotype {
                phenotype: c.phenotype.expect("phenotype rows only"),
                coefficient: c.coefficient,
                p: c.p,
                direction: Direction::from_coefficient(c.coefficient),
            })
            .collect(),
    };
    let strat = membership_stratification(model.a.view(), &train_labels, &cfg.evaluate.thresholds)?;

    let mut files = vec![write_json(dir, "evaluate/metrics.json", &metrics)?];
    fs::write(dir.join("evaluate/significance.csv"), significance.to_csv())?;
    files.push("evaluate/significance.csv".into());
    files.push(write_json(dir, "evaluate/significant.json", &significant)?);
    fs::write(dir.join("evaluate/stratification.csv"), strat.to_csv())?;
    files.push("evaluate/stratification.csv".into());

    if dir.join("planted.json").exists() {
        let planted: PlantedFile = read_json(dir, "planted.json")?;
        let index: BTreeMap<&str, usize> = planted.codes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let rows: Vec<usize> = model_codes
            .iter()
            .map(|c| index.get(c.as_str()).copied())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::artifact(dir.join("planted.json"), "planted codes do not cover the model"))?;
        let pick = |m: &Array2<f64>| m.select(ndarray::Axis(0), &rows);
        let al = align_patterns(
            model.b.view(),
            model.c.view(),
            pick(&planted.true_b).view(),
            pick(&planted.true_c).view(),
        )?;
        files.push(write_json(
            dir,
            "evaluate/recovery.json",
            &RecoveryFile {
                mean_cosine: al.mean_cosine,
                pairs: al.pairs,
            },
        )?);
    }
    Ok(files)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphIndexEntry {
    phenotype: usize,
    direction: Direction,
    edges: usize,
    file: String,
}

fn stage_export(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<String>> {
    let cohort = load_run_cohort(dir)?;
    let tensor = load_run_tensor(dir, &cohort)?;
    let (_, model) = load_model(&dir.join("fit/model"))?;
    let significant: SignificantFile = read_json(dir, "evaluate/significant.json")?;
    let mean = mean_transition_matrix(&tensor)?;
    let ext = match cfg.export.format {
        GraphFormat::Dot => "dot",
        GraphFormat::Json => "json",
    };
    let mut files = Vec::new();
    let mut index = Vec::new();
    for s in &significant.phenotypes {
        let graph = edge_scores(
            s.phenotype,
            model.b.view(),
            model.c.view(),
            &mean,
            cohort.vocabulary(),
            s.direction,
            &cfg.export.edges,
        )?;
        let rel = format!("export/phenotype_{:02}.{ext}", s.phenotype);
        export_graph(std::slice::from_ref(&graph), cfg.export.format, &dir.join(&rel))?;
        index.push(GraphIndexEntry {
            phenotype: s.phenotype,
            direction: s.direction,
            edges: graph.edges.len(),
            file: rel.clone(),
        });
        files.push(rel);
    }
    files.push(write_json(dir, "export/graphs.json", &index)?);
    Ok(files)
}

/// Human-readable summary of a run directory: chi-square result, matched
/// bias table, metrics, significant phenotype count and exported graphs.
pub fn report(dir: &Path) -> Result<String> {
    let manifest = Manifest::load(dir)?;
    let mut out = String::new();
    let _ = writeln!(out, "run {} (config {})", dir.display(), &manifest.config_hash[..16]);
    if let Some(f) = &manifest.failure {
        let _ = writeln!(out, "FAILED at stage {}: {}", f.stage, f.error);
    }
    let done = |s: Stage| manifest.completed(s);
    let absent = |s: Stage| match manifest.record(s).status {
        StageStatus::Disabled => format!("{s} stage disabled"),
        StageStatus::Failed => format!("{s} stage failed"),
        _ => format!("{s} stage has not run"),
    };

    out.push_str("\n== chi-square test (matched cohort) ==\n");
    if done(Stage::Match) {
        let chi: ChiSquareFile = read_json(dir, "match/chi_square.json")?;
        let c = chi.table.counts;
        let _ = writeln!(
            out,
            "table [[{}, {}], [{}, {}]] (rows unexposed/exposed, columns outcome absent/present)",
            c[0][0], c[0][1], c[1][0], c[1][1]
        );
        let _ = writeln!(
            out,
            "chi2 = {:.2}, df = {}, log10 p = {:.2}",
            chi.test.statistic, chi.test.df, chi.test.log10_p
        );
    } else {
        let _ = writeln!(out, "not available: {}", absent(Stage::Match));
    }

    out.push_str("\n== matched-cohort standardized bias (%) ==\n");
    if done(Stage::Match) {
        let m: MatchFile = read_json(dir, "match/result.json")?;
        let r = &m.result;
        let _ = writeln!(
            out,
            "{} pairs, {} cases dropped, caliper {:.4}",
            r.pairs.len(),
            r.dropped_cases,
            r.caliper
        );
        let _ = writeln!(out, "{:<20} {:>8} {:>8}", "covariate", "before", "after");
        for (name, before) in &r.bias_before {
            let after = r.standardized_bias.get(name).copied().unwrap_or(f64::NAN);
            let _ = writeln!(out, "{name:<20} {before:>8.2} {after:>8.2}");
        }
        if let Some(d) = &r.diagnostic {
            let _ = writeln!(out, "note: {d}");
        }
    } else {
        let _ = writeln!(out, "bias table omitted: {}", absent(Stage::Match));
    }

    out.push_str("\n== metrics ==\n");
    if done(Stage::Evaluate) {
        let m: MetricsReport = read_json(dir, "evaluate/metrics.json")?;
        let _ = writeln!(
            out,
            "held-out AUC {:.4}  sparsity {:.4}  overlap {:.4}  MSE {:.6e}",
            m.auc, m.sparsity, m.overlap, m.mse
        );
        if dir.join("evaluate/recovery.json").exists() {
            let r: RecoveryFile = read_json(dir, "evaluate/recovery.json")?;
            let _ = writeln!(out, "planted recovery: mean aligned cosine {:.4}", r.mean_cosine);
        }
    } else {
        let _ = writeln!(out, "not available: {}", absent(Stage::Evaluate));
    }

    out.push_str("\n== significant phenotypes ==\n");
    if done(Stage::Evaluate) {
        let s: SignificantFile = read_json(dir, "evaluate/significant.json")?;
        let likely = s.phenotypes.iter().filter(|p| p.direction == Direction::ADLikely).count();
        let _ = writeln!(
            out,
            "{} of {} phenotypes with p < {} ({} positive-label, {} negative-label){}",
            s.phenotypes.len(),
            s.rank,
            s.alpha,
            likely,
            s.phenotypes.len() - likely,
            if s.penalized { " [penalized fit]" } else { "" }
        );
    } else {
        let _ = writeln!(out, "not available: {}", absent(Stage::Evaluate));
    }

    out.push_str("\n== exported graphs ==\n");
    if done(Stage::Export) {
        let index: Vec<GraphIndexEntry> = read_json(dir, "export/graphs.json")?;
        if index.is_empty() {
            out.push_str("none (no significant phenotypes)\n");
        }
        for g in index {
            let _ = writeln!(out, "{} ({} edges)", dir.join(&g.file).display(), g.edges);
        }
    } else {
        let _ = writeln!(out, "not available: {}", absent(Stage::Export));
    }
    Ok(out)
}
