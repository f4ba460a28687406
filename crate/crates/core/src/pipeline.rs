//! Stage orchestration: synth → budget → alternate → train → evaluate.
//!
//! Every stage writes its artifact into the output directory wrapped with the
//! scenario hash. A stage that is not requested but needed downstream is read
//! back from disk and checked against the current hash.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::channels::{synth_channels, ChannelSet};
use crate::error::{Error, Result};
use crate::fisher::{prior_samples, BfimParts, FisherContext};
use crate::linalg::CVec;
use crate::metrics::{link_report, normalize_psws, LinkReport};
use crate::optimizer::{alternate, budget_from_channels, InterferenceBudget, TargetResponses};
use crate::scenario::ScenarioConfig;
use crate::sim::{build_sim_cached, build_sim_with_phases, end_to_end, initial_phases, SimStack};
use crate::trainer::{normalized_bp_error, train, TrainingHistory, BATCH_STREAM};

/// Environment variable naming the directory for cached coupling tensors.
pub const CACHE_DIR_ENV: &str = "SIM_ISAC_CACHE_DIR";

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Budget,
    Alternate,
    Train,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Synth, Stage::Budget, Stage::Alternate, Stage::Train, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Budget => "budget",
            Stage::Alternate => "alternate",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Files written by the stage, the first one being the JSON artifact.
    pub fn artifacts(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &["channels.json"],
            Stage::Budget => &["budget.json"],
            Stage::Alternate => &["targets.json"],
            Stage::Train => &["phases.json", "training_history.csv"],
            Stage::Evaluate => &["evaluation.json", "link_report.csv"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::InvalidInput(format!("unknown stage `{s}`; expected one of synth, budget, alternate, train, evaluate")))
    }
}

/// Parses a comma-separated list ("all" selects every stage); the result is
/// sorted into dependency order without duplicates.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    if list.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut stages = list.split(',').filter(|s| !s.trim().is_empty()).map(Stage::from_str).collect::<Result<Vec<_>>>()?;
    if stages.is_empty() {
        return Err(Error::InvalidInput("no stages selected".into()));
    }
    stages.sort();
    stages.dedup();
    Ok(stages)
}

/// Artifact wrapper tying the payload to the scenario it came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub scenario_hash: String,
    pub stage: Stage,
    pub data: T,
}

/// Trained phases with the layout they belong to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedPhases {
    pub layout_hash: u64,
    /// One row per layer.
    pub phases: Vec<Vec<f64>>,
    pub history: TrainingHistory,
}

impl TrainedPhases {
    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        let rows = self.phases.len();
        let cols = self.phases.first().map_or(0, Vec::len);
        if rows == 0 || self.phases.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged phase matrix".into()));
        }
        Ok(DMatrix::from_fn(rows, cols, |l, n| self.phases[l][n]))
    }
}

/// Sensing and link quality of one set of SIM outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputEvaluation {
    /// P_sb used for this evaluation.
    pub p_sb_watts: f64,
    pub bfim: BfimParts,
    pub link: LinkReport,
    pub normalized_bp_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Optimized responses at the configured P_sb.
    pub optimal: OutputEvaluation,
    /// Trained SIM outputs with P_sb rescaled so that P_sws hits its target.
    pub trained: OutputEvaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub artifacts: Vec<String>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub scenario: u64,
    pub phase_init_stream: u64,
    pub prior_stream: u64,
    pub batch_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub scenario_hash: String,
    pub seeds: Seeds,
    /// Stages whose artifacts are in the directory, in dependency order.
    pub stages: Vec<StageRecord>,
    pub created_unix_s: u64,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }

    /// Copy with wall-clock fields zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut m = self.clone();
        m.created_unix_s = 0;
        for s in &mut m.stages {
            s.wall_clock_s = 0.0;
        }
        m
    }
}

pub fn version_string() -> String {
    option_env!("SIM_ISAC_GIT_DESCRIBE").map_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")), str::to_string)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Builds the SIM with the given phases, going through the coupling cache
/// when one is configured.
pub fn make_stack(config: &ScenarioConfig, phases: DMatrix<f64>) -> Result<SimStack> {
    match cache_dir() {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            let mut stack = build_sim_cached(config, &dir)?;
            stack.set_phases(phases)?;
            Ok(stack)
        }
        None => build_sim_with_phases(config, phases),
    }
}

pub fn synth(config: &ScenarioConfig) -> Result<ChannelSet> {
    synth_channels(config, &mut ChaCha8Rng::seed_from_u64(config.scene.rng_seed))
}

pub fn train_stack(config: &ScenarioConfig, targets: &[CVec]) -> Result<(SimStack, TrainingHistory)> {
    let mut stack = make_stack(config, initial_phases(config))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.scene.rng_seed);
    rng.set_stream(BATCH_STREAM);
    let history = train(&mut stack, targets, config, &mut rng)?;
    Ok((stack, history))
}

pub fn sim_outputs(stack: &SimStack) -> Vec<CVec> {
    (0..stack.num_subcarriers()).map(|i| end_to_end(stack, i)).collect()
}

/// BFIM and link report of `f_set` with P_sb set to `p_sb_watts`.
pub fn evaluate_outputs(
    config: &ScenarioConfig,
    channels: &ChannelSet,
    f_set: &[CVec],
    p_sb_watts: f64,
) -> Result<OutputEvaluation> {
    let mut cfg = config.clone();
    cfg.scene.p_sb_watts = p_sb_watts;
    let ctx = FisherContext::new(&cfg, &prior_samples(&cfg)?)?;
    Ok(OutputEvaluation { p_sb_watts, bfim: ctx.bfim(f_set)?, link: link_report(f_set, channels, &cfg)?, normalized_bp_error: None })
}

/// P_sb that brings the SIM output power of `f_set` to the configured target.
pub fn normalized_p_sb(config: &ScenarioConfig, f_set: &[CVec]) -> Result<f64> {
    Ok(config.scene.p_sb_watts * normalize_psws(f_set, config)?)
}

pub fn evaluate(
    config: &ScenarioConfig,
    channels: &ChannelSet,
    targets: &TargetResponses,
    trained: &SimStack,
) -> Result<EvaluationReport> {
    let optimal = evaluate_outputs(config, channels, &targets.f_hat, config.scene.p_sb_watts)?;
    let f_sim = sim_outputs(trained);
    let mut trained_eval = evaluate_outputs(config, channels, &f_sim, normalized_p_sb(config, &f_sim)?)?;
    trained_eval.normalized_bp_error = Some(normalized_bp_error(trained, &targets.f_hat, config));
    Ok(EvaluationReport { optimal, trained: trained_eval })
}

#[derive(Serialize)]
struct LinkCsvRow<'a> {
    source: &'a str,
    subcarrier: usize,
    sinr_db: f64,
    sinr_bar_db: f64,
    interference_dbm: f64,
    se: f64,
    se_bar: f64,
}

/// Runs `stages` for `config`, writing artifacts and the manifest to `out_dir`.
pub fn run(config: &ScenarioConfig, stages: &[Stage], out_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let mut ctx = RunContext { config, out_dir, hash: config.hash(), channels: None, budget: None, targets: None, trained: None };

    let mut manifest = match RunManifest::read(out_dir) {
        Ok(m) if m.scenario_hash == ctx.hash => m,
        _ => RunManifest {
            version: version_string(),
            scenario_hash: ctx.hash.clone(),
            seeds: Seeds {
                scenario: config.scene.rng_seed,
                phase_init_stream: crate::sim::PHASE_INIT_STREAM,
                prior_stream: crate::fisher::PRIOR_SAMPLE_STREAM,
                batch_stream: BATCH_STREAM,
            },
            stages: Vec::new(),
            created_unix_s: 0,
        },
    };

    for &stage in &stages {
        let t0 = Instant::now();
        log::info!("stage {stage}");
        ctx.execute(stage)?;
        let rec = StageRecord {
            stage,
            artifacts: stage.artifacts().iter().map(|s| s.to_string()).collect(),
            wall_clock_s: t0.elapsed().as_secs_f64(),
        };
        manifest.stages.retain(|r| r.stage != stage);
        manifest.stages.push(rec);
    }
    manifest.stages.sort_by_key(|r| r.stage);
    manifest.version = version_string();
    manifest.created_unix_s = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

struct RunContext<'a> {
    config: &'a ScenarioConfig,
    out_dir: &'a Path,
    hash: String,
    channels: Option<ChannelSet>,
    budget: Option<InterferenceBudget>,
    targets: Option<TargetResponses>,
    trained: Option<SimStack>,
}

impl RunContext<'_> {
    fn write<T: Serialize>(&self, stage: Stage, data: &T) -> Result<()> {
        let env = Envelope { scenario_hash: self.hash.clone(), stage, data };
        write_json(&self.out_dir.join(stage.artifacts()[0]), &env)
    }

    fn load<T: DeserializeOwned>(&self, stage: Stage) -> Result<T> {
        let path = self.out_dir.join(stage.artifacts()[0]);
        let text = fs::read_to_string(&path).map_err(|e| Error::Dependency {
            stage: stage.name().into(),
            detail: format!("cannot read {}: {e}", path.display()),
        })?;
        let env: Envelope<T> = serde_json::from_str(&text)
            .map_err(|e| Error::Dependency { stage: stage.name().into(), detail: format!("unreadable {}: {e}", path.display()) })?;
        if env.scenario_hash != self.hash || env.stage != stage {
            return Err(Error::Dependency {
                stage: stage.name().into(),
                detail: format!("{} was produced for scenario {}", path.display(), env.scenario_hash),
            });
        }
        Ok(env.data)
    }

    fn channels(&mut self) -> Result<&ChannelSet> {
        if self.channels.is_none() {
            self.channels = Some(self.load(Stage::Synth)?);
        }
        Ok(self.channels.as_ref().expect("just set"))
    }

    fn budget(&mut self) -> Result<&InterferenceBudget> {
        if self.budget.is_none() {
            self.budget = Some(self.load(Stage::Budget)?);
        }
        Ok(self.budget.as_ref().expect("just set"))
    }

    fn targets(&mut self) -> Result<&TargetResponses> {
        if self.targets.is_none() {
            self.targets = Some(self.load(Stage::Alternate)?);
        }
        Ok(self.targets.as_ref().expect("just set"))
    }

    fn trained(&mut self) -> Result<&SimStack> {
        if self.trained.is_none() {
            let t: TrainedPhases = self.load(Stage::Train)?;
            if t.layout_hash != self.config.layout_hash() {
                return Err(Error::Dependency { stage: "train".into(), detail: "phases belong to a different SIM layout".into() });
            }
            self.trained = Some(make_stack(self.config, t.matrix()?)?);
        }
        Ok(self.trained.as_ref().expect("just set"))
    }

    fn execute(&mut self, stage: Stage) -> Result<()> {
        let config = self.config;
        match stage {
            Stage::Synth => {
                let ch = synth(config)?;
                self.write(stage, &ch)?;
                self.channels = Some(ch);
            }
            Stage::Budget => {
                let b = budget_from_channels(self.channels()?, config)?;
                self.write(stage, &b)?;
                self.budget = Some(b);
            }
            Stage::Alternate => {
                self.budget()?;
                let ctx = FisherContext::new(config, &prior_samples(config)?)?;
                let t = alternate(&ctx, self.budget.as_ref().expect("loaded"))?;
                self.write(stage, &t)?;
                self.targets = Some(t);
            }
            Stage::Train => {
                let targets = self.targets()?.f_hat.clone();
                let (stack, history) = train_stack(config, &targets)?;
                let phases = (0..stack.layers()).map(|l| stack.phases.row(l).iter().copied().collect()).collect();
                write_csv(&self.out_dir.join(stage.artifacts()[1]), &history.epochs)?;
                self.write(stage, &TrainedPhases { layout_hash: stack.layout_hash(), phases, history })?;
                self.trained = Some(stack);
            }
            Stage::Evaluate => {
                self.channels()?;
                self.targets()?;
                self.trained()?;
                let report = evaluate(
                    config,
                    self.channels.as_ref().expect("loaded"),
                    self.targets.as_ref().expect("loaded"),
                    self.trained.as_ref().expect("loaded"),
                )?;
                let mut rows = Vec::new();
                for (source, eval) in [("optimal", &report.optimal), ("trained", &report.trained)] {
                    rows.extend(eval.link.rows().into_iter().map(|r| LinkCsvRow {
                        source,
                        subcarrier: r.subcarrier,
                        sinr_db: r.sinr_db,
                        sinr_bar_db: r.sinr_bar_db,
                        interference_dbm: r.interference_dbm,
                        se: r.se,
                        se_bar: r.se_bar,
                    }));
                }
                write_csv(&self.out_dir.join(stage.artifacts()[1]), &rows)?;
                self.write(stage, &report)?;
            }
        }
        Ok(())
    }
}
