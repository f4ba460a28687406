//! Desk-scale datasets for the convergence, beampattern and performance
//! figures. Each figure id maps to one tidy CSV.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::channels::{local_direction, ChannelSet, Direction2D};
use crate::error::{Error, Result};
use crate::fisher::{prior_samples, FisherContext};
use crate::linalg::CVec;
use crate::optimizer::{alternate, budget_from_channels, sequential_sweep, InterferenceBudget, TargetResponses};
use crate::pipeline::{evaluate_outputs, normalized_p_sb, sim_outputs, synth, train_stack, write_csv, OutputEvaluation};
use crate::scenario::{dbm_to_watts, to_db, ScenarioConfig, PU_CANDIDATES};
use crate::sim::SimStack;
use crate::trainer::{beampattern, eval_grid, normalized_bp_error, steering_matrix, TrainingHistory};

pub const FIGURE_IDS: [&str; 12] = [
    "ao-convergence",
    "per-subcarrier-bcrb",
    "bisection-trace",
    "grad-norms",
    "bp-error",
    "beampattern-2d",
    "beampattern-cuts",
    "bcrb-vs-power",
    "bcrb-vs-layers",
    "se-vs-power",
    "se-vs-pb",
    "bcrb-vs-npu",
];

/// Power points (dBm) for the sweeps over P_sws and P_pb.
pub const POWER_POINTS_DBM: [f64; 3] = [20.0, 30.0, 40.0];
pub const LAYER_POINTS: [usize; 3] = [1, 2, 4];
/// Per-side SIM sizes for the convergence figure.
pub const SIDE_POINTS: [usize; 2] = [4, 6];
pub const NPU_POINTS: [usize; 4] = [1, 2, 3, 4];
/// Floor for beampattern gains, relative to the peak.
const GAIN_FLOOR_DB: f64 = -100.0;

/// Channels, budget, Fisher context and optimized responses for one scenario.
pub struct Solved {
    pub config: ScenarioConfig,
    pub channels: ChannelSet,
    pub budget: InterferenceBudget,
    pub ctx: FisherContext,
    pub targets: TargetResponses,
}

pub fn solve(config: &ScenarioConfig) -> Result<Solved> {
    config.validate()?;
    let channels = synth(config)?;
    let budget = budget_from_channels(&channels, config)?;
    let ctx = FisherContext::new(config, &prior_samples(config)?)?;
    let targets = alternate(&ctx, &budget)?;
    Ok(Solved { config: config.clone(), channels, budget, ctx, targets })
}

/// Result of training an L-layer SIM against a solved scenario.
pub struct Trained {
    pub layers: usize,
    pub stack: SimStack,
    pub history: TrainingHistory,
    /// Evaluated with P_sws at its target.
    pub eval: OutputEvaluation,
}

pub fn train_layers(solved: &Solved, layers: usize) -> Result<Trained> {
    let mut cfg = solved.config.clone();
    cfg.sim.layers = layers;
    let (stack, history) = train_stack(&cfg, &solved.targets.f_hat)?;
    let f_sim = sim_outputs(&stack);
    let mut eval = evaluate_outputs(&cfg, &solved.channels, &f_sim, normalized_p_sb(&cfg, &f_sim)?)?;
    eval.normalized_bp_error = Some(normalized_bp_error(&stack, &solved.targets.f_hat, &cfg));
    Ok(Trained { layers, stack, history, eval })
}

/// Sets both P_sb and the P_sws target to `dbm`.
pub fn with_power(config: &ScenarioConfig, dbm: f64) -> ScenarioConfig {
    let mut c = config.clone();
    c.scene.p_sb_watts = dbm_to_watts(dbm);
    c.scene.p_sws_target_watts = dbm_to_watts(dbm);
    c
}

/// One power point: optimized responses plus one trained SIM per layer count.
pub struct SweepPoint {
    pub dbm: f64,
    pub optimal: OutputEvaluation,
    pub trained: Vec<Trained>,
}

/// Solves and trains at every `(config, dbm)` pair; point order is preserved.
pub fn sweep(configs: &[(ScenarioConfig, f64)], layers: &[usize]) -> Result<Vec<SweepPoint>> {
    configs
        .par_iter()
        .map(|(cfg, dbm)| {
            let solved = solve(cfg)?;
            let optimal = evaluate_outputs(cfg, &solved.channels, &solved.targets.f_hat, cfg.scene.p_sb_watts)?;
            let trained = layers.iter().map(|&l| train_layers(&solved, l)).collect::<Result<Vec<_>>>()?;
            Ok(SweepPoint { dbm: *dbm, optimal, trained })
        })
        .collect()
}

/// P_sws sweep at the given layer counts.
pub fn power_sweep(config: &ScenarioConfig, powers_dbm: &[f64], layers: &[usize]) -> Result<Vec<SweepPoint>> {
    let cfgs: Vec<_> = powers_dbm.iter().map(|&p| (with_power(config, p), p)).collect();
    sweep(&cfgs, layers)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AoRow {
    pub layer_size: usize,
    pub iteration: usize,
    pub bcrb: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub order: &'static str,
    pub step: usize,
    pub subcarrier: usize,
    pub bcrb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BisectionRow {
    pub subcarrier: usize,
    pub iteration: usize,
    pub g_over_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradRow {
    pub layers: usize,
    pub epoch: usize,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BpErrorRow {
    pub layers: usize,
    pub epoch: usize,
    pub normalized_bp_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pattern2dRow {
    pub az_deg: f64,
    pub el_deg: f64,
    pub gain_db: f64,
    /// `optimal`, `trained`, or `pu_aod` for PU direction markers.
    pub source: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternCutRow {
    /// `azimuth` (fixed elevation) or `elevation` (fixed azimuth).
    pub cut: &'static str,
    pub angle_deg: f64,
    pub gain_db: f64,
    pub source: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerRow {
    pub p_sws_dbm: f64,
    /// 0 for the optimized responses, which do not depend on the SIM.
    pub layers: usize,
    pub source: &'static str,
    pub bcrb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub layers: usize,
    pub source: &'static str,
    pub bcrb: f64,
    pub normalized_bp_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeRow {
    pub power_dbm: f64,
    pub source: &'static str,
    pub se_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NpuRow {
    pub n_pu: usize,
    pub bcrb: f64,
    pub se_avg: f64,
    pub se_bar_avg: f64,
}

pub fn ao_convergence(config: &ScenarioConfig) -> Result<Vec<AoRow>> {
    let runs = SIDE_POINTS
        .par_iter()
        .map(|&side| {
            let mut cfg = config.clone();
            cfg.sim.n_h = side;
            cfg.sim.n_v = side;
            let s = solve(&cfg)?;
            Ok(s.targets
                .bcrb_trace
                .iter()
                .zip(&s.targets.objective_trace)
                .enumerate()
                .map(|(k, (&bcrb, &objective))| AoRow { layer_size: side * side, iteration: k + 1, bcrb, objective })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(runs.concat())
}

/// BCRB as the optimized responses are switched on one subcarrier at a time,
/// starting from silence, in ascending and descending order.
pub fn per_subcarrier_bcrb(solved: &Solved) -> Result<Vec<SweepRow>> {
    let n_sc = solved.config.num_subcarriers();
    let zeros = vec![CVec::zeros(solved.config.num_elements()); n_sc];
    let mut rows = Vec::new();
    let asc: Vec<usize> = (0..n_sc).collect();
    let desc: Vec<usize> = (0..n_sc).rev().collect();
    for (name, order) in [("ascending", asc), ("descending", desc)] {
        let trace = sequential_sweep(&solved.ctx, &solved.budget, &solved.targets.d, &zeros, &order)?;
        for (step, (&sc, &bcrb)) in order.iter().zip(&trace[1..]).enumerate() {
            rows.push(SweepRow { order: name, step: step + 1, subcarrier: sc, bcrb });
        }
    }
    Ok(rows)
}

pub fn bisection_trace(solved: &Solved) -> Vec<BisectionRow> {
    solved
        .targets
        .inner
        .iter()
        .flat_map(|s| {
            s.trace.iter().enumerate().map(move |(k, &g)| BisectionRow { subcarrier: s.subcarrier, iteration: k + 1, g_over_eps: g })
        })
        .collect()
}

pub fn train_all(solved: &Solved, layers: &[usize]) -> Result<Vec<Trained>> {
    layers.par_iter().map(|&l| train_layers(solved, l)).collect()
}

pub fn grad_rows(trained: &[Trained]) -> Vec<GradRow> {
    trained
        .iter()
        .flat_map(|t| {
            t.history.epochs.iter().map(move |e| GradRow { layers: t.layers, epoch: e.epoch, mean_grad_norm: e.mean_grad_norm })
        })
        .collect()
}

pub fn bp_error_rows(trained: &[Trained]) -> Vec<BpErrorRow> {
    let mut rows = Vec::new();
    for t in trained {
        rows.push(BpErrorRow { layers: t.layers, epoch: 0, normalized_bp_error: t.history.initial_bp_error });
        rows.extend(t.history.epochs.iter().map(|e| BpErrorRow {
            layers: t.layers,
            epoch: e.epoch,
            normalized_bp_error: e.normalized_bp_error,
        }));
    }
    rows
}

fn gains_db(config: &ScenarioConfig, dirs: &[Direction2D], i: usize, f: &CVec) -> Vec<f64> {
    let b = beampattern(&steering_matrix(dirs, i, config), f);
    let peak = b.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
    b.iter()
        .map(|z| if peak > 0.0 { to_db(z.norm_sqr() / peak).max(GAIN_FLOOR_DB) } else { GAIN_FLOOR_DB })
        .collect()
}

/// Optimized and trained outputs on the centre subcarrier.
fn pattern_sources(solved: &Solved, trained: &Trained) -> [(&'static str, CVec); 2] {
    let i = solved.config.num_subcarriers() / 2;
    [("optimal", solved.targets.f_hat[i].clone()), ("trained", sim_outputs(&trained.stack)[i].clone())]
}

pub fn beampattern_2d(solved: &Solved, trained: &Trained) -> Result<Vec<Pattern2dRow>> {
    let cfg = &solved.config;
    let i = cfg.num_subcarriers() / 2;
    let grid = eval_grid();
    let mut rows = Vec::new();
    for (source, f) in pattern_sources(solved, trained) {
        for (d, g) in grid.iter().zip(gains_db(cfg, &grid, i, &f)) {
            rows.push(Pattern2dRow { az_deg: d.az.to_degrees(), el_deg: d.el.to_degrees(), gain_db: g, source });
        }
    }
    for p in &cfg.scene.pu_positions {
        let d = local_direction(&(*p).into(), &cfg.sim_position(), &cfg.rotation())?;
        rows.push(Pattern2dRow { az_deg: d.az.to_degrees(), el_deg: d.el.to_degrees(), gain_db: 0.0, source: "pu_aod" });
    }
    Ok(rows)
}

/// Cuts through the direction of the prior region's centre at 1° steps.
pub fn beampattern_cuts(solved: &Solved, trained: &Trained) -> Result<Vec<PatternCutRow>> {
    let cfg = &solved.config;
    let i = cfg.num_subcarriers() / 2;
    let cub = cfg.scene.prior_cuboid;
    let centre = local_direction(&((cub.lo() + cub.hi()) * 0.5), &cfg.sim_position(), &cfg.rotation())?;
    let az_cut: Vec<Direction2D> =
        (0..=360).map(|k| Direction2D { el: centre.el, az: (k as f64 - 180.0).to_radians().clamp(-PI, PI) }).collect();
    let el_cut: Vec<Direction2D> = (0..=180).map(|k| Direction2D { el: (k as f64).to_radians(), az: centre.az }).collect();
    let mut rows = Vec::new();
    for (source, f) in pattern_sources(solved, trained) {
        for (cut, dirs) in [("azimuth", &az_cut), ("elevation", &el_cut)] {
            for (d, g) in dirs.iter().zip(gains_db(cfg, dirs, i, &f)) {
                let angle = if cut == "azimuth" { d.az } else { d.el };
                rows.push(PatternCutRow { cut, angle_deg: angle.to_degrees(), gain_db: g, source });
            }
        }
    }
    Ok(rows)
}

pub fn power_rows(points: &[SweepPoint]) -> Vec<PowerRow> {
    let mut rows = Vec::new();
    for p in points {
        rows.push(PowerRow { p_sws_dbm: p.dbm, layers: 0, source: "optimal", bcrb: p.optimal.bfim.bcrb });
        for t in &p.trained {
            rows.push(PowerRow { p_sws_dbm: p.dbm, layers: t.layers, source: "trained", bcrb: t.eval.bfim.bcrb });
        }
    }
    rows
}

pub fn se_rows(points: &[SweepPoint]) -> Vec<SeRow> {
    let mut rows = Vec::new();
    for p in points {
        rows.push(SeRow { power_dbm: p.dbm, source: "interference_free", se_avg: p.optimal.link.se_bar_avg });
        rows.push(SeRow { power_dbm: p.dbm, source: "optimal", se_avg: p.optimal.link.se_avg });
        for t in &p.trained {
            rows.push(SeRow { power_dbm: p.dbm, source: "trained", se_avg: t.eval.link.se_avg });
        }
    }
    rows
}

pub fn layer_rows(solved: &Solved, trained: &[Trained]) -> Result<Vec<LayerRow>> {
    let optimal = evaluate_outputs(&solved.config, &solved.channels, &solved.targets.f_hat, solved.config.scene.p_sb_watts)?;
    let mut rows = vec![LayerRow { layers: 0, source: "optimal", bcrb: optimal.bfim.bcrb, normalized_bp_error: 0.0 }];
    for t in trained {
        rows.push(LayerRow {
            layers: t.layers,
            source: "trained",
            bcrb: t.eval.bfim.bcrb,
            normalized_bp_error: t.eval.normalized_bp_error.unwrap_or(0.0),
        });
    }
    Ok(rows)
}

pub fn npu_rows(config: &ScenarioConfig) -> Result<Vec<NpuRow>> {
    NPU_POINTS
        .par_iter()
        .map(|&n| {
            let mut cfg = config.clone();
            cfg.scene.pu_positions = PU_CANDIDATES[..n].to_vec();
            let s = solve(&cfg)?;
            let e = evaluate_outputs(&cfg, &s.channels, &s.targets.f_hat, cfg.scene.p_sb_watts)?;
            Ok(NpuRow { n_pu: n, bcrb: e.bfim.bcrb, se_avg: e.link.se_avg, se_bar_avg: e.link.se_bar_avg })
        })
        .collect()
}

/// Writes `<id>.csv` into `out_dir` and returns its path.
pub fn figure(id: &str, config: &ScenarioConfig, out_dir: &Path) -> Result<PathBuf> {
    if !FIGURE_IDS.contains(&id) {
        return Err(Error::InvalidInput(format!("unknown figure `{id}`; valid ids: {}", FIGURE_IDS.join(", "))));
    }
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("{id}.csv"));
    let full_layers = config.sim.layers;
    match id {
        "ao-convergence" => write_csv(&path, &ao_convergence(config)?)?,
        "per-subcarrier-bcrb" => write_csv(&path, &per_subcarrier_bcrb(&solve(config)?)?)?,
        "bisection-trace" => write_csv(&path, &bisection_trace(&solve(config)?))?,
        "grad-norms" => write_csv(&path, &grad_rows(&train_all(&solve(config)?, &LAYER_POINTS)?))?,
        "bp-error" => write_csv(&path, &bp_error_rows(&train_all(&solve(config)?, &LAYER_POINTS)?))?,
        "beampattern-2d" => {
            let s = solve(config)?;
            let t = train_layers(&s, full_layers)?;
            write_csv(&path, &beampattern_2d(&s, &t)?)?
        }
        "beampattern-cuts" => {
            let s = solve(config)?;
            let t = train_layers(&s, full_layers)?;
            write_csv(&path, &beampattern_cuts(&s, &t)?)?
        }
        "bcrb-vs-power" => write_csv(&path, &power_rows(&power_sweep(config, &POWER_POINTS_DBM, &LAYER_POINTS)?))?,
        "bcrb-vs-layers" => {
            let s = solve(config)?;
            let t = train_all(&s, &[1, 2, 3, 4])?;
            write_csv(&path, &layer_rows(&s, &t)?)?
        }
        "se-vs-power" => write_csv(&path, &se_rows(&power_sweep(config, &POWER_POINTS_DBM, &[full_layers])?))?,
        "se-vs-pb" => {
            let cfgs: Vec<_> = POWER_POINTS_DBM
                .iter()
                .map(|&p| {
                    let mut c = config.clone();
                    c.scene.p_pb_watts = dbm_to_watts(p);
                    (c, p)
                })
                .collect();
            write_csv(&path, &se_rows(&sweep(&cfgs, &[full_layers])?))?
        }
        "bcrb-vs-npu" => write_csv(&path, &npu_rows(config)?)?,
        _ => unreachable!("checked above"),
    }
    Ok(path)
}
