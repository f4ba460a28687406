//! Experiment description and scenario-file parsing.
//!
//! Scenario files are TOML with one table per subsystem (`[scene]`, `[sim]`,
//! `[fisher]`, `[optimizer]`, `[trainer]`). Keys carry the names used
//! throughout the crate (`f_c`, `delta_f`, `I`, `P_sb`, ...), all values are
//! SI (powers in watts, noise PSD in dBm/Hz), and unknown keys are rejected.
//! Every key is optional; missing ones take the desk-scale defaults.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Speed of light used everywhere (m/s).
pub const SPEED_OF_LIGHT: f64 = 3e8;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Axis-aligned box, bounds in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cuboid {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl Cuboid {
    pub fn lo(&self) -> Vector3<f64> {
        Vector3::new(self.x[0], self.y[0], self.z[0])
    }

    pub fn hi(&self) -> Vector3<f64> {
        Vector3::new(self.x[1], self.y[1], self.z[1])
    }

    pub fn volume(&self) -> f64 {
        (self.x[1] - self.x[0]) * (self.y[1] - self.y[0]) * (self.z[1] - self.z[0])
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.lo()[k] && p[k] <= self.hi()[k])
    }

    /// Euclidean distance from `p` to the box (zero inside).
    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        let lo = self.lo();
        let hi = self.hi();
        let d = Vector3::from_fn(|k, _| (lo[k] - p[k]).max(0.0).max(p[k] - hi[k]));
        d.norm()
    }
}

/// Geometry, OFDM grid, powers and channel-synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    /// Carrier frequency (Hz).
    pub f_c: f64,
    /// Subcarrier spacing (Hz).
    pub delta_f: f64,
    /// Number of subcarriers.
    #[serde(rename = "I")]
    pub num_subcarriers: usize,
    /// SB transmit power (W).
    #[serde(rename = "P_sb")]
    pub p_sb_watts: f64,
    /// PB transmit power (W).
    #[serde(rename = "P_pb")]
    pub p_pb_watts: f64,
    /// Target radiated power from the SIM output layer (W).
    #[serde(rename = "P_sws_target")]
    pub p_sws_target_watts: f64,
    /// Fraction of interference-free PU spectral efficiency to retain.
    pub kappa: f64,
    /// Noise PSD (dBm/Hz).
    #[serde(rename = "N0")]
    pub n0_dbm_hz: f64,
    /// SB (and SIM) position.
    pub p_sb: [f64; 3],
    /// PB position.
    pub p_pb: [f64; 3],
    /// SIM orientation; columns are the local axes in global coordinates.
    #[serde(rename = "R_s")]
    pub r_s: [[f64; 3]; 3],
    /// Active PU positions.
    pub pu_positions: Vec<[f64; 3]>,
    /// Support of the uniform SU position prior.
    pub prior_cuboid: Cuboid,
    #[serde(rename = "Q_su_s")]
    pub q_su_s: usize,
    #[serde(rename = "Q_pu_s")]
    pub q_pu_s: usize,
    #[serde(rename = "Q_pu_pb")]
    pub q_pu_pb: usize,
    /// Per-subcarrier power caps on ‖f[i]‖²; a single entry is broadcast.
    pub delta_caps: Vec<f64>,
    pub rng_seed: u64,
}

/// SIM dimensions and meta-atom geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "N_h")]
    pub n_h: usize,
    #[serde(rename = "N_v")]
    pub n_v: usize,
    /// In-layer meta-atom spacing (m).
    pub d: f64,
    /// Inter-layer spacing (m).
    pub d_s: f64,
    /// Meta-atom aperture (m²).
    #[serde(rename = "A_s")]
    pub a_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherParams {
    /// Number of prior samples for the Monte-Carlo expectation.
    #[serde(rename = "M_p")]
    pub m_p: usize,
    /// Ridge added as the prior information term J_P = eps_reg·I₅.
    pub eps_reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerParams {
    /// Bisection tolerance, relative to ε/δ.
    pub xi_tol: f64,
    pub eps_tol: f64,
    pub tau_tol: f64,
    pub max_outer_iters: usize,
    pub max_bracket_steps: usize,
    pub max_bisection_steps: usize,
    /// Visit subcarriers in a seeded random order instead of ascending.
    pub shuffle_subcarriers: bool,
    pub outer_step: OuterStep,
    /// Halvings tried before the safeguarded step gives up.
    pub max_step_halvings: usize,
}

/// How the auxiliary vectors move towards J_B⁻¹e_j each outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterStep {
    /// Jump straight to J_B⁻¹e_j.
    Full,
    /// Try the full step, halve it until the objective does not decrease.
    Safeguarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNormalization {
    /// Average over subcarriers and batch directions, 1/(I·N_g).
    Algorithm,
    /// Gradient of the batch loss itself, 1/I.
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElevationSampling {
    Uniform,
    /// el = arccos(u), u uniform in [-1, 1]: uniform on the sphere.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerParams {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    #[serde(rename = "N_g")]
    pub n_g: usize,
    #[serde(rename = "N_b")]
    pub n_b: usize,
    #[serde(rename = "N_e")]
    pub n_e: usize,
    pub grad_normalization: GradNormalization,
    pub el_sampling: ElevationSampling,
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scene: SceneParams,
    pub sim: SimParams,
    pub fisher: FisherParams,
    pub optimizer: OptimizerParams,
    pub trainer: TrainerParams,
}

/// Nine candidate PU locations; the default scenario activates the first two.
/// PUs 1, 2, 6 and 7 sit next to the SU prior region.
pub const PU_CANDIDATES: [[f64; 3]; 9] = [
    [45.0, 14.0, 1.5],
    [72.0, -16.0, 1.5],
    [30.0, -35.0, 1.5],
    [40.0, 45.0, 1.5],
    [90.0, 30.0, 1.5],
    [62.0, 12.0, 1.5],
    [55.0, -12.0, 1.5],
    [25.0, 20.0, 1.5],
    [85.0, -40.0, 1.5],
];

impl Default for SceneParams {
    fn default() -> Self {
        let f_c = 30e9;
        SceneParams {
            f_c,
            delta_f: 1e6,
            num_subcarriers: 8,
            p_sb_watts: 1.0,
            p_pb_watts: 1.0,
            p_sws_target_watts: 1.0,
            kappa: 0.98,
            n0_dbm_hz: -173.855,
            p_sb: [0.0, 0.0, 5.0],
            p_pb: [-50.0, 100.0, 5.0],
            r_s: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            pu_positions: PU_CANDIDATES[..2].to_vec(),
            prior_cuboid: Cuboid {
                x: [50.0, 70.0],
                y: [-10.0, 10.0],
                z: [0.0, 5.0],
            },
            q_su_s: 50,
            q_pu_s: 50,
            q_pu_pb: 50,
            delta_caps: vec![1.0],
            rng_seed: 2024,
        }
    }
}

impl Default for SimParams {
    fn default() -> Self {
        let lambda_c = SPEED_OF_LIGHT / 30e9;
        SimParams {
            layers: 4,
            n_h: 6,
            n_v: 6,
            d: lambda_c / 2.0,
            d_s: 1.5 * lambda_c,
            a_s: (lambda_c / 2.0).powi(2),
        }
    }
}

impl Default for FisherParams {
    fn default() -> Self {
        FisherParams { m_p: 500, eps_reg: 1e-9 }
    }
}

impl Default for OptimizerParams {
    fn default() -> Self {
        OptimizerParams {
            xi_tol: 1e-12,
            eps_tol: 1e-12,
            tau_tol: 1e-12,
            max_outer_iters: 50,
            max_bracket_steps: 60,
            max_bisection_steps: 200,
            shuffle_subcarriers: false,
            outer_step: OuterStep::Safeguarded,
            max_step_halvings: 20,
        }
    }
}

impl Default for TrainerParams {
    fn default() -> Self {
        TrainerParams {
            eta: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            n_g: 512,
            n_b: 50,
            n_e: 20,
            grad_normalization: GradNormalization::Algorithm,
            el_sampling: ElevationSampling::Uniform,
        }
    }
}

/// One failed check from [`ScenarioConfig::diagnostics`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub key: String,
    pub message: String,
}

impl ScenarioConfig {
    /// Reads and validates a scenario file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = Self::parse_unchecked(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without running the semantic checks.
    pub fn parse_unchecked(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("scenario", e.message().to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Full-size reference run: 50 subcarriers, 20000 prior samples,
    /// 200 epochs at learning rate 1e-3.
    pub fn full_scale(mut self) -> Self {
        self.scene.num_subcarriers = 50;
        self.fisher.m_p = 20000;
        self.trainer.n_e = 200;
        self.trainer.eta = 0.001;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.diagnostics().into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::config(v.key, v.message)),
        }
    }

    /// Every semantic violation, with the key path it concerns.
    pub fn diagnostics(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |key: &str, message: String| {
            out.push(Violation {
                key: key.to_string(),
                message,
            })
        };
        let s = &self.scene;
        let positive = [
            ("scene.f_c", s.f_c),
            ("scene.delta_f", s.delta_f),
            ("scene.P_sb", s.p_sb_watts),
            ("scene.P_pb", s.p_pb_watts),
            ("scene.P_sws_target", s.p_sws_target_watts),
            ("sim.d", self.sim.d),
            ("sim.d_s", self.sim.d_s),
            ("sim.A_s", self.sim.a_s),
            ("trainer.eta", self.trainer.eta),
            ("trainer.eps_adam", self.trainer.eps_adam),
            ("optimizer.xi_tol", self.optimizer.xi_tol),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                bad(key, format!("must be positive and finite, got {v}"));
            }
        }
        if !s.n0_dbm_hz.is_finite() {
            bad("scene.N0", "must be finite".into());
        }
        if s.num_subcarriers == 0 {
            bad("scene.I", "need at least one subcarrier".into());
        } else if s.f_c.is_finite() && s.delta_f.is_finite() {
            let f_last = s.f_c - (s.num_subcarriers as f64 - 1.0) * s.delta_f;
            if !(f_last > 0.0) {
                bad(
                    "scene.delta_f",
                    format!("subcarrier frequency f_I = {f_last:.6e} Hz is not positive"),
                );
            }
        }
        if !(s.kappa > 0.0 && s.kappa <= 1.0) {
            bad("scene.kappa", format!("must lie in (0, 1], got {}", s.kappa));
        }
        if self.sim.layers == 0 {
            bad("sim.L", "need at least one layer".into());
        }
        if self.sim.n_h == 0 || self.sim.n_v == 0 {
            bad("sim.N_h", "N_h and N_v must be at least 1".into());
        }
        let c = &s.prior_cuboid;
        if !(c.volume() > 0.0) || [c.x, c.y, c.z].iter().any(|b| !(b[1] > b[0])) {
            bad("scene.prior_cuboid", "bounds must satisfy lo < hi on every axis".into());
        }
        if !(s.delta_caps.len() == 1 || s.delta_caps.len() == s.num_subcarriers) {
            bad(
                "scene.delta_caps",
                format!("expected 1 or I = {} entries, got {}", s.num_subcarriers, s.delta_caps.len()),
            );
        }
        if s.delta_caps.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            bad("scene.delta_caps", "every cap must be positive".into());
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err < 1e-9) {
            bad("scene.R_s", format!("not orthonormal (max deviation {err:.3e})"));
        }
        if s.pu_positions.is_empty() {
            bad("scene.pu_positions", "need at least one PU".into());
        }
        let p_s = self.sim_position();
        let sim_radius = self.sim_extent();
        for (k, pu) in s.pu_positions.iter().enumerate() {
            if (Vector3::from(*pu) - p_s).norm() <= sim_radius {
                bad(&format!("scene.pu_positions[{k}]"), "PU coincides with the SIM".into());
            }
        }
        if c.volume() > 0.0 && c.distance_to(&p_s) <= sim_radius {
            bad("scene.prior_cuboid", "SU prior region intersects the SIM".into());
        }
        if self.fisher.m_p == 0 {
            bad("fisher.M_p", "need at least one prior sample".into());
        }
        if !(self.fisher.eps_reg >= 0.0) {
            bad("fisher.eps_reg", "must be nonnegative".into());
        }
        let t = &self.trainer;
        if !(t.beta1 >= 0.0 && t.beta1 < 1.0) {
            bad("trainer.beta1", "must lie in [0, 1)".into());
        }
        if !(t.beta2 >= 0.0 && t.beta2 < 1.0) {
            bad("trainer.beta2", "must lie in [0, 1)".into());
        }
        if t.n_g == 0 {
            bad("trainer.N_g", "batch size must be positive".into());
        }
        out
    }

    /// SHA-256 over the canonical serialization; independent of key order
    /// and formatting in the source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("scenario serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.sim.n_h * self.sim.n_v
    }

    pub fn num_subcarriers(&self) -> usize {
        self.scene.num_subcarriers
    }

    pub fn num_pu(&self) -> usize {
        self.scene.pu_positions.len()
    }

    /// f_i = f_c − i·Δf for the zero-based subcarrier index `i`.
    pub fn subcarrier_freq(&self, i: usize) -> f64 {
        self.scene.f_c - i as f64 * self.scene.delta_f
    }

    pub fn wavelength(&self, i: usize) -> f64 {
        SPEED_OF_LIGHT / self.subcarrier_freq(i)
    }

    pub fn carrier_wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.scene.f_c
    }

    /// ζ_i = 2π·i·Δf for the zero-based index `i`.
    pub fn zeta(&self, i: usize) -> f64 {
        2.0 * std::f64::consts::PI * i as f64 * self.scene.delta_f
    }

    /// Noise power per subcarrier, N0·Δf in watts (SU and PU alike).
    pub fn noise_power(&self) -> f64 {
        dbm_to_watts(self.scene.n0_dbm_hz) * self.scene.delta_f
    }

    pub fn delta_cap(&self, i: usize) -> f64 {
        if self.scene.delta_caps.len() == 1 {
            self.scene.delta_caps[0]
        } else {
            self.scene.delta_caps[i]
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let r = &self.scene.r_s;
        Matrix3::from_fn(|row, col| r[row][col])
    }

    pub fn sim_position(&self) -> Vector3<f64> {
        Vector3::from(self.scene.p_sb)
    }

    /// Radius of a sphere around the SIM centre containing every meta-atom.
    pub fn sim_extent(&self) -> f64 {
        let w = self.sim.n_h as f64 * self.sim.d;
        let h = self.sim.n_v as f64 * self.sim.d;
        let depth = self.sim.layers as f64 * self.sim.d_s;
        0.5 * (w * w + h * h + depth * depth).sqrt()
    }

    /// Layout hash of the coupling tensors: depends only on what enters W and w.
    pub fn layout_hash(&self) -> u64 {
        let key = serde_json::json!({
            "L": self.sim.layers, "N_h": self.sim.n_h, "N_v": self.sim.n_v,
            "d": self.sim.d, "d_s": self.sim.d_s, "A_s": self.sim.a_s,
            "f_c": self.scene.f_c, "delta_f": self.scene.delta_f, "I": self.scene.num_subcarriers,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
