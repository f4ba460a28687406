//! Scenario geometry, array response vectors and geometric channel synthesis.
//!
//! The SIM output layer is a UPA in the local y–z plane. Directions are
//! measured in the SIM's local frame: elevation from +z, azimuth
//! `atan2(y, x)`.

use std::f64::consts::PI;

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CVec;
use crate::scenario::{ScenarioConfig, SPEED_OF_LIGHT};

/// Angle of departure in the SIM's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction2D {
    /// Elevation from +z, in [0, π].
    pub el: f64,
    /// Azimuth, in [−π, π).
    pub az: f64,
}

impl Direction2D {
    pub fn new(el: f64, az: f64) -> Result<Self> {
        if !(el.is_finite() && az.is_finite()) || !(0.0..=PI).contains(&el) || !(-PI..=PI).contains(&az) {
            return Err(Error::InvalidInput(format!("direction out of range: el={el}, az={az}")));
        }
        Ok(Direction2D { el, az })
    }
}

/// Direction of `p_target` seen from `p_surface` in the frame whose axes are
/// the columns of `r_s`.
pub fn local_direction(
    p_target: &Vector3<f64>,
    p_surface: &Vector3<f64>,
    r_s: &nalgebra::Matrix3<f64>,
) -> Result<Direction2D> {
    let local = r_s.transpose() * (p_target - p_surface);
    let r = local.norm();
    if !(r > 0.0) {
        return Err(Error::DegenerateGeometry("target coincides with the surface".into()));
    }
    let el = (local.z / r).clamp(-1.0, 1.0).acos();
    let mut az = local.y.atan2(local.x);
    if az >= PI {
        az -= 2.0 * PI;
    }
    Ok(Direction2D { el, az })
}

/// Horizontal and vertical spatial frequencies (ω_h, ω_v) at wavelength `lambda`.
pub fn spatial_freqs(dir: Direction2D, spacing: f64, lambda: f64) -> (f64, f64) {
    let wh = spacing * dir.az.sin() * dir.el.sin() / lambda;
    let wv = spacing * dir.el.cos() / lambda;
    (wh, wv)
}

/// Partial derivatives of (ω_h, ω_v) with respect to (el, az).
/// Returns `[[∂ω_h/∂el, ∂ω_v/∂el], [∂ω_h/∂az, ∂ω_v/∂az]]`.
pub fn spatial_freq_derivs(dir: Direction2D, spacing: f64, lambda: f64) -> [[f64; 2]; 2] {
    let s = spacing / lambda;
    [
        [s * dir.az.sin() * dir.el.cos(), -s * dir.el.sin()],
        [s * dir.az.cos() * dir.el.sin(), 0.0],
    ]
}

/// exp(−j2π ω k) for k = 0..n.
pub fn steering_factor(omega: f64, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, -2.0 * PI * omega * k as f64))
        .collect()
}

/// Kronecker product h ⊗ v: element (kh, kv) sits at kh·N_v + kv.
pub fn kron(h: &[Complex64], v: &[Complex64]) -> CVec {
    CVec::from_iterator(h.len() * v.len(), h.iter().flat_map(|&a| v.iter().map(move |&b| a * b)))
}

/// Array response with explicit geometry.
pub fn arv_raw(dir: Direction2D, n_h: usize, n_v: usize, spacing: f64, lambda: f64) -> CVec {
    let (wh, wv) = spatial_freqs(dir, spacing, lambda);
    kron(&steering_factor(wh, n_h), &steering_factor(wv, n_v))
}

/// Array response vector of the SIM output layer on subcarrier `i` (zero-based).
pub fn arv(dir: Direction2D, i: usize, config: &ScenarioConfig) -> CVec {
    arv_raw(dir, config.sim.n_h, config.sim.n_v, config.sim.d, config.wavelength(i))
}

/// Element index pairs (kh, kv) in ARV order.
pub fn element_indices(n_h: usize, n_v: usize) -> impl Iterator<Item = (f64, f64)> {
    (0..n_h).flat_map(move |kh| (0..n_v).map(move |kv| (kh as f64, kv as f64)))
}

/// Parameters of a line-of-sight path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosParams {
    pub gain_mag: f64,
    pub gain_phase: f64,
    pub delay: f64,
    pub direction: Direction2D,
}

/// All channels of one realization, per subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// SIM → SU, `[i]`.
    pub h_su_s: Vec<CVec>,
    /// SIM → PU, `[r][i]`.
    pub h_pu_s: Vec<Vec<CVec>>,
    /// PB → PU, `[r][i]`.
    pub h_pu_pb: Vec<Vec<Complex64>>,
    pub los_su: LosParams,
    pub los_pu: Vec<LosParams>,
    /// SU position drawn for this realization.
    pub p_su: [f64; 3],
}

/// Free-space amplitude λ/(4πd).
pub fn free_space_gain(lambda: f64, distance: f64) -> f64 {
    lambda / (4.0 * PI * distance)
}

/// LoS amplitude used for SIM-side links; these gains carry no subcarrier
/// index, so they use the carrier wavelength.
pub fn sim_los_gain(config: &ScenarioConfig, distance: f64) -> f64 {
    free_space_gain(config.carrier_wavelength(), distance)
}

const MAX_SCATTERER_RETRIES: usize = 100;
const MIN_SCATTERER_CLEARANCE: f64 = 1e-3;

struct Scatterer {
    /// Position.
    pos: Vector3<f64>,
    reflection: Complex64,
}

struct Sampler<'a> {
    config: &'a ScenarioConfig,
    rng: &'a mut ChaCha8Rng,
    box_lo: Vector3<f64>,
    box_hi: Vector3<f64>,
}

impl Sampler<'_> {
    fn uniform_phase(&mut self) -> f64 {
        self.rng.random_range(0.0..2.0 * PI)
    }

    fn scatterer(&mut self, a: &Vector3<f64>, b: &Vector3<f64>) -> Result<Scatterer> {
        for _ in 0..MAX_SCATTERER_RETRIES {
            let pos = Vector3::from_fn(|k, _| self.rng.random_range(self.box_lo[k]..self.box_hi[k]));
            if (pos - a).norm() > MIN_SCATTERER_CLEARANCE && (pos - b).norm() > MIN_SCATTERER_CLEARANCE {
                let mag = self.rng.random_range(0.2..0.8);
                let phase = self.uniform_phase();
                return Ok(Scatterer {
                    pos,
                    reflection: Complex64::from_polar(mag, phase),
                });
            }
        }
        Err(Error::DegenerateGeometry(format!(
            "could not place a scatterer away from the link endpoints after {MAX_SCATTERER_RETRIES} tries"
        )))
    }

    /// SIM → `target` vector channel: LoS plus `q` single-bounce paths.
    fn sim_channel(&mut self, target: &Vector3<f64>, q: usize) -> Result<(Vec<CVec>, LosParams)> {
        let cfg = self.config;
        let p_s = cfg.sim_position();
        let rot = cfg.rotation();
        let dist = (target - p_s).norm();
        let los = LosParams {
            gain_mag: sim_los_gain(cfg, dist),
            gain_phase: self.uniform_phase(),
            delay: dist / SPEED_OF_LIGHT,
            direction: local_direction(target, &p_s, &rot)?,
        };
        let mut paths = Vec::with_capacity(q);
        for _ in 0..q {
            let sc = self.scatterer(&p_s, target)?;
            let d1 = (sc.pos - p_s).norm();
            let d2 = (target - sc.pos).norm();
            let lam = cfg.carrier_wavelength();
            let gain = sc.reflection * free_space_gain(lam, d1) * free_space_gain(lam, d2);
            paths.push((gain, (d1 + d2) / SPEED_OF_LIGHT, local_direction(&sc.pos, &p_s, &rot)?));
        }
        let alpha = Complex64::from_polar(los.gain_mag, los.gain_phase);
        let per_sub = (0..cfg.num_subcarriers())
            .map(|i| {
                let zeta = cfg.zeta(i);
                let mut h = arv(los.direction, i, cfg) * (alpha * Complex64::from_polar(1.0, -zeta * los.delay));
                for &(g, tau, dir) in &paths {
                    h += arv(dir, i, cfg) * (g * Complex64::from_polar(1.0, -zeta * tau));
                }
                h
            })
            .collect();
        Ok((per_sub, los))
    }

    /// PB → PU scalar channel per subcarrier.
    fn pb_channel(&mut self, pu: &Vector3<f64>, q: usize) -> Result<Vec<Complex64>> {
        let cfg = self.config;
        let p_pb = Vector3::from(cfg.scene.p_pb);
        let dist = (pu - p_pb).norm();
        if !(dist > 0.0) {
            return Err(Error::DegenerateGeometry("PU coincides with the PB".into()));
        }
        let phase = self.uniform_phase();
        let tau = dist / SPEED_OF_LIGHT;
        let mut paths = Vec::with_capacity(q);
        for _ in 0..q {
            let sc = self.scatterer(&p_pb, pu)?;
            let d1 = (sc.pos - p_pb).norm();
            let d2 = (pu - sc.pos).norm();
            paths.push((sc.reflection, d1, d2));
        }
        Ok((0..cfg.num_subcarriers())
            .map(|i| {
                let lam = cfg.wavelength(i);
                let zeta = cfg.zeta(i);
                let mut h = Complex64::from_polar(free_space_gain(lam, dist), phase - zeta * tau);
                for &(refl, d1, d2) in &paths {
                    let g = refl * free_space_gain(lam, d1) * free_space_gain(lam, d2);
                    h += g * Complex64::from_polar(1.0, -zeta * (d1 + d2) / SPEED_OF_LIGHT);
                }
                h
            })
            .collect())
    }
}

/// Bounding box of every node and the prior region, scaled 1.5x about its centre.
fn scatterer_box(config: &ScenarioConfig) -> (Vector3<f64>, Vector3<f64>) {
    let mut pts = vec![config.sim_position(), Vector3::from(config.scene.p_pb)];
    pts.extend(config.scene.pu_positions.iter().map(|p| Vector3::from(*p)));
    pts.push(config.scene.prior_cuboid.lo());
    pts.push(config.scene.prior_cuboid.hi());
    let lo = Vector3::from_fn(|k, _| pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min));
    let hi = Vector3::from_fn(|k, _| pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max));
    let centre = (lo + hi) * 0.5;
    // Keep a minimum thickness so flat deployments still get a 3-D box.
    let half = ((hi - lo) * 0.75).map(|h| h.max(1.0));
    (centre - half, centre + half)
}

/// Draws the SU position from the prior and synthesizes every channel.
pub fn synth_channels(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<ChannelSet> {
    config.validate()?;
    let cub = config.scene.prior_cuboid;
    let p_su = Vector3::new(
        rng.random_range(cub.x[0]..cub.x[1]),
        rng.random_range(cub.y[0]..cub.y[1]),
        rng.random_range(cub.z[0]..cub.z[1]),
    );
    let (box_lo, box_hi) = scatterer_box(config);
    let mut s = Sampler {
        config,
        rng,
        box_lo,
        box_hi,
    };
    let (h_su_s, los_su) = s.sim_channel(&p_su, config.scene.q_su_s)?;
    let mut h_pu_s = Vec::new();
    let mut h_pu_pb = Vec::new();
    let mut los_pu = Vec::new();
    for pu in &config.scene.pu_positions {
        let pu = Vector3::from(*pu);
        let (h, los) = s.sim_channel(&pu, config.scene.q_pu_s)?;
        h_pu_s.push(h);
        los_pu.push(los);
        h_pu_pb.push(s.pb_channel(&pu, config.scene.q_pu_pb)?);
    }
    Ok(ChannelSet {
        h_su_s,
        h_pu_s,
        h_pu_pb,
        los_su,
        los_pu,
        p_su: [p_su.x, p_su.y, p_su.z],
    })
}

#[derive(Serialize, Deserialize)]
struct ChannelSetRepr {
    h_su_s: Vec<Vec<Complex64>>,
    h_pu_s: Vec<Vec<Vec<Complex64>>>,
    h_pu_pb: Vec<Vec<Complex64>>,
    los_su: LosParams,
    los_pu: Vec<LosParams>,
    p_su: [f64; 3],
}

fn to_vec(v: &CVec) -> Vec<Complex64> {
    v.iter().copied().collect()
}

impl Serialize for ChannelSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ChannelSetRepr {
            h_su_s: self.h_su_s.iter().map(to_vec).collect(),
            h_pu_s: self.h_pu_s.iter().map(|r| r.iter().map(to_vec).collect()).collect(),
            h_pu_pb: self.h_pu_pb.clone(),
            los_su: self.los_su,
            los_pu: self.los_pu.clone(),
            p_su: self.p_su,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChannelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = ChannelSetRepr::deserialize(d)?;
        Ok(ChannelSet {
            h_su_s: r.h_su_s.into_iter().map(CVec::from_vec).collect(),
            h_pu_s: r
                .h_pu_s
                .into_iter()
                .map(|v| v.into_iter().map(CVec::from_vec).collect())
                .collect(),
            h_pu_pb: r.h_pu_pb,
            los_su: r.los_su,
            los_pu: r.los_pu,
            p_su: r.p_su,
        })
    }
}
