//! Bayesian Fisher information for SU localization.
//!
//! The channel parameter vector is η = [el, az, τ, ρ, φ] and the state is
//! γ = [p_x, p_y, p_z, ρ, φ]. Every derivative of the noise-free observation
//! c with respect to η (or γ) is c scaled elementwise by a factor that is
//! affine in the element indices (k_h, k_v), which lets the per-sample work
//! collapse to three weighted sums per subcarrier.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{arv, local_direction, sim_los_gain, spatial_freq_derivs, Direction2D};
use crate::error::{Error, Result};
use crate::linalg::{is_psd5, solve_spd, symmetrize5, CMat, CVec, HermitianMatrix, Mat5, Vec5};
use crate::scenario::{ScenarioConfig, SPEED_OF_LIGHT};

/// RNG stream for prior samples.
pub const PRIOR_SAMPLE_STREAM: u64 = 3;

/// Samples closer than this to el ∈ {0, π} are redrawn.
const POLE_MARGIN: f64 = 1e-6;

/// Fixed chunk size for the parallel reductions, so results do not depend on
/// the number of worker threads.
const REDUCTION_CHUNK: usize = 32;

/// Indices into η.
pub const EL: usize = 0;
pub const AZ: usize = 1;
pub const TAU: usize = 2;
pub const RHO: usize = 3;
pub const PHI: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSample {
    pub p_su: [f64; 3],
    pub rho: f64,
    pub varphi: f64,
}

impl StateSample {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.p_su)
    }
}

/// Direction and delay of the SU seen from the SIM.
fn geometry(sample: &StateSample, config: &ScenarioConfig) -> Result<(Direction2D, f64)> {
    let p = sample.position();
    let p_s = config.sim_position();
    let dir = local_direction(&p, &p_s, &config.rotation())?;
    Ok((dir, (p - p_s).norm() / SPEED_OF_LIGHT))
}

fn check_sample(sample: &StateSample) -> Result<()> {
    if !(sample.rho > 0.0) || !sample.rho.is_finite() {
        return Err(Error::InvalidInput(format!("invalid sample: rho = {}", sample.rho)));
    }
    if sample.p_su.iter().any(|x| !x.is_finite()) || !sample.varphi.is_finite() {
        return Err(Error::InvalidInput("invalid sample: non-finite state".into()));
    }
    Ok(())
}

/// Draws `m` samples from the prior: positions uniform over the cuboid, ρ
/// from free-space loss at the drawn distance, φ uniform on [0, 2π).
pub fn draw_samples(config: &ScenarioConfig, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<StateSample>> {
    let cub = config.scene.prior_cuboid;
    let p_s = config.sim_position();
    let rot = config.rotation();
    let mut out = Vec::with_capacity(m);
    let mut rejected = 0usize;
    while out.len() < m {
        let p = Vector3::new(
            rng.random_range(cub.x[0]..cub.x[1]),
            rng.random_range(cub.y[0]..cub.y[1]),
            rng.random_range(cub.z[0]..cub.z[1]),
        );
        let varphi = rng.random_range(0.0..2.0 * PI);
        let dir = local_direction(&p, &p_s, &rot)?;
        if dir.el < POLE_MARGIN || dir.el > PI - POLE_MARGIN {
            rejected += 1;
            if rejected > 1000 * m.max(1) {
                return Err(Error::DegenerateGeometry("prior region lies on the surface normal axis".into()));
            }
            continue;
        }
        out.push(StateSample {
            p_su: [p.x, p.y, p.z],
            rho: sim_los_gain(config, (p - p_s).norm()),
            varphi,
        });
    }
    Ok(out)
}

/// Samples for a scenario, from its seed.
pub fn prior_samples(config: &ScenarioConfig) -> Result<Vec<StateSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.scene.rng_seed);
    rng.set_stream(PRIOR_SAMPLE_STREAM);
    draw_samples(config, config.fisher.m_p, &mut rng)
}

/// T[u][j] = ∂η_j/∂γ_u, so that ∂c/∂γ_u = Σ_j T[u][j]·∂c/∂η_j.
pub fn jacobian_t(sample: &StateSample, config: &ScenarioConfig) -> Result<Mat5> {
    check_sample(sample)?;
    let rot: Matrix3<f64> = config.rotation();
    let diff = sample.position() - config.sim_position();
    let q = rot.transpose() * diff;
    let r = q.norm();
    let rho_xy2 = q.x * q.x + q.y * q.y;
    if !(r > 0.0) {
        return Err(Error::DegenerateGeometry("SU coincides with the SIM".into()));
    }
    if rho_xy2 <= (POLE_MARGIN * r).powi(2) {
        return Err(Error::DegenerateGeometry(
            "SU on the surface normal axis: azimuth derivative undefined".into(),
        ));
    }
    let rho_xy = rho_xy2.sqrt();
    // el = acos(q_z / r): ∂el/∂q = (q_z q / r² − e_z) · 1/ρ_xy
    let del_dq = Vector3::new(q.z * q.x / (r * r), q.z * q.y / (r * r), q.z * q.z / (r * r) - 1.0) / rho_xy;
    let daz_dq = Vector3::new(-q.y, q.x, 0.0) / rho_xy2;
    let del_dp = rot * del_dq;
    let daz_dp = rot * daz_dq;
    let dtau_dp = diff / (r * SPEED_OF_LIGHT);
    let mut t = Mat5::zeros();
    for k in 0..3 {
        t[(k, EL)] = del_dp[k];
        t[(k, AZ)] = daz_dp[k];
        t[(k, TAU)] = dtau_dp[k];
    }
    t[(RHO, RHO)] = 1.0;
    t[(PHI, PHI)] = 1.0;
    Ok(t)
}

/// Affine factor s[n] = a + b·k_h + g·k_v with ∂c/∂(·) = c ⊙ s.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Affine {
    a: Complex64,
    b: Complex64,
    g: Complex64,
}

impl Affine {
    fn eval(&self, kh: f64, kv: f64) -> Complex64 {
        self.a + self.b * kh + self.g * kv
    }

    fn add_scaled(&mut self, s: f64, other: &Affine) {
        self.a += other.a * s;
        self.b += other.b * s;
        self.g += other.g * s;
    }
}

/// Elementwise factors for ∂c/∂η_u on subcarrier `i`.
fn eta_factors(dir: Direction2D, rho: f64, i: usize, config: &ScenarioConfig) -> [Affine; 5] {
    let dw = spatial_freq_derivs(dir, config.sim.d, config.wavelength(i));
    let mj2pi = Complex64::new(0.0, -2.0 * PI);
    let zero = Complex64::new(0.0, 0.0);
    [
        Affine { a: zero, b: mj2pi * dw[0][0], g: mj2pi * dw[0][1] },
        Affine { a: zero, b: mj2pi * dw[1][0], g: mj2pi * dw[1][1] },
        Affine { a: Complex64::new(0.0, -config.zeta(i)), b: zero, g: zero },
        Affine { a: Complex64::new(1.0 / rho, 0.0), b: zero, g: zero },
        Affine { a: Complex64::new(0.0, 1.0), b: zero, g: zero },
    ]
}

fn gamma_factors(eta: &[Affine; 5], t: &Mat5) -> [Affine; 5] {
    let mut out = [Affine::default(); 5];
    for (u, o) in out.iter_mut().enumerate() {
        for (j, e) in eta.iter().enumerate() {
            o.add_scaled(t[(u, j)], e);
        }
    }
    out
}

fn observation(sample: &StateSample, dir: Direction2D, tau: f64, i: usize, config: &ScenarioConfig) -> CVec {
    let gain = config.scene.p_sb_watts.sqrt()
        * Complex64::from_polar(sample.rho, sample.varphi - config.zeta(i) * tau);
    arv(dir, i, config) * gain
}

fn apply(c: &CVec, s: &Affine, config: &ScenarioConfig) -> CVec {
    let n_v = config.sim.n_v;
    CVec::from_fn(c.len(), |n, _| c[n] * s.eval((n / n_v) as f64, (n % n_v) as f64))
}

/// Noise-free observation c[i] and its five η-derivatives.
pub fn c_and_derivatives(sample: &StateSample, i: usize, config: &ScenarioConfig) -> Result<(CVec, [CVec; 5])> {
    check_sample(sample)?;
    let (dir, tau) = geometry(sample, config)?;
    let c = observation(sample, dir, tau, i, config);
    let f = eta_factors(dir, sample.rho, i, config);
    let du = std::array::from_fn(|u| apply(&c, &f[u], config));
    Ok((c, du))
}

/// Everything derived from one sample, across all subcarriers.
#[derive(Debug, Clone)]
pub struct DerivativeBundle {
    pub c: Vec<CVec>,
    pub c_u: Vec<[CVec; 5]>,
    pub t: Mat5,
    pub ctilde_u: Vec<[CVec; 5]>,
}

pub fn derivative_bundle(sample: &StateSample, config: &ScenarioConfig) -> Result<DerivativeBundle> {
    let t = jacobian_t(sample, config)?;
    let (dir, tau) = geometry(sample, config)?;
    let mut b = DerivativeBundle { c: Vec::new(), c_u: Vec::new(), t, ctilde_u: Vec::new() };
    for i in 0..config.num_subcarriers() {
        let c = observation(sample, dir, tau, i, config);
        let eta = eta_factors(dir, sample.rho, i, config);
        let gam = gamma_factors(&eta, &t);
        b.c_u.push(std::array::from_fn(|u| apply(&c, &eta[u], config)));
        b.ctilde_u.push(std::array::from_fn(|u| apply(&c, &gam[u], config)));
        b.c.push(c);
    }
    Ok(b)
}

/// Per-sample data reused across FIM and surrogate-matrix evaluations.
#[derive(Debug, Clone)]
struct Prepared {
    sample: StateSample,
    dir: Direction2D,
    tau: f64,
    /// γ-factors per subcarrier.
    gamma: Vec<[Affine; 5]>,
}

/// Monte-Carlo expectation machinery over a fixed set of prior samples.
#[derive(Debug, Clone)]
pub struct FisherContext {
    config: ScenarioConfig,
    prepared: Vec<Prepared>,
}

/// Bayesian FIM and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct BfimParts {
    pub j_d: Mat5,
    pub j_p: Mat5,
    pub j_b: Mat5,
    pub bcrb: f64,
}

#[derive(Serialize, Deserialize)]
struct BfimRepr {
    j_d: [[f64; 5]; 5],
    j_p: [[f64; 5]; 5],
    j_b: [[f64; 5]; 5],
    bcrb: f64,
    trace_lower_bound: f64,
}

fn rows(m: &Mat5) -> [[f64; 5]; 5] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

impl Serialize for BfimParts {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BfimRepr {
            j_d: rows(&self.j_d),
            j_p: rows(&self.j_p),
            j_b: rows(&self.j_b),
            bcrb: self.bcrb,
            trace_lower_bound: trace_lower_bound(&self.j_b),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BfimParts {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = BfimRepr::deserialize(d)?;
        let m = |a: [[f64; 5]; 5]| Mat5::from_fn(|i, j| a[i][j]);
        Ok(BfimParts { j_d: m(r.j_d), j_p: m(r.j_p), j_b: m(r.j_b), bcrb: r.bcrb })
    }
}

impl FisherContext {
    pub fn new(config: &ScenarioConfig, samples: &[StateSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no prior samples".into()));
        }
        let prepared = samples
            .iter()
            .map(|s| {
                let t = jacobian_t(s, config)?;
                let (dir, tau) = geometry(s, config)?;
                let gamma = (0..config.num_subcarriers())
                    .map(|i| gamma_factors(&eta_factors(dir, s.rho, i, config), &t))
                    .collect();
                Ok(Prepared { sample: *s, dir, tau, gamma })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FisherContext { config: config.clone(), prepared })
    }

    pub fn num_samples(&self) -> usize {
        self.prepared.len()
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    /// (Σ w, Σ k_h w, Σ k_v w) with w = c ⊙ f.
    fn moments(&self, p: &Prepared, i: usize, f: &CVec) -> [Complex64; 3] {
        let c = observation(&p.sample, p.dir, p.tau, i, &self.config);
        let n_v = self.config.sim.n_v;
        let mut m = [Complex64::new(0.0, 0.0); 3];
        for n in 0..c.len() {
            let w = c[n] * f[n];
            m[0] += w;
            m[1] += w * (n / n_v) as f64;
            m[2] += w * (n % n_v) as f64;
        }
        m
    }

    fn check_f_set(&self, f_set: &[CVec]) -> Result<()> {
        if f_set.len() != self.config.num_subcarriers() {
            return Err(Error::InvalidInput(format!(
                "expected {} subcarrier vectors, got {}",
                self.config.num_subcarriers(),
                f_set.len()
            )));
        }
        let n = self.config.num_elements();
        if f_set.iter().any(|f| f.len() != n) {
            return Err(Error::InvalidInput(format!("beamforming vectors must have length {n}")));
        }
        Ok(())
    }

    /// Data part of the FIM for the given per-subcarrier SIM outputs.
    pub fn data_fim(&self, f_set: &[CVec]) -> Result<Mat5> {
        self.check_f_set(f_set)?;
        let scale = 2.0 / (self.config.noise_power() * self.prepared.len() as f64);
        let partials: Vec<Mat5> = self
            .prepared
            .par_chunks(REDUCTION_CHUNK)
            .map(|chunk| {
                let mut acc = Mat5::zeros();
                for p in chunk {
                    for (i, f) in f_set.iter().enumerate() {
                        let m = self.moments(p, i, f);
                        let y: [Complex64; 5] =
                            std::array::from_fn(|u| p.gamma[i][u].a * m[0] + p.gamma[i][u].b * m[1] + p.gamma[i][u].g * m[2]);
                        for u in 0..5 {
                            for w in u..5 {
                                acc[(u, w)] += (y[u].conj() * y[w]).re;
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut j = partials.into_iter().fold(Mat5::zeros(), |a, b| a + b) * scale;
        for u in 0..5 {
            for w in 0..u {
                j[(u, w)] = j[(w, u)];
            }
        }
        Ok(j)
    }

    pub fn prior_fim(&self) -> Mat5 {
        Mat5::identity() * self.config.fisher.eps_reg
    }

    pub fn bfim(&self, f_set: &[CVec]) -> Result<BfimParts> {
        let j_d = self.data_fim(f_set)?;
        debug_assert!(is_psd5(&j_d, 1e-10), "data FIM not PSD");
        let j_p = self.prior_fim();
        let j_b = j_d + j_p;
        let bcrb = bcrb_of(&j_b)?;
        debug_assert!(bcrb >= trace_lower_bound(&j_b) * (1.0 - 1e-9));
        Ok(BfimParts { j_d, j_p, j_b, bcrb })
    }

    /// ½(C̄ + C̄ᴴ) with C̄ = Σ_j E[(2/σ²) c̄*_{d_j} c̄_{d_j}ᵀ] on subcarrier `i`.
    pub fn assemble_a(&self, d: &[Vec5], i: usize) -> HermitianMatrix {
        let n = self.config.num_elements();
        let n_v = self.config.sim.n_v;
        let m = self.prepared.len();
        let weight = (2.0 / (self.config.noise_power() * m as f64)).sqrt();
        let cols = d.len();
        let blocks: Vec<CMat> = self
            .prepared
            .par_chunks(REDUCTION_CHUNK)
            .map(|chunk| {
                let mut x = CMat::zeros(n, chunk.len() * cols);
                for (s, p) in chunk.iter().enumerate() {
                    let c = observation(&p.sample, p.dir, p.tau, i, &self.config);
                    for (j, dj) in d.iter().enumerate() {
                        let mut f = Affine::default();
                        for r in 0..5 {
                            f.add_scaled(dj[r], &p.gamma[i][r]);
                        }
                        let col = s * cols + j;
                        for k in 0..n {
                            let v = c[k] * f.eval((k / n_v) as f64, (k % n_v) as f64);
                            x[(k, col)] = v.conj() * weight;
                        }
                    }
                }
                &x * x.adjoint()
            })
            .collect();
        let sum = blocks.into_iter().fold(CMat::zeros(n, n), |a, b| a + b);
        HermitianMatrix::from_symmetrized(sum)
    }
}

/// tr([J⁻¹]_{1:3,1:3}).
pub fn bcrb_of(j_b: &Mat5) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..3 {
        let x = solve_spd(j_b, &Vec5::ith(k, 1.0))?;
        total += x[k];
    }
    Ok(total)
}

/// 9 / tr([J]_{1:3,1:3}), a lower bound on [`bcrb_of`].
pub fn trace_lower_bound(j_b: &Mat5) -> f64 {
    let s = symmetrize5(j_b);
    9.0 / (s[(0, 0)] + s[(1, 1)] + s[(2, 2)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Matrix3x2};

    fn cfg() -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        c.sim.n_h = 3;
        c.sim.n_v = 4;
        c.scene.num_subcarriers = 4;
        c
    }

    fn sample() -> StateSample {
        StateSample { p_su: [58.0, 3.0, 1.2], rho: 2.3e-5, varphi: 0.7 }
    }

    fn rel_err(a: &CVec, b: &CVec) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn phase_derivative_is_j_c() {
        let (c, du) = c_and_derivatives(&sample(), 2, &cfg()).unwrap();
        assert_eq!(du[PHI], c.map(|z| z * Complex64::i()));
    }

    #[test]
    fn delay_derivative_vanishes_on_first_subcarrier() {
        let (_, du) = c_and_derivatives(&sample(), 0, &cfg()).unwrap();
        assert!(du[TAU].iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn invalid_rho_rejected() {
        let mut s = sample();
        s.rho = 0.0;
        assert!(c_and_derivatives(&s, 0, &cfg()).is_err());
    }

    /// Builds c directly from (el, az, τ, ρ, φ) without any of the module's
    /// derivative code.
    fn c_from_eta(eta: [f64; 5], i: usize, config: &ScenarioConfig) -> CVec {
        let dir = Direction2D { el: eta[0], az: eta[1] };
        let lam = config.wavelength(i);
        let wh = config.sim.d * eta[1].sin() * eta[0].sin() / lam;
        let wv = config.sim.d * eta[0].cos() / lam;
        let _ = dir;
        let nv = config.sim.n_v;
        let g = config.scene.p_sb_watts.sqrt() * Complex64::from_polar(eta[3], eta[4] - config.zeta(i) * eta[2]);
        CVec::from_fn(config.num_elements(), |n, _| {
            let (kh, kv) = ((n / nv) as f64, (n % nv) as f64);
            g * Complex64::from_polar(1.0, -2.0 * PI * (wh * kh + wv * kv))
        })
    }

    #[test]
    fn eta_derivatives_match_finite_differences() {
        let config = cfg();
        let s = sample();
        let (dir, tau) = geometry(&s, &config).unwrap();
        let eta = [dir.el, dir.az, tau, s.rho, s.varphi];
        for i in 0..config.num_subcarriers() {
            let (c, du) = c_and_derivatives(&s, i, &config).unwrap();
            assert!(rel_err(&c, &c_from_eta(eta, i, &config)) < 1e-12);
            for u in 0..5 {
                if u == TAU && i == 0 {
                    continue;
                }
                let h = 1e-7 * eta[u].abs().max(1e-3);
                let mut ep = eta;
                let mut em = eta;
                ep[u] += h;
                em[u] -= h;
                let fd = (c_from_eta(ep, i, &config) - c_from_eta(em, i, &config)) / Complex64::new(2.0 * h, 0.0);
                assert!(rel_err(&du[u], &fd) < 1e-6, "u={u} i={i} err={}", rel_err(&du[u], &fd));
            }
        }
    }

    fn eta_of_position(p: Vector3<f64>, config: &ScenarioConfig) -> [f64; 3] {
        let q = config.rotation().transpose() * (p - config.sim_position());
        let r = q.norm();
        [(q.z / r).acos(), q.y.atan2(q.x), r / SPEED_OF_LIGHT]
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut config = cfg();
        // A rotated surface frame exercises the R_s chain rule.
        let (a, b) = (0.3f64, -0.2f64);
        let rz = Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(b.cos(), 0.0, b.sin(), 0.0, 1.0, 0.0, -b.sin(), 0.0, b.cos());
        let r = rz * ry;
        config.scene.r_s = std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]));
        let s = sample();
        let t = jacobian_t(&s, &config).unwrap();
        let p = s.position();
        for k in 0..3 {
            let h = 1e-7 * p[k].abs().max(1.0);
            let mut pp = p;
            let mut pm = p;
            pp[k] += h;
            pm[k] -= h;
            let (ep, em) = (eta_of_position(pp, &config), eta_of_position(pm, &config));
            for j in 0..3 {
                let fd = (ep[j] - em[j]) / (2.0 * h);
                let scale = (0..3).map(|kk| t[(kk, j)].abs()).fold(0.0, f64::max);
                assert!((t[(k, j)] - fd).abs() <= 1e-6 * scale, "k={k} j={j} {} vs {fd}", t[(k, j)]);
            }
        }
        let tau_grad = Vector3::new(t[(0, TAU)], t[(1, TAU)], t[(2, TAU)]);
        assert!((tau_grad.norm() * SPEED_OF_LIGHT - 1.0).abs() < 1e-12);
        assert_eq!(t.fixed_view::<2, 2>(3, 3).into_owned(), Matrix2::identity());
        assert!(t.fixed_view::<3, 2>(0, 3).into_owned() == Matrix3x2::zeros());
    }

    #[test]
    fn jacobian_on_axis_is_error() {
        let config = cfg();
        let p = config.sim_position();
        let s = StateSample { p_su: [p.x, p.y, p.z + 10.0], rho: 1e-5, varphi: 0.0 };
        assert!(matches!(jacobian_t(&s, &config), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn ctilde_is_linear_combination() {
        let config = cfg();
        let b = derivative_bundle(&sample(), &config).unwrap();
        for i in 0..config.num_subcarriers() {
            for u in 0..5 {
                let mut expect = CVec::zeros(config.num_elements());
                for j in 0..5 {
                    expect += &b.c_u[i][j] * Complex64::new(b.t[(u, j)], 0.0);
                }
                assert!((&b.ctilde_u[i][u] - &expect).norm() <= 1e-12 * expect.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn samples_lie_in_prior() {
        let config = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = draw_samples(&config, 200, &mut rng).unwrap();
        assert!(s.iter().all(|x| config.scene.prior_cuboid.contains(&x.position()) && x.rho > 0.0));
    }

    fn random_f(config: &ScenarioConfig, seed: u64) -> Vec<CVec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..config.num_subcarriers())
            .map(|_| CVec::from_fn(config.num_elements(), |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))))
            .collect()
    }

    fn context(config: &ScenarioConfig, m: usize) -> FisherContext {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = draw_samples(config, m, &mut rng).unwrap();
        FisherContext::new(config, &s).unwrap()
    }

    /// Direct evaluation of the data FIM from the derivative bundles.
    fn jd_direct(config: &ScenarioConfig, samples: &[StateSample], f: &[CVec]) -> Mat5 {
        let sigma2 = config.noise_power();
        let mut j = Mat5::zeros();
        for s in samples {
            let b = derivative_bundle(s, config).unwrap();
            for i in 0..config.num_subcarriers() {
                let y: Vec<Complex64> = (0..5).map(|u| (b.ctilde_u[i][u].transpose() * &f[i])[(0, 0)]).collect();
                for u in 0..5 {
                    for w in 0..5 {
                        j[(u, w)] += 2.0 / sigma2 * (y[u].conj() * y[w]).re;
                    }
                }
            }
        }
        j / samples.len() as f64
    }

    #[test]
    fn data_fim_matches_direct_sum() {
        let config = cfg();
        let ctx = context(&config, 40);
        let samples: Vec<StateSample> = ctx.prepared.iter().map(|p| p.sample).collect();
        let f = random_f(&config, 3);
        let fast = ctx.data_fim(&f).unwrap();
        let slow = jd_direct(&config, &samples, &f);
        assert!((fast - slow).norm() <= 1e-10 * slow.norm());
        assert!(is_psd5(&fast, 1e-10));
    }

    #[test]
    fn scalar_case_matches_hand_rolled() {
        let mut config = cfg();
        config.sim.n_h = 1;
        config.sim.n_v = 1;
        config.scene.num_subcarriers = 1;
        let s = sample();
        let ctx = FisherContext::new(&config, &[s]).unwrap();
        let f = vec![CVec::from_element(1, Complex64::new(0.6, -0.3))];
        let j = ctx.data_fim(&f).unwrap();
        // N = 1, i = 0: c = √P ρ e^{jφ}; only ρ and φ derivatives survive.
        let c = config.scene.p_sb_watts.sqrt() * Complex64::from_polar(s.rho, s.varphi);
        let t = jacobian_t(&s, &config).unwrap();
        let dc = [Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), c / s.rho, c * Complex64::i()];
        let sigma2 = config.noise_power();
        for u in 0..5 {
            for w in 0..5 {
                let cu: Complex64 = (0..5).map(|k| dc[k] * t[(u, k)]).sum::<Complex64>() * f[0][0];
                let cw: Complex64 = (0..5).map(|k| dc[k] * t[(w, k)]).sum::<Complex64>() * f[0][0];
                let expect = 2.0 / sigma2 * (cu.conj() * cw).re;
                assert!((j[(u, w)] - expect).abs() <= 1e-12 * expect.abs().max(j.norm() * 1e-3));
            }
        }
    }

    #[test]
    fn zero_beam_gives_zero_fim_and_scaling_is_quadratic() {
        let config = cfg();
        let ctx = context(&config, 10);
        let zero = vec![CVec::zeros(config.num_elements()); config.num_subcarriers()];
        assert_eq!(ctx.data_fim(&zero).unwrap(), Mat5::zeros());
        let f = random_f(&config, 8);
        let f2: Vec<CVec> = f.iter().map(|v| v * Complex64::new(2f64.sqrt(), 0.0)).collect();
        let (a, b) = (ctx.data_fim(&f).unwrap(), ctx.data_fim(&f2).unwrap());
        assert!((b - a * 2.0).norm() <= 1e-12 * b.norm());
    }

    #[test]
    fn fim_invariant_to_sample_order() {
        let config = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = draw_samples(&config, 70, &mut rng).unwrap();
        let mut rev = s.clone();
        rev.reverse();
        let f = random_f(&config, 1);
        let a = FisherContext::new(&config, &s).unwrap().data_fim(&f).unwrap();
        let b = FisherContext::new(&config, &rev).unwrap().data_fim(&f).unwrap();
        assert!((a - b).norm() <= 1e-12 * a.norm());
    }

    #[test]
    fn assemble_a_matches_outer_products() {
        let config = cfg();
        let ctx = context(&config, 6);
        let d = [Vec5::new(1.0, -0.5, 2e8, 3e3, 0.2), Vec5::new(0.0, 1.0, 0.0, 0.0, 0.0), Vec5::new(0.3, 0.0, 1e9, 0.0, 1.0)];
        let sigma2 = config.noise_power();
        let n = config.num_elements();
        for i in [0, 3] {
            let a = ctx.assemble_a(&d, i);
            let mut cbar = CMat::zeros(n, n);
            for p in &ctx.prepared {
                let b = derivative_bundle(&p.sample, &config).unwrap();
                for dj in &d {
                    let mut v = CVec::zeros(n);
                    for r in 0..5 {
                        v += &b.ctilde_u[i][r] * Complex64::new(dj[r], 0.0);
                    }
                    cbar += v.conjugate() * v.transpose() * Complex64::new(2.0 / sigma2, 0.0);
                }
            }
            cbar /= Complex64::new(ctx.num_samples() as f64, 0.0);
            let expect = (&cbar + cbar.adjoint()) * Complex64::new(0.5, 0.0);
            assert!((a.as_matrix() - &expect).norm() <= 1e-10 * expect.norm());
        }
        let zero = [Vec5::zeros(); 3];
        assert_eq!(ctx.assemble_a(&zero, 1).frobenius_norm(), 0.0);
    }

    #[test]
    fn assemble_a_is_mean_of_single_sample_matrices() {
        let config = cfg();
        let ctx = context(&config, 5);
        let d = [Vec5::ith(0, 1.0), Vec5::ith(1, 1.0), Vec5::ith(2, 1e8)];
        let full = ctx.assemble_a(&d, 2);
        let mut mean = CMat::zeros(12, 12);
        for p in &ctx.prepared {
            let single = FisherContext::new(&config, &[p.sample]).unwrap();
            mean += single.assemble_a(&d, 2).as_matrix();
        }
        mean /= Complex64::new(5.0, 0.0);
        assert!((full.as_matrix() - mean).norm() <= 1e-12 * full.frobenius_norm());
    }

    #[test]
    fn bfim_quadratic_form_matches_assemble_a() {
        // Σ_j d_jᵀ J_D d_j = Σ_i f[i]ᴴ A[i] f[i].
        let config = cfg();
        let ctx = context(&config, 12);
        let f = random_f(&config, 4);
        let d = [Vec5::new(1.0, 2.0, 1e8, 0.0, 0.5), Vec5::new(-1.0, 0.0, 0.0, 1e4, 0.0), Vec5::ith(2, 3e8)];
        let jd = ctx.data_fim(&f).unwrap();
        let lhs: f64 = d.iter().map(|v| (v.transpose() * jd * v)[(0, 0)]).sum();
        let rhs: f64 = (0..config.num_subcarriers()).map(|i| ctx.assemble_a(&d, i).quad_form(&f[i])).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs());
    }

    #[test]
    fn bcrb_examples() {
        assert!((bcrb_of(&Mat5::identity()).unwrap() - 3.0).abs() < 1e-14);
        let d = Mat5::from_diagonal(&Vec5::new(1.0, 2.0, 4.0, 1.0, 1.0));
        assert!((bcrb_of(&d).unwrap() - 1.75).abs() < 1e-14);
        assert!((trace_lower_bound(&Mat5::identity()) - 3.0).abs() < 1e-15);
        assert!((trace_lower_bound(&d) - 9.0 / 7.0).abs() < 1e-15);
        assert!(bcrb_of(&Mat5::zeros()).is_err());
    }

    fn random_spd(rng: &mut ChaCha8Rng) -> Mat5 {
        let g = Mat5::from_fn(|_, _| rng.random_range(-1.0..1.0));
        g * g.transpose() + Mat5::identity() * 0.05
    }

    #[test]
    fn bcrb_matches_schur_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let j = random_spd(&mut rng);
            let u = j.fixed_view::<3, 3>(0, 0).into_owned();
            let v = j.fixed_view::<3, 2>(0, 3).into_owned();
            let w = j.fixed_view::<2, 2>(3, 3).into_owned();
            let s = u - v * w.try_inverse().unwrap() * v.transpose();
            let expect = s.try_inverse().unwrap().trace();
            let got = bcrb_of(&j).unwrap();
            assert!((got - expect).abs() <= 1e-9 * expect, "{got} vs {expect}");
        }
    }

    #[test]
    fn trace_bound_holds_for_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for _ in 0..1000 {
            let j = random_spd(&mut rng);
            assert!(bcrb_of(&j).unwrap() >= trace_lower_bound(&j) * (1.0 - 1e-12));
        }
    }

    #[test]
    fn bfim_serializes() {
        let config = cfg();
        let ctx = context(&config, 8);
        let parts = ctx.bfim(&random_f(&config, 2)).unwrap();
        let s = serde_json::to_string(&parts).unwrap();
        let back: BfimParts = serde_json::from_str(&s).unwrap();
        assert_eq!(back, parts);
        assert_eq!(parts.j_b, parts.j_d + parts.j_p);
    }
}
