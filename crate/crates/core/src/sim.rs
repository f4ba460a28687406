//! Stacked-metasurface propagation model.
//!
//! Layers are N_h x N_v grids with spacing `d`, stacked co-axially along the
//! local +x axis with spacing `d_s`. Element `n = kh·N_v + kv` sits at
//! lateral offset ((kh − (N_h−1)/2)·d, (kv − (N_v−1)/2)·d), matching the ARV
//! ordering. The feed is a point source `d_s` behind the first layer's
//! centre.
//!
//! Because every pair of adjacent layers has the same geometry, the coupling
//! matrix W^(ℓ)[i] does not depend on ℓ and is stored once per subcarrier.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec};
use crate::scenario::{ScenarioConfig, SPEED_OF_LIGHT};

/// RNG stream used for the initial phases.
pub const PHASE_INIT_STREAM: u64 = 2;

/// Wraps an angle into (−π, π].
pub fn wrap_phase(x: f64) -> f64 {
    if x > -PI && x <= PI {
        return x;
    }
    let y = PI - (PI - x).rem_euclid(2.0 * PI);
    // rem_euclid may return exactly 2π for tiny negative inputs.
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// Rayleigh–Sommerfeld transmission coefficient over `distance` at `freq`.
pub fn rs_kernel(distance: f64, freq: f64, a_s: f64, d_s: f64) -> Complex64 {
    let k = freq / SPEED_OF_LIGHT;
    let amp = a_s * d_s / (distance * distance);
    let near = Complex64::new(1.0 / (2.0 * PI * distance), -k);
    near * amp * Complex64::from_polar(1.0, 2.0 * PI * distance * k)
}

/// Lateral (y, z) offset of element `n` within a layer.
pub fn element_offset(n: usize, n_h: usize, n_v: usize, d: f64) -> (f64, f64) {
    let kh = (n / n_v) as f64;
    let kv = (n % n_v) as f64;
    ((kh - (n_h as f64 - 1.0) / 2.0) * d, (kv - (n_v as f64 - 1.0) / 2.0) * d)
}

/// Distance between element `n` of one layer and element `n_prev` of the
/// previous layer.
fn inter_layer_distance(n: usize, n_prev: usize, config: &ScenarioConfig) -> f64 {
    let s = &config.sim;
    let (y1, z1) = element_offset(n, s.n_h, s.n_v, s.d);
    let (y0, z0) = element_offset(n_prev, s.n_h, s.n_v, s.d);
    (s.d_s * s.d_s + (y1 - y0).powi(2) + (z1 - z0).powi(2)).sqrt()
}

/// Entry (n, n′) of W^(ℓ)[i], the coupling from element n′ of layer ℓ−1 to
/// element n of layer ℓ (`layer` is 1-based, 2..=L; `i` zero-based).
pub fn rs_coupling(n: usize, n_prev: usize, layer: usize, i: usize, config: &ScenarioConfig) -> Result<Complex64> {
    let nn = config.num_elements();
    if n >= nn || n_prev >= nn || layer < 2 || layer > config.sim.layers || i >= config.num_subcarriers() {
        return Err(Error::InvalidInput(format!(
            "coupling index out of range: n={n}, n'={n_prev}, layer={layer}, i={i}"
        )));
    }
    let dist = inter_layer_distance(n, n_prev, config);
    if !(dist > 0.0) {
        return Err(Error::DegenerateGeometry("zero inter-atom distance".into()));
    }
    Ok(rs_kernel(dist, config.subcarrier_freq(i), config.sim.a_s, config.sim.d_s))
}

fn coupling_matrix(i: usize, config: &ScenarioConfig) -> CMat {
    let nn = config.num_elements();
    let f = config.subcarrier_freq(i);
    DMatrix::from_fn(nn, nn, |n, m| {
        rs_kernel(inter_layer_distance(n, m, config), f, config.sim.a_s, config.sim.d_s)
    })
}

fn feed_vector(i: usize, config: &ScenarioConfig) -> CVec {
    let s = &config.sim;
    let f = config.subcarrier_freq(i);
    CVec::from_fn(config.num_elements(), |n, _| {
        let (y, z) = element_offset(n, s.n_h, s.n_v, s.d);
        let dist = (s.d_s * s.d_s + y * y + z * z).sqrt();
        rs_kernel(dist, f, s.a_s, s.d_s)
    })
}

/// Phase configuration plus the phase-independent coupling tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SimStack {
    /// L x N matrix, row ℓ holds the phases of layer ℓ+1, wrapped to (−π, π].
    pub phases: DMatrix<f64>,
    coupling: Vec<CMat>,
    feed: Vec<CVec>,
    layout_hash: u64,
}

impl SimStack {
    pub fn layers(&self) -> usize {
        self.phases.nrows()
    }

    pub fn num_elements(&self) -> usize {
        self.phases.ncols()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.feed.len()
    }

    pub fn layout_hash(&self) -> u64 {
        self.layout_hash
    }

    /// W^(ℓ)[i] for 1-based ℓ in 2..=L.
    pub fn coupling(&self, layer: usize, i: usize) -> &CMat {
        debug_assert!(layer >= 2 && layer <= self.layers());
        &self.coupling[i]
    }

    /// Feed vector w[i].
    pub fn feed(&self, i: usize) -> &CVec {
        &self.feed[i]
    }

    /// e^{jφ} for 0-based layer index.
    pub fn phase_factors(&self, layer: usize) -> Vec<Complex64> {
        self.phases.row(layer).iter().map(|&p| Complex64::from_polar(1.0, p)).collect()
    }

    /// Replaces the phases (wrapped) keeping the couplings.
    pub fn set_phases(&mut self, phases: DMatrix<f64>) -> Result<()> {
        if phases.shape() != self.phases.shape() {
            return Err(Error::InvalidInput(format!(
                "phase matrix shape {:?} does not match {:?}",
                phases.shape(),
                self.phases.shape()
            )));
        }
        if phases.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("phase matrix".into()));
        }
        self.phases = phases.map(wrap_phase);
        Ok(())
    }

    /// Builds a stack with given couplings, e.g. for synthetic tests.
    pub fn from_parts(phases: DMatrix<f64>, coupling: Vec<CMat>, feed: Vec<CVec>) -> Result<Self> {
        let n = phases.ncols();
        if coupling.len() != feed.len()
            || coupling.iter().any(|w| w.shape() != (n, n))
            || feed.iter().any(|w| w.len() != n)
        {
            return Err(Error::InvalidInput("inconsistent SIM dimensions".into()));
        }
        Ok(SimStack {
            phases: phases.map(wrap_phase),
            coupling,
            feed,
            layout_hash: 0,
        })
    }

    /// Serializes the coupling tensors with a versioned header.
    pub fn write_coupling_cache<W: Write>(&self, mut out: W, config: &ScenarioConfig) -> Result<()> {
        out.write_all(CACHE_MAGIC)?;
        for v in [CACHE_VERSION, config.sim.layers as u32, config.sim.n_h as u32, config.sim.n_v as u32, self.num_subcarriers() as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&config.scene.f_c.to_le_bytes())?;
        out.write_all(&config.scene.delta_f.to_le_bytes())?;
        out.write_all(&self.layout_hash.to_le_bytes())?;
        for (w_mat, w_vec) in self.coupling.iter().zip(&self.feed) {
            for z in w_vec.iter().chain(w_mat.iter()) {
                out.write_all(&z.re.to_le_bytes())?;
                out.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads coupling tensors written by [`SimStack::write_coupling_cache`];
    /// fails if the header does not match `config`.
    pub fn read_coupling_cache<R: Read>(mut input: R, config: &ScenarioConfig, phases: DMatrix<f64>) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        let mismatch = |what: &str| Error::InvalidInput(format!("coupling cache header mismatch: {what}"));
        if &magic != CACHE_MAGIC {
            return Err(mismatch("magic"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let expected = [CACHE_VERSION, config.sim.layers as u32, config.sim.n_h as u32, config.sim.n_v as u32, config.num_subcarriers() as u32];
        for (name, want) in ["version", "L", "N_h", "N_v", "I"].iter().zip(expected) {
            if read_u32(&mut input)? != want {
                return Err(mismatch(name));
            }
        }
        let mut b8 = [0u8; 8];
        let mut read_f64 = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut b8)?;
            Ok(f64::from_le_bytes(b8))
        };
        if read_f64(&mut input)? != config.scene.f_c || read_f64(&mut input)? != config.scene.delta_f {
            return Err(mismatch("frequency grid"));
        }
        input.read_exact(&mut b8)?;
        if u64::from_le_bytes(b8) != config.layout_hash() {
            return Err(mismatch("layout hash"));
        }
        let n = config.num_elements();
        let read_c = |r: &mut R| -> Result<Complex64> {
            let mut b = [0u8; 16];
            r.read_exact(&mut b)?;
            Ok(Complex64::new(
                f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
                f64::from_le_bytes(b[8..].try_into().expect("8 bytes")),
            ))
        };
        let mut coupling = Vec::new();
        let mut feed = Vec::new();
        for _ in 0..config.num_subcarriers() {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(read_c(&mut input)?);
            }
            let mut m = Vec::with_capacity(n * n);
            for _ in 0..n * n {
                m.push(read_c(&mut input)?);
            }
            feed.push(CVec::from_vec(v));
            coupling.push(CMat::from_vec(n, n, m));
        }
        let mut stack = SimStack::from_parts(phases, coupling, feed)?;
        stack.layout_hash = config.layout_hash();
        Ok(stack)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"SIMW";
const CACHE_VERSION: u32 = 1;

/// Random initial phases, uniform in (−π, π], from the scenario seed.
pub fn initial_phases(config: &ScenarioConfig) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.scene.rng_seed);
    rng.set_stream(PHASE_INIT_STREAM);
    DMatrix::from_fn(config.sim.layers, config.num_elements(), |_, _| {
        wrap_phase(rng.random_range(-PI..PI))
    })
}

/// Computes every W^(ℓ)[i] and w[i] and draws the initial phases.
pub fn build_sim(config: &ScenarioConfig) -> Result<SimStack> {
    config.validate()?;
    build_sim_with_phases(config, initial_phases(config))
}

pub fn build_sim_with_phases(config: &ScenarioConfig, phases: DMatrix<f64>) -> Result<SimStack> {
    let coupling = (0..config.num_subcarriers()).map(|i| coupling_matrix(i, config)).collect();
    let feed = (0..config.num_subcarriers()).map(|i| feed_vector(i, config)).collect();
    let mut stack = SimStack::from_parts(phases, coupling, feed)?;
    stack.layout_hash = config.layout_hash();
    Ok(stack)
}

/// Like [`build_sim`], reusing `cache_dir/w_<layout-hash>.bin` when it matches.
pub fn build_sim_cached(config: &ScenarioConfig, cache_dir: &Path) -> Result<SimStack> {
    config.validate()?;
    let path = cache_dir.join(format!("w_{:016x}.bin", config.layout_hash()));
    if let Ok(file) = std::fs::File::open(&path) {
        if let Ok(stack) = SimStack::read_coupling_cache(std::io::BufReader::new(file), config, initial_phases(config)) {
            return Ok(stack);
        }
    }
    let stack = build_sim(config)?;
    std::fs::create_dir_all(cache_dir)?;
    let file = std::fs::File::create(&path)?;
    stack.write_coupling_cache(std::io::BufWriter::new(file), config)?;
    Ok(stack)
}

fn apply_phases(v: &mut CVec, factors: &[Complex64]) {
    v.iter_mut().zip(factors).for_each(|(x, p)| *x *= p);
}

/// f[i] = Φ^(L) W^(L)[i] ⋯ Φ^(2) W^(2)[i] Φ^(1) w[i].
pub fn end_to_end(stack: &SimStack, i: usize) -> CVec {
    let mut f = stack.feed(i).clone();
    apply_phases(&mut f, &stack.phase_factors(0));
    for layer in 1..stack.layers() {
        f = stack.coupling(layer + 1, i) * f;
        apply_phases(&mut f, &stack.phase_factors(layer));
    }
    f
}

/// Right vectors and left matrices of the layer recursions for one subcarrier.
#[derive(Debug, Clone)]
pub struct RecursionState {
    /// r^(ℓ)[i]: the field entering layer ℓ, before its phase mask.
    pub r: Vec<CVec>,
    /// L^(ℓ)[i]: the linear map from layer ℓ's output to the SIM output.
    pub lmat: Vec<CMat>,
}

/// Right vectors r^(ℓ) only (0-based layer index).
pub fn forward_vectors(stack: &SimStack, i: usize) -> Vec<CVec> {
    let mut r = Vec::with_capacity(stack.layers());
    r.push(stack.feed(i).clone());
    for layer in 1..stack.layers() {
        let mut x = r[layer - 1].clone();
        apply_phases(&mut x, &stack.phase_factors(layer - 1));
        r.push(stack.coupling(layer + 1, i) * x);
    }
    r
}

/// Forward and backward recursions with explicit left matrices.
pub fn forward_backward(stack: &SimStack, i: usize) -> RecursionState {
    let r = forward_vectors(stack, i);
    let l = stack.layers();
    let n = stack.num_elements();
    let mut lmat = vec![CMat::identity(n, n); l];
    for layer in (0..l.saturating_sub(1)).rev() {
        // Φ^(ℓ+1) W^(ℓ+1): scale the rows of W by the next layer's phases.
        let phases = stack.phase_factors(layer + 1);
        let mut pw = stack.coupling(layer + 2, i).clone();
        for (row, p) in phases.iter().enumerate() {
            pw.row_mut(row).iter_mut().for_each(|x| *x *= p);
        }
        lmat[layer] = &lmat[layer + 1] * pw;
    }
    RecursionState { r, lmat }
}

/// u^(ℓ) = L^(ℓ)ᴴ y for every layer, via the vector recursion
/// u^(L) = y, u^(ℓ) = W^(ℓ+1)ᴴ Φ^(ℓ+1)* u^(ℓ+1).
pub fn backproject(stack: &SimStack, i: usize, y: &CVec) -> Vec<CVec> {
    let l = stack.layers();
    let mut u = vec![CVec::zeros(0); l];
    u[l - 1] = y.clone();
    for layer in (0..l - 1).rev() {
        let mut x = u[layer + 1].clone();
        let conj: Vec<Complex64> = stack.phase_factors(layer + 1).iter().map(|p| p.conj()).collect();
        apply_phases(&mut x, &conj);
        u[layer] = stack.coupling(layer + 2, i).ad_mul(&x);
    }
    u
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(l: usize, n_h: usize, n_v: usize) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.sim.layers = l;
        cfg.sim.n_h = n_h;
        cfg.sim.n_v = n_v;
        cfg.scene.num_subcarriers = 3;
        cfg
    }

    /// Direct evaluation of the RS coefficient, written out independently.
    fn rs_direct(dist: f64, f: f64, a_s: f64, d_s: f64) -> Complex64 {
        let c = 3e8;
        let pre = a_s * d_s / (dist * dist);
        let re = 1.0 / (2.0 * PI * dist);
        let im = -f / c;
        let ph = 2.0 * PI * dist * f / c;
        let e = Complex64::new(ph.cos(), ph.sin());
        Complex64::new(pre * re, pre * im) * e
    }

    #[test]
    fn aligned_coupling_matches_direct_formula() {
        let cfg = small_config(3, 3, 3);
        let v = rs_coupling(4, 4, 2, 1, &cfg).unwrap();
        let expect = rs_direct(cfg.sim.d_s, cfg.subcarrier_freq(1), cfg.sim.a_s, cfg.sim.d_s);
        assert!((v - expect).norm() < 1e-15 * expect.norm());
    }

    #[test]
    fn coupling_decreases_with_lateral_offset() {
        let cfg = small_config(2, 1, 6);
        let mags: Vec<f64> = (0..6).map(|m| rs_coupling(0, m, 2, 0, &cfg).unwrap().norm()).collect();
        for w in mags.windows(2) {
            assert!(w[1] < w[0], "{mags:?}");
        }
    }

    #[test]
    fn doubling_layer_spacing_rescales_aligned_distance() {
        let mut cfg = small_config(2, 2, 2);
        cfg.sim.d_s *= 2.0;
        let v = rs_coupling(0, 0, 2, 0, &cfg).unwrap();
        let expect = rs_direct(cfg.sim.d_s, cfg.subcarrier_freq(0), cfg.sim.a_s, cfg.sim.d_s);
        assert!((v - expect).norm() < 1e-12 * expect.norm());
    }

    #[test]
    fn coupling_index_errors() {
        let cfg = small_config(2, 2, 2);
        assert!(rs_coupling(0, 0, 1, 0, &cfg).is_err());
        assert!(rs_coupling(4, 0, 2, 0, &cfg).is_err());
    }

    #[test]
    fn scalar_chain() {
        let cfg = small_config(2, 1, 1);
        let stack = build_sim(&cfg).unwrap();
        let w = stack.coupling(2, 0);
        assert_eq!(w.shape(), (1, 1));
        assert_eq!(w[(0, 0)], rs_coupling(0, 0, 2, 0, &cfg).unwrap());
    }

    #[test]
    fn subcarriers_differ_only_through_frequency() {
        let cfg = small_config(2, 2, 3);
        let stack = build_sim(&cfg).unwrap();
        let last = cfg.num_subcarriers() - 1;
        let mut swapped = cfg.clone();
        swapped.scene.f_c = cfg.subcarrier_freq(last);
        let other = build_sim(&swapped).unwrap();
        assert_eq!(stack.coupling(2, last), other.coupling(2, 0));
        assert_eq!(stack.feed(last), other.feed(0));
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small_config(3, 2, 2);
        assert_eq!(build_sim(&cfg).unwrap(), build_sim(&cfg).unwrap());
        let st = build_sim(&cfg).unwrap();
        assert!(st.phases.iter().all(|&p| p > -PI && p <= PI));
    }

    #[test]
    fn zero_phases_give_plain_products() {
        let cfg = small_config(3, 2, 2);
        let n = cfg.num_elements();
        let stack = build_sim_with_phases(&cfg, DMatrix::zeros(3, n)).unwrap();
        let expect = stack.coupling(3, 1) * (stack.coupling(2, 1) * stack.feed(1));
        assert!((end_to_end(&stack, 1) - &expect).norm() < 1e-15 * expect.norm());
        let r = forward_vectors(&stack, 1);
        assert_eq!(r[0], *stack.feed(1));
        assert!((&r[1] - stack.coupling(2, 1) * stack.feed(1)).norm() < 1e-18);
    }

    #[test]
    fn single_layer_is_phase_mask_on_feed() {
        let cfg = small_config(1, 2, 2);
        let stack = build_sim(&cfg).unwrap();
        let f = end_to_end(&stack, 0);
        let ph = stack.phase_factors(0);
        for n in 0..4 {
            assert!((f[n] - stack.feed(0)[n] * ph[n]).norm() < 1e-18);
        }
    }

    #[test]
    fn two_layer_left_matrix() {
        let cfg = small_config(2, 2, 2);
        let stack = build_sim(&cfg).unwrap();
        let st = forward_backward(&stack, 0);
        let phi2 = CMat::from_diagonal(&CVec::from_vec(stack.phase_factors(1)));
        let expect = phi2 * stack.coupling(2, 0);
        assert!((&st.lmat[0] - expect).norm() < 1e-15);
        assert_eq!(st.lmat[1], CMat::identity(4, 4));
    }

    #[test]
    fn recursion_identity_every_layer() {
        let cfg = small_config(4, 3, 3);
        let stack = build_sim(&cfg).unwrap();
        for i in 0..cfg.num_subcarriers() {
            let f = end_to_end(&stack, i);
            let st = forward_backward(&stack, i);
            for layer in 0..4 {
                let mut x = st.r[layer].clone();
                apply_phases(&mut x, &stack.phase_factors(layer));
                let g = &st.lmat[layer] * x;
                assert!((&g - &f).norm() <= 1e-10 * f.norm());
            }
        }
    }

    #[test]
    fn backproject_matches_left_matrices() {
        let cfg = small_config(3, 2, 3);
        let stack = build_sim(&cfg).unwrap();
        let y = CVec::from_fn(6, |k, _| Complex64::new(k as f64, 1.0 - k as f64));
        let st = forward_backward(&stack, 2);
        let u = backproject(&stack, 2, &y);
        for layer in 0..3 {
            let expect = st.lmat[layer].ad_mul(&y);
            assert!((&u[layer] - &expect).norm() <= 1e-12 * expect.norm().max(1e-300));
        }
    }

    #[test]
    fn wrapping_by_two_pi_keeps_response() {
        let cfg = small_config(3, 2, 2);
        let stack = build_sim(&cfg).unwrap();
        let f = end_to_end(&stack, 0);
        let mut shifted = stack.clone();
        shifted.phases = stack.phases.map(|p| p + 2.0 * PI);
        let g = end_to_end(&shifted, 0);
        assert!((&f - &g).norm() < 1e-13 * f.norm());
        let mut rewrapped = stack.clone();
        rewrapped.set_phases(shifted.phases.clone()).unwrap();
        assert!((end_to_end(&rewrapped, 0) - &f).norm() < 1e-13 * f.norm());
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_phase(PI), PI);
        assert!((wrap_phase(-PI) - PI).abs() < 1e-15);
        assert!((wrap_phase(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!((wrap_phase(0.3) - 0.3).abs() < 1e-15);
        for k in -20..20 {
            let w = wrap_phase(k as f64 * 0.77);
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn end_to_end_linear_in_feed() {
        let cfg = small_config(3, 2, 2);
        let stack = build_sim(&cfg).unwrap();
        let alpha = Complex64::new(0.3, -1.7);
        let mut scaled = stack.clone();
        scaled.feed[0] *= alpha;
        let a = end_to_end(&stack, 0) * alpha;
        let b = end_to_end(&scaled, 0);
        assert!((a - &b).norm() < 1e-13 * b.norm());
    }

    #[test]
    fn coupling_cache_round_trip() {
        let cfg = small_config(3, 2, 2);
        let stack = build_sim(&cfg).unwrap();
        let mut buf = Vec::new();
        stack.write_coupling_cache(&mut buf, &cfg).unwrap();
        let back = SimStack::read_coupling_cache(&buf[..], &cfg, stack.phases.clone()).unwrap();
        assert_eq!(back, stack);
        let mut other = cfg.clone();
        other.sim.d_s *= 1.1;
        assert!(SimStack::read_coupling_cache(&buf[..], &other, stack.phases.clone()).is_err());
        let dir = tempfile::tempdir().unwrap();
        let a = build_sim_cached(&cfg, dir.path()).unwrap();
        let b = build_sim_cached(&cfg, dir.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, stack);
    }
}
