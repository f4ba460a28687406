//! Phase training by beampattern matching.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{arv, Direction2D};
use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec};
use crate::scenario::{ElevationSampling, GradNormalization, ScenarioConfig, TrainerParams};
use crate::sim::{backproject, end_to_end, forward_vectors, wrap_phase, SimStack};

/// RNG stream for batch directions.
pub const BATCH_STREAM: u64 = 5;

/// Evaluation grid step in degrees; az covers [−180, 180], el [0, 180].
pub const EVAL_GRID_STEP_DEG: f64 = 2.0;
pub const EVAL_GRID_AZ: usize = 181;
pub const EVAL_GRID_EL: usize = 91;

/// Steering matrix A[i] = [a_i(θ_1), …, a_i(θ_Ng)].
pub fn steering_matrix(dirs: &[Direction2D], i: usize, config: &ScenarioConfig) -> CMat {
    let n = config.num_elements();
    let mut a = CMat::zeros(n, dirs.len());
    for (k, d) in dirs.iter().enumerate() {
        a.set_column(k, &arv(*d, i, config));
    }
    a
}

/// b = Aᵀ f.
pub fn beampattern(a_grid: &CMat, f: &CVec) -> CVec {
    a_grid.tr_mul(f)
}

/// Directions with their per-subcarrier steering matrices and targets.
#[derive(Debug, Clone)]
pub struct AngularBatch {
    pub directions: Vec<Direction2D>,
    pub a: Vec<CMat>,
    pub q: Vec<CVec>,
}

impl AngularBatch {
    pub fn new(directions: Vec<Direction2D>, targets: &[CVec], config: &ScenarioConfig) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::InvalidInput("empty direction batch".into()));
        }
        if targets.len() != config.num_subcarriers() {
            return Err(Error::InvalidInput("one target per subcarrier required".into()));
        }
        let a: Vec<CMat> = (0..config.num_subcarriers()).map(|i| steering_matrix(&directions, i, config)).collect();
        let q = a.iter().zip(targets).map(|(a, f)| beampattern(a, f)).collect();
        Ok(AngularBatch { directions, a, q })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

pub fn sample_directions(n: usize, sampling: ElevationSampling, rng: &mut ChaCha8Rng) -> Vec<Direction2D> {
    (0..n)
        .map(|_| {
            let az = rng.random_range(-PI..PI);
            let el = match sampling {
                ElevationSampling::Uniform => rng.random_range(0.0..=PI),
                ElevationSampling::Cosine => (1.0 - 2.0 * rng.random_range(0.0..=1.0f64)).clamp(-1.0, 1.0).acos(),
            };
            Direction2D { el, az }
        })
        .collect()
}

/// (1/I) Σ_i ‖b[i] − q[i]‖².
pub fn batch_loss(stack: &SimStack, batch: &AngularBatch) -> f64 {
    let i_count = batch.a.len();
    let total: f64 = (0..i_count)
        .map(|i| (beampattern(&batch.a[i], &end_to_end(stack, i)) - &batch.q[i]).norm_squared())
        .sum();
    total / i_count as f64
}

/// ∂‖b[i] − q[i]‖²/∂φ for every layer and element, as an L×N matrix.
pub fn layer_gradients(stack: &SimStack, batch: &AngularBatch, i: usize) -> DMatrix<f64> {
    let r = forward_vectors(stack, i);
    let mut last = r[stack.layers() - 1].clone();
    last.iter_mut().zip(stack.phase_factors(stack.layers() - 1)).for_each(|(x, p)| *x *= p);
    let resid = beampattern(&batch.a[i], &last) - &batch.q[i];
    let y = batch.a[i].map(|z| z.conj()) * resid;
    let u = backproject(stack, i, &y);
    let mut g = DMatrix::zeros(stack.layers(), stack.num_elements());
    for l in 0..stack.layers() {
        let phases = stack.phase_factors(l);
        for n in 0..stack.num_elements() {
            g[(l, n)] = 2.0 * (phases[n].conj() * r[l][n].conj() * u[l][n]).im;
        }
    }
    g
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub hyper: TrainerParams,
}

impl TrainState {
    pub fn new(layers: usize, n: usize, hyper: TrainerParams) -> Self {
        TrainState { step: 0, m: DMatrix::zeros(layers, n), v: DMatrix::zeros(layers, n), hyper }
    }
}

/// One bias-corrected Adam update of the phases, followed by wrapping.
pub fn adam_step(state: &mut TrainState, phases: &mut DMatrix<f64>, grad: &DMatrix<f64>) {
    let h = &state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for k in 0..grad.len() {
        let g = grad[k];
        state.m[k] = h.beta1 * state.m[k] + (1.0 - h.beta1) * g;
        state.v[k] = h.beta2 * state.v[k] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        phases[k] = wrap_phase(phases[k] - h.eta * m_hat / (v_hat.sqrt() + h.eps_adam));
    }
}

/// Directions of the fixed evaluation grid, az-major.
pub fn eval_grid() -> Vec<Direction2D> {
    let mut out = Vec::with_capacity(EVAL_GRID_AZ * EVAL_GRID_EL);
    for a in 0..EVAL_GRID_AZ {
        let az = (-180.0 + EVAL_GRID_STEP_DEG * a as f64).to_radians();
        for e in 0..EVAL_GRID_EL {
            let el = (EVAL_GRID_STEP_DEG * e as f64).to_radians();
            out.push(Direction2D { el, az });
        }
    }
    out
}

/// mean_i ‖b[i] − q[i]‖² / ‖q[i]‖² on the evaluation grid.
pub fn normalized_bp_error(stack: &SimStack, targets: &[CVec], config: &ScenarioConfig) -> f64 {
    let grid = eval_grid();
    let errs: Vec<f64> = (0..config.num_subcarriers())
        .into_par_iter()
        .map(|i| {
            let a = steering_matrix(&grid, i, config);
            let q = beampattern(&a, &targets[i]);
            let b = beampattern(&a, &end_to_end(stack, i));
            let qn = q.norm_squared();
            if qn > 0.0 {
                (b - &q).norm_squared() / qn
            } else {
                b.norm_squared()
            }
        })
        .collect();
    errs.iter().sum::<f64>() / errs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_grad_norm: f64,
    pub normalized_bp_error: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub initial_bp_error: f64,
    pub epochs: Vec<EpochRecord>,
}

/// Mini-batch Adam over random angular batches.
pub fn train(stack: &mut SimStack, targets: &[CVec], config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<TrainingHistory> {
    let hp = config.trainer.clone();
    if targets.len() != config.num_subcarriers() || targets.iter().any(|f| f.len() != stack.num_elements()) {
        return Err(Error::InvalidInput("targets do not match the SIM dimensions".into()));
    }
    let i_count = config.num_subcarriers();
    let norm = match hp.grad_normalization {
        GradNormalization::Algorithm => 1.0 / (i_count * hp.n_g) as f64,
        GradNormalization::Loss => 1.0 / i_count as f64,
    };
    let mut history = TrainingHistory { initial_bp_error: normalized_bp_error(stack, targets, config), epochs: Vec::new() };
    let mut state = TrainState::new(stack.layers(), stack.num_elements(), hp.clone());
    for epoch in 1..=hp.n_e {
        let mut grad_norm_sum = 0.0;
        let mut loss_sum = 0.0;
        for batch_idx in 0..hp.n_b {
            let batch = AngularBatch::new(sample_directions(hp.n_g, hp.el_sampling, rng), targets, config)?;
            let loss = batch_loss(stack, &batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch_idx}, step {}; phase norm {:.6e}, m norm {:.6e}, v norm {:.6e}",
                    state.step,
                    stack.phases.norm(),
                    state.m.norm(),
                    state.v.norm()
                )));
            }
            let grads: Vec<DMatrix<f64>> = (0..i_count).into_par_iter().map(|i| layer_gradients(stack, &batch, i)).collect();
            let mut g = grads.into_iter().fold(DMatrix::zeros(stack.layers(), stack.num_elements()), |a, b| a + b);
            g *= norm;
            grad_norm_sum += g.norm();
            loss_sum += loss;
            let mut phases = stack.phases.clone();
            adam_step(&mut state, &mut phases, &g);
            stack.set_phases(phases)?;
        }
        let rec = EpochRecord {
            epoch,
            mean_grad_norm: grad_norm_sum / hp.n_b.max(1) as f64,
            normalized_bp_error: normalized_bp_error(stack, targets, config),
            loss: loss_sum / hp.n_b.max(1) as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.6e}, grad norm {:.6e}, bp error {:.6e}",
            rec.loss,
            rec.mean_grad_norm,
            rec.normalized_bp_error
        );
        history.epochs.push(rec);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use crate::sim::build_sim;
    use rand::SeedableRng;

    fn cfg(l: usize, n: usize, i: usize) -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        c.sim.layers = l;
        c.sim.n_h = n;
        c.sim.n_v = n;
        c.scene.num_subcarriers = i;
        c
    }

    fn random_targets(c: &ScenarioConfig, seed: u64) -> Vec<CVec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..c.num_subcarriers())
            .map(|_| CVec::from_fn(c.num_elements(), |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))))
            .collect()
    }

    #[test]
    fn beampattern_examples() {
        let a = CMat::from_element(4, 1, Complex64::new(1.0, 0.0));
        let f = CVec::from_vec(vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.0), Complex64::new(0.0, 1.0), Complex64::new(3.0, 0.0)]);
        assert_eq!(beampattern(&a, &f)[0], Complex64::new(3.5, 3.0));
        assert_eq!(beampattern(&a, &CVec::zeros(4))[0], Complex64::new(0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = CMat::from_fn(5, 7, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let f = CVec::from_fn(5, |k, _| Complex64::new(k as f64, 1.0));
        let b = beampattern(&a, &f);
        for g in 0..7 {
            let mut s = Complex64::new(0.0, 0.0);
            for n in 0..5 {
                s += a[(n, g)] * f[n];
            }
            assert!((b[g] - s).norm() < 1e-12);
        }
    }

    #[test]
    fn self_target_has_zero_loss_and_gradient() {
        let c = cfg(3, 3, 2);
        let stack = build_sim(&c).unwrap();
        let targets: Vec<CVec> = (0..2).map(|i| end_to_end(&stack, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = AngularBatch::new(sample_directions(16, ElevationSampling::Uniform, &mut rng), &targets, &c).unwrap();
        assert!(batch_loss(&stack, &batch) < 1e-28);
        for i in 0..2 {
            assert!(layer_gradients(&stack, &batch, i).norm() < 1e-14);
        }
    }

    #[test]
    fn loss_matches_direct_sum_and_is_phase_invariant() {
        let c = cfg(2, 3, 3);
        let stack = build_sim(&c).unwrap();
        let targets = random_targets(&c, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dirs = sample_directions(10, ElevationSampling::Uniform, &mut rng);
        let batch = AngularBatch::new(dirs.clone(), &targets, &c).unwrap();
        let mut direct = 0.0;
        for i in 0..3 {
            let f = end_to_end(&stack, i);
            for d in &dirs {
                let a = arv(*d, i, &c);
                let b: Complex64 = a.iter().zip(f.iter()).map(|(x, y)| x * y).sum();
                let q: Complex64 = a.iter().zip(targets[i].iter()).map(|(x, y)| x * y).sum();
                direct += (b - q).norm_sqr();
            }
        }
        direct /= 3.0;
        let loss = batch_loss(&stack, &batch);
        assert!((loss - direct).abs() <= 1e-12 * direct);
        // Rotating both b and q by a common phase: rotate the targets and the feed.
        let rot = Complex64::from_polar(1.0, 0.9);
        let t_rot: Vec<CVec> = targets.iter().map(|f| f * rot).collect();
        let mut stack_rot = stack.clone();
        let mut ph = stack.phases.clone();
        ph.row_mut(0).iter_mut().for_each(|p| *p += 0.9);
        stack_rot.set_phases(ph).unwrap();
        let batch_rot = AngularBatch::new(dirs, &t_rot, &c).unwrap();
        assert!((batch_loss(&stack_rot, &batch_rot) - loss).abs() <= 1e-12 * loss);
    }

    #[test]
    fn single_layer_gradient_hand_expansion() {
        let c = cfg(1, 2, 1);
        let stack = build_sim(&c).unwrap();
        let targets = random_targets(&c, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = AngularBatch::new(sample_directions(6, ElevationSampling::Uniform, &mut rng), &targets, &c).unwrap();
        let g = layer_gradients(&stack, &batch, 0);
        let w = stack.feed(0);
        let resid = beampattern(&batch.a[0], &end_to_end(&stack, 0)) - &batch.q[0];
        let u = batch.a[0].map(|z| z.conj()) * resid;
        for n in 0..4 {
            let phi = stack.phases[(0, n)];
            let expect = 2.0 * (Complex64::from_polar(1.0, -phi) * w[n].conj() * u[n]).im;
            assert!((g[(0, n)] - expect).abs() <= 1e-12 * expect.abs().max(1e-30));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = cfg(3, 3, 2);
        let stack = build_sim(&c).unwrap();
        let targets = random_targets(&c, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = AngularBatch::new(sample_directions(20, ElevationSampling::Uniform, &mut rng), &targets, &c).unwrap();
        let single = |s: &SimStack, i: usize| (beampattern(&batch.a[i], &end_to_end(s, i)) - &batch.q[i]).norm_squared();
        let h = 1e-6;
        for i in 0..2 {
            let g = layer_gradients(&stack, &batch, i);
            for l in 0..3 {
                for n in 0..9 {
                    let mut p = stack.clone();
                    p.phases[(l, n)] += h;
                    let mut m = stack.clone();
                    m.phases[(l, n)] -= h;
                    let fd = (single(&p, i) - single(&m, i)) / (2.0 * h);
                    assert!((g[(l, n)] - fd).abs() <= 1e-6 * g.norm(), "l={l} n={n}: {} vs {fd}", g[(l, n)]);
                }
            }
        }
    }

    fn hyper() -> TrainerParams {
        TrainerParams { eta: 0.01, ..TrainerParams::default() }
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut st = TrainState::new(1, 3, hyper());
        let mut ph = DMatrix::from_row_slice(1, 3, &[0.1, -0.2, 3.0]);
        let before = ph.clone();
        adam_step(&mut st, &mut ph, &DMatrix::zeros(1, 3));
        assert_eq!(ph, before);
        assert_eq!(st.step, 1);

        let mut st = TrainState::new(1, 3, hyper());
        let mut ph = DMatrix::from_row_slice(1, 3, &[0.1, -0.2, 0.3]);
        adam_step(&mut st, &mut ph, &DMatrix::from_row_slice(1, 3, &[2.0, -0.5, 1e-3]));
        let expect = [0.1 - 0.01, -0.2 + 0.01, 0.3 - 0.01];
        for k in 0..3 {
            assert!((ph[k] - expect[k]).abs() < 1e-7, "{}", ph[k]);
        }
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let (b1, b2, eta, eps) = (0.9f64, 0.999f64, 0.01, 1e-8);
        let grads = [0.5, -1.5, 0.25];
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.2);
        let mut st = TrainState::new(1, 1, hyper());
        let mut ph = DMatrix::from_element(1, 1, 0.2);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= eta * mh / (vh.sqrt() + eps);
            adam_step(&mut st, &mut ph, &DMatrix::from_element(1, 1, *g));
            assert!((ph[0] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_wraps_phases() {
        let mut st = TrainState::new(1, 1, TrainerParams { eta: 0.5, ..hyper() });
        let mut ph = DMatrix::from_element(1, 1, -PI + 0.1);
        adam_step(&mut st, &mut ph, &DMatrix::from_element(1, 1, 1.0));
        assert!(ph[0] > 0.0 && ph[0] <= PI);
    }

    #[test]
    fn zero_epochs_leave_stack_unchanged() {
        let mut c = cfg(2, 2, 2);
        c.trainer.n_e = 0;
        let mut stack = build_sim(&c).unwrap();
        let before = stack.clone();
        let h = train(&mut stack, &random_targets(&c, 2), &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(h.epochs.is_empty());
        assert_eq!(stack, before);
    }

    #[test]
    fn eval_grid_shape() {
        let g = eval_grid();
        assert_eq!(g.len(), 181 * 91);
        assert!((g[0].az + PI).abs() < 1e-15 && g[0].el == 0.0);
        assert!((g.last().unwrap().az - PI).abs() < 1e-12 && (g.last().unwrap().el - PI).abs() < 1e-12);
    }

    #[test]
    fn cosine_sampling_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for d in sample_directions(500, ElevationSampling::Cosine, &mut rng) {
            assert!((0.0..=PI).contains(&d.el) && (-PI..PI).contains(&d.az));
        }
    }
}
