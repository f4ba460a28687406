//! Per-subcarrier SIM output design.
//!
//! The outer loop alternates between the inner QCQP on every subcarrier
//! (maximize fᴴAf subject to fᴴRf ≤ ε and ‖f‖² ≤ δ) and the closed-form
//! update d_j = J_B⁻¹ e_j.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::ChannelSet;
use crate::error::{Error, Result};
use crate::fisher::{BfimParts, FisherContext};
use crate::linalg::{principal_eigenpair, solve_spd, CMat, CVec, HermitianMatrix, Mat5, Vec5};
use crate::metrics::{pb_signal_power, pu_covariance};
use crate::scenario::{OuterStep, ScenarioConfig};

/// RNG stream for the optional subcarrier shuffle.
pub const SHUFFLE_STREAM: u64 = 4;

/// Relative slack below which a residual at float resolution is accepted.
const NUMERICAL_FLOOR: f64 = 1e-6;

/// Interference limits on every subcarrier.
#[derive(Debug, Clone)]
pub struct InterferenceBudget {
    pub r_pu: Vec<HermitianMatrix>,
    pub s2: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub delta: Vec<f64>,
    pub r_rate: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BudgetRepr {
    /// Column-major entries of each R_pu[i].
    r_pu: Vec<Vec<Complex64>>,
    s2: Vec<f64>,
    epsilon: Vec<f64>,
    delta: Vec<f64>,
    r_rate: Vec<f64>,
}

impl Serialize for InterferenceBudget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BudgetRepr {
            r_pu: self.r_pu.iter().map(|m| m.as_matrix().as_slice().to_vec()).collect(),
            s2: self.s2.clone(),
            epsilon: self.epsilon.clone(),
            delta: self.delta.clone(),
            r_rate: self.r_rate.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for InterferenceBudget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = BudgetRepr::deserialize(d)?;
        let n = r.epsilon.len();
        if [r.r_pu.len(), r.s2.len(), r.delta.len(), r.r_rate.len()].iter().any(|&l| l != n) {
            return Err(D::Error::custom("budget vectors differ in length"));
        }
        let r_pu = r
            .r_pu
            .into_iter()
            .map(|v| {
                let dim = (v.len() as f64).sqrt().round() as usize;
                if dim * dim != v.len() {
                    return Err(D::Error::custom("R_pu entry count is not a square"));
                }
                HermitianMatrix::new(CMat::from_vec(dim, dim, v)).map_err(D::Error::custom)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(InterferenceBudget { r_pu, s2: r.s2, epsilon: r.epsilon, delta: r.delta, r_rate: r.r_rate })
    }
}

pub fn budget_from_channels(channels: &ChannelSet, config: &ScenarioConfig) -> Result<InterferenceBudget> {
    let sigma2 = config.noise_power();
    let kappa = config.scene.kappa;
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::config("scene.kappa", format!("must lie in (0, 1], got {kappa}")));
    }
    let mut b = InterferenceBudget { r_pu: Vec::new(), s2: Vec::new(), epsilon: Vec::new(), delta: Vec::new(), r_rate: Vec::new() };
    for i in 0..config.num_subcarriers() {
        let s2 = pb_signal_power(channels, i, config);
        let sinr_bar = s2 / sigma2;
        let (r_rate, eps) = if kappa == 1.0 {
            (sinr_bar, 0.0)
        } else {
            let r = (1.0 + sinr_bar).powf(kappa) - 1.0;
            (r, (s2 - r * sigma2) / r)
        };
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::InfeasibleQos { subcarrier: i, epsilon: eps });
        }
        b.r_pu.push(pu_covariance(channels, i, config));
        b.s2.push(s2);
        b.epsilon.push(eps);
        b.delta.push(config.delta_cap(i));
        b.r_rate.push(r_rate);
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveCase {
    /// λ_max(A) ≤ 0.
    NonPositive,
    /// ε = 0: only the zero vector is guaranteed feasible.
    ZeroBudget,
    /// The principal eigenvector already meets the interference limit.
    Principal,
    /// Both constraints active; μ found by bisection.
    Bisection,
    /// The power limit is slack; only fᴴRf ≤ ε binds.
    InterferenceOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    pub xi_tol: f64,
    pub max_bracket_steps: usize,
    pub max_bisection_steps: usize,
}

impl InnerOptions {
    pub fn from_config(config: &ScenarioConfig) -> Self {
        let o = &config.optimizer;
        InnerOptions { xi_tol: o.xi_tol, max_bracket_steps: o.max_bracket_steps, max_bisection_steps: o.max_bisection_steps }
    }
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions { xi_tol: 1e-12, max_bracket_steps: 60, max_bisection_steps: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub f: CVec,
    pub case: SolveCase,
    /// Multiplier on R in A − μR, in the units of the inputs.
    pub mu: Option<f64>,
    pub bracket_steps: usize,
    pub bisection_steps: usize,
    /// g(μ)/(ε/δ) at each bisection midpoint.
    pub trace: Vec<f64>,
    pub objective: f64,
}

impl InnerSolution {
    fn closed(f: CVec, case: SolveCase, a: &HermitianMatrix) -> Self {
        let objective = a.quad_form(&f);
        InnerSolution { f, case, mu: None, bracket_steps: 0, bisection_steps: 0, trace: Vec::new(), objective }
    }
}

struct Probe {
    v: CVec,
    g: f64,
}

/// Principal eigenvector of A − μR with A and R pre-scaled to unit norm.
struct Pencil<'a> {
    a: HermitianMatrix,
    r_scaled: HermitianMatrix,
    r: &'a HermitianMatrix,
}

impl Pencil<'_> {
    fn probe(&self, mu: f64) -> Result<Probe> {
        let m = self.a.sub_scaled(mu, &self.r_scaled);
        let v = principal_eigenpair(&m)?.vector;
        let g = self.r.quad_form(&v);
        Ok(Probe { v, g })
    }
}

fn validate_inner(a: &HermitianMatrix, r: &HermitianMatrix, epsilon: f64, delta: f64, opts: &InnerOptions) -> Result<()> {
    if a.dim() != r.dim() {
        return Err(Error::InvalidInput(format!("A is {}x{} but R is {}x{}", a.dim(), a.dim(), r.dim(), r.dim())));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidInput(format!("delta must be finite and > 0, got {delta}")));
    }
    if !(opts.xi_tol > 0.0) {
        return Err(Error::InvalidInput("xi_tol must be > 0".into()));
    }
    Ok(())
}

fn scale_to_feasible(mut f: CVec, r: &HermitianMatrix, epsilon: f64) -> CVec {
    let g = r.quad_form(&f);
    if g > epsilon && g > 0.0 {
        f *= Complex64::new((epsilon / g).sqrt(), 0.0);
    }
    f
}

/// Maximizer of fᴴAf over fᴴRf ≤ ε when R is positive definite.
fn interference_only(a: &HermitianMatrix, r: &HermitianMatrix, epsilon: f64) -> Result<CVec> {
    let chol = r.as_matrix().clone().cholesky().ok_or_else(|| Error::Singular {
        condition: f64::INFINITY,
        context: "Cholesky of the interference covariance".into(),
    })?;
    let l = chol.l();
    let n = a.dim();
    let linv = l
        .clone()
        .solve_lower_triangular(&CMat::identity(n, n))
        .ok_or_else(|| Error::Singular { condition: f64::INFINITY, context: "triangular solve".into() })?;
    let m = HermitianMatrix::from_symmetrized(&linv * a.as_matrix() * linv.adjoint());
    let w = principal_eigenpair(&m)?.vector;
    let f = linv.adjoint() * w * Complex64::new(epsilon.sqrt(), 0.0);
    Ok(f)
}

/// Solves max fᴴAf s.t. fᴴRf ≤ ε, ‖f‖² ≤ δ.
pub fn inner_solve(a: &HermitianMatrix, r: &HermitianMatrix, epsilon: f64, delta: f64, opts: &InnerOptions) -> Result<InnerSolution> {
    validate_inner(a, r, epsilon, delta, opts)?;
    let n = a.dim();
    let top = principal_eigenpair(a)?;
    // Zero eigenvalues of a negative semidefinite A can come back as rounding-sized positives.
    if top.value <= 64.0 * f64::EPSILON * a.frobenius_norm() {
        return Ok(InnerSolution::closed(CVec::zeros(n), SolveCase::NonPositive, a));
    }
    let r_norm = r.frobenius_norm();
    let sqrt_delta = Complex64::new(delta.sqrt(), 0.0);
    if r_norm == 0.0 {
        return Ok(InnerSolution::closed(top.vector * sqrt_delta, SolveCase::Principal, a));
    }
    if epsilon == 0.0 {
        log::warn!("zero interference budget: returning the zero vector");
        return Ok(InnerSolution::closed(CVec::zeros(n), SolveCase::ZeroBudget, a));
    }
    let t = epsilon / delta;
    let g0 = r.quad_form(&top.vector);
    if g0 <= t {
        return Ok(InnerSolution::closed(top.vector * sqrt_delta, SolveCase::Principal, a));
    }
    let r_eigs = SymmetricEigen::new(r.as_matrix().clone()).eigenvalues;
    if r_eigs.min() > t {
        let f = scale_to_feasible(interference_only(a, r, epsilon)?, r, epsilon);
        return Ok(InnerSolution::closed(f, SolveCase::InterferenceOnly, a));
    }
    let sol = both_active(a, r, epsilon, delta, opts)?;
    release_power_cap(sol, a, r, epsilon, opts)
}

/// If the power multiplier λ_max(A − μR) came out negative, the power cap is
/// slack: the optimum sits where λ_max(A − μR) = 0, on fᴴRf = ε.
fn release_power_cap(
    sol: InnerSolution,
    a: &HermitianMatrix,
    r: &HermitianMatrix,
    epsilon: f64,
    opts: &InnerOptions,
) -> Result<InnerSolution> {
    let Some(mu_star) = sol.mu else { return Ok(sol) };
    let floor = 64.0 * f64::EPSILON * a.frobenius_norm();
    let top = |mu: f64| principal_eigenpair(&a.sub_scaled(mu, r));
    if top(mu_star)?.value >= -floor {
        return Ok(sol);
    }
    let (mut lo, mut hi) = (0.0, mu_star);
    for _ in 0..opts.max_bisection_steps {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let nu = top(mid)?.value;
        if nu.abs() <= floor {
            lo = mid;
            break;
        }
        if nu > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let v = top(lo)?.vector;
    let g = r.quad_form(&v);
    if !(g > 0.0) {
        return Ok(sol);
    }
    let f = scale_to_feasible(v * Complex64::new((epsilon / g).sqrt(), 0.0), r, epsilon);
    let objective = a.quad_form(&f);
    if objective <= sol.objective {
        return Ok(sol);
    }
    Ok(InnerSolution { f, case: SolveCase::InterferenceOnly, mu: Some(lo), objective, ..sol })
}

/// Both constraints active: bisection on μ until g(μ) = ε/δ.
fn both_active(a: &HermitianMatrix, r: &HermitianMatrix, epsilon: f64, delta: f64, opts: &InnerOptions) -> Result<InnerSolution> {
    let n = a.dim();
    let t = epsilon / delta;
    let sqrt_delta = Complex64::new(delta.sqrt(), 0.0);
    let r_norm = r.frobenius_norm();
    let top = principal_eigenpair(a)?;
    let g0 = r.quad_form(&top.vector);
    let a_norm = a.frobenius_norm();
    let pencil = Pencil { a: a.scale(1.0 / a_norm), r_scaled: r.scale(1.0 / r_norm), r };
    let tol = opts.xi_tol * t.min(1.0);
    let mu_unit = a_norm / r_norm;
    let mut sol = InnerSolution {
        f: CVec::zeros(n),
        case: SolveCase::Bisection,
        mu: None,
        bracket_steps: 0,
        bisection_steps: 0,
        trace: Vec::new(),
        objective: 0.0,
    };
    let finish = |mut sol: InnerSolution, v: CVec, mu: f64| -> InnerSolution {
        sol.f = scale_to_feasible(v * sqrt_delta, r, epsilon);
        sol.mu = Some(mu * mu_unit);
        sol.objective = a.quad_form(&sol.f);
        sol
    };

    // Bracket: g(lo) > t ≥ g(hi).
    let mut lo = (0.0, Probe { v: top.vector.clone(), g: g0 });
    let mut hi_mu = 1.0;
    let mut hi = pencil.probe(hi_mu)?;
    if (hi.g - t).abs() < tol {
        return Ok(finish(sol, hi.v, hi_mu));
    }
    if hi.g > t {
        while hi.g > t {
            sol.bracket_steps += 1;
            if sol.bracket_steps > opts.max_bracket_steps {
                return Err(Error::BracketFailure { doublings: opts.max_bracket_steps });
            }
            lo = (hi_mu, hi);
            hi_mu *= 2.0;
            hi = pencil.probe(hi_mu)?;
        }
    } else {
        // Tighten from above so the bisection starts from a short bracket.
        loop {
            sol.bracket_steps += 1;
            if sol.bracket_steps > opts.max_bracket_steps {
                break;
            }
            let mid = pencil.probe(hi_mu / 2.0)?;
            if mid.g > t {
                lo = (hi_mu / 2.0, mid);
                break;
            }
            hi_mu /= 2.0;
            hi = mid;
        }
    }
    let mut hi = (hi_mu, hi);
    debug_assert!(lo.1.g > t && hi.1.g <= t);

    while sol.bisection_steps < opts.max_bisection_steps {
        let mu = 0.5 * (lo.0 + hi.0);
        if mu <= lo.0 || mu >= hi.0 {
            return resolve_collapse(sol, &pencil, lo, hi, t, finish);
        }
        let p = pencil.probe(mu)?;
        sol.bisection_steps += 1;
        sol.trace.push(p.g / t);
        if (p.g - t).abs() < tol {
            return Ok(finish(sol, p.v, mu));
        }
        if p.g > t {
            lo = (mu, p);
        } else {
            hi = (mu, p);
        }
    }
    let residual = (hi.1.g - t).abs().min((lo.1.g - t).abs());
    if residual <= NUMERICAL_FLOOR * t {
        log::warn!("bisection step cap reached at relative residual {:.3e}", residual / t);
        return Ok(finish(sol, hi.1.v, hi.0));
    }
    Err(Error::ToleranceFailure { iterations: opts.max_bisection_steps, residual })
}

/// The bracket has shrunk to float resolution without meeting the tolerance.
/// Either g is continuous and we sit at its numerical floor, or g jumps at a
/// principal-eigenvalue crossing, where any unit vector of the two-dimensional
/// eigenspace is stationary and we pick the one meeting the constraint.
fn resolve_collapse(
    sol: InnerSolution,
    pencil: &Pencil,
    lo: (f64, Probe),
    hi: (f64, Probe),
    t: f64,
    finish: impl Fn(InnerSolution, CVec, f64) -> InnerSolution,
) -> Result<InnerSolution> {
    if (lo.1.g - t).abs() <= NUMERICAL_FLOOR * t || (hi.1.g - t).abs() <= NUMERICAL_FLOOR * t {
        return Ok(finish(sol, hi.1.v, hi.0));
    }
    let r = pencil.r;
    let vl = &lo.1.v;
    let overlap = vl.dotc(&hi.1.v);
    let mut w = &hi.1.v - vl * overlap;
    let wn = w.norm();
    let endpoint = finish(sol.clone(), hi.1.v.clone(), hi.0);
    if wn < 1e-12 {
        return Ok(endpoint);
    }
    w /= Complex64::new(wn, 0.0);
    let mix = |s: f64| -> CVec {
        let th = s * std::f64::consts::FRAC_PI_2;
        vl * Complex64::new(th.cos(), 0.0) + &w * Complex64::new(th.sin(), 0.0)
    };
    let (mut s_lo, mut s_hi) = (0.0f64, 1.0f64);
    if r.quad_form(&mix(1.0)) > t {
        return Ok(endpoint);
    }
    for _ in 0..200 {
        let s = 0.5 * (s_lo + s_hi);
        if r.quad_form(&mix(s)) > t {
            s_lo = s;
        } else {
            s_hi = s;
        }
    }
    let candidate = finish(sol, mix(s_hi), 0.5 * (lo.0 + hi.0));
    if candidate.objective >= endpoint.objective {
        Ok(candidate)
    } else {
        Ok(endpoint)
    }
}

/// d_j = J_B⁻¹ e_j for j = 1, 2, 3.
pub fn outer_solve(j_b: &Mat5) -> Result<[Vec5; 3]> {
    Ok([
        solve_spd(j_b, &Vec5::ith(0, 1.0))?,
        solve_spd(j_b, &Vec5::ith(1, 1.0))?,
        solve_spd(j_b, &Vec5::ith(2, 1.0))?,
    ])
}

/// Σ_j (2 d_j[j] − d_jᵀ J_B d_j).
pub fn surrogate_objective(d: &[Vec5; 3], j_b: &Mat5) -> f64 {
    d.iter().enumerate().map(|(j, dj)| 2.0 * dj[j] - (dj.transpose() * j_b * dj)[(0, 0)]).sum()
}

/// Per-subcarrier summary of an inner solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerStats {
    pub subcarrier: usize,
    pub case: SolveCase,
    pub mu: Option<f64>,
    pub bracket_steps: usize,
    pub bisection_steps: usize,
    pub trace: Vec<f64>,
    pub interference: f64,
    pub epsilon: f64,
}

/// Output of the alternating optimization.
#[derive(Debug, Clone)]
pub struct TargetResponses {
    pub f_hat: Vec<CVec>,
    pub d: [Vec5; 3],
    pub objective_trace: Vec<f64>,
    pub bcrb_trace: Vec<f64>,
    /// ‖Dᵏ − Dᵏ⁻¹‖_F for each iteration after the first.
    pub d_change_trace: Vec<f64>,
    /// Fraction of the move towards J_B⁻¹e_j taken at each iteration.
    pub step_trace: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub inner: Vec<InnerStats>,
    pub bfim: BfimParts,
}

#[derive(Serialize, Deserialize)]
struct TargetRepr {
    version: u32,
    f_hat: Vec<Vec<Complex64>>,
    d: [[f64; 5]; 3],
    objective_trace: Vec<f64>,
    bcrb_trace: Vec<f64>,
    d_change_trace: Vec<f64>,
    step_trace: Vec<f64>,
    converged: bool,
    warnings: Vec<String>,
    inner: Vec<InnerStats>,
    bfim: BfimParts,
}

impl Serialize for TargetResponses {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TargetRepr {
            version: 1,
            f_hat: self.f_hat.iter().map(|f| f.iter().copied().collect()).collect(),
            d: std::array::from_fn(|j| std::array::from_fn(|k| self.d[j][k])),
            objective_trace: self.objective_trace.clone(),
            bcrb_trace: self.bcrb_trace.clone(),
            d_change_trace: self.d_change_trace.clone(),
            step_trace: self.step_trace.clone(),
            converged: self.converged,
            warnings: self.warnings.clone(),
            inner: self.inner.clone(),
            bfim: self.bfim.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TargetResponses {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = TargetRepr::deserialize(d)?;
        if r.version != 1 {
            return Err(serde::de::Error::custom(format!("unsupported target format version {}", r.version)));
        }
        Ok(TargetResponses {
            f_hat: r.f_hat.into_iter().map(CVec::from_vec).collect(),
            d: r.d.map(Vec5::from),
            objective_trace: r.objective_trace,
            bcrb_trace: r.bcrb_trace,
            d_change_trace: r.d_change_trace,
            step_trace: r.step_trace,
            converged: r.converged,
            warnings: r.warnings,
            inner: r.inner,
            bfim: r.bfim,
        })
    }
}

/// Processing order of the subcarriers: ascending, or a seeded shuffle.
pub fn subcarrier_order(config: &ScenarioConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..config.num_subcarriers()).collect();
    if config.optimizer.shuffle_subcarriers {
        let mut rng = ChaCha8Rng::seed_from_u64(config.scene.rng_seed);
        rng.set_stream(SHUFFLE_STREAM);
        order.shuffle(&mut rng);
    }
    order
}

/// Inner solves for every subcarrier against fixed d.
pub fn solve_all_subcarriers(ctx: &FisherContext, budget: &InterferenceBudget, d: &[Vec5; 3]) -> Result<Vec<InnerSolution>> {
    let config = ctx.config();
    let opts = InnerOptions::from_config(config);
    let order = subcarrier_order(config);
    let solved: Vec<(usize, InnerSolution)> = order
        .par_iter()
        .map(|&i| {
            let a = ctx.assemble_a(d, i);
            inner_solve(&a, &budget.r_pu[i], budget.epsilon[i], budget.delta[i], &opts).map(|s| (i, s))
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Option<InnerSolution>> = vec![None; config.num_subcarriers()];
    for (i, s) in solved {
        out[i] = Some(s);
    }
    Ok(out.into_iter().map(|s| s.expect("every subcarrier solved")).collect())
}

fn frob_change(a: &[Vec5; 3], b: &[Vec5; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>().sqrt()
}

/// Inner solutions for a given d and the resulting objective value.
struct Evaluated {
    d: [Vec5; 3],
    sols: Vec<InnerSolution>,
    parts: BfimParts,
    g: f64,
}

fn evaluate(ctx: &FisherContext, budget: &InterferenceBudget, d: [Vec5; 3]) -> Result<Evaluated> {
    let sols = solve_all_subcarriers(ctx, budget, &d)?;
    let f_set: Vec<CVec> = sols.iter().map(|s| s.f.clone()).collect();
    let parts = ctx.bfim(&f_set)?;
    let g = surrogate_objective(&d, &parts.j_b);
    Ok(Evaluated { d, sols, parts, g })
}

fn record(out: &mut TargetResponses, e: &Evaluated, budget: &InterferenceBudget, moved: Option<(f64, f64)>) {
    out.objective_trace.push(e.g);
    out.bcrb_trace.push(e.parts.bcrb);
    if let Some((d_change, step)) = moved {
        out.d_change_trace.push(d_change);
        out.step_trace.push(step);
    }
    out.inner = e
        .sols
        .iter()
        .enumerate()
        .map(|(i, s)| InnerStats {
            subcarrier: i,
            case: s.case,
            mu: s.mu,
            bracket_steps: s.bracket_steps,
            bisection_steps: s.bisection_steps,
            trace: s.trace.clone(),
            interference: budget.r_pu[i].quad_form(&s.f),
            epsilon: budget.epsilon[i],
        })
        .collect();
    out.f_hat = e.sols.iter().map(|s| s.f.clone()).collect();
    out.d = e.d;
    out.bfim = e.parts.clone();
}

/// Alternating optimization of the SIM outputs and the auxiliary vectors.
///
/// Iteration k solves every subcarrier for the current d and records the
/// objective; the next d moves towards J_B⁻¹e_j. With
/// [`OuterStep::Safeguarded`] the move is halved until the objective does
/// not decrease, and the loop stops when no such step exists.
pub fn alternate(ctx: &FisherContext, budget: &InterferenceBudget) -> Result<TargetResponses> {
    let config = ctx.config();
    let opts = &config.optimizer;
    let d0: [Vec5; 3] = std::array::from_fn(|j| Vec5::ith(j, 1.0));
    let mut out = TargetResponses {
        f_hat: Vec::new(),
        d: d0,
        objective_trace: Vec::new(),
        bcrb_trace: Vec::new(),
        d_change_trace: Vec::new(),
        step_trace: Vec::new(),
        converged: false,
        warnings: Vec::new(),
        inner: Vec::new(),
        bfim: BfimParts { j_d: Mat5::zeros(), j_p: Mat5::zeros(), j_b: Mat5::zeros(), bcrb: f64::INFINITY },
    };
    if opts.max_outer_iters == 0 {
        return Err(Error::config("optimizer.max_outer_iters", "must be at least 1"));
    }
    let mut cur = evaluate(ctx, budget, d0)?;
    record(&mut out, &cur, budget, None);
    for k in 1..opts.max_outer_iters {
        let target = outer_solve(&cur.parts.j_b)?;
        let toward = |alpha: f64| -> [Vec5; 3] { std::array::from_fn(|j| cur.d[j] + (target[j] - cur.d[j]) * alpha) };
        let (next, alpha) = match opts.outer_step {
            OuterStep::Full => (evaluate(ctx, budget, target)?, 1.0),
            OuterStep::Safeguarded => {
                // Restart from twice the last accepted step.
                let mut alpha = (2.0 * out.step_trace.last().copied().unwrap_or(0.5)).min(1.0);
                let mut found = None;
                for _ in 0..=opts.max_step_halvings {
                    let trial = evaluate(ctx, budget, toward(alpha))?;
                    if trial.g >= cur.g {
                        found = Some(trial);
                        break;
                    }
                    alpha *= 0.5;
                }
                match found {
                    Some(t) => (t, alpha),
                    None => {
                        log::info!("no ascent step after {} halvings; stopping at iteration {}", opts.max_step_halvings, k);
                        out.converged = true;
                        break;
                    }
                }
            }
        };
        if next.g < cur.g - 1e-9 * cur.g.abs() {
            out.warnings.push(format!("objective decreased at iteration {}: {:.12e} -> {:.12e}", k + 1, cur.g, next.g));
        }
        let rel = (next.g - cur.g).abs() / cur.g.abs();
        let d_change = frob_change(&next.d, &cur.d);
        cur = next;
        record(&mut out, &cur, budget, Some((d_change, alpha)));
        if !(rel > opts.eps_tol && d_change > opts.tau_tol) {
            out.converged = true;
            break;
        }
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    align_phases(&mut out.f_hat);
    for (i, f) in out.f_hat.iter_mut().enumerate() {
        *f = scale_to_feasible(f.clone(), &budget.r_pu[i], budget.epsilon[i]);
    }
    Ok(out)
}

/// Rotates each vector so its projection on the dominant common direction
/// Σ f fᴴ is real and nonnegative.
///
/// Objective and constraints ignore a per-subcarrier phase, so this only
/// fixes a convention; it keeps the targets coherent across frequency.
pub fn align_phases(f_set: &mut [CVec]) {
    let Some(n) = f_set.first().map(|f| f.len()) else { return };
    let mut m = CMat::zeros(n, n);
    for f in f_set.iter() {
        m += f * f.adjoint();
    }
    let Ok(v) = principal_eigenpair(&HermitianMatrix::from_symmetrized(m)) else { return };
    for f in f_set.iter_mut() {
        let c = v.vector.dotc(f);
        if c.norm() > 0.0 {
            *f *= c.conj() / c.norm();
        }
    }
}

/// BCRB after replacing f[i] one subcarrier at a time, following `order`.
/// Element 0 is the BCRB of `start`.
pub fn sequential_sweep(
    ctx: &FisherContext,
    budget: &InterferenceBudget,
    d: &[Vec5; 3],
    start: &[CVec],
    order: &[usize],
) -> Result<Vec<f64>> {
    let opts = InnerOptions::from_config(ctx.config());
    let mut f = start.to_vec();
    let mut trace = vec![ctx.bfim(&f)?.bcrb];
    for &i in order {
        let a = ctx.assemble_a(d, i);
        f[i] = inner_solve(&a, &budget.r_pu[i], budget.epsilon[i], budget.delta[i], &opts)?.f;
        trace.push(ctx.bfim(&f)?.bcrb);
    }
    Ok(trace)
}
