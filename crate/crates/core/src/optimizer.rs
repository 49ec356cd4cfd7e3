//! Penalized log-survival objective, its gradient, inflection-point
//! calibration and Barzilai-Borwein gradient ascent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TimeGrid};
use crate::error::{DtrError, Result};
use crate::estimator::{stage_offsets, PreparedSample, SmoothPass, SurrogateParams, FACTOR_FLOOR};
use crate::geometry::{n_params, PolicySet, SimplexCode};
use crate::propensity::{Propensity, PropensityLookup, PropensitySource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    #[serde(rename = "t_g")]
    pub target_time: f64,
    /// Weight of the `||theta||_2` penalty.
    pub lambda: f64,
    /// Surrogate steepness.
    pub b: f64,
    pub cbar: f64,
    pub max_iter: usize,
    pub epsilon: f64,
    pub eta0: f64,
    pub step_bounds: [f64; 2],
    pub seed: u64,
    /// Independent random starts; the best objective wins.
    pub starts: usize,
    /// Half-width of the uniform initialization box.
    pub init_scale: f64,
    pub propensity: PropensitySource,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            target_time: 1.4,
            lambda: 0.5,
            b: 5.0,
            cbar: 0.5,
            max_iter: 300,
            epsilon: 1e-4,
            eta0: 1e-2,
            step_bounds: [1e-6, 1e2],
            seed: 0,
            starts: 5,
            init_scale: 0.1,
            propensity: PropensitySource::Uniform,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(DtrError::InvalidInput(format!("fit config: {what}")));
        if !(self.target_time > 0.0) {
            return bad("t_g must be positive");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.b > 0.0) {
            return bad("b must be positive");
        }
        if !(self.cbar > 0.0 && self.cbar <= 0.5) {
            return bad("cbar must lie in (0, 1/2]");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        let [lo, hi] = self.step_bounds;
        if !(lo > 0.0 && lo <= hi) {
            return bad("step bounds must satisfy 0 < min <= max");
        }
        if !(self.eta0 > 0.0) {
            return bad("eta0 must be positive");
        }
        if self.starts == 0 {
            return bad("starts must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub policy: PolicySet,
    /// Objective at every iterate of the winning start.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub u0: f64,
    pub c_q: f64,
    /// Best objective value reached.
    pub objective: f64,
}

/// JSON summary of a fit, without the coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub u0: f64,
    pub c_q: f64,
    pub objective: f64,
}

impl From<&FitResult> for FitSummary {
    fn from(r: &FitResult) -> Self {
        Self {
            objective_trace: r.objective_trace.clone(),
            converged: r.converged,
            iterations: r.iterations,
            u0: r.u0,
            c_q: r.c_q,
            objective: r.objective,
        }
    }
}

/// Empirical `C_Q = sum_s log{1 - N_s / (cbar D_s)}` with plain inverse
/// propensity weights.
pub fn compute_cq(
    data: &Dataset,
    grid: &TimeGrid,
    prop: &dyn Propensity,
    cbar: f64,
) -> Result<f64> {
    let prep = PreparedSample::new(data, grid, prop)?;
    compute_cq_prepared(&prep, grid, cbar)
}

pub(crate) fn compute_cq_prepared(
    prep: &PreparedSample,
    grid: &TimeGrid,
    cbar: f64,
) -> Result<f64> {
    if !(cbar > 0.0 && cbar <= 0.5) {
        return Err(DtrError::InvalidInput(format!(
            "cbar = {cbar} outside (0, 1/2]"
        )));
    }
    let weights: Vec<Vec<f64>> = prep.subjects.iter().map(|s| s.inv_prop.clone()).collect();
    let km = prep.km_from_weights(&weights);
    let mut cq = 0.0;
    for (s, (&num, &den)) in km.numerators.iter().zip(&km.denominators).enumerate() {
        if den <= 0.0 {
            continue;
        }
        let arg = 1.0 - num / (cbar * den);
        if !(arg > 0.0) {
            return Err(DtrError::CqDomain {
                s: s + 1,
                t: grid.points()[s],
                value: arg,
            });
        }
        cq += arg.ln();
    }
    Ok(cq)
}

/// `u0 = -|C_Q| / lambda`.
pub fn inflection_point(c_q: f64, lambda: f64) -> f64 {
    -c_q.abs() / lambda
}

/// A differentiable function to be maximized.
pub trait AscentObjective: Sync {
    fn dim(&self) -> usize;
    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>);
}

/// `Q(theta) = sum_s log(clamped smooth factor_s) - lambda ||theta||_2`.
#[derive(Debug, Clone)]
pub struct SmoothObjective {
    prep: PreparedSample,
    code: SimplexCode,
    sp: SurrogateParams,
    lambda: f64,
    p: usize,
    offsets: Vec<usize>,
}

impl SmoothObjective {
    pub fn new(prep: PreparedSample, p: usize, sp: SurrogateParams, lambda: f64) -> Result<Self> {
        let code = SimplexCode::new(prep.k)?;
        let offsets = stage_offsets(p, prep.k, prep.m_g);
        Ok(Self {
            prep,
            code,
            sp,
            lambda,
            p,
            offsets,
        })
    }

    pub fn from_data(
        data: &Dataset,
        grid: &TimeGrid,
        prop: &dyn Propensity,
        sp: SurrogateParams,
        lambda: f64,
    ) -> Result<Self> {
        Self::new(PreparedSample::new(data, grid, prop)?, data.p(), sp, lambda)
    }

    pub fn prepared(&self) -> &PreparedSample {
        &self.prep
    }

    pub fn surrogate(&self) -> SurrogateParams {
        self.sp
    }

    pub fn n_params(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(DtrError::DimensionMismatch {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    pub fn objective(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        Ok(self.evaluate(theta, false).0)
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        Ok(self.evaluate(theta, true).1)
    }

    fn evaluate(&self, theta: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let prep = &self.prep;
        let pass = SmoothPass::compute(prep, &self.code, self.sp, theta, self.p);
        let km = prep.km_from_weights(&pass.weights);
        let g = prep.grid_len();
        let mut log_surv = 0.0;
        // dQ/dD contributions: a_s for every at-risk subject, e_s for failures
        let mut a = vec![0.0; g];
        let mut e = vec![0.0; g];
        for s in 0..g {
            let (num, den) = (km.numerators[s], km.denominators[s]);
            if den <= 0.0 {
                continue;
            }
            let factor = 1.0 - num / den;
            if factor < FACTOR_FLOOR {
                log_surv += FACTOR_FLOOR.ln();
                continue;
            }
            log_surv += factor.ln();
            a[s] = num / (den * (den - num));
            e[s] = 1.0 / (den - num);
        }
        let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        let value = log_surv - self.lambda * norm;
        if !want_grad {
            return (value, Vec::new());
        }

        let m_g = prep.m_g;
        // cum[m][k] = sum of a_s over s < k with level m
        let mut cum = vec![vec![0.0; g + 1]; m_g];
        for s in 0..g {
            let lvl = prep.levels[s] - 1;
            for (m, c) in cum.iter_mut().enumerate() {
                c[s + 1] = c[s] + if m == lvl { a[s] } else { 0.0 };
            }
        }
        let mut grad = vec![0.0; theta.len()];
        let rows = prep.k - 1;
        let mut gw = vec![0.0; m_g];
        for (i, subj) in prep.subjects.iter().enumerate() {
            if subj.last_point == 0 || subj.levels == 0 {
                continue;
            }
            for m in 0..subj.levels {
                let mut d = cum[m][subj.last_point];
                if let Some(s) = subj.event_point {
                    if prep.levels[s - 1] == m + 1 {
                        d -= e[s - 1];
                    }
                }
                gw[m] = d * pass.weights[i][m];
            }
            let mut tail = 0.0;
            for j in (0..subj.levels).rev() {
                tail += gw[j];
                let r = pass.dlog_l[i][j] * tail;
                if r == 0.0 {
                    continue;
                }
                let h = &subj.histories[j];
                let dim = h.len();
                let vertex = self.code.vertex(subj.treatments[j]);
                let block = &mut grad[self.offsets[j]..self.offsets[j + 1]];
                for (row, &v) in vertex.iter().enumerate().take(rows) {
                    let coef = r * v;
                    let dst = &mut block[row * (dim + 1)..(row + 1) * (dim + 1)];
                    for (gd, x) in dst[..dim].iter_mut().zip(h) {
                        *gd += coef * x;
                    }
                    dst[dim] += coef;
                }
            }
        }
        if norm > 0.0 {
            for (gd, t) in grad.iter_mut().zip(theta) {
                *gd -= self.lambda * t / norm;
            }
        }
        (value, grad)
    }
}

impl AscentObjective for SmoothObjective {
    fn dim(&self) -> usize {
        self.n_params()
    }

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.evaluate(x, true)
    }
}

/// Settings of one ascent run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentSettings {
    pub max_iter: usize,
    pub epsilon: f64,
    pub eta0: f64,
    pub step_bounds: [f64; 2],
}

impl From<&FitConfig> for AscentSettings {
    fn from(c: &FitConfig) -> Self {
        Self {
            max_iter: c.max_iter,
            epsilon: c.epsilon,
            eta0: c.eta0,
            step_bounds: c.step_bounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentResult {
    /// Best iterate seen.
    pub theta: Vec<f64>,
    pub value: f64,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn sq_norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum()
}

/// Gradient ascent with Barzilai-Borwein steps. Returns the best iterate.
pub fn bb_ascent(
    objective: &dyn AscentObjective,
    init: &[f64],
    settings: AscentSettings,
) -> Result<AscentResult> {
    if init.len() != objective.dim() {
        return Err(DtrError::DimensionMismatch {
            expected: objective.dim(),
            got: init.len(),
        });
    }
    if init.iter().any(|x| !x.is_finite()) {
        return Err(DtrError::InvalidInput("non-finite initial point".into()));
    }
    let [lo, hi] = settings.step_bounds;
    let mut x = init.to_vec();
    let (q, mut g) = objective.value_and_gradient(&x);
    if !q.is_finite() {
        return Err(DtrError::NonFiniteObjective);
    }
    let mut trace = vec![q];
    let mut best = (q, x.clone());
    if g.iter().all(|v| *v == 0.0) {
        return Ok(AscentResult {
            theta: x,
            value: q,
            objective_trace: trace,
            converged: true,
            iterations: 1,
        });
    }
    let mut step = settings.eta0;
    let mut curvature_step = false;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        iterations += 1;
        let x_new: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + step * gi).collect();
        let (q_new, g_new) = objective.value_and_gradient(&x_new);
        if !q_new.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            break;
        }
        trace.push(q_new);
        if q_new > best.0 {
            best = (q_new, x_new.clone());
        }
        let dx: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let dx2 = sq_norm(dx.iter().copied());
        let dg2 = sq_norm(dg.iter().copied());
        x = x_new;
        g = g_new;
        // a fixed fallback step says nothing about stationarity
        if curvature_step && dx2.max(dg2) < settings.epsilon {
            converged = true;
            break;
        }
        // ascent form of the BB ratio: the curvature term is negative where Q is concave
        let bb = -dx.iter().zip(&dg).map(|(a, b)| a * b).sum::<f64>() / dg2;
        curvature_step = bb.is_finite() && bb > 0.0;
        step = if curvature_step {
            bb.clamp(lo, hi)
        } else {
            settings.eta0
        };
    }
    Ok(AscentResult {
        theta: best.1,
        value: best.0,
        objective_trace: trace,
        converged,
        iterations,
    })
}

/// Uniform `[-scale, scale]` initialization from a seed.
pub fn random_init(dim: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.random_range(-scale..=scale)).collect()
}

/// Seed of start `k` of a multi-start fit.
pub fn start_seed(seed: u64, start: usize) -> u64 {
    crate::derive_seed(seed, 0x5eed_0000 + start as u64)
}

/// Fits a policy on `data`, resolving the propensity source from the config.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<(FitResult, PropensityLookup)> {
    config.validate()?;
    let grid = TimeGrid::build(data, config.target_time)?;
    let prop = PropensityLookup::resolve(&config.propensity, data, grid.decision_stages())?;
    let result = fit_with(data, &grid, &prop, config)?;
    Ok((result, prop))
}

/// Fits with an explicit grid and propensity lookup.
pub fn fit_with(
    data: &Dataset,
    grid: &TimeGrid,
    prop: &dyn Propensity,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    let prep = PreparedSample::new(data, grid, prop)?;
    let c_q = compute_cq_prepared(&prep, grid, config.cbar)?;
    fit_prepared(&prep, c_q, data, config)
}

/// Multi-start ascent on a prepared sample of `data` with a precomputed `C_Q`.
pub fn fit_prepared(
    prep: &PreparedSample,
    c_q: f64,
    data: &Dataset,
    config: &FitConfig,
) -> Result<FitResult> {
    let u0 = inflection_point(c_q, config.lambda);
    let sp = SurrogateParams::new(config.b, u0)?;
    let m_g = prep.decision_stages();
    let objective = SmoothObjective::new(prep.clone(), data.p(), sp, config.lambda)?;
    let dim = n_params(data.p(), data.k(), m_g);
    let settings = AscentSettings::from(config);
    let runs = (0..config.starts)
        .into_par_iter()
        .map(|k| {
            let init = random_init(dim, config.init_scale, start_seed(config.seed, k));
            bb_ascent(&objective, &init, settings)
        })
        .collect::<Result<Vec<_>>>()?;
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.value > a.value { b } else { a })
        .expect("at least one start");
    // stages reachable before the target but without training events get zero rules
    let m_cover = data.layout().stage_of(config.target_time).max(m_g);
    let mut theta = best.theta.clone();
    theta.resize(n_params(data.p(), data.k(), m_cover), 0.0);
    let policy = PolicySet::from_flat(data.p(), data.k(), m_cover, data.layout().clone(), &theta)?;
    Ok(FitResult {
        policy,
        objective_trace: best.objective_trace,
        converged: best.converged,
        iterations: best.iterations,
        u0,
        c_q,
        objective: best.value,
    })
}
