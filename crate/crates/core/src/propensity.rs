//! Treatment-assignment probabilities `p(A_m | H_m)`: known randomization
//! schemes and per-stage L1-penalized multinomial logistic fits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Trajectory};
use crate::error::{DtrError, Result};

/// Lower bound applied to every joint propensity.
pub const PROPENSITY_FLOOR: f64 = 1e-6;

/// Probability of the recorded treatment at one stage.
pub trait Propensity: Sync {
    fn stage_probability(&self, traj: &Trajectory, stage: usize) -> Result<f64>;
}

/// `p(A_1..A_m | H_m)` as the product of stage probabilities, floored at
/// [`PROPENSITY_FLOOR`].
pub fn joint_propensity(
    prop: &dyn Propensity,
    traj: &Trajectory,
    up_to_stage: usize,
) -> Result<f64> {
    if up_to_stage == 0 || up_to_stage > traj.n_stages() {
        return Err(DtrError::InvalidInput(format!(
            "subject {}: propensity through stage {up_to_stage} requested, {} recorded",
            traj.id,
            traj.n_stages()
        )));
    }
    let mut joint = 1.0;
    for m in 1..=up_to_stage {
        joint *= prop.stage_probability(traj, m)?;
    }
    Ok(joint.max(PROPENSITY_FLOOR))
}

/// Each of `K` treatments with probability `1/K` at every stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformPropensity {
    pub k: usize,
}

impl Propensity for UniformPropensity {
    fn stage_probability(&self, _traj: &Trajectory, _stage: usize) -> Result<f64> {
        Ok(1.0 / self.k as f64)
    }
}

/// Numerically stable softmax into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Multinomial logistic model for one stage:
/// `P(A = k | H) ∝ exp(b_{0k} + H' b_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub stage: usize,
    pub intercepts: Vec<f64>,
    /// One column `b_k` (length `dim(H_m)`) per treatment.
    pub coefficients: Vec<Vec<f64>>,
    pub lambda_star: f64,
}

impl PropensityModel {
    pub fn zeros(stage: usize, dim: usize, k: usize) -> Self {
        Self {
            stage,
            intercepts: vec![0.0; k],
            coefficients: vec![vec![0.0; dim]; k],
            lambda_star: 0.0,
        }
    }

    pub fn k(&self) -> usize {
        self.intercepts.len()
    }

    pub fn dim(&self) -> usize {
        self.coefficients.first().map_or(0, Vec::len)
    }

    pub fn logits_into(&self, h: &[f64], out: &mut [f64]) {
        for ((o, b0), col) in out.iter_mut().zip(&self.intercepts).zip(&self.coefficients) {
            *o = b0 + col.iter().zip(h).map(|(b, x)| b * x).sum::<f64>();
        }
    }

    pub fn probabilities(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(DtrError::DimensionMismatch {
                expected: self.dim(),
                got: h.len(),
            });
        }
        let mut z = vec![0.0; self.k()];
        self.logits_into(h, &mut z);
        let mut p = vec![0.0; self.k()];
        softmax_into(&z, &mut p);
        Ok(p)
    }
}

/// Design matrix and labels for one stage: every subject with the stage recorded.
#[derive(Debug, Clone)]
pub struct StageDesign {
    pub rows: Vec<Vec<f64>>,
    /// 0-based treatment labels.
    pub labels: Vec<usize>,
    pub k: usize,
}

impl StageDesign {
    pub fn from_dataset(data: &Dataset, stage: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for traj in data.trajectories().iter().filter(|t| t.n_stages() >= stage) {
            rows.push(traj.history_vector(stage)?.0);
            labels.push(traj.stages[stage - 1].treatment - 1);
        }
        Ok(Self {
            rows,
            labels,
            k: data.k(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            k: self.k,
        }
    }
}

/// Average log-likelihood of `model` over a stage design.
pub fn design_loglik(model: &PropensityModel, design: &StageDesign) -> f64 {
    let k = model.k();
    let mut z = vec![0.0; k];
    let mut total = 0.0;
    for (h, &a) in design.rows.iter().zip(&design.labels) {
        model.logits_into(h, &mut z);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += z[a] - lse;
    }
    total / design.len() as f64
}

/// `(1/N) sum_i { sum_k I(A_im = k)(b_0k + H' b_k) - log sum_k exp(...) }` over
/// subjects with stage `stage` recorded.
pub fn multinomial_loglik(model: &PropensityModel, data: &Dataset, stage: usize) -> Result<f64> {
    let design = StageDesign::from_dataset(data, stage)?;
    if design.is_empty() {
        return Err(DtrError::InvalidInput(format!(
            "no subject reaches stage {stage}"
        )));
    }
    if design.rows[0].len() != model.dim() {
        return Err(DtrError::DimensionMismatch {
            expected: model.dim(),
            got: design.rows[0].len(),
        });
    }
    Ok(design_loglik(model, &design))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxSettings {
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for ProxSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iter: 5000,
        }
    }
}

/// Diagnostics from one proximal-gradient solve.
#[derive(Debug, Clone)]
pub struct ProxTrace {
    pub objective: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Centered copy of a design; the penalty is unchanged because intercepts
/// absorb the shift.
struct Centered {
    rows: Vec<Vec<f64>>,
    means: Vec<f64>,
}

fn center(design: &StageDesign) -> Centered {
    let dim = design.rows.first().map_or(0, Vec::len);
    let n = design.len() as f64;
    let mut means = vec![0.0; dim];
    for row in &design.rows {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x / n;
        }
    }
    let rows = design
        .rows
        .iter()
        .map(|r| r.iter().zip(&means).map(|(x, m)| x - m).collect())
        .collect();
    Centered { rows, means }
}

/// Parameters laid out as `[b_01..b_0K, b_1 (dim), ..., b_K (dim)]`.
struct Problem<'a> {
    rows: &'a [Vec<f64>],
    labels: &'a [usize],
    k: usize,
    dim: usize,
    lambda: f64,
}

impl Problem<'_> {
    /// Smooth part (negative average log-likelihood) and its gradient.
    fn smooth(&self, params: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (k, dim) = (self.k, self.dim);
        let n = self.rows.len() as f64;
        let mut z = vec![0.0; k];
        let mut pr = vec![0.0; k];
        let mut nll = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        for (h, &a) in self.rows.iter().zip(self.labels) {
            for c in 0..k {
                let col = &params[k + c * dim..k + (c + 1) * dim];
                z[c] = params[c] + col.iter().zip(h).map(|(b, x)| b * x).sum::<f64>();
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll -= z[a] - lse;
            if let Some(g) = g.as_deref_mut() {
                softmax_into(&z, &mut pr);
                for c in 0..k {
                    let r = (pr[c] - f64::from(u8::from(c == a))) / n;
                    g[c] += r;
                    let gc = &mut g[k + c * dim..k + (c + 1) * dim];
                    for (gj, x) in gc.iter_mut().zip(h) {
                        *gj += r * x;
                    }
                }
            }
        }
        nll / n
    }

    fn penalty(&self, params: &[f64]) -> f64 {
        self.lambda * params[self.k..].iter().map(|b| b.abs()).sum::<f64>()
    }

    fn prox(&self, params: &mut [f64], step: f64) {
        let thr = step * self.lambda;
        for b in &mut params[self.k..] {
            *b = b.signum() * (b.abs() - thr).max(0.0);
        }
    }

    fn kkt(&self, params: &[f64], grad: &[f64]) -> f64 {
        let mut worst = grad[..self.k].iter().map(|g| g.abs()).fold(0.0, f64::max);
        for (b, g) in params[self.k..].iter().zip(&grad[self.k..]) {
            let r = if *b != 0.0 {
                (g + self.lambda * b.signum()).abs()
            } else {
                (g.abs() - self.lambda).max(0.0)
            };
            worst = worst.max(r);
        }
        worst
    }
}

/// Proximal gradient with backtracking on the centered design; returns
/// centered-scale parameters.
fn solve(problem: &Problem<'_>, init: Vec<f64>, settings: ProxSettings) -> (Vec<f64>, ProxTrace) {
    let mut params = init;
    let mut grad = vec![0.0; params.len()];
    let mut f = problem.smooth(&params, Some(&mut grad));
    let mut objective = vec![f + problem.penalty(&params)];
    let mut step = 1.0;
    let mut kkt = problem.kkt(&params, &grad);
    let mut iterations = 0;
    let mut trial = vec![0.0; params.len()];
    while iterations < settings.max_iter && kkt >= settings.tolerance {
        iterations += 1;
        loop {
            for ((t, p), g) in trial.iter_mut().zip(&params).zip(&grad) {
                *t = p - step * g;
            }
            problem.prox(&mut trial, step);
            let f_trial = problem.smooth(&trial, None);
            let mut lin = 0.0;
            let mut quad = 0.0;
            for ((t, p), g) in trial.iter().zip(&params).zip(&grad) {
                let d = t - p;
                lin += g * d;
                quad += d * d;
            }
            if f_trial <= f + lin + quad / (2.0 * step) + 1e-15 || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }
        std::mem::swap(&mut params, &mut trial);
        f = problem.smooth(&params, Some(&mut grad));
        objective.push(f + problem.penalty(&params));
        kkt = problem.kkt(&params, &grad);
        step *= 1.5;
    }
    (
        params,
        ProxTrace {
            objective,
            kkt_residual: kkt,
            iterations,
        },
    )
}

/// Smallest `lambda_star` at which every coefficient is zero.
pub fn critical_lambda(design: &StageDesign) -> f64 {
    let c = center(design);
    let n = design.len() as f64;
    let k = design.k;
    let mut freq = vec![0.0; k];
    for &a in &design.labels {
        freq[a] += 1.0 / n;
    }
    let dim = c.means.len();
    let mut worst: f64 = 0.0;
    for j in 0..dim {
        for (cls, fk) in freq.iter().enumerate() {
            let g: f64 = c
                .rows
                .iter()
                .zip(&design.labels)
                .map(|(h, &a)| h[j] * (fk - f64::from(u8::from(a == cls))))
                .sum::<f64>()
                / n;
            worst = worst.max(g.abs());
        }
    }
    worst
}

/// Fits one stage from an explicit design.
pub fn fit_design(
    design: &StageDesign,
    stage: usize,
    lambda_star: f64,
    settings: ProxSettings,
) -> Result<(PropensityModel, ProxTrace)> {
    fit_design_warm(design, stage, lambda_star, settings, None)
}

fn fit_design_warm(
    design: &StageDesign,
    stage: usize,
    lambda_star: f64,
    settings: ProxSettings,
    warm: Option<Vec<f64>>,
) -> Result<(PropensityModel, ProxTrace)> {
    let k = design.k;
    let mut counts = vec![0usize; k];
    for &a in &design.labels {
        counts[a] += 1;
    }
    if let Some(arm) = counts.iter().position(|&c| c == 0) {
        return Err(DtrError::EmptyArm {
            stage,
            arm: arm + 1,
        });
    }
    if design.rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(DtrError::InvalidInput(format!(
            "non-finite design value at stage {stage}"
        )));
    }
    if !(lambda_star >= 0.0) {
        return Err(DtrError::InvalidInput(format!(
            "lambda_star = {lambda_star}"
        )));
    }
    let c = center(design);
    let dim = c.means.len();
    let problem = Problem {
        rows: &c.rows,
        labels: &design.labels,
        k,
        dim,
        lambda: lambda_star,
    };
    let init = warm.unwrap_or_else(|| {
        let n = design.len() as f64;
        let mut p = vec![0.0; k + k * dim];
        for (c, cnt) in counts.iter().enumerate() {
            p[c] = (*cnt as f64 / n).ln();
        }
        p
    });
    let (params, trace) = solve(&problem, init, settings);
    let mut model = PropensityModel {
        stage,
        intercepts: params[..k].to_vec(),
        coefficients: (0..k)
            .map(|cls| params[k + cls * dim..k + (cls + 1) * dim].to_vec())
            .collect(),
        lambda_star,
    };
    // undo centering, then center the intercepts
    for (b0, col) in model.intercepts.iter_mut().zip(&model.coefficients) {
        *b0 -= col.iter().zip(&c.means).map(|(b, m)| b * m).sum::<f64>();
    }
    let mean = model.intercepts.iter().sum::<f64>() / k as f64;
    model.intercepts.iter_mut().for_each(|b| *b -= mean);
    Ok((model, trace))
}

fn to_centered_params(model: &PropensityModel, means: &[f64]) -> Vec<f64> {
    let k = model.k();
    let mut p = model.intercepts.clone();
    for (b0, col) in p.iter_mut().zip(&model.coefficients) {
        *b0 += col.iter().zip(means).map(|(b, m)| b * m).sum::<f64>();
    }
    for col in &model.coefficients {
        p.extend_from_slice(col);
    }
    debug_assert_eq!(p.len(), k + k * model.dim());
    p
}

/// Penalized fit `min -loglik + lambda_star * sum_k |b_k|_1` for one stage.
pub fn fit_propensity(data: &Dataset, stage: usize, lambda_star: f64) -> Result<PropensityModel> {
    let design = StageDesign::from_dataset(data, stage)?;
    if design.is_empty() {
        return Err(DtrError::EmptyArm { stage, arm: 1 });
    }
    Ok(fit_design(&design, stage, lambda_star, ProxSettings::default())?.0)
}

/// Options for choosing `lambda_star` by cross-validated log-loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropensityTuning {
    pub folds: usize,
    pub grid_points: usize,
    /// Smallest grid value as a fraction of the critical lambda.
    pub min_ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub rule: SelectionRule,
}

impl Default for PropensityTuning {
    fn default() -> Self {
        Self {
            folds: 5,
            grid_points: 10,
            min_ratio: 1e-3,
            seed: 0,
            rule: SelectionRule::default(),
        }
    }
}

/// How the cross-validated loss curve is turned into `lambda_star`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Smallest mean held-out log-loss.
    MinLoss,
    /// Largest `lambda_star` within one standard error of the smallest loss.
    #[default]
    OneStandardError,
}

/// Log-spaced `lambda_star` path from the critical value downwards.
pub fn lambda_path(design: &StageDesign, tuning: &PropensityTuning) -> Vec<f64> {
    let top = critical_lambda(design).max(1e-8);
    let n = tuning.grid_points.max(1);
    (0..n)
        .map(|i| {
            let frac = if n == 1 {
                0.0
            } else {
                i as f64 / (n - 1) as f64
            };
            top * tuning.min_ratio.powf(frac)
        })
        .collect()
}

/// Chooses `lambda_star` for one stage by K-fold held-out log-loss, then refits
/// on the whole stage design.
pub fn fit_propensity_cv(
    data: &Dataset,
    stage: usize,
    tuning: &PropensityTuning,
) -> Result<PropensityModel> {
    let design = StageDesign::from_dataset(data, stage)?;
    if design.is_empty() {
        return Err(DtrError::EmptyArm { stage, arm: 1 });
    }
    let path = lambda_path(&design, tuning);
    let folds = tuning.folds.clamp(2, design.len().max(2));
    let mut order: Vec<usize> = (0..design.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(tuning.seed ^ stage as u64));
    let mut fold_loss = vec![vec![0.0; path.len()]; folds];
    let mut usable = vec![true; path.len()];
    for (f, losses) in fold_loss.iter_mut().enumerate() {
        let (held, train): (Vec<usize>, Vec<usize>) =
            order
                .iter()
                .enumerate()
                .fold((vec![], vec![]), |mut acc, (pos, &i)| {
                    if pos % folds == f {
                        acc.0.push(i);
                    } else {
                        acc.1.push(i);
                    }
                    acc
                });
        let train_design = design.subset(&train);
        let held_design = design.subset(&held);
        let means = center(&train_design).means;
        let mut warm = None;
        for (li, &lam) in path.iter().enumerate() {
            match fit_design_warm(
                &train_design,
                stage,
                lam,
                ProxSettings::default(),
                warm.take(),
            ) {
                Ok((model, _)) => {
                    losses[li] = -design_loglik(&model, &held_design);
                    warm = Some(to_centered_params(&model, &means));
                }
                Err(DtrError::EmptyArm { .. }) => usable[li] = false,
                Err(e) => return Err(e),
            }
        }
    }
    let best = select_lambda(&path, &fold_loss, &usable, tuning.rule);
    Ok(fit_design(&design, stage, best, ProxSettings::default())?.0)
}

fn select_lambda(
    path: &[f64],
    fold_loss: &[Vec<f64>],
    usable: &[bool],
    rule: SelectionRule,
) -> f64 {
    let folds = fold_loss.len() as f64;
    let stats: Vec<(f64, f64)> = (0..path.len())
        .map(|i| {
            let mean = fold_loss.iter().map(|f| f[i]).sum::<f64>() / folds;
            let var = fold_loss.iter().map(|f| (f[i] - mean).powi(2)).sum::<f64>()
                / (folds - 1.0).max(1.0);
            (mean, (var / folds).sqrt())
        })
        .collect();
    let Some(min) = (0..path.len())
        .filter(|&i| usable[i])
        .min_by(|&a, &b| stats[a].0.total_cmp(&stats[b].0))
    else {
        return path[0];
    };
    match rule {
        SelectionRule::MinLoss => path[min],
        // the path is decreasing, so the first admissible index is the largest lambda
        SelectionRule::OneStandardError => (0..path.len())
            .find(|&i| usable[i] && stats[i].0 <= stats[min].0 + stats[min].1)
            .map_or(path[min], |i| path[i]),
    }
}

/// Fitted models for stages `1..=len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPropensity {
    pub models: Vec<PropensityModel>,
}

impl FittedPropensity {
    /// CV-tuned fit for every stage in `1..=stages`.
    pub fn fit(data: &Dataset, stages: usize, tuning: &PropensityTuning) -> Result<Self> {
        let models = (1..=stages)
            .map(|m| fit_propensity_cv(data, m, tuning))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { models })
    }
}

impl Propensity for FittedPropensity {
    fn stage_probability(&self, traj: &Trajectory, stage: usize) -> Result<f64> {
        let model = self.models.get(stage - 1).ok_or_else(|| {
            DtrError::InvalidInput(format!("no propensity model for stage {stage}"))
        })?;
        let h = traj.history_vector(stage)?;
        let p = model.probabilities(h.as_slice())?;
        Ok(p[traj.stages[stage - 1].treatment - 1])
    }
}

/// Serializable choice of propensity source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PropensitySource {
    /// Known uniform randomization over `K` arms.
    #[default]
    Uniform,
    /// Per-stage penalized multinomial fits tuned by cross-validation.
    Fitted {
        #[serde(default)]
        tuning: PropensityTuning,
    },
}

/// A resolved propensity lookup, either known or fitted on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PropensityLookup {
    Uniform(UniformPropensity),
    Fitted(FittedPropensity),
}

impl PropensityLookup {
    pub fn resolve(source: &PropensitySource, data: &Dataset, stages: usize) -> Result<Self> {
        Ok(match source {
            PropensitySource::Uniform => Self::Uniform(UniformPropensity { k: data.k() }),
            PropensitySource::Fitted { tuning } => {
                Self::Fitted(FittedPropensity::fit(data, stages, tuning)?)
            }
        })
    }
}

impl Propensity for PropensityLookup {
    fn stage_probability(&self, traj: &Trajectory, stage: usize) -> Result<f64> {
        match self {
            Self::Uniform(u) => u.stage_probability(traj, stage),
            Self::Fitted(f) => f.stage_probability(traj, stage),
        }
    }
}
