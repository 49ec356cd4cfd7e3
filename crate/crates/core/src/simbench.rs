//! Simulation designs, censoring calibration and replicated benchmarks.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, Dataset, StageLayout, StageRecord, TimeGrid, Trajectory};
use crate::derive_seed;
use crate::error::{DtrError, Result};
use crate::estimator::km_value_hard;
use crate::geometry::{dot, PolicySet, Regime, SimplexCode, StageRule};
use crate::optimizer::{fit, FitConfig};
use crate::propensity::{Propensity, PropensitySource, PropensityTuning};
use crate::tuning::{cross_validate, TuningGrid};

pub const CALIBRATION_SAMPLES: usize = 100_000;
pub const CALIBRATION_TOLERANCE: f64 = 0.005;
const BISECTION_STEPS: usize = 60;
const CONTAMINATION: f64 = 0.05;

/// How a two-digit covariate subscript such as `15` is read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateIndexing {
    /// Stage 1, coordinate 5.
    #[default]
    StageCoordinate,
    /// Coordinate 15 of the first stage.
    FirstStageFlat,
}

impl CovariateIndexing {
    /// `(stage, coordinate)`, both 1-based.
    pub fn resolve(self, code: usize) -> (usize, usize) {
        match self {
            Self::StageCoordinate => (code / 10, code % 10),
            Self::FirstStageFlat => (1, code),
        }
    }
}

/// The generative model of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Design {
    #[serde(rename = "example_id")]
    pub example: u8,
    pub p: usize,
    #[serde(rename = "M")]
    pub stages: usize,
    #[serde(rename = "K")]
    pub treatments: usize,
    pub stage_width: f64,
    pub indexing: CovariateIndexing,
}

impl Default for Design {
    fn default() -> Self {
        Self {
            example: 1,
            p: 25,
            stages: 5,
            treatments: 3,
            stage_width: 0.5,
            indexing: CovariateIndexing::default(),
        }
    }
}

impl Design {
    pub fn example(id: u8) -> Self {
        Self {
            example: id,
            ..Self::default()
        }
    }

    pub fn layout(&self) -> Result<StageLayout> {
        StageLayout::uniform(self.stages, self.stage_width)
    }

    fn covariate_codes(&self) -> &'static [usize] {
        match self.example {
            1 => &[15, 22, 33],
            2 | 3 => &[15, 12],
            _ => &[13, 15],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.example) {
            return Err(DtrError::InvalidInput(format!(
                "unknown example {}; expected 1, 2, 3 or 4",
                self.example
            )));
        }
        if self.treatments != 3 {
            return Err(DtrError::InvalidInput(
                "the simulation designs have exactly 3 treatments".into(),
            ));
        }
        if self.stages == 0 || (self.example > 1 && self.stages > THETA_MULT_EX2.len()) {
            return Err(DtrError::InvalidInput(format!(
                "example {} supports 1..={} stages",
                self.example,
                THETA_MULT_EX2.len()
            )));
        }
        if self.p < 3 {
            return Err(DtrError::InvalidInput("need at least 3 covariates".into()));
        }
        if !(self.stage_width > 0.0) {
            return Err(DtrError::InvalidInput(
                "stage width must be positive".into(),
            ));
        }
        for &code in self.covariate_codes() {
            let (m, j) = self.indexing.resolve(code);
            if m == 0 || m > self.stages || j == 0 || j > self.p {
                return Err(DtrError::InvalidInput(format!(
                    "covariate X{code} resolves to stage {m}, coordinate {j}, outside {} stages of {} covariates",
                    self.stages, self.p
                )));
            }
        }
        Ok(())
    }

    fn covariate(&self, x: &[Vec<f64>], code: usize) -> f64 {
        let (m, j) = self.indexing.resolve(code);
        x[m - 1][j - 1]
    }
}

const THETA_MULT_EX2: [&[f64]; 5] = [
    &[1.0],
    &[0.5, -1.5],
    &[0.25, -0.5, 1.0],
    &[0.1, -0.25, 0.5, 1.0],
    &[0.05, -0.1, 0.25, 0.5, 1.0],
];
const THETA_TAIL_EX2: [&[f64]; 5] = [
    &[],
    &[0.1],
    &[0.05, 0.1],
    &[0.01, -0.05, 0.1],
    &[0.01, -0.05, 0.05, -0.1],
];
const THETA_MULT_EX4: [&[f64]; 5] = [
    &[1.0],
    &[-0.5, 1.0],
    &[0.25, -0.25, 1.5],
    &[0.25, -0.25, -0.25, 1.0],
    &[0.05, -0.1, -0.25, -0.5, 1.0],
];
const THETA_TAIL_EX4: [&[f64]; 5] = [
    &[],
    &[-0.3],
    &[-0.05, -0.1],
    &[0.05, 0.05, -0.15],
    &[0.05, -0.05, 0.05, -0.1],
];
const THETA_EX2: [[f64; 3]; 2] = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0]];
const THETA_EX4: [[f64; 3]; 2] = [[-1.0, 0.5, -1.0], [0.5, -1.0, -1.0]];
const GAMMA_EX3: [[f64; 3]; 2] = [[0.0, 0.0, 0.25], [0.0, -0.25, 0.5]];

/// Coefficient vector `theta_{mj}` (1-based stage and row) over `H_m`.
pub fn true_theta(example: u8, p: usize, m: usize, j: usize) -> Vec<f64> {
    let (mult, tail, base) = if example == 4 {
        (
            THETA_MULT_EX4[m - 1],
            THETA_TAIL_EX4[m - 1],
            THETA_EX4[j - 1],
        )
    } else {
        (
            THETA_MULT_EX2[m - 1],
            THETA_TAIL_EX2[m - 1],
            THETA_EX2[j - 1],
        )
    };
    let mut out = Vec::with_capacity(m * p + m - 1);
    for &c in mult {
        let start = out.len();
        out.resize(start + p, 0.0);
        for (o, b) in out[start..start + 3].iter_mut().zip(base) {
            *o = c * b;
        }
    }
    out.extend_from_slice(tail);
    out
}

/// The generating linear rule of Examples 2 and 3 as a policy.
pub fn true_policy(design: &Design, m_g: usize) -> Result<PolicySet> {
    design.validate()?;
    if !matches!(design.example, 2 | 3) {
        return Err(DtrError::InvalidInput(
            "only examples 2 and 3 have a linear angle-based truth".into(),
        ));
    }
    let rules = (1..=m_g)
        .map(|m| StageRule {
            coefficients: (1..=2)
                .map(|j| true_theta(design.example, design.p, m, j))
                .collect(),
            intercept: vec![0.0; 2],
        })
        .collect();
    PolicySet::from_rules(design.p, 3, design.layout()?, rules)
}

/// `f_m(H_m)` of Example 4, before the sign rule.
pub fn example4_scores(p: usize, h: &[f64], m: usize) -> [f64; 2] {
    let f = |j| dot(&true_theta(4, p, m, j), h).powi(3);
    [f(1), f(2)]
}

/// `1 + [sgn f_1]^+ + [sgn f_2]^+`.
pub fn sign_rule(f: [f64; 2]) -> usize {
    1 + usize::from(f[0] > 0.0) + usize::from(f[1] > 0.0)
}

/// Treatment-assignment probabilities of Example 3 at stage `m`.
pub fn example3_probabilities(p: usize, h: &[f64], m: usize) -> [f64; 3] {
    let lin = |g: &[f64; 3]| -> f64 {
        (0..m)
            .map(|s| {
                g.iter()
                    .zip(&h[s * p..s * p + 3])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    };
    let e1 = lin(&GAMMA_EX3[0]).exp();
    let e2 = lin(&GAMMA_EX3[1]).exp();
    let z = e1 + e2 + 1.0;
    [e1 / z, e2 / z, 1.0 / z]
}

/// The generating propensity of Example 3.
#[derive(Debug, Clone, Copy)]
pub struct Example3Propensity {
    pub p: usize,
}

impl Propensity for Example3Propensity {
    fn stage_probability(&self, traj: &Trajectory, stage: usize) -> Result<f64> {
        let h = traj.history_vector(stage)?;
        let a = traj.stages[stage - 1].treatment;
        Ok(example3_probabilities(self.p, h.as_slice(), stage)[a - 1])
    }
}

/// One subject before censoring and truncation.
#[derive(Debug, Clone)]
struct Latent {
    covariates: Vec<Vec<f64>>,
    treatments: Vec<usize>,
    optimal: Vec<usize>,
    log_t: f64,
    /// `log C - c0`.
    log_c: f64,
}

fn latent(design: &Design, code: &SimplexCode, seed: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, big_m) = (design.p, design.stages);
    let mut covariates: Vec<Vec<f64>> = Vec::with_capacity(big_m);
    let mut treatments = Vec::with_capacity(big_m);
    let mut optimal = Vec::with_capacity(big_m);
    let mut h = Vec::with_capacity(big_m * (p + 1));
    let sd1 = 0.1f64.sqrt();
    for m in 1..=big_m {
        let d_pre = (design.example == 1).then(|| rng.random_range(1..=3usize));
        let x: Vec<f64> = match design.example {
            1 => {
                let d = d_pre.unwrap_or(1);
                (0..p)
                    .map(|j| {
                        let mean = if j + 1 == d { 0.5 * m as f64 } else { 0.0 };
                        mean + sd1 * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect()
            }
            2 | 3 => (0..p).map(|_| rng.sample(StandardNormal)).collect(),
            _ => (0..p).map(|_| rng.random::<f64>()).collect(),
        };
        covariates.push(x);
        h.clear();
        for xs in &covariates {
            h.extend_from_slice(xs);
        }
        h.extend(treatments.iter().map(|&a: &usize| a as f64));
        let d = match design.example {
            1 => d_pre.unwrap_or(1),
            2 | 3 => {
                let f = [
                    dot(&true_theta(design.example, p, m, 1), &h),
                    dot(&true_theta(design.example, p, m, 2), &h),
                ];
                code.argmax(&f)
            }
            _ => {
                let rule = sign_rule(example4_scores(p, &h, m));
                if rng.random::<f64>() < CONTAMINATION {
                    rng.random_range(1..=3usize)
                } else {
                    rule
                }
            }
        };
        let a = if design.example == 3 {
            let pr = example3_probabilities(p, &h, m);
            let u: f64 = rng.random();
            if u < pr[0] {
                1
            } else if u < pr[0] + pr[1] {
                2
            } else {
                3
            }
        } else {
            rng.random_range(1..=3usize)
        };
        optimal.push(d);
        treatments.push(a);
    }
    let matched = treatments
        .iter()
        .zip(&optimal)
        .filter(|(a, d)| a == d)
        .count() as f64;
    let x = |c| design.covariate(&covariates, c);
    let (log_t, log_c) = match design.example {
        1 => {
            let e: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let lt = 0.5 * matched - 3.0 * x(15) + x(22).powi(3) - x(33).abs() + e[0];
            let lc = 0.5 * e[1] * e[1] - e[1] + e[2] - 2.0 * e[3] * e[3];
            (lt, lc)
        }
        2 | 3 => {
            let e: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let lt = 0.75 * matched - 0.5 * x(15).abs() + x(12) + e[0];
            let lc = 0.5 * e[1] + e[2] - e[3];
            (lt, lc)
        }
        _ => {
            let e1: f64 = rng.sample(StandardNormal);
            let e: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
            let lt = 0.5 * matched - 2.0 * x(13).abs() + x(15) + e1;
            let lc = 0.5 * e[0].abs() + e[1] + e[2];
            (lt, lc)
        }
    };
    Latent {
        covariates,
        treatments,
        optimal,
        log_t,
        log_c,
    }
}

/// Generator-side record of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub event_time: f64,
    pub censor_time: f64,
    /// `d_m` for all stages, observed or not.
    pub optimal: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub example_id: u8,
    pub c0: f64,
    pub subjects: Vec<SubjectTruth>,
}

impl GroundTruth {
    pub fn regime(&self) -> TruthRegime {
        TruthRegime {
            rules: self
                .subjects
                .iter()
                .map(|s| (s.id.clone(), s.optimal.clone()))
                .collect(),
        }
    }
}

/// Looks up each subject's generating decision by id.
#[derive(Debug, Clone)]
pub struct TruthRegime {
    rules: HashMap<String, Vec<usize>>,
}

impl Regime for TruthRegime {
    fn decide(&self, traj: &Trajectory, stage: usize) -> Result<usize> {
        self.rules
            .get(&traj.id)
            .and_then(|d| d.get(stage - 1))
            .copied()
            .ok_or_else(|| {
                DtrError::InvalidInput(format!(
                    "no true rule for subject {} stage {stage}",
                    traj.id
                ))
            })
    }
}

/// A fixed pseudo-random treatment per `(subject, stage)`.
#[derive(Debug, Clone, Copy)]
pub struct RandomRegime {
    pub k: usize,
    pub seed: u64,
}

impl Regime for RandomRegime {
    fn decide(&self, traj: &Trajectory, stage: usize) -> Result<usize> {
        let id_hash = traj.id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
        });
        let z = derive_seed(derive_seed(self.seed, id_hash), stage as u64);
        Ok((z % self.k as u64) as usize + 1)
    }
}

/// Draws `n` subjects with censoring constant `c0`.
pub fn simulate(design: &Design, n: usize, c0: f64, seed: u64) -> Result<(Dataset, GroundTruth)> {
    design.validate()?;
    if n == 0 {
        return Err(DtrError::InvalidInput(
            "sample size must be positive".into(),
        ));
    }
    let layout = design.layout()?;
    let code = SimplexCode::new(design.treatments)?;
    let latents: Vec<Latent> = (0..n)
        .into_par_iter()
        .map(|i| latent(design, &code, derive_seed(seed, i as u64)))
        .collect();
    let mut trajectories = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    let width = n.to_string().len().max(4);
    for (i, lat) in latents.into_iter().enumerate() {
        let id = format!("S{:0width$}", i + 1);
        let t = lat.log_t.exp();
        let c = (lat.log_c + c0).exp();
        let time = t.min(c);
        if !(time > 0.0 && time.is_finite()) {
            return Err(DtrError::InvalidInput(format!(
                "subject {id}: observed time {time} is not a positive finite number"
            )));
        }
        let observed = layout.stage_of(time);
        let stages = lat
            .covariates
            .into_iter()
            .zip(lat.treatments)
            .take(observed)
            .enumerate()
            .map(|(m, (covariates, treatment))| StageRecord {
                stage: m + 1,
                covariates,
                treatment,
            })
            .collect();
        trajectories.push(Trajectory {
            id: id.clone(),
            time,
            event: t <= c,
            stages,
        });
        subjects.push(SubjectTruth {
            id,
            event_time: t,
            censor_time: c,
            optimal: lat.optimal,
        });
    }
    let data = Dataset::new(trajectories, design.treatments, layout)?;
    Ok((
        data,
        GroundTruth {
            example_id: design.example,
            c0,
            subjects,
        },
    ))
}

/// Fraction censored among `n` fresh draws.
pub fn censoring_rate(design: &Design, c0: f64, n: usize, seed: u64) -> Result<f64> {
    let margins = censoring_margins(design, n, seed)?;
    Ok(rate_at(&margins, c0))
}

/// `log T - (log C - c0)` per subject; censored iff `c0` is below it.
fn censoring_margins(design: &Design, n: usize, seed: u64) -> Result<Vec<f64>> {
    design.validate()?;
    let code = SimplexCode::new(design.treatments)?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let lat = latent(design, &code, derive_seed(seed, i as u64));
            lat.log_t - lat.log_c
        })
        .collect())
}

fn rate_at(margins: &[f64], c0: f64) -> f64 {
    margins.iter().filter(|&&m| c0 < m).count() as f64 / margins.len() as f64
}

/// Bisects `c0` so that the censoring rate hits `target`.
pub fn calibrate_c0(design: &Design, target: f64, seed: u64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(DtrError::InvalidInput(format!(
            "target censoring rate {target} must lie in (0, 1)"
        )));
    }
    let margins = censoring_margins(design, CALIBRATION_SAMPLES, seed)?;
    let (mut lo, mut hi) = (-1.0, 1.0);
    for _ in 0..64 {
        if rate_at(&margins, lo) >= target {
            break;
        }
        lo *= 2.0;
    }
    for _ in 0..64 {
        if rate_at(&margins, hi) <= target {
            break;
        }
        hi *= 2.0;
    }
    let mut best = (f64::INFINITY, 0.0);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let rate = rate_at(&margins, mid);
        let gap = (rate - target).abs();
        if gap < best.0 {
            best = (gap, mid);
        }
        if rate > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > CALIBRATION_TOLERANCE {
        return Err(DtrError::CalibrationFailed {
            target,
            achieved: rate_at(&margins, best.1),
        });
    }
    Ok(best.1)
}

/// Hard IPW Kaplan-Meier value of `regime` on `test` at `target_time`.
pub fn evaluate_value(
    test: &Dataset,
    regime: &dyn Regime,
    prop: &dyn Propensity,
    target_time: f64,
) -> Result<f64> {
    let grid = TimeGrid::build(test, target_time)?;
    km_value_hard(test, regime, prop, &grid)
}

/// The assignment mechanism a design actually used.
pub fn generating_propensity(design: &Design) -> PropensityKind {
    if design.example == 3 {
        PropensityKind::Example3(Example3Propensity { p: design.p })
    } else {
        PropensityKind::Uniform(crate::propensity::UniformPropensity {
            k: design.treatments,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PropensityKind {
    Uniform(crate::propensity::UniformPropensity),
    Example3(Example3Propensity),
}

impl Propensity for PropensityKind {
    fn stage_probability(&self, traj: &Trajectory, stage: usize) -> Result<f64> {
        match self {
            Self::Uniform(u) => u.stage_probability(traj, stage),
            Self::Example3(e) => e.stage_probability(traj, stage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    #[serde(flatten)]
    pub design: Design,
    pub n_train: usize,
    pub n_test: usize,
    pub censor_rate: f64,
    #[serde(rename = "t_g")]
    pub target_time: f64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            design: Design::default(),
            n_train: 500,
            n_test: 2000,
            censor_rate: 0.74,
            target_time: 1.4,
            replications: 30,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        if self.n_train == 0 || self.n_test == 0 || self.replications == 0 {
            return Err(DtrError::InvalidInput(
                "sample sizes and replication count must be positive".into(),
            ));
        }
        let layout = self.design.layout()?;
        if !(self.target_time > 0.0 && self.target_time <= layout.horizon()) {
            return Err(DtrError::InvalidInput(format!(
                "t_g = {} lies outside (0, {}]",
                self.target_time,
                layout.horizon()
            )));
        }
        Ok(())
    }
}

/// Everything a benchmark run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default)]
    pub scenario: ScenarioSpec,
    #[serde(default = "default_bench_grid")]
    pub grid: TuningGrid,
    #[serde(default)]
    pub fit: FitConfig,
}

pub fn default_bench_grid() -> TuningGrid {
    TuningGrid {
        b_values: vec![0.5, 2.0, 10.0],
        lambda_values: vec![0.1, 1.0],
        d: 5,
        seed: 0,
        metric: Default::default(),
    }
}

impl BenchConfig {
    pub fn new(scenario: ScenarioSpec) -> Self {
        Self {
            scenario,
            grid: default_bench_grid(),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub replication: usize,
    pub seed: u64,
    pub b: f64,
    pub lambda: f64,
    pub value: f64,
    pub optimal_value: f64,
    pub train_censoring: f64,
    pub test_censoring: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: ScenarioSpec,
    pub c0: f64,
    pub rows: Vec<ReplicationResult>,
    /// Replications whose training sample could not be fitted.
    #[serde(default)]
    pub skipped: Vec<SkippedReplication>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedReplication {
    pub replication: usize,
    pub reason: String,
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = if n > 1.0 {
        xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl BenchReport {
    /// Mean and sample SD of the learned regime's value.
    pub fn summary(&self) -> (f64, f64) {
        mean_sd(self.rows.iter().map(|r| r.value))
    }

    pub fn optimal_summary(&self) -> (f64, f64) {
        mean_sd(self.rows.iter().map(|r| r.optimal_value))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "replication,seed,b,lambda,value,optimal_value,train_censoring,test_censoring"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.replication,
                r.seed,
                fmt_f64(r.b),
                fmt_f64(r.lambda),
                fmt_f64(r.value),
                fmt_f64(r.optimal_value),
                fmt_f64(r.train_censoring),
                fmt_f64(r.test_censoring)
            )?;
        }
        Ok(())
    }

    /// Aligned text table: one row per method.
    pub fn table(&self) -> String {
        let s = &self.scenario;
        let stage = s
            .design
            .layout()
            .map(|l| l.stage_of(s.target_time))
            .unwrap_or(0);
        let header = [
            "Example",
            "Stage",
            "t_g",
            "Censoring",
            "Method",
            "S(t_g) (SD)",
            "Reps",
        ];
        let (m, sd) = self.summary();
        let (om, osd) = self.optimal_summary();
        let rows: Vec<[String; 7]> = [("learned", m, sd), ("true rule", om, osd)]
            .iter()
            .map(|(name, mean, sd)| {
                [
                    s.design.example.to_string(),
                    stage.to_string(),
                    format!("{}", s.target_time),
                    format!("{:.0}%", 100.0 * s.censor_rate),
                    name.to_string(),
                    format!("{mean:.3}({sd:.3})"),
                    self.rows.len().to_string(),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                rows.iter()
                    .map(|r| r[c].len())
                    .chain([header[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(header.to_vec(), &mut out);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(rule.iter().map(String::as_str).collect(), &mut out);
        for r in &rows {
            line(r.iter().map(String::as_str).collect(), &mut out);
        }
        for k in &self.skipped {
            let _ = writeln!(out, "skipped replication {}: {}", k.replication, k.reason);
        }
        out
    }
}

/// Training-side propensity: estimated for Example 3, known otherwise.
fn training_propensity(config: &BenchConfig) -> PropensitySource {
    if config.scenario.design.example == 3 && config.fit.propensity == PropensitySource::Uniform {
        PropensitySource::Fitted {
            tuning: PropensityTuning::default(),
        }
    } else {
        config.fit.propensity.clone()
    }
}

/// One simulate, tune, fit, evaluate cycle.
pub fn run_replication(
    config: &BenchConfig,
    c0: f64,
    replication: usize,
) -> Result<ReplicationResult> {
    let s = &config.scenario;
    let seed = derive_seed(s.seed, replication as u64 + 1);
    let (train, _) = simulate(&s.design, s.n_train, c0, derive_seed(seed, 1))?;
    let (test, truth) = simulate(&s.design, s.n_test, c0, derive_seed(seed, 2))?;
    let base = FitConfig {
        target_time: s.target_time,
        seed: derive_seed(seed, 3),
        propensity: training_propensity(config),
        ..config.fit.clone()
    };
    let grid = TuningGrid {
        seed: derive_seed(seed, 4),
        ..config.grid.clone()
    };
    let cv = cross_validate(&train, &grid, &base)?;
    let (fitted, _) = fit(
        &train,
        &FitConfig {
            b: cv.b,
            lambda: cv.lambda,
            ..base
        },
    )?;
    let prop = generating_propensity(&s.design);
    let value = evaluate_value(&test, &fitted.policy, &prop, s.target_time)?;
    let optimal_value = evaluate_value(&test, &truth.regime(), &prop, s.target_time)?;
    Ok(ReplicationResult {
        replication,
        seed,
        b: cv.b,
        lambda: cv.lambda,
        value,
        optimal_value,
        train_censoring: train.censoring_rate(),
        test_censoring: test.censoring_rate(),
    })
}

/// Calibrates `c0` once, then runs all replications in parallel.
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchReport> {
    let s = &config.scenario;
    s.validate()?;
    config.fit.validate()?;
    let c0 = calibrate_c0(&s.design, s.censor_rate, derive_seed(s.seed, 0))?;
    let outcomes: Vec<(usize, Result<ReplicationResult>)> = (0..s.replications)
        .into_par_iter()
        .map(|r| {
            log::info!("replication {} of {}", r + 1, s.replications);
            (r, run_replication(config, c0, r))
        })
        .collect();
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut skipped = Vec::new();
    for (replication, outcome) in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e @ (DtrError::CqDomain { .. } | DtrError::AllFoldsSkipped)) => {
                log::warn!("replication {replication} skipped: {e}");
                skipped.push(SkippedReplication {
                    replication,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if rows.is_empty() {
        return Err(DtrError::AllReplicationsSkipped(skipped.len()));
    }
    rows.sort_by_key(|r| r.replication);
    Ok(BenchReport {
        scenario: s.clone(),
        c0,
        rows,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propensity::UniformPropensity;

    #[test]
    fn theta_blocks() {
        let t = true_theta(2, 4, 2, 2);
        assert_eq!(t, vec![0.5, -0.5, -0.5, 0.0, -1.5, 1.5, 1.5, 0.0, 0.1]);
        let t = true_theta(4, 3, 3, 1);
        assert_eq!(t.len(), 3 * 3 + 2);
        assert_eq!(&t[6..], &[-1.5, 0.75, -1.5, -0.05, -0.1]);
    }

    #[test]
    fn indexing_conventions() {
        assert_eq!(CovariateIndexing::StageCoordinate.resolve(15), (1, 5));
        assert_eq!(CovariateIndexing::FirstStageFlat.resolve(15), (1, 15));
        let mut d = Design::example(1);
        d.indexing = CovariateIndexing::FirstStageFlat;
        assert!(d.validate().is_err());
        assert!(Design::example(5).validate().is_err());
    }

    #[test]
    fn reproducible_and_consistent() {
        let d = Design::example(2);
        let (a, ta) = simulate(&d, 50, 0.0, 3).unwrap();
        let (b, tb) = simulate(&d, 50, 0.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        for (traj, s) in a.trajectories().iter().zip(&ta.subjects) {
            assert_eq!(traj.time, s.event_time.min(s.censor_time));
            assert_eq!(traj.event, s.event_time <= s.censor_time);
        }
    }

    #[test]
    fn example2_rule_matches_recommend() {
        let d = Design::example(2);
        let (data, truth) = simulate(&d, 200, 5.0, 11).unwrap();
        let policy = true_policy(&d, 5).unwrap();
        for (traj, s) in data.trajectories().iter().zip(&truth.subjects) {
            for m in 1..=traj.n_stages() {
                let h = traj.history_vector(m).unwrap();
                let f = policy.evaluate_policy(h.as_slice(), m).unwrap();
                assert_eq!(policy.code().recommend(&f).unwrap(), s.optimal[m - 1]);
            }
        }
    }

    #[test]
    fn calibration_extremes() {
        let d = Design::example(1);
        assert!(censoring_rate(&d, 50.0, 2000, 1).unwrap() < 0.01);
        assert!(censoring_rate(&d, -50.0, 2000, 1).unwrap() > 0.99);
        assert!(calibrate_c0(&d, 1.5, 0).is_err());
    }

    #[test]
    fn random_regime_is_stable() {
        let d = Design::example(1);
        let (data, _) = simulate(&d, 30, 0.0, 5).unwrap();
        let r = RandomRegime { k: 3, seed: 9 };
        let t = &data.trajectories()[0];
        let a = r.decide(t, 1).unwrap();
        assert_eq!(a, r.decide(t, 1).unwrap());
        assert!((1..=3).contains(&a));
        let v = evaluate_value(&data, &r, &UniformPropensity { k: 3 }, 1.4).unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn table_layout() {
        let report = BenchReport {
            scenario: ScenarioSpec::default(),
            c0: 0.0,
            rows: vec![
                ReplicationResult {
                    replication: 0,
                    seed: 1,
                    b: 1.0,
                    lambda: 0.5,
                    value: 0.6,
                    optimal_value: 0.7,
                    train_censoring: 0.74,
                    test_censoring: 0.74,
                },
                ReplicationResult {
                    replication: 1,
                    seed: 2,
                    b: 1.0,
                    lambda: 0.5,
                    value: 0.8,
                    optimal_value: 0.9,
                    train_censoring: 0.74,
                    test_censoring: 0.74,
                },
            ],
            skipped: vec![SkippedReplication {
                replication: 2,
                reason: "no fit".into(),
            }],
        };
        let t = report.table();
        assert!(t.contains("0.700(0.141)"), "{t}");
        assert!(t
            .lines()
            .last()
            .unwrap()
            .starts_with("skipped replication 2"));
        assert!(t.lines().next().unwrap().starts_with("Example"));
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }
}
