//! Inverse-propensity-weighted Kaplan-Meier values of a regime, with hard
//! agreement indicators or the logistic surrogate.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TimeGrid};
use crate::error::{DtrError, Result};
use crate::geometry::{PolicySet, Regime};
use crate::propensity::{joint_propensity, Propensity};

/// Lower clamp applied to each hazard complement before taking logs.
pub const FACTOR_FLOOR: f64 = 1e-10;

/// Logistic surrogate `l(u) = 1 / (1 + exp(-b (u - u0)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub b: f64,
    pub u0: f64,
}

impl SurrogateParams {
    pub fn new(b: f64, u0: f64) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() || !u0.is_finite() {
            return Err(DtrError::InvalidInput(format!(
                "surrogate needs finite b > 0 and finite u0, got b = {b}, u0 = {u0}"
            )));
        }
        Ok(Self { b, u0 })
    }
}

pub fn logistic(u: f64, sp: SurrogateParams) -> f64 {
    sigmoid(sp.b * (u - sp.u0))
}

/// `(l(u), l'(u))`.
pub fn logistic_with_derivative(u: f64, sp: SurrogateParams) -> (f64, f64) {
    let l = logistic(u, sp);
    (l, sp.b * l * (1.0 - l))
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(z))` without underflow.
#[inline]
pub(crate) fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Per-subject inputs that do not change with the policy.
#[derive(Debug, Clone)]
pub(crate) struct SubjectCache {
    pub time: f64,
    /// Stages whose weights can ever be needed: `min(m(Y), m_g)`.
    pub levels: usize,
    /// `H_j` for `j = 1..=levels`.
    pub histories: Vec<Vec<f64>>,
    pub treatments: Vec<usize>,
    /// `1 / p(A_1..A_m | H_m)` for `m = 1..=levels`.
    pub inv_prop: Vec<f64>,
    /// Number of grid points `t_s <= Y`.
    pub last_point: usize,
    /// Grid index `s` (1-based) with `t_s = Y`, for observed failures.
    pub event_point: Option<usize>,
}

/// Subjects, propensities and the risk-set structure of one grid.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub(crate) k: usize,
    pub(crate) m_g: usize,
    pub(crate) subjects: Vec<SubjectCache>,
    /// Subject indices sorted by observed time.
    order: Vec<usize>,
    /// `m(t_{s-1})` for `s = 1..=g`.
    pub(crate) levels: Vec<usize>,
    /// First position in `order` with `Y >= t_s`.
    risk_start: Vec<usize>,
    /// Subjects failing exactly at `t_s`.
    events: Vec<Vec<usize>>,
}

impl PreparedSample {
    pub fn new(data: &Dataset, grid: &TimeGrid, prop: &dyn Propensity) -> Result<Self> {
        let m_g = grid.decision_stages();
        let points = grid.points();
        let mut subjects = Vec::with_capacity(data.len());
        for traj in data.trajectories() {
            let levels = traj.n_stages().min(m_g);
            let mut histories = Vec::with_capacity(levels);
            let mut inv_prop = Vec::with_capacity(levels);
            for m in 1..=levels {
                histories.push(traj.history_vector(m)?.0);
                let joint = joint_propensity(prop, traj, m)?;
                if !(joint > 0.0) {
                    return Err(DtrError::NonPositivePropensity(traj.id.clone()));
                }
                inv_prop.push(1.0 / joint);
            }
            let last_point = points.partition_point(|&t| t <= traj.time);
            let event_point = (traj.event && last_point > 0 && points[last_point - 1] == traj.time)
                .then_some(last_point);
            subjects.push(SubjectCache {
                time: traj.time,
                levels,
                histories,
                treatments: traj
                    .stages
                    .iter()
                    .take(levels)
                    .map(|s| s.treatment)
                    .collect(),
                inv_prop,
                last_point,
                event_point,
            });
        }
        let mut order: Vec<usize> = (0..subjects.len()).collect();
        order.sort_by(|&a, &b| {
            subjects[a]
                .time
                .total_cmp(&subjects[b].time)
                .then(a.cmp(&b))
        });
        let levels = (1..=grid.len()).map(|s| grid.stage_at(s - 1)).collect();
        let risk_start = points
            .iter()
            .map(|&t| order.partition_point(|&i| subjects[i].time < t))
            .collect();
        let mut events = vec![Vec::new(); grid.len()];
        for (i, subj) in subjects.iter().enumerate() {
            if let Some(s) = subj.event_point {
                events[s - 1].push(i);
            }
        }
        Ok(Self {
            k: data.k(),
            m_g,
            subjects,
            order,
            levels,
            risk_start,
            events,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn decision_stages(&self) -> usize {
        self.m_g
    }

    pub fn grid_len(&self) -> usize {
        self.levels.len()
    }

    /// Weighted product-limit value from per-subject, per-level weights
    /// (`weights[i][m - 1]` for `m = 1..=levels_i`).
    pub(crate) fn km_from_weights(&self, weights: &[Vec<f64>]) -> KmOutcome {
        let n = self.subjects.len();
        // suffix sums over time-sorted subjects, one array per level
        let mut suffix = vec![vec![0.0; n + 1]; self.m_g];
        for (m, arr) in suffix.iter_mut().enumerate() {
            for pos in (0..n).rev() {
                let i = self.order[pos];
                let w = weights[i].get(m).copied().unwrap_or(0.0);
                arr[pos] = arr[pos + 1] + w;
            }
        }
        let g = self.levels.len();
        let mut out = KmOutcome {
            value: 1.0,
            numerators: vec![0.0; g],
            denominators: vec![0.0; g],
            factors: vec![1.0; g],
        };
        for s in 0..g {
            let m = self.levels[s];
            let d = suffix[m - 1][self.risk_start[s]];
            let num: f64 = self.events[s].iter().map(|&i| weights[i][m - 1]).sum();
            out.numerators[s] = num;
            out.denominators[s] = d;
            if d > 0.0 {
                out.factors[s] = 1.0 - num / d;
            }
        }
        let mut value = out.factors.iter().product::<f64>();
        if !(0.0..=1.0).contains(&value) {
            warn!("weighted Kaplan-Meier value {value} clamped to [0, 1]");
            value = value.clamp(0.0, 1.0);
        }
        out.value = value;
        out
    }

    /// Hard per-level weights: all-stage agreement indicator over `p`.
    pub(crate) fn hard_level_weights(
        &self,
        data: &Dataset,
        regime: &dyn Regime,
    ) -> Result<Vec<Vec<f64>>> {
        data.trajectories()
            .iter()
            .zip(&self.subjects)
            .map(|(traj, subj)| {
                let mut agree = true;
                let mut w = Vec::with_capacity(subj.levels);
                for m in 1..=subj.levels {
                    agree &= regime.decide(traj, m)? == subj.treatments[m - 1];
                    w.push(if agree { subj.inv_prop[m - 1] } else { 0.0 });
                }
                Ok(w)
            })
            .collect()
    }
}

/// Result of a weighted product-limit evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct KmOutcome {
    pub value: f64,
    /// `sum_i w_i(s-1) I(Y_i = t_s) Delta_i`.
    pub numerators: Vec<f64>,
    /// `sum_i w_i(s-1) I(Y_i >= t_s)`; zero marks a skipped factor.
    pub denominators: Vec<f64>,
    /// `1 - N_s / D_s`, or 1 when `D_s = 0`.
    pub factors: Vec<f64>,
}

impl KmOutcome {
    /// Per-factor hazards `N_s / D_s` (0 for skipped factors).
    pub fn hazards(&self) -> Vec<f64> {
        self.factors.iter().map(|f| 1.0 - f).collect()
    }
}

/// `w̄_i(s)` for every subject: agreement with `regime` at stages
/// `1..=m(t_s)` over the joint propensity. Subjects who exit before stage
/// `m(t_s)` get 0; they are never at risk where this weight is used.
pub fn hard_weights(
    data: &Dataset,
    regime: &dyn Regime,
    prop: &dyn Propensity,
    grid: &TimeGrid,
    s: usize,
) -> Result<Vec<f64>> {
    let stage = grid.stage_at(s);
    data.trajectories()
        .iter()
        .map(|traj| {
            if traj.n_stages() < stage {
                return Ok(0.0);
            }
            for m in 1..=stage {
                if regime.decide(traj, m)? != traj.stages[m - 1].treatment {
                    return Ok(0.0);
                }
            }
            let joint = joint_propensity(prop, traj, stage)?;
            if !(joint > 0.0) {
                return Err(DtrError::NonPositivePropensity(traj.id.clone()));
            }
            Ok(1.0 / joint)
        })
        .collect()
}

/// `w_i(s)`: the agreement indicators of [`hard_weights`] replaced by
/// `l(<V_{A_ij}, f_j(H_ij)>)`.
pub fn smooth_weights(
    data: &Dataset,
    policy: &PolicySet,
    sp: SurrogateParams,
    prop: &dyn Propensity,
    grid: &TimeGrid,
    s: usize,
) -> Result<Vec<f64>> {
    let stage = grid.stage_at(s);
    data.trajectories()
        .iter()
        .map(|traj| {
            if traj.n_stages() < stage {
                return Ok(0.0);
            }
            let mut w = 1.0;
            for m in 1..=stage {
                let h = traj.history_vector(m)?;
                let f = policy.evaluate_policy(h.as_slice(), m)?;
                w *= logistic(policy.code().score(traj.stages[m - 1].treatment, &f), sp);
            }
            let joint = joint_propensity(prop, traj, stage)?;
            if !(joint > 0.0) {
                return Err(DtrError::NonPositivePropensity(traj.id.clone()));
            }
            Ok(w / joint)
        })
        .collect()
}

/// `S̄(t_g) = prod_s {1 - sum_i w̄_i(s-1) I(Y_i = t_s) Δ_i / sum_i w̄_i(s-1) I(Y_i >= t_s)}`.
pub fn km_value_hard(
    data: &Dataset,
    regime: &dyn Regime,
    prop: &dyn Propensity,
    grid: &TimeGrid,
) -> Result<f64> {
    let prep = PreparedSample::new(data, grid, prop)?;
    km_value_hard_prepared(&prep, data, regime)
}

/// [`km_value_hard`] on an already prepared sample (must come from `data`).
pub fn km_value_hard_prepared(
    prep: &PreparedSample,
    data: &Dataset,
    regime: &dyn Regime,
) -> Result<f64> {
    let weights = prep.hard_level_weights(data, regime)?;
    Ok(prep.km_from_weights(&weights).value)
}

/// Smooth counterpart of [`km_value_hard`] with the per-factor details.
pub fn km_value_smooth(
    data: &Dataset,
    policy: &PolicySet,
    sp: SurrogateParams,
    prop: &dyn Propensity,
    grid: &TimeGrid,
) -> Result<KmOutcome> {
    let prep = PreparedSample::new(data, grid, prop)?;
    if policy.m_g() < prep.m_g {
        return Err(DtrError::InvalidInput(format!(
            "policy covers {} stages, grid needs {}",
            policy.m_g(),
            prep.m_g
        )));
    }
    let theta = policy.to_flat();
    let pass = SmoothPass::compute(&prep, policy.code(), sp, &theta, policy.p());
    Ok(prep.km_from_weights(&pass.weights))
}

/// Surrogate factors and level weights for one parameter vector. Weights at
/// each level are rescaled by a common constant, which leaves every hazard
/// ratio unchanged and keeps them away from underflow.
pub(crate) struct SmoothPass {
    /// `b (1 - l(u_ij))` per subject and stage.
    pub dlog_l: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl SmoothPass {
    pub fn compute(
        prep: &PreparedSample,
        code: &crate::geometry::SimplexCode,
        sp: SurrogateParams,
        theta: &[f64],
        p: usize,
    ) -> Self {
        let rows = prep.k - 1;
        let offsets = stage_offsets(p, prep.k, prep.m_g);
        let mut dlog_l = Vec::with_capacity(prep.len());
        let mut log_w = Vec::with_capacity(prep.len());
        let mut f = vec![0.0; rows];
        let mut level_max = vec![f64::NEG_INFINITY; prep.m_g];
        for subj in &prep.subjects {
            let mut d = Vec::with_capacity(subj.levels);
            let mut lw = Vec::with_capacity(subj.levels);
            let mut acc = 0.0;
            for j in 0..subj.levels {
                let h = &subj.histories[j];
                let dim = h.len();
                let block = &theta[offsets[j]..offsets[j + 1]];
                for (r, fr) in f.iter_mut().enumerate() {
                    let row = &block[r * (dim + 1)..(r + 1) * (dim + 1)];
                    *fr = crate::geometry::dot(&row[..dim], h) + row[dim];
                }
                let u = code.score(subj.treatments[j], &f);
                let z = sp.b * (u - sp.u0);
                acc += log_sigmoid(z);
                d.push(sp.b * sigmoid(-z));
                let v = acc + subj.inv_prop[j].ln();
                level_max[j] = level_max[j].max(v);
                lw.push(v);
            }
            dlog_l.push(d);
            log_w.push(lw);
        }
        let weights = log_w
            .into_iter()
            .map(|lw| {
                lw.into_iter()
                    .enumerate()
                    .map(|(j, v)| (v - level_max[j]).exp())
                    .collect()
            })
            .collect();
        Self { dlog_l, weights }
    }
}

/// Start of each stage block in the stacked parameter vector, plus the total.
pub(crate) fn stage_offsets(p: usize, k: usize, m_g: usize) -> Vec<usize> {
    let mut out = vec![0];
    for m in 1..=m_g {
        let last = *out.last().unwrap();
        out.push(last + (k - 1) * (crate::dataset::history_dim(p, m) + 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{StageLayout, StageRecord, Trajectory};
    use crate::geometry::{ConstantRegime, StageRule};
    use crate::propensity::UniformPropensity;

    fn sp(b: f64, u0: f64) -> SurrogateParams {
        SurrogateParams::new(b, u0).unwrap()
    }

    #[test]
    fn logistic_values() {
        assert_eq!(logistic(0.3, sp(2.0, 0.3)), 0.5);
        assert!((logistic(2.0, sp(1.0, 0.0)) - 0.8807970779778823).abs() < 1e-15);
        assert_eq!(logistic(1e6, sp(1.0, 0.0)), 1.0);
        assert!(logistic(-1e6, sp(1.0, 0.0)) >= 0.0);
        let (l, dl) = logistic_with_derivative(0.4, sp(3.0, -0.2));
        let h = 1e-6;
        let fd = (logistic(0.4 + h, sp(3.0, -0.2)) - logistic(0.4 - h, sp(3.0, -0.2))) / (2.0 * h);
        assert!((dl - fd).abs() < 1e-8);
        assert!(l > 0.5);
        assert!(SurrogateParams::new(0.0, 0.0).is_err());
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((log_sigmoid(2.0) - sigmoid(2.0).ln()).abs() < 1e-15);
    }

    fn one_stage(rows: &[(f64, bool, usize)], k: usize) -> Dataset {
        let trajectories = rows
            .iter()
            .enumerate()
            .map(|(i, &(t, e, a))| Trajectory {
                id: format!("{i:03}"),
                time: t,
                event: e,
                stages: vec![StageRecord {
                    stage: 1,
                    covariates: vec![1.0],
                    treatment: a,
                }],
            })
            .collect();
        Dataset::new(trajectories, k, StageLayout::uniform(1, 10.0).unwrap()).unwrap()
    }

    #[test]
    fn hand_computed_product() {
        let data = one_stage(&[(1.0, true, 1), (2.0, true, 1), (3.0, true, 1)], 2);
        let grid = TimeGrid::build(&data, 2.0).unwrap();
        let one = UniformPropensity { k: 1 };
        let v = km_value_hard(&data, &ConstantRegime(1), &one, &grid).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn no_failures_before_target() {
        let data = one_stage(&[(1.0, false, 1), (2.0, true, 2)], 2);
        let grid = TimeGrid::build(&data, 1.5).unwrap();
        let u = UniformPropensity { k: 2 };
        assert_eq!(
            km_value_hard(&data, &ConstantRegime(1), &u, &grid).unwrap(),
            1.0
        );
    }

    #[test]
    fn hard_weight_values() {
        let data = one_stage(&[(1.0, true, 1), (2.0, true, 2)], 3);
        let grid = TimeGrid::build(&data, 2.0).unwrap();
        let u = UniformPropensity { k: 3 };
        let w = hard_weights(&data, &ConstantRegime(1), &u, &grid, 0).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn two_stage_full_agreement_weight() {
        let layout = StageLayout::uniform(2, 1.0).unwrap();
        let rec = |m, a| StageRecord {
            stage: m,
            covariates: vec![0.0],
            treatment: a,
        };
        let data = Dataset::new(
            vec![
                Trajectory {
                    id: "a".into(),
                    time: 1.5,
                    event: true,
                    stages: vec![rec(1, 2), rec(2, 2)],
                },
                Trajectory {
                    id: "b".into(),
                    time: 1.8,
                    event: false,
                    stages: vec![rec(1, 2), rec(2, 1)],
                },
            ],
            3,
            layout,
        )
        .unwrap();
        let grid = TimeGrid::build(&data, 1.9).unwrap();
        let u = UniformPropensity { k: 3 };
        // s = 1 has t_1 = 1.5 in stage 2
        let w = hard_weights(&data, &ConstantRegime(2), &u, &grid, 1).unwrap();
        assert!((w[0] - 9.0).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn smooth_weights_at_zero_policy() {
        let data = one_stage(&[(1.0, true, 1), (2.0, true, 2), (2.5, false, 3)], 3);
        let grid = TimeGrid::build(&data, 2.0).unwrap();
        let u = UniformPropensity { k: 3 };
        let policy = PolicySet::zeros(1, 3, 1, data.layout().clone()).unwrap();
        let params = sp(2.0, -0.7);
        let w = smooth_weights(&data, &policy, params, &u, &grid, 0).unwrap();
        let l0 = 1.0 / (1.0 + (2.0f64 * -0.7).exp());
        assert!(l0 > 0.5);
        for wi in w {
            assert!((wi - 3.0 * l0).abs() < 1e-12);
        }
        // common weights cancel: (1 - 1/3)(1 - 1/2)
        let smooth = km_value_smooth(&data, &policy, params, &u, &grid).unwrap();
        assert!((smooth.value - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_surrogate_gives_inverse_propensity() {
        let data = one_stage(&[(1.0, true, 1)], 3);
        let grid = TimeGrid::build(&data, 2.0).unwrap();
        let rule = StageRule {
            coefficients: vec![vec![0.0]; 2],
            intercept: vec![1e3, 1e3],
        };
        let policy = PolicySet::from_rules(1, 3, data.layout().clone(), vec![rule]).unwrap();
        let w = smooth_weights(
            &data,
            &policy,
            sp(5.0, 0.0),
            &UniformPropensity { k: 3 },
            &grid,
            0,
        )
        .unwrap();
        assert!((w[0] - 3.0).abs() < 1e-12);
    }
}
