//! Simplex treatment coding, the angle-based decision rule and linear
//! classification functions.

use serde::{Deserialize, Serialize};

use crate::dataset::{history_dim, StageLayout, Trajectory};
use crate::error::{DtrError, Result};

/// `K` unit vertices in `R^{K-1}` with equal pairwise angles.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexCode {
    vertices: Vec<Vec<f64>>,
}

impl SimplexCode {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(DtrError::InvalidInput(format!(
                "simplex coding needs K >= 2, got {k}"
            )));
        }
        let km1 = (k - 1) as f64;
        let kf = k as f64;
        let first = vec![km1.powf(-0.5); k - 1];
        let shift = -(1.0 + kf.sqrt()) / km1.powf(1.5);
        let scale = (kf / km1).sqrt();
        let mut vertices = Vec::with_capacity(k);
        vertices.push(first);
        for j in 0..k - 1 {
            let mut v = vec![shift; k - 1];
            v[j] += scale;
            vertices.push(v);
        }
        Ok(Self { vertices })
    }

    pub fn k(&self) -> usize {
        self.vertices.len()
    }

    /// Dimension `K - 1` of the score space.
    pub fn dim(&self) -> usize {
        self.vertices.len() - 1
    }

    /// Vertex for 1-based treatment `a`.
    pub fn vertex(&self, a: usize) -> &[f64] {
        &self.vertices[a - 1]
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    /// `<V_a, f>` for 1-based treatment `a`, without a length check.
    #[inline]
    pub fn score(&self, a: usize, f: &[f64]) -> f64 {
        dot(&self.vertices[a - 1], f)
    }

    /// `<V_A, f>` for every `A`.
    pub fn classify_scores(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(f)?;
        Ok(self.vertices.iter().map(|v| dot(v, f)).collect())
    }

    /// The treatment whose vertex makes the smallest angle with `f`; ties go
    /// to the smallest index.
    pub fn recommend(&self, f: &[f64]) -> Result<usize> {
        self.check_dim(f)?;
        Ok(self.argmax(f))
    }

    #[inline]
    pub(crate) fn argmax(&self, f: &[f64]) -> usize {
        let mut best = 1;
        let mut best_score = f64::NEG_INFINITY;
        for (i, v) in self.vertices.iter().enumerate() {
            let s = dot(v, f);
            if s > best_score {
                best = i + 1;
                best_score = s;
            }
        }
        best
    }

    fn check_dim(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(DtrError::DimensionMismatch {
                expected: self.dim(),
                got: f.len(),
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Anything that assigns a treatment to a subject at a stage.
pub trait Regime: Sync {
    fn decide(&self, traj: &Trajectory, stage: usize) -> Result<usize>;
}

/// Always the same treatment.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRegime(pub usize);

impl Regime for ConstantRegime {
    fn decide(&self, _traj: &Trajectory, _stage: usize) -> Result<usize> {
        Ok(self.0)
    }
}

/// Linear classification function `f_m(H_m) = Theta_m H_m + c_m` for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRule {
    /// `K - 1` rows of length `dim(H_m)`.
    pub coefficients: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
}

impl StageRule {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            coefficients: vec![vec![0.0; dim]; rows],
            intercept: vec![0.0; rows],
        }
    }

    pub fn dim(&self) -> usize {
        self.coefficients.first().map_or(0, Vec::len)
    }

    pub fn evaluate_into(&self, h: &[f64], out: &mut [f64]) {
        for ((o, row), c) in out.iter_mut().zip(&self.coefficients).zip(&self.intercept) {
            *o = dot(row, h) + c;
        }
    }
}

/// Per-stage linear rules for stages `1..=m_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDoc", into = "PolicyDoc")]
pub struct PolicySet {
    p: usize,
    code: SimplexCode,
    layout: StageLayout,
    stages: Vec<StageRule>,
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    p: usize,
    #[serde(rename = "K")]
    k: usize,
    m_g: usize,
    stage_boundaries: StageLayout,
    stages: Vec<StageRule>,
}

impl TryFrom<PolicyDoc> for PolicySet {
    type Error = DtrError;

    fn try_from(doc: PolicyDoc) -> Result<Self> {
        if doc.m_g != doc.stages.len() {
            return Err(DtrError::InvalidInput(format!(
                "m_g = {} but {} stage blocks given",
                doc.m_g,
                doc.stages.len()
            )));
        }
        Self::from_rules(doc.p, doc.k, doc.stage_boundaries, doc.stages)
    }
}

impl From<PolicySet> for PolicyDoc {
    fn from(ps: PolicySet) -> Self {
        Self {
            p: ps.p,
            k: ps.code.k(),
            m_g: ps.stages.len(),
            stage_boundaries: ps.layout,
            stages: ps.stages,
        }
    }
}

impl PolicySet {
    pub fn zeros(p: usize, k: usize, m_g: usize, layout: StageLayout) -> Result<Self> {
        let rules = (1..=m_g)
            .map(|m| StageRule::zeros(k - 1, history_dim(p, m)))
            .collect();
        Self::from_rules(p, k, layout, rules)
    }

    pub fn from_rules(
        p: usize,
        k: usize,
        layout: StageLayout,
        stages: Vec<StageRule>,
    ) -> Result<Self> {
        let code = SimplexCode::new(k)?;
        if stages.is_empty() {
            return Err(DtrError::InvalidInput(
                "policy needs at least one stage".into(),
            ));
        }
        for (i, rule) in stages.iter().enumerate() {
            let dim = history_dim(p, i + 1);
            if rule.coefficients.len() != k - 1 || rule.intercept.len() != k - 1 {
                return Err(DtrError::DimensionMismatch {
                    expected: k - 1,
                    got: rule.coefficients.len().min(rule.intercept.len()),
                });
            }
            for row in &rule.coefficients {
                if row.len() != dim {
                    return Err(DtrError::DimensionMismatch {
                        expected: dim,
                        got: row.len(),
                    });
                }
            }
            let finite = rule
                .coefficients
                .iter()
                .flatten()
                .chain(&rule.intercept)
                .all(|x| x.is_finite());
            if !finite {
                return Err(DtrError::InvalidInput(
                    "non-finite policy coefficient".into(),
                ));
            }
        }
        Ok(Self {
            p,
            code,
            layout,
            stages,
        })
    }

    /// Rebuilds from the stacked parameter vector (see [`PolicySet::to_flat`]).
    pub fn from_flat(
        p: usize,
        k: usize,
        m_g: usize,
        layout: StageLayout,
        theta: &[f64],
    ) -> Result<Self> {
        let expected = n_params(p, k, m_g);
        if theta.len() != expected {
            return Err(DtrError::DimensionMismatch {
                expected,
                got: theta.len(),
            });
        }
        let mut rules = Vec::with_capacity(m_g);
        let mut pos = 0;
        for m in 1..=m_g {
            let dim = history_dim(p, m);
            let mut rule = StageRule::zeros(k - 1, dim);
            for r in 0..k - 1 {
                rule.coefficients[r].copy_from_slice(&theta[pos..pos + dim]);
                rule.intercept[r] = theta[pos + dim];
                pos += dim + 1;
            }
            rules.push(rule);
        }
        Self::from_rules(p, k, layout, rules)
    }

    /// Stacked parameters: for each stage, for each of the `K - 1` rows, the
    /// `dim(H_m)` coefficients followed by the intercept.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(n_params(self.p, self.k(), self.m_g()));
        for rule in &self.stages {
            for (row, c) in rule.coefficients.iter().zip(&rule.intercept) {
                out.extend_from_slice(row);
                out.push(*c);
            }
        }
        out
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.code.k()
    }

    pub fn m_g(&self) -> usize {
        self.stages.len()
    }

    pub fn code(&self) -> &SimplexCode {
        &self.code
    }

    pub fn layout(&self) -> &StageLayout {
        &self.layout
    }

    pub fn stages(&self) -> &[StageRule] {
        &self.stages
    }

    /// `f_m(H_m)`.
    pub fn evaluate_policy(&self, h: &[f64], m: usize) -> Result<Vec<f64>> {
        let rule = self.rule(m)?;
        if h.len() != rule.dim() {
            return Err(DtrError::DimensionMismatch {
                expected: rule.dim(),
                got: h.len(),
            });
        }
        let mut out = vec![0.0; self.k() - 1];
        rule.evaluate_into(h, &mut out);
        Ok(out)
    }

    fn rule(&self, m: usize) -> Result<&StageRule> {
        if m == 0 || m > self.stages.len() {
            return Err(DtrError::InvalidInput(format!(
                "policy covers stages 1..={}, stage {m} requested",
                self.stages.len()
            )));
        }
        Ok(&self.stages[m - 1])
    }
}

/// Length of the stacked parameter vector.
pub fn n_params(p: usize, k: usize, m_g: usize) -> usize {
    (1..=m_g).map(|m| (k - 1) * (history_dim(p, m) + 1)).sum()
}

impl Regime for PolicySet {
    fn decide(&self, traj: &Trajectory, stage: usize) -> Result<usize> {
        let h = traj.history_vector(stage)?;
        let f = self.evaluate_policy(h.as_slice(), stage)?;
        Ok(self.code.argmax(&f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn k2_is_sign_coding() {
        let code = SimplexCode::new(2).unwrap();
        assert!((code.vertex(1)[0] - 1.0).abs() < TOL);
        assert!((code.vertex(2)[0] + 1.0).abs() < TOL);
        assert_eq!(code.recommend(&[0.0]).unwrap(), 1);
        assert_eq!(code.recommend(&[0.3]).unwrap(), 1);
        assert_eq!(code.recommend(&[-0.3]).unwrap(), 2);
    }

    #[test]
    fn k3_vertices_and_scores() {
        let code = SimplexCode::new(3).unwrap();
        let expect = [
            [0.7071067811865475, 0.7071067811865475],
            [0.25881904510252074, -0.9659258262890683],
            [-0.9659258262890683, 0.25881904510252074],
        ];
        for (v, e) in code.vertices().iter().zip(expect) {
            assert!((v[0] - e[0]).abs() < 1e-12 && (v[1] - e[1]).abs() < 1e-12);
        }
        let s = code.classify_scores(&[1.0, 0.0]).unwrap();
        assert!((s[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((s[1] - 0.25882).abs() < 1e-5);
        assert!((s[2] + 0.96593).abs() < 1e-5);
        assert_eq!(code.recommend(&[1.0, 0.0]).unwrap(), 1);
        assert_eq!(code.recommend(&[0.0, 0.0]).unwrap(), 1);
        assert!(code
            .classify_scores(&[0.0, 0.0])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        assert!(code.classify_scores(&[1.0]).is_err());
    }

    #[test]
    fn smallest_angle_wins() {
        let code = SimplexCode::new(3).unwrap();
        // rotate V_1 slightly; it stays closest to V_1
        let f = [0.8, 0.6];
        assert_eq!(code.recommend(&f).unwrap(), 1);
        for a in 1..=3 {
            let v = code.vertex(a).to_vec();
            assert_eq!(code.recommend(&v).unwrap(), a);
        }
    }

    #[test]
    fn simplex_rejects_k1() {
        assert!(SimplexCode::new(1).is_err());
    }

    #[test]
    fn flat_round_trip_and_evaluation() {
        let layout = StageLayout::uniform(2, 0.5).unwrap();
        let n = n_params(2, 3, 2);
        assert_eq!(n, 2 * 3 + 2 * 6);
        let theta: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let ps = PolicySet::from_flat(2, 3, 2, layout.clone(), &theta).unwrap();
        assert_eq!(ps.to_flat(), theta);
        let f = ps.evaluate_policy(&[1.0, -1.0], 1).unwrap();
        // row 0: 0.0*1 + 0.1*(-1) + 0.2; row 1: 0.3 - 0.4 + 0.5
        assert!((f[0] - 0.1).abs() < 1e-12);
        assert!((f[1] - 0.4).abs() < 1e-12);
        assert!(ps.evaluate_policy(&[1.0], 1).is_err());
        assert!(ps.evaluate_policy(&[1.0, 2.0], 3).is_err());
        assert!(PolicySet::from_flat(2, 3, 2, layout, &theta[1..]).is_err());
    }

    #[test]
    fn zero_coefficients_yield_intercept() {
        let layout = StageLayout::uniform(1, 0.5).unwrap();
        let rule = StageRule {
            coefficients: vec![vec![0.0; 3]; 2],
            intercept: vec![0.5, -2.0],
        };
        let ps = PolicySet::from_rules(3, 3, layout, vec![rule]).unwrap();
        assert_eq!(
            ps.evaluate_policy(&[4.0, 5.0, 6.0], 1).unwrap(),
            vec![0.5, -2.0]
        );
    }

    #[test]
    fn json_shape() {
        let layout = StageLayout::uniform(2, 0.5).unwrap();
        let ps = PolicySet::zeros(1, 3, 2, layout).unwrap();
        let json = serde_json::to_value(&ps).unwrap();
        assert_eq!(json["K"], 3);
        assert_eq!(json["m_g"], 2);
        assert_eq!(json["stage_boundaries"], serde_json::json!([0.0, 0.5]));
        assert_eq!(
            json["stages"][1]["coefficients"][0]
                .as_array()
                .unwrap()
                .len(),
            3
        );
        let back: PolicySet = serde_json::from_value(json.clone()).unwrap();
        assert_eq!(back, ps);
        let mut broken = json;
        broken["m_g"] = 3.into();
        assert!(serde_json::from_value::<PolicySet>(broken).is_err());
    }
}
