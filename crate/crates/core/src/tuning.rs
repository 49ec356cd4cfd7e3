//! d-fold cross-validation over `(b, lambda)`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, Dataset, TimeGrid};
use crate::error::{DtrError, Result};
use crate::estimator::{km_value_hard, km_value_smooth, PreparedSample, SurrogateParams};
use crate::optimizer::{compute_cq_prepared, fit_prepared, FitConfig};
use crate::propensity::PropensityLookup;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub b_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    #[serde(default = "default_folds")]
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    /// Validation estimator; the hard indicator version unless set.
    #[serde(default)]
    pub metric: ValidationMetric,
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    #[default]
    Hard,
    Smooth,
}

impl TuningGrid {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.b_values.is_empty() || self.lambda_values.is_empty() {
            return Err(DtrError::InvalidInput("tuning grid is empty".into()));
        }
        if self
            .b_values
            .iter()
            .chain(&self.lambda_values)
            .any(|v| !(*v > 0.0))
        {
            return Err(DtrError::InvalidInput(
                "tuning grid values must be positive".into(),
            ));
        }
        if self.d < 2 || self.d > n {
            return Err(DtrError::InvalidInput(format!(
                "fold count {} must lie in 2..={n}",
                self.d
            )));
        }
        Ok(())
    }

    /// All `(b, lambda)` pairs, `b` varying slowest.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.b_values
            .iter()
            .flat_map(|&b| self.lambda_values.iter().map(move |&l| (b, l)))
            .collect()
    }
}

/// Random partition of `0..n` into `d` folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, d: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if d == 0 || n < d {
        return Err(DtrError::InvalidInput(format!(
            "cannot split {n} subjects into {d} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / d + 1); d];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % d].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub b: f64,
    pub lambda: f64,
    pub fold: usize,
    /// `None` when the fold was skipped.
    pub score: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub b: f64,
    pub lambda: f64,
    pub best_score: f64,
    /// Average over non-skipped folds for every pair, in grid order.
    pub averages: Vec<(f64, f64, Option<f64>)>,
    pub folds: Vec<FoldScore>,
}

impl CvOutcome {
    /// `b,lambda,fold,score,skipped` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "b,lambda,fold,score,skipped")?;
        for f in &self.folds {
            let score = f.score.map(fmt_f64).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                fmt_f64(f.b),
                fmt_f64(f.lambda),
                f.fold + 1,
                score,
                u8::from(f.score.is_none())
            )?;
        }
        Ok(())
    }
}

struct FoldData {
    train: Dataset,
    valid: Dataset,
    grid: TimeGrid,
    valid_grid: TimeGrid,
    prop: PropensityLookup,
    prep: PreparedSample,
    c_q: f64,
}

fn prepare_fold(
    data: &Dataset,
    folds: &[Vec<usize>],
    r: usize,
    base: &FitConfig,
) -> Result<FoldData> {
    let valid_idx = &folds[r];
    let train_idx: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != r)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    let train = data.subset(&train_idx)?;
    let valid = data.subset(valid_idx)?;
    let grid = TimeGrid::build(&train, base.target_time)?;
    if grid.len() < 2 {
        return Err(DtrError::InvalidInput(
            "no failures before the target time in the training folds".into(),
        ));
    }
    let valid_grid = TimeGrid::build(&valid, base.target_time)?;
    let prop = PropensityLookup::resolve(&base.propensity, &train, grid.decision_stages())?;
    let prep = PreparedSample::new(&train, &grid, &prop)?;
    let c_q = compute_cq_prepared(&prep, &grid, base.cbar)?;
    Ok(FoldData {
        train,
        valid,
        grid,
        valid_grid,
        prop,
        prep,
        c_q,
    })
}

/// Picks the `(b, lambda)` pair maximizing the mean validation survival
/// estimate at the target time. Ties go to the larger `lambda`, then the
/// smaller `b`.
pub fn cross_validate(data: &Dataset, grid: &TuningGrid, base: &FitConfig) -> Result<CvOutcome> {
    grid.validate(data.len())?;
    base.validate()?;
    // fold membership must not depend on the input row order
    let mut by_id: Vec<usize> = (0..data.len()).collect();
    by_id.sort_by(|&a, &b| data.trajectories()[a].id.cmp(&data.trajectories()[b].id));
    let folds: Vec<Vec<usize>> = kfold_split(data.len(), grid.d, grid.seed)?
        .into_iter()
        .map(|f| f.into_iter().map(|pos| by_id[pos]).collect())
        .collect();

    let prepared: Vec<std::result::Result<FoldData, String>> = (0..grid.d)
        .into_par_iter()
        .map(|r| prepare_fold(data, &folds, r, base).map_err(|e| e.to_string()))
        .collect();
    let pairs = grid.pairs();
    let tasks: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|g| (0..grid.d).map(move |r| (g, r)))
        .collect();
    let scores: Vec<FoldScore> = tasks
        .par_iter()
        .map(|&(g, r)| {
            let (b, lambda) = pairs[g];
            let outcome = match &prepared[r] {
                Err(e) => Err(e.clone()),
                Ok(fold) => {
                    score_fold(fold, b, lambda, base, grid.metric).map_err(|e| e.to_string())
                }
            };
            let (score, note) = match outcome {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e)),
            };
            FoldScore {
                b,
                lambda,
                fold: r,
                score,
                note,
            }
        })
        .collect();

    let mut averages = Vec::with_capacity(pairs.len());
    let mut best: Option<(f64, f64, f64)> = None;
    for (g, &(b, lambda)) in pairs.iter().enumerate() {
        let vals: Vec<f64> = scores[g * grid.d..(g + 1) * grid.d]
            .iter()
            .filter_map(|f| f.score)
            .collect();
        let avg = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        averages.push((b, lambda, avg));
        if let Some(avg) = avg {
            let better = match best {
                None => true,
                Some((bb, bl, bs)) => {
                    avg > bs || (avg == bs && (lambda > bl || (lambda == bl && b < bb)))
                }
            };
            if better {
                best = Some((b, lambda, avg));
            }
        }
    }
    let (b, lambda, best_score) = best.ok_or(DtrError::AllFoldsSkipped)?;
    Ok(CvOutcome {
        b,
        lambda,
        best_score,
        averages,
        folds: scores,
    })
}

fn score_fold(
    fold: &FoldData,
    b: f64,
    lambda: f64,
    base: &FitConfig,
    metric: ValidationMetric,
) -> Result<f64> {
    let config = FitConfig {
        b,
        lambda,
        ..base.clone()
    };
    let fit = fit_prepared(&fold.prep, fold.c_q, &fold.train, &config)?;
    match metric {
        ValidationMetric::Hard => {
            km_value_hard(&fold.valid, &fit.policy, &fold.prop, &fold.valid_grid)
        }
        ValidationMetric::Smooth => {
            let sp = SurrogateParams::new(b, fit.u0)?;
            Ok(km_value_smooth(&fold.valid, &fit.policy, sp, &fold.prop, &fold.valid_grid)?.value)
        }
    }
    .map_err(|e| {
        DtrError::InvalidInput(format!(
            "validation on {} subjects (grid of {}): {e}",
            fold.valid.len(),
            fold.grid.len()
        ))
    })
}
