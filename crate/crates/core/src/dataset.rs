//! Longitudinal right-censored data: subjects, stage records, the stage
//! layout `m(t)`, history vectors and the event-time grid.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DtrError, Result};

/// One decision stage of one subject: covariates collected before the
/// decision and the treatment assigned at its start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// 1-based stage index.
    pub stage: usize,
    pub covariates: Vec<f64>,
    /// 1-based treatment label.
    pub treatment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    /// `min(T, C)`.
    pub time: f64,
    /// `true` when the failure was observed.
    pub event: bool,
    /// Stages `1..=m(time)`, in order.
    pub stages: Vec<StageRecord>,
}

impl Trajectory {
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// `H_m = (X_1, ..., X_m, A_1, ..., A_{m-1})`.
    pub fn history_vector(&self, m: usize) -> Result<HistoryVector> {
        let mut buf = Vec::new();
        self.write_history(m, &mut buf)?;
        Ok(HistoryVector(buf))
    }

    /// Writes `H_m` into `buf` (cleared first).
    pub fn write_history(&self, m: usize, buf: &mut Vec<f64>) -> Result<()> {
        if m == 0 || m > self.stages.len() {
            return Err(DtrError::InvalidInput(format!(
                "subject {}: history for stage {m} requested but {} stages recorded",
                self.id,
                self.stages.len()
            )));
        }
        buf.clear();
        for rec in &self.stages[..m] {
            buf.extend_from_slice(&rec.covariates);
        }
        for rec in &self.stages[..m - 1] {
            buf.push(rec.treatment as f64);
        }
        Ok(())
    }
}

/// Accrued information up to a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryVector(pub Vec<f64>);

impl HistoryVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Dimension of `H_m` for `p` covariates per stage.
pub fn history_dim(p: usize, m: usize) -> usize {
    m * p + m.saturating_sub(1)
}

/// Stage start times. Stage `m` covers `[b_m, b_{m+1})`; the last stage is
/// open-ended for observed times, but target times must not pass
/// `b_M + (b_M - b_{M-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StageLayout {
    starts: Vec<f64>,
}

impl StageLayout {
    pub fn new(starts: Vec<f64>) -> Result<Self> {
        if starts.first() != Some(&0.0) {
            return Err(DtrError::InvalidInput(
                "stage boundaries must start at 0".into(),
            ));
        }
        if starts.iter().any(|b| !b.is_finite()) || starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DtrError::InvalidInput(
                "stage boundaries must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { starts })
    }

    /// Equal-width stages `0, w, 2w, ...`.
    pub fn uniform(n_stages: usize, width: f64) -> Result<Self> {
        Self::new((0..n_stages).map(|m| m as f64 * width).collect())
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn n_stages(&self) -> usize {
        self.starts.len()
    }

    /// `m(t)`: 1-based index of the stage containing `t`.
    pub fn stage_of(&self, t: f64) -> usize {
        self.starts.partition_point(|&b| b <= t).max(1)
    }

    /// Latest admissible target time.
    pub fn horizon(&self) -> f64 {
        match self.starts.len() {
            1 => f64::INFINITY,
            n => 2.0 * self.starts[n - 1] - self.starts[n - 2],
        }
    }
}

impl TryFrom<Vec<f64>> for StageLayout {
    type Error = DtrError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<StageLayout> for Vec<f64> {
    fn from(l: StageLayout) -> Self {
        l.starts
    }
}

/// Schema information that the CSV files do not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataLayout {
    pub stage_boundaries: StageLayout,
    /// Number of treatment categories `K`.
    pub treatments: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    p: usize,
    k: usize,
    layout: StageLayout,
}

impl Dataset {
    /// Validates and wraps trajectories. Order is preserved.
    pub fn new(trajectories: Vec<Trajectory>, k: usize, layout: StageLayout) -> Result<Self> {
        if k < 2 {
            return Err(DtrError::InvalidInput(format!("K = {k} < 2")));
        }
        let p = trajectories
            .first()
            .and_then(|t| t.stages.first())
            .map(|s| s.covariates.len())
            .ok_or_else(|| DtrError::InvalidInput("empty dataset".into()))?;
        if p == 0 {
            return Err(DtrError::InvalidInput("no covariates".into()));
        }
        let mut seen = HashSet::new();
        for traj in &trajectories {
            if !seen.insert(traj.id.as_str()) {
                return Err(DtrError::InvalidInput(format!(
                    "duplicate subject id {}",
                    traj.id
                )));
            }
            validate_trajectory(traj, p, k, &layout)?;
        }
        Ok(Self {
            trajectories,
            p,
            k,
            layout,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layout(&self) -> &StageLayout {
        &self.layout
    }

    pub fn data_layout(&self) -> DataLayout {
        DataLayout {
            stage_boundaries: self.layout.clone(),
            treatments: self.k,
        }
    }

    /// Sub-sample in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let trajectories = indices
            .iter()
            .map(|&i| self.trajectories[i].clone())
            .collect();
        Self::new(trajectories, self.k, self.layout.clone())
    }

    /// Fraction of censored subjects.
    pub fn censoring_rate(&self) -> f64 {
        let censored = self.trajectories.iter().filter(|t| !t.event).count();
        censored as f64 / self.len() as f64
    }

    /// Writes `subjects.csv`, `stages.csv` and `layout.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_long_csv(self, &dir.join("subjects.csv"), &dir.join("stages.csv"))?;
        let f = BufWriter::new(File::create(dir.join("layout.json"))?);
        serde_json::to_writer_pretty(f, &self.data_layout())?;
        Ok(())
    }

    /// Reads a directory written by [`Dataset::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let layout: DataLayout = serde_json::from_reader(File::open(dir.join("layout.json"))?)?;
        load_long_csv(&dir.join("subjects.csv"), &dir.join("stages.csv"), &layout)
    }
}

fn validate_trajectory(traj: &Trajectory, p: usize, k: usize, layout: &StageLayout) -> Result<()> {
    if !traj.time.is_finite() || traj.time < 0.0 {
        return Err(DtrError::InvalidInput(format!(
            "subject {}: observed time {} is not a nonnegative real",
            traj.id, traj.time
        )));
    }
    let exit_stage = layout.stage_of(traj.time);
    for (pos, rec) in traj.stages.iter().enumerate() {
        if rec.stage != pos + 1 {
            return Err(DtrError::MissingStage {
                id: traj.id.clone(),
                stage: pos + 1,
            });
        }
        if rec.covariates.len() != p {
            return Err(DtrError::DimensionMismatch {
                expected: p,
                got: rec.covariates.len(),
            });
        }
        if rec.covariates.iter().any(|x| !x.is_finite()) {
            return Err(DtrError::InvalidInput(format!(
                "subject {}: non-finite covariate at stage {}",
                traj.id, rec.stage
            )));
        }
        if rec.treatment == 0 || rec.treatment > k {
            return Err(DtrError::TreatmentOutOfRange {
                id: traj.id.clone(),
                treatment: rec.treatment as i64,
                k,
            });
        }
    }
    match traj.stages.len() {
        n if n < exit_stage => Err(DtrError::MissingStage {
            id: traj.id.clone(),
            stage: n + 1,
        }),
        n if n > exit_stage => Err(DtrError::InvalidInput(format!(
            "subject {}: stage {n} recorded after exit at stage {exit_stage}",
            traj.id
        ))),
        _ => Ok(()),
    }
}

/// Fixed-width float formatting used by every CSV writer (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(path: &Path, line: u64, message: impl Into<String>) -> DtrError {
    DtrError::Csv {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, 0, e.to_string()))
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T> {
    let raw = record
        .get(idx)
        .ok_or_else(|| csv_err(path, line, format!("missing column {name}")))?;
    raw.parse()
        .map_err(|_| csv_err(path, line, format!("column {name}: cannot parse {raw:?}")))
}

/// Loads the two-file long format: `subjects.csv` with `id,time,event` and
/// `stages.csv` with `id,stage,treatment,x1..xp`. Trajectories are ordered
/// by id.
pub fn load_long_csv(
    subjects_path: &Path,
    stages_path: &Path,
    layout: &DataLayout,
) -> Result<Dataset> {
    let mut subjects: BTreeMap<String, (f64, bool)> = BTreeMap::new();
    let mut rdr = open_csv(subjects_path)?;
    let headers = rdr
        .headers()
        .map_err(|e| csv_err(subjects_path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "time", "event"] {
        return Err(csv_err(subjects_path, 1, "expected header id,time,event"));
    }
    for (row, rec) in rdr.records().enumerate() {
        let line = row as u64 + 2;
        let rec = rec.map_err(|e| csv_err(subjects_path, line, e.to_string()))?;
        let id = rec[0].to_string();
        let time: f64 = parse_field(subjects_path, line, &rec, 1, "time")?;
        let event = match &rec[2] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(csv_err(
                    subjects_path,
                    line,
                    format!("event must be 0 or 1, got {other:?}"),
                ))
            }
        };
        if subjects.insert(id.clone(), (time, event)).is_some() {
            return Err(csv_err(subjects_path, line, format!("duplicate id {id}")));
        }
    }

    let mut rdr = open_csv(stages_path)?;
    let headers = rdr
        .headers()
        .map_err(|e| csv_err(stages_path, 1, e.to_string()))?
        .clone();
    let p = headers.len().saturating_sub(3);
    let expected: Vec<String> = ["id", "stage", "treatment"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=p).map(|j| format!("x{j}")))
        .collect();
    if p == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(csv_err(
            stages_path,
            1,
            "expected header id,stage,treatment,x1,...,xp",
        ));
    }
    let mut stages: BTreeMap<String, BTreeMap<usize, StageRecord>> = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row as u64 + 2;
        let rec = rec.map_err(|e| csv_err(stages_path, line, e.to_string()))?;
        let id = rec[0].to_string();
        if !subjects.contains_key(&id) {
            return Err(csv_err(stages_path, line, format!("unknown subject {id}")));
        }
        let stage: usize = parse_field(stages_path, line, &rec, 1, "stage")?;
        if stage == 0 {
            return Err(csv_err(stages_path, line, "stage indices start at 1"));
        }
        let treatment: i64 = parse_field(stages_path, line, &rec, 2, "treatment")?;
        if treatment < 1 || treatment as usize > layout.treatments {
            return Err(DtrError::TreatmentOutOfRange {
                id,
                treatment,
                k: layout.treatments,
            });
        }
        let covariates = (0..p)
            .map(|j| parse_field(stages_path, line, &rec, 3 + j, &expected[3 + j]))
            .collect::<Result<Vec<f64>>>()?;
        let per_subject = stages.entry(id.clone()).or_default();
        let record = StageRecord {
            stage,
            covariates,
            treatment: treatment as usize,
        };
        if per_subject.insert(stage, record).is_some() {
            return Err(DtrError::DuplicateStage { id, stage });
        }
    }

    let mut trajectories = Vec::with_capacity(subjects.len());
    for (id, (time, event)) in subjects {
        let recorded = stages.remove(&id).unwrap_or_default();
        let exit_stage = layout.stage_boundaries.stage_of(time);
        let mut recs = Vec::with_capacity(recorded.len());
        for (m, rec) in recorded {
            if m != recs.len() + 1 {
                return Err(DtrError::MissingStage {
                    id,
                    stage: recs.len() + 1,
                });
            }
            recs.push(rec);
        }
        if recs.len() < exit_stage {
            return Err(DtrError::MissingStage {
                id,
                stage: recs.len() + 1,
            });
        }
        trajectories.push(Trajectory {
            id,
            time,
            event,
            stages: recs,
        });
    }
    Dataset::new(
        trajectories,
        layout.treatments,
        layout.stage_boundaries.clone(),
    )
}

pub fn write_long_csv(data: &Dataset, subjects_path: &Path, stages_path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(subjects_path)?);
    writeln!(out, "id,time,event")?;
    for t in data.trajectories() {
        writeln!(out, "{},{},{}", t.id, fmt_f64(t.time), u8::from(t.event))?;
    }
    out.flush()?;

    let mut out = BufWriter::new(File::create(stages_path)?);
    write!(out, "id,stage,treatment")?;
    for j in 1..=data.p() {
        write!(out, ",x{j}")?;
    }
    writeln!(out)?;
    for t in data.trajectories() {
        for rec in &t.stages {
            write!(out, "{},{},{}", t.id, rec.stage, rec.treatment)?;
            for x in &rec.covariates {
                write!(out, ",{}", fmt_f64(*x))?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Event-time grid `t_1 < ... < t_g` with `t_g` the target; `t_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    stage_of: Vec<usize>,
}

impl TimeGrid {
    /// Distinct observed failure times strictly before `target`, then `target`.
    pub fn build(data: &Dataset, target: f64) -> Result<Self> {
        if !target.is_finite() || target <= 0.0 {
            return Err(DtrError::InvalidInput(format!(
                "target time {target} must be positive"
            )));
        }
        let horizon = data.layout().horizon();
        if target > horizon {
            return Err(DtrError::InvalidInput(format!(
                "target time {target} lies beyond the last stage (ends at {horizon})"
            )));
        }
        let mut points: Vec<f64> = data
            .trajectories()
            .iter()
            .filter(|t| t.event && t.time < target)
            .map(|t| t.time)
            .collect();
        points.sort_by(f64::total_cmp);
        points.dedup();
        points.push(target);
        let stage_of = points.iter().map(|&t| data.layout().stage_of(t)).collect();
        Ok(Self { points, stage_of })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Number of grid points `g`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn target(&self) -> f64 {
        *self.points.last().expect("grid always holds the target")
    }

    /// `m(t_s)` for `s = 0..=g`, with `m(t_0) = 1`.
    pub fn stage_at(&self, s: usize) -> usize {
        if s == 0 {
            1
        } else {
            self.stage_of[s - 1]
        }
    }

    /// `m_g = m(t_{g-1})`: number of stages whose decisions affect survival at the target.
    pub fn decision_stages(&self) -> usize {
        self.stage_at(self.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: &str, time: f64, event: bool, stages: &[(Vec<f64>, usize)]) -> Trajectory {
        Trajectory {
            id: id.into(),
            time,
            event,
            stages: stages
                .iter()
                .enumerate()
                .map(|(i, (x, a))| StageRecord {
                    stage: i + 1,
                    covariates: x.clone(),
                    treatment: *a,
                })
                .collect(),
        }
    }

    #[test]
    fn stage_of_interval_membership() {
        let layout = StageLayout::new(vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(layout.stage_of(0.7), 2);
        assert_eq!(layout.stage_of(0.0), 1);
        assert_eq!(layout.stage_of(0.5), 2);
        assert_eq!(layout.stage_of(7.0), 3);
        assert_eq!(layout.horizon(), 1.5);
    }

    #[test]
    fn layout_rejects_bad_boundaries() {
        assert!(StageLayout::new(vec![0.1, 0.5]).is_err());
        assert!(StageLayout::new(vec![0.0, 0.5, 0.5]).is_err());
        assert!(StageLayout::new(vec![]).is_err());
    }

    #[test]
    fn grid_distinct_event_times() {
        let layout = StageLayout::uniform(3, 0.5).unwrap();
        let data = Dataset::new(
            vec![
                traj("a", 0.3, true, &[(vec![0.0], 1)]),
                traj("b", 0.3, true, &[(vec![0.0], 1)]),
                traj("c", 0.9, true, &[(vec![0.0], 1), (vec![0.0], 2)]),
                traj("d", 0.5, false, &[(vec![0.0], 1), (vec![0.0], 2)]),
            ],
            2,
            layout,
        )
        .unwrap();
        let grid = TimeGrid::build(&data, 1.4).unwrap();
        assert_eq!(grid.points(), &[0.3, 0.9, 1.4]);
        assert_eq!(grid.stage_at(0), 1);
        assert_eq!(grid.stage_at(2), 2);
        assert_eq!(grid.stage_at(3), 3);
        assert_eq!(grid.decision_stages(), 2);

        let grid = TimeGrid::build(&data, 0.2).unwrap();
        assert_eq!(grid.points(), &[0.2]);
        assert_eq!(grid.decision_stages(), 1);

        assert!(TimeGrid::build(&data, 0.0).is_err());
        assert!(TimeGrid::build(&data, 1.6).is_err());
    }

    #[test]
    fn history_concatenation() {
        let t = traj("a", 0.7, false, &[(vec![1.0, 2.0], 3), (vec![3.0, 4.0], 1)]);
        assert_eq!(t.history_vector(1).unwrap().0, vec![1.0, 2.0]);
        assert_eq!(
            t.history_vector(2).unwrap().0,
            vec![1.0, 2.0, 3.0, 4.0, 3.0]
        );
        assert!(t.history_vector(3).is_err());
        assert!(t.history_vector(0).is_err());
        assert_eq!(history_dim(2, 2), 5);
    }

    #[test]
    fn dataset_rejects_gaps_and_overruns() {
        let layout = StageLayout::uniform(3, 0.5).unwrap();
        let short = traj("a", 1.2, true, &[(vec![0.0], 1), (vec![0.0], 1)]);
        match Dataset::new(vec![short], 3, layout.clone()) {
            Err(DtrError::MissingStage { stage, .. }) => assert_eq!(stage, 3),
            other => panic!("unexpected {other:?}"),
        }
        let long = traj("a", 0.2, true, &[(vec![0.0], 1), (vec![0.0], 1)]);
        assert!(Dataset::new(vec![long], 3, layout.clone()).is_err());
        let bad_arm = traj("a", 0.2, true, &[(vec![0.0], 4)]);
        assert!(matches!(
            Dataset::new(vec![bad_arm], 3, layout),
            Err(DtrError::TreatmentOutOfRange { .. })
        ));
    }
}
