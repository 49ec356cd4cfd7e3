use survdtr::simbench::{simulate, Design};
use survdtr::{Dataset, StageLayout, StageRecord, Trajectory};

#[test]
fn directory_round_trip_is_lossless() {
    let (data, _) = simulate(&Design::example(4), 300, 0.0, 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write_dir(dir.path()).unwrap();
    let back = Dataset::read_dir(dir.path()).unwrap();
    assert_eq!(back.len(), data.len());
    assert_eq!(back.layout(), data.layout());
    for (a, b) in data.trajectories().iter().zip(back.trajectories()) {
        assert_eq!(a, b);
    }
}

#[test]
fn rejects_inconsistent_trajectories() {
    let layout = StageLayout::new(vec![0.0, 1.0]).unwrap();
    let rec = |stage, treatment| StageRecord {
        stage,
        covariates: vec![0.1, 0.2],
        treatment,
    };
    let ok = Trajectory {
        id: "a".into(),
        time: 1.5,
        event: true,
        stages: vec![rec(1, 1), rec(2, 2)],
    };
    assert!(Dataset::new(vec![ok.clone()], 2, layout.clone()).is_ok());

    let mut bad_treatment = ok.clone();
    bad_treatment.stages[1].treatment = 3;
    assert!(Dataset::new(vec![bad_treatment], 2, layout.clone()).is_err());

    let mut missing_stage = ok.clone();
    missing_stage.stages.pop();
    assert!(Dataset::new(vec![missing_stage], 2, layout.clone()).is_err());

    let mut bad_time = ok.clone();
    bad_time.time = -1.0;
    assert!(Dataset::new(vec![bad_time], 2, layout.clone()).is_err());

    assert!(Dataset::new(vec![ok.clone(), ok], 2, layout).is_err());
}
