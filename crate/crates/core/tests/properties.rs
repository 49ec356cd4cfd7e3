use proptest::prelude::*;

use survdtr::simbench::{simulate, Design, RandomRegime};
use survdtr::{
    history_dim, kfold_split, km_value_hard, logistic, Dataset, Propensity, Regime, SimplexCode,
    SurrogateParams, TimeGrid, Trajectory, UniformPropensity,
};

struct Scaled<'a> {
    inner: &'a dyn Propensity,
    factor: f64,
}

impl Propensity for Scaled<'_> {
    fn stage_probability(&self, traj: &Trajectory, stage: usize) -> survdtr::Result<f64> {
        Ok(self.factor * self.inner.stage_probability(traj, stage)?)
    }
}

fn sample(example: u8, n: usize, seed: u64) -> Dataset {
    simulate(&Design::example(example), n, 0.0, seed).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simplex_vertices_are_equiangular(k in 2usize..12) {
        let code = SimplexCode::new(k).unwrap();
        let target = -1.0 / (k as f64 - 1.0);
        for a in 1..=k {
            let va = code.vertex(a);
            prop_assert!((va.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            for b in (a + 1)..=k {
                let dot: f64 = va.iter().zip(code.vertex(b)).map(|(x, y)| x * y).sum();
                prop_assert!((dot - target).abs() < 1e-12);
            }
            prop_assert_eq!(code.recommend(va).unwrap(), a);
        }
        for j in 0..k - 1 {
            let s: f64 = (1..=k).map(|a| code.vertex(a)[j]).sum();
            prop_assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn recommendation_maximizes_inner_product(f in prop::collection::vec(-5.0f64..5.0, 3)) {
        let code = SimplexCode::new(4).unwrap();
        let pick = code.recommend(&f).unwrap();
        let scores = code.classify_scores(&f).unwrap();
        prop_assert!(scores.iter().all(|&s| s <= scores[pick - 1]));
    }

    #[test]
    fn histories_nest_across_stages(example in 1u8..=4, seed in any::<u64>()) {
        let data = sample(example, 40, seed);
        let p = data.p();
        for traj in data.trajectories() {
            for m in 1..=traj.n_stages() {
                let h = traj.history_vector(m).unwrap();
                prop_assert_eq!(h.len(), history_dim(p, m));
                prop_assert_eq!(&h.as_slice()[m * p..], &traj.stages[..m - 1].iter().map(|r| r.treatment as f64).collect::<Vec<_>>()[..]);
                if m > 1 {
                    let prev = traj.history_vector(m - 1).unwrap();
                    prop_assert_eq!(&h.as_slice()[..(m - 1) * p], &prev.as_slice()[..(m - 1) * p]);
                }
            }
            prop_assert!(traj.history_vector(traj.n_stages() + 1).is_err());
        }
    }

    #[test]
    fn km_value_is_a_probability_and_ignores_propensity_scale(
        example in 1u8..=4,
        seed in any::<u64>(),
        factor in 0.05f64..20.0,
        target in 0.6f64..2.1,
    ) {
        let data = sample(example, 60, seed);
        let grid = match TimeGrid::build(&data, target) {
            Ok(g) => g,
            Err(_) => return Ok(()),
        };
        let regime = RandomRegime { k: 3, seed };
        let base = UniformPropensity { k: 3 };
        let v = km_value_hard(&data, &regime, &base, &grid).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let scaled = Scaled { inner: &base, factor };
        let w = km_value_hard(&data, &regime, &scaled, &grid).unwrap();
        prop_assert!((v - w).abs() < 1e-10, "{} vs {}", v, w);
    }

    #[test]
    fn kfold_is_a_balanced_partition(n in 2usize..300, d in 2usize..10, seed in any::<u64>()) {
        prop_assume!(n >= d);
        let folds = kfold_split(n, d, seed).unwrap();
        prop_assert_eq!(folds.len(), d);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(folds, kfold_split(n, d, seed).unwrap());
    }

    #[test]
    fn surrogate_is_monotone_in_unit_interval(b in 0.01f64..50.0, u0 in -3.0f64..3.0, u in -10.0f64..10.0, du in 0.0f64..5.0) {
        let sp = SurrogateParams::new(b, u0).unwrap();
        let (lo, hi) = (logistic(u, sp), logistic(u + du, sp));
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(lo <= hi);
        prop_assert!((logistic(u0, sp) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_regime_is_deterministic(seed in any::<u64>()) {
        let data = sample(2, 20, seed);
        let regime = RandomRegime { k: 3, seed };
        for traj in data.trajectories() {
            let a = regime.decide(traj, 1).unwrap();
            prop_assert!((1..=3).contains(&a));
            prop_assert_eq!(a, regime.decide(traj, 1).unwrap());
        }
    }
}
