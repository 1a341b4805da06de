use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use relvar::mi::{
    adaptive_partition, mutual_information, pearson_correlation, rank_transform, MiConfig, ScalarSeries,
};

fn correlated(rho: f64, n: usize, seed: u64) -> (ScalarSeries, ScalarSeries) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        x.push(a);
        y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    (ScalarSeries::new(x).unwrap(), ScalarSeries::new(y).unwrap())
}

fn map(s: &ScalarSeries, f: impl Fn(f64) -> f64) -> ScalarSeries {
    ScalarSeries::new(s.values().iter().map(|&v| f(v)).collect()).unwrap()
}

fn arb_pair() -> impl Strategy<Value = (ScalarSeries, ScalarSeries)> {
    (-0.95f64..0.95, 64usize..1500, any::<u64>()).prop_map(|(rho, n, seed)| correlated(rho, n, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn swap_symmetry((x, y) in arb_pair()) {
        let cfg = MiConfig::default();
        let a = mutual_information(&x, &y, &cfg).unwrap();
        let b = mutual_information(&y, &x, &cfg).unwrap();
        prop_assert_eq!(a.mi_nats.to_bits(), b.mi_nats.to_bits());
        prop_assert_eq!(a.raw_mi.to_bits(), b.raw_mi.to_bits());
        prop_assert!((a.pearson - b.pearson).abs() <= 1e-15);
    }

    #[test]
    fn monotone_maps_leave_mi_unchanged((x, y) in arb_pair()) {
        let cfg = MiConfig::default();
        let base = mutual_information(&x, &y, &cfg).unwrap();
        let scaled_x = map(&x, |v| v.exp());
        let cubed_y = map(&y, |v| v * v * v);
        let t = mutual_information(&scaled_x, &cubed_y, &cfg).unwrap();
        prop_assert_eq!(base.mi_nats.to_bits(), t.mi_nats.to_bits());
        let affine = mutual_information(&map(&x, |v| 3.0 * v - 7.0), &y, &cfg).unwrap();
        prop_assert_eq!(base.mi_nats.to_bits(), affine.mi_nats.to_bits());
    }

    #[test]
    fn partition_tiles_the_square((x, y) in arb_pair()) {
        let cfg = MiConfig::default();
        let p = adaptive_partition(&x, &y, &cfg).unwrap();
        let total: usize = p.terminal_cells().map(|c| c.count).sum();
        prop_assert_eq!(total, x.len());
        let area: f64 = p.terminal_cells().map(|c| p.width_x(c) * p.width_y(c)).sum();
        prop_assert!((area - 1.0).abs() <= 1e-9);
        for cell in p.cells() {
            if let Some(children) = cell.children {
                let sum: usize = children.iter().map(|&i| p.cells()[i].count).sum();
                prop_assert_eq!(sum, cell.count);
                prop_assert!(cell.count >= cfg.min_cell_count);
            }
        }
    }

    #[test]
    fn scores_are_bounded((x, y) in arb_pair()) {
        let s = mutual_information(&x, &y, &MiConfig::default()).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s.pearson));
        prop_assert!((0.0..1.0).contains(&s.delta));
        prop_assert!(s.mi_nats >= 0.0);
        let rho = pearson_correlation(&x, &y).unwrap();
        prop_assert_eq!(rho, s.pearson);
    }

    #[test]
    fn rank_transform_is_order_preserving(values in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let s = ScalarSeries::new(values.clone()).unwrap();
        let r = rank_transform(&s);
        let n = values.len() as f64;
        for i in 0..values.len() {
            prop_assert!(r.values()[i] > 0.0 && r.values()[i] < 1.0);
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(r.values()[i] < r.values()[j]);
                }
            }
        }
        let mut sorted: Vec<f64> = r.values().to_vec();
        sorted.sort_by(f64::total_cmp);
        for (k, v) in sorted.iter().enumerate() {
            prop_assert_eq!(*v, (k as f64 + 0.5) / n);
        }
    }
}

#[test]
fn nonlinear_dependence_exceeds_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v * v + 0.1 * e
        })
        .collect();
    let s = mutual_information(
        &ScalarSeries::new(x).unwrap(),
        &ScalarSeries::new(y).unwrap(),
        &MiConfig::default(),
    )
    .unwrap();
    assert!(s.pearson.abs() < 0.1, "rho {}", s.pearson);
    assert!(s.mi_nats > 0.5, "mi {}", s.mi_nats);
}

#[test]
fn errors_name_the_problem() {
    let cfg = MiConfig::default();
    let x = ScalarSeries::new(vec![1.0; 100]).unwrap();
    let y = ScalarSeries::new((0..100).map(f64::from).collect()).unwrap();
    assert!(mutual_information(&x, &y, &cfg).is_err());
    let short = ScalarSeries::new((0..99).map(f64::from).collect()).unwrap();
    assert!(mutual_information(&short, &y, &cfg).is_err());
    assert!(ScalarSeries::new(vec![1.0, f64::NAN]).is_err());
}
