use proptest::prelude::*;

use relvar::data::{clean, read_csv, synth_generate, Column, Dataset, Generator, Provenance, SynthSpec};
use relvar::mi::{pearson_correlation, ScalarSeries};

fn dataset(cols: Vec<(&str, Vec<f64>)>) -> Dataset {
    Dataset::new(
        cols.into_iter()
            .map(|(name, values)| Column { name: name.into(), values })
            .collect(),
        Provenance::default(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_export_round_trips(values in prop::collection::vec((-1e12f64..1e12, -1e-6f64..1e-6), 1..50)) {
        let (a, b): (Vec<f64>, Vec<f64>) = values.into_iter().unzip();
        let d = dataset(vec![("a", a), ("b", b)]);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &["a", "b"]).unwrap();
        prop_assert_eq!(back.columns(), d.columns());
        prop_assert_eq!(back.content_hash(), d.content_hash());
    }

    #[test]
    fn clean_is_idempotent(values in prop::collection::vec(prop_oneof![Just(-9999.0), Just(f64::NAN), -10f64..10.0], 2..60)) {
        let half = values.len() / 2;
        let d = dataset(vec![("a", values[..half].to_vec()), ("b", values[half..2 * half].to_vec())]);
        if let Ok((once, _)) = clean(&d, &[-9999.0, -999.0], None) {
            let (twice, report) = clean(&once, &[-9999.0, -999.0], None).unwrap();
            prop_assert_eq!(twice.columns(), once.columns());
            prop_assert_eq!(report.dropped(), 0);
        }
    }
}

#[test]
fn irrelevant_features_are_uncorrelated_with_target() {
    let d = synth_generate(&SynthSpec {
        n_features: 6,
        generator: Generator::SinMix(1, 3, 5),
        noise_sigma: 0.05,
        n_rows: 5_000,
        seed: 12,
    })
    .unwrap();
    let target = ScalarSeries::new(d.column(SynthSpec::TARGET).unwrap().to_vec()).unwrap();
    for name in ["x2", "x4", "x6"] {
        let x = ScalarSeries::new(d.column(name).unwrap().to_vec()).unwrap();
        let rho = pearson_correlation(&x, &target).unwrap();
        assert!(rho.abs() < 0.05, "{name}: {rho}");
    }
    for name in ["x1", "x3", "x5"] {
        let x = d.column(name).unwrap();
        assert!(x.iter().all(|v| (0.0..1.0).contains(v)));
    }
}

#[test]
fn synthetic_export_is_deterministic() {
    let spec = SynthSpec {
        n_features: 3,
        generator: "affine:0.5,1=2,3=-1".parse().unwrap(),
        noise_sigma: 0.1,
        n_rows: 100,
        seed: 8,
    };
    let write = || {
        let mut buf = Vec::new();
        synth_generate(&spec).unwrap().write_csv(&mut buf).unwrap();
        buf
    };
    assert_eq!(write(), write());
}
