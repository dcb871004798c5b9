use chrono::NaiveDate;
use epiflow_core::timeseries::{ingest_reader, Channel, CleaningMode, IngestOptions};
use epiflow_core::{PandemicSeries, RegionRegistry, StackedState, StateVector};
use proptest::prelude::*;

fn series_strategy() -> impl Strategy<Value = PandemicSeries> {
    (1usize..=4, 2usize..=12).prop_flat_map(|(r, days)| {
        prop::collection::vec((0.0f64..1e7, 0.0f64..1e5, 0.0f64..1e6), r * days).prop_map(move |v| {
            let totals = v.into_iter().map(|(t, d, rec)| StateVector::new(t, d, rec)).collect();
            let registry = RegionRegistry::from_codes((0..r).map(|i| format!("R{i}"))).unwrap();
            PandemicSeries::new(
                registry,
                NaiveDate::from_ymd_opt(2020, 3, 12).unwrap(),
                days,
                totals,
                false,
            )
            .unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(s in series_strategy()) {
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = ingest_reader(buf.as_slice(), &IngestOptions::default()).unwrap();
        prop_assert_eq!(&back.series, &s);
        prop_assert_eq!(back.series.content_hash(), s.content_hash());
    }

    #[test]
    fn raw_increments_sum_back_to_totals(s in series_strategy()) {
        let inc = s.increments(CleaningMode::Raw).unwrap();
        for i in 0..s.regions() {
            for c in Channel::ALL {
                let first = s.totals(i, 1).unwrap().to_array()[c.index()];
                let mut acc = first;
                for k in 2..=s.days() {
                    acc += inc.get(i, k).unwrap()[c.index()];
                    let want = s.totals(i, k).unwrap().to_array()[c.index()];
                    prop_assert!((acc - want).abs() <= 1e-9 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn clamped_increments_are_nonnegative(s in series_strategy()) {
        let inc = s.increments(CleaningMode::ClampNonnegative).unwrap();
        for i in 0..s.regions() {
            for k in 2..=s.days() {
                prop_assert!(inc.get(i, k).unwrap().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn stacking_round_trips(s in series_strategy(), n in 1usize..=4) {
        prop_assume!(s.days() >= n);
        let w = s.window(s.days(), n).unwrap();
        let y = StackedState::stack(&w);
        prop_assert_eq!(y.unstack(), w.clone());
        for i in 0..s.regions() {
            prop_assert_eq!(y.newest(i), s.totals(i, s.days()).unwrap());
        }
    }

    #[test]
    fn aggregate_is_the_regional_sum(s in series_strategy()) {
        let agg = s.aggregate("ALL");
        prop_assert_eq!(agg.regions(), 1);
        for k in 1..=s.days() {
            let sum = (0..s.regions()).fold(StateVector::zero(), |acc, i| acc + s.totals(i, k).unwrap());
            prop_assert_eq!(agg.totals(0, k).unwrap(), sum);
        }
    }

    #[test]
    fn truncation_keeps_the_prefix(s in series_strategy(), cut in 1usize..=12) {
        prop_assume!(cut <= s.days());
        let t = s.truncate(cut).unwrap();
        for i in 0..s.regions() {
            prop_assert_eq!(t.trajectory(i), &s.trajectory(i)[..cut]);
        }
    }
}
