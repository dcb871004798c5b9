mod common;

use epiflow_core::dynamics::step_window;
use epiflow_core::forecast::{predict_m_step, rolling_evaluate, DayGains};
use epiflow_core::learning::learn_gains;
use epiflow_core::{BetaSource, BlendedGains, ForecastConfig, ForecastMode, GainMode, LearnOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gains_for(series: &epiflow_core::PandemicSeries, k: usize, n: usize) -> DayGains {
    let opts = LearnOptions::with_n_tau(n);
    DayGains {
        quarantined: Some(learn_gains(series, k, GainMode::Quarantined, &opts).unwrap().tensor),
        interstate: Some(
            learn_gains(
                series,
                k,
                GainMode::Interstate,
                &LearnOptions {
                    fit_days: Some(2 * n),
                    ..opts
                },
            )
            .unwrap()
            .tensor,
        ),
    }
}

#[test]
fn multi_step_equals_explicit_recursion() {
    let planted = epiflow_core::synth::interstate(2, 3, 40, 6).unwrap();
    let s = &planted.series;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = common::random_tensor(&mut rng, 2, 3, GainMode::Quarantined);
    let f = common::random_tensor(&mut rng, 2, 3, GainMode::Interstate);
    let gains = DayGains {
        quarantined: Some(q.clone()),
        interstate: Some(f.clone()),
    };
    let blend = BlendedGains::new(&q, &f, 0.4).unwrap();
    let run = predict_m_step(s, 30, 3, &gains, ForecastMode::Blended, &BetaSource::Fixed(0.4)).unwrap();
    let mut w = s.window(30, 3).unwrap();
    for m in 1..=3 {
        w = step_window(&w, &blend).unwrap();
        let want: Vec<f64> = w.newest_states().iter().flat_map(|x| x.to_array()).collect();
        let got: Vec<f64> = run.at(m).iter().flat_map(|x| x.to_array()).collect();
        let tol = if m == 1 { 1e-12 } else { 1e-10 };
        assert!(common::rel_diff(&got, &want) <= tol, "m = {m}");
    }
}

#[test]
fn national_aggregate_path_commutes_for_one_region() {
    let planted = epiflow_core::synth::quarantined(3, 3, 50, 2).unwrap();
    let agg = planted.series.aggregate("US");
    let cfg = ForecastConfig::new(ForecastMode::Quarantined, LearnOptions::with_n_tau(3));
    let report = rolling_evaluate(&agg, 10..=40, &[1, 2], &cfg).unwrap();
    // With one region there is no separate national row; the region row is
    // the national figure and its errors come from the summed series.
    assert!(report.rows.iter().all(|r| r.scope == "US"));
    for r in &report.rows {
        let actual = agg.totals(0, r.k + r.horizon).unwrap().to_array()[r.channel.index()];
        assert_eq!(r.actual, actual);
    }
}

#[test]
fn report_is_independent_of_thread_count() {
    let planted = epiflow_core::synth::quarantined(3, 4, 60, 9).unwrap();
    let cfg = ForecastConfig::new(ForecastMode::Quarantined, LearnOptions::with_n_tau(4));
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| rolling_evaluate(&planted.series, 8..=55, &[1, 3], &cfg).unwrap())
    };
    let one = run(1);
    let four = run(4);
    let mut a = Vec::new();
    let mut b = Vec::new();
    one.write_csv(&mut a).unwrap();
    four.write_csv(&mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn relearning_matches_frozen_gains_on_exact_data() {
    let planted = epiflow_core::synth::quarantined(2, 3, 50, 3).unwrap();
    let mut cfg = ForecastConfig::new(ForecastMode::Quarantined, LearnOptions::with_n_tau(3));
    let frozen = rolling_evaluate(&planted.series, 10..=40, &[1, 2, 3], &cfg).unwrap();
    cfg.relearn_each_step = true;
    let relearned = rolling_evaluate(&planted.series, 10..=40, &[1, 2, 3], &cfg).unwrap();
    for (a, b) in frozen.rows.iter().zip(&relearned.rows) {
        assert!((a.predicted - b.predicted).abs() <= 1e-6 * a.actual.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forecasts_never_look_ahead(seed in 0u64..1000, k0 in 12usize..30, m in 1usize..=3) {
        let planted = epiflow_core::synth::interstate(2, 3, 40, seed).unwrap();
        let full = &planted.series;
        let cut = full.truncate(k0).unwrap();
        let beta = BetaSource::Fixed(0.3);
        let a = predict_m_step(full, k0, m, &gains_for(full, k0, 3), ForecastMode::Blended, &beta).unwrap();
        let b = predict_m_step(&cut, k0, m, &gains_for(&cut, k0, 3), ForecastMode::Blended, &beta).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn over_prediction_has_positive_error(p in 1.0f64..1e6, a in 1.0f64..1e6) {
        let e = epiflow_core::forecast::relative_error(p, a).unwrap();
        prop_assert_eq!(e > 0.0, p > a);
    }
}
