use kidppg::ma_filter::{predict_artifact, remove_artifacts, train_mix_filter, AdaptHyperParams, AdaptPair, MixFilterModel};
use kidppg::signal::{correlation, window_stream, WindowConfig};
use kidppg::synth::{gen_session, scenario_spec, Scenario};
use kidppg::SampleFrame;
use proptest::prelude::*;

fn axes(n: usize) -> impl Strategy<Value = [Vec<f64>; 3]> {
    [
        prop::collection::vec(-5.0..5.0f64, n),
        prop::collection::vec(-5.0..5.0f64, n),
        prop::collection::vec(-5.0..5.0f64, n),
    ]
}

fn close(a: &[f64], b: &[f64]) -> bool {
    let scale = a.iter().chain(b).fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn filter_is_linear_and_bias_free(
        (x, y) in (30usize..300).prop_flat_map(|n| (axes(n), axes(n))),
        a in -3.0..3.0f64,
        seed in any::<u64>(),
    ) {
        let m = MixFilterModel::init(21, 1, 0.1, seed).unwrap();
        let zero: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; x[0].len()]);
        prop_assert!(predict_artifact(&m, &zero).unwrap().iter().all(|v| *v == 0.0));
        let px = predict_artifact(&m, &x).unwrap();
        let py = predict_artifact(&m, &y).unwrap();
        let scaled: [Vec<f64>; 3] = std::array::from_fn(|i| x[i].iter().map(|v| a * v).collect());
        let sum: [Vec<f64>; 3] = std::array::from_fn(|i| x[i].iter().zip(&y[i]).map(|(p, q)| p + q).collect());
        let want_scaled: Vec<f64> = px.iter().map(|v| a * v).collect();
        let want_sum: Vec<f64> = px.iter().zip(&py).map(|(p, q)| p + q).collect();
        prop_assert!(close(&predict_artifact(&m, &scaled).unwrap(), &want_scaled));
        prop_assert!(close(&predict_artifact(&m, &sum).unwrap(), &want_sum));
    }

    #[test]
    fn cleaning_leaves_acc_and_time_alone(acc in axes(256), ppg in prop::collection::vec(-5.0..5.0f64, 256), t0 in 0.0..1e4f64, seed in any::<u64>()) {
        let f = SampleFrame { subject_id: "P".into(), index: 3, t0, fs: 32.0, ppg, acc, hr: Some(80.0), activity: Some("walk".into()) };
        let m = MixFilterModel::init(21, 1, 0.05, seed).unwrap();
        let c = remove_artifacts(&m, &f).unwrap();
        prop_assert_eq!(&c.acc, &f.acc);
        prop_assert_eq!(c.t0.to_bits(), f.t0.to_bits());
        prop_assert_eq!(c.fs, f.fs);
        prop_assert_eq!((c.index, &c.hr, &c.activity), (f.index, &f.hr, &f.activity));
    }
}

#[test]
fn recovers_twenty_planted_filters() {
    for seed in 100..120u64 {
        let s = gen_session(&scenario_spec(Scenario::MaOffband, "P", 70.0, seed), seed).unwrap();
        let frames = window_stream(&s.session, &WindowConfig::default()).unwrap();
        let pairs: Vec<AdaptPair> = frames.iter().map(AdaptPair::from).collect();
        let fit = train_mix_filter(&pairs, &AdaptHyperParams::default(), seed).unwrap();
        let acc: [Vec<f64>; 3] = ["acc_x", "acc_y", "acc_z"].map(|n| s.session.channels[n].samples.clone());
        let r = correlation(&predict_artifact(&fit.model, &acc).unwrap(), &s.truth.artifact);
        assert!(r >= 0.95, "seed {seed}: correlation {r}");
    }
}
