use std::f64::consts::PI;
use std::sync::Arc;

use kidppg::augment::{make_adversarial_example, make_high_hr_sample, LabeledFrame, Provenance, LABEL_RANGE};
use kidppg::signal::{band_power, dominant_frequency_bpm, Channel};
use kidppg::SampleFrame;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FS: f64 = 32.0;
const N: usize = 256;

fn harmonic(hr: f64, phase: f64, t0: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = t0 + i as f64 / FS;
            [1.0, 0.4, 0.2].iter().enumerate().map(|(k, a)| a * (2.0 * PI * (k + 1) as f64 * hr / 60.0 * t + phase * k as f64).sin()).sum()
        })
        .collect()
}

fn labeled(ppg: Vec<f64>, acc: [Vec<f64>; 3], t0: f64, hr: f64, context: Option<Arc<Channel>>) -> LabeledFrame {
    let f = SampleFrame { subject_id: "P".into(), index: 0, t0, fs: FS, ppg, acc, hr: Some(hr), activity: None };
    let mut lf = LabeledFrame::original(f.clone(), f, hr);
    lf.context = context;
    lf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn erasure_keeps_acc_time_and_draws_valid_labels(
        hr in 40.0..300.0f64,
        ppg in prop::collection::vec(-3.0..3.0f64, N),
        acc in [prop::collection::vec(-3.0..3.0f64, N), prop::collection::vec(-3.0..3.0f64, N), prop::collection::vec(-3.0..3.0f64, N)],
        t0 in 0.0..1e4f64,
        seed in any::<u64>(),
    ) {
        let lf = labeled(ppg, acc, t0, hr, None);
        let out = make_adversarial_example(&lf, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&out.frame.acc, &lf.frame.acc);
        prop_assert_eq!(&out.prev.acc, &lf.prev.acc);
        prop_assert_eq!(out.frame.t0.to_bits(), t0.to_bits());
        prop_assert_eq!(out.frame.ppg.len(), N);
        prop_assert_eq!(out.provenance, Provenance::Adversarial);
        prop_assert!(out.hr_label >= LABEL_RANGE.0 && out.hr_label < LABEL_RANGE.1);
    }

    #[test]
    fn erasure_removes_99_percent_at_harmonics(hr in 45.0..200.0f64, phase in 0.0..6.28f64, start in 10usize..60) {
        let t0 = start as f64 * 2.0;
        let ctx = Arc::new(Channel::new(harmonic(hr, phase, 0.0, 200 * FS as usize), FS, 0.0).unwrap());
        let lf = labeled(harmonic(hr, phase, t0, N), std::array::from_fn(|_| vec![0.0; N]), t0, hr, Some(ctx));
        let out = make_adversarial_example(&lf, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for k in 1..=3 {
            let c = k as f64 * hr;
            if (c + 2.5) / 60.0 >= FS / 2.0 {
                continue;
            }
            let before = band_power(&lf.frame.ppg, FS, c - 2.5, c + 2.5);
            let after = band_power(&out.frame.ppg, FS, c - 2.5, c + 2.5);
            prop_assert!(after <= 0.01 * before, "band {k}: {after} vs {before}");
        }
    }

    #[test]
    fn speed_up_doubles_a_tone(hr in 40.0..149.9f64, phase in 0.0..6.28f64) {
        let t0 = 40.0;
        let tone = |t0: f64, n: usize| -> Vec<f64> { (0..n).map(|i| (2.0 * PI * hr / 60.0 * (t0 + i as f64 / FS) + phase).sin()).collect() };
        let ctx = Arc::new(Channel::new(tone(0.0, 120 * FS as usize), FS, 0.0).unwrap());
        let lf = labeled(tone(t0, N), std::array::from_fn(|_| vec![0.0; N]), t0, hr, Some(ctx));
        let out = make_high_hr_sample(&lf).unwrap().unwrap();
        let bin = FS / (4.0 * N as f64) * 60.0;
        prop_assert_eq!(out.frame.ppg.len(), N);
        prop_assert_eq!(out.hr_label, 2.0 * hr);
        prop_assert!((dominant_frequency_bpm(&out.frame.ppg, FS, (40.0, 300.0)).unwrap() - 2.0 * hr).abs() <= bin);
    }

    #[test]
    fn speed_up_labels_stay_in_range(hr in 40.0..300.0f64) {
        let lf = labeled(harmonic(hr.min(150.0), 0.0, 0.0, N), std::array::from_fn(|_| vec![0.0; N]), 0.0, hr, None);
        match make_high_hr_sample(&lf).unwrap() {
            Some(out) => prop_assert!(out.hr_label < LABEL_RANGE.1 && hr < 150.0),
            None => prop_assert!(hr >= 150.0),
        }
    }
}
