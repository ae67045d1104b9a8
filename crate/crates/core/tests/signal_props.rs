use kidppg::ingest::{ActivityInterval, HrPoint, ACC_CHANNELS, PPG_CHANNEL};
use kidppg::signal::{design_bandstop, design_lowpass, dft_forward, resample, window_stream, Channel, WindowConfig};
use kidppg::SessionRecording;
use proptest::prelude::*;

fn signal(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0..100.0f64, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parseval(x in signal(600)) {
        let s = dft_forward(&x).unwrap();
        let et: f64 = x.iter().map(|v| v * v).sum();
        let ef: f64 = s.bins.iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
        prop_assert!((et - ef).abs() <= 1e-6 * et.max(1e-300));
    }

    #[test]
    fn dft_is_linear(
        xy in (1usize..400).prop_flat_map(|n| (prop::collection::vec(-10.0..10.0f64, n), prop::collection::vec(-10.0..10.0f64, n))),
        a in -5.0..5.0f64,
        b in -5.0..5.0f64,
    ) {
        let (x, y) = xy;
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (sx, sy, sm) = (dft_forward(&x).unwrap(), dft_forward(&y).unwrap(), dft_forward(&mix).unwrap());
        for k in 0..x.len() {
            prop_assert!((sm.bins[k] - (a * sx.bins[k] + b * sy.bins[k])).norm() <= 1e-9);
        }
    }

    #[test]
    fn fir_designs_are_exactly_symmetric(lo in 0.2..10.0f64, width in 0.05..4.0f64, half in 2usize..100) {
        let taps = 2 * half + 1;
        let hi = (lo + width).min(15.9);
        for f in [design_bandstop(32.0, lo, hi, taps).unwrap(), design_lowpass(32.0, hi, taps).unwrap()] {
            let t = &f.taps;
            prop_assert_eq!(t.len(), taps);
            for i in 0..taps {
                prop_assert_eq!(t[i].to_bits(), t[taps - 1 - i].to_bits());
            }
        }
    }

    #[test]
    fn window_count_formula(
        len32 in 0usize..3000,
        win in prop::sample::select(vec![2.0, 4.0, 8.0, 10.0]),
        stride in prop::sample::select(vec![0.5, 1.0, 2.0, 3.0, 8.0]),
    ) {
        let mut s = SessionRecording::new("P");
        let ch = |n: usize, fs: f64| Channel { samples: (0..n).map(|i| (i as f64).sin()).collect(), fs, t0: 0.0, units: "au".into() };
        s.channels.insert(PPG_CHANNEL.into(), ch(2 * len32 + 2, 64.0));
        for a in ACC_CHANNELS {
            s.channels.insert(a.into(), ch(len32 + 1, 32.0));
        }
        s.hr_track = vec![HrPoint { t: 0.0, bpm: 60.0 }];
        s.activity_track = vec![ActivityInterval { start: 0.0, end: 1e9, label: "x".into() }];
        let cfg = WindowConfig { fs: 32.0, win_s: win, stride_s: stride };
        let frames = window_stream(&s, &cfg).unwrap();
        let (w, h) = ((win * 32.0) as usize, (stride * 32.0) as usize);
        let want = if len32 + 1 < w { 0 } else { (len32 + 1 - w) / h + 1 };
        prop_assert_eq!(frames.len(), want);
        for (i, f) in frames.iter().enumerate() {
            prop_assert_eq!(f.len(), w);
            prop_assert!((f.t0 - (i * h) as f64 / 32.0).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_round_trip(hz in 0.3..6.0f64, phase in 0.0..6.28f64, secs in 8usize..40) {
        let n = secs * 32;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / 32.0 + phase).sin()).collect();
        let ch = Channel::new(x.clone(), 32.0, 0.0).unwrap();
        let up = resample(&ch, 64.0).unwrap();
        prop_assert!((up.duration() - ch.duration()).abs() <= 1.0 / 32.0);
        let back = resample(&up, 32.0).unwrap();
        prop_assert_eq!(back.len(), n);
        let err: f64 = back.samples.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        prop_assert!(err.sqrt() <= 1e-3 * energy.sqrt());
    }
}
