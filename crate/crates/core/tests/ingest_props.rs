use kidppg::ingest::{load_session, write_session, ActivityInterval, HrPoint, ACC_CHANNELS, PPG_CHANNEL};
use kidppg::signal::Channel;
use kidppg::SessionRecording;
use proptest::prelude::*;

fn channel(fs: f64) -> impl Strategy<Value = Channel> {
    (prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..200), -64i32..64).prop_map(
        move |(v, t0)| Channel { samples: v.into_iter().map(f64::from).collect(), fs, t0: t0 as f64 / 32.0, units: "au".into() },
    )
}

fn session() -> impl Strategy<Value = SessionRecording> {
    (
        "[A-Za-z][A-Za-z0-9_]{0,6}",
        channel(64.0),
        [channel(32.0), channel(32.0), channel(32.0)],
        prop::option::of(channel(700.0)),
        prop::collection::vec((0.0..1e4f64, 30.0..300.0f64), 0..20),
        prop::collection::vec(("[a-z]{1,8}", 0.5..50.0f64), 0..5),
        prop::collection::btree_map("[a-z]{1,6}", "[a-z0-9]{0,6}", 0..3),
        -16i32..16,
    )
        .prop_map(|(id, ppg, acc, extra, mut hr, acts, meta, shift)| {
            let mut s = SessionRecording::new(id);
            s.channels.insert(PPG_CHANNEL.into(), ppg);
            for (name, ch) in ACC_CHANNELS.into_iter().zip(acc) {
                s.channels.insert(name.into(), ch);
            }
            if let Some(e) = extra {
                s.channels.insert("eda".into(), e);
            }
            hr.sort_by(|a, b| a.0.total_cmp(&b.0));
            hr.dedup_by(|a, b| a.0 == b.0);
            s.hr_track = hr.into_iter().map(|(t, bpm)| HrPoint { t, bpm }).collect();
            let mut t = 0.0;
            for (label, d) in acts {
                s.activity_track.push(ActivityInterval { start: t, end: t + d, label });
                t += d + 1.0;
            }
            s.metadata = meta;
            s.ppg_acc_shift_s = shift as f64 / 64.0;
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn write_load_is_identity(s in session()) {
        let dir = tempfile::tempdir().unwrap();
        write_session(&s, dir.path()).unwrap();
        let back = load_session(dir.path()).unwrap();
        prop_assert_eq!(back.channels.len(), s.channels.len());
        for (name, ch) in &s.channels {
            let b = &back.channels[name];
            prop_assert_eq!(b.fs, ch.fs);
            prop_assert_eq!(b.t0, ch.t0);
            prop_assert_eq!(&b.units, &ch.units);
            prop_assert_eq!(
                b.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                ch.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        prop_assert_eq!(back, s);
    }
}
