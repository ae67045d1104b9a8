use kidppg::nn::{gaussian_head, gaussian_nll, temporal_attention, AttentionParams, HrEstimate, Projections, Tensor};
use proptest::prelude::*;

fn tensor(t: usize, d: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, t * d).prop_map(move |v| Tensor::new(vec![t, d], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Without projections every output row is the current row plus a convex
    /// combination of previous rows, even for huge logits.
    #[test]
    fn attention_adds_a_convex_combination(
        (e_i, e_prev) in (1usize..12, 1usize..10).prop_flat_map(|(t, d)| (tensor(t, d, 50.0), tensor(t, d, 50.0))),
    ) {
        let (t, d) = (e_i.shape[0], e_i.shape[1]);
        let out = temporal_attention(&e_i, &e_prev, &AttentionParams { heads: 1, projections: None }).unwrap();
        for c in 0..d {
            let col = (0..t).map(|r| e_prev.data[r * d + c]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            for r in 0..t {
                let mixed = out.data[r * d + c] - e_i.data[r * d + c];
                prop_assert!(mixed.is_finite());
                prop_assert!(mixed >= lo - 1e-9 && mixed <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn zero_values_leave_the_residual(
        (e_i, e_prev, wq, wk, heads) in (1usize..8, prop::sample::select(vec![(1usize, 4usize), (2, 4), (4, 8), (3, 6)]))
            .prop_flat_map(|(t, (h, d))| (tensor(t, d, 5.0), tensor(t, d, 5.0), tensor(d, d, 1.0), tensor(d, d, 1.0), Just(h))),
    ) {
        let d = e_i.shape[1];
        let params = AttentionParams { heads, projections: Some(Projections { wq, wk, wv: Tensor::zeros(vec![d, d]) }) };
        let out = temporal_attention(&e_i, &e_prev, &params).unwrap();
        prop_assert_eq!(out.data, e_i.data);
    }

    #[test]
    fn nll_is_smallest_at_the_label(y in 40.0..300.0f64, sigma in 1e-2..100.0f64, off in 1e-3..50.0f64) {
        let at = |mu: f64| gaussian_nll(&HrEstimate { mu_hr: mu, sigma_hr: sigma, frame_time: 0.0 }, y);
        prop_assert!(at(y) < at(y + off));
        prop_assert!(at(y) < at(y - off));
    }

    #[test]
    fn sigma_is_floored(raw_mu in -1e3..1e3f64, raw_sigma in -1e3..1e3f64) {
        let e = gaussian_head(&[raw_mu, raw_sigma], 1.0).unwrap();
        prop_assert_eq!(e.mu_hr, raw_mu);
        prop_assert!(e.sigma_hr >= kidppg::nn::SIGMA_FLOOR);
    }
}
