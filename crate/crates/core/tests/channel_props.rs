use proptest::prelude::*;
use qctrl_core::channel::{
    apply_channel, dac_code, fir_apply, render_dac, ChannelConfig, ChannelRole, FirFilter,
};
use qctrl_core::waveform::Waveform;

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::new(v, 1e9).unwrap()
}

fn samples() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..300)
}

fn taps() -> impl Strategy<Value = FirFilter> {
    prop::collection::vec(-1.0f64..1.0, 1..32).prop_map(|t| FirFilter::new(t).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn fir_is_linear(a in -3.0f64..3.0, w1 in samples(), w2 in samples(), f in taps()) {
        let n = w1.len().min(w2.len());
        let (w1, w2) = (&w1[..n], &w2[..n]);
        let mixed: Vec<f64> = w1.iter().zip(w2).map(|(x, y)| a * x + y).collect();
        let lhs = fir_apply(&wave(mixed), &f);
        let f1 = fir_apply(&wave(w1.to_vec()), &f);
        let f2 = fir_apply(&wave(w2.to_vec()), &f);
        let tap_sum: f64 = f.taps().iter().map(|t| t.abs()).sum();
        let bound = 8.0 * f64::EPSILON * (a.abs() + 1.0) * tap_sum.max(1.0) * f.taps().len() as f64;
        for (k, (l, (x, y))) in lhs.samples().iter().zip(f1.samples().iter().zip(f2.samples())).enumerate() {
            prop_assert!((l - (a * x + y)).abs() <= bound, "k={} {} vs {}", k, l, a * x + y);
        }
    }

    #[test]
    fn neutral_config_is_bitwise_identity(w in samples()) {
        let w = wave(w);
        let out = apply_channel(&w, &ChannelConfig::neutral(ChannelRole::X));
        let bits = |w: &Waveform| w.samples().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&out), bits(&w));
    }

    #[test]
    fn delays_compose(w in samples(), d1 in 0u32..50, d2 in 0u32..50, offset in -0.5f64..0.5) {
        let w = wave(w);
        let cfg = |d: u32, offset: f64| ChannelConfig {
            delay_samples: d,
            offset,
            ..ChannelConfig::neutral(ChannelRole::Z)
        };
        let twice = apply_channel(&apply_channel(&w, &cfg(d1, offset)), &cfg(d2, 0.0));
        let once = apply_channel(&w, &cfg(d1 + d2, offset));
        // The second pass pads with zero, the single pass with the offset.
        prop_assert_eq!(twice.len(), once.len());
        prop_assert_eq!(&twice.samples()[d2 as usize..], &once.samples()[d2 as usize..]);

        let plain_twice = apply_channel(&apply_channel(&w, &cfg(d1, 0.0)), &cfg(d2, 0.0));
        prop_assert_eq!(plain_twice, apply_channel(&w, &cfg(d1 + d2, 0.0)));
    }

    #[test]
    fn dac_is_monotone(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(dac_code(lo).0 <= dac_code(hi).0);
        let r = render_dac(&wave(vec![lo, hi]));
        prop_assert!(r.codes[0] <= r.codes[1]);
    }
}
