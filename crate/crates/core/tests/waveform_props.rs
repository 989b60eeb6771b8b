use proptest::prelude::*;
use qctrl_core::waveform::{
    differentiate_expr, differentiate_numeric, generate, integrate, parse_expr, pointwise,
    sample_expr, Bindings, PointwiseOp, WaveExpr, WaveKind, WaveParams, Waveform,
};

const FS: f64 = 1e9;

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::new(v, FS).unwrap()
}

fn samples(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z_][a-z0-9_]{0,6}".prop_filter("reserved", |s| {
        s != "t" && WaveKind::from_primitive_name(s).is_none()
    })
}

fn constant() -> impl Strategy<Value = f64> {
    prop_oneof![
        0.0f64..1e3,
        (0u32..100).prop_map(f64::from),
        (1.0f64..10.0, -12i32..12).prop_map(|(m, e)| m * 10f64.powi(e)),
    ]
}

fn expr_tree() -> impl Strategy<Value = WaveExpr> {
    let leaf = prop_oneof![
        constant().prop_map(WaveExpr::Const),
        Just(WaveExpr::Time),
        ident().prop_map(WaveExpr::Param),
    ];
    leaf.prop_recursive(5, 48, 4, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| WaveExpr::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| WaveExpr::Sub(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| WaveExpr::Mul(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| WaveExpr::Div(Box::new(a), Box::new(b))),
            inner.clone().prop_map(|a| WaveExpr::Neg(Box::new(a))),
            (
                prop::sample::select(WaveKind::ALL.to_vec()),
                prop::collection::vec(inner, 0..5)
            )
                .prop_map(|(kind, values)| {
                    let args = kind
                        .parameters()
                        .iter()
                        .zip(values)
                        .map(|(name, v)| (name.to_string(), v))
                        .collect::<Vec<_>>();
                    WaveExpr::Call { kind, args }
                }),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_print_identity(e in expr_tree()) {
        let text = e.to_string();
        let back = parse_expr(&text).map_err(|err| TestCaseError::fail(format!("{text}: {err}")))?;
        prop_assert_eq!(back, e, "{}", text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn generation_is_deterministic(kind in prop::sample::select(WaveKind::ALL.to_vec()), len in 1usize..2000) {
        let mut p = WaveParams::new();
        p.insert("a".into(), 0.7);
        let extra: &[(&str, f64)] = match kind {
            WaveKind::Dc => &[],
            WaveKind::Sine => &[("f", 1e7)],
            WaveKind::Gaussian => &[("mu", 5e-7), ("sigma", 1e-7)],
            WaveKind::Slope => &[("t0", 1e-7), ("width", 4e-7)],
            WaveKind::Flattop => &[("t1", 2e-7), ("t2", 8e-7), ("sigma", 3e-8)],
            WaveKind::IsoscelesTrapezoid => &[("t1", 1e-7), ("t2", 9e-7), ("r", 1e-7)],
            _ => &[("t1", 1e-7), ("t2", 9e-7)],
        };
        for (k, v) in extra {
            p.insert(k.to_string(), *v);
        }
        let a = generate(kind, &p, len, FS).unwrap();
        let b = generate(kind, &p, len, FS).unwrap();
        let bits = |w: &Waveform| w.samples().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn add_and_mul_laws(a in samples(1..200), b in samples(1..200), c in samples(1..200)) {
        let (a, b, c) = (wave(a), wave(b), wave(c));
        let add = |x: &Waveform, y: &Waveform| pointwise(PointwiseOp::Add, x, y).unwrap();
        let mul = |x: &Waveform, y: &Waveform| pointwise(PointwiseOp::Mul, x, y).unwrap();
        prop_assert_eq!(add(&a, &b), add(&b, &a));
        prop_assert_eq!(mul(&a, &b), mul(&b, &a));
        let l = add(&add(&a, &b), &c);
        let r = add(&a, &add(&b, &c));
        for (x, y) in l.samples().iter().zip(r.samples()) {
            prop_assert!((x - y).abs() <= 2.0 * f64::EPSILON * x.abs().max(y.abs()).max(1.0));
        }
        let zeros = Waveform::zeros(a.len(), FS).unwrap();
        let z = add(&a, &zeros);
        let bits = |w: &Waveform| w.samples().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&z), bits(&a));
    }

    #[test]
    fn integrate_is_linear(a in samples(1..500), b in samples(1..500)) {
        let n = a.len().min(b.len());
        let (a, b) = (wave(a[..n].to_vec()), wave(b[..n].to_vec()));
        let lhs = integrate(&pointwise(PointwiseOp::Add, &a, &b).unwrap());
        let rhs = pointwise(PointwiseOp::Add, &integrate(&a), &integrate(&b)).unwrap();
        let scale = a.samples().iter().chain(b.samples()).map(|x| x.abs()).sum::<f64>() * a.dt();
        for (x, y) in lhs.samples().iter().zip(rhs.samples()) {
            prop_assert!((x - y).abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE), "{} vs {}", x, y);
        }
    }

    #[test]
    fn differentiate_inverts_integrate(v in samples(2..2000)) {
        let w = wave(v);
        let back = differentiate_numeric(&integrate(&w));
        let peak = w.samples().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for n in 1..w.len() {
            let (x, y) = (w.samples()[n], back.samples()[n]);
            prop_assert!((x - y).abs() <= 1e-9 * peak, "n={} {} vs {}", n, x, y);
        }
    }
}

/// Central difference of the continuous expression with step `dt / OVERSAMPLE`,
/// read off at the 1 GS/s grid points.
const OVERSAMPLE: usize = 100;

fn central_difference(e: &WaveExpr, len: usize) -> Vec<f64> {
    let fine_rate = FS * OVERSAMPLE as f64;
    let w = sample_expr(e, &Bindings::new(), len * OVERSAMPLE, fine_rate).unwrap();
    let s = w.samples();
    (1..len - 1)
        .map(|n| {
            let k = n * OVERSAMPLE;
            (s[k + 1] - s[k - 1]) * fine_rate / 2.0
        })
        .collect()
}

fn check_symbolic(text: &str, tol: f64) {
    let e = parse_expr(text).unwrap();
    let d = differentiate_expr(&e).unwrap();
    let len = 3000;
    let sym = sample_expr(&d, &Bindings::new(), len, FS).unwrap();
    let num = central_difference(&e, len);
    let scale = sym
        .samples()
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1.0);
    let worst = num
        .iter()
        .zip(&sym.samples()[1..len - 1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(
        worst / scale < tol,
        "{text}: max error {worst} (scale {scale})"
    );
}

#[test]
fn symbolic_derivatives_match_central_differences() {
    // Derivatives are in 1/s; errors are compared relative to the derivative's peak.
    for text in [
        "sine(a=0.8, f=5e7, phi=0.3)",
        "dc(a=0.25)",
        "gauss(a=1, mu=1.5e-6, sigma=1e-7)",
        "flattop(a=0.5, sigma=5e-8, t1=5e-7, t2=2e-6)",
        "gauss(a=1, mu=1e-6, sigma=2e-7)*sine(a=1, f=2e7)",
        "2*sine(f=1e7) - gauss(mu=1e-6, sigma=3e-7)/4",
    ] {
        check_symbolic(text, 1e-4);
    }
}

#[test]
fn slope_derivative_matches_away_from_kinks() {
    let e = parse_expr("slope(a=0.6, t0=4e-7, width=1e-6)").unwrap();
    let d = differentiate_expr(&e).unwrap();
    let len = 2000;
    let sym = sample_expr(&d, &Bindings::new(), len, FS).unwrap();
    let num = central_difference(&e, len);
    let peak = 0.6 / 1e-6;
    for n in 1..len - 1 {
        if n.abs_diff(400) <= 1 || n.abs_diff(1400) <= 1 {
            continue;
        }
        let err = (num[n - 1] - sym.samples()[n]).abs();
        assert!(
            err / peak < 1e-4,
            "n={n}: {} vs {}",
            num[n - 1],
            sym.samples()[n]
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symbolic_sine_and_gauss(a in 0.1f64..1.0, f in 1e6f64..5e7, phi in -3.0f64..3.0, sigma in 5e-8f64..3e-7) {
        check_symbolic(&format!("sine(a={a}, f={f}, phi={phi})"), 1e-4);
        check_symbolic(&format!("gauss(a={a}, mu=1.5e-6, sigma={sigma})"), 1e-4);
    }
}
