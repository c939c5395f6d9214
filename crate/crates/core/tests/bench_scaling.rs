//! Scaling properties of the benchmark harness, measured on this machine.

use std::sync::Mutex;

use linattn::bench::{self, BenchConfig, Mechanism};

/// Timing tests must not share the CPU with each other.
static TIMING: Mutex<()> = Mutex::new(());

#[test]
fn lookup_scaling() {
    let _guard = TIMING.lock().unwrap();
    bench::pin_to_current_cpu();
    let (k, m) = (100, 10_000);
    let t = |mech, n| bench::time_lookup(mech, n, k, m, 5, 1, 21).unwrap();
    let ns = [250, 1000, 4000];
    let soft: Vec<f64> = ns.iter().map(|&n| t(Mechanism::Softmax, n)).collect();
    let lin: Vec<f64> = ns.iter().map(|&n| t(Mechanism::Linear, n)).collect();

    assert!(soft.windows(2).all(|w| w[1] >= w[0]), "softmax not monotone: {soft:?}");
    assert!(soft[2] / soft[1] >= 3.0, "softmax growth {:.2}", soft[2] / soft[1]);
    assert!(lin[2] / lin[1] <= 1.3, "linear ratio {:.2}", lin[2] / lin[1]);
    assert!(lin[1] / lin[0] <= 1.3, "linear ratio {:.2}", lin[1] / lin[0]);
}

#[test]
fn encoding_scales_linearly_with_overhead() {
    let _guard = TIMING.lock().unwrap();
    bench::pin_to_current_cpu();
    let cfg = BenchConfig {
        ks: vec![32],
        ns: vec![250, 500, 1000, 2000],
        m: 1,
        trials: 5,
        warmup: 1,
        seed: 4,
        d: 0,
    };
    let rows = bench::bench_encoding(&cfg).unwrap();
    assert_eq!(rows.len(), 8);
    for mech in Mechanism::ALL {
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.mechanism == mech).map(|r| (r.n as f64, r.encode_ns)).collect();
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let slope = bench::loglog_slope(&xs, &ys).unwrap();
        assert!((0.9..=1.1).contains(&slope), "{mech}: exponent {slope:.3}");
    }
    let est = bench::estimate_lambda(&rows).unwrap();
    assert!(est.overhead_ratio > 1.0, "overhead ratio {:.3}", est.overhead_ratio);
    assert!(est.lambda > 0.0);
}

#[test]
fn representation_bytes_cross_at_n_equals_k() {
    for k in [1, 16, 100] {
        assert_eq!(Mechanism::Softmax.repr_bytes(k, k), Mechanism::Linear.repr_bytes(k, k));
        assert!(Mechanism::Softmax.repr_bytes(k + 1, k) > Mechanism::Linear.repr_bytes(k + 1, k));
        if k > 1 {
            assert!(Mechanism::Softmax.repr_bytes(k - 1, k) < Mechanism::Linear.repr_bytes(k - 1, k));
        }
    }
}

