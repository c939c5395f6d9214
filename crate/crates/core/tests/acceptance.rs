//! End-to-end acceptance checks. Run with `cargo test --test acceptance`;
//! prints one PASS/FAIL line per criterion and exits nonzero on any failure.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use linattn::bench::{self, Mechanism};
use linattn::qa::{self, AttentionMode, TrainConfig};
use linattn::selftest::{self, SuiteResult};
use linattn::store::{self, StoreEncoder};
use linattn::{Error, Matrix, Sketch};

fn io_err(context: &str, source: std::io::Error) -> Error {
    Error::Io {
        context: context.into(),
        source,
    }
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> linattn::Result<Outcome>) -> bool {
    let start = Instant::now();
    let outcome = f().unwrap_or_else(|e| Outcome {
        passed: false,
        detail: format!("error: {e}"),
    });
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let passed = outcome.passed && in_time;
    let budget_note = budget.map_or(String::new(), |b| format!(" / budget {:.0?}", b));
    println!(
        "{} {id}. {name}: {} [{:.1?}{budget_note}]",
        if passed { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed
    );
    passed
}

fn suites(results: &[SuiteResult]) -> Outcome {
    for r in results {
        println!("    {r}");
    }
    Outcome {
        passed: results.iter().all(SuiteResult::passed),
        detail: format!("{} suites, {} failed", results.len(), results.iter().filter(|r| !r.passed()).count()),
    }
}

fn kernel_equivalence() -> linattn::Result<Outcome> {
    Ok(suites(&[selftest::kernel_equivalence(200, 1)?]))
}

fn gradients() -> linattn::Result<Outcome> {
    let mut results = vec![
        selftest::linear_backward_gradients(50, 2)?,
        selftest::gated_backward_gradients(50, 3)?,
        selftest::gru_backward_gradients(50, 4)?,
    ];
    for mode in AttentionMode::ALL {
        results.push(selftest::model_gradients(mode, 50, 5)?);
    }
    Ok(suites(&results))
}

fn reversibility() -> linattn::Result<Outcome> {
    Ok(suites(&[selftest::reversibility(256, 16, 6)?]))
}

fn complexity() -> linattn::Result<Outcome> {
    bench::pin_to_current_cpu();
    let (k, m, trials, warmup, seed) = (100, 10_000, 5, 1, 7);
    let t = |mech, n| bench::time_lookup(mech, n, k, m, trials, warmup, seed);
    let lin: Vec<f64> = [250, 1000, 4000].into_iter().map(|n| t(Mechanism::Linear, n)).collect::<Result<_, _>>()?;
    let soft_1000 = t(Mechanism::Softmax, 1000)?;
    let soft_4000 = t(Mechanism::Softmax, 4000)?;
    let speedup = t(Mechanism::Softmax, 700)? / t(Mechanism::Linear, 700)?;
    let lo = lin.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lin.iter().copied().fold(0.0, f64::max);
    let variation = (hi - lo) / lo;
    let growth = soft_4000 / soft_1000;
    Ok(Outcome {
        passed: variation < 0.30 && growth >= 3.0 && speedup >= 3.0,
        detail: format!(
            "linear ns/lookup {:.0}/{:.0}/{:.0} (variation {:.1}%), softmax t(4000)/t(1000) = {growth:.2}, speedup at n=700 = {speedup:.2}",
            lin[0],
            lin[1],
            lin[2],
            100.0 * variation
        ),
    })
}

fn write_corpus(dir: &Path, docs: usize, len: usize, rng: &mut ChaCha8Rng) -> linattn::Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err("creating corpus", e))?;
    for i in 0..docs {
        let text: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..50))).collect();
        fs::write(dir.join(format!("doc{i:03}.txt")), text.join(" ")).map_err(|e| io_err("writing corpus", e))?;
    }
    Ok(())
}

fn dir_bytes(dir: &Path) -> linattn::Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir).map_err(|e| io_err("listing store", e))? {
        let entry = entry.map_err(|e| io_err("listing store", e))?;
        if entry.path().extension().is_some_and(|x| x == "latc") {
            total += entry.metadata().map_err(|e| io_err("stat", e))?.len();
        }
    }
    Ok(total)
}

fn memory() -> linattn::Result<Outcome> {
    let tmp = tempfile::tempdir().map_err(|e| io_err("tempdir", e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let k = 32;
    let expected = 100 * (8 * (k * k) as u64 + 21);
    let mut sizes = Vec::new();
    let mut payloads = Vec::new();
    for len in [10, 10_000] {
        let corpus = tmp.path().join(format!("corpus{len}"));
        let out = tmp.path().join(format!("store{len}"));
        write_corpus(&corpus, 100, len, &mut rng)?;
        let encoder = StoreEncoder::random(store::corpus_vocabulary(&corpus)?, k, k, 9);
        let index = store::encode_corpus(&corpus, &encoder, &out)?;
        sizes.push((index.len(), index.sketch_bytes()?, dir_bytes(&out)?));
        let mut names: Vec<(String, u64)> = index
            .iter()
            .map(|(id, e)| (id.to_string(), fs::metadata(&e.path).map(|m| m.len()).unwrap_or(0)))
            .collect();
        names.sort();
        payloads.push(names);
    }
    let ok = sizes.iter().all(|&(docs, idx, disk)| docs == 100 && idx == expected && disk == expected) && payloads[0] == payloads[1];
    Ok(Outcome {
        passed: ok,
        detail: format!(
            "expected {expected} bytes; len 10 -> {} bytes, len 10000 -> {} bytes",
            sizes[0].2, sizes[1].2
        ),
    })
}

struct ModeRuns {
    mode: AttentionMode,
    finals: Vec<f64>,
    epochs_to_threshold: Vec<usize>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn train_all_modes() -> linattn::Result<Vec<ModeRuns>> {
    let seeds = [11, 12, 13];
    let base = TrainConfig::default();
    let threshold = 1.5 / base.entities as f64;
    let mut runs = Vec::new();
    for mode in AttentionMode::ALL {
        let mut finals = Vec::new();
        let mut epochs = Vec::new();
        for seed in seeds {
            let cfg = TrainConfig { mode, seed, ..base.clone() };
            let (report, _) = qa::train(&cfg)?;
            finals.push(report.final_valid_acc());
            epochs.push(report.epochs_to_reach(threshold).unwrap_or(cfg.epochs + 1));
            println!(
                "    {mode:>7} seed {seed}: final valid acc {:.4}, epochs to {:.3} = {}",
                report.final_valid_acc(),
                threshold,
                report.epochs_to_reach(threshold).map_or("never".into(), |e| e.to_string())
            );
        }
        runs.push(ModeRuns {
            mode,
            finals,
            epochs_to_threshold: epochs,
        });
    }
    Ok(runs)
}

fn ordering(runs: &[ModeRuns]) -> Outcome {
    let med = |m: AttentionMode| median(&runs.iter().find(|r| r.mode == m).expect("all modes trained").finals);
    let (none, soft, lin, gated) = (
        med(AttentionMode::None),
        med(AttentionMode::Softmax),
        med(AttentionMode::Linear),
        med(AttentionMode::Gated),
    );
    Outcome {
        passed: soft >= gated && gated >= lin && lin >= none && gated - none >= 0.10,
        detail: format!(
            "medians softmax {soft:.4}, gated {gated:.4}, linear {lin:.4}, none {none:.4} (need softmax >= gated >= linear >= none); gated - none = {:.4}",
            gated - none
        ),
    }
}

fn convergence(runs: &[ModeRuns]) -> Outcome {
    let med = |m: AttentionMode| {
        let e: Vec<f64> = runs.iter().find(|r| r.mode == m).expect("all modes trained").epochs_to_threshold.iter().map(|&e| e as f64).collect();
        median(&e)
    };
    let none = med(AttentionMode::None);
    let attn: Vec<(AttentionMode, f64)> = [AttentionMode::Softmax, AttentionMode::Linear, AttentionMode::Gated]
        .into_iter()
        .map(|m| (m, med(m)))
        .collect();
    Outcome {
        passed: attn.iter().all(|&(_, e)| e < none),
        detail: format!(
            "median epochs to 1.5x chance: none {none}, {}",
            attn.iter().map(|(m, e)| format!("{m} {e}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn file_round_trip() -> linattn::Result<Outcome> {
    let tmp = tempfile::tempdir().map_err(|e| io_err("tempdir", e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ks = [1, 2, 16, 100];
    let (mut exact, mut detected, mut corruptions) = (0, 0, 0);
    for i in 0..100 {
        let k = ks[i % ks.len()];
        let mut m = Matrix::zeros(k, k);
        for v in m.as_mut_slice() {
            *v = f64::from_bits(rng.gen::<u64>() & !(0x7ff << 52) | (rng.gen_range(1..0x7feu64) << 52));
        }
        let c = Sketch::from_matrix(m, rng.gen_range(0..10_000))?;
        let path = store::save_sketch(&c, c.steps(), &format!("doc-{i}"), tmp.path())?;
        let back = store::load_sketch(&path)?;
        let same = back.matrix().as_slice().iter().zip(c.matrix().as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        exact += usize::from(same && back.k() == k);

        let bytes = fs::read(&path).map_err(|e| io_err("reading sketch", e))?;
        let positions: Vec<usize> = if k <= 2 {
            (0..bytes.len()).collect()
        } else {
            (0..32).map(|_| rng.gen_range(0..bytes.len())).collect()
        };
        for pos in positions {
            let mut bad = bytes.clone();
            bad[pos] ^= rng.gen_range(1..=255u8);
            corruptions += 1;
            if matches!(store::decode_sketch(&bad, &path), Err(Error::CrcMismatch { .. })) {
                detected += 1;
            }
        }
    }
    Ok(Outcome {
        passed: exact == 100 && detected == corruptions,
        detail: format!("{exact}/100 bitwise round trips, {detected}/{corruptions} corruptions detected"),
    })
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "kernel equivalence", Some(Duration::from_secs(5)), kernel_equivalence);
    ok &= report(2, "gradient suite", Some(Duration::from_secs(60)), gradients);
    ok &= report(3, "reversibility", Some(Duration::from_secs(5)), reversibility);
    ok &= report(4, "lookup complexity", Some(Duration::from_secs(120)), complexity);
    ok &= report(5, "sketch store size", None, memory);

    let start = Instant::now();
    let runs = train_all_modes();
    let elapsed = start.elapsed();
    match runs {
        Ok(runs) => {
            ok &= report(6, "accuracy ordering", None, || {
                let mut o = ordering(&runs);
                let budget = Duration::from_secs(30 * 60);
                o.passed &= elapsed <= budget;
                o.detail = format!("{} (training {:.0?} / budget {:.0?})", o.detail, elapsed, budget);
                Ok(o)
            });
            ok &= report(7, "convergence speed", None, || Ok(convergence(&runs)));
        }
        Err(e) => {
            println!("FAIL 6. accuracy ordering: error: {e}");
            println!("FAIL 7. convergence speed: error: {e}");
            ok = false;
        }
    }
    ok &= report(8, "sketch file round trip", None, file_round_trip);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
