//! Timing harness for lookup and encoding cost of the two mechanisms.
//!
//! Lookups are timed after the document representation exists: softmax
//! attention reads the `n x k` hidden states, linear attention the `k x k`
//! sketch. Encoding is timed per document as the GRU pass alone (softmax
//! keeps `H`) or the GRU pass feeding a streaming sketch (linear).

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_sketch_batch, linear_attention, softmax_attention, HiddenStates, SketchBuilder};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rnn::Encoder;

pub const CSV_HEADER: &str = "mechanism,n,k,m,lookup_ns,encode_ns,repr_bytes";

/// Trials shorter than this are repeated with more lookups.
const MIN_TRIAL: Duration = Duration::from_millis(2);
/// Vocabulary size of the random token streams used for encoding.
const BENCH_VOCAB: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Softmax,
    Linear,
}

impl Mechanism {
    pub const ALL: [Mechanism; 2] = [Mechanism::Softmax, Mechanism::Linear];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Softmax => "softmax",
            Mechanism::Linear => "linear",
        }
    }

    /// Bytes kept per document: `8nk` for the states, `8k²` for the sketch.
    pub fn repr_bytes(self, n: usize, k: usize) -> u64 {
        match self {
            Mechanism::Softmax => 8 * (n * k) as u64,
            Mechanism::Linear => 8 * (k * k) as u64,
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "softmax" => Ok(Mechanism::Softmax),
            "linear" => Ok(Mechanism::Linear),
            other => Err(format!("unknown mechanism {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    pub ns: Vec<usize>,
    /// Lookups per trial.
    pub m: usize,
    pub trials: usize,
    /// Untimed trials before measuring.
    pub warmup: usize,
    pub seed: u64,
    /// Embedding size for the encoding benchmark; `0` means `d = k`.
    pub d: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ks: vec![100],
            ns: vec![250, 1000, 4000],
            m: 10_000,
            trials: 5,
            warmup: 1,
            seed: 1,
            d: 0,
        }
    }
}

const BENCH_KEYS: &[&str] = &["k", "n", "m", "trials", "warmup", "seed", "d"];

impl BenchConfig {
    /// Keys: `k` and `n` (comma-separated lists), `m`, `trials`, `warmup`,
    /// `seed`, `d`.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(BENCH_KEYS)?;
        let mut cfg = BenchConfig::default();
        if let Some(ks) = kv.get_list("k")? {
            cfg.ks = ks;
        }
        if let Some(ns) = kv.get_list("n")? {
            cfg.ns = ns;
        }
        if let Some(m) = kv.get("m")? {
            cfg.m = m;
        }
        if let Some(t) = kv.get("trials")? {
            cfg.trials = t;
        }
        if let Some(w) = kv.get("warmup")? {
            cfg.warmup = w;
        }
        if let Some(s) = kv.get("seed")? {
            cfg.seed = s;
        }
        if let Some(d) = kv.get("d")? {
            cfg.d = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::from_file(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ns.is_empty() {
            return Err(Error::Contract("k and n lists must be non-empty".into()));
        }
        if self.ks.contains(&0) || self.ns.contains(&0) || self.m == 0 {
            return Err(Error::Contract("k, n and m must be positive".into()));
        }
        if self.trials < 5 {
            return Err(Error::Contract(format!("need at least 5 trials, got {}", self.trials)));
        }
        Ok(())
    }

    fn embedding_dim(&self, k: usize) -> usize {
        if self.d == 0 {
            k
        } else {
            self.d
        }
    }
}

/// One row of the benchmark table.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    /// Median over trials of the time per lookup.
    pub lookup_ns: f64,
    /// Median over trials of the time to encode one document of `n` tokens.
    pub encode_ns: f64,
    pub repr_bytes: u64,
}

impl BenchRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.1},{:.1},{}",
            self.mechanism, self.n, self.k, self.m, self.lookup_ns, self.encode_ns, self.repr_bytes
        )
    }
}

pub fn write_csv<W: Write>(records: &[BenchRecord], mut out: W) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("writing benchmark table", e))
}

/// Pins the calling thread to the CPU it is running on. Returns whether
/// pinning succeeded; it is a no-op off Linux.
pub fn pin_to_current_cpu() -> bool {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: `set` is a plain bitmask owned by this frame; both calls
        // only read or write it and the current thread's affinity.
        unsafe {
            let cpu = libc::sched_getcpu();
            if cpu < 0 {
                return false;
            }
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu as usize, &mut set);
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
        }
    }
    #[cfg(not(target_os = "linux"))]
    {
        false
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

/// Median per-call time of `op` over `trials`, each trial calling it `calls`
/// times (more when a trial is too short to time reliably).
fn time_per_call<F: FnMut(usize)>(calls: usize, trials: usize, warmup: usize, mut op: F) -> f64 {
    let mut reps = 1;
    let run = |reps: usize, op: &mut F| {
        let start = Instant::now();
        for _ in 0..reps {
            for i in 0..calls {
                op(i);
            }
        }
        start.elapsed()
    };
    for _ in 0..warmup {
        run(1, &mut op);
    }
    while run(reps, &mut op) < MIN_TRIAL && reps < 1 << 20 {
        reps *= 2;
    }
    let samples = (0..trials)
        .map(|_| run(reps, &mut op).as_nanos() as f64 / (reps * calls) as f64)
        .collect();
    median(samples)
}

/// Per-lookup time of one mechanism on random data.
pub fn time_lookup(mechanism: Mechanism, n: usize, k: usize, m: usize, trials: usize, warmup: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 20) ^ k as u64);
    let h = HiddenStates::new(Matrix::random_uniform(n, k, 1.0, &mut rng))?;
    let queries: Vec<Vector> = (0..m.min(1024)).map(|_| Vector::random_uniform(k, 1.0, &mut rng)).collect();
    let nq = queries.len();
    Ok(match mechanism {
        Mechanism::Softmax => time_per_call(m, trials, warmup, |i| {
            black_box(softmax_attention(black_box(&h), &queries[i % nq]).expect("shapes match"));
        }),
        Mechanism::Linear => {
            let c = build_sketch_batch(&h);
            time_per_call(m, trials, warmup, |i| {
                black_box(linear_attention(black_box(&c), &queries[i % nq]).expect("shapes match"));
            })
        }
    })
}

/// Time to encode one `n`-token document: GRU only for softmax (states are
/// kept), GRU plus streaming sketch updates for linear.
pub fn time_encoding(mechanism: Mechanism, n: usize, k: usize, d: usize, trials: usize, warmup: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed ^ ((n as u64) << 20) ^ k as u64);
    let encoder = Encoder::random(BENCH_VOCAB, d, k, &mut rng);
    let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..BENCH_VOCAB)).collect();
    let ns = match mechanism {
        Mechanism::Softmax => time_per_call(1, trials, warmup, |_| {
            let mut states = Vec::with_capacity(n * k);
            encoder
                .for_each_state(&tokens, |h| {
                    states.extend_from_slice(h);
                    Ok(())
                })
                .expect("valid tokens");
            black_box(states);
        }),
        Mechanism::Linear => time_per_call(1, trials, warmup, |_| {
            let mut b = SketchBuilder::new(k);
            encoder.for_each_state(&tokens, |h| b.push(h)).expect("valid tokens");
            black_box(b.finish());
        }),
    };
    Ok(ns)
}

/// Lookup timings for every `(mechanism, n, k)`; `encode_ns` is left at 0.
pub fn bench_lookup(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &k in &cfg.ks {
        for &n in &cfg.ns {
            for mechanism in Mechanism::ALL {
                let lookup_ns = time_lookup(mechanism, n, k, cfg.m, cfg.trials, cfg.warmup, cfg.seed)?;
                out.push(BenchRecord {
                    mechanism,
                    n,
                    k,
                    m: cfg.m,
                    lookup_ns,
                    encode_ns: 0.0,
                    repr_bytes: mechanism.repr_bytes(n, k),
                });
            }
        }
    }
    Ok(out)
}

/// Encoding timings for every `(mechanism, n, k)`; `lookup_ns` is left at 0.
pub fn bench_encoding(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &k in &cfg.ks {
        for &n in &cfg.ns {
            for mechanism in Mechanism::ALL {
                let encode_ns = time_encoding(mechanism, n, k, cfg.embedding_dim(k), cfg.trials, cfg.warmup, cfg.seed)?;
                out.push(BenchRecord {
                    mechanism,
                    n,
                    k,
                    m: cfg.m,
                    lookup_ns: 0.0,
                    encode_ns,
                    repr_bytes: mechanism.repr_bytes(n, k),
                });
            }
        }
    }
    Ok(out)
}

/// Full table: lookup and encoding columns filled for every row.
pub fn run_benchmarks(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    let mut rows = bench_lookup(cfg)?;
    let enc = bench_encoding(cfg)?;
    for (row, e) in rows.iter_mut().zip(enc) {
        row.encode_ns = e.encode_ns;
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract("slope fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Contract("slope fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Per-token encoding cost ratio `linear / softmax`, an estimate of
/// `(λ + 1) / λ`, and the implied `λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaEstimate {
    pub overhead_ratio: f64,
    pub lambda: f64,
}

/// Pools the encoding rows of `records` (all `n`, per `k` grouped) into one
/// overhead estimate.
pub fn estimate_lambda(records: &[BenchRecord]) -> Option<LambdaEstimate> {
    let total = |mech: Mechanism| -> f64 {
        records
            .iter()
            .filter(|r| r.mechanism == mech && r.encode_ns > 0.0)
            .map(|r| r.encode_ns)
            .sum()
    };
    let (soft, lin) = (total(Mechanism::Softmax), total(Mechanism::Linear));
    if soft <= 0.0 || lin <= 0.0 {
        return None;
    }
    let overhead_ratio = lin / soft;
    Some(LambdaEstimate {
        overhead_ratio,
        lambda: 1.0 / (overhead_ratio - 1.0),
    })
}
