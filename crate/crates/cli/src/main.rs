use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use linattn::bench::{self, BenchConfig, Mechanism};
use linattn::config::KeyValues;
use linattn::qa::{self, AttentionMode, Checkpoint, TrainConfig};
use linattn::selftest;
use linattn::store::{self, SketchStore, StoreEncoder};

#[derive(Parser, Debug)]
#[command(name = "linattn", version, about = "Linear attention sketches: store, train, benchmark")]
struct Cli {
    /// Random seed (overrides config files).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Hidden size (overrides config files).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Attention mode: none, softmax, linear or gated.
    #[arg(long, global = true)]
    mode: Option<AttentionMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sketch every file of a corpus directory into a store.
    Encode {
        corpus: PathBuf,
        store: PathBuf,
        /// Checkpoint whose encoders to use; random encoders otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Embedding size for random encoders (defaults to k).
        #[arg(long)]
        d: Option<usize>,
    },
    /// Look up a stored document with a query.
    Query {
        store: PathBuf,
        doc_id: String,
        #[arg(required = true, num_args = 1..)]
        query: Vec<String>,
    },
    /// Train a cloze model from a `key = value` config file.
    Train {
        config: PathBuf,
        /// Where to write the checkpoint.
        #[arg(long, default_value = "checkpoint.json")]
        out: PathBuf,
        /// Where to write the per-epoch JSON lines (stdout by default).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on a tab-separated dataset.
    Eval { params: PathBuf, dataset: PathBuf },
    /// Run the lookup and encoding benchmarks and print CSV.
    Bench {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient, equivalence and reversibility suites.
    Selftest,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Encode { ref corpus, ref store, ref params, d } => encode(&cli, corpus, store, params.as_deref(), d),
        Command::Query { ref store, ref doc_id, ref query } => {
            let mut s = SketchStore::open(store).with_context(|| format!("opening store {}", store.display()))?;
            let tokens: Vec<&str> = query.iter().flat_map(|q| q.split_whitespace()).collect();
            let r = s.query(doc_id, &tokens)?;
            let line: Vec<String> = r.iter().map(|v| format!("{v:.17e}")).collect();
            println!("{}", line.join(" "));
            Ok(true)
        }
        Command::Train { ref config, ref out, ref log } => train(&cli, config, out, log.as_deref()),
        Command::Eval { ref params, ref dataset } => {
            let ck = Checkpoint::load(params).with_context(|| format!("loading {}", params.display()))?;
            if let Some(mode) = cli.mode {
                if mode != ck.params.mode {
                    bail!("checkpoint was trained with mode {}, not {mode}", ck.params.mode);
                }
            }
            let ds = qa::ingest_examples_with_vocab(dataset, &ck.vocab)?;
            let acc = qa::evaluate(&ck.params, &ck.vocab, &ds)?;
            println!("mode={} examples={} accuracy={acc:.4}", ck.params.mode, ds.len());
            Ok(true)
        }
        Command::Bench { ref config, ref out } => run_bench(&cli, config, out.as_deref()),
        Command::Selftest => {
            let results = selftest::run_all(cli.seed.unwrap_or(1))?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} suites, {failed} failed", results.len());
            Ok(failed == 0)
        }
    }
}

fn encode(cli: &Cli, corpus: &Path, store: &Path, params: Option<&Path>, d: Option<usize>) -> Result<bool> {
    let encoder = match params {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if cli.k.is_some_and(|k| k != ck.params.k()) {
                bail!("--k {} disagrees with the checkpoint's k = {}", cli.k.unwrap_or(0), ck.params.k());
            }
            StoreEncoder::from_checkpoint(ck)
        }
        None => {
            let k = cli.k.unwrap_or(TrainConfig::default().k);
            let vocab = store::corpus_vocabulary(corpus)?;
            StoreEncoder::random(vocab, d.unwrap_or(k), k, cli.seed.unwrap_or(1))
        }
    };
    let index = store::encode_corpus(corpus, &encoder, store)?;
    println!(
        "documents={} k={} sketch_bytes={}",
        index.len(),
        encoder.k(),
        index.sketch_bytes()?
    );
    Ok(true)
}

fn train(cli: &Cli, config: &Path, out: &Path, log: Option<&Path>) -> Result<bool> {
    let kv = KeyValues::from_file(config)?;
    let mut cfg = TrainConfig::from_key_values(&kv)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    cfg.validate()?;

    let base = config.parent().unwrap_or(Path::new("."));
    let (train_set, valid_set, vocab) = match (kv.raw("dataset"), kv.raw("valid_dataset")) {
        (Some(t), Some(v)) => {
            let (train_set, vocab) = qa::ingest_examples(&base.join(t))?;
            let valid_set = qa::ingest_examples_with_vocab(&base.join(v), &vocab)?;
            (train_set, valid_set, vocab)
        }
        (None, None) => qa::generate_synthetic_cloze(&cfg, cfg.seed)?,
        _ => bail!("dataset and valid_dataset must be given together"),
    };
    info!("training {} on {} examples", cfg.mode, train_set.len());

    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    let mut write_err = None;
    let report = qa::train::train_with_callback(&cfg, &train_set, &valid_set, &vocab, |r| {
        let written = r
            .to_json_line()
            .map_err(anyhow::Error::from)
            .and_then(|line| Ok(writeln!(sink, "{line}").and_then(|_| sink.flush())?));
        if let Err(e) = written {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing training log");
    }
    Checkpoint {
        config: cfg.clone(),
        vocab,
        params: report.params.clone(),
    }
    .save(out)?;
    eprintln!(
        "mode={} initial_valid_acc={:.4} final_valid_acc={:.4} checkpoint={}",
        cfg.mode,
        report.initial_valid_acc,
        report.final_valid_acc(),
        out.display()
    );
    Ok(true)
}

fn run_bench(cli: &Cli, config: &Path, out: Option<&Path>) -> Result<bool> {
    let mut cfg = BenchConfig::from_file(config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(k) = cli.k {
        cfg.ks = vec![k];
    }
    if !bench::pin_to_current_cpu() {
        log::warn!("could not pin the benchmark to one CPU");
    }
    let rows = bench::run_benchmarks(&cfg)?;
    match out {
        Some(p) => bench::write_csv(&rows, File::create(p).with_context(|| format!("creating {}", p.display()))?)?,
        None => bench::write_csv(&rows, io::stdout().lock())?,
    }
    if let Some(est) = bench::estimate_lambda(&rows) {
        eprintln!(
            "encoding overhead linear/softmax = {:.3} (lambda ~ {:.2})",
            est.overhead_ratio, est.lambda
        );
    }
    for &k in &cfg.ks {
        for &n in &cfg.ns {
            let find = |m: Mechanism| rows.iter().find(|r| r.mechanism == m && r.n == n && r.k == k);
            if let (Some(s), Some(l)) = (find(Mechanism::Softmax), find(Mechanism::Linear)) {
                eprintln!(
                    "k={k} n={n}: lookup speedup {:.2} (ideal n/k = {:.2})",
                    s.lookup_ns / l.lookup_ns,
                    n as f64 / k as f64
                );
            }
        }
    }
    Ok(true)
}
