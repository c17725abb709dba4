//! `ftf`: generate synthetic data, train the toy encoders, build and query a
//! gallery, and run the evaluation, timing, ablation and sweep reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use ftf_core::btib::{rerank_with, BtibConfig, Interaction};
use ftf_core::codec::{load_gallery, load_queries, save_gallery, save_queries};
use ftf_core::eval::{
    ablation_csv, ablation_suite, bench_csv, evaluate, image_to_text_truth, k_sweep,
    measure_bench, report_stem, runs_csv, sweep_csv, text_to_image_truth, train_benchmark,
    ExperimentConfig, RetrievalConfig, Variant,
};
use ftf_core::gallery::{Gallery, QueryText};
use ftf_core::loss::LossConfig;
use ftf_core::recall::recall_topk;
use ftf_core::toy::{
    curve_csv, encode_split, generate_synthetic, random_retrieval_set, train_toy,
    RandomSetSpec, SyntheticDataset, SyntheticSpec, ToyEncoderParams, TrainConfig,
};

const ABOUT: &str = "Fast-then-fine cross-modal retrieval: text-agnostic recall of K candidates, \
then text-guided reranking of those candidates only.";

const AFTER_HELP: &str = "\
Symbols:
  K   candidate size kept by the recall stage        --k
  λ   fine-branch weight in the rerank score         --lambda
  τ   interaction softmax temperature                --tau
  τ'  alignment loss temperature                     --tau-loss
  β   weight of the intra-modal loss term            --beta
  α   per-branch inter-modal weights                 --alpha1 --alpha2 --alpha3
  M   neighbours per sample in the intra-modal graph --m-neighbors
  σ   neighbour-weight softmax temperature           --sigma

All randomness derives from --seed. Commands that read --gallery/--queries
fall back to the synthetic benchmark built from --seed when both are absent.";

#[derive(Debug, Parser)]
#[command(name = "ftf", version, about = ABOUT, after_help = AFTER_HELP)]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
struct Opts {
    /// Seed for data, initialization and batch order
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Embedding dimension d
    #[arg(long, global = true, default_value_t = 16)]
    dim: usize,
    /// K: recall candidate size
    #[arg(long, global = true, default_value_t = 100)]
    k: usize,
    /// λ: weight of the fine branch in the rerank score, in [0, 1]
    #[arg(long, global = true, default_value_t = 0.5)]
    lambda: f64,
    /// τ: temperature of the interaction softmax, > 0
    #[arg(long, global = true, default_value_t = 0.07)]
    tau: f64,
    /// τ of the alignment loss, > 0
    #[arg(long, global = true, default_value_t = 0.07)]
    tau_loss: f64,
    /// β: weight of the intra-modal term, >= 0
    #[arg(long, global = true, default_value_t = 1.0)]
    beta: f64,
    /// α1: inter-modal weight of the recall branch
    #[arg(long, global = true, default_value_t = 1.0)]
    alpha1: f64,
    /// α2: inter-modal weight of the coarse rerank branch
    #[arg(long, global = true, default_value_t = 1.0)]
    alpha2: f64,
    /// α3: inter-modal weight of the fine rerank branch
    #[arg(long, global = true, default_value_t = 1.0)]
    alpha3: f64,
    /// M: neighbours per sample in the intra-modal graph
    #[arg(long, global = true, default_value_t = 5)]
    m_neighbors: usize,
    /// σ: temperature of the neighbour weights, > 0
    #[arg(long, global = true, default_value_t = 0.1)]
    sigma: f64,
    /// Output directory
    #[arg(long, global = true, default_value = "ftf-out")]
    out: PathBuf,
    /// Gallery file (FTFG)
    #[arg(long, global = true)]
    gallery: Option<PathBuf>,
    /// Query file (FTFQ)
    #[arg(long, global = true)]
    queries: Option<PathBuf>,
    /// Timed repetitions per variant, >= 3
    #[arg(long, global = true, default_value_t = 5)]
    reps: usize,
    /// Discarded warmup passes, >= 1
    #[arg(long, global = true, default_value_t = 1)]
    warmup: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
struct DataArgs {
    /// Dataset file (FTFD); generated from --seed when absent
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    per_class: usize,
    /// Raw feature dimension
    #[arg(long, default_value_t = 32)]
    feat_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset
    Gen(DataArgs),
    /// Train the toy encoders and write parameters and the loss curve
    TrainToy {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Encode the held-out split into a gallery and query file
    Index {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Trained parameters (FTFP); trained from scratch when absent
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Rank the gallery for one query and print per-stage scores
    Retrieve {
        /// Query id; defaults to the first query in the file
        #[arg(long)]
        query_id: Option<String>,
        /// Rows to print
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Recall metrics in both directions
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Rerank the whole gallery instead of the top K
        #[arg(long)]
        one_stage: bool,
    },
    /// Per-query latency of one-stage and two-stage retrieval
    Bench {
        /// Candidate sizes to time; defaults to --k
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        /// Size of the random gallery used without --gallery
        #[arg(long, default_value_t = 2000)]
        gallery_size: usize,
        /// Number of random queries used without --queries
        #[arg(long, default_value_t = 16)]
        query_count: usize,
    },
    /// Train and evaluate each ablation on the synthetic benchmark
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// mR and latency across candidate sizes
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Candidate sizes; defaults to 8,16,32,64 and the gallery size
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
    },
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, msg).exit()
}

fn check_ranges(o: &Opts) {
    if !(0.0..=1.0).contains(&o.lambda) {
        usage_error(format!("--lambda must be in [0, 1], got {}", o.lambda));
    }
    for (name, v) in [("--tau", o.tau), ("--tau-loss", o.tau_loss), ("--sigma", o.sigma)] {
        if !(v > 0.0) || !v.is_finite() {
            usage_error(format!("{name} must be > 0, got {v}"));
        }
    }
    for (name, v) in [
        ("--beta", o.beta),
        ("--alpha1", o.alpha1),
        ("--alpha2", o.alpha2),
        ("--alpha3", o.alpha3),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            usage_error(format!("{name} must be >= 0, got {v}"));
        }
    }
    if o.k < 1 {
        usage_error("--k must be >= 1");
    }
    if o.dim < 1 {
        usage_error("--dim must be >= 1");
    }
    if o.m_neighbors < 1 {
        usage_error("--m-neighbors must be >= 1");
    }
    if o.reps < 3 {
        usage_error(format!("--reps must be >= 3, got {}", o.reps));
    }
    if o.warmup < 1 {
        usage_error("--warmup must be >= 1");
    }
}

fn check_train(t: &TrainArgs) {
    if t.batch_size < 2 {
        usage_error("--batch-size must be >= 2");
    }
    if !(t.lr >= 0.0) || !t.lr.is_finite() {
        usage_error(format!("--lr must be >= 0, got {}", t.lr));
    }
}

fn check_ks(ks: &[usize]) {
    if ks.contains(&0) {
        usage_error("candidate sizes must be >= 1");
    }
}

fn btib_config(o: &Opts) -> BtibConfig {
    BtibConfig {
        tau: o.tau,
        lambda: o.lambda,
        ..BtibConfig::default()
    }
}

fn retrieval_config(o: &Opts) -> RetrievalConfig {
    RetrievalConfig {
        btib: btib_config(o),
        interaction: Interaction::Btib,
    }
}

fn data_spec(o: &Opts, d: &DataArgs) -> SyntheticSpec {
    SyntheticSpec {
        n_classes: d.classes,
        n_per_class: d.per_class,
        d_feat: d.feat_dim,
        d: o.dim,
        noise_std: d.noise,
        seed: o.seed,
    }
}

fn experiment(o: &Opts, d: &DataArgs, t: &TrainArgs) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_seed(o.seed);
    cfg.data = data_spec(o, d);
    cfg.train = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.lr,
        loss: LossConfig {
            tau_loss: o.tau_loss,
            beta: o.beta,
            alpha: [o.alpha1, o.alpha2, o.alpha3],
            m_neighbors: o.m_neighbors,
            sigma: o.sigma,
            ..LossConfig::default()
        },
        btib: btib_config(o),
        ..cfg.train
    };
    cfg.k = o.k;
    cfg
}

fn dataset(o: &Opts, d: &DataArgs) -> ftf_core::Result<SyntheticDataset> {
    match &d.data {
        Some(path) => SyntheticDataset::load(path),
        None => generate_synthetic(&data_spec(o, d)),
    }
}

/// Gallery and queries from files, or `None` when neither was given.
fn files(o: &Opts) -> ftf_core::Result<Option<(Gallery, Vec<QueryText>)>> {
    match (&o.gallery, &o.queries) {
        (Some(g), Some(q)) => Ok(Some((load_gallery(g)?, load_queries(q)?))),
        (None, None) => Ok(None),
        (Some(_), None) => usage_error("--gallery also needs --queries"),
        (None, Some(_)) => usage_error("--queries also needs --gallery"),
    }
}

fn benchmark_set(o: &Opts, d: &DataArgs, t: &TrainArgs) -> ftf_core::Result<(Gallery, Vec<QueryText>)> {
    if let Some(set) = files(o)? {
        return Ok(set);
    }
    let cfg = experiment(o, d, t);
    let data = dataset(o, d)?;
    let bench = train_benchmark(data, &cfg)?;
    Ok((bench.gallery, bench.queries))
}

#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    command: &'a str,
    options: &'a Opts,
    config: C,
    report: R,
}

fn write(dir: &Path, name: &str, contents: &str) -> ftf_core::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn write_json<C: Serialize, R: Serialize>(
    o: &Opts,
    command: &str,
    stem: &str,
    config: C,
    report: R,
) -> ftf_core::Result<PathBuf> {
    let body = Report {
        command,
        options: o,
        config,
        report,
    };
    let mut json = serde_json::to_string_pretty(&body)?;
    json.push('\n');
    write(&o.out, &format!("{stem}.json"), &json)
}

fn run(cli: Cli) -> ftf_core::Result<()> {
    let o = &cli.opts;
    match &cli.command {
        Command::Gen(d) => {
            let data = generate_synthetic(&data_spec(o, d))?;
            fs::create_dir_all(&o.out)?;
            let path = o.out.join(format!("dataset-seed{}.ftfd", o.seed));
            data.save(&path)?;
            println!("wrote {} pairs to {}", data.samples.len(), path.display());
        }
        Command::TrainToy { data, train } => {
            check_train(train);
            let cfg = experiment(o, data, train);
            let ds = dataset(o, data)?;
            let (train_idx, _) = ds.split();
            let init = ToyEncoderParams::<f32>::init(ds.d_feat, o.dim, cfg.init_seed)?;
            let model = train_toy(&ds, &train_idx, &init, &cfg.train)?;
            fs::create_dir_all(&o.out)?;
            let params = o.out.join(format!("params-seed{}.ftfp", o.seed));
            model.params.save(&params)?;
            let curve = write(&o.out, &format!("loss-seed{}.csv", o.seed), &curve_csv(&model.curve))?;
            let (first, last) = (model.curve.first(), model.curve.last());
            if let (Some(a), Some(b)) = (first, last) {
                println!("loss {:.6} -> {:.6} over {} epochs", a.loss, b.loss, model.curve.len());
            }
            println!("wrote {} and {}", params.display(), curve.display());
        }
        Command::Index { data, train, params } => {
            check_train(train);
            let cfg = experiment(o, data, train);
            let ds = dataset(o, data)?;
            let (train_idx, eval_idx) = ds.split();
            let p = match params {
                Some(path) => ToyEncoderParams::load(path)?,
                None => {
                    let init = ToyEncoderParams::<f32>::init(ds.d_feat, o.dim, cfg.init_seed)?;
                    train_toy(&ds, &train_idx, &init, &cfg.train)?.params
                }
            };
            let (gallery, queries) = encode_split(&p, &ds, &eval_idx, cfg.train.aggregation)?;
            fs::create_dir_all(&o.out)?;
            let gp = o.out.join(format!("gallery-seed{}.ftfg", o.seed));
            let qp = o.out.join(format!("queries-seed{}.ftfq", o.seed));
            save_gallery(&gallery, &gp)?;
            save_queries(gallery.dim(), &queries, &qp)?;
            println!("wrote {} images to {} and {} queries to {}", gallery.len(), gp.display(), queries.len(), qp.display());
        }
        Command::Retrieve { query_id, top } => {
            let Some(gp) = &o.gallery else {
                usage_error("retrieve needs --gallery");
            };
            let Some(qp) = &o.queries else {
                usage_error("retrieve needs --queries");
            };
            let gallery = load_gallery(gp)?;
            let queries = load_queries(qp)?;
            let query = match query_id {
                Some(id) => queries
                    .iter()
                    .find(|q| q.id() == id)
                    .ok_or_else(|| ftf_core::Error::Lookup(id.clone()))?,
                None => queries.first().ok_or_else(|| ftf_core::Error::Lookup("<first query>".into()))?,
            };
            let cfg = retrieval_config(o);
            let cands = recall_topk(&gallery, query, o.k)?;
            let ranked = rerank_with(&gallery, &cands, query, &cfg.btib, cfg.interaction)?;
            println!("query {} (K={}, λ={}, τ={})", query.id(), o.k, o.lambda, o.tau);
            println!("{:>4}  {:<16} {:>10}  {:>6} {:>10}", "rank", "id", "rerank", "recall", "score");
            for r in ranked.iter().take(*top) {
                println!(
                    "{:>4}  {:<16} {:>10.6}  {:>6} {:>10.6}",
                    r.rerank_rank,
                    r.id,
                    r.score,
                    r.recall_rank.unwrap_or(0),
                    r.recall_score.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Eval { data, train, one_stage } => {
            check_train(train);
            let (gallery, queries) = benchmark_set(o, data, train)?;
            let k = if *one_stage { None } else { Some(o.k) };
            let cfg = retrieval_config(o);
            let ev = evaluate(&gallery, &queries, k, &cfg)?;
            let stem = report_stem("eval", k, o.seed);
            let t2i_truth = text_to_image_truth(&queries);
            let i2t_truth = image_to_text_truth(&gallery, &queries);
            let csv = runs_csv(&[(&ev.i2t, &i2t_truth), (&ev.t2i, &t2i_truth)])?;
            write(&o.out, &format!("{stem}.csv"), &csv)?;
            let path = write_json(o, "eval", &stem, (data, train), &ev.report)?;
            let r = &ev.report;
            println!(
                "I2T R@1/5/10 {:.2}/{:.2}/{:.2}  T2I R@1/5/10 {:.2}/{:.2}/{:.2}  mR {:.2} (random {:.2})",
                100.0 * r.i2t.r1,
                100.0 * r.i2t.r5,
                100.0 * r.i2t.r10,
                100.0 * r.t2i.r1,
                100.0 * r.t2i.r5,
                100.0 * r.t2i.r10,
                r.mr,
                r.random_baseline_mr
            );
            println!("wrote {}", path.display());
        }
        Command::Bench { ks, gallery_size, query_count } => {
            check_ks(ks);
            let (gallery, queries) = match files(o)? {
                Some(set) => set,
                None => random_retrieval_set(&RandomSetSpec {
                    gallery_size: *gallery_size,
                    query_count: *query_count,
                    d: o.dim,
                    seed: o.seed,
                    ..RandomSetSpec::default()
                })?,
            };
            let ks = if ks.is_empty() { vec![o.k] } else { ks.clone() };
            let mut variants = vec![Variant::OneStage];
            variants.extend(ks.iter().map(|&k| Variant::TwoStage(k)));
            let reports = measure_bench(&gallery, &queries, &variants, o.reps, o.warmup, &retrieval_config(o))?;
            let stem = format!("bench-seed{}", o.seed);
            let csv = bench_csv(&reports);
            write(&o.out, &format!("{stem}.csv"), &csv)?;
            let echo = serde_json::json!({ "ks": ks, "gallery_size": gallery.len(), "query_count": queries.len() });
            write_json(o, "bench", &stem, echo, &reports)?;
            print!("{csv}");
        }
        Command::Ablate { data, train } => {
            check_train(train);
            let cfg = experiment(o, data, train);
            let ds = dataset(o, data)?;
            let rows = ablation_suite(&ds, &cfg)?;
            let stem = report_stem("ablation", Some(o.k), o.seed);
            let csv = ablation_csv(&rows);
            write(&o.out, &format!("{stem}.csv"), &csv)?;
            write_json(o, "ablate", &stem, &cfg, &rows)?;
            print!("{csv}");
        }
        Command::Sweep { data, train, ks } => {
            check_train(train);
            check_ks(ks);
            let (gallery, queries) = benchmark_set(o, data, train)?;
            let ks = if ks.is_empty() {
                vec![8, 16, 32, 64, gallery.len()]
            } else {
                ks.clone()
            };
            let rows = k_sweep(&gallery, &queries, &ks, o.reps, o.warmup, &retrieval_config(o))?;
            let stem = format!("sweep-seed{}", o.seed);
            let csv = sweep_csv(&rows);
            write(&o.out, &format!("{stem}.csv"), &csv)?;
            write_json(o, "sweep", &stem, (data, train, &ks), &rows)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    check_ranges(&cli.opts);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
