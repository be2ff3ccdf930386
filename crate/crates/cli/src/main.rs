//! `dq`: training, evaluation, lowering, latency benchmarks and the
//! quantization studies. Every command writes `summary.json` (flags,
//! resolved configuration, version, seed, results) into its output
//! directory, next to any CSV tables it produces.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use degree_quant::Error;
use degree_quant::checkpoint::{load_model, model_to_bytes, save_model};
use degree_quant::graph::{citation_surrogate, gen_synthetic_with, write_graph_json, FeatureInit, GraphKind, Split, SurrogateConfig};
use degree_quant::int::bench::{benchmark, BenchOptions, SyntheticSetup, MIN_REPS, MIN_WARMUP};
use degree_quant::int::kernels::Isa;
use degree_quant::int::{agreement, lower};
use degree_quant::layers::{Arch, Prepared, SiteKind};
use degree_quant::model::ModelSpec;
use degree_quant::quant::{ObserverKind, Ste};
use degree_quant::studies::{self, AggregationOptions};
use degree_quant::train::trainer::loss_and_accuracy;
use degree_quant::train::{evaluate, Ablation, DqConfig, NqatConfig, Regime, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "dq", version, about = "Degree-aware quantization-aware training and integer inference for GNNs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Serialize)]
struct Common {
    /// `cora`, `citeseer`, `surrogate`, or a graph JSON file.
    #[arg(long, global = true, default_value = "cora")]
    dataset: String,
    #[arg(long, global = true)]
    arch: Option<Arch>,
    #[arg(long, global = true)]
    regime: Option<Regime>,
    #[arg(long, global = true)]
    bits: Option<u32>,
    #[arg(long, global = true)]
    ste: Option<Ste>,
    #[arg(long, global = true)]
    observer: Option<ObserverKind>,
    #[arg(long, global = true)]
    p_min: Option<f32>,
    #[arg(long, global = true)]
    p_max: Option<f32>,
    #[arg(long, global = true)]
    noise_rate: Option<f32>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Seeded repetitions (default 1 for `train`, 10 for the studies).
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Output directory (default `out/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training configuration JSON; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads of the benchmark pool.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, default_value_t = MIN_REPS)]
    reps: usize,
    #[arg(long, global = true, default_value_t = MIN_WARMUP)]
    warmup: usize,
    /// Seeds trained concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand, Clone, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Train node classifiers and save their checkpoints.
    Train {
        /// Also trace min/max and percentile ranges of the first aggregate.
        #[arg(long)]
        trace_ranges: bool,
    },
    /// Accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Run the lowered integer pipeline instead of fake quantization.
        #[arg(long)]
        int: bool,
    },
    /// Convert a quantized checkpoint into an integer model.
    Lower {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Compare against fake-quantized evaluation on the dataset.
        #[arg(long)]
        verify: bool,
    },
    /// Integer versus full-precision forward latency.
    Bench {
        /// Benchmark this checkpoint on the dataset instead of a synthetic setup.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        nodes: usize,
        #[arg(long, default_value_t = 128)]
        features: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 5)]
        edges_per_node: usize,
        /// `scalar`, `avx2` or `avx512`; detected when unset.
        #[arg(long)]
        isa: Option<String>,
    },
    /// Plain QAT under the four STE/observer combinations.
    SweepSte,
    /// Hub aggregate statistics on star graphs.
    AnalyzeAggregation {
        /// Full-precision checkpoint; random initialization when unset.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "star")]
        graph_family: String,
        #[arg(long, value_delimiter = ',', default_value = "4,16,64,256")]
        degrees: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        resamples: usize,
    },
    /// 8-bit QAT with single site families at 4 bits.
    Degrade {
        /// One site; the baseline and every site of the architecture when unset.
        #[arg(long)]
        site: Option<SiteKind>,
        /// 8-bit checkpoint supplying architecture and configuration.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Protection with one of its two components removed.
    Ablate {
        #[arg(long)]
        mode: Ablation,
    },
    /// Write a synthetic graph as JSON.
    GenData {
        /// `er`, `pa`, `star` or `surrogate`.
        #[arg(long, default_value = "pa")]
        kind: String,
        #[arg(long, default_value_t = 1000)]
        nodes: usize,
        /// Edge probability (er) or edges per new node (pa).
        #[arg(long, default_value_t = 5.0)]
        param: f64,
        #[arg(long, default_value_t = 16)]
        features: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Lower { .. } => "lower",
            Command::Bench { .. } => "bench",
            Command::SweepSte => "sweep-ste",
            Command::AnalyzeAggregation { .. } => "analyze-aggregation",
            Command::Degrade { .. } => "degrade",
            Command::Ablate { .. } => "ablate",
            Command::GenData { .. } => "gen-data",
        }
    }
}

fn version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("DQ_GIT_REV"))
}

struct Run {
    common: Common,
    out: PathBuf,
}

impl Run {
    fn seed(&self) -> u64 {
        self.common.seed.unwrap_or(0)
    }

    fn arch(&self) -> Arch {
        self.common.arch.unwrap_or(Arch::Gcn)
    }

    fn runs(&self, default: usize) -> usize {
        self.common.runs.unwrap_or(default)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Training configuration from the config file (if any) and flags.
    fn train_config(&self) -> Result<TrainConfig> {
        let c = &self.common;
        let mut cfg = match &c.config {
            Some(p) => TrainConfig::from_json_file(p)?,
            None => TrainConfig::new(c.regime.unwrap_or(Regime::Dq), c.bits.unwrap_or(8), 0),
        };
        if let Some(r) = c.regime {
            if r != cfg.regime {
                cfg.regime = r;
                cfg.dq = (r == Regime::Dq).then(DqConfig::default);
                cfg.nqat = (r == Regime::Nqat).then(NqatConfig::default);
                cfg.ablation = None;
            }
        }
        if cfg.regime == Regime::Fp32 {
            cfg.bits = 32;
        } else if let Some(b) = c.bits {
            cfg.bits = b;
        }
        cfg.ste = c.ste.or(cfg.ste);
        cfg.observer = c.observer.or(cfg.observer);
        if c.p_min.is_some() || c.p_max.is_some() {
            let Some(dq) = cfg.dq.as_mut() else { return Err(Error::Config("--p-min/--p-max need the dq regime".into()).into()) };
            dq.p_min = c.p_min.unwrap_or(dq.p_min);
            dq.p_max = c.p_max.unwrap_or(dq.p_max);
        }
        if let Some(r) = c.noise_rate {
            let Some(n) = cfg.nqat.as_mut() else { return Err(Error::Config("--noise-rate needs the nqat regime".into()).into()) };
            n.noise_rate = r;
        }
        if let Some(e) = c.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct RunRow {
    seed: u64,
    test_acc: f64,
    best_val_acc: f64,
    best_epoch: usize,
    wall_clock_s: f64,
}

fn execute(run: &Run, command: &Command) -> Result<(Option<TrainConfig>, Value)> {
    let c = &run.common;
    match command {
        Command::Train { trace_ranges } => {
            let cfg = run.train_config()?;
            let graph = studies::load_dataset(&c.dataset, cfg.seed)?;
            let arch = run.arch();
            let spec = ModelSpec::citation(arch, graph.num_features(), graph.num_classes());
            let trained = studies::repeat_training(&graph, &spec, &cfg, run.runs(1), c.parallel)?;
            let mut rows = Vec::new();
            for t in &trained {
                let m = &t.metrics;
                save_model(&run.path(&format!("model-seed{}.dqm", m.seed)), &t.model, Some(&m.config))?;
                m.write_epoch_csv(&run.path(&format!("epochs-seed{}.csv", m.seed)))?;
                rows.push(RunRow {
                    seed: m.seed,
                    test_acc: m.test_acc,
                    best_val_acc: m.best_val_acc,
                    best_epoch: m.best_epoch,
                    wall_clock_s: m.wall_clock_s,
                });
            }
            run.write_csv("runs.csv", &rows)?;
            let metrics: Vec<_> = trained.iter().map(|t| &t.metrics).collect();
            let summary = studies::summarize(&metrics.iter().map(|m| m.test_acc).collect::<Vec<_>>());
            let mut results = json!({ "arch": arch, "test_acc": summary, "runs": rows });
            if *trace_ranges {
                let trace = studies::range_drift(&graph, arch, &cfg)?;
                run.write_csv("ranges.csv", &trace.rows)?;
                results["range_ratio"] = json!(trace.max_ratio);
            }
            Ok((Some(cfg), results))
        }
        Command::Eval { checkpoint, split, int } => {
            let ck = load_model(checkpoint)?;
            let mut model = ck.model;
            let graph = studies::load_dataset(&c.dataset, run.seed())?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(Error::Config(format!("unknown split {other:?}")).into()),
            };
            let (loss, acc) = if *int {
                let logits = lower(&model)?.predict(&graph)?;
                loss_and_accuracy(&logits, graph.y(), &graph.split_rows(split))
            } else {
                evaluate(&mut model, &graph, split)?
            };
            Ok((ck.config, json!({ "split": format!("{split:?}").to_lowercase(), "loss": loss, "accuracy": acc, "int": int })))
        }
        Command::Lower { checkpoint, verify } => {
            let ck = load_model(checkpoint)?;
            let int = lower(&ck.model)?;
            let path = run.path("model.dqi");
            int.save(&path)?;
            let int_bytes = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            let float_bytes = model_to_bytes(&ck.model, ck.config.as_ref())?.len() as u64;
            let mut results = json!({
                "output": path,
                "int_bytes": int_bytes,
                "float_bytes": float_bytes,
                "size_ratio": int_bytes as f64 / float_bytes as f64,
            });
            if *verify {
                let graph = studies::load_dataset(&c.dataset, run.seed())?;
                results["agreement"] = json!(agreement(&ck.model, &graph, Isa::detect())?);
            }
            Ok((ck.config, results))
        }
        Command::Bench { checkpoint, nodes, features, layers, edges_per_node, isa } => {
            let isa = match isa {
                None => None,
                Some(name) => Some(
                    Isa::available()
                        .into_iter()
                        .find(|i| i.name() == name)
                        .with_context(|| format!("kernel variant {name:?} is unknown or unsupported on this CPU"))?,
                ),
            };
            let opts = BenchOptions { reps: c.reps, warmup: c.warmup, threads: c.threads, isa };
            let (model, graph, name) = match checkpoint {
                Some(p) => {
                    let graph = studies::load_dataset(&c.dataset, run.seed())?;
                    (load_model(p)?.model, graph, c.dataset.clone())
                }
                None => {
                    let setup = SyntheticSetup {
                        arch: run.arch(),
                        nodes: *nodes,
                        features: *features,
                        layers: *layers,
                        edges_per_node: *edges_per_node,
                        seed: run.seed(),
                        ..SyntheticSetup::default()
                    };
                    let (m, g) = setup.build()?;
                    (m, g, format!("pa-{nodes}"))
                }
            };
            let results = benchmark(&model, &graph, &name, &opts)?;
            fs::write(run.path("bench.json"), serde_json::to_string_pretty(&results)?)?;
            Ok((None, json!(results)))
        }
        Command::SweepSte => {
            let cfg = run.train_config()?;
            let graph = studies::load_dataset(&c.dataset, cfg.seed)?;
            let bits = c.bits.unwrap_or(8);
            let rows = studies::sweep_ste(&graph, run.arch(), bits, &cfg, run.runs(10), c.parallel)?;
            run.write_csv("sweep_ste.csv", &rows)?;
            Ok((Some(cfg), json!(rows)))
        }
        Command::AnalyzeAggregation { checkpoint, graph_family, degrees, resamples } => {
            if graph_family != "star" {
                return Err(Error::Config(format!("aggregation statistics support the star family only, got {graph_family:?}")).into());
            }
            let opts = AggregationOptions { degrees: degrees.clone(), resamples: *resamples, seed: run.seed() };
            let models = match (checkpoint, c.arch) {
                (Some(p), _) => vec![load_model(p)?.model],
                (None, Some(a)) => vec![studies::random_fp32_model(a, run.seed())?],
                (None, None) => [Arch::Gcn, Arch::Gat, Arch::Gin]
                    .into_iter()
                    .map(|a| studies::random_fp32_model(a, run.seed()))
                    .collect::<degree_quant::Result<_>>()?,
            };
            let reports = models.iter().map(|m| studies::analyze_aggregation(m, &opts)).collect::<degree_quant::Result<Vec<_>>>()?;
            let rows: Vec<_> = reports.iter().flat_map(|r| r.rows.clone()).collect();
            run.write_csv("aggregation.csv", &rows)?;
            let slopes: Vec<_> = reports.iter().map(|r| json!({ "arch": r.arch, "slope": r.slope })).collect();
            Ok((None, json!({ "slopes": slopes, "rows": rows })))
        }
        Command::Degrade { site, checkpoint } => {
            let (arch, cfg) = match checkpoint {
                Some(p) => {
                    let ck = load_model(p)?;
                    let mut cfg = match ck.config {
                        Some(cfg) => cfg,
                        None => run.train_config()?,
                    };
                    if let Some(s) = c.seed {
                        cfg.seed = s;
                    }
                    (ck.model.spec.arch, cfg)
                }
                None => (run.arch(), run.train_config()?),
            };
            let graph = studies::load_dataset(&c.dataset, cfg.seed)?;
            let sites: Vec<Option<SiteKind>> = match site {
                Some(s) => vec![Some(*s)],
                None => std::iter::once(None).chain(SiteKind::for_arch(arch).into_iter().map(Some)).collect(),
            };
            let rows = sites
                .into_iter()
                .map(|s| studies::degrade(&graph, arch, s, &cfg, run.runs(10), c.parallel))
                .collect::<degree_quant::Result<Vec<_>>>()?;
            run.write_csv("degrade.csv", &rows)?;
            Ok((Some(cfg), json!(rows)))
        }
        Command::Ablate { mode } => {
            let cfg = studies::ablation_config(&run.train_config()?, *mode);
            let graph = studies::load_dataset(&c.dataset, cfg.seed)?;
            let row = studies::ablate(&graph, run.arch(), *mode, &cfg, run.runs(10), c.parallel)?;
            run.write_csv("ablate.csv", std::slice::from_ref(&row))?;
            Ok((Some(cfg), json!(row)))
        }
        Command::GenData { kind, nodes, param, features } => {
            let graph = match kind.as_str() {
                "surrogate" => {
                    let cfg = SurrogateConfig { num_nodes: *nodes, num_features: *features, ..SurrogateConfig::default() };
                    citation_surrogate(&cfg, run.seed())?
                }
                k => {
                    let kind: GraphKind = k.parse()?;
                    gen_synthetic_with(kind, *nodes, *param, run.seed(), *features, FeatureInit::Normal)?
                }
            };
            let path = run.path("graph.json");
            write_graph_json(&graph, &path)?;
            // Round trip through the reader so the file is known to load.
            let back = studies::load_dataset(path.to_str().context("non-UTF-8 output path")?, 0)?;
            let _ = Prepared::new(&back);
            Ok((None, json!({ "output": path, "nodes": graph.num_nodes(), "edges": graph.num_edges() })))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out = cli.common.out.clone().unwrap_or_else(|| Path::new("out").join(cli.command.name()));
    let run = Run { common: cli.common.clone(), out };
    let start = Instant::now();
    let result = fs::create_dir_all(&run.out)
        .with_context(|| format!("cannot create {}", run.out.display()))
        .and_then(|_| execute(&run, &cli.command));
    let (status, config, results, error) = match result {
        Ok((config, results)) => ("ok", config, results, None),
        Err(e) => {
            let nonfinite = matches!(e.downcast_ref(), Some(Error::NonFinite { .. }));
            (if nonfinite { "nan_abort" } else { "error" }, None, Value::Null, Some(e))
        }
    };
    let summary = json!({
        "command": cli.command.name(),
        "status": status,
        "version": version(),
        "seed": run.common.seed.unwrap_or(0),
        "flags": run.common,
        "args": cli.command,
        "config": config,
        "results": results,
        "error": error.as_ref().map(|e| format!("{e:#}")),
        "wall_clock_s": start.elapsed().as_secs_f64(),
    });
    let path = run.out.join("summary.json");
    let written = serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from).and_then(|s| {
        fs::write(&path, s).with_context(|| format!("cannot write {}", path.display()))
    });
    if let Err(e) = &written {
        eprintln!("error: {e:#}");
    }
    match (error, status) {
        (None, _) if written.is_ok() => {
            println!("{}", serde_json::to_string_pretty(&summary["results"]).unwrap_or_default());
            ExitCode::SUCCESS
        }
        (None, _) => ExitCode::FAILURE,
        (Some(e), "nan_abort") => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        (Some(e), _) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref(), Some(Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
