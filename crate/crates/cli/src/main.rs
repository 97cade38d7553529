use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use stockmove::dataset::{build_sample_store, generate_samples, load_corpus, load_tweets, SampleStore, Split, SplitSpec};
use stockmove::embeddings::{build_pseudo_cache, read_cache, write_cache};
use stockmove::evaluation::evaluate;
use stockmove::experiments::{expand_grid, records_to_csv, render_table, run_grid, Grid};
use stockmove::models::{Arch, ModelConfig, StockModel};
use stockmove::training::{train, TrainConfig};
use stockmove::{Error, Result};

#[derive(Parser)]
#[command(name = "stockmove", version, about = "Stock movement prediction from prices and tweets")]
struct Cli {
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a StockNet-format corpus and write a sample store.
    Ingest {
        #[arg(long)]
        prices: PathBuf,
        #[arg(long)]
        tweets: PathBuf,
        /// Embedding cache (EMBC file).
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop windows in which no day has tweets.
        #[arg(long)]
        require_tweets: bool,
    },
    /// Write a deterministic stand-in embedding cache for a tweet corpus.
    PseudoEmbed {
        #[arg(long)]
        tweets: PathBuf,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best checkpoint.
    Train {
        #[arg(long)]
        store: PathBuf,
        /// JSON file with optional `model` and `train` sections.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch records as line-delimited JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
    },
    /// Run a hyperparameter grid and write a CSV of results.
    Grid {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with a `train` section shared by every run.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sort the printed table by test MCC.
        #[arg(long)]
        sort_mcc: bool,
    },
}

#[derive(Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunFile {
    model: Option<serde_json::Value>,
    train: TrainConfig,
}

fn read_run_file(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: RunFile = serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
    let model = match file.model {
        None => ModelConfig::default(),
        Some(value) => {
            if let Some(arch) = value.get("arch").and_then(|a| a.as_str()) {
                arch.parse::<Arch>()?;
            }
            serde_json::from_value(value).map_err(|e| Error::config("model", e.to_string()))?
        }
    };
    model.validate()?;
    file.train.validate()?;
    Ok((model, file.train))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            prices,
            tweets,
            cache,
            out,
            require_tweets,
        } => {
            let cache = read_cache(&cache)?;
            info!("cache: {} entries, dim {}, source {:?}", cache.len(), cache.dim(), cache.source_tag());
            let corpus = load_corpus(&prices, Some(&tweets))?;
            info!(
                "corpus: {} stocks, {} files, {} skipped tweet lines",
                corpus.prices.len(),
                corpus.files_read.len(),
                corpus.skipped_tweet_lines
            );
            let samples = generate_samples(&corpus.prices, &corpus.tweet_dates(), &SplitSpec::default(), require_tweets)?;
            let summary = build_sample_store(&samples, &cache, &out)?;
            println!(
                "ingest: wrote {} train={} validation={} test={} out_of_range={} dropped_without_tweets={} bytes={}",
                out.display(),
                summary.train,
                summary.validation,
                summary.test,
                samples.stats.out_of_range,
                samples.stats.dropped_without_tweets,
                summary.bytes
            );
        }
        Command::PseudoEmbed { tweets, dim, seed, out } => {
            if dim == 0 {
                return Err(Error::config("dim", "must be positive"));
            }
            let (by_stock, skipped) = load_tweets(&tweets)?;
            let cache = build_pseudo_cache(&by_stock, dim, seed)?;
            write_cache(&cache, &out)?;
            println!(
                "pseudo-embed: wrote {} entries={} dim={dim} skipped_lines={skipped}",
                out.display(),
                cache.len()
            );
        }
        Command::Train {
            store,
            config,
            out,
            seed,
            log,
        } => {
            let (model_cfg, mut train_cfg) = read_run_file(&config)?;
            if let Some(seed) = seed {
                train_cfg.seed = seed;
            }
            let store = SampleStore::open(&store)?;
            let mut model = StockModel::new(model_cfg, train_cfg.seed)?;
            info!("model: {} with {} parameters", model.config().arch, model.parameter_count());
            let report = train(&mut model, &store, &train_cfg)?;
            model.save(&out)?;
            if let Some(log) = log {
                std::fs::write(&log, report.to_jsonl()).map_err(|e| Error::io(&log, e))?;
            }
            println!(
                "train: wrote {} best_epoch={} stopped_epoch={} best_val_loss={:.6}",
                out.display(),
                report.best_epoch,
                report.stopped_epoch,
                report.best_val_loss
            );
        }
        Command::Evaluate {
            store,
            ckpt,
            split,
            batch_size,
        } => {
            let split: Split = split.parse()?;
            let store = SampleStore::open(&store)?;
            let model = StockModel::load(&ckpt)?;
            let report = evaluate(&model, &store, split, batch_size)?;
            info!("{}", report.to_record());
            println!("accuracy={:.3} mcc={:.5} split={} samples={}", report.accuracy, report.mcc, split, report.samples);
        }
        Command::Grid {
            store,
            grid,
            out,
            config,
            sort_mcc,
        } => {
            let grid = Grid::load(&grid)?;
            let train_cfg = match config {
                Some(path) => read_run_file(&path)?.1,
                None => TrainConfig::default(),
            };
            let store = SampleStore::open(&store)?;
            let expansion = expand_grid(&grid, store.embed_dim())?;
            info!("grid: {} runs, {} skipped", expansion.configs.len(), expansion.skipped.len());
            let jobs = if cli.jobs == 0 { rayon_threads() } else { cli.jobs };
            let records = run_grid(&expansion.configs, &store, &train_cfg, jobs)?;
            print!("{}", render_table(&records, sort_mcc));
            let csv = records_to_csv(&records)?;
            std::fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
            let failed = records.iter().filter(|r| r.outcome.is_err()).count();
            println!("grid: wrote {} runs={} failed={failed}", out.display(), records.len());
        }
    }
    Ok(())
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: cannot size worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
