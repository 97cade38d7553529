use std::collections::BTreeSet;

use stockmove::dataset::{
    build_sample_store, generate_samples, load_corpus, load_tweets, SampleStore, Split, SplitSpec,
};
use stockmove::embeddings::build_pseudo_cache;
use stockmove::experiments::{expand_grid, records_to_csv, run_grid, Grid};
use stockmove::models::{Arch, ModelConfig, StockModel};
use stockmove::synthetic::{separable_store, write_corpus, CorpusSpec, SeparableSpec};
use stockmove::training::{train, TrainConfig};

fn corpus_store(stocks: usize, dim: usize, root: &std::path::Path) -> (SampleStore, usize) {
    let paths = write_corpus(root, &CorpusSpec { stocks, seed: 4, ..CorpusSpec::default() }).unwrap();
    let (tweets, _) = load_tweets(&paths.tweets).unwrap();
    let cache = build_pseudo_cache(&tweets, dim, 0).unwrap();
    let corpus = load_corpus(&paths.prices, Some(&paths.tweets)).unwrap();
    let samples = generate_samples(&corpus.prices, &corpus.tweet_dates(), &SplitSpec::default(), false).unwrap();
    let out = root.join("store.stkf");
    build_sample_store(&samples, &cache, &out).unwrap();
    (SampleStore::open(&out).unwrap(), samples.len())
}

#[test]
fn store_conserves_samples_and_keeps_splits_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let (store, generated) = corpus_store(3, 8, dir.path());
    assert_eq!(store.summary().total(), generated);
    let spec = SplitSpec::default();
    let mut keys = BTreeSet::new();
    for split in Split::ALL {
        for s in store.samples(split) {
            assert_eq!(spec.assign(s.target_date), Some(split));
            assert!(keys.insert((s.stock.clone(), s.target_date)));
        }
    }
}

#[test]
fn require_tweets_only_removes_samples() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_corpus(dir.path(), &CorpusSpec { stocks: 3, tweet_rate: 0.1, ..CorpusSpec::default() }).unwrap();
    let corpus = load_corpus(&paths.prices, Some(&paths.tweets)).unwrap();
    let dates = corpus.tweet_dates();
    let all = generate_samples(&corpus.prices, &dates, &SplitSpec::default(), false).unwrap();
    let kept = generate_samples(&corpus.prices, &dates, &SplitSpec::default(), true).unwrap();
    assert!(kept.stats.dropped_without_tweets > 0);
    assert_eq!(kept.len() + kept.stats.dropped_without_tweets, all.len());
}

#[test]
fn every_architecture_reduces_training_loss() {
    let store = separable_store(&SeparableSpec { train: 64, validation: 32, test: 8, embed_dim: 16, ..SeparableSpec::default() }).unwrap();
    let variants = [
        (Arch::Feedforward, false),
        (Arch::FusionTransformer, false),
        (Arch::FusionTransformer, true),
        (Arch::CrossAttention, false),
        (Arch::CrossAttention, true),
    ];
    for (arch, auxiliary) in variants {
        let cfg = ModelConfig {
            arch,
            auxiliary,
            layers: 1,
            heads: 2,
            dim_ff: 16,
            dim_key: 8,
            embed_dim: 16,
            ..ModelConfig::default()
        };
        let mut model = StockModel::new(cfg, 2).unwrap();
        let train_cfg = TrainConfig { learning_rate: 1e-3, batch_size: 16, max_epochs: 5, patience: 10, ..TrainConfig::default() };
        let report = train(&mut model, &store, &train_cfg).unwrap();
        let first = report.epochs.first().unwrap().train_loss;
        let last = report.epochs.last().unwrap().train_loss;
        assert!(last < first, "{arch} aux={auxiliary}: {first} -> {last}");
    }
}

fn small_grid() -> Grid {
    Grid::parse(
        "arch = feedforward, fusion_transformer, cross_attention\n\
         N = 1\nh = 2\ndim_ff = 16\ndim_key = 8\ndropout = 0.1\n\
         auxiliary = false, true\naux_weight = 0.5\nlr = 1e-3\nseed = 3\n",
    )
    .unwrap()
}

#[test]
fn grid_results_do_not_depend_on_parallelism() {
    let store = separable_store(&SeparableSpec { train: 32, validation: 16, test: 16, embed_dim: 8, ..SeparableSpec::default() }).unwrap();
    let expansion = expand_grid(&small_grid(), 8).unwrap();
    assert_eq!(expansion.configs.len(), 5);
    let cfg = TrainConfig { batch_size: 8, max_epochs: 3, ..TrainConfig::default() };
    let serial = run_grid(&expansion.configs, &store, &cfg, 1).unwrap();
    let parallel = run_grid(&expansion.configs, &store, &cfg, 2).unwrap();
    assert!(serial.iter().all(|r| r.outcome.is_ok()));
    assert_eq!(records_to_csv(&serial).unwrap(), records_to_csv(&parallel).unwrap());
}

#[test]
fn diverging_run_is_recorded_and_others_complete() {
    let store = separable_store(&SeparableSpec { train: 32, validation: 16, test: 16, embed_dim: 8, ..SeparableSpec::default() }).unwrap();
    let grid = Grid::parse("arch = fusion_transformer\nN = 1\nh = 2\ndim_ff = 16\ndim_key = 8\nauxiliary = false\nlr = 1e-3, 1e300\n").unwrap();
    let expansion = expand_grid(&grid, 8).unwrap();
    let cfg = TrainConfig { batch_size: 8, max_epochs: 3, ..TrainConfig::default() };
    let records = run_grid(&expansion.configs, &store, &cfg, 2).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records[0].outcome.is_ok());
    let err = records[1].outcome.as_ref().unwrap_err();
    assert!(err.contains("finite"), "{err}");
    let csv = records_to_csv(&records).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
