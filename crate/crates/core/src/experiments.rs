//! Hyperparameter grids: parsing, expansion, execution and reporting.
//!
//! Grid files hold one `key = v1, v2, ...` line per hyperparameter. Blank
//! lines and `#` comments are ignored. Keys: `arch`, `layers`, `heads`,
//! `dim_ff`, `dim_key`, `dropout`, `auxiliary`, `aux_weight`,
//! `learning_rate`, `seed`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{SampleStore, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::models::{Arch, ModelConfig, StockModel};
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub arch: Vec<Arch>,
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub dim_ff: Vec<usize>,
    pub dim_key: Vec<usize>,
    pub dropout: Vec<f64>,
    pub auxiliary: Vec<bool>,
    pub aux_weight: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub seed: Vec<u64>,
}

impl Default for Grid {
    fn default() -> Self {
        let m = ModelConfig::default();
        Grid {
            arch: vec![m.arch],
            layers: vec![m.layers],
            heads: vec![m.heads],
            dim_ff: vec![m.dim_ff],
            dim_key: vec![m.dim_key],
            dropout: vec![m.dropout],
            auxiliary: vec![false],
            aux_weight: vec![0.3, 0.5],
            learning_rate: vec![TrainConfig::default().learning_rate],
            seed: vec![0],
        }
    }
}

fn parse_list<T: FromStr>(key: &'static str, raw: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::config(key, format!("cannot parse {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::config(key, "empty candidate list"));
    }
    Ok(items)
}

impl Grid {
    /// Parses a grid file body. Keys absent from the file keep their
    /// defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = Grid::default();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, values) = line.split_once('=').ok_or_else(|| {
                Error::config("grid", format!("line {}: expected `key = values`", n + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config("grid", format!("line {}: duplicate key {key}", n + 1)));
            }
            match key {
                "arch" => grid.arch = parse_list("arch", values)?,
                "layers" | "N" => grid.layers = parse_list("layers", values)?,
                "heads" | "h" => grid.heads = parse_list("heads", values)?,
                "dim_ff" => grid.dim_ff = parse_list("dim_ff", values)?,
                "dim_key" => grid.dim_key = parse_list("dim_key", values)?,
                "dropout" => grid.dropout = parse_list("dropout", values)?,
                "auxiliary" => grid.auxiliary = parse_list("auxiliary", values)?,
                "aux_weight" => grid.aux_weight = parse_list("aux_weight", values)?,
                "learning_rate" | "lr" => grid.learning_rate = parse_list("learning_rate", values)?,
                "seed" => grid.seed = parse_list("seed", values)?,
                other => {
                    return Err(Error::config("grid", format!("line {}: unknown key {other:?}", n + 1)))
                }
            }
        }
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Grid::parse(&text)
    }

    /// Size of the full Cartesian product.
    pub fn combinations(&self) -> usize {
        self.arch.len()
            * self.layers.len()
            * self.heads.len()
            * self.dim_ff.len()
            * self.dim_key.len()
            * self.dropout.len()
            * self.auxiliary.len()
            * self.aux_weight.len()
            * self.learning_rate.len()
            * self.seed.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    /// Grid-level seed; the run seed is derived from it and the config.
    pub seed: u64,
}

impl ExperimentConfig {
    /// Canonical text used for hashing and de-duplication.
    pub fn key(&self) -> String {
        serde_json::to_string(self).expect("plain config serializes")
    }

    /// Seed for weight initialization and shuffling, a hash of the grid
    /// seed and the canonical config.
    pub fn run_seed(&self) -> u64 {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(self.key().as_bytes())
            .finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn label(&self) -> String {
        let m = &self.model;
        let base = match m.arch {
            Arch::Feedforward => "Feedforward",
            Arch::FusionTransformer => "Transformer",
            Arch::CrossAttention => "Cross-Attention",
        };
        if m.auxiliary {
            format!("Auxiliary {base}")
        } else {
            base.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub configs: Vec<ExperimentConfig>,
    /// Combination description and reason for every skipped combination.
    pub skipped: Vec<(String, String)>,
}

/// Cartesian product of the grid in a fixed order. Invalid combinations
/// and combinations equivalent to an earlier one (unused hyperparameters
/// of feedforward or non-auxiliary models) are skipped and logged.
pub fn expand_grid(grid: &Grid, embed_dim: usize) -> Result<Expansion> {
    let mut configs = Vec::new();
    let mut skipped = Vec::new();
    let mut keys = BTreeSet::new();
    for &arch in &grid.arch {
        for &layers in &grid.layers {
            for &heads in &grid.heads {
                for &dim_ff in &grid.dim_ff {
                    for &dim_key in &grid.dim_key {
                        for &dropout in &grid.dropout {
                            for &auxiliary in &grid.auxiliary {
                                for &aux_weight in &grid.aux_weight {
                                    for &learning_rate in &grid.learning_rate {
                                        for &seed in &grid.seed {
                                            let raw = ModelConfig {
                                                arch,
                                                layers,
                                                heads,
                                                dim_ff,
                                                dim_key,
                                                dropout,
                                                auxiliary,
                                                aux_weight,
                                                embed_dim,
                                                ..ModelConfig::default()
                                            };
                                            let desc = format!(
                                                "{arch} N={layers} h={heads} dim_ff={dim_ff} dim_key={dim_key} dropout={dropout} auxiliary={auxiliary} aux_weight={aux_weight} lr={learning_rate} seed={seed}"
                                            );
                                            if let Err(e) = raw.validate() {
                                                log::warn!("skipping {desc}: {e}");
                                                skipped.push((desc, e.to_string()));
                                                continue;
                                            }
                                            let exp = ExperimentConfig {
                                                model: canonical(raw),
                                                learning_rate,
                                                seed,
                                            };
                                            if !(learning_rate > 0.0) {
                                                let reason = "learning_rate must be positive".to_string();
                                                skipped.push((desc, reason));
                                                continue;
                                            }
                                            if !keys.insert(exp.key()) {
                                                log::info!("skipping {desc}: duplicate of an earlier run");
                                                skipped.push((desc, "duplicate of an earlier run".into()));
                                                continue;
                                            }
                                            configs.push(exp);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if configs.is_empty() {
        return Err(Error::config("grid", "every combination is invalid"));
    }
    Ok(Expansion { configs, skipped })
}

/// Resets hyperparameters that a configuration does not use.
fn canonical(mut m: ModelConfig) -> ModelConfig {
    let d = ModelConfig::default();
    if !m.arch.is_transformer() {
        m.layers = 0;
        m.heads = 0;
        m.dim_key = 0;
    }
    if !m.auxiliary {
        m.aux_weight = d.aux_weight;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_loss: f64,
    pub validation: EvalReport,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub run_seed: u64,
    pub outcome: std::result::Result<RunSummary, String>,
    pub seconds: f64,
}

impl RunRecord {
    pub fn summary(&self) -> Option<&RunSummary> {
        self.outcome.as_ref().ok()
    }
}

fn run_one(exp: &ExperimentConfig, store: &SampleStore, base: &TrainConfig) -> Result<RunSummary> {
    let seed = exp.run_seed();
    let mut model = StockModel::new(exp.model.clone(), seed)?;
    let cfg = TrainConfig {
        learning_rate: exp.learning_rate,
        seed,
        ..*base
    };
    let report = train(&mut model, store, &cfg)?;
    Ok(RunSummary {
        best_epoch: report.best_epoch,
        stopped_epoch: report.stopped_epoch,
        best_val_loss: report.best_val_loss,
        validation: evaluate(&model, store, Split::Validation, cfg.batch_size)?,
        test: evaluate(&model, store, Split::Test, cfg.batch_size)?,
    })
}

/// Trains and evaluates every config on a pool of `parallelism` threads.
/// A failed run becomes a record with its diagnostic; records come back in
/// config order.
pub fn run_grid(
    configs: &[ExperimentConfig],
    store: &SampleStore,
    train_cfg: &TrainConfig,
    parallelism: usize,
) -> Result<Vec<RunRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Training(format!("cannot start worker pool: {e}")))?;
    let records = pool.install(|| {
        configs
            .par_iter()
            .map(|exp| {
                let start = Instant::now();
                let outcome = run_one(exp, store, train_cfg).map_err(|e| e.to_string());
                match &outcome {
                    Ok(s) => log::info!(
                        "{}: test accuracy={:.3} mcc={:.5}",
                        exp.label(),
                        s.test.accuracy,
                        s.test.mcc
                    ),
                    Err(e) => log::warn!("{} failed: {e}", exp.label()),
                }
                RunRecord {
                    config: exp.clone(),
                    run_seed: exp.run_seed(),
                    outcome,
                    seconds: start.elapsed().as_secs_f64(),
                }
            })
            .collect()
    });
    Ok(records)
}

fn table_row(r: &RunRecord) -> [String; 9] {
    let m = &r.config.model;
    let trunk = |v: usize| if m.arch.is_transformer() { v.to_string() } else { String::new() };
    let (acc, mcc) = match &r.outcome {
        Ok(s) => (format!("{:.3}", s.test.accuracy), format!("{:.5}", s.test.mcc)),
        Err(_) => ("failed".into(), "failed".into()),
    };
    [
        r.config.label(),
        trunk(m.layers),
        trunk(m.heads),
        m.dim_ff.to_string(),
        trunk(m.dim_key),
        format!("{}", m.dropout),
        if m.auxiliary { format!("{}", m.aux_weight) } else { String::new() },
        acc,
        mcc,
    ]
}

/// Renders test-split results as an aligned text table, optionally sorted
/// by MCC descending (failed runs last).
pub fn render_table(records: &[RunRecord], sort_by_mcc: bool) -> String {
    let mut order: Vec<&RunRecord> = records.iter().collect();
    if sort_by_mcc {
        let key = |r: &RunRecord| r.summary().map_or(f64::NEG_INFINITY, |s| s.test.mcc);
        order.sort_by(|a, b| key(b).total_cmp(&key(a)));
    }
    let header = ["Model", "N", "h", "dim_ff", "dim_key", "dropout", "aux_weight", "Accuracy", "MCC"]
        .map(String::from);
    let rows: Vec<[String; 9]> = std::iter::once(header)
        .chain(order.into_iter().map(table_row))
        .collect();
    let widths: Vec<usize> = (0..9)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * 8));
        }
    }
    out
}

/// Machine-readable results, one row per record. Wall-clock time is left
/// out so that identical runs give identical files.
pub fn records_to_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record([
        "model", "arch", "layers", "heads", "dim_ff", "dim_key", "dropout", "auxiliary",
        "aux_weight", "learning_rate", "seed", "run_seed", "status", "best_epoch",
        "stopped_epoch", "val_accuracy", "val_mcc", "test_accuracy", "test_mcc", "error",
    ])
    .map_err(csv_err)?;
    for r in records {
        let m = &r.config.model;
        let mut row = vec![
            r.config.label(),
            m.arch.to_string(),
            m.layers.to_string(),
            m.heads.to_string(),
            m.dim_ff.to_string(),
            m.dim_key.to_string(),
            m.dropout.to_string(),
            m.auxiliary.to_string(),
            m.aux_weight.to_string(),
            r.config.learning_rate.to_string(),
            r.config.seed.to_string(),
            r.run_seed.to_string(),
        ];
        match &r.outcome {
            Ok(s) => row.extend([
                "ok".to_string(),
                s.best_epoch.to_string(),
                s.stopped_epoch.to_string(),
                s.validation.accuracy.to_string(),
                s.validation.mcc.to_string(),
                s.test.accuracy.to_string(),
                s.test.mcc.to_string(),
                String::new(),
            ]),
            Err(e) => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 6));
                row.push(e.clone());
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}
