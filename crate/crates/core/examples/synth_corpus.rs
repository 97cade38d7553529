//! Writes a synthetic StockNet-format corpus.
//!
//! ```text
//! cargo run -p stockmove-core --example synth_corpus -- OUT_DIR [STOCKS] [SEED]
//! ```

use std::path::PathBuf;

use stockmove::synthetic::{write_corpus, CorpusSpec};

fn main() -> stockmove::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(out) = args.next().map(PathBuf::from) else {
        eprintln!("usage: synth_corpus OUT_DIR [STOCKS] [SEED]");
        std::process::exit(2);
    };
    let stocks = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = CorpusSpec {
        stocks,
        seed,
        ..CorpusSpec::default()
    };
    let paths = write_corpus(&out, &spec)?;
    println!(
        "wrote {} stocks: prices in {}, tweets in {}",
        paths.tickers.len(),
        paths.prices.display(),
        paths.tweets.display()
    );
    Ok(())
}
