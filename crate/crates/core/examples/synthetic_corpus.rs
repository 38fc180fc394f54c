//! Writes a small synthetic corpus (train split, held-out test split and
//! web images) for trying the CLI.
//!
//! cargo run --release -p dgnet --example synthetic_corpus -- DIR [IDENTITIES]

use std::path::PathBuf;
use std::process::ExitCode;

use dgnet::dataset::synthetic::{SyntheticConfig, SyntheticCorpus};
use dgnet::dataset::Split;

fn main() -> ExitCode {
    let mut args = std::env::args().skip(1);
    let Some(dir) = args.next().map(PathBuf::from) else {
        eprintln!("usage: synthetic_corpus DIR [IDENTITIES]");
        return ExitCode::from(2);
    };
    let identities = match args.next().map(|s| s.parse::<usize>()) {
        None => 8,
        Some(Ok(n)) => n,
        Some(Err(e)) => {
            eprintln!("bad identity count: {e}");
            return ExitCode::from(2);
        }
    };
    let train = SyntheticConfig {
        identities,
        impostors: 3,
        web: 2,
        ..SyntheticConfig::default()
    };
    let test = SyntheticConfig {
        instance_seed: 1,
        split: Split::Test,
        web: 0,
        ..train.clone()
    };
    let result = SyntheticCorpus::generate(&train).and_then(|mut c| {
        c.extend(SyntheticCorpus::generate(&test)?);
        c.write_to_dir(&dir)
    });
    match result {
        Ok(manifest) => {
            println!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
