//! Writes the synthetic linking dataset: `make_synthetic [DIR] [SEED]`.

use std::path::PathBuf;

use mimic_core::synthetic::{write_synthetic, SyntheticSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/synthetic".into()));
    let seed = args
        .next()
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    match write_synthetic(&dir, &spec) {
        Ok(ds) => println!(
            "wrote {} entities and {} mentions to {}",
            ds.kb.len(),
            ds.mentions.len(),
            ds.root.display()
        ),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    }
}
