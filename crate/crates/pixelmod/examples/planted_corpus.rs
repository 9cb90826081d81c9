//! Writes a synthetic corpus with known near-duplicates to a directory.
//!
//! `cargo run -p pixelmod --example planted_corpus -- OUT_DIR`

use pixelmod::synth::{planted_corpus, PlantedSpec};

fn main() -> std::io::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "planted".into());
    let corpus = planted_corpus(7, PlantedSpec::default());
    let (manifest, seeds) = corpus.write_to_dir(out.as_ref())?;
    println!("{}\n{}", manifest.display(), seeds.display());
    Ok(())
}
