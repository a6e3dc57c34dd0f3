//! Retrains the bundled codec fixture and reports reconstruction PSNR.
//!
//! cargo run --release --example train_codec -- crates/core/fixtures/codec.bin

use std::time::Instant;

use xmdpt::metrics::psnr;
use xmdpt::toy_world::{CodecTrainConfig, Corpus, CorpusConfig, Split, ToyCodec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "codec.bin".into());
    let corpus = Corpus::generate(&CorpusConfig::default())?;
    let train = corpus.person_images(Split::Train);
    let test = corpus.person_images(Split::Test);
    let start = Instant::now();
    let codec = ToyCodec::train(&train, &CodecTrainConfig::default())?;
    println!("trained on {} images in {:.0?}", train.len(), start.elapsed());
    let recon = codec.decode_batch(&codec.encode_batch(&test)?)?;
    let mut total = 0.0;
    for (a, b) in test.iter().zip(&recon) {
        total += psnr(a, b)?;
    }
    println!("test PSNR {:.2} dB over {} images", total / test.len() as f64, test.len());
    std::fs::write(&out, codec.to_bytes())?;
    println!("wrote {out}");
    Ok(())
}
