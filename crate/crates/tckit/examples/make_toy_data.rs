//! Writes a small synthetic topic-classification dataset for trying
//! out the CLI: train.jsonl, test.jsonl, and labels.txt.
//!
//!     cargo run -p tckit --example make_toy_data -- data/ [seed]

use std::fs;
use std::path::PathBuf;

use tckit::corpus::{generate_toy_corpus, save_corpus};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("data"));
    let seed: u64 = args.get(2).map(|s| s.parse().expect("seed")).unwrap_or(33);
    fs::create_dir_all(&dir).expect("create output directory");

    let toy = generate_toy_corpus(50, 25, seed);
    save_corpus(&dir.join("train.jsonl"), &toy.train).unwrap();
    save_corpus(&dir.join("test.jsonl"), &toy.test).unwrap();
    fs::write(dir.join("labels.txt"), toy.labels.labels().join("\n")).unwrap();
    println!(
        "wrote {} train / {} test records over {} topics to {}",
        toy.train.len(),
        toy.test.len(),
        toy.labels.len(),
        dir.display()
    );
}
