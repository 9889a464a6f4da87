//! Writes a small random model and dataset for trying the CLI:
//! `cargo run -p attnscope --example make_toy -- <dir> [n_sequences]`.

use std::path::PathBuf;

use attnscope_core::model::{EncoderConfig, ModelWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "toy".into()));
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(8);
    std::fs::create_dir_all(&dir)?;

    let config = EncoderConfig::toy(2, 2, 8, 4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let weights = ModelWeights::<f64>::random_dense(&config, 0.5, &mut rng)?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;
    weights.to_archive(&config).write(dir.join("weights.hta"))?;

    let mut lines = Vec::new();
    for i in 0..n {
        let len = rng.random_range(2..=4);
        let mut ids = vec![1];
        ids.extend((1..len - 1).map(|_| rng.random_range(3..config.vocab_size)));
        ids.push(2);
        let line = serde_json::json!({
            "id": format!("s{i}"),
            "token_ids": ids,
            "segment_ids": vec![0; len],
        });
        lines.push(line.to_string());
    }
    std::fs::write(dir.join("data.jsonl"), lines.join("\n") + "\n")?;
    println!(
        "wrote {}/{{config.json,weights.hta,data.jsonl}}",
        dir.display()
    );
    Ok(())
}
