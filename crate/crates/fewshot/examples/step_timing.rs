//! Times training steps for a configuration file.
//!
//! `cargo run --release --example step_timing -- <config> [steps]`

use std::time::Instant;

use ctm_fewshot::harness::Trainer;
use ctm_fewshot::Config;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config = match args.next() {
        Some(path) => Config::load(path.as_ref())?,
        None => Config::default(),
    };
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let source = config.source()?;
    let mut trainer = Trainer::new(config)?;
    println!("parameters: {}", trainer.store.num_params());
    trainer.step(source.as_ref())?;
    let start = Instant::now();
    for _ in 0..steps {
        trainer.step(source.as_ref())?;
    }
    let per = start.elapsed().as_secs_f64() / steps as f64;
    println!("{:.2} ms per episode", per * 1e3);
    Ok(())
}
