//! Raw-pixel nearest-class accuracy and tie structure of the toy tasks.
//!
//! `cargo run --release --example pixel_audit -- [size] [palette] [shapes]`

use ctm_fewshot::synth::{pixel_audit, ToySpec};
use ctm_fewshot::EpisodeSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let mut toy = ToySpec::default();
    if let Some(&s) = args.first() {
        toy.size = s;
        toy.jitter_pos = if s < 32 { 1.0 } else { 2.0 };
    }
    if let Some(&p) = args.get(1) {
        toy.palette = p;
    }
    if let Some(&p) = args.get(2) {
        toy.shapes = p;
    }
    let spec = EpisodeSpec::new(5, 1, 15)?;
    let audit = pixel_audit(&toy, &spec, 1000, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("{audit:?}");
    Ok(())
}
