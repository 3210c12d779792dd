//! Trains one configuration and reports test accuracy.
//!
//! `cargo run --release --example toy_run -- <config> [key=value ...]`

use std::time::Instant;

use ctm_fewshot::episodes::Split;
use ctm_core::{Mode, Session};
use ctm_fewshot::harness::{eval_rng, evaluate, Trainer};
use ctm_fewshot::model::{accuracy, forward};
use ctm_fewshot::{Config, EpisodeSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut config = Config::load(args.next().ok_or("missing config path")?.as_ref())?;
    for kv in args {
        let (k, v) = kv.split_once('=').ok_or("overrides look like key=value")?;
        config.set(k.trim(), v.trim())?;
    }
    let source = config.source()?;
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone())?;
    let rows = trainer.train(source.as_ref())?;
    let train_s = start.elapsed().as_secs_f64();
    for r in &rows {
        println!("{} {} loss={:.4} acc={:.2}", r.split, r.episode, r.loss, r.accuracy);
    }
    let t = &config.train;
    let spec = EpisodeSpec { q: t.eval_q, ..config.episode };
    let report = evaluate(&trainer.store, &trainer.model, source.as_ref(), Split::Test, &spec, t.eval_episodes, t.seed)?;
    println!(
        "params={} train_s={train_s:.1} ms/ep={:.2} test={:.2} ci95={:.2}",
        trainer.store.num_params(),
        train_s * 1e3 / t.episodes.max(1) as f64,
        report.mean,
        report.ci95
    );
    let episode_stats: f64 = (0..t.eval_episodes)
        .map(|e| {
            let ep = source.sample(Split::Test, &spec, &mut eval_rng(t.seed, Split::Test, e)).unwrap();
            let mut sess = Session::new(&trainer.store, Mode::Train);
            let out = forward(&mut sess, &trainer.model, &ep).unwrap();
            accuracy(sess.tape.value(out.class_scores), &ep.query_labels)
        })
        .sum::<f64>()
        / t.eval_episodes as f64;
    println!("test_episode_stats={episode_stats:.2}");
    Ok(())
}
