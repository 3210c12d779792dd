//! Trainer determinism, checkpoint continuation, evaluation purity and export.

use ctm_fewshot::harness::{
    evaluate, export_embeddings, metrics_csv, parse_embeddings, Checkpoint, Trainer, METRICS_HEADER,
};
use ctm_fewshot::{Config, EpisodeSpec, Split};

fn tiny() -> Config {
    let mut c = Config::default();
    for (k, v) in [
        ("toy.size", "8"),
        ("episode.q", "2"),
        ("backbone.channels", "4,4,4,4"),
        ("backbone.pools", "true,false,false,false"),
        ("ctm.m2", "4"),
        ("ctm.m3", "4"),
        ("train.episodes", "150"),
        ("train.log_every", "10"),
        ("train.lr_drop_every", "60"),
        ("eval.every", "50"),
        ("eval.episodes", "6"),
        ("eval.q", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn run(config: &Config) -> (String, Trainer) {
    let source = config.source().unwrap();
    let mut t = Trainer::new(config.clone()).unwrap();
    let rows = t.train(source.as_ref()).unwrap();
    (metrics_csv(&rows), t)
}

#[test]
fn fixed_seed_reruns_are_byte_identical() {
    let (a, ta) = run(&tiny());
    let (b, tb) = run(&tiny());
    assert_eq!(a, b);
    assert_eq!(ta.checkpoint().to_bytes(), tb.checkpoint().to_bytes());
    assert!(a.starts_with(METRICS_HEADER));
    assert_eq!(a.lines().filter(|l| l.contains(",val,")).count(), 3);
    let mut other = tiny();
    other.set("train.seed", "1").unwrap();
    assert_ne!(run(&other).0, a);
}

#[test]
fn schedule_appears_in_metrics() {
    let (csv, _) = run(&tiny());
    let lr = |ep: &str| -> f64 {
        let line = csv.lines().find(|l| l.starts_with(&format!("{ep},train,"))).unwrap();
        line.split(',').nth(4).unwrap().parse().unwrap()
    };
    assert_eq!(lr("60"), 1e-3);
    assert!((lr("70") - 1e-4).abs() < 1e-15);
    assert!((lr("150") - 1e-5).abs() < 1e-16);
}

#[test]
fn checkpoint_bytes_survive_a_round_trip() {
    let (_, t) = run(&tiny());
    let bytes = t.checkpoint().to_bytes();
    let again = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(again.to_bytes(), bytes);
    assert_eq!(again.episode, 150);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let config = tiny();
    let source = config.source().unwrap();
    let (full_csv, full) = run(&config);

    let mut first = Trainer::new(config.clone()).unwrap();
    let mut rows = Vec::new();
    let mut sink = |e: &ctm_fewshot::harness::Event, _: &Trainer| {
        if let ctm_fewshot::harness::Event::Metric(r) = e {
            rows.push(r.clone());
        }
        Ok(())
    };
    first.run(source.as_ref(), 50, &mut sink).unwrap();
    let bytes = first.checkpoint().to_bytes();
    drop(first);

    let mut resumed = Trainer::resume(config.clone(), Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    resumed.run(source.as_ref(), 150, &mut sink).unwrap();
    assert_eq!(metrics_csv(&rows), full_csv);
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn resume_rejects_a_changed_config() {
    let (_, t) = run(&tiny());
    let mut other = tiny();
    other.set("ctm.m2", "3").unwrap();
    other.set("ctm.m3", "3").unwrap();
    assert!(Trainer::resume(other, t.checkpoint()).is_err());
    let mut longer = tiny();
    longer.set("train.episodes", "400").unwrap();
    assert!(Trainer::resume(longer, t.checkpoint()).is_ok());
}

#[test]
fn evaluation_leaves_the_store_untouched() {
    let config = tiny();
    let (_, t) = run(&config);
    let source = config.source().unwrap();
    let before = t.checkpoint().to_bytes();
    let spec = EpisodeSpec { q: 2, ..config.episode };
    let a = evaluate(&t.store, &t.model, source.as_ref(), Split::Test, &spec, 30, 0).unwrap();
    let b = evaluate(&t.store, &t.model, source.as_ref(), Split::Test, &spec, 30, 0).unwrap();
    assert_eq!(t.checkpoint().to_bytes(), before);
    assert_eq!(a, b);
    assert_eq!(a.accuracies.len(), 30);
    assert!(a.ci95 > 0.0 && (0.0..=100.0).contains(&a.mean));
}

#[test]
fn zero_episode_budget_trains_nothing() {
    let mut config = tiny();
    config.set("train.episodes", "0").unwrap();
    let (csv, t) = run(&config);
    assert_eq!(csv, format!("{METRICS_HEADER}\n"));
    assert_eq!(t.store, config.model().init::<f32>(config.train.seed).unwrap());
}

#[test]
fn export_writes_one_row_per_embedding() {
    let config = tiny();
    let (_, t) = run(&config);
    let source = config.source().unwrap();
    let mut buf = Vec::new();
    let spec = EpisodeSpec { q: 3, ..config.episode };
    let rows = export_embeddings(&t.store, &t.model, source.as_ref(), Split::Test, &spec, 4, 0, &mut buf).unwrap();
    assert_eq!(rows, 4 * (5 + 15));
    let parsed = parse_embeddings(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(parsed.rows.len(), rows);
    assert_eq!(parsed.vector_len, 4 * 2 * 2);
    assert_eq!(parsed.rows.iter().filter(|r| r.role == "query").count(), 60);
}
