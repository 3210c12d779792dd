//! Episodic training, evaluation with confidence intervals, checkpoints and
//! embedding export.

mod checkpoint;
mod export;

use std::time::Instant;

use ctm_core::optim::clip_grad_norm;
use ctm_core::params::apply_stats;
use ctm_core::{AdamConfig, AdamState, Mode, ParamStore, Session};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use export::{export_embeddings, parse_embeddings, EmbeddingRow, Embeddings};

use crate::config::Config;
use crate::episodes::{EpisodeSource, EpisodeSpec, Split};
use crate::error::{Error, Result};
use crate::model::{accuracy, forward, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub episodes: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_drop_every: u64,
    pub lr_decay: f64,
    pub clip_max_norm: f64,
    pub seed: u64,
    pub log_every: u64,
    /// Record elapsed milliseconds in metrics; zero keeps runs byte-identical.
    pub wall_clock: bool,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Queries per class in evaluation episodes.
    pub eval_q: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 20_000,
            lr: 1e-3,
            weight_decay: 5e-4,
            lr_drop_every: 5_000,
            lr_decay: 0.1,
            clip_max_norm: 10.0,
            seed: 0,
            log_every: 100,
            wall_clock: false,
            eval_every: 1_000,
            eval_episodes: 600,
            eval_q: 15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be non-negative");
        }
        if self.lr_drop_every == 0 {
            return bad("train.lr_drop_every must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("train.lr_decay must lie in (0, 1]");
        }
        if !(self.clip_max_norm > 0.0) {
            return bad("train.clip_max_norm must be positive");
        }
        if self.log_every == 0 {
            return bad("train.log_every must be positive");
        }
        if self.eval_episodes == 0 || self.eval_q == 0 {
            return bad("eval.episodes and eval.q must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Step schedule: `lr * decay^floor(episode / drop_every)`.
pub fn lr_at(episode: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi((episode / cfg.lr_drop_every) as i32)
}

pub const METRICS_HEADER: &str = "episode,split,loss,accuracy,lr,wall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    /// Completed training episodes.
    pub episode: u64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{},{}", self.episode, self.split, self.loss, self.accuracy, self.lr, self.wall_ms)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean accuracy in percent.
    pub mean: f64,
    /// Half-width of the 95% interval: `1.96 * sd / sqrt(E)`.
    pub ci95: f64,
    pub accuracies: Vec<f64>,
    pub mean_loss: f64,
}

impl EvalReport {
    /// Sample standard deviation; a single episode has zero spread.
    pub fn from_accuracies(accuracies: Vec<f64>, mean_loss: f64) -> Self {
        let e = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / e;
        let ci95 = if accuracies.len() < 2 {
            0.0
        } else {
            let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (e - 1.0);
            1.96 * var.sqrt() / e.sqrt()
        };
        Self { mean, ci95, accuracies, mean_loss }
    }

    pub fn overlaps(&self, other: &EvalReport) -> bool {
        (self.mean - other.mean).abs() <= self.ci95 + other.ci95
    }
}

fn split_index(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Parameter initialisation uses stream 0 of the seed, training episodes
/// the last stream, and evaluation one stream per (split, episode).
pub fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

pub fn eval_rng(seed: u64, split: Split, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split_index(split) + 1) << 32) | episode as u64);
    rng
}

/// Accuracy over `episodes` held-out episodes in eval mode. Never touches
/// the parameters or running statistics.
pub fn evaluate(
    store: &ParamStore<f32>,
    model: &ModelConfig,
    source: &dyn EpisodeSource,
    split: Split,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let results: Vec<(f64, f64)> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let ep = source.sample(split, spec, &mut eval_rng(seed, split, e))?;
            let mut sess = Session::new(store, Mode::Eval);
            let out = forward(&mut sess, model, &ep)?;
            let loss = f64::from(sess.tape.value(out.loss).item()?);
            Ok((accuracy(sess.tape.value(out.class_scores), &ep.query_labels), loss))
        })
        .collect::<Result<_>>()?;
    let mean_loss = results.iter().map(|r| r.1).sum::<f64>() / episodes as f64;
    Ok(EvalReport::from_accuracies(results.into_iter().map(|r| r.0).collect(), mean_loss))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Metric(MetricRow),
    /// Validation accuracy improved; the trainer's `best` store was updated.
    BestVal { episode: u64, accuracy: f64 },
}

/// Outcome of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub clip_scale: f64,
}

/// Owns the mutable training state.
pub struct Trainer {
    pub config: Config,
    pub model: ModelConfig,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Completed episodes.
    pub episode: u64,
    pub rng: ChaCha8Rng,
    pub best_val: Option<f64>,
    pub best: Option<ParamStore<f32>>,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let model = config.model();
        let store = model.init(config.train.seed)?;
        Ok(Self {
            adam: AdamState::new(config.train.adam()),
            rng: train_rng(config.train.seed),
            model,
            store,
            config,
            episode: 0,
            best_val: None,
            best: None,
        })
    }

    /// Resumes from a checkpoint written under an identical configuration
    /// (ignoring the episode budget).
    pub fn resume(config: Config, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.config_hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "configuration hash {} does not match checkpoint {}",
                config.hash(),
                ckpt.config_hash
            )));
        }
        let mut adam = AdamState::new(config.train.adam());
        adam.step = ckpt.adam_step;
        adam.first = ckpt.adam_first;
        adam.second = ckpt.adam_second;
        Ok(Self {
            model: config.model(),
            config,
            store: ckpt.store,
            adam,
            episode: ckpt.episode,
            rng: ckpt.rng.restore(),
            best_val: ckpt.best_val,
            best: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash(),
            config_text: self.config.to_text(),
            episode: self.episode,
            adam_step: self.adam.step,
            adam_first: self.adam.first.clone(),
            adam_second: self.adam.second.clone(),
            rng: RngState::capture(&self.rng),
            best_val: self.best_val,
            store: self.store.clone(),
        }
    }

    /// Samples one training episode and applies one Adam update.
    pub fn step(&mut self, source: &dyn EpisodeSource) -> Result<StepStats> {
        let lr = lr_at(self.episode, &self.config.train);
        let ep = source.sample(Split::Train, &self.config.episode, &mut self.rng)?;
        let (loss, acc, grads, stats) = {
            let mut sess = Session::new(&self.store, Mode::Train);
            let out = forward(&mut sess, &self.model, &ep)?;
            let loss = f64::from(sess.tape.value(out.loss).item()?);
            if !loss.is_finite() {
                let detail = match sess.tape.nonfinite_origin() {
                    Some((node, op)) => format!(": first non-finite value from {op} (node {node})"),
                    None => String::new(),
                };
                return Err(Error::NonFinite { episode: self.episode, lr, detail });
            }
            let acc = accuracy(sess.tape.value(out.class_scores), &ep.query_labels);
            let grads = sess.param_grads(out.loss)?;
            (loss, acc, grads, sess.take_stats())
        };
        self.store.zero_grad();
        for (key, g) in grads {
            self.store.param_mut(&key)?.grad = g;
        }
        let clip_scale = clip_grad_norm(&mut self.store, self.config.train.clip_max_norm)?;
        self.adam.set_lr(lr);
        self.adam.step(&mut self.store);
        apply_stats(&mut self.store, &stats)?;
        self.episode += 1;
        Ok(StepStats { loss, accuracy: acc, lr, clip_scale })
    }

    /// Validation report at the current parameters.
    pub fn validate(&self, source: &dyn EpisodeSource) -> Result<EvalReport> {
        let t = &self.config.train;
        let spec = EpisodeSpec { q: t.eval_q, ..self.config.episode };
        evaluate(&self.store, &self.model, source, Split::Val, &spec, t.eval_episodes, t.seed)
    }

    /// Trains until `until` episodes have completed, reporting logged
    /// metrics and validation improvements to `sink`.
    pub fn run(
        &mut self,
        source: &dyn EpisodeSource,
        until: u64,
        sink: &mut dyn FnMut(&Event, &Trainer) -> Result<()>,
    ) -> Result<()> {
        let start = Instant::now();
        let wall = |wall_clock: bool| if wall_clock { start.elapsed().as_millis() as u64 } else { 0 };
        while self.episode < until {
            let s = self.step(source)?;
            let t = self.config.train.clone();
            if self.episode % t.log_every == 0 {
                let row = MetricRow {
                    episode: self.episode,
                    split: Split::Train,
                    loss: s.loss,
                    accuracy: s.accuracy,
                    lr: s.lr,
                    wall_ms: wall(t.wall_clock),
                };
                sink(&Event::Metric(row), self)?;
            }
            if t.eval_every > 0 && self.episode % t.eval_every == 0 {
                let report = self.validate(source)?;
                let row = MetricRow {
                    episode: self.episode,
                    split: Split::Val,
                    loss: report.mean_loss,
                    accuracy: report.mean,
                    lr: s.lr,
                    wall_ms: wall(t.wall_clock),
                };
                sink(&Event::Metric(row), self)?;
                if self.best_val.map_or(true, |b| report.mean > b) {
                    self.best_val = Some(report.mean);
                    self.best = Some(self.store.clone());
                    sink(&Event::BestVal { episode: self.episode, accuracy: report.mean }, self)?;
                }
            }
        }
        Ok(())
    }

    /// Runs to the configured episode budget, collecting metric rows.
    pub fn train(&mut self, source: &dyn EpisodeSource) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        let total = self.config.train.episodes;
        self.run(source, total, &mut |event, _| {
            if let Event::Metric(row) = event {
                rows.push(row.clone());
            }
            Ok(())
        })?;
        Ok(rows)
    }
}

/// Renders rows as the metrics CSV, header included.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let paper = TrainConfig { lr_drop_every: 200_000, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &paper), 0.001);
        assert!((lr_at(200_000, &paper) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(199_999, &paper), 0.001);
        let mut prev = f64::INFINITY;
        for e in (0..1_000_000).step_by(50_000) {
            let lr = lr_at(e, &paper);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn confidence_interval_examples() {
        let r = EvalReport::from_accuracies(vec![100.0; 600], 0.0);
        assert_eq!((r.mean, r.ci95), (100.0, 0.0));
        let r = EvalReport::from_accuracies(vec![42.0], 0.0);
        assert_eq!(r.ci95, 0.0);
        // 300 at 50 - a, 300 at 50 + a with sample sd exactly 5.
        let a = 5.0 * (599.0f64 / 600.0).sqrt();
        let accs: Vec<f64> = (0..600).map(|i| if i % 2 == 0 { 50.0 - a } else { 50.0 + a }).collect();
        let r = EvalReport::from_accuracies(accs, 0.0);
        assert!((r.ci95 - 1.96 * 5.0 / 600f64.sqrt()).abs() < 1e-12);
        assert!((r.ci95 - 0.40).abs() < 0.005);
    }

    #[test]
    fn metric_row_format() {
        let row = MetricRow { episode: 100, split: Split::Val, loss: 0.5, accuracy: 80.0, lr: 0.001, wall_ms: 0 };
        assert_eq!(row.csv_line(), "100,val,0.5,80,0.001,0");
        assert!(metrics_csv(&[]).starts_with("episode,split,loss,accuracy,lr,wall_ms\n"));
    }
}
