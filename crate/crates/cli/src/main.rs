//! `ctm`: train, evaluate and inspect category traversal models.
//!
//! Exit codes: 0 success, 2 usage, configuration or missing-file errors,
//! 3 numeric failure (non-finite loss, gradient check above tolerance).

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctm_fewshot::harness::{
    evaluate, export_embeddings, load_checkpoint, save_checkpoint, Checkpoint, Event, Trainer, METRICS_HEADER,
};
use ctm_fewshot::synth::gen_toy_dataset;
use ctm_fewshot::verify::full_suite;
use ctm_fewshot::{Config, Error, EpisodeSpec, Split};

const TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "ctm", version, about = "Few-shot learning with a category traversal module")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, latest.ckpt and best.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written under the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out episodes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        /// Per-episode accuracies; defaults to eval_<split>.csv beside the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Write the toy dataset as PPM images.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write improved feature embeddings in CTME1 format.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
}

enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn need_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{}: no such file", path.display())))
    }
}

fn load_config(path: &Path) -> Result<Config, Failure> {
    need_file(path)?;
    Ok(Config::load(path)?)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    need_file(path)?;
    Ok(load_checkpoint(path)?)
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    Split::parse(s).ok_or_else(|| Failure::Usage(format!("unknown split {s:?} (train, val or test)")))
}

fn train(config: &Path, resume: Option<&Path>, out: &Path) -> CmdResult {
    let config = load_config(config)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config, load_ckpt(p)?)?,
        None => Trainer::new(config)?,
    };
    fs::create_dir_all(out)?;
    let source = trainer.config.source()?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = if resume.is_some() && metrics_path.is_file() {
        BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?)
    } else {
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        writeln!(w, "{METRICS_HEADER}")?;
        w
    };
    let total = trainer.config.train.episodes;
    let result = trainer.run(source.as_ref(), total, &mut |event, t| {
        match event {
            Event::Metric(row) => {
                writeln!(metrics, "{}", row.csv_line())?;
                metrics.flush()?;
            }
            Event::BestVal { episode, accuracy } => {
                eprintln!("episode {episode}: val accuracy {accuracy:.2} (best)");
                save_checkpoint(&t.checkpoint(), &out.join("best.ckpt"))?;
                save_checkpoint(&t.checkpoint(), &out.join("latest.ckpt"))?;
            }
        }
        Ok(())
    });
    metrics.flush()?;
    if let Err(e) = result {
        save_checkpoint(&trainer.checkpoint(), &out.join("latest.ckpt"))?;
        return Err(e.into());
    }
    save_checkpoint(&trainer.checkpoint(), &out.join("latest.ckpt"))?;
    eprintln!("trained {} episodes; outputs in {}", trainer.episode, out.display());
    Ok(())
}

fn eval(config: &Path, ckpt: &Path, split: &str, episodes: usize, csv: Option<&Path>) -> CmdResult {
    let config = load_config(config)?;
    config.validate()?;
    let split = parse_split(split)?;
    let ckpt_data = load_ckpt(ckpt)?;
    let model = config.model();
    model.check_store(&ckpt_data.store)?;
    let source = config.source()?;
    let spec = EpisodeSpec { q: config.train.eval_q, ..config.episode };
    let report = evaluate(&ckpt_data.store, &model, source.as_ref(), split, &spec, episodes, config.train.seed)?;
    println!("mean={:.4} ci95={:.4}", report.mean, report.ci95);
    let csv_path = csv
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(format!("eval_{split}.csv")));
    let mut w = BufWriter::new(File::create(&csv_path)?);
    writeln!(w, "split,episodes,mean,ci95,mean_loss")?;
    writeln!(w, "{split},{episodes},{},{},{}", report.mean, report.ci95, report.mean_loss)?;
    writeln!(w)?;
    writeln!(w, "episode,accuracy")?;
    for (i, a) in report.accuracies.iter().enumerate() {
        writeln!(w, "{i},{a}")?;
    }
    w.flush()?;
    Ok(())
}

fn gradcheck() -> CmdResult {
    let results = full_suite()?;
    let mut failed = 0;
    for (name, err) in &results {
        let ok = *err < TOLERANCE;
        failed += usize::from(!ok);
        println!("{} {err:.3e} {name}", if ok { "ok  " } else { "FAIL" });
    }
    println!("{} checks, {failed} above {TOLERANCE:e}", results.len());
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} gradient checks exceed tolerance")));
    }
    Ok(())
}

fn synth(config: &Path, out: &Path) -> CmdResult {
    let config = load_config(config)?;
    gen_toy_dataset(&config.toy, config.synth_classes, config.synth_images_per_class, out)?;
    let c = config.synth_classes;
    eprintln!(
        "wrote {} classes x {} images to {}",
        c.train + c.val + c.test,
        config.synth_images_per_class,
        out.display()
    );
    Ok(())
}

fn export(ckpt: &Path, out: &Path, split: &str, episodes: usize) -> CmdResult {
    let split = parse_split(split)?;
    let ckpt = load_ckpt(ckpt)?;
    let config = Config::parse(&ckpt.config_text)?;
    let model = config.model();
    model.check_store(&ckpt.store)?;
    let source = config.source()?;
    let mut w = BufWriter::new(File::create(out)?);
    let spec = EpisodeSpec { q: config.train.eval_q, ..config.episode };
    let rows = export_embeddings(&ckpt.store, &model, source.as_ref(), split, &spec, episodes, config.train.seed, &mut w)?;
    w.flush()?;
    eprintln!("wrote {rows} embeddings to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, resume, out } => train(config, resume.as_deref(), out),
        Command::Eval { config, ckpt, split, episodes, csv } => eval(config, ckpt, split, *episodes, csv.as_deref()),
        Command::Gradcheck => gradcheck(),
        Command::Synth { config, out } => synth(config, out),
        Command::Export { ckpt, out, split, episodes } => export(ckpt, out, split, *episodes),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
