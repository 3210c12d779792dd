use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in well under a second
toy.size = 8
episode.q = 2
backbone.channels = 4,4,4,4
backbone.pools = true,false,false,false
ctm.m2 = 4
ctm.m3 = 4
train.episodes = 20
train.log_every = 5
eval.every = 10
eval.episodes = 4
eval.q = 2
";

fn ctm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctm")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(dir: &Path) -> (String, String) {
    let cfg = write(dir, "tiny.cfg", TINY);
    let out = dir.join("run");
    let o = ctm(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    (cfg, out.to_str().unwrap().to_string())
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = train_tiny(dir.path());
    let metrics = fs::read_to_string(Path::new(&out).join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("episode,split,loss,accuracy,lr,wall_ms"));
    assert_eq!(lines.filter(|l| l.contains(",train,")).count(), 4);
    assert!(Path::new(&out).join("latest.ckpt").is_file());
    assert!(Path::new(&out).join("best.ckpt").is_file());
}

#[test]
fn unknown_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "trian.lr = 0.01\n");
    let o = ctm(&["train", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trian.lr"), "{}", stderr(&o));
}

#[test]
fn resume_with_a_different_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = train_tiny(dir.path());
    let other = write(dir.path(), "other.cfg", &format!("{TINY}train.lr = 0.01\n"));
    let ckpt = Path::new(&out).join("latest.ckpt");
    let o = ctm(&["train", "--config", &other, "--resume", ckpt.to_str().unwrap(), "--out", &out]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn resume_extends_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = train_tiny(dir.path());
    let longer = write(dir.path(), "longer.cfg", &TINY.replace("train.episodes = 20", "train.episodes = 30"));
    let ckpt = Path::new(&out).join("latest.ckpt");
    let o = ctm(&["train", "--config", &longer, "--resume", ckpt.to_str().unwrap(), "--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(Path::new(&out).join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.starts_with("episode")).count(), 1);
    assert!(metrics.lines().any(|l| l.starts_with("30,train,")));
}

#[test]
fn eval_prints_one_parseable_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = train_tiny(dir.path());
    let ckpt = Path::new(&out).join("best.ckpt");
    let csv = dir.path().join("eval.csv");
    let o = ctm(&[
        "eval", "--config", &cfg, "--ckpt", ckpt.to_str().unwrap(), "--split", "test", "--episodes", "20", "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1);
    let fields: Vec<f64> = lines[0]
        .split(' ')
        .map(|kv| kv.split_once('=').unwrap().1.parse().unwrap())
        .collect();
    assert!(lines[0].starts_with("mean=") && lines[0].contains(" ci95="));
    assert!((0.0..=100.0).contains(&fields[0]) && fields[1] >= 0.0);
    let table = fs::read_to_string(csv).unwrap();
    assert_eq!(table.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).count(), 20);
}

#[test]
fn eval_rejects_a_mismatched_model() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = train_tiny(dir.path());
    let wider = write(dir.path(), "wide.cfg", &TINY.replace("4,4,4,4", "6,6,6,6"));
    let ckpt = Path::new(&out).join("latest.ckpt");
    let o = ctm(&["eval", "--config", &wider, "--ckpt", ckpt.to_str().unwrap(), "--episodes", "2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn export_writes_header_and_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = train_tiny(dir.path());
    let ckpt = Path::new(&out).join("latest.ckpt");
    let file = dir.path().join("emb.ctme");
    let o = ctm(&["export", "--ckpt", ckpt.to_str().unwrap(), "--out", file.to_str().unwrap(), "--episodes", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(file).unwrap();
    // 5 support rows (one per class at K = 1) and 5 x 2 queries per episode.
    assert_eq!(text.lines().count(), 1 + 3 * (5 + 10));
    assert!(text.starts_with("CTME1 "));
}

#[test]
fn synth_writes_the_configured_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.cfg",
        "toy.size = 8\nsynth.train_classes = 3\nsynth.val_classes = 2\nsynth.test_classes = 2\nsynth.images_per_class = 4\n",
    );
    let out = dir.path().join("data");
    let o = ctm(&["synth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let count = |split: &str| -> usize {
        fs::read_dir(out.join(split)).unwrap().map(|c| fs::read_dir(c.unwrap().path()).unwrap().count()).sum()
    };
    assert_eq!((count("train"), count("val"), count("test")), (12, 8, 8));
}

#[test]
fn missing_files_exit_2() {
    let o = ctm(&["train", "--config", "/nonexistent/x.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ctm(&["export", "--ckpt", "/nonexistent/x.ckpt", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(ctm(&["train"]).status.code(), Some(2));
    assert_eq!(ctm(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn non_finite_loss_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let counts = "synth.train_classes = 5\nsynth.val_classes = 5\nsynth.test_classes = 5\nsynth.images_per_class = 3\n";
    let synth_cfg = write(dir.path(), "s.cfg", &format!("toy.size = 8\n{counts}"));
    assert_eq!(ctm(&["synth", "--config", &synth_cfg, "--out", data.to_str().unwrap()]).status.code(), Some(0));
    let poison = ctm_core::io::encode_tensor(&ctm_core::Tensor::<f32>::full([3, 8, 8], f32::NAN));
    for class in fs::read_dir(data.join("train")).unwrap() {
        for img in fs::read_dir(class.unwrap().path()).unwrap() {
            fs::write(img.unwrap().path(), &poison).unwrap();
        }
    }
    let cfg = write(
        dir.path(),
        "nan.cfg",
        &format!("{TINY}data.source = dir\ndata.root = {}\ndata.image_size = 8\n", data.display()),
    );
    let o = ctm(&["train", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_on_a_fresh_build() {
    let o = ctm(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
