//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::ctm::{CtmConfig, MaskVariant, SoftmaxMode};
use crate::episodes::{load_dataset_index, DatasetIndex, EpisodeSource, EpisodeSpec};
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::heads::{HeadKind, LossKind, RelationConfig};
use crate::model::ModelConfig;
use crate::synth::{FamilyMix, SplitCounts, ToySource, ToySpec};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Episodes rendered on the fly from `toy.*`.
    Toy,
    /// A `root/<split>/<class>/<image>` directory tree.
    Dir,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub source: DataSource,
    pub root: PathBuf,
    pub image_size: usize,
    pub episode: EpisodeSpec,
    pub train: TrainConfig,
    pub loss: LossKind,
    pub head: HeadKind,
    pub same_size: bool,
    pub backbone: BackboneConfig,
    pub ctm: CtmConfig,
    pub relation: RelationConfig,
    pub toy: ToySpec,
    pub synth_classes: SplitCounts,
    pub synth_images_per_class: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            source: DataSource::Toy,
            root: PathBuf::from("data"),
            image_size: 32,
            episode: EpisodeSpec { n: 5, k: 1, q: 15 },
            train: TrainConfig::default(),
            loss: LossKind::CrossEntropy,
            head: HeadKind::Prototypical,
            same_size: false,
            backbone: BackboneConfig::desk(),
            ctm: CtmConfig::default(),
            relation: RelationConfig::default(),
            toy: ToySpec::default(),
            synth_classes: SplitCounts { train: 40, val: 12, test: 12 },
            synth_images_per_class: 50,
        }
    }
}

fn list<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_enum<T>(key: &str, v: &str, f: impl Fn(&str) -> Option<T>, allowed: &str) -> Result<T> {
    f(v).ok_or_else(|| Error::Config(format!("{key}: expected one of {allowed}, got {v:?}")))
}

impl Config {
    /// The model these settings describe.
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            n_way: self.episode.n,
            image_size: self.input_size(),
            backbone: self.backbone.clone(),
            head: self.head,
            loss: self.loss,
            ctm: self.ctm.clone(),
            relation: self.relation,
            same_size: self.same_size,
        }
    }

    pub fn input_size(&self) -> usize {
        match self.source {
            DataSource::Toy => self.toy.size,
            DataSource::Dir => self.image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.train.validate()?;
        if self.source == DataSource::Toy {
            self.toy.validate()?;
        }
        self.model().validate()
    }

    /// Opens the configured episode source.
    pub fn source(&self) -> Result<Box<dyn EpisodeSource>> {
        match self.source {
            DataSource::Toy => Ok(Box::new(ToySource { spec: self.toy.clone() })),
            DataSource::Dir => {
                let index: DatasetIndex = load_dataset_index(&self.root)?;
                if index.height != self.image_size || index.width != self.image_size {
                    return Err(Error::Config(format!(
                        "data.image_size = {} but images are {}x{}",
                        self.image_size, index.height, index.width
                    )));
                }
                Ok(Box::new(index))
            }
        }
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let c = &self.ctm;
        vec![
            ("data.source", match self.source { DataSource::Toy => "toy", DataSource::Dir => "dir" }.to_string()),
            ("data.root", self.root.display().to_string()),
            ("data.image_size", self.image_size.to_string()),
            ("episode.n", self.episode.n.to_string()),
            ("episode.k", self.episode.k.to_string()),
            ("episode.q", self.episode.q.to_string()),
            ("eval.q", t.eval_q.to_string()),
            ("eval.episodes", t.eval_episodes.to_string()),
            ("eval.every", t.eval_every.to_string()),
            ("train.episodes", t.episodes.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.lr_drop_every", t.lr_drop_every.to_string()),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.clip_max_norm", t.clip_max_norm.to_string()),
            ("train.loss", self.loss.name().to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.wall_clock", t.wall_clock.to_string()),
            ("model.head", self.head.name().to_string()),
            ("model.same_size", self.same_size.to_string()),
            ("backbone.channels", list(self.backbone.blocks.iter().map(|b| b.out_channels))),
            ("backbone.pools", list(self.backbone.blocks.iter().map(|b| b.pool))),
            ("ctm.enabled", c.enabled.to_string()),
            ("ctm.variant", c.variant.name().to_string()),
            ("ctm.m2", c.m2.to_string()),
            ("ctm.m3", c.m3.to_string()),
            ("ctm.stride", c.stride.to_string()),
            ("ctm.pad", c.pad.to_string()),
            ("ctm.projector_kernel", c.projector_kernel.to_string()),
            ("ctm.softmax", c.softmax.name().to_string()),
            ("ctm.no_concentrator", c.no_concentrator.to_string()),
            ("ctm.no_projector", c.no_projector.to_string()),
            ("ctm.projector_norm", c.projector_norm.to_string()),
            ("ctm.concentrator_norm", c.concentrator_norm.to_string()),
            ("relation.channels", self.relation.channels.to_string()),
            ("relation.hidden", self.relation.hidden.to_string()),
            ("toy.size", self.toy.size.to_string()),
            ("toy.palette", self.toy.palette.to_string()),
            ("toy.shapes", self.toy.shapes.to_string()),
            ("toy.family", self.toy.family.name().to_string()),
            ("toy.jitter_pos", self.toy.jitter_pos.to_string()),
            ("toy.jitter_scale", self.toy.jitter_scale.to_string()),
            ("toy.seed", self.toy.seed.to_string()),
            ("synth.train_classes", self.synth_classes.train.to_string()),
            ("synth.val_classes", self.synth_classes.val.to_string()),
            ("synth.test_classes", self.synth_classes.test.to_string()),
            ("synth.images_per_class", self.synth_images_per_class.to_string()),
        ]
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        })
    }

    /// SHA-256 over the serialized settings, excluding the episode budget so
    /// that a run may be resumed with a larger one.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "train.episodes" {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let c = &mut self.ctm;
        match key {
            "data.source" => {
                self.source = match v {
                    "toy" => DataSource::Toy,
                    "dir" => DataSource::Dir,
                    _ => return Err(Error::Config(format!("data.source: expected toy or dir, got {v:?}"))),
                }
            }
            "data.root" => self.root = PathBuf::from(v),
            "data.image_size" => self.image_size = parse_num(key, v)?,
            "episode.n" => self.episode.n = parse_num(key, v)?,
            "episode.k" => self.episode.k = parse_num(key, v)?,
            "episode.q" => self.episode.q = parse_num(key, v)?,
            "eval.q" => t.eval_q = parse_num(key, v)?,
            "eval.episodes" => t.eval_episodes = parse_num(key, v)?,
            "eval.every" => t.eval_every = parse_num(key, v)?,
            "train.episodes" => t.episodes = parse_num(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "train.lr_drop_every" => t.lr_drop_every = parse_num(key, v)?,
            "train.lr_decay" => t.lr_decay = parse_num(key, v)?,
            "train.clip_max_norm" => t.clip_max_norm = parse_num(key, v)?,
            "train.loss" => self.loss = parse_enum(key, v, LossKind::parse, "cross_entropy, mse")?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.log_every" => t.log_every = parse_num(key, v)?,
            "train.wall_clock" => t.wall_clock = parse_bool(key, v)?,
            "model.head" => self.head = parse_enum(key, v, HeadKind::parse, "matching, prototypical, relation")?,
            "model.same_size" => self.same_size = parse_bool(key, v)?,
            "backbone.channels" | "backbone.pools" => {
                let items: Vec<&str> = v.split(',').map(str::trim).collect();
                let mut channels: Vec<usize> = self.backbone.blocks.iter().map(|b| b.out_channels).collect();
                let mut pools: Vec<bool> = self.backbone.blocks.iter().map(|b| b.pool).collect();
                if key == "backbone.channels" {
                    channels = items.iter().map(|s| parse_num(key, s)).collect::<Result<_>>()?;
                    pools.resize(channels.len(), false);
                } else {
                    pools = items.iter().map(|s| parse_bool(key, s)).collect::<Result<_>>()?;
                    channels.resize(pools.len(), *channels.last().unwrap_or(&32));
                }
                self.backbone = BackboneConfig::new(&channels, &pools)?;
            }
            "ctm.enabled" => c.enabled = parse_bool(key, v)?,
            "ctm.variant" => c.variant = parse_enum(key, v, MaskVariant::parse, "sample_wise, cluster_wise")?,
            "ctm.m2" => c.m2 = parse_num(key, v)?,
            "ctm.m3" => c.m3 = parse_num(key, v)?,
            "ctm.stride" => c.stride = parse_num(key, v)?,
            "ctm.pad" => c.pad = parse_num(key, v)?,
            "ctm.projector_kernel" => c.projector_kernel = parse_num(key, v)?,
            "ctm.softmax" => c.softmax = parse_enum(key, v, SoftmaxMode::parse, "per_location, all_locations")?,
            "ctm.no_concentrator" => c.no_concentrator = parse_bool(key, v)?,
            "ctm.no_projector" => c.no_projector = parse_bool(key, v)?,
            "ctm.projector_norm" => c.projector_norm = parse_bool(key, v)?,
            "ctm.concentrator_norm" => c.concentrator_norm = parse_bool(key, v)?,
            "relation.channels" => self.relation.channels = parse_num(key, v)?,
            "relation.hidden" => self.relation.hidden = parse_num(key, v)?,
            "toy.size" => self.toy.size = parse_num(key, v)?,
            "toy.palette" => self.toy.palette = parse_num(key, v)?,
            "toy.shapes" => self.toy.shapes = parse_num(key, v)?,
            "toy.family" => self.toy.family = parse_enum(key, v, FamilyMix::parse, "color, shape, mixed")?,
            "toy.jitter_pos" => self.toy.jitter_pos = parse_num(key, v)?,
            "toy.jitter_scale" => self.toy.jitter_scale = parse_num(key, v)?,
            "toy.seed" => self.toy.seed = parse_num(key, v)?,
            "synth.train_classes" => self.synth_classes.train = parse_num(key, v)?,
            "synth.val_classes" => self.synth_classes.val = parse_num(key, v)?,
            "synth.test_classes" => self.synth_classes.test = parse_num(key, v)?,
            "synth.images_per_class" => self.synth_images_per_class = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses settings on top of the defaults. Blank lines and `#` comments
    /// are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key `{key}` set twice", i + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
