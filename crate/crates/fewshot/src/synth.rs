//! Rendered colour/shape toy tasks where the class-defining attribute
//! changes from episode to episode.

use std::fs;
use std::path::Path;

use ctm_core::Tensor;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episodes::{Episode, EpisodeSource, EpisodeSpec, Split};
use crate::error::{Error, Result};
use crate::image::encode_ppm;

pub const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Bar,
    Plus,
}

impl Shape {
    pub const ALL: [Shape; 8] =
        [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Diamond, Shape::Ring, Shape::Bar, Shape::Plus];

    /// Occupancy test in units of the image size, centred at the origin.
    fn covers(self, u: f32, v: f32) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            Shape::Circle => u * u + v * v <= 0.36 * 0.36,
            Shape::Square => au.max(av) <= 0.316,
            Shape::Triangle => (-0.4..=0.4).contains(&v) && au <= (v + 0.4) * 0.5,
            Shape::Cross => au.max(av) <= 0.4 && ((u - v).abs() <= 0.12 || (u + v).abs() <= 0.12),
            Shape::Diamond => au + av <= 0.42,
            Shape::Ring => (0.2 * 0.2..=0.4 * 0.4).contains(&(u * u + v * v)),
            Shape::Bar => au <= 0.42 && av <= 0.12,
            Shape::Plus => (au <= 0.09 && av <= 0.4) || (av <= 0.09 && au <= 0.4),
        }
    }
}

/// Which attribute defines the classes of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Color,
    Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilyMix {
    ColorRelevant,
    ShapeRelevant,
    Mixed,
}

impl FamilyMix {
    pub fn name(self) -> &'static str {
        match self {
            FamilyMix::ColorRelevant => "color",
            FamilyMix::ShapeRelevant => "shape",
            FamilyMix::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [FamilyMix::ColorRelevant, FamilyMix::ShapeRelevant, FamilyMix::Mixed].into_iter().find(|f| f.name() == s)
    }
}

/// Translation in pixels and a multiplicative scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub dx: f32,
    pub dy: f32,
    pub scale: f32,
}

impl Jitter {
    pub const NONE: Jitter = Jitter { dx: 0.0, dy: 0.0, scale: 1.0 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub size: usize,
    pub palette: usize,
    pub shapes: usize,
    pub family: FamilyMix,
    pub jitter_pos: f32,
    pub jitter_scale: f32,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { size: 32, palette: 8, shapes: 8, family: FamilyMix::Mixed, jitter_pos: 2.0, jitter_scale: 0.1, seed: 0 }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::Config(format!("toy.size must be at least 4, got {}", self.size)));
        }
        if !(1..=PALETTE.len()).contains(&self.palette) || !(1..=Shape::ALL.len()).contains(&self.shapes) {
            return Err(Error::Config(format!(
                "toy.palette and toy.shapes must lie in 1..=8 (got {} and {})",
                self.palette, self.shapes
            )));
        }
        if self.jitter_pos < 0.0 || !(0.0..1.0).contains(&self.jitter_scale) {
            return Err(Error::Config("toy jitter amplitudes out of range".into()));
        }
        Ok(())
    }

    pub fn draw_jitter<R: Rng + ?Sized>(&self, rng: &mut R) -> Jitter {
        let mut sym = |a: f32| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
        let dx = sym(self.jitter_pos);
        let dy = sym(self.jitter_pos);
        let scale = 1.0 + sym(self.jitter_scale);
        Jitter { dx, dy, scale }
    }
}

/// Rasterises one shape on a black background, sampling pixel centres.
pub fn render_shape(shape: Shape, color: usize, jitter: Jitter, size: usize) -> Tensor<f32> {
    let rgb = PALETTE[color];
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    let half = size as f32 / 2.0;
    let norm = size as f32 * jitter.scale;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5 - half - jitter.dx) / norm;
            let v = (y as f32 + 0.5 - half - jitter.dy) / norm;
            if shape.covers(u, v) {
                for c in 0..3 {
                    data[c * plane + y * size + x] = rgb[c];
                }
            }
        }
    }
    Tensor::new([3, size, size], data).expect("shape matches data")
}

/// Attributes of one rendered toy sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyItem {
    pub color: usize,
    pub shape: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEpisode {
    pub episode: Episode,
    pub family: Family,
    pub support_items: Vec<ToyItem>,
    pub query_items: Vec<ToyItem>,
}

/// Generates one episode. The class-defining attribute takes `n` distinct
/// values; the other attribute is drawn independently for every sample.
pub fn gen_toy_episode<R: Rng + ?Sized>(toy: &ToySpec, spec: &EpisodeSpec, rng: &mut R) -> Result<ToyEpisode> {
    spec.validate()?;
    toy.validate()?;
    let family = match toy.family {
        FamilyMix::ColorRelevant => Family::Color,
        FamilyMix::ShapeRelevant => Family::Shape,
        FamilyMix::Mixed if rng.gen_bool(0.5) => Family::Color,
        FamilyMix::Mixed => Family::Shape,
    };
    let (defining, other) = match family {
        Family::Color => (toy.palette, toy.shapes),
        Family::Shape => (toy.shapes, toy.palette),
    };
    if defining < spec.n {
        return Err(Error::Capacity(format!("{family:?} family has {defining} values, episode needs {}", spec.n)));
    }
    let classes = sample(rng, defining, spec.n).into_vec();
    let draw = |rng: &mut R, count: usize, items: &mut Vec<ToyItem>, images: &mut Vec<Tensor<f32>>| {
        for &c in &classes {
            for _ in 0..count {
                let o = rng.gen_range(0..other);
                let item = match family {
                    Family::Color => ToyItem { color: c, shape: o },
                    Family::Shape => ToyItem { color: o, shape: c },
                };
                let jitter = toy.draw_jitter(rng);
                images.push(render_shape(Shape::ALL[item.shape], item.color, jitter, toy.size));
                items.push(item);
            }
        }
    };
    let (mut support_items, mut support) = (Vec::new(), Vec::new());
    draw(rng, spec.k, &mut support_items, &mut support);
    let (mut query_items, mut query) = (Vec::new(), Vec::new());
    draw(rng, spec.q, &mut query_items, &mut query);
    let ns = support.len();
    let episode = Episode {
        spec: *spec,
        support: Tensor::stack(&support)?,
        support_labels: (0..spec.n).flat_map(|l| std::iter::repeat(l).take(spec.k)).collect(),
        query: Tensor::stack(&query)?,
        query_labels: (0..spec.n).flat_map(|l| std::iter::repeat(l).take(spec.q)).collect(),
        class_map: classes,
        support_ids: (0..ns).map(|i| (i / spec.k, i)).collect(),
        query_ids: (0..query.len()).map(|i| (i / spec.q, ns + i)).collect(),
    };
    Ok(ToyEpisode { episode, family, support_items, query_items })
}

/// Number of support classes whose defining attribute matches each query.
/// Always one per query by construction.
pub fn defining_matches(ep: &ToyEpisode) -> Vec<usize> {
    let key = |it: &ToyItem| match ep.family {
        Family::Color => it.color,
        Family::Shape => it.shape,
    };
    let k = ep.episode.spec.k;
    ep.query_items
        .iter()
        .map(|q| ep.support_items.chunks(k).filter(|class| class.iter().all(|s| key(s) == key(q))).count())
        .collect()
}

/// On-the-fly episode source; the split only selects the caller's rng stream.
#[derive(Clone, Debug)]
pub struct ToySource {
    pub spec: ToySpec,
}

impl EpisodeSource for ToySource {
    fn sample(&self, _split: Split, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Episode> {
        Ok(gen_toy_episode(&self.spec, spec, rng)?.episode)
    }

    fn image_size(&self) -> usize {
        self.spec.size
    }
}

/// Number of classes per split for [`gen_toy_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Writes `out/<split>/c<color>_s<shape>/<nnnn>.ppm`. Each (colour, shape)
/// pair belongs to at most one split.
pub fn gen_toy_dataset(toy: &ToySpec, classes: SplitCounts, images_per_class: usize, out: &Path) -> Result<()> {
    toy.validate()?;
    let total = classes.train + classes.val + classes.test;
    let available = toy.palette * toy.shapes;
    if total > available {
        return Err(Error::Capacity(format!("{total} classes requested, only {available} colour/shape pairs")));
    }
    if images_per_class == 0 {
        return Err(Error::Config("synth.images_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(toy.seed);
    let mut pairs: Vec<ToyItem> =
        (0..toy.palette).flat_map(|color| (0..toy.shapes).map(move |shape| ToyItem { color, shape })).collect();
    pairs.shuffle(&mut rng);
    let mut pairs = pairs.into_iter();
    for (split, count) in [(Split::Train, classes.train), (Split::Val, classes.val), (Split::Test, classes.test)] {
        let split_dir = out.join(split.name());
        fs::create_dir_all(&split_dir)?;
        for item in pairs.by_ref().take(count) {
            let dir = split_dir.join(format!("c{}_s{}", item.color, item.shape));
            fs::create_dir_all(&dir)?;
            for i in 0..images_per_class {
                let img = render_shape(Shape::ALL[item.shape], item.color, toy.draw_jitter(&mut rng), toy.size);
                fs::write(dir.join(format!("{i:04}.ppm")), encode_ppm(&img)?)?;
            }
        }
    }
    Ok(())
}

/// Outcome of classifying toy queries by raw pixel distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelAudit {
    /// Percent of queries whose nearest class is correct.
    pub accuracy: f64,
    /// Fraction of queries whose two best class distances differ by no more
    /// than `band`.
    pub tie_fraction: f64,
    /// Squared distance between two jittered renders of identical
    /// attributes, 95th percentile.
    pub band: f64,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x - y) * f64::from(x - y)).sum()
}

/// Equal-weighted pixel-distance classifier over generated episodes, with
/// class distances averaged over the K shots.
pub fn pixel_audit<R: Rng + ?Sized>(toy: &ToySpec, spec: &EpisodeSpec, episodes: usize, rng: &mut R) -> Result<PixelAudit> {
    let mut noise: Vec<f64> = (0..2000)
        .map(|_| {
            let (shape, color) = (Shape::ALL[rng.gen_range(0..toy.shapes)], rng.gen_range(0..toy.palette));
            let a = render_shape(shape, color, toy.draw_jitter(rng), toy.size);
            let b = render_shape(shape, color, toy.draw_jitter(rng), toy.size);
            sq_dist(a.data(), b.data())
        })
        .collect();
    noise.sort_by(f64::total_cmp);
    let band = noise[noise.len() * 95 / 100];
    let (mut correct, mut ties, mut total) = (0usize, 0usize, 0usize);
    for _ in 0..episodes {
        let ep = gen_toy_episode(toy, spec, rng)?.episode;
        let per = ep.support.numel() / ep.support.shape()[0];
        let (sd, qd) = (ep.support.data(), ep.query.data());
        for (j, &label) in ep.query_labels.iter().enumerate() {
            let q = &qd[j * per..(j + 1) * per];
            let mut dist: Vec<f64> = (0..spec.n)
                .map(|c| (0..spec.k).map(|i| sq_dist(&sd[(c * spec.k + i) * per..][..per], q)).sum::<f64>() / spec.k as f64)
                .collect();
            let best = (0..spec.n).fold(0, |b, c| if dist[c] < dist[b] { c } else { b });
            correct += usize::from(best == label);
            dist.sort_by(f64::total_cmp);
            ties += usize::from(dist[1] - dist[0] <= band);
            total += 1;
        }
    }
    Ok(PixelAudit {
        accuracy: 100.0 * correct as f64 / total as f64,
        tie_fraction: ties as f64 / total as f64,
        band,
    })
}
