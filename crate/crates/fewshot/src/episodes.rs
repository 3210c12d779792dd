//! Dataset indexing and N-way K-shot episode sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use ctm_core::Tensor;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::decode_image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ways, shots and queries per class of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n: usize,
    pub k: usize,
    pub q: usize,
}

impl EpisodeSpec {
    pub fn new(n: usize, k: usize, q: usize) -> Result<Self> {
        let spec = Self { n, k, q };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.k < 1 || self.q < 1 {
            return Err(Error::Config(format!("episode needs n >= 2, k >= 1, q >= 1 (got {self:?})")));
        }
        Ok(())
    }
}

/// Identifies an image as (class index within its split, image index).
pub type ImageId = (usize, usize);

/// One N-way K-shot task. Support samples are class-major: all K samples of
/// label 0, then label 1, and so on; queries follow the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    /// `(N*K, 3, H, W)`.
    pub support: Tensor<f32>,
    pub support_labels: Vec<usize>,
    /// `(N*Q, 3, H, W)`.
    pub query: Tensor<f32>,
    pub query_labels: Vec<usize>,
    /// Episode label -> original class id.
    pub class_map: Vec<usize>,
    pub support_ids: Vec<ImageId>,
    pub query_ids: Vec<ImageId>,
}

/// Anything that can produce episodes for a split.
pub trait EpisodeSource: Sync {
    fn sample(&self, split: Split, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Episode>;

    /// Square input side length.
    fn image_size(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    pub images: Vec<Tensor<f32>>,
}

/// Classes per split with their decoded images. Immutable once loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub splits: BTreeMap<Split, Vec<ClassEntry>>,
    pub height: usize,
    pub width: usize,
}

impl DatasetIndex {
    /// Builds an in-memory index, checking geometry and split disjointness.
    pub fn from_classes(splits: BTreeMap<Split, Vec<ClassEntry>>) -> Result<Self> {
        let mut geometry = None;
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for (&split, classes) in &splits {
            for class in classes {
                if class.images.is_empty() {
                    return Err(Error::Dataset(format!("class {} in split {split} has no images", class.name)));
                }
                if let Some(prev) = seen.insert(&class.name, split) {
                    return Err(Error::Dataset(format!("class {} appears in both {prev} and {split}", class.name)));
                }
                for img in &class.images {
                    let &[3, h, w] = img.shape() else {
                        return Err(Error::Dataset(format!("class {}: image shape {:?}", class.name, img.shape())));
                    };
                    match geometry {
                        None => geometry = Some((h, w)),
                        Some(g) if g != (h, w) => {
                            return Err(Error::Dataset(format!("class {}: image {h}x{w}, expected {}x{}", class.name, g.0, g.1)))
                        }
                        _ => {}
                    }
                }
            }
        }
        let (height, width) = geometry.ok_or_else(|| Error::Dataset("dataset holds no images".into()))?;
        Ok(Self { splits, height, width })
    }

    pub fn classes(&self, split: Split) -> Result<&[ClassEntry]> {
        self.splits.get(&split).map(Vec::as_slice).ok_or_else(|| Error::Dataset(format!("split {split} not present")))
    }
}

/// Loads `root/<split>/<class>/<image>` for the `train`, `val` and `test`
/// splits. Classes and files are visited in lexicographic order.
pub fn load_dataset_index(root: &Path) -> Result<DatasetIndex> {
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let dir = root.join(split.name());
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing split directory {}", dir.display())));
        }
        let mut class_dirs: Vec<_> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()).collect();
        class_dirs.sort();
        let mut classes = Vec::with_capacity(class_dirs.len());
        for class_dir in class_dirs {
            let name = class_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let mut images = Vec::new();
            for file in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file()) {
                let bytes = fs::read(&file).map_err(|e| Error::Image { path: file.clone(), reason: e.to_string() })?;
                let img = decode_image(&bytes).map_err(|e| Error::Image { path: file.clone(), reason: e.to_string() })?;
                images.push(img);
            }
            if images.is_empty() {
                return Err(Error::Dataset(format!("class {name} in split {split} has no images")));
            }
            classes.push(ClassEntry { name, images });
        }
        splits.insert(split, classes);
    }
    DatasetIndex::from_classes(splits)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

/// Draws `n` classes without replacement, then `k + q` distinct images per
/// class; the first `k` become support. Labels follow the class draw order.
pub fn sample_episode(index: &DatasetIndex, split: Split, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Episode> {
    spec.validate()?;
    let classes = index.classes(split)?;
    if classes.len() < spec.n {
        return Err(Error::Capacity(format!("split {split} has {} classes, episode needs {}", classes.len(), spec.n)));
    }
    let per_class = spec.k + spec.q;
    let drawn = sample(rng, classes.len(), spec.n).into_vec();
    let mut support = Vec::with_capacity(spec.n * spec.k);
    let mut query = Vec::with_capacity(spec.n * spec.q);
    let (mut support_ids, mut query_ids) = (Vec::new(), Vec::new());
    for &c in &drawn {
        let class = &classes[c];
        if class.images.len() < per_class {
            return Err(Error::Capacity(format!(
                "class {} has {} images, episode needs {per_class}",
                class.name,
                class.images.len()
            )));
        }
        let picks = sample(rng, class.images.len(), per_class).into_vec();
        for (j, &i) in picks.iter().enumerate() {
            if j < spec.k {
                support.push(class.images[i].clone());
                support_ids.push((c, i));
            } else {
                query.push(class.images[i].clone());
                query_ids.push((c, i));
            }
        }
    }
    Ok(Episode {
        spec: *spec,
        support: Tensor::stack(&support)?,
        support_labels: (0..spec.n).flat_map(|l| std::iter::repeat(l).take(spec.k)).collect(),
        query: Tensor::stack(&query)?,
        query_labels: (0..spec.n).flat_map(|l| std::iter::repeat(l).take(spec.q)).collect(),
        class_map: drawn,
        support_ids,
        query_ids,
    })
}

impl EpisodeSource for DatasetIndex {
    fn sample(&self, split: Split, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Episode> {
        sample_episode(self, split, spec, rng)
    }

    fn image_size(&self) -> usize {
        self.height
    }
}

/// Checks the structural invariants of an episode; returns a description of
/// the first violation.
pub fn audit_episode(ep: &Episode) -> std::result::Result<(), String> {
    let EpisodeSpec { n, k, q } = ep.spec;
    let mut counts = vec![(0usize, 0usize); n];
    for &l in &ep.support_labels {
        counts.get_mut(l).ok_or(format!("support label {l} out of range"))?.0 += 1;
    }
    for &l in &ep.query_labels {
        counts.get_mut(l).ok_or(format!("query label {l} out of range"))?.1 += 1;
    }
    if let Some((l, c)) = counts.iter().enumerate().find(|(_, &c)| c != (k, q)) {
        return Err(format!("label {l} has {} support / {} query samples", c.0, c.1));
    }
    let support: BTreeSet<_> = ep.support_ids.iter().collect();
    if support.len() != ep.support_ids.len() {
        return Err("duplicate support image".into());
    }
    if let Some(id) = ep.query_ids.iter().find(|id| support.contains(id)) {
        return Err(format!("image {id:?} in both support and query"));
    }
    if ep.query_ids.iter().collect::<BTreeSet<_>>().len() != ep.query_ids.len() {
        return Err("duplicate query image".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn toy_index(train: usize, val: usize, test: usize, per_class: usize) -> DatasetIndex {
        let mut splits = BTreeMap::new();
        let mut id = 0;
        for (split, count) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)] {
            let classes = (0..count)
                .map(|c| {
                    id += 1;
                    ClassEntry {
                        name: format!("{split}_{c:03}"),
                        images: (0..per_class).map(|i| Tensor::full([3, 2, 2], (id * 1000 + i) as f32)).collect(),
                    }
                })
                .collect();
            splits.insert(split, classes);
        }
        DatasetIndex::from_classes(splits).unwrap()
    }

    #[test]
    fn paper_query_counts() {
        let idx = toy_index(30, 5, 5, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&idx, Split::Train, &EpisodeSpec::new(5, 1, 15).unwrap(), &mut rng).unwrap();
        assert_eq!(ep.support.shape()[0], 5);
        assert_eq!(ep.query.shape()[0], 75);
        let ep = sample_episode(&idx, Split::Train, &EpisodeSpec::new(20, 5, 8).unwrap(), &mut rng).unwrap();
        assert_eq!(ep.support.shape()[0], 100);
        assert_eq!(ep.query.shape()[0], 160);
        audit_episode(&ep).unwrap();
    }

    #[test]
    fn images_follow_ids() {
        let idx = toy_index(8, 3, 3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = sample_episode(&idx, Split::Val, &EpisodeSpec::new(3, 2, 3).unwrap(), &mut rng).unwrap();
        for (row, &(c, i)) in ep.support_ids.iter().enumerate() {
            let expected = &idx.classes(Split::Val).unwrap()[c].images[i];
            assert_eq!(&ep.support.slice_rows(row, row + 1).unwrap().reshape([3, 2, 2]).unwrap(), expected);
        }
        assert_eq!(ep.class_map.len(), 3);
        assert_eq!(ep.support_labels, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn capacity_errors() {
        let idx = toy_index(4, 3, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let too_many_ways = EpisodeSpec::new(5, 1, 1).unwrap();
        assert!(matches!(sample_episode(&idx, Split::Train, &too_many_ways, &mut rng), Err(Error::Capacity(_))));
        let too_many_images = EpisodeSpec::new(2, 3, 3).unwrap();
        assert!(matches!(sample_episode(&idx, Split::Train, &too_many_images, &mut rng), Err(Error::Capacity(_))));
        assert!(EpisodeSpec::new(1, 1, 1).is_err());
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let mut splits = BTreeMap::new();
        let class = ClassEntry { name: "same".into(), images: vec![Tensor::zeros([3, 1, 1])] };
        splits.insert(Split::Train, vec![class.clone()]);
        splits.insert(Split::Test, vec![class]);
        assert!(DatasetIndex::from_classes(splits).is_err());
    }
}
