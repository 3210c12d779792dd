//! End-to-end episode model: backbone, optional traversal module, head.

use ctm_core::{ParamStore, Scalar, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_forward, conv_block_params, BackboneConfig, BlockSpec};
use crate::ctm::{ctm_forward, CtmConfig, CtmDims};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::heads::{
    class_scores, cosine_scores, episode_loss, euclidean_scores, relation_scores, HeadKind, LossKind, RelationConfig,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_way: usize,
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    pub loss: LossKind,
    pub ctm: CtmConfig,
    pub relation: RelationConfig,
    /// Baseline with one extra backbone block sized to match the parameter
    /// count of the traversal module. Requires the module to be disabled.
    pub same_size: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            image_size: 32,
            backbone: BackboneConfig::desk(),
            head: HeadKind::Prototypical,
            loss: LossKind::CrossEntropy,
            ctm: CtmConfig::default(),
            relation: RelationConfig::default(),
            same_size: false,
        }
    }
}

impl ModelConfig {
    /// Backbone actually built, including the extra block of a same-size
    /// baseline.
    pub fn effective_backbone(&self) -> Result<BackboneConfig> {
        let mut bb = self.backbone.clone();
        if self.same_size {
            if self.ctm.enabled {
                return Err(Error::Config("model.same_size applies to baselines only (set ctm.enabled = false)".into()));
            }
            let width = self.same_size_width()?;
            bb.blocks.push(BlockSpec { out_channels: width, pool: false });
        }
        Ok(bb)
    }

    /// Width of the extra block whose added parameters (the block itself and
    /// the widened reshaper input) best match the traversal module.
    pub fn same_size_width(&self) -> Result<usize> {
        let (m1, _) = self.backbone.output_dims(self.image_size)?;
        let traversal = CtmConfig { enabled: true, ..self.ctm.clone() }.traversal_params(self.n_way, m1) as i64;
        let m3 = self.ctm.m3;
        let added = |w: usize| {
            (conv_block_params(m1, w, 3) + conv_block_params(w, m3, 3)) as i64 - conv_block_params(m1, m3, 3) as i64
        };
        Ok((1..=8 * m1).min_by_key(|&w| (added(w) - traversal).abs()).expect("non-empty range"))
    }

    pub fn dims(&self) -> Result<CtmDims> {
        let (m1, d1) = self.effective_backbone()?.output_dims(self.image_size)?;
        self.ctm.dims(m1, d1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config("episode.n must be at least 2".into()));
        }
        if self.head == HeadKind::Relation && (self.relation.channels == 0 || self.relation.hidden == 0) {
            return Err(Error::Config("relation.channels and relation.hidden must be positive".into()));
        }
        self.dims().map(|_| ())
    }

    /// Fresh parameters. Everything is drawn from one seeded stream in a fixed
    /// order: backbone, traversal module, head.
    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let dims = self.dims()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.effective_backbone()?.init(&mut store, &mut rng);
        self.ctm.init(&mut store, self.n_way, dims.m1, &mut rng);
        if self.head == HeadKind::Relation {
            self.relation.init(&mut store, dims.m3, dims.d3, &mut rng);
        }
        Ok(store)
    }

    /// Errors unless `store` holds exactly this model's parameters and
    /// buffers with matching shapes.
    pub fn check_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let fresh = self.init::<T>(0)?;
        let layout = |s: &ParamStore<T>| {
            let mut v: Vec<(String, Vec<usize>)> = s.params().map(|(k, p)| (k.clone(), p.value.shape().to_vec())).collect();
            v.extend(s.buffers().map(|(k, b)| (format!("buffer {k}"), b.shape().to_vec())));
            v
        };
        let (want, got) = (layout(&fresh), layout(store));
        if want != got {
            let diff = want.iter().find(|w| !got.contains(w)).or_else(|| got.iter().find(|g| !want.contains(g)));
            return Err(Error::Config(format!("checkpoint parameters do not fit this model (first mismatch: {diff:?})")));
        }
        Ok(())
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Improved support embeddings: per sample, or per class.
    pub support: Var,
    pub per_class: bool,
    pub query: Var,
    pub mask: Option<Var>,
    /// `[rows x Q]` scores against each support row.
    pub scores: Var,
    /// `[N x Q]` class scores.
    pub class_scores: Var,
    pub loss: Var,
}

/// Maps `[0, 1]` pixels to `[-1, 1]` and converts precision.
pub fn normalize<T: Scalar>(images: &Tensor<f32>) -> Tensor<T> {
    images.cast::<T>().map(|v| v * T::lit(2.0) - T::one())
}

pub fn forward<T: Scalar>(sess: &mut Session<'_, T>, cfg: &ModelConfig, episode: &Episode) -> Result<Forward> {
    let spec = episode.spec;
    if spec.n != cfg.n_way {
        return Err(Error::Config(format!("model built for {}-way episodes, got {}-way", cfg.n_way, spec.n)));
    }
    let (ns, nq) = (episode.support.shape()[0], episode.query.shape()[0]);
    let batch = Tensor::concat_rows(&[normalize::<T>(&episode.support), normalize::<T>(&episode.query)])?;
    let batch = sess.tape.constant(batch);
    let feats = backbone_forward(sess, &cfg.effective_backbone()?, batch)?;
    let s_idx: Vec<usize> = (0..ns).collect();
    let q_idx: Vec<usize> = (ns..ns + nq).collect();
    let s = sess.tape.gather_rows(feats, &s_idx)?;
    let q = sess.tape.gather_rows(feats, &q_idx)?;
    let improved = ctm_forward(sess, &cfg.ctm, s, q, spec.n, spec.k)?;
    let squash = cfg.loss == LossKind::Mse;
    let scores = match cfg.head {
        HeadKind::Matching => cosine_scores(&mut sess.tape, improved.support, improved.query)?,
        HeadKind::Prototypical => euclidean_scores(&mut sess.tape, improved.support, improved.query)?,
        HeadKind::Relation => relation_scores(sess, improved.support, improved.query, squash)?,
    };
    let scores = if squash && cfg.head != HeadKind::Relation { sess.tape.sigmoid(scores) } else { scores };
    let row_labels: Vec<usize> =
        if improved.per_class { (0..spec.n).collect() } else { episode.support_labels.clone() };
    let cs = class_scores(&mut sess.tape, scores, &row_labels, spec.n)?;
    let loss = episode_loss(&mut sess.tape, cs, &episode.query_labels, cfg.loss)?;
    Ok(Forward {
        support: improved.support,
        per_class: improved.per_class,
        query: improved.query,
        mask: improved.mask,
        scores,
        class_scores: cs,
        loss,
    })
}

/// Percentage of queries whose best class matches the label.
pub fn accuracy<T: Scalar>(class_scores: &Tensor<T>, query_labels: &[usize]) -> f64 {
    let (n, q) = (class_scores.shape()[0], class_scores.shape()[1]);
    let scores: Vec<f64> = class_scores.data().iter().map(|v| v.as_f64()).collect();
    let predicted = crate::heads::argmax_columns(&scores, n, q);
    let correct = predicted.iter().zip(query_labels).filter(|(p, l)| p == l).count();
    100.0 * correct as f64 / q as f64
}
