//! Metric heads, episode losses and the prediction rule.

use ctm_core::nn::{add_conv_block, add_linear};
use ctm_core::{ParamStore, Scalar, Session, Tape, Tensor, Var};
use rand::Rng;

use crate::backbone::conv_block_params;
use crate::error::{Error, Result};

pub const RELATION: &str = "head.relation";
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Cosine similarity.
    Matching,
    /// Negated squared euclidean distance.
    Prototypical,
    /// Learned relation module over concatenated pairs.
    Relation,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Matching => "matching",
            HeadKind::Prototypical => "prototypical",
            HeadKind::Relation => "relation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [HeadKind::Matching, HeadKind::Prototypical, HeadKind::Relation].into_iter().find(|h| h.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [LossKind::CrossEntropy, LossKind::Mse].into_iter().find(|l| l.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelationConfig {
    pub channels: usize,
    pub hidden: usize,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self { channels: 16, hidden: 8 }
    }
}

impl RelationConfig {
    fn pooled(d: usize) -> usize {
        d.div_ceil(2)
    }

    /// Relation module for `(m, d, d)` embeddings.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, m: usize, d: usize, rng: &mut R) {
        let c = self.channels;
        add_conv_block(store, &format!("{RELATION}.block0"), 2 * m, c, 3, rng);
        add_conv_block(store, &format!("{RELATION}.block1"), c, c, 3, rng);
        let p = Self::pooled(d);
        add_linear(store, &format!("{RELATION}.fc0"), c * p * p, self.hidden, rng);
        add_linear(store, &format!("{RELATION}.fc1"), self.hidden, 1, rng);
    }

    pub fn num_params(&self, m: usize, d: usize) -> usize {
        let c = self.channels;
        let p = Self::pooled(d);
        conv_block_params(2 * m, c, 3) + conv_block_params(c, c, 3) + (c * p * p + 1) * self.hidden + self.hidden + 1
    }
}

fn rows<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    Ok(tape.flatten(x)?)
}

/// `y[i, j] = -|s_i - q_j|^2` over flattened embeddings: `[M x Q]`.
pub fn euclidean_scores<T: Scalar>(tape: &mut Tape<T>, support: Var, query: Var) -> Result<Var> {
    let (s, q) = (rows(tape, support)?, rows(tape, query)?);
    let d = tape.pairwise_sq_dist(s, q)?;
    Ok(tape.mul_scalar(d, -T::one()))
}

/// Cosine similarity of flattened embeddings: `[M x Q]`.
pub fn cosine_scores<T: Scalar>(tape: &mut Tape<T>, support: Var, query: Var) -> Result<Var> {
    let (s, q) = (rows(tape, support)?, rows(tape, query)?);
    Ok(tape.pairwise_cosine(s, q, T::lit(COSINE_EPS))?)
}

/// Relation score per `(support i, query j)` pair: `[M x Q]`. In sigmoid mode
/// the scores lie in `(0, 1)`; otherwise they are raw logits.
pub fn relation_scores<T: Scalar>(sess: &mut Session<'_, T>, support: Var, query: Var, sigmoid: bool) -> Result<Var> {
    let m = sess.tape.shape(support)[0];
    let q = sess.tape.shape(query)[0];
    let si: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat(i).take(q)).collect();
    let qi: Vec<usize> = (0..m).flat_map(|_| 0..q).collect();
    let s = sess.tape.gather_rows(support, &si)?;
    let qq = sess.tape.gather_rows(query, &qi)?;
    let pairs = sess.tape.concat(&[s, qq], 1)?;
    let x = sess.conv_block(&format!("{RELATION}.block0"), pairs, 1, 1)?;
    let x = sess.conv_block(&format!("{RELATION}.block1"), x, 1, 1)?;
    let x = sess.tape.maxpool2(x)?;
    let x = sess.tape.flatten(x)?;
    let x = sess.linear(&format!("{RELATION}.fc0"), x)?;
    let x = sess.tape.relu(x);
    let y = sess.linear(&format!("{RELATION}.fc1"), x)?;
    let y = sess.tape.reshape(y, &[m, q])?;
    Ok(if sigmoid { sess.tape.sigmoid(y) } else { y })
}

/// Row-averaging matrix `[N x M]` mapping per-support scores to per-class
/// scores.
pub fn averaging_matrix<T: Scalar>(labels: &[usize], n: usize) -> Result<Tensor<T>> {
    let mut counts = vec![0usize; n];
    for &l in labels {
        *counts.get_mut(l).ok_or_else(|| Error::Dataset(format!("support label {l} out of range for N = {n}")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Dataset(format!("class {c} has no support rows")));
    }
    let m = labels.len();
    let mut a = Tensor::zeros([n, m]);
    for (i, &l) in labels.iter().enumerate() {
        a.data_mut()[l * m + i] = T::lit(1.0 / counts[l] as f64);
    }
    Ok(a)
}

/// `[M x Q]` per-support scores to `[N x Q]` class scores. The identity
/// labelling `0..N` passes through untouched.
pub fn class_scores<T: Scalar>(tape: &mut Tape<T>, scores: Var, labels: &[usize], n: usize) -> Result<Var> {
    if labels.len() == n && labels.iter().enumerate().all(|(i, &l)| i == l) {
        return Ok(scores);
    }
    let a = tape.constant(averaging_matrix(labels, n)?);
    Ok(tape.matmul(a, scores)?)
}

/// Cross-entropy over `[N x Q]` class scores, averaged over queries; MSE
/// against one-hot targets, averaged over all class/query pairs.
pub fn episode_loss<T: Scalar>(tape: &mut Tape<T>, class_scores: Var, query_labels: &[usize], loss: LossKind) -> Result<Var> {
    let &[n, q] = tape.shape(class_scores) else {
        return Err(Error::Config(format!("class scores must be a matrix, got {:?}", tape.shape(class_scores))));
    };
    if q != query_labels.len() {
        return Err(Error::Dataset(format!("{q} score columns for {} query labels", query_labels.len())));
    }
    Ok(match loss {
        LossKind::CrossEntropy => {
            let logits = tape.transpose(class_scores)?;
            tape.softmax_cross_entropy(logits, query_labels)?
        }
        LossKind::Mse => {
            let target = one_hot_columns(query_labels, n)?;
            tape.mse(class_scores, &target)?
        }
    })
}

fn one_hot_columns<T: Scalar>(labels: &[usize], n: usize) -> Result<Tensor<T>> {
    let q = labels.len();
    let mut t = Tensor::zeros([n, q]);
    for (j, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(ctm_core::TensorError::Index { index: l, extent: n }.into());
        }
        t.data_mut()[l * q + j] = T::one();
    }
    Ok(t)
}

/// Averages `[M x Q]` row-major scores over rows sharing a support label.
pub fn average_scores(scores: &[f64], q: usize, labels: &[usize], n: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n * q];
    let mut counts = vec![0usize; n];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for j in 0..q {
            sums[l * q + j] += scores[i * q + j];
        }
    }
    for c in 0..n {
        for j in 0..q {
            sums[c * q + j] /= counts[c] as f64;
        }
    }
    sums
}

/// Column-wise argmax of `[N x Q]` class scores; ties go to the lowest class.
pub fn argmax_columns(class_scores: &[f64], n: usize, q: usize) -> Vec<usize> {
    (0..q)
        .map(|j| {
            let mut best = 0;
            for c in 1..n {
                if class_scores[c * q + j] > class_scores[best * q + j] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Class-averages `[M x Q]` scores and takes the best class per query.
pub fn predict_labels(scores: &[f64], q: usize, support_labels: &[usize], n: usize) -> Vec<usize> {
    argmax_columns(&average_scores(scores, q, support_labels, n), n, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctm_core::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn euclidean_examples() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let q = tape.constant(Tensor::new([1, 2], vec![3.0, 4.0]).unwrap());
        let y = euclidean_scores(&mut tape, s, q).unwrap();
        assert_eq!(tape.value(y).data(), &[-25.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([2, 2], vec![2.0, 0.0, 0.0, 5.0]).unwrap());
        let q = tape.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
        let y = cosine_scores(&mut tape, s, q).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-8 && v[1] == 0.0);
    }

    #[test]
    fn hand_enumerated_prediction() {
        let scores = [0.2, 0.4, 0.9, 0.7];
        assert_eq!(predict_labels(&scores, 1, &[0, 0, 1, 1], 2), vec![1]);
        assert_eq!(average_scores(&scores, 1, &[0, 0, 1, 1], 2), vec![0.30000000000000004, 0.8]);
        assert_eq!(predict_labels(&[1.0, 0.5, 1.0], 1, &[0, 1, 2], 3), vec![0]);
        assert_eq!(predict_labels(&[0.1, 0.3, 0.2], 1, &[0, 1, 2], 3), vec![1]);
    }

    #[test]
    fn uniform_scores_give_log_n() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::full([5, 3], 0.7));
        let loss = episode_loss(&mut tape, s, &[0, 3, 4], LossKind::CrossEntropy).unwrap();
        assert!((tape.value(loss).item().unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_of_exact_targets_is_zero() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let loss = episode_loss(&mut tape, s, &[0, 1], LossKind::Mse).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
        assert!(episode_loss(&mut tape, s, &[0, 2], LossKind::Mse).is_err());
    }

    #[test]
    fn class_scores_average_rows() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([4, 1], vec![0.2, 0.4, 0.9, 0.7]).unwrap());
        let c = class_scores(&mut tape, s, &[0, 0, 1, 1], 2).unwrap();
        let v = tape.value(c).data();
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn relation_zero_final_layer_is_constant() {
        let cfg = RelationConfig { channels: 4, hidden: 3 };
        let mut store = ParamStore::<f64>::new();
        cfg.init(&mut store, 2, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.num_params(), cfg.num_params(2, 4));
        store.param_mut("head.relation.fc1.w").unwrap().value.data_mut().fill(0.0);
        let mut sess = Session::new(&store, Mode::Train);
        let s = sess.tape.constant(Tensor::from_fn([5, 2, 4, 4], |i| (i as f64).sin()));
        let q = sess.tape.constant(Tensor::from_fn([15, 2, 4, 4], |i| (i as f64).cos()));
        let y = relation_scores(&mut sess, s, q, true).unwrap();
        assert_eq!(sess.tape.shape(y), &[5, 15]);
        assert!(sess.tape.value(y).data().iter().all(|&v| v == 0.5));
    }
}
