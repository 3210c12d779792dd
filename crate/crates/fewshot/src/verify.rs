//! Finite-difference checks of the composed episode model, and audits of
//! the sampler, mask normalisation and prediction rule.

use std::collections::BTreeMap;

use ctm_core::gradcheck::op_suite;
use ctm_core::{Mode, ParamStore, Scalar, Session, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::ctm::{CtmConfig, MaskVariant, SoftmaxMode};
use crate::episodes::{audit_episode, sample_episode, ClassEntry, DatasetIndex, Episode, EpisodeSpec, Split};
use crate::error::Result;
use crate::heads::{average_scores, episode_loss, predict_labels, HeadKind, LossKind, RelationConfig};
use crate::model::{forward, ModelConfig};

/// 8x8 inputs, 4-channel blocks, 3-way 2-shot.
pub fn tiny_model(head: HeadKind, loss: LossKind, ctm: CtmConfig) -> ModelConfig {
    ModelConfig {
        n_way: 3,
        image_size: 8,
        backbone: BackboneConfig::new(&[4, 4, 4, 4], &[true, false, false, false]).expect("valid"),
        head,
        loss,
        ctm,
        relation: RelationConfig { channels: 3, hidden: 4 },
        same_size: false,
    }
}

pub fn tiny_ctm() -> CtmConfig {
    CtmConfig { m2: 4, m3: 4, ..CtmConfig::default() }
}

/// A 3-way 2-shot episode of uniform noise images.
pub fn noise_episode(spec: EpisodeSpec, size: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = |rows: usize| Tensor::from_fn([rows, 3, size, size], |_| rng.gen_range(0.0f32..1.0));
    let (ns, nq) = (spec.n * spec.k, spec.n * spec.q);
    Episode {
        spec,
        support: images(ns),
        support_labels: (0..spec.n).flat_map(|l| std::iter::repeat(l).take(spec.k)).collect(),
        query: images(nq),
        query_labels: (0..spec.n).flat_map(|l| std::iter::repeat(l).take(spec.q)).collect(),
        class_map: (0..spec.n).collect(),
        support_ids: (0..ns).map(|i| (i / spec.k, i)).collect(),
        query_ids: (0..nq).map(|i| (i / spec.q, ns + i)).collect(),
    }
}

fn loss_of(store: &ParamStore<f64>, cfg: &ModelConfig, ep: &Episode, mode: Mode) -> Result<f64> {
    let mut sess = Session::new(store, mode);
    let out = forward(&mut sess, cfg, ep)?;
    Ok(sess.tape.value(out.loss).item()?)
}

/// Central-difference step for composite checks.
pub const MODEL_STEP: f64 = 1e-5;
/// Gradient magnitude below which errors are measured absolutely.
pub const MODEL_FLOOR: f64 = 1e-4;

/// Largest `|a - n| / max(|a|, |n|, MODEL_FLOOR)` between backpropagated
/// parameter gradients and central differences, over every coordinate.
pub fn model_gradcheck(cfg: &ModelConfig, store: &ParamStore<f64>, ep: &Episode, mode: Mode) -> Result<f64> {
    let analytic = {
        let mut sess = Session::new(store, mode);
        let out = forward(&mut sess, cfg, ep)?;
        sess.param_grads(out.loss)?
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let h = MODEL_STEP;
    for (key, grad) in &analytic {
        for i in 0..grad.numel() {
            let x0 = work.param(key)?.value.data()[i];
            work.param_mut(key)?.value.data_mut()[i] = x0 + h;
            let up = loss_of(&work, cfg, ep, mode)?;
            work.param_mut(key)?.value.data_mut()[i] = x0 - h;
            let down = loss_of(&work, cfg, ep, mode)?;
            work.param_mut(key)?.value.data_mut()[i] = x0;
            let (a, n) = (grad.data()[i], (up - down) / (2.0 * h));
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(MODEL_FLOOR));
        }
    }
    Ok(worst)
}

/// Randomises running statistics so eval-mode normalisation is not the
/// identity.
pub fn perturb_running_stats(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<String> = store.buffers().map(|(k, _)| k.clone()).collect();
    for key in keys {
        let buf = store.buffer_mut(&key).expect("listed key");
        let var = key.ends_with("running_var");
        buf.data_mut().iter_mut().for_each(|v| *v = if var { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.5..0.5) });
    }
}

/// Composite graphs covering every head, both mask variants, both softmax
/// modes and the ablations.
pub fn composite_suite() -> Result<Vec<(String, f64)>> {
    let spec = EpisodeSpec { n: 3, k: 2, q: 2 };
    let ep = noise_episode(spec, 8, 11);
    let base = tiny_ctm();
    let cases: Vec<(String, ModelConfig)> = vec![
        ("prototypical, sample-wise".into(), tiny_model(HeadKind::Prototypical, LossKind::CrossEntropy, base.clone())),
        ("matching, sample-wise".into(), tiny_model(HeadKind::Matching, LossKind::CrossEntropy, base.clone())),
        ("relation ce, sample-wise".into(), tiny_model(HeadKind::Relation, LossKind::CrossEntropy, base.clone())),
        ("relation mse, sample-wise".into(), tiny_model(HeadKind::Relation, LossKind::Mse, base.clone())),
        (
            "prototypical, cluster-wise".into(),
            tiny_model(
                HeadKind::Prototypical,
                LossKind::CrossEntropy,
                CtmConfig { variant: MaskVariant::ClusterWise, ..base.clone() },
            ),
        ),
        (
            "prototypical, softmax over all locations".into(),
            tiny_model(
                HeadKind::Prototypical,
                LossKind::CrossEntropy,
                CtmConfig { softmax: SoftmaxMode::AllLocations, ..base.clone() },
            ),
        ),
        (
            "prototypical, no concentrator".into(),
            tiny_model(HeadKind::Prototypical, LossKind::CrossEntropy, CtmConfig { no_concentrator: true, ..base.clone() }),
        ),
        (
            "prototypical, no projector".into(),
            tiny_model(HeadKind::Prototypical, LossKind::CrossEntropy, CtmConfig { no_projector: true, ..base.clone() }),
        ),
        (
            "prototypical, traversal without batch norm".into(),
            tiny_model(
                HeadKind::Prototypical,
                LossKind::CrossEntropy,
                CtmConfig { concentrator_norm: false, projector_norm: false, ..base.clone() },
            ),
        ),
        (
            "prototypical, baseline".into(),
            tiny_model(HeadKind::Prototypical, LossKind::CrossEntropy, CtmConfig { enabled: false, ..base }),
        ),
    ];
    let mut out = Vec::new();
    for (i, (name, cfg)) in cases.into_iter().enumerate() {
        let mut store = cfg.init::<f64>(i as u64)?;
        perturb_running_stats(&mut store, 100 + i as u64);
        out.push((format!("model: {name}"), model_gradcheck(&cfg, &store, &ep, Mode::Eval)?));
    }
    for head in [HeadKind::Prototypical, HeadKind::Relation] {
        let cfg = tiny_model(head, LossKind::CrossEntropy, tiny_ctm());
        let store = cfg.init::<f64>(50)?;
        out.push((format!("model: {} ce, batch statistics", head.name()), model_gradcheck(&cfg, &store, &ep, Mode::Train)?));
    }
    Ok(out)
}

/// Every primitive check followed by the composite graphs.
pub fn full_suite() -> Result<Vec<(String, f64)>> {
    let mut all = op_suite()?;
    all.extend(composite_suite()?);
    Ok(all)
}

/// Worst deviations seen while auditing projector masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskAudit {
    pub inputs: usize,
    /// Largest `|sum - 1|` over per-location channel sums (default mode).
    pub per_location: f64,
    /// Largest `|sum - 1|` over whole-mask sums (all-locations mode).
    pub global: f64,
    /// Whether every entry lay in [0, 1] (exact 0 only through underflow).
    pub unit_interval: bool,
}

/// Runs the projector on `inputs` random concentrator outputs with random
/// weights, in both softmax modes.
pub fn mask_audit(inputs: usize, seed: u64) -> Result<MaskAudit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut audit = MaskAudit { inputs, per_location: 0.0, global: 0.0, unit_interval: true };
    for _ in 0..inputs {
        let n = rng.gen_range(2..=6);
        let m = rng.gen_range(2..=12);
        let d = rng.gen_range(1..=5);
        let scale = [0.1f32, 1.0, 10.0][rng.gen_range(0..3)];
        let norm = rng.gen_bool(0.5);
        let base = CtmConfig { m2: m, m3: m, projector_norm: norm, ..CtmConfig::default() };
        let mut store = ParamStore::<f32>::new();
        base.init(&mut store, n, m, &mut rng);
        let keys: Vec<String> = store.params().map(|(k, _)| k.clone()).collect();
        for key in keys {
            let p = store.param_mut(&key)?;
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        }
        let o = Tensor::from_fn([n, m, d, d], |_| rng.gen_range(-3.0f32..3.0) * scale);
        for mode in [SoftmaxMode::PerLocation, SoftmaxMode::AllLocations] {
            let cfg = CtmConfig { softmax: mode, ..base.clone() };
            let mut sess = Session::new(&store, Mode::Train);
            let x = sess.tape.constant(o.clone());
            let p = crate::ctm::projector_forward(&mut sess, &cfg, x)?;
            let mask = sess.tape.value(p);
            let data = mask.data();
            match mode {
                SoftmaxMode::PerLocation => {
                    let plane = d * d;
                    for loc in 0..plane {
                        let s: f64 = (0..m).map(|c| f64::from(data[c * plane + loc])).sum();
                        audit.per_location = audit.per_location.max((s - 1.0).abs());
                    }
                    audit.unit_interval &= data.iter().all(|&v| (0.0..=1.0).contains(&v));
                }
                SoftmaxMode::AllLocations => {
                    let s: f64 = data.iter().map(|&v| f64::from(v)).sum();
                    audit.global = audit.global.max((s - 1.0).abs());
                }
            }
        }
    }
    Ok(audit)
}

/// In-memory dataset of constant-valued images, each image value unique.
pub fn synthetic_index(classes: [usize; 3], images_per_class: usize, size: usize) -> Result<DatasetIndex> {
    let mut splits = BTreeMap::new();
    let mut id = 0usize;
    for (split, count) in Split::ALL.into_iter().zip(classes) {
        let entries = (0..count)
            .map(|c| ClassEntry {
                name: format!("{split}_{c:03}"),
                images: (0..images_per_class)
                    .map(|_| {
                        id += 1;
                        Tensor::full([3, size, size], id as f32)
                    })
                    .collect(),
            })
            .collect();
        splits.insert(split, entries);
    }
    DatasetIndex::from_classes(splits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerAudit {
    pub episodes: usize,
    pub violations: Vec<String>,
    /// Every episode resampled under the same seed and stream was identical.
    pub reproducible: bool,
}

/// Samples `per_spec` episodes of each spec from every split, checking
/// counts, support/query overlap, that images really belong to the labelled
/// class, that classes come from the sampled split only, and that
/// resampling reproduces the episode exactly.
pub fn sampler_audit(index: &DatasetIndex, specs: &[EpisodeSpec], per_spec: usize, seed: u64) -> Result<SamplerAudit> {
    let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
    let mut violations = Vec::new();
    for split in Split::ALL {
        for c in index.classes(split)? {
            if let Some(prev) = owner.insert(&c.name, split) {
                violations.push(format!("class {} in both {prev} and {split}", c.name));
            }
        }
    }
    let mut audit = SamplerAudit { episodes: 0, violations, reproducible: true };
    for (si, spec) in specs.iter().enumerate() {
        for e in 0..per_spec {
            let split = Split::ALL[e % 3];
            let stream = ((si as u64) << 32) | e as u64;
            let draw = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                sample_episode(index, split, spec, &mut rng)
            };
            let ep = draw()?;
            audit.episodes += 1;
            let tag = format!("{}w{}s episode {e} ({split})", spec.n, spec.k);
            if let Err(v) = audit_episode(&ep) {
                audit.violations.push(format!("{tag}: {v}"));
            }
            let classes = index.classes(split)?;
            for &c in &ep.class_map {
                if owner.get(classes[c].name.as_str()) != Some(&split) {
                    audit.violations.push(format!("{tag}: class {} not from {split}", classes[c].name));
                }
            }
            let rows = ep.support_ids.iter().zip(&ep.support_labels).chain(ep.query_ids.iter().zip(&ep.query_labels));
            for (i, (&(class, image), &label)) in rows.enumerate() {
                if class != ep.class_map[label] {
                    audit.violations.push(format!("{tag}: row {i} labelled {label} but drawn from class {class}"));
                }
                let expected = &classes[class].images[image];
                let ns = ep.support_ids.len();
                let got = if i < ns { ep.support.slice_rows(i, i + 1)? } else { ep.query.slice_rows(i - ns, i - ns + 1)? };
                if got.data() != expected.data() {
                    audit.violations.push(format!("{tag}: row {i} pixels do not match image {class}/{image}"));
                }
            }
            audit.reproducible &= draw()? == ep;
        }
    }
    Ok(audit)
}

/// Independent Eq.-level oracle: per query, sum each class's scores and
/// keep the first class no other class strictly beats.
pub fn brute_force_predict(scores: &[f64], q: usize, support_labels: &[usize], n: usize) -> Vec<usize> {
    (0..q)
        .map(|j| {
            let class_score = |c: usize| -> f64 {
                let rows: Vec<f64> = support_labels
                    .iter()
                    .enumerate()
                    .filter(|&(_, &l)| l == c)
                    .map(|(i, _)| scores[i * q + j])
                    .collect();
                rows.iter().sum::<f64>() / rows.len() as f64
            };
            let all: Vec<f64> = (0..n).map(class_score).collect();
            (0..n).find(|&c| (0..n).all(|o| all[o] <= all[c])).expect("a maximum exists")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionAudit {
    pub matrices: usize,
    pub mismatches: usize,
    /// Largest change in cross-entropy (f64) after adding a per-query constant.
    pub ce_shift: f64,
    /// The same in f32, where rounding the shifted scores already moves
    /// them by up to half an ulp of `|s| + 10`.
    pub ce_shift_f32: f64,
    /// Predictions changed by a per-query shift.
    pub shift_flips: usize,
}

fn ce_shift<T: Scalar>(a: &[f64], b: &[f64], n: usize, q: usize, labels: &[usize]) -> Result<f64> {
    let ce = |values: &[f64]| -> Result<f64> {
        let mut tape = Tape::<T>::new();
        let x = tape.constant(Tensor::<f64>::new([n, q], values.to_vec())?.cast::<T>());
        let loss = episode_loss(&mut tape, x, labels, LossKind::CrossEntropy)?;
        Ok(tape.value(loss).item()?.as_f64())
    };
    Ok((ce(a)? - ce(b)?).abs())
}

/// Compares `predict_labels` with the brute-force oracle on random
/// matrices, half of them with small-integer scores so exact ties occur.
pub fn prediction_audit(matrices: usize, seed: u64) -> Result<PredictionAudit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut audit = PredictionAudit { matrices, mismatches: 0, ce_shift: 0.0, ce_shift_f32: 0.0, shift_flips: 0 };
    for m in 0..matrices {
        let n = rng.gen_range(2..=8);
        let k = rng.gen_range(1..=4);
        let q = rng.gen_range(1..=6);
        let mut labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat(c).take(k)).collect();
        labels.shuffle(&mut rng);
        let ties = m % 2 == 0;
        let scores: Vec<f64> = (0..n * k * q)
            .map(|_| if ties { f64::from(rng.gen_range(0..3u8)) } else { rng.gen_range(-5.0..5.0) })
            .collect();
        let predicted = predict_labels(&scores, q, &labels, n);
        if predicted != brute_force_predict(&scores, q, &labels, n) {
            audit.mismatches += 1;
        }

        let shifts: Vec<f64> = (0..q).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let shifted: Vec<f64> = scores.iter().enumerate().map(|(i, s)| s + shifts[i % q]).collect();
        if predict_labels(&shifted, q, &labels, n) != predicted && !ties {
            audit.shift_flips += 1;
        }
        let query_labels: Vec<usize> = (0..q).map(|_| rng.gen_range(0..n)).collect();
        let class = average_scores(&scores, q, &labels, n);
        let class_shifted: Vec<f64> = class.iter().enumerate().map(|(i, s)| s + shifts[i % q]).collect();
        let shift = ce_shift::<f64>(&class, &class_shifted, n, q, &query_labels)?;
        audit.ce_shift = audit.ce_shift.max(shift);
        let shift = ce_shift::<f32>(&class, &class_shifted, n, q, &query_labels)?;
        audit.ce_shift_f32 = audit.ce_shift_f32.max(shift);
    }
    Ok(audit)
}
