//! Category traversal module: concentrator, projector, reshaper and mask.

use ctm_core::nn::{add_conv, add_conv_block};
use ctm_core::ops::conv::conv_out_extent;
use ctm_core::{ParamStore, Scalar, Session, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::backbone::conv_block_params;
use crate::error::{Error, Result};

pub const CONCENTRATOR: &str = "ctm.concentrator";
pub const PROJECTOR: &str = "ctm.projector";
pub const RESHAPER: &str = "ctm.reshaper";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskVariant {
    /// Mask the reshaped per-sample support features.
    SampleWise,
    /// Mask the per-class concentrator outputs.
    ClusterWise,
}

impl MaskVariant {
    pub fn name(self) -> &'static str {
        match self {
            MaskVariant::SampleWise => "sample_wise",
            MaskVariant::ClusterWise => "cluster_wise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [MaskVariant::SampleWise, MaskVariant::ClusterWise].into_iter().find(|v| v.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxMode {
    /// Channel softmax at every spatial location.
    PerLocation,
    /// One softmax over every mask entry.
    AllLocations,
}

impl SoftmaxMode {
    pub fn name(self) -> &'static str {
        match self {
            SoftmaxMode::PerLocation => "per_location",
            SoftmaxMode::AllLocations => "all_locations",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SoftmaxMode::PerLocation, SoftmaxMode::AllLocations].into_iter().find(|v| v.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtmConfig {
    pub enabled: bool,
    pub variant: MaskVariant,
    pub m2: usize,
    pub m3: usize,
    /// Shared by the concentrator and reshaper convolutions (3x3).
    pub stride: usize,
    pub pad: usize,
    pub projector_kernel: usize,
    pub softmax: SoftmaxMode,
    pub no_concentrator: bool,
    pub no_projector: bool,
    /// Batch norm between the projector convolution and its relu.
    pub projector_norm: bool,
    /// Batch norm inside the concentrator block.
    pub concentrator_norm: bool,
}

impl Default for CtmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            variant: MaskVariant::SampleWise,
            m2: 16,
            m3: 16,
            stride: 2,
            pad: 1,
            projector_kernel: 1,
            softmax: SoftmaxMode::PerLocation,
            no_concentrator: false,
            no_projector: false,
            projector_norm: true,
            concentrator_norm: true,
        }
    }
}

/// Channel and spatial extents at each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CtmDims {
    pub m1: usize,
    pub d1: usize,
    pub m2: usize,
    pub d2: usize,
    pub m3: usize,
    pub d3: usize,
}

impl CtmConfig {
    pub fn dims(&self, m1: usize, d1: usize) -> Result<CtmDims> {
        if self.m2 == 0 || self.m3 == 0 || self.stride == 0 {
            return Err(Error::Config("ctm.m2, ctm.m3 and ctm.stride must be positive".into()));
        }
        if self.projector_kernel % 2 == 0 {
            return Err(Error::Config(format!("ctm.projector_kernel must be odd, got {}", self.projector_kernel)));
        }
        let d2 = conv_out_extent(d1, 3, self.stride, self.pad)?;
        let dims = CtmDims { m1, d1, m2: self.m2, d2, m3: self.m3, d3: d2 };
        if !self.enabled {
            return Ok(dims);
        }
        let needs_shared = self.variant == MaskVariant::ClusterWise || self.no_projector;
        if needs_shared && self.m2 != self.m3 {
            return Err(Error::Config(format!(
                "{} with m2 = {} requires m3 = m2 (got {})",
                if self.no_projector { "no_projector" } else { "cluster_wise" },
                self.m2,
                self.m3
            )));
        }
        if self.variant == MaskVariant::ClusterWise && self.no_concentrator {
            return Err(Error::Config("cluster_wise needs the concentrator".into()));
        }
        Ok(dims)
    }

    /// Channels of the per-class prototypes `o`.
    fn prototype_channels(&self) -> usize {
        if self.no_concentrator {
            self.m3
        } else {
            self.m2
        }
    }

    /// Adds the reshaper always, and the concentrator/projector when enabled.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, n: usize, m1: usize, rng: &mut R) {
        add_conv_block(store, RESHAPER, m1, self.m3, 3, rng);
        if !self.enabled {
            return;
        }
        if !self.no_concentrator {
            if self.concentrator_norm {
                add_conv_block(store, CONCENTRATOR, m1, self.m2, 3, rng);
            } else {
                add_conv(store, &format!("{CONCENTRATOR}.conv"), m1, self.m2, 3, rng);
            }
        }
        if !self.no_projector {
            let (in_c, k) = (n * self.prototype_channels(), self.projector_kernel);
            if self.projector_norm {
                add_conv_block(store, PROJECTOR, in_c, self.m3, k, rng);
            } else {
                add_conv(store, &format!("{PROJECTOR}.conv"), in_c, self.m3, k, rng);
            }
        }
    }

    /// Parameters of the concentrator and projector.
    pub fn traversal_params(&self, n: usize, m1: usize) -> usize {
        if !self.enabled {
            return 0;
        }
        let mut total = 0;
        if !self.no_concentrator {
            total += conv_block_params(m1, self.m2, 3);
            if !self.concentrator_norm {
                total -= 2 * self.m2;
            }
        }
        if !self.no_projector {
            let k = self.projector_kernel;
            total += conv_block_params(n * self.prototype_channels(), self.m3, k);
            if !self.projector_norm {
                total -= 2 * self.m3;
            }
        }
        total
    }
}

/// Averages each run of `k` consecutive rows: `(N*K, ...) -> (N, ...)`.
/// With `k == 1` the input is returned unchanged. Computed as the first
/// row plus the mean offset from it, so identical rows average exactly.
pub fn class_mean<T: Scalar>(tape: &mut Tape<T>, x: Var, n: usize, k: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.first() != Some(&(n * k)) {
        let detail = format!("{shape:?} with N = {n}, K = {k}");
        return Err(TensorError::Shape { op: "class_mean", detail }.into());
    }
    if k == 1 {
        return Ok(x);
    }
    let inv = T::lit(1.0 / k as f64);
    let avg = Tensor::from_fn([n, n * k], |i| if (i % (n * k)) / k == i / (n * k) { inv } else { T::zero() });
    let avg = tape.constant(avg);
    let flat = tape.flatten(x)?;
    let firsts: Vec<usize> = (0..n).map(|c| c * k).collect();
    let anchor = tape.gather_rows(flat, &firsts)?;
    let spread: Vec<usize> = (0..n * k).map(|i| i / k * k).collect();
    let anchor_rows = tape.gather_rows(flat, &spread)?;
    let offsets = tape.sub(flat, anchor_rows)?;
    let mean_offset = tape.matmul(avg, offsets)?;
    let y = tape.add(anchor, mean_offset)?;
    let mut out = shape;
    out[0] = n;
    Ok(tape.reshape(y, &out)?)
}

/// `(N*K, m1, d1, d1) -> (N, m2, d2, d2)`.
pub fn concentrator_forward<T: Scalar>(sess: &mut Session<'_, T>, cfg: &CtmConfig, support: Var, n: usize, k: usize) -> Result<Var> {
    let rows = sess.tape.shape(support)[0];
    if n == 0 || rows % n != 0 || rows / n != k {
        return Err(Error::Config(format!("concentrator input has {rows} samples, expected N*K = {n}*{k}")));
    }
    let y = if cfg.concentrator_norm {
        sess.conv_block(CONCENTRATOR, support, cfg.stride, cfg.pad)?
    } else {
        let y = sess.conv(&format!("{CONCENTRATOR}.conv"), support, cfg.stride, cfg.pad)?;
        sess.tape.relu(y)
    };
    class_mean(&mut sess.tape, y, n, k)
}

/// `(N, m2, d2, d2) -> (1, m3, d3, d3)`.
pub fn projector_forward<T: Scalar>(sess: &mut Session<'_, T>, cfg: &CtmConfig, o: Var) -> Result<Var> {
    let &[n, m, d, d_] = sess.tape.shape(o) else {
        return Err(Error::Config(format!("projector expects a feature map, got {:?}", sess.tape.shape(o))));
    };
    let o_hat = sess.tape.reshape(o, &[1, n * m, d, d_])?;
    let pad = cfg.projector_kernel / 2;
    let y = if cfg.projector_norm {
        sess.conv_block(PROJECTOR, o_hat, 1, pad)?
    } else {
        let y = sess.conv(&format!("{PROJECTOR}.conv"), o_hat, 1, pad)?;
        sess.tape.relu(y)
    };
    mask_softmax(&mut sess.tape, y, cfg.softmax)
}

/// Normalises a `(1, m3, d3, d3)` block into a mask.
pub fn mask_softmax<T: Scalar>(tape: &mut Tape<T>, y: Var, mode: SoftmaxMode) -> Result<Var> {
    Ok(match mode {
        SoftmaxMode::PerLocation => tape.softmax_axis(y, 1)?,
        SoftmaxMode::AllLocations => {
            let shape = tape.shape(y).to_vec();
            let flat = tape.reshape(y, &[1, shape.iter().product()])?;
            let p = tape.softmax_axis(flat, 1)?;
            tape.reshape(p, &shape)?
        }
    })
}

/// `(B, m1, d1, d1) -> (B, m3, d3, d3)`.
pub fn reshaper_forward<T: Scalar>(sess: &mut Session<'_, T>, cfg: &CtmConfig, x: Var) -> Result<Var> {
    Ok(sess.conv_block(RESHAPER, x, cfg.stride, cfg.pad)?)
}

/// Multiplies every sample by the mask `p: (1, m, d, d)`.
pub fn apply_mask<T: Scalar>(tape: &mut Tape<T>, x: Var, p: Var) -> Result<Var> {
    Ok(tape.mul(x, p)?)
}

/// Support and query embeddings handed to a metric head.
#[derive(Clone, Copy, Debug)]
pub struct Improved {
    pub support: Var,
    /// True when `support` holds one row per class rather than per sample.
    pub per_class: bool,
    pub query: Var,
    pub mask: Option<Var>,
}

/// Runs the traversal stages on backbone features of support and query.
/// The reshaper sees support and query as one batch so both share its
/// normalisation statistics.
pub fn ctm_forward<T: Scalar>(
    sess: &mut Session<'_, T>,
    cfg: &CtmConfig,
    support: Var,
    query: Var,
    n: usize,
    k: usize,
) -> Result<Improved> {
    let (ns, nq) = (sess.tape.shape(support)[0], sess.tape.shape(query)[0]);
    let both = sess.tape.concat(&[support, query], 0)?;
    let r = reshaper_forward(sess, cfg, both)?;
    let r_support = sess.tape.gather_rows(r, &(0..ns).collect::<Vec<_>>())?;
    let r_query = sess.tape.gather_rows(r, &(ns..ns + nq).collect::<Vec<_>>())?;
    if !cfg.enabled {
        return Ok(Improved { support: r_support, per_class: false, query: r_query, mask: None });
    }
    let o = if cfg.no_concentrator {
        class_mean(&mut sess.tape, r_support, n, k)?
    } else {
        concentrator_forward(sess, cfg, support, n, k)?
    };
    if cfg.no_projector {
        return Ok(Improved { support: o, per_class: true, query: r_query, mask: None });
    }
    let p = projector_forward(sess, cfg, o)?;
    let (s, per_class) = match cfg.variant {
        MaskVariant::SampleWise => (apply_mask(&mut sess.tape, r_support, p)?, false),
        MaskVariant::ClusterWise => (apply_mask(&mut sess.tape, o, p)?, true),
    };
    let q = apply_mask(&mut sess.tape, r_query, p)?;
    Ok(Improved { support: s, per_class, query: q, mask: Some(p) })
}
