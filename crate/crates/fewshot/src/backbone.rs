//! Four-block convolutional feature extractor.

use ctm_core::nn::add_conv_block;
use ctm_core::{ParamStore, Scalar, Session, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub pool: bool,
}

/// Each block is conv3x3 (pad 1) -> batchnorm -> relu -> optional maxpool2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

impl BackboneConfig {
    pub fn new(channels: &[usize], pools: &[bool]) -> Result<Self> {
        if channels.is_empty() || channels.len() != pools.len() || channels.contains(&0) {
            return Err(Error::Config(format!(
                "backbone needs matching, non-empty channel ({}) and pool ({}) lists of positive widths",
                channels.len(),
                pools.len()
            )));
        }
        let blocks = channels.iter().zip(pools).map(|(&out_channels, &pool)| BlockSpec { out_channels, pool }).collect();
        Ok(Self { in_channels: 3, blocks })
    }

    /// 32 channels per block, pooling after the first two.
    pub fn desk() -> Self {
        Self::new(&[32; 4], &[true, true, false, false]).expect("valid")
    }

    /// 64 channels per block, pooling after the first two: 84 -> 21.
    pub fn paper() -> Self {
        Self::new(&[64; 4], &[true, true, false, false]).expect("valid")
    }

    /// `(m1, d1)` for a square input of side `size`.
    pub fn output_dims(&self, size: usize) -> Result<(usize, usize)> {
        let pools = self.blocks.iter().filter(|b| b.pool).count();
        let div = 1usize << pools;
        if size == 0 || size % div != 0 {
            return Err(Error::Config(format!("input size {size} is not divisible by 2^{pools}")));
        }
        Ok((self.out_channels(), size / div))
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    pub fn num_params(&self) -> usize {
        let mut in_c = self.in_channels;
        let mut total = 0;
        for b in &self.blocks {
            total += conv_block_params(in_c, b.out_channels, 3);
            in_c = b.out_channels;
        }
        total
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let mut in_c = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            add_conv_block(store, &block_key(i), in_c, b.out_channels, 3, rng);
            in_c = b.out_channels;
        }
    }
}

/// Trainable parameters of conv(k x k, with bias) followed by batchnorm.
pub fn conv_block_params(in_c: usize, out_c: usize, k: usize) -> usize {
    out_c * in_c * k * k + out_c + 2 * out_c
}

fn block_key(i: usize) -> String {
    format!("backbone.block{i}")
}

/// `images: (B, 3, H, W) -> (B, m1, d1, d1)`.
pub fn backbone_forward<T: Scalar>(sess: &mut Session<'_, T>, config: &BackboneConfig, images: Var) -> Result<Var> {
    let mut x = images;
    for (i, b) in config.blocks.iter().enumerate() {
        x = sess.conv_block(&block_key(i), x, 1, 1)?;
        if b.pool {
            x = sess.tape.maxpool2(x)?;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctm_core::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn declared_dims() {
        assert_eq!(BackboneConfig::paper().output_dims(84).unwrap(), (64, 21));
        assert_eq!(BackboneConfig::desk().output_dims(32).unwrap(), (32, 8));
        assert!(BackboneConfig::desk().output_dims(30).is_err());
        assert!(BackboneConfig::new(&[4, 4], &[true]).is_err());
    }

    #[test]
    fn forward_matches_declared_dims() {
        let cfg = BackboneConfig::new(&[4, 5, 6, 7], &[true, false, true, false]).unwrap();
        let mut store = ParamStore::<f32>::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.num_params(), cfg.num_params());
        let mut sess = Session::new(&store, Mode::Train);
        let x = sess.tape.constant(Tensor::from_fn([3, 3, 12, 12], |i| (i % 7) as f32 * 0.1));
        let y = backbone_forward(&mut sess, &cfg, x).unwrap();
        let (m1, d1) = cfg.output_dims(12).unwrap();
        assert_eq!(sess.tape.shape(y), &[3, m1, d1, d1]);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = BackboneConfig::new(&[4, 4], &[true, false]).unwrap();
        let mut store = ParamStore::<f32>::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for (_, p) in store.params_mut() {
            if p.value.rank() == 4 {
                p.value.data_mut().fill(0.0);
            }
        }
        let mut sess = Session::new(&store, Mode::Eval);
        let x = sess.tape.constant(Tensor::from_fn([2, 3, 8, 8], |i| i as f32));
        let y = backbone_forward(&mut sess, &cfg, x).unwrap();
        assert!(sess.tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
