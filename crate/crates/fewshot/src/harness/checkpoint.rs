//! Checkpoint file: a text manifest followed by concatenated CTMT records.
//!
//! ```text
//! CTMCKPT 1
//! config_hash <hex>
//! episode <n>
//! adam_step <n>
//! rng <seed-hex> <stream> <word_pos>
//! best_val <f64 bits as hex | none>
//! config <line count>
//! <config lines>
//! tensor <key> <offset> <len>
//! ...
//! end
//! <blob>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ctm_core::io::{decode_tensor_exact, encode_tensor};
use ctm_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const HEADER: &str = "CTMCKPT 1";

/// Exact position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Serialized configuration the run was started with.
    pub config_text: String,
    pub episode: u64,
    pub adam_step: u64,
    pub adam_first: BTreeMap<String, Tensor<f32>>,
    pub adam_second: BTreeMap<String, Tensor<f32>>,
    pub rng: RngState,
    pub best_val: Option<f64>,
    pub store: ParamStore<f32>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

impl Checkpoint {
    fn records(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        out.extend(self.store.params().map(|(k, p)| (format!("param.{k}"), &p.value)));
        out.extend(self.store.buffers().map(|(k, b)| (format!("buffer.{k}"), b)));
        out.extend(self.adam_first.iter().map(|(k, t)| (format!("adam.m.{k}"), t)));
        out.extend(self.adam_second.iter().map(|(k, t)| (format!("adam.v.{k}"), t)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        let _ = writeln!(manifest, "{HEADER}");
        let _ = writeln!(manifest, "config_hash {}", self.config_hash);
        let _ = writeln!(manifest, "episode {}", self.episode);
        let _ = writeln!(manifest, "adam_step {}", self.adam_step);
        let _ = writeln!(manifest, "rng {} {} {}", hex(&self.rng.seed), self.rng.stream, self.rng.word_pos);
        match self.best_val {
            Some(v) => _ = writeln!(manifest, "best_val {:016x}", v.to_bits()),
            None => _ = writeln!(manifest, "best_val none"),
        }
        let config_lines: Vec<&str> = self.config_text.lines().collect();
        let _ = writeln!(manifest, "config {}", config_lines.len());
        for line in config_lines {
            let _ = writeln!(manifest, "{line}");
        }
        let mut blob = Vec::new();
        for (key, t) in self.records() {
            let bytes = encode_tensor(t);
            let _ = writeln!(manifest, "tensor {key} {} {}", blob.len(), bytes.len());
            blob.extend_from_slice(&bytes);
        }
        let _ = writeln!(manifest, "end");
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated manifest".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8".into()))
        };
        let header = next_line()?;
        if header != HEADER {
            return Err(bad(format!("unsupported header {header:?}, expected {HEADER:?}")));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = next_line()?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected field {name}, found {line:?}")))
        };
        let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| bad(format!("bad {what}: {s:?}")));
        let config_hash = field("config_hash")?;
        let episode = num(&field("episode")?, "episode")?;
        let adam_step = num(&field("adam_step")?, "adam_step")?;
        let rng_line = field("rng")?;
        let parts: Vec<&str> = rng_line.split(' ').collect();
        let rng = match parts.as_slice() {
            [seed, stream, word_pos] => {
                let seed: [u8; 32] = unhex(seed)
                    .and_then(|v| v.try_into().ok())
                    .ok_or_else(|| bad(format!("bad rng seed {seed:?}")))?;
                let stream = num(stream, "rng stream")?;
                let word_pos = word_pos.parse::<u128>().map_err(|_| bad(format!("bad rng word_pos {word_pos:?}")))?;
                RngState { seed, stream, word_pos }
            }
            _ => return Err(bad(format!("bad rng line {rng_line:?}"))),
        };
        let best = field("best_val")?;
        let best_val = match best.as_str() {
            "none" => None,
            s => Some(f64::from_bits(u64::from_str_radix(s, 16).map_err(|_| bad(format!("bad best_val {s:?}")))?)),
        };
        let config_count = num(&field("config")?, "config line count")?;
        let mut config_text = String::new();
        for _ in 0..config_count {
            config_text.push_str(next_line()?);
            config_text.push('\n');
        }
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["tensor", key, off, len] => {
                    entries.push((key.to_string(), num(off, "offset")? as usize, num(len, "length")? as usize))
                }
                _ => return Err(bad(format!("bad manifest line {line:?}"))),
            }
        }
        let blob = &bytes[pos..];
        let mut store = ParamStore::new();
        let (mut adam_first, mut adam_second) = (BTreeMap::new(), BTreeMap::new());
        for (key, off, len) in entries {
            let raw = off
                .checked_add(len)
                .and_then(|end| blob.get(off..end))
                .ok_or_else(|| bad(format!("record {key} exceeds the payload")))?;
            let t: Tensor<f32> = decode_tensor_exact(raw)?.into_exact()?;
            if let Some(k) = key.strip_prefix("param.") {
                store.insert_param(k, t);
            } else if let Some(k) = key.strip_prefix("buffer.") {
                store.insert_buffer(k, t);
            } else if let Some(k) = key.strip_prefix("adam.m.") {
                adam_first.insert(k.to_string(), t);
            } else if let Some(k) = key.strip_prefix("adam.v.") {
                adam_second.insert(k.to_string(), t);
            } else {
                return Err(bad(format!("unknown record kind {key}")));
            }
        }
        Ok(Self { config_hash, config_text, episode, adam_step, adam_first, adam_second, rng, best_val, store })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.insert_param("a.w", Tensor::from_fn([2, 3], |i| i as f32 * 0.25));
        store.insert_buffer("a.bn.running_mean", Tensor::full([3], 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        rng.set_stream(9);
        rng.next_u64();
        Checkpoint {
            config_hash: "abc".into(),
            config_text: "episode.n = 5\ntrain.lr = 0.001\n".into(),
            episode: 12,
            adam_step: 12,
            adam_first: [("a.w".to_string(), Tensor::full([2, 3], 1e-3f32))].into(),
            adam_second: [("a.w".to_string(), Tensor::full([2, 3], 1e-6f32))].into(),
            rng: RngState::capture(&rng),
            best_val: Some(61.25),
            store,
        }
    }

    #[test]
    fn byte_identical_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_resumes_mid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u32();
        let mut restored = RngState::capture(&rng).restore();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }

    #[test]
    fn version_and_truncation_errors() {
        let bytes = sample().to_bytes();
        let mut wrong = bytes.clone();
        wrong[8] = b'2';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
