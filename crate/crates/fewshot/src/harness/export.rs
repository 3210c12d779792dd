//! Improved-feature export for external embedding visualisation.
//!
//! First line `CTME1 <vector_len>`, then one row per embedding:
//! `episode_id,class_id,role,v0,v1,...` with nine significant digits.

use std::io::Write;

use ctm_core::{Mode, ParamStore, Session};

use super::eval_rng;
use crate::episodes::{EpisodeSource, EpisodeSpec, Split};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub episode: usize,
    pub class_id: usize,
    pub role: String,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub vector_len: usize,
    pub rows: Vec<EmbeddingRow>,
}

/// Writes improved support and query features of `episodes` sampled
/// episodes; returns the number of rows written.
#[allow(clippy::too_many_arguments)]
pub fn export_embeddings(
    store: &ParamStore<f32>,
    model: &ModelConfig,
    source: &dyn EpisodeSource,
    split: Split,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
    out: &mut dyn Write,
) -> Result<usize> {
    let mut rows = 0;
    let mut header_written = false;
    for e in 0..episodes {
        let ep = source.sample(split, spec, &mut eval_rng(seed, split, e))?;
        let mut sess = Session::new(store, Mode::Eval);
        let f = forward(&mut sess, model, &ep)?;
        let support = sess.tape.value(f.support);
        let query = sess.tape.value(f.query);
        let len = support.numel() / support.shape()[0];
        if !header_written {
            writeln!(out, "CTME1 {len}")?;
            header_written = true;
        }
        let support_classes: Vec<usize> = if f.per_class {
            ep.class_map.clone()
        } else {
            ep.support_labels.iter().map(|&l| ep.class_map[l]).collect()
        };
        let query_classes: Vec<usize> = ep.query_labels.iter().map(|&l| ep.class_map[l]).collect();
        for (role, t, classes) in [("support", support, support_classes), ("query", query, query_classes)] {
            for (i, chunk) in t.data().chunks(len).enumerate() {
                let mut line = format!("{e},{},{role}", classes[i]);
                for v in chunk {
                    line.push_str(&format!(",{v:.8e}"));
                }
                writeln!(out, "{line}")?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

pub fn parse_embeddings(text: &str) -> Result<Embeddings> {
    let bad = |m: String| Error::Checkpoint(format!("embedding file: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let vector_len = header
        .strip_prefix("CTME1 ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + vector_len {
            return Err(bad(format!("row {i} has {} fields", fields.len())));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("row {i}: {s:?}")));
        let values = fields[3..]
            .iter()
            .map(|s| s.parse::<f32>().map_err(|_| bad(format!("row {i}: value {s:?}"))))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow {
            episode: parse_usize(fields[0])?,
            class_id: parse_usize(fields[1])?,
            role: fields[2].to_string(),
            values,
        });
    }
    Ok(Embeddings { vector_len, rows })
}
