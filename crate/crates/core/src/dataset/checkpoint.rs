//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "CKGECKPT"
//! version   u32
//! width     u32      bytes per float (4 or 8)
//! entities  u64
//! relations u64
//! tokens    u64
//! dim       u64
//! tensors            entities, relations, entity tokens, relation tokens,
//!                    then the Adam m and v buffers of each, in that order
//! trailer   u64 length + JSON metadata
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EmbeddingTable, SnapshotSequence};
use crate::real::Real;
use crate::tokens::{Scope, TokenSet};
use crate::trainer::{AdamState, ModelState, Moments, TrainConfig};

pub const MAGIC: &[u8; 8] = b"CKGECKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 * 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub width: u32,
    pub entities: usize,
    pub relations: usize,
    pub tokens: usize,
    pub dim: usize,
}

impl CheckpointHeader {
    fn tensor_floats(&self) -> Option<usize> {
        let rows = self
            .entities
            .checked_add(self.relations)?
            .checked_add(self.tokens.checked_mul(2)?)?;
        rows.checked_mul(self.dim)?.checked_mul(3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub snapshot: usize,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Adam step counters: entities, relations, entity tokens, relation tokens.
    pub adam_steps: [u64; 4],
    pub version: String,
}

fn parse_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
    let h = CheckpointHeader {
        version: u32_at(8),
        width: u32_at(12),
        entities: u64_at(16),
        relations: u64_at(24),
        tokens: u64_at(32),
        dim: u64_at(40),
    };
    if h.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {} (expected {FORMAT_VERSION})",
            h.version
        )));
    }
    if h.width != 4 && h.width != 8 {
        return Err(Error::Format(format!("float width {}", h.width)));
    }
    Ok(h)
}

/// Reads only the header, e.g. to pick the float width before loading.
pub fn peek_header(path: &Path) -> Result<CheckpointHeader> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; HEADER_LEN];
    let mut read = 0;
    while read < HEADER_LEN {
        let n = f.read(&mut buf[read..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        read += n;
    }
    parse_header(&buf[..read])
}

/// Fails with a shape error when the checkpoint does not cover the
/// vocabulary of `snapshot`. Ids are stable, so a later model covers every
/// earlier snapshot through a prefix of its tables.
pub fn check_dimensions(
    h: &CheckpointHeader,
    seq: &SnapshotSequence,
    snapshot: usize,
) -> Result<()> {
    if snapshot >= seq.len() {
        return Err(Error::Contract(format!(
            "snapshot {snapshot} out of range (dataset has {})",
            seq.len()
        )));
    }
    let g = seq.snapshot(snapshot);
    if h.entities < g.num_entities || h.relations < g.num_relations {
        return Err(Error::shape(format!(
            "checkpoint has {} entities and {} relations; snapshot {snapshot} has {} and {}",
            h.entities, h.relations, g.num_entities, g.num_relations
        )));
    }
    Ok(())
}

pub fn save_checkpoint<F: Real>(
    path: &Path,
    state: &ModelState<F>,
    cfg: &TrainConfig,
) -> Result<()> {
    let dim = state.dim();
    let tokens = state.entity_tokens.count();
    if state.relations.dim() != dim
        || state.entity_tokens.dim() != dim
        || state.relation_tokens.dim() != dim
        || state.relation_tokens.count() != tokens
    {
        return Err(Error::shape("inconsistent model dimensions"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 3 * F::BYTES * state.entities.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(F::BYTES as u32).to_le_bytes());
    for n in [state.entities.rows(), state.relations.rows(), tokens, dim] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    let m = &state.moments;
    let adam = [
        &m.entities,
        &m.relations,
        &m.entity_tokens,
        &m.relation_tokens,
    ];
    let params = [
        state.entities.as_slice(),
        state.relations.as_slice(),
        state.entity_tokens.z.as_slice(),
        state.relation_tokens.z.as_slice(),
    ];
    for p in params {
        p.iter().for_each(|&x| x.write_le(&mut out));
    }
    for (a, p) in adam.iter().zip(params) {
        // Moments may be empty on a model that never trained that tensor.
        for buf in [&a.m, &a.v] {
            if buf.is_empty() {
                (0..p.len()).for_each(|_| F::zero().write_le(&mut out));
            } else if buf.len() == p.len() {
                buf.iter().for_each(|&x| x.write_le(&mut out));
            } else {
                return Err(Error::shape("moment buffer does not match its tensor"));
            }
        }
    }
    let meta = CheckpointMeta {
        snapshot: state.snapshot,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        adam_steps: [adam[0].step, adam[1].step, adam[2].step, adam[3].step],
        version: crate::telemetry::version_stamp(),
    };
    let trailer = serde_json::to_vec(&meta)?;
    out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
    out.extend_from_slice(&trailer);

    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(ModelState<F>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes)?;
    if h.width as usize != F::BYTES {
        return Err(Error::Format(format!(
            "checkpoint stores {}-byte floats, {}-byte requested",
            h.width,
            F::BYTES
        )));
    }
    let body = h
        .tensor_floats()
        .and_then(|n| n.checked_mul(F::BYTES))
        .filter(|&n| n <= bytes.len())
        .ok_or_else(|| Error::Format("tensor sizes exceed the file".into()))?;
    let trailer_at = HEADER_LEN + body;
    if bytes.len() < trailer_at + 8 {
        return Err(Error::Format(format!(
            "truncated: {} bytes, tensors need {}",
            bytes.len(),
            trailer_at + 8
        )));
    }
    let tlen = u64::from_le_bytes(bytes[trailer_at..trailer_at + 8].try_into().unwrap()) as usize;
    if (trailer_at + 8).checked_add(tlen) != Some(bytes.len()) {
        return Err(Error::Format(format!(
            "file is {} bytes; trailer claims {tlen} after offset {}",
            bytes.len(),
            trailer_at + 8
        )));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[trailer_at + 8..])
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;

    let mut cursor = HEADER_LEN;
    let mut take = |n: usize| -> Vec<F> {
        let v = bytes[cursor..cursor + n * F::BYTES]
            .chunks_exact(F::BYTES)
            .map(F::read_le)
            .collect();
        cursor += n * F::BYTES;
        v
    };
    let d = h.dim;
    let sizes = [h.entities * d, h.relations * d, h.tokens * d, h.tokens * d];
    let params: Vec<Vec<F>> = sizes.iter().map(|&n| take(n)).collect();
    let mut states: Vec<AdamState<F>> = Vec::with_capacity(4);
    for (i, &n) in sizes.iter().enumerate() {
        states.push(AdamState {
            m: take(n),
            v: take(n),
            step: meta.adam_steps[i],
        });
    }
    let mut params = params.into_iter();
    let mut next = |rows: usize| EmbeddingTable::from_vec(rows, d, params.next().unwrap());
    let entities = next(h.entities)?;
    let relations = next(h.relations)?;
    let entity_tokens = TokenSet {
        z: next(h.tokens)?,
        scope: Scope::Entity,
    };
    let relation_tokens = TokenSet {
        z: next(h.tokens)?,
        scope: Scope::Relation,
    };
    let mut states = states.into_iter();
    let moments = Moments {
        entities: states.next().unwrap(),
        relations: states.next().unwrap(),
        entity_tokens: states.next().unwrap(),
        relation_tokens: states.next().unwrap(),
    };
    let state = ModelState {
        snapshot: meta.snapshot,
        entities,
        relations,
        entity_tokens,
        relation_tokens,
        moments,
    };
    if !state.all_finite() {
        return Err(Error::Format(
            "checkpoint holds non-finite parameters".into(),
        ));
    }
    Ok((state, meta))
}
