//! Domain types: triples, cumulative vocabularies, snapshots, embedding tables.

use std::collections::HashSet;
use std::ops::Range;

use indexmap::IndexSet;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;

/// A directed fact `(head, relation, tail)` over dense integer ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

impl Triple {
    pub const fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// Name to id maps for entities and relations.
///
/// Ids are dense and assigned in first-appearance order over the snapshots
/// in sequence, so an id never changes once assigned and the ids known at
/// snapshot `i` are exactly `0..entity_count(i)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entities: IndexSet<String>,
    relations: IndexSet<String>,
    entity_counts: Vec<usize>,
    relation_counts: Vec<usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern_entity(&mut self, name: &str) -> u32 {
        intern(&mut self.entities, name)
    }

    pub fn intern_relation(&mut self, name: &str) -> u32 {
        intern(&mut self.relations, name)
    }

    /// Records the current sizes as the cumulative counts of the next snapshot.
    pub fn close_snapshot(&mut self) {
        self.entity_counts.push(self.entities.len());
        self.relation_counts.push(self.relations.len());
    }

    pub fn entity_id(&self, name: &str) -> Option<u32> {
        self.entities.get_index_of(name).map(|i| i as u32)
    }

    pub fn relation_id(&self, name: &str) -> Option<u32> {
        self.relations.get_index_of(name).map(|i| i as u32)
    }

    pub fn entity_name(&self, id: u32) -> Option<&str> {
        self.entities.get_index(id as usize).map(String::as_str)
    }

    pub fn relation_name(&self, id: u32) -> Option<&str> {
        self.relations.get_index(id as usize).map(String::as_str)
    }

    /// Cumulative entity count N_E(i).
    pub fn entity_count(&self, snapshot: usize) -> usize {
        self.entity_counts[snapshot]
    }

    /// Cumulative relation count N_R(i).
    pub fn relation_count(&self, snapshot: usize) -> usize {
        self.relation_counts[snapshot]
    }

    pub fn snapshot_count(&self) -> usize {
        self.entity_counts.len()
    }

    pub fn total_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn total_relations(&self) -> usize {
        self.relations.len()
    }
}

fn intern(set: &mut IndexSet<String>, name: &str) -> u32 {
    if let Some(i) = set.get_index_of(name) {
        return i as u32;
    }
    let (i, _) = set.insert_full(name.to_owned());
    u32::try_from(i).expect("id space exceeds u32")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Valid => "valid.txt",
            Split::Test => "test.txt",
        }
    }
}

/// One snapshot of a growing graph. Entity and relation counts are
/// cumulative over the sequence up to and including this snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotGraph {
    pub index: usize,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub num_entities: usize,
    pub num_relations: usize,
}

impl SnapshotGraph {
    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Checks id bounds and train/eval disjointness.
    pub fn validate(&self) -> Result<()> {
        for t in self.triples() {
            if t.head as usize >= self.num_entities
                || t.tail as usize >= self.num_entities
                || t.relation as usize >= self.num_relations
            {
                return Err(Error::Structure(format!(
                    "snapshot {}: triple {:?} out of range (N_E={}, N_R={})",
                    self.index, t, self.num_entities, self.num_relations
                )));
            }
        }
        let train: HashSet<_> = self.train.iter().collect();
        if self
            .valid
            .iter()
            .chain(&self.test)
            .any(|t| train.contains(t))
        {
            return Err(Error::Structure(format!(
                "snapshot {}: evaluation triple also present in train",
                self.index
            )));
        }
        Ok(())
    }
}

/// Ordered snapshots sharing one stable-id vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotSequence {
    pub vocab: Vocabulary,
    pub snapshots: Vec<SnapshotGraph>,
}

impl SnapshotSequence {
    pub fn new(vocab: Vocabulary, snapshots: Vec<SnapshotGraph>) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::Structure("sequence has no snapshots".into()));
        }
        for (i, s) in snapshots.iter().enumerate() {
            if s.index != i {
                return Err(Error::Structure(format!(
                    "snapshot at position {i} has index {}",
                    s.index
                )));
            }
            if i > 0 {
                let p = &snapshots[i - 1];
                if s.num_entities < p.num_entities || s.num_relations < p.num_relations {
                    return Err(Error::Structure(format!(
                        "vocabulary shrinks between snapshots {} and {i}",
                        i - 1
                    )));
                }
            }
            s.validate()?;
        }
        Ok(SnapshotSequence { vocab, snapshots })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshot(&self, i: usize) -> &SnapshotGraph {
        &self.snapshots[i]
    }

    /// Union of all triples of snapshots `0..=upto`, every split.
    pub fn known_triples(&self, upto: usize) -> HashSet<Triple> {
        self.snapshots[..=upto]
            .iter()
            .flat_map(|s| s.triples().copied())
            .collect()
    }

    /// Entities that occur in some train split of snapshots `0..=upto`.
    pub fn trained_entities(&self, upto: usize) -> Vec<bool> {
        let mut seen = vec![false; self.snapshots[upto].num_entities];
        for s in &self.snapshots[..=upto] {
            for t in &s.train {
                seen[t.head as usize] = true;
                seen[t.tail as usize] = true;
            }
        }
        seen
    }

    /// Evaluation triples of one split, without those mentioning an entity
    /// that no train split up to this snapshot contains.
    pub fn eval_triples(&self, snapshot: usize, split: Split) -> Vec<Triple> {
        let seen = self.trained_entities(snapshot);
        self.snapshots[snapshot]
            .split(split)
            .iter()
            .filter(|t| seen[t.head as usize] && seen[t.tail as usize])
            .copied()
            .collect()
    }
}

/// Ids shared by two consecutive snapshots. With stable first-appearance
/// ids these are always prefixes of the id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Overlap {
    pub entities: Range<usize>,
    pub relations: Range<usize>,
}

impl Overlap {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }
}

/// Entity and relation ids present in both `prev` and `cur`.
pub fn overlap_ids(prev: &SnapshotGraph, cur: &SnapshotGraph) -> Result<Overlap> {
    if prev.index + 1 != cur.index {
        return Err(Error::Contract(format!(
            "overlap requires consecutive snapshots, got {} and {}",
            prev.index, cur.index
        )));
    }
    Ok(Overlap {
        entities: 0..prev.num_entities.min(cur.num_entities),
        relations: 0..prev.num_relations.min(cur.num_relations),
    })
}

/// Dense row-major `rows x dim` matrix of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<F> {
    rows: usize,
    dim: usize,
    data: Vec<F>,
}

impl<F: Real> EmbeddingTable<F> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            rows,
            dim,
            data: vec![F::zero(); rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{dim} table",
                data.len()
            )));
        }
        Ok(EmbeddingTable { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(rows.len(), dim, rows.concat())
    }

    /// Uniform initialization in `[-6/sqrt(D), 6/sqrt(D)]`.
    pub fn uniform<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let mut t = Self::zeros(rows, dim);
        t.fill_uniform(0..rows, rng);
        t
    }

    pub fn init_bound(dim: usize) -> f64 {
        6.0 / (dim as f64).sqrt()
    }

    fn fill_uniform<R: Rng>(&mut self, rows: Range<usize>, rng: &mut R) {
        let b = Self::init_bound(self.dim);
        let start = rows.start * self.dim;
        let end = rows.end * self.dim;
        for x in &mut self.data[start..end] {
            *x = F::lit(rng.random_range(-b..=b));
        }
    }

    /// Copy of this table extended to `rows` rows; the new rows are drawn
    /// from the uniform initializer.
    pub fn grown<R: Rng>(&self, rows: usize, rng: &mut R) -> Result<Self> {
        if rows < self.rows {
            return Err(Error::shape(format!(
                "cannot shrink table from {} to {rows} rows",
                self.rows
            )));
        }
        let mut out = Self::zeros(rows, self.dim);
        out.data[..self.data.len()].copy_from_slice(&self.data);
        out.fill_uniform(self.rows..rows, rng);
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[F] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, n: usize) -> &mut [F] {
        &mut self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// SHA-256 over the exact bit patterns, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for x in &self.data {
            h.update(x.bit_pattern().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Scales every row to unit L2 norm (rows of zeros are left alone).
    pub fn normalize_rows(&mut self) {
        for n in 0..self.rows {
            let row = self.row_mut(n);
            let norm = row.iter().fold(F::zero(), |a, &x| a + x * x).sqrt();
            if norm > F::zero() {
                row.iter_mut().for_each(|x| *x = *x / norm);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn snapshot(index: usize, n_e: usize, n_r: usize) -> SnapshotGraph {
        SnapshotGraph {
            index,
            train: vec![],
            valid: vec![],
            test: vec![],
            num_entities: n_e,
            num_relations: n_r,
        }
    }

    #[test]
    fn overlap_is_previous_prefix() {
        let o = overlap_ids(&snapshot(0, 100, 5), &snapshot(1, 120, 5)).unwrap();
        assert_eq!(o.entities, 0..100);
        assert_eq!(o.relations, 0..5);
    }

    #[test]
    fn overlap_of_empty_previous_is_empty() {
        let o = overlap_ids(&snapshot(0, 0, 0), &snapshot(1, 10, 2)).unwrap();
        assert!(o.is_empty());
    }

    #[test]
    fn overlap_rejects_non_consecutive() {
        let err = overlap_ids(&snapshot(0, 1, 1), &snapshot(2, 1, 1)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn overlap_from_first_appearance_ids() {
        // snapshot 0 mentions {a, b}; snapshot 1 adds c.
        let mut v = Vocabulary::new();
        for n in ["a", "b"] {
            v.intern_entity(n);
        }
        v.intern_relation("r");
        v.close_snapshot();
        for n in ["b", "c", "a"] {
            v.intern_entity(n);
        }
        v.close_snapshot();
        assert_eq!(v.entity_id("a"), Some(0));
        assert_eq!(v.entity_id("b"), Some(1));
        assert_eq!(v.entity_id("c"), Some(2));
        let prev = snapshot(0, v.entity_count(0), v.relation_count(0));
        let cur = snapshot(1, v.entity_count(1), v.relation_count(1));
        let o = overlap_ids(&prev, &cur).unwrap();
        assert_eq!(o.entities.collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn grown_table_keeps_prefix_and_bounds_new_rows() {
        let mut r = rng::stream(1, &[]);
        let t = EmbeddingTable::<f64>::uniform(3, 4, &mut r);
        let g = t.grown(5, &mut r).unwrap();
        for n in 0..3 {
            assert_eq!(t.row(n), g.row(n));
        }
        let b = EmbeddingTable::<f64>::init_bound(4);
        assert!(g.as_slice()[12..].iter().all(|x| x.abs() <= b));
        assert!(t.grown(2, &mut r).is_err());
    }

    #[test]
    fn fingerprint_detects_single_bit_change() {
        let mut t = EmbeddingTable::<f32>::zeros(2, 2);
        let a = t.fingerprint();
        t.row_mut(1)[1] = f32::from_bits(1);
        assert_ne!(a, t.fingerprint());
    }

    #[test]
    fn eval_triples_drop_untrained_entities() {
        let mut s = snapshot(0, 4, 1);
        s.train = vec![Triple::new(0, 0, 1)];
        s.test = vec![Triple::new(0, 0, 2), Triple::new(1, 0, 0)];
        let seq = SnapshotSequence::new(Vocabulary::new(), vec![s]).unwrap();
        assert_eq!(seq.eval_triples(0, Split::Test), vec![Triple::new(1, 0, 0)]);
    }
}
