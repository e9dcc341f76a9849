#![allow(dead_code)]

use std::collections::HashSet;
use std::path::Path;

use ckge_core::dataset::{generate_synthetic, load_layout, GrowthSpec};
use ckge_core::eval::Direction;
use ckge_core::kg::{EmbeddingTable, SnapshotGraph, SnapshotSequence, Triple, Vocabulary};
use rand::Rng;

/// Small synthetic sequence written under `dir` and loaded back.
pub fn small_sequence(dir: &Path, seed: u64, snapshots: usize) -> SnapshotSequence {
    let spec = GrowthSpec {
        base_entities: 60,
        base_relations: 4,
        base_facts: 400,
        snapshots,
        seed,
        ..GrowthSpec::default()
    };
    load_layout(&generate_synthetic(&spec, dir).unwrap()).unwrap()
}

/// Single-snapshot sequence over `n` entities and `m` relations with the
/// given triples in train, valid and test.
pub fn sequence_from(
    n: usize,
    m: usize,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
) -> SnapshotSequence {
    let mut v = Vocabulary::new();
    for i in 0..n {
        v.intern_entity(&format!("e{i}"));
    }
    for i in 0..m {
        v.intern_relation(&format!("r{i}"));
    }
    v.close_snapshot();
    let g = SnapshotGraph {
        index: 0,
        train,
        valid,
        test,
        num_entities: n,
        num_relations: m,
    };
    SnapshotSequence::new(v, vec![g]).unwrap()
}

pub fn random_triple<R: Rng>(n: usize, m: usize, rng: &mut R) -> Triple {
    Triple::new(
        rng.random_range(0..n as u32),
        rng.random_range(0..m as u32),
        rng.random_range(0..n as u32),
    )
}

/// Exhaustive ranker: scores every candidate, sorts, and reads off the
/// position range of the truth's score. Filtered candidates are removed
/// from the list before ranking.
pub fn brute_force_rank(
    ent: &EmbeddingTable<f64>,
    rel: &EmbeddingTable<f64>,
    t: Triple,
    dir: Direction,
    num_candidates: usize,
    known: Option<&HashSet<Triple>>,
) -> f64 {
    let r = rel.row(t.relation as usize);
    let score = |c: u32| -> f64 {
        let (h, tl) = match dir {
            Direction::Tail => (ent.row(t.head as usize), ent.row(c as usize)),
            Direction::Head => (ent.row(c as usize), ent.row(t.tail as usize)),
        };
        let mut acc = 0.0;
        for d in 0..r.len() {
            let x = h[d] + r[d] - tl[d];
            acc += x * x;
        }
        acc
    };
    let truth = match dir {
        Direction::Tail => t.tail,
        Direction::Head => t.head,
    };
    let candidate = |c: u32| match dir {
        Direction::Tail => Triple::new(t.head, t.relation, c),
        Direction::Head => Triple::new(c, t.relation, t.tail),
    };
    let mut scores: Vec<f64> = (0..num_candidates as u32)
        .filter(|&c| c == truth || known.is_none_or(|k| !k.contains(&candidate(c))))
        .map(score)
        .collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let target = score(truth);
    let first = scores.iter().position(|&s| s == target).unwrap();
    let last = scores.iter().rposition(|&s| s == target).unwrap();
    // Ties share the average of their positions (1-based).
    (first + last) as f64 / 2.0 + 1.0
}
