//! Link-prediction evaluation.
//!
//! Every test triple `(h, r, t)` yields a tail query `(h, r, ?)` and a head
//! query `(?, r, t)`. All entities known at the evaluated snapshot are
//! candidates. Under the filtered protocol, candidates that complete another
//! known true triple are skipped. Ties count half: `rank = 1 + better +
//! ties / 2`. MRR averages `1 / rank`; Hits@k uses the rank rounded half up.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EmbeddingTable, SnapshotSequence, Split, Triple};
use crate::real::Real;
use crate::scoring::score_unchecked;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Filtered,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(?, r, t)`
    Head,
    /// `(h, r, ?)`
    Tail,
}

/// Known true answers per query, for filtering.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails: HashMap<(u32, u32), Vec<u32>>,
    heads: HashMap<(u32, u32), Vec<u32>>,
}

impl FilterIndex {
    pub fn new<'a>(known: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut idx = FilterIndex::default();
        for t in known {
            idx.tails
                .entry((t.head, t.relation))
                .or_default()
                .push(t.tail);
            idx.heads
                .entry((t.relation, t.tail))
                .or_default()
                .push(t.head);
        }
        for v in idx.tails.values_mut().chain(idx.heads.values_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        idx
    }

    pub fn from_set(known: &HashSet<Triple>) -> Self {
        Self::new(known.iter())
    }

    fn answers(&self, triple: Triple, dir: Direction) -> &[u32] {
        let found = match dir {
            Direction::Tail => self.tails.get(&(triple.head, triple.relation)),
            Direction::Head => self.heads.get(&(triple.relation, triple.tail)),
        };
        found.map_or(&[], Vec::as_slice)
    }
}

#[inline]
fn candidate_score<F: Real>(
    ent: &EmbeddingTable<F>,
    rel: &EmbeddingTable<F>,
    triple: Triple,
    dir: Direction,
    candidate: u32,
) -> F {
    let r = rel.row(triple.relation as usize);
    match dir {
        Direction::Tail => score_unchecked(
            ent.row(triple.head as usize),
            r,
            ent.row(candidate as usize),
        ),
        Direction::Head => score_unchecked(
            ent.row(candidate as usize),
            r,
            ent.row(triple.tail as usize),
        ),
    }
}

/// Fractional rank of the true answer of one query.
///
/// `triple` is the test fact; `dir` selects which side is hidden. The first
/// `num_candidates` entity ids compete.
pub fn rank_query<F: Real>(
    ent: &EmbeddingTable<F>,
    rel: &EmbeddingTable<F>,
    triple: Triple,
    dir: Direction,
    num_candidates: usize,
    filter: Option<&FilterIndex>,
) -> Result<f64> {
    let truth = match dir {
        Direction::Tail => triple.tail,
        Direction::Head => triple.head,
    };
    if truth as usize >= num_candidates
        || num_candidates > ent.rows()
        || triple.head as usize >= ent.rows()
        || triple.tail as usize >= ent.rows()
        || triple.relation as usize >= rel.rows()
    {
        return Err(Error::Contract(format!(
            "query {triple:?} outside {num_candidates} candidates / tables {}x{}",
            ent.rows(),
            rel.rows()
        )));
    }
    let target = candidate_score(ent, rel, triple, dir, truth);
    let (mut better, mut ties) = (0usize, 0usize);
    for c in 0..num_candidates as u32 {
        if c == truth {
            continue;
        }
        let s = candidate_score(ent, rel, triple, dir, c);
        if s < target {
            better += 1;
        } else if s == target {
            ties += 1;
        }
    }
    if let Some(f) = filter {
        for &c in f.answers(triple, dir) {
            // The true answer is never filtered.
            if c == truth || c as usize >= num_candidates {
                continue;
            }
            let s = candidate_score(ent, rel, triple, dir, c);
            if s < target {
                better -= 1;
            } else if s == target {
                ties -= 1;
            }
        }
    }
    Ok(1.0 + better as f64 + ties as f64 / 2.0)
}

/// Integer rank used for Hits@k: the fractional rank rounded half up.
#[inline]
pub fn integer_rank(rank: f64) -> u64 {
    (rank + 0.5).floor() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub direction: Direction,
    pub triple: Triple,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    pub queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<Vec<QueryRank>>,
}

impl EvalResult {
    /// Result of a split with no queries.
    pub fn empty() -> Self {
        EvalResult {
            mrr: 0.0,
            hits1: 0.0,
            hits10: 0.0,
            queries: 0,
            ranks: None,
        }
    }

    /// Aggregates fractional ranks. Errors on an empty list.
    pub fn from_ranks(ranks: &[f64]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Contract("no evaluation queries".into()));
        }
        let n = ranks.len() as f64;
        let mrr = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n;
        let hits = |k: u64| ranks.iter().filter(|&&r| integer_rank(r) <= k).count() as f64 / n;
        Ok(EvalResult {
            mrr,
            hits1: hits(1),
            hits10: hits(10),
            queries: ranks.len(),
            ranks: None,
        })
    }
}

/// Evaluates both query directions for every triple. Queries are scored in
/// parallel; aggregation order is fixed.
pub fn evaluate<F: Real>(
    ent: &EmbeddingTable<F>,
    rel: &EmbeddingTable<F>,
    triples: &[Triple],
    num_candidates: usize,
    filter: Option<&FilterIndex>,
    keep_ranks: bool,
) -> Result<EvalResult> {
    if triples.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let per_triple: Vec<[f64; 2]> = triples
        .par_iter()
        .map(|&t| {
            Ok([
                rank_query(ent, rel, t, Direction::Tail, num_candidates, filter)?,
                rank_query(ent, rel, t, Direction::Head, num_candidates, filter)?,
            ])
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = per_triple.iter().flatten().copied().collect();
    let mut res = EvalResult::from_ranks(&flat)?;
    if keep_ranks {
        res.ranks = Some(
            triples
                .iter()
                .zip(&per_triple)
                .flat_map(|(&triple, r)| {
                    [
                        QueryRank {
                            direction: Direction::Tail,
                            triple,
                            rank: r[0],
                        },
                        QueryRank {
                            direction: Direction::Head,
                            triple,
                            rank: r[1],
                        },
                    ]
                })
                .collect(),
        );
    }
    Ok(res)
}

/// Evaluates one split of a snapshot with that snapshot's candidate set and
/// (for the filtered protocol) every triple known up to it.
pub fn evaluate_snapshot<F: Real>(
    ent: &EmbeddingTable<F>,
    rel: &EmbeddingTable<F>,
    seq: &SnapshotSequence,
    snapshot: usize,
    split: Split,
    protocol: Protocol,
    keep_ranks: bool,
) -> Result<EvalResult> {
    let ctx = EvalContext::new(seq, snapshot, split, protocol);
    ctx.evaluate(ent, rel, keep_ranks)
}

/// Precomputed query set and filter for repeated evaluation of one split.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub snapshot: usize,
    pub triples: Vec<Triple>,
    pub num_candidates: usize,
    pub filter: Option<FilterIndex>,
}

impl EvalContext {
    pub fn new(seq: &SnapshotSequence, snapshot: usize, split: Split, protocol: Protocol) -> Self {
        let filter = match protocol {
            Protocol::Filtered => Some(FilterIndex::from_set(&seq.known_triples(snapshot))),
            Protocol::Raw => None,
        };
        EvalContext {
            snapshot,
            triples: seq.eval_triples(snapshot, split),
            num_candidates: seq.snapshot(snapshot).num_entities,
            filter,
        }
    }

    pub fn evaluate<F: Real>(
        &self,
        ent: &EmbeddingTable<F>,
        rel: &EmbeddingTable<F>,
        keep_ranks: bool,
    ) -> Result<EvalResult> {
        evaluate(
            ent,
            rel,
            &self.triples,
            self.num_candidates,
            self.filter.as_ref(),
            keep_ranks,
        )
    }
}

/// Lower-triangular matrix: `cells[i][j]` is the model after snapshot `i`
/// evaluated on the test split of snapshot `j <= i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingMatrix {
    pub cells: Vec<Vec<EvalResult>>,
}

impl ForgettingMatrix {
    pub fn new() -> Self {
        ForgettingMatrix { cells: Vec::new() }
    }

    pub fn size(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, model: usize, snapshot: usize) -> Option<&EvalResult> {
        self.cells.get(model).and_then(|row| row.get(snapshot))
    }

    pub fn mrr(&self, model: usize, snapshot: usize) -> Option<f64> {
        self.get(model, snapshot).map(|r| r.mrr)
    }

    pub fn push_row(&mut self, row: Vec<EvalResult>) -> Result<()> {
        if row.len() != self.cells.len() + 1 {
            return Err(Error::Contract(format!(
                "forgetting row {} must have {} cells, got {}",
                self.cells.len(),
                self.cells.len() + 1,
                row.len()
            )));
        }
        self.cells.push(row);
        Ok(())
    }

    pub fn populated_cells(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }
}

impl Default for ForgettingMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Row of the forgetting matrix for one model: test splits of snapshots
/// `0..=model_index`.
pub fn forgetting_row<F: Real>(
    ent: &EmbeddingTable<F>,
    rel: &EmbeddingTable<F>,
    seq: &SnapshotSequence,
    model_index: usize,
    protocol: Protocol,
) -> Result<Vec<EvalResult>> {
    (0..=model_index)
        .map(|j| evaluate_snapshot(ent, rel, seq, j, Split::Test, protocol, false))
        .collect()
}

/// Full matrix from per-snapshot `(entities, relations)` tables.
pub fn forgetting_matrix<F: Real>(
    models: &[(&EmbeddingTable<F>, &EmbeddingTable<F>)],
    seq: &SnapshotSequence,
    protocol: Protocol,
) -> Result<ForgettingMatrix> {
    let mut m = ForgettingMatrix::new();
    for (i, (ent, rel)) in models.iter().enumerate() {
        m.push_row(forgetting_row(ent, rel, seq, i, protocol)?)?;
    }
    Ok(m)
}

/// Writes per-query ranks as CSV: `direction,head,relation,tail,rank`.
pub fn write_rank_dump(path: &Path, ranks: &[QueryRank]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "direction,head,relation,tail,rank").map_err(io)?;
    for q in ranks {
        let dir = match q.direction {
            Direction::Head => "head",
            Direction::Tail => "tail",
        };
        writeln!(
            w,
            "{dir},{},{},{},{}",
            q.triple.head, q.triple.relation, q.triple.tail, q.rank
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
