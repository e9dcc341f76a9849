//! TransE scoring, the margin ranking loss and its gradient, and uniform
//! negative sampling.
//!
//! Scores are squared distances `||h + r - t||^2`: lower means more
//! plausible.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EmbeddingTable, Triple};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub margin: f64,
    pub negatives: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            margin: 9.0,
            negatives: 10,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "margin {} must be >= 0",
                self.margin
            )));
        }
        if self.negatives == 0 {
            return Err(Error::Config("negatives per positive must be >= 1".into()));
        }
        Ok(())
    }
}

/// `||h + r - t||^2`.
pub fn transe_score<F: Real>(h: &[F], r: &[F], t: &[F]) -> Result<F> {
    if h.len() != r.len() || r.len() != t.len() {
        return Err(Error::shape(format!(
            "score vectors of length {}, {}, {}",
            h.len(),
            r.len(),
            t.len()
        )));
    }
    Ok(score_unchecked(h, r, t))
}

#[inline]
pub(crate) fn score_unchecked<F: Real>(h: &[F], r: &[F], t: &[F]) -> F {
    let mut acc = F::zero();
    for ((&a, &b), &c) in h.iter().zip(r).zip(t) {
        let d = a + b - c;
        acc = acc + d * d;
    }
    acc
}

/// Score of a triple looked up in the given tables.
#[inline]
pub fn triple_score<F: Real>(ent: &EmbeddingTable<F>, rel: &EmbeddingTable<F>, t: Triple) -> F {
    score_unchecked(
        ent.row(t.head as usize),
        rel.row(t.relation as usize),
        ent.row(t.tail as usize),
    )
}

/// `sum max(0, margin + pos - neg)` over aligned pairs.
pub fn margin_loss<F: Real>(pos_scores: &[F], neg_scores: &[F], margin: F) -> Result<F> {
    if pos_scores.len() != neg_scores.len() {
        return Err(Error::shape(format!(
            "{} positive vs {} negative scores",
            pos_scores.len(),
            neg_scores.len()
        )));
    }
    Ok(pos_scores
        .iter()
        .zip(neg_scores)
        .map(|(&p, &n)| hinge(margin + p - n))
        .sum())
}

#[inline]
fn hinge<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

/// Row-sparse gradient: a list of (row id, `dim` values) contributions.
/// Rows may repeat; scattering adds them.
#[derive(Debug, Clone)]
pub struct SparseGrad<F> {
    dim: usize,
    rows: Vec<u32>,
    values: Vec<F>,
}

impl<F: Real> SparseGrad<F> {
    pub fn new(dim: usize) -> Self {
        SparseGrad {
            dim,
            rows: Vec::new(),
            values: Vec::new(),
        }
    }

    #[inline]
    fn push_scaled(&mut self, row: u32, coef: F, v: &[F]) {
        self.rows.push(row);
        self.values.extend(v.iter().map(|&x| coef * x));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Adds every contribution into a dense row-major buffer.
    pub fn scatter_into(&self, dense: &mut [F]) {
        let d = self.dim;
        for (i, &r) in self.rows.iter().enumerate() {
            let dst = &mut dense[r as usize * d..(r as usize + 1) * d];
            for (x, &g) in dst.iter_mut().zip(&self.values[i * d..(i + 1) * d]) {
                *x = *x + g;
            }
        }
    }

    pub fn append(&mut self, mut other: SparseGrad<F>) {
        self.rows.append(&mut other.rows);
        self.values.append(&mut other.values);
    }
}

/// Margin loss over `positives`, each paired with `k` consecutive entries
/// of `negatives`, plus its gradient with respect to the looked-up rows.
#[derive(Debug, Clone)]
pub struct MarginGrad<F> {
    /// Unscaled hinge sum.
    pub loss: F,
    pub entity: SparseGrad<F>,
    pub relation: SparseGrad<F>,
}

/// Computes the margin loss and the gradient of `scale * loss`.
///
/// A hinge that is exactly zero is treated as inactive.
pub fn margin_loss_grad<F: Real>(
    ent: &EmbeddingTable<F>,
    rel: &EmbeddingTable<F>,
    positives: &[Triple],
    negatives: &[Triple],
    margin: F,
    scale: F,
) -> Result<MarginGrad<F>> {
    if positives.is_empty() {
        return Ok(MarginGrad {
            loss: F::zero(),
            entity: SparseGrad::new(ent.dim()),
            relation: SparseGrad::new(rel.dim()),
        });
    }
    if !negatives.len().is_multiple_of(positives.len()) {
        return Err(Error::shape(format!(
            "{} negatives for {} positives",
            negatives.len(),
            positives.len()
        )));
    }
    if ent.dim() != rel.dim() {
        return Err(Error::shape("entity and relation dims differ"));
    }
    let k = negatives.len() / positives.len();
    let dim = ent.dim();
    let mut out = MarginGrad {
        loss: F::zero(),
        entity: SparseGrad::new(dim),
        relation: SparseGrad::new(dim),
    };
    let two = F::lit(2.0) * scale;
    let mut u_pos = vec![F::zero(); dim];
    let mut u_neg = vec![F::zero(); dim];
    for (p, negs) in positives.iter().zip(negatives.chunks(k)) {
        let fp = residual(ent, rel, *p, &mut u_pos);
        for n in negs {
            let fn_ = residual(ent, rel, *n, &mut u_neg);
            let v = margin + fp - fn_;
            if v <= F::zero() {
                continue;
            }
            out.loss = out.loss + v;
            out.entity.push_scaled(p.head, two, &u_pos);
            out.relation.push_scaled(p.relation, two, &u_pos);
            out.entity.push_scaled(p.tail, -two, &u_pos);
            out.entity.push_scaled(n.head, -two, &u_neg);
            out.relation.push_scaled(n.relation, -two, &u_neg);
            out.entity.push_scaled(n.tail, two, &u_neg);
        }
    }
    Ok(out)
}

/// Writes `h + r - t` into `u` and returns its squared norm.
#[inline]
fn residual<F: Real>(
    ent: &EmbeddingTable<F>,
    rel: &EmbeddingTable<F>,
    t: Triple,
    u: &mut [F],
) -> F {
    let h = ent.row(t.head as usize);
    let r = rel.row(t.relation as usize);
    let tl = ent.row(t.tail as usize);
    let mut acc = F::zero();
    for d in 0..u.len() {
        let x = h[d] + r[d] - tl[d];
        u[d] = x;
        acc = acc + x * x;
    }
    acc
}

/// Draws `k` corruptions of `triple`. Each replaces the head or the tail
/// (fair coin) with a different entity drawn uniformly from `0..num_entities`.
pub fn sample_negatives<R: Rng>(
    triple: Triple,
    num_entities: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    let mut out = Vec::with_capacity(k);
    sample_negatives_into(triple, num_entities, k, None, rng, &mut out)?;
    Ok(out)
}

/// Like [`sample_negatives`], appending to `out`. When `known` is given,
/// corruptions that are known true triples are redrawn (bounded retries).
pub fn sample_negatives_into<R: Rng>(
    triple: Triple,
    num_entities: usize,
    k: usize,
    known: Option<&HashSet<Triple>>,
    rng: &mut R,
    out: &mut Vec<Triple>,
) -> Result<()> {
    if num_entities < 2 {
        return Err(Error::Contract(format!(
            "cannot corrupt with {num_entities} entities"
        )));
    }
    const MAX_RETRIES: usize = 16;
    for _ in 0..k {
        let mut neg = corrupt(triple, num_entities, rng);
        if let Some(known) = known {
            let mut tries = 0;
            while known.contains(&neg) && tries < MAX_RETRIES {
                neg = corrupt(triple, num_entities, rng);
                tries += 1;
            }
        }
        out.push(neg);
    }
    Ok(())
}

#[inline]
fn corrupt<R: Rng>(t: Triple, n: usize, rng: &mut R) -> Triple {
    let replace_head = rng.random_bool(0.5);
    let orig = if replace_head { t.head } else { t.tail };
    let mut id = rng.random_range(0..n as u32 - 1);
    if id >= orig {
        id += 1;
    }
    if replace_head {
        Triple::new(id, t.relation, t.tail)
    } else {
        Triple::new(t.head, t.relation, id)
    }
}
