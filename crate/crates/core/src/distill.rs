//! Aligned-mask distillation between consecutive snapshots.
//!
//! With frozen tokens `Z` and frozen previous embeddings `P`, the current
//! embeddings `C` are pulled toward `P` on the overlapping rows:
//!
//! ```text
//! M      = sigmoid(Z P^T) * sigmoid(Z C^T)          (elementwise)
//! L      = 1/(T N_ov) * sum_t sum_n M[t][n] * ||P[n] - C[n]||^2
//! ```
//!
//! Rows beyond the overlap are untouched by this loss. By default the
//! gradient also flows through the current-side mask `sigmoid(Z C^T)`.

use crate::error::{Error, Result};
use crate::kg::{EmbeddingTable, Triple};
use crate::real::{dot, squared_distance, Real};
use crate::scoring::margin_loss_grad;
use crate::tokens::{compute_mask_rows, MaskMatrix, TokenSet};

/// Elementwise product of two masks of equal shape.
pub fn aligned_mask<F: Real>(prev: &MaskMatrix<F>, cur: &MaskMatrix<F>) -> Result<MaskMatrix<F>> {
    if prev.tokens() != cur.tokens() || prev.cols() != cur.cols() {
        return Err(Error::shape(format!(
            "mask {}x{} vs {}x{}",
            prev.tokens(),
            prev.cols(),
            cur.tokens(),
            cur.cols()
        )));
    }
    let data = prev
        .as_slice()
        .iter()
        .zip(cur.as_slice())
        .map(|(&a, &b)| a * b)
        .collect();
    MaskMatrix::from_vec(prev.tokens(), prev.cols(), data)
}

/// Distillation term for one table (entities or relations).
///
/// The previous-side mask is computed once; it depends only on frozen
/// inputs.
#[derive(Debug, Clone)]
pub struct TableDistiller<'a, F> {
    prev: &'a EmbeddingTable<F>,
    tokens: &'a TokenSet<F>,
    overlap: usize,
    prev_mask: MaskMatrix<F>,
    stop_mask_gradient: bool,
}

impl<'a, F: Real> TableDistiller<'a, F> {
    pub fn new(
        prev: &'a EmbeddingTable<F>,
        tokens: &'a TokenSet<F>,
        overlap: usize,
        stop_mask_gradient: bool,
    ) -> Result<Self> {
        if overlap > prev.rows() {
            return Err(Error::shape(format!(
                "overlap {overlap} exceeds previous table of {} rows",
                prev.rows()
            )));
        }
        let prev_mask = compute_mask_rows(tokens, prev, overlap)?;
        Ok(TableDistiller {
            prev,
            tokens,
            overlap,
            prev_mask,
            stop_mask_gradient,
        })
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    fn check(&self, cur: &EmbeddingTable<F>) -> Result<()> {
        if cur.dim() != self.prev.dim() || cur.rows() < self.overlap {
            return Err(Error::shape(format!(
                "current table {}x{} against overlap {} of dim {}",
                cur.rows(),
                cur.dim(),
                self.overlap,
                self.prev.dim()
            )));
        }
        Ok(())
    }

    /// Joint mask over the overlap for the given current table.
    pub fn joint_mask(&self, cur: &EmbeddingTable<F>) -> Result<MaskMatrix<F>> {
        self.check(cur)?;
        let cur_mask = compute_mask_rows(self.tokens, cur, self.overlap)?;
        aligned_mask(&self.prev_mask, &cur_mask)
    }

    pub fn loss(&self, cur: &EmbeddingTable<F>) -> Result<F> {
        self.check(cur)?;
        if self.overlap == 0 {
            return Ok(F::zero());
        }
        let joint = self.joint_mask(cur)?;
        let dist = self.row_distances(cur);
        Ok(self.reduce(&joint, &dist))
    }

    fn row_distances(&self, cur: &EmbeddingTable<F>) -> Vec<F> {
        (0..self.overlap)
            .map(|n| squared_distance(self.prev.row(n), cur.row(n)))
            .collect()
    }

    fn reduce(&self, joint: &MaskMatrix<F>, dist: &[F]) -> F {
        let mut total = F::zero();
        for t in 0..joint.tokens() {
            total = total + dot(joint.row(t), dist);
        }
        total / self.normalizer()
    }

    fn normalizer(&self) -> F {
        F::from_usize(self.tokens.count() * self.overlap).unwrap()
    }

    /// Returns the loss and adds `weight * dL/dC` into `grad` (row-major,
    /// same shape as `cur`).
    pub fn loss_grad_into(&self, cur: &EmbeddingTable<F>, weight: F, grad: &mut [F]) -> Result<F> {
        self.check(cur)?;
        if grad.len() != cur.as_slice().len() {
            return Err(Error::shape("gradient buffer does not match table"));
        }
        if self.overlap == 0 {
            return Ok(F::zero());
        }
        let t_count = self.tokens.count();
        let d = cur.dim();
        let cur_mask = compute_mask_rows(self.tokens, cur, self.overlap)?;
        let dist = self.row_distances(cur);
        let mut total = F::zero();
        let coef = weight / self.normalizer();
        let two = F::lit(2.0);
        for n in 0..self.overlap {
            let (p, c) = (self.prev.row(n), cur.row(n));
            // Sum over tokens of the joint weight, and the mask-path factor.
            let mut w_sum = F::zero();
            let g = &mut grad[n * d..(n + 1) * d];
            for t in 0..t_count {
                let pm = self.prev_mask.get(t, n);
                let cm = cur_mask.get(t, n);
                w_sum = w_sum + pm * cm;
                if !self.stop_mask_gradient {
                    let k = coef * pm * cm * (F::one() - cm) * dist[n];
                    for (gi, &zi) in g.iter_mut().zip(self.tokens.z.row(t)) {
                        *gi = *gi + k * zi;
                    }
                }
            }
            total = total + w_sum * dist[n];
            let k = coef * w_sum * two;
            for ((gi, &ci), &pi) in g.iter_mut().zip(c).zip(p) {
                *gi = *gi + k * (ci - pi);
            }
        }
        Ok(total / self.normalizer())
    }
}

/// Distillation over both tables with weight `alpha`.
#[derive(Debug, Clone)]
pub struct DistillContext<'a, F> {
    pub entity: TableDistiller<'a, F>,
    pub relation: TableDistiller<'a, F>,
    pub alpha: F,
}

impl<'a, F: Real> DistillContext<'a, F> {
    /// Sum of the entity-table and relation-table distillation losses.
    pub fn loss(&self, cur_ent: &EmbeddingTable<F>, cur_rel: &EmbeddingTable<F>) -> Result<F> {
        if self.entity.overlap() == 0 && self.relation.overlap() == 0 {
            log::debug!("empty overlap: no distillation");
        }
        Ok(self.entity.loss(cur_ent)? + self.relation.loss(cur_rel)?)
    }
}

/// `distill_loss` over both tables.
pub fn distill_loss<F: Real>(
    ctx: &DistillContext<'_, F>,
    cur_ent: &EmbeddingTable<F>,
    cur_rel: &EmbeddingTable<F>,
) -> Result<F> {
    ctx.loss(cur_ent, cur_rel)
}

/// Value and dense gradients of `L_trans * trans_scale + alpha * L_distill`.
#[derive(Debug, Clone)]
pub struct TotalObjective<F> {
    pub value: F,
    pub trans: F,
    pub distill: F,
    pub entity_grad: Vec<F>,
    pub relation_grad: Vec<F>,
}

pub fn total_loss<F: Real>(
    cur_ent: &EmbeddingTable<F>,
    cur_rel: &EmbeddingTable<F>,
    positives: &[Triple],
    negatives: &[Triple],
    margin: F,
    trans_scale: F,
    ctx: &DistillContext<'_, F>,
) -> Result<TotalObjective<F>> {
    let g = margin_loss_grad(cur_ent, cur_rel, positives, negatives, margin, trans_scale)?;
    let mut entity_grad = vec![F::zero(); cur_ent.as_slice().len()];
    let mut relation_grad = vec![F::zero(); cur_rel.as_slice().len()];
    g.entity.scatter_into(&mut entity_grad);
    g.relation.scatter_into(&mut relation_grad);
    let de = ctx
        .entity
        .loss_grad_into(cur_ent, ctx.alpha, &mut entity_grad)?;
    let dr = ctx
        .relation
        .loss_grad_into(cur_rel, ctx.alpha, &mut relation_grad)?;
    let distill = de + dr;
    Ok(TotalObjective {
        value: g.loss * trans_scale + ctx.alpha * distill,
        trans: g.loss,
        distill,
        entity_grad,
        relation_grad,
    })
}
