//! Task-driven tokens.
//!
//! A [`TokenSet`] is a `T x D` matrix of learnable vectors. Its inner
//! products with an embedding table, squashed by a sigmoid, form a `T x N`
//! soft importance mask. The column sums of that mask rescale each
//! embedding row ("masked embeddings"), and a Dice-coefficient penalty keeps
//! the token masks from collapsing onto each other.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EmbeddingTable, Triple};
use crate::real::{dot, sigmoid, Real};
use crate::scoring::margin_loss_grad;

/// Guard added to the Dice denominator.
pub const DICE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Entity,
    Relation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<F> {
    pub z: EmbeddingTable<F>,
    pub scope: Scope,
}

impl<F: Real> TokenSet<F> {
    /// Tokens drawn uniformly from `[-6/sqrt(D), 6/sqrt(D)]`.
    pub fn init<R: Rng>(count: usize, dim: usize, scope: Scope, rng: &mut R) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("token count must be >= 1".into()));
        }
        Ok(TokenSet {
            z: EmbeddingTable::uniform(count, dim, rng),
            scope,
        })
    }

    pub fn count(&self) -> usize {
        self.z.rows()
    }

    pub fn dim(&self) -> usize {
        self.z.dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.count() * self.dim()
    }
}

/// `T x N` sigmoid activations, row-major by token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix<F> {
    tokens: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> MaskMatrix<F> {
    pub fn from_vec(tokens: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != tokens * cols {
            return Err(Error::shape(format!(
                "{} mask values for {tokens}x{cols}",
                data.len()
            )));
        }
        Ok(MaskMatrix { tokens, cols, data })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[F] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, t: usize, n: usize) -> F {
        self.data[t * self.cols + n]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    /// `sum_t M[t][n]` for every column.
    pub fn column_sums(&self) -> Vec<F> {
        let mut s = vec![F::zero(); self.cols];
        for t in 0..self.tokens {
            for (acc, &m) in s.iter_mut().zip(self.row(t)) {
                *acc = *acc + m;
            }
        }
        s
    }
}

/// `M = sigmoid(Z E^T)`, shape `T x N`.
pub fn compute_mask<F: Real>(z: &TokenSet<F>, e: &EmbeddingTable<F>) -> Result<MaskMatrix<F>> {
    compute_mask_rows(z, e, e.rows())
}

/// Mask over the first `rows` rows of `e` only.
pub fn compute_mask_rows<F: Real>(
    z: &TokenSet<F>,
    e: &EmbeddingTable<F>,
    rows: usize,
) -> Result<MaskMatrix<F>> {
    if z.dim() != e.dim() {
        return Err(Error::shape(format!(
            "token dim {} vs embedding dim {}",
            z.dim(),
            e.dim()
        )));
    }
    if rows > e.rows() {
        return Err(Error::shape(format!(
            "{rows} rows of a {}-row table",
            e.rows()
        )));
    }
    let t_count = z.count();
    let mut data = Vec::with_capacity(t_count * rows);
    for t in 0..t_count {
        let zt = z.z.row(t);
        data.extend((0..rows).map(|n| sigmoid(dot(zt, e.row(n)))));
    }
    MaskMatrix::from_vec(t_count, rows, data)
}

/// `E_hat[n] = (sum_t M[t][n]) * E[n]`.
pub fn masked_embeddings<F: Real>(
    m: &MaskMatrix<F>,
    e: &EmbeddingTable<F>,
) -> Result<EmbeddingTable<F>> {
    if m.cols() != e.rows() {
        return Err(Error::shape(format!(
            "mask has {} columns, table has {} rows",
            m.cols(),
            e.rows()
        )));
    }
    let scale = m.column_sums();
    let mut out = e.clone();
    for (n, &s) in scale.iter().enumerate() {
        out.row_mut(n).iter_mut().for_each(|x| *x = *x * s);
    }
    Ok(out)
}

/// Mean pairwise Dice similarity between distinct token mask rows.
///
/// Averages over all ordered pairs `j != k`; a single token has no pairs and
/// scores 0.
pub fn diversity_loss<F: Real>(m: &MaskMatrix<F>) -> F {
    diversity_impl(m, false).0
}

/// Diversity loss and its gradient with respect to every mask entry.
pub fn diversity_loss_grad<F: Real>(m: &MaskMatrix<F>) -> (F, Vec<F>) {
    diversity_impl(m, true)
}

fn diversity_impl<F: Real>(m: &MaskMatrix<F>, want_grad: bool) -> (F, Vec<F>) {
    let t = m.tokens();
    let mut grad = if want_grad {
        vec![F::zero(); m.as_slice().len()]
    } else {
        Vec::new()
    };
    if t < 2 {
        return (F::zero(), grad);
    }
    let eps = F::lit(DICE_EPS);
    let two = F::lit(2.0);
    let norms: Vec<F> = (0..t).map(|j| dot(m.row(j), m.row(j))).collect();
    debug_assert!(norms.iter().all(|&b| b > F::zero()), "all-zero mask row");
    // Each unordered pair stands for both ordered pairs.
    let norm = two / F::from_usize(t * (t - 1)).unwrap();
    let mut total = F::zero();
    let n = m.cols();
    for j in 0..t {
        for k in (j + 1)..t {
            let a = dot(m.row(j), m.row(k));
            let s = norms[j] + norms[k] + eps;
            total = total + two * a / s;
            if want_grad {
                // d/dMj [2a/s] = 2 Mk / s - 4 a Mj / s^2
                let c1 = norm * two / s;
                let c2 = norm * F::lit(4.0) * a / (s * s);
                for i in 0..n {
                    let (mj, mk) = (m.get(j, i), m.get(k, i));
                    grad[j * n + i] = grad[j * n + i] + c1 * mk - c2 * mj;
                    grad[k * n + i] = grad[k * n + i] + c1 * mj - c2 * mk;
                }
            }
        }
    }
    (total * norm, grad)
}

/// Backpropagates a mask gradient through `M = sigmoid(Z E^T)` into `Z`.
/// Returns a `T x D` row-major buffer.
pub fn mask_grad_to_tokens<F: Real>(m: &MaskMatrix<F>, dm: &[F], e: &EmbeddingTable<F>) -> Vec<F> {
    let (t_count, n_count, d) = (m.tokens(), m.cols(), e.dim());
    let mut dz = vec![F::zero(); t_count * d];
    for t in 0..t_count {
        let out = &mut dz[t * d..(t + 1) * d];
        for n in 0..n_count {
            let g = dm[t * n_count + n];
            if g == F::zero() {
                continue;
            }
            let mv = m.get(t, n);
            let c = g * mv * (F::one() - mv);
            for (o, &x) in out.iter_mut().zip(e.row(n)) {
                *o = *o + c * x;
            }
        }
    }
    dz
}

/// Value and token gradients of the Stage-I objective
/// `L_trans(masked) * trans_scale + lambda * L_div`.
#[derive(Debug, Clone)]
pub struct TokenObjective<F> {
    pub value: F,
    /// Unscaled hinge sum over the batch.
    pub trans: F,
    /// Mean of the entity-scope and relation-scope diversity losses.
    pub diversity: F,
    pub entity_grad: Vec<F>,
    pub relation_grad: Vec<F>,
}

/// Inputs to the Stage-I objective. The embedding tables are frozen: no
/// gradient is produced for them.
pub struct TokenBatch<'a, F> {
    pub entities: &'a EmbeddingTable<F>,
    pub relations: &'a EmbeddingTable<F>,
    pub positives: &'a [Triple],
    pub negatives: &'a [Triple],
    pub margin: F,
    pub trans_scale: F,
    pub lambda: F,
}

pub fn token_objective<F: Real>(
    batch: &TokenBatch<'_, F>,
    entity_tokens: &TokenSet<F>,
    relation_tokens: &TokenSet<F>,
) -> Result<TokenObjective<F>> {
    let me = compute_mask(entity_tokens, batch.entities)?;
    let mr = compute_mask(relation_tokens, batch.relations)?;
    let ent_hat = masked_embeddings(&me, batch.entities)?;
    let rel_hat = masked_embeddings(&mr, batch.relations)?;

    let g = margin_loss_grad(
        &ent_hat,
        &rel_hat,
        batch.positives,
        batch.negatives,
        batch.margin,
        batch.trans_scale,
    )?;
    let mut d_ent_hat = vec![F::zero(); ent_hat.as_slice().len()];
    let mut d_rel_hat = vec![F::zero(); rel_hat.as_slice().len()];
    g.entity.scatter_into(&mut d_ent_hat);
    g.relation.scatter_into(&mut d_rel_hat);

    let half_lambda = batch.lambda * F::lit(0.5);
    let (div_e, dm_e) = diversity_loss_grad(&me);
    let (div_r, dm_r) = diversity_loss_grad(&mr);

    let entity_grad = scope_token_grad(&me, dm_e, half_lambda, &d_ent_hat, batch.entities);
    let relation_grad = scope_token_grad(&mr, dm_r, half_lambda, &d_rel_hat, batch.relations);

    let diversity = (div_e + div_r) * F::lit(0.5);
    Ok(TokenObjective {
        value: g.loss * batch.trans_scale + batch.lambda * diversity,
        trans: g.loss,
        diversity,
        entity_grad,
        relation_grad,
    })
}

/// Token gradient for one scope: the masked-embedding path contributes
/// `<dE_hat[n], E[n]>` to every mask entry of column `n`.
fn scope_token_grad<F: Real>(
    m: &MaskMatrix<F>,
    mut dm: Vec<F>,
    div_weight: F,
    d_hat: &[F],
    e: &EmbeddingTable<F>,
) -> Vec<F> {
    let (t_count, n_count, d) = (m.tokens(), m.cols(), e.dim());
    let ds: Vec<F> = (0..n_count)
        .map(|n| dot(&d_hat[n * d..(n + 1) * d], e.row(n)))
        .collect();
    for t in 0..t_count {
        let row = &mut dm[t * n_count..(t + 1) * n_count];
        for (x, &s) in row.iter_mut().zip(&ds) {
            *x = *x * div_weight + s;
        }
    }
    mask_grad_to_tokens(m, &dm, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn mask(rows: &[&[f64]]) -> MaskMatrix<f64> {
        MaskMatrix::from_vec(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn zero_tokens_give_half_mask() {
        let z = TokenSet {
            z: EmbeddingTable::<f64>::zeros(3, 4),
            scope: Scope::Entity,
        };
        let e = EmbeddingTable::uniform(5, 4, &mut rng::stream(1, &[]));
        let m = compute_mask(&z, &e).unwrap();
        assert!(m.as_slice().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn mask_entry_is_sigmoid_of_dot() {
        let z = TokenSet {
            z: EmbeddingTable::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            scope: Scope::Entity,
        };
        let e = EmbeddingTable::from_rows(&[vec![2.0f64, 5.0]]).unwrap();
        let m = compute_mask(&z, &e).unwrap();
        assert!((m.get(0, 0) - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn mask_shape_mismatch_is_error() {
        let z = TokenSet::<f64>::init(2, 3, Scope::Entity, &mut rng::stream(1, &[])).unwrap();
        let e = EmbeddingTable::<f64>::zeros(4, 5);
        assert!(matches!(compute_mask(&z, &e), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_embedding_examples() {
        let e = EmbeddingTable::from_rows(&[vec![4.0, -2.0]]).unwrap();
        let m = mask(&[&[0.5], &[0.25]]);
        assert_eq!(masked_embeddings(&m, &e).unwrap().row(0), &[3.0, -1.5]);

        let e = EmbeddingTable::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let half = mask(&[&[0.5, 0.5]]);
        assert_eq!(
            masked_embeddings(&half, &e).unwrap().as_slice(),
            &[0.5, 1.0, -1.5, 0.25]
        );
        let unit = mask(&[&[0.25, 0.5], &[0.75, 0.5]]);
        assert_eq!(masked_embeddings(&unit, &e).unwrap(), e);

        assert!(masked_embeddings(&mask(&[&[0.5, 0.5, 0.5]]), &e).is_err());
    }

    #[test]
    fn diversity_examples() {
        // Identical rows give 1 up to the denominator guard.
        let same = diversity_loss(&mask(&[&[0.3, 0.7], &[0.3, 0.7]]));
        assert!((same - 1.0).abs() < 1e-11);
        let d = diversity_loss(&mask(&[&[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]));
        assert!((d - 0.5).abs() < 1e-12);
        assert_eq!(diversity_loss(&mask(&[&[0.2, 0.9]])), 0.0);
    }

    #[test]
    fn identical_tokens_add_lambda_to_objective() {
        let mut r = rng::stream(4, &[]);
        let ent = EmbeddingTable::<f64>::uniform(6, 3, &mut r);
        let rel = EmbeddingTable::<f64>::uniform(2, 3, &mut r);
        let one = EmbeddingTable::uniform(1, 3, &mut r);
        let same = EmbeddingTable::from_rows(&[one.row(0).to_vec(), one.row(0).to_vec()]).unwrap();
        let et = TokenSet {
            z: same.clone(),
            scope: Scope::Entity,
        };
        let rt = TokenSet {
            z: same,
            scope: Scope::Relation,
        };
        let pos = [Triple::new(0, 0, 1), Triple::new(2, 1, 3)];
        let neg = [Triple::new(4, 0, 1), Triple::new(2, 1, 5)];
        let batch = |lambda| TokenBatch {
            entities: &ent,
            relations: &rel,
            positives: &pos,
            negatives: &neg,
            margin: 9.0,
            trans_scale: 1.0,
            lambda,
        };
        let base = token_objective(&batch(0.0), &et, &rt).unwrap();
        assert_eq!(base.value, base.trans);
        let with = token_objective(&batch(1.0), &et, &rt).unwrap();
        assert!((with.value - (base.trans + 1.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn masked_embeddings_match_tokenwise_accumulation(
            t in 1usize..4, n in 1usize..6, d in 1usize..5, seed in any::<u64>()
        ) {
            let mut r = rng::stream(seed, &[]);
            let e = EmbeddingTable::<f64>::uniform(n, d, &mut r);
            let z = TokenSet::init(t, d, Scope::Entity, &mut r).unwrap();
            let m = compute_mask(&z, &e).unwrap();
            let fast = masked_embeddings(&m, &e).unwrap();
            // Oracle: accumulate M_t (.) E one token at a time.
            let mut acc = vec![0.0; n * d];
            for tok in 0..t {
                for row in 0..n {
                    for c in 0..d {
                        acc[row * d + c] += m.get(tok, row) * e.row(row)[c];
                    }
                }
            }
            for (a, b) in fast.as_slice().iter().zip(&acc) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn diversity_in_unit_interval_and_permutation_invariant(
            t in 2usize..5, n in 1usize..8, seed in any::<u64>()
        ) {
            let mut r = rng::stream(seed, &[]);
            let e = EmbeddingTable::<f64>::uniform(n, 3, &mut r);
            let z = TokenSet::init(t, 3, Scope::Relation, &mut r).unwrap();
            let m = compute_mask(&z, &e).unwrap();
            let d = diversity_loss(&m);
            prop_assert!((0.0..=1.0).contains(&d));
            let mut rows: Vec<&[f64]> = (0..t).map(|i| m.row(i)).collect();
            rows.reverse();
            let rev = mask(&rows);
            prop_assert!((diversity_loss(&rev) - d).abs() <= 1e-12);
        }
    }
}
