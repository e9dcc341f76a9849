//! Fixtures shared by the kernel benchmarks.

use ckge_core::kg::{EmbeddingTable, Triple};
use ckge_core::rng;
use ckge_core::scoring::sample_negatives_into;
use ckge_core::tokens::{Scope, TokenSet};
use rand::Rng;

pub struct Fixture {
    pub entities: EmbeddingTable<f32>,
    pub relations: EmbeddingTable<f32>,
    pub entity_tokens: TokenSet<f32>,
    pub relation_tokens: TokenSet<f32>,
    pub positives: Vec<Triple>,
    pub negatives: Vec<Triple>,
}

/// Random tables of `entities x dim` and `relations x dim`, `tokens`
/// tokens per scope, and a batch of `batch` positives with `k` negatives each.
pub fn fixture(
    entities: usize,
    relations: usize,
    dim: usize,
    tokens: usize,
    batch: usize,
    k: usize,
) -> Fixture {
    let mut r = rng::stream(42, &[]);
    let ent = EmbeddingTable::uniform(entities, dim, &mut r);
    let rel = EmbeddingTable::uniform(relations, dim, &mut r);
    let entity_tokens = TokenSet::init(tokens, dim, Scope::Entity, &mut r).expect("tokens");
    let relation_tokens = TokenSet::init(tokens, dim, Scope::Relation, &mut r).expect("tokens");
    let positives: Vec<Triple> = (0..batch)
        .map(|_| {
            Triple::new(
                r.random_range(0..entities as u32),
                r.random_range(0..relations as u32),
                r.random_range(0..entities as u32),
            )
        })
        .collect();
    let mut negatives = Vec::with_capacity(batch * k);
    for &p in &positives {
        sample_negatives_into(p, entities, k, None, &mut r, &mut negatives).expect("negatives");
    }
    Fixture {
        entities: ent,
        relations: rel,
        entity_tokens,
        relation_tokens,
        positives,
        negatives,
    }
}
