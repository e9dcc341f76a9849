//! Continual training.
//!
//! The first snapshot trains a plain TransE model. Every later snapshot
//! grows the tables (old rows copied, new rows freshly initialized) and, in
//! the token mode, runs two stages:
//!
//! 1. token learning: embeddings frozen, only the entity and relation
//!    tokens move, driven by the previous snapshot's triples through the
//!    masked embeddings plus the diversity penalty;
//! 2. embedding training: tokens frozen, embeddings trained on the new
//!    snapshot with the mask-weighted distillation term pulling overlap
//!    rows toward the previous model.
//!
//! Fine-tune mode skips both extras. All randomness comes from per-purpose
//! streams, so switching every extra off reproduces fine-tune bit for bit.

mod adam;
mod config;
pub mod gradcheck;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use adam::{AdamParams, AdamState};
pub use config::{Mode, Stage1Source, TrainConfig};

use crate::distill::{DistillContext, TableDistiller};
use crate::error::{Error, Result};
use crate::eval::{EvalContext, EvalResult};
use crate::kg::{EmbeddingTable, SnapshotSequence, Split, Triple};
use crate::real::Real;
use crate::rng::{self, purpose};
use crate::scoring::{margin_loss_grad, sample_negatives_into};
use crate::telemetry::{
    self, count_updated_parameters, MemorySampler, RunReport, SnapshotMetrics, SnapshotReport,
    Stage, Stage1Summary, Stopwatch, TouchBits,
};
use crate::tokens::{compute_mask, diversity_loss, token_objective, Scope, TokenBatch, TokenSet};

/// Positives per gradient work unit. Fixed, so the reduction order (and
/// therefore every bit of the result) does not depend on the thread count.
const GRAD_CHUNK: usize = 256;

/// Adam moments for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub entities: AdamState<F>,
    pub relations: AdamState<F>,
    pub entity_tokens: AdamState<F>,
    pub relation_tokens: AdamState<F>,
}

impl<F: Real> Moments<F> {
    fn fresh(ent: usize, rel: usize, ent_tok: usize, rel_tok: usize) -> Self {
        Moments {
            entities: AdamState::new(ent),
            relations: AdamState::new(rel),
            entity_tokens: AdamState::new(ent_tok),
            relation_tokens: AdamState::new(rel_tok),
        }
    }
}

/// Everything learned up to one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F> {
    pub snapshot: usize,
    pub entities: EmbeddingTable<F>,
    pub relations: EmbeddingTable<F>,
    pub entity_tokens: TokenSet<F>,
    pub relation_tokens: TokenSet<F>,
    pub moments: Moments<F>,
}

impl<F: Real> ModelState<F> {
    /// Freshly initialized model sized for snapshot 0.
    pub fn initial(seq: &SnapshotSequence, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let g = seq.snapshot(0);
        let seed = cfg.seed;
        let entities = EmbeddingTable::uniform(
            g.num_entities,
            cfg.dim,
            &mut rng::stream(seed, &[purpose::ENTITY_INIT, 0]),
        );
        let relations = EmbeddingTable::uniform(
            g.num_relations,
            cfg.dim,
            &mut rng::stream(seed, &[purpose::RELATION_INIT, 0]),
        );
        let entity_tokens = TokenSet::init(
            cfg.tokens,
            cfg.dim,
            Scope::Entity,
            &mut rng::stream(seed, &[purpose::TOKEN_INIT, 0]),
        )?;
        let relation_tokens = if cfg.shared_tokens {
            TokenSet {
                z: entity_tokens.z.clone(),
                scope: Scope::Relation,
            }
        } else {
            TokenSet::init(
                cfg.tokens,
                cfg.dim,
                Scope::Relation,
                &mut rng::stream(seed, &[purpose::TOKEN_INIT, 1]),
            )?
        };
        let mut state = ModelState {
            snapshot: 0,
            moments: Moments::fresh(0, 0, 0, 0),
            entities,
            relations,
            entity_tokens,
            relation_tokens,
        };
        state.reset_moments();
        Ok(state)
    }

    /// Copy of this model grown to the vocabulary of `snapshot`. Existing
    /// rows keep their values; new rows are drawn from the init stream of
    /// that snapshot. Tokens carry over; moments start fresh.
    pub fn grown(
        &self,
        seq: &SnapshotSequence,
        snapshot: usize,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if snapshot != self.snapshot + 1 {
            return Err(Error::Contract(format!(
                "cannot grow snapshot {} model to snapshot {snapshot}",
                self.snapshot
            )));
        }
        let g = seq.snapshot(snapshot);
        let seed = cfg.seed;
        let entities = self.entities.grown(
            g.num_entities,
            &mut rng::stream(seed, &[purpose::ENTITY_INIT, snapshot as u64]),
        )?;
        let relations = self.relations.grown(
            g.num_relations,
            &mut rng::stream(seed, &[purpose::RELATION_INIT, snapshot as u64]),
        )?;
        let mut state = ModelState {
            snapshot,
            entities,
            relations,
            entity_tokens: self.entity_tokens.clone(),
            relation_tokens: self.relation_tokens.clone(),
            moments: Moments::fresh(0, 0, 0, 0),
        };
        state.reset_moments();
        Ok(state)
    }

    pub fn reset_moments(&mut self) {
        self.moments = Moments::fresh(
            self.entities.as_slice().len(),
            self.relations.as_slice().len(),
            self.entity_tokens.parameter_count(),
            self.relation_tokens.parameter_count(),
        );
    }

    pub fn dim(&self) -> usize {
        self.entities.dim()
    }

    pub fn all_finite(&self) -> bool {
        self.entities.all_finite()
            && self.relations.all_finite()
            && self.entity_tokens.z.all_finite()
            && self.relation_tokens.z.all_finite()
    }
}

/// Outcome of embedding training on one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Summary {
    pub best_valid_mrr: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub first_epoch_batch_losses: Vec<f64>,
    pub touched_parameters: usize,
}

fn evaluate_or_empty<F: Real>(
    ctx: &EvalContext,
    ent: &EmbeddingTable<F>,
    rel: &EmbeddingTable<F>,
) -> Result<EvalResult> {
    if ctx.triples.is_empty() {
        Ok(EvalResult::empty())
    } else {
        ctx.evaluate(ent, rel, false)
    }
}

fn shuffled(n: usize, rng: &mut rng::StreamRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn non_finite(what: &str, snapshot: usize, epoch: usize, batch: usize) -> Error {
    Error::Numeric(format!(
        "non-finite {what} at snapshot {snapshot}, epoch {epoch}, batch {batch}"
    ))
}

/// Margin-loss gradient of one batch, scattered densely. Work is split
/// into fixed chunks evaluated in parallel and summed in chunk order.
#[allow(clippy::too_many_arguments)]
fn margin_grads<F: Real>(
    ent: &EmbeddingTable<F>,
    rel: &EmbeddingTable<F>,
    positives: &[Triple],
    negatives: &[Triple],
    k: usize,
    margin: F,
    scale: F,
    ent_grad: &mut [F],
    rel_grad: &mut [F],
) -> Result<F> {
    let parts = positives
        .par_chunks(GRAD_CHUNK)
        .zip(negatives.par_chunks(GRAD_CHUNK * k))
        .map(|(p, n)| margin_loss_grad(ent, rel, p, n, margin, scale))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = F::zero();
    for g in parts {
        loss = loss + g.loss;
        g.entity.scatter_into(ent_grad);
        g.relation.scatter_into(rel_grad);
    }
    Ok(loss)
}

/// Trains the embeddings of `cur` on snapshot `snapshot` with early
/// stopping on validation MRR. With `prev` given and distillation enabled,
/// the frozen tokens of `cur` weight a pull toward `prev` on the overlap.
pub fn train_stage2<F: Real>(
    seq: &SnapshotSequence,
    cfg: &TrainConfig,
    snapshot: usize,
    prev: Option<&ModelState<F>>,
    cur: &mut ModelState<F>,
    sampler: Option<&MemorySampler>,
) -> Result<Stage2Summary> {
    let graph = seq.snapshot(snapshot);
    if cur.entities.rows() != graph.num_entities || cur.relations.rows() != graph.num_relations {
        return Err(Error::shape(format!(
            "model {}x{} does not match snapshot {snapshot} ({} entities, {} relations)",
            cur.entities.rows(),
            cur.relations.rows(),
            graph.num_entities,
            graph.num_relations
        )));
    }
    let max_epochs = if snapshot == 0 {
        cfg.max_epochs_first
    } else {
        cfg.max_epochs
    };
    let k = cfg.negatives;
    let margin = F::lit(cfg.margin);
    let hp = AdamParams::with_lr(cfg.learning_rate);
    let known: Option<HashSet<Triple>> = cfg.filter_negatives.then(|| seq.known_triples(snapshot));
    let valid = EvalContext::new(seq, snapshot, Split::Valid, cfg.eval_protocol);
    let train = &graph.train;

    let ModelState {
        entities,
        relations,
        entity_tokens,
        relation_tokens,
        moments,
        ..
    } = cur;
    *moments = Moments::fresh(
        entities.as_slice().len(),
        relations.as_slice().len(),
        entity_tokens.parameter_count(),
        relation_tokens.parameter_count(),
    );

    let distill = match prev {
        Some(p) if cfg.runs_distill() => {
            let ov = crate::kg::overlap_ids(seq.snapshot(p.snapshot), graph)?;
            Some(DistillContext {
                entity: TableDistiller::new(
                    &p.entities,
                    entity_tokens,
                    ov.entities.len(),
                    cfg.stop_mask_gradient,
                )?,
                relation: TableDistiller::new(
                    &p.relations,
                    relation_tokens,
                    ov.relations.len(),
                    cfg.stop_mask_gradient,
                )?,
                alpha: F::lit(cfg.alpha),
            })
        }
        _ => None,
    };

    let mut ent_grad = vec![F::zero(); entities.as_slice().len()];
    let mut rel_grad = vec![F::zero(); relations.as_slice().len()];
    let mut touch_e = TouchBits::new(ent_grad.len());
    let mut touch_r = TouchBits::new(rel_grad.len());

    let has_valid = !valid.triples.is_empty();
    let mut best_mrr = if has_valid {
        evaluate_or_empty(&valid, entities, relations)?.mrr
    } else {
        0.0
    };
    let mut best = (entities.clone(), relations.clone());
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epoch_losses = Vec::new();
    let mut first_batches = Vec::new();
    let mut negatives = Vec::with_capacity(cfg.batch_size * k);
    let mut epochs_run = 0;

    for epoch in 1..=max_epochs {
        let tag = [snapshot as u64, epoch as u64];
        let order = shuffled(
            train.len(),
            &mut rng::stream(cfg.seed, &[purpose::SHUFFLE, tag[0], tag[1]]),
        );
        let mut epoch_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let positives: Vec<Triple> = idx.iter().map(|&i| train[i]).collect();
            let mut neg_rng =
                rng::stream(cfg.seed, &[purpose::NEGATIVES, tag[0], tag[1], b as u64]);
            negatives.clear();
            for &p in &positives {
                sample_negatives_into(
                    p,
                    graph.num_entities,
                    k,
                    known.as_ref(),
                    &mut neg_rng,
                    &mut negatives,
                )?;
            }
            let scale = F::one() / F::from_usize(positives.len()).unwrap();
            ent_grad.iter_mut().for_each(|g| *g = F::zero());
            rel_grad.iter_mut().for_each(|g| *g = F::zero());
            let hinge = margin_grads(
                entities,
                relations,
                &positives,
                &negatives,
                k,
                margin,
                scale,
                &mut ent_grad,
                &mut rel_grad,
            )?;
            let mut value = hinge * scale;
            if let Some(d) = &distill {
                let de = d.entity.loss_grad_into(entities, d.alpha, &mut ent_grad)?;
                let dr = d
                    .relation
                    .loss_grad_into(relations, d.alpha, &mut rel_grad)?;
                value = value + d.alpha * (de + dr);
            }
            if !value.is_finite() {
                return Err(non_finite("objective", snapshot, epoch, b));
            }
            touch_e.record(&ent_grad);
            touch_r.record(&rel_grad);
            moments
                .entities
                .step(entities.as_mut_slice(), &ent_grad, &hp)?;
            moments
                .relations
                .step(relations.as_mut_slice(), &rel_grad, &hp)?;
            if cfg.renormalize {
                entities.normalize_rows();
            }
            let v = value.as_f64();
            if epoch == 1 {
                first_batches.push(v);
            }
            epoch_sum += v * positives.len() as f64;
        }
        epochs_run = epoch;
        epoch_losses.push(epoch_sum / train.len().max(1) as f64);
        if let Some(s) = sampler {
            s.sample();
        }
        if !entities.all_finite() || !relations.all_finite() {
            return Err(non_finite("parameters", snapshot, epoch, 0));
        }
        if !has_valid {
            best_epoch = epoch;
            continue;
        }
        let mrr = evaluate_or_empty(&valid, entities, relations)?.mrr;
        log::debug!(
            "snapshot {snapshot} epoch {epoch}: loss {:.5} valid mrr {mrr:.4}",
            epoch_losses[epoch - 1]
        );
        if mrr > best_mrr {
            best_mrr = mrr;
            best_epoch = epoch;
            best = (entities.clone(), relations.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("snapshot {snapshot}: early stop at epoch {epoch} (best {best_epoch})");
                break;
            }
        }
    }
    if has_valid {
        *entities = best.0;
        *relations = best.1;
    }
    Ok(Stage2Summary {
        best_valid_mrr: best_mrr,
        best_epoch,
        epochs_run,
        epoch_losses,
        first_epoch_batch_losses: first_batches,
        touched_parameters: touch_e.count() + touch_r.count(),
    })
}

/// Mean diversity penalty of the two token sets against the given tables.
pub fn token_diversity<F: Real>(
    entity_tokens: &TokenSet<F>,
    relation_tokens: &TokenSet<F>,
    entities: &EmbeddingTable<F>,
    relations: &EmbeddingTable<F>,
) -> Result<f64> {
    let de = diversity_loss(&compute_mask(entity_tokens, entities)?);
    let dr = diversity_loss(&compute_mask(relation_tokens, relations)?);
    Ok(((de + dr) * F::lit(0.5)).as_f64())
}

/// Learns the tokens of `cur` against the frozen tables of `prev`.
/// Embeddings of both models are left untouched.
pub fn train_stage1<F: Real>(
    seq: &SnapshotSequence,
    cfg: &TrainConfig,
    snapshot: usize,
    prev: &ModelState<F>,
    cur: &mut ModelState<F>,
) -> Result<Stage1Summary> {
    if snapshot == 0 || prev.snapshot + 1 != snapshot {
        return Err(Error::Contract(format!(
            "token learning needs the model of snapshot {}, got {}",
            snapshot.wrapping_sub(1),
            prev.snapshot
        )));
    }
    let (ne, nr) = (prev.entities.rows(), prev.relations.rows());
    let triples: Vec<Triple> = match cfg.stage1_source {
        Stage1Source::Previous => seq.snapshot(snapshot - 1).train.clone(),
        Stage1Source::CurrentOverlap => seq
            .snapshot(snapshot)
            .train
            .iter()
            .copied()
            .filter(|t| {
                (t.head as usize) < ne && (t.tail as usize) < ne && (t.relation as usize) < nr
            })
            .collect(),
    };
    if triples.is_empty() {
        log::warn!(
            "snapshot {snapshot}: no triples for token learning; only the diversity term applies"
        );
    }
    let k = cfg.negatives;
    let margin = F::lit(cfg.margin);
    let lambda = F::lit(cfg.diversity_weight());
    let hp = AdamParams::with_lr(cfg.learning_rate);
    let shared = cfg.shared_tokens;
    let tok = &mut cur.entity_tokens;
    let rel_tok = &mut cur.relation_tokens;
    let mut m_e = AdamState::new(tok.parameter_count());
    let mut m_r = AdamState::new(rel_tok.parameter_count());

    let diversity_before = token_diversity(tok, rel_tok, &prev.entities, &prev.relations)?;
    let mut last_epoch = 0.0;
    let mut negatives = Vec::with_capacity(cfg.batch_size * k);
    for epoch in 1..=cfg.stage1_epochs {
        let s = snapshot as u64;
        let order = shuffled(
            triples.len(),
            &mut rng::stream(cfg.seed, &[purpose::STAGE1_SHUFFLE, s, epoch as u64]),
        );
        let batches: Vec<&[usize]> = if order.is_empty() {
            vec![&[]]
        } else {
            order.chunks(cfg.batch_size).collect()
        };
        let mut epoch_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let positives: Vec<Triple> = idx.iter().map(|&i| triples[i]).collect();
            let mut neg_rng = rng::stream(
                cfg.seed,
                &[purpose::STAGE1_NEGATIVES, s, epoch as u64, b as u64],
            );
            negatives.clear();
            for &p in &positives {
                sample_negatives_into(p, ne, k, None, &mut neg_rng, &mut negatives)?;
            }
            let batch = TokenBatch {
                entities: &prev.entities,
                relations: &prev.relations,
                positives: &positives,
                negatives: &negatives,
                margin,
                trans_scale: F::one() / F::from_usize(positives.len().max(1)).unwrap(),
                lambda,
            };
            let obj = if shared {
                token_objective(&batch, tok, tok)?
            } else {
                token_objective(&batch, tok, rel_tok)?
            };
            if !obj.value.is_finite() {
                return Err(non_finite("token objective", snapshot, epoch, b));
            }
            if shared {
                let g: Vec<F> = obj
                    .entity_grad
                    .iter()
                    .zip(&obj.relation_grad)
                    .map(|(&a, &b)| a + b)
                    .collect();
                m_e.step(tok.z.as_mut_slice(), &g, &hp)?;
                rel_tok.z = tok.z.clone();
            } else {
                m_e.step(tok.z.as_mut_slice(), &obj.entity_grad, &hp)?;
                m_r.step(rel_tok.z.as_mut_slice(), &obj.relation_grad, &hp)?;
            }
            epoch_sum += obj.value.as_f64();
        }
        last_epoch = epoch_sum / batches.len() as f64;
    }
    cur.moments.entity_tokens = m_e;
    cur.moments.relation_tokens = m_r;
    let diversity_after = token_diversity(tok, rel_tok, &prev.entities, &prev.relations)?;
    Ok(Stage1Summary {
        epochs: cfg.stage1_epochs,
        diversity_before,
        diversity_after,
        objective_last_epoch: last_epoch,
    })
}

/// Models after every snapshot plus the run report.
#[derive(Debug, Clone)]
pub struct ContinualRun<F> {
    pub states: Vec<ModelState<F>>,
    pub report: RunReport,
}

pub fn run_continual<F: Real>(
    seq: &SnapshotSequence,
    cfg: &TrainConfig,
) -> Result<ContinualRun<F>> {
    run_continual_with(seq, cfg, |_, _| Ok(()))
}

/// Trains over every snapshot. `on_snapshot` sees each finished model
/// before the next snapshot starts (used to checkpoint as training goes).
pub fn run_continual_with<F, C>(
    seq: &SnapshotSequence,
    cfg: &TrainConfig,
    mut on_snapshot: C,
) -> Result<ContinualRun<F>>
where
    F: Real,
    C: FnMut(&ModelState<F>, &SnapshotReport) -> Result<()>,
{
    cfg.validate()?;
    if seq.is_empty() {
        return Err(Error::Structure("no snapshots".into()));
    }
    let tests: Vec<EvalContext> = (0..seq.len())
        .map(|i| EvalContext::new(seq, i, Split::Test, cfg.eval_protocol))
        .collect();
    let sampler = MemorySampler::start(std::time::Duration::from_millis(50));
    let mut report = RunReport::new(cfg.clone());
    let mut states: Vec<ModelState<F>> = Vec::with_capacity(seq.len());
    let mut cumulative = 0.0;

    for i in 0..seq.len() {
        sampler.take_peak();
        telemetry::reset_allocator_peak();
        let clock = Stopwatch::start();
        let mut cur = match states.last() {
            None => ModelState::initial(seq, cfg)?,
            Some(prev) => prev.grown(seq, i, cfg)?,
        };
        let mut stage1 = None;
        let mut stage1_s = 0.0;
        if i > 0 && cfg.runs_stage1() {
            let w = Stopwatch::start();
            stage1 = Some(train_stage1(seq, cfg, i, &states[i - 1], &mut cur)?);
            stage1_s = w.secs();
        }
        let w = Stopwatch::start();
        let s2 = train_stage2(seq, cfg, i, states.last(), &mut cur, Some(&sampler))?;
        let stage2_s = w.secs();
        let wall = clock.secs();
        cumulative += wall;

        let w = Stopwatch::start();
        let row: Vec<EvalResult> = tests[..=i]
            .iter()
            .map(|ctx| evaluate_or_empty(ctx, &cur.entities, &cur.relations))
            .collect::<Result<_>>()?;
        let eval_s = w.secs();
        let test = row[i].clone();
        report.forgetting.push_row(row)?;

        let stage1_updated = if stage1.is_some() {
            count_updated_parameters(
                Stage::TokenLearning,
                &cur.entity_tokens,
                &cur.relation_tokens,
                cfg.shared_tokens,
                &[],
            )
        } else {
            0
        };
        let token_parameters = if cfg.shared_tokens {
            cur.entity_tokens.parameter_count()
        } else {
            cur.entity_tokens.parameter_count() + cur.relation_tokens.parameter_count()
        };
        let snap = SnapshotReport {
            index: i,
            test,
            best_valid_mrr: s2.best_valid_mrr,
            best_epoch: s2.best_epoch,
            epochs_run: s2.epochs_run,
            epoch_losses: s2.epoch_losses,
            first_epoch_batch_losses: s2.first_epoch_batch_losses,
            stage1,
            metrics: SnapshotMetrics {
                snapshot: i,
                wall_time_s: wall,
                cumulative_time_s: cumulative,
                stage1_s,
                stage2_s,
                eval_s,
                peak_rss_bytes: sampler.take_peak(),
                peak_alloc_bytes: telemetry::allocator_peak(),
                stage1_updated_parameters: stage1_updated,
                stage2_touched_parameters: s2.touched_parameters,
                token_parameters,
            },
        };
        log::info!(
            "snapshot {i}: test mrr {:.4} hits@1 {:.4} hits@10 {:.4} ({} epochs, {:.2}s)",
            snap.test.mrr,
            snap.test.hits1,
            snap.test.hits10,
            snap.epochs_run,
            wall
        );
        on_snapshot(&cur, &snap)?;
        report.snapshots.push(snap);
        states.push(cur);
    }
    Ok(ContinualRun { states, report })
}
