//! Finite-difference checks of the analytic gradients.
//!
//! Each trial draws a small random instance in double precision, computes
//! the analytic gradient, and compares every coordinate with a central
//! difference. Relative error is `|a - n| / max(|a|, |n|, 1e-3)`; the floor
//! keeps coordinates whose true gradient is zero from dividing by noise.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{total_loss, DistillContext, TableDistiller};
use crate::error::{Error, Result};
use crate::kg::{EmbeddingTable, Triple};
use crate::rng::{self, purpose, StreamRng};
use crate::scoring::{margin_loss_grad, sample_negatives, score_unchecked};
use crate::tokens::{
    compute_mask, diversity_loss, diversity_loss_grad, masked_embeddings, token_objective,
    MaskMatrix, Scope, TokenBatch, TokenSet,
};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-3;
/// Minimum distance of every hinge from its kink.
const KINK_CLEARANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradComponent {
    Margin,
    Diversity,
    Distill,
    TokenObjective,
    Total,
}

impl GradComponent {
    pub const ALL: [GradComponent; 5] = [
        GradComponent::Margin,
        GradComponent::Diversity,
        GradComponent::Distill,
        GradComponent::TokenObjective,
        GradComponent::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradComponent::Margin => "margin",
            GradComponent::Diversity => "diversity",
            GradComponent::Distill => "distill",
            GradComponent::TokenObjective => "token-objective",
            GradComponent::Total => "total",
        }
    }
}

impl fmt::Display for GradComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GradComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradComponent::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradient component {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: GradComponent,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Location of the worst coordinate: `trial/tensor[index]`.
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

/// Runs the check and fails with the offending coordinate when the error
/// reaches the tolerance.
pub fn grad_check(component: GradComponent, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let r = measure_grad_error(component, trials, seed)?;
    if !r.passed() {
        return Err(Error::Numeric(format!(
            "{component} gradient: relative error {:.3e} at {}",
            r.max_rel_error,
            r.worst.as_deref().unwrap_or("?")
        )));
    }
    Ok(r)
}

/// Like [`grad_check`] without the pass/fail threshold.
pub fn measure_grad_error(
    component: GradComponent,
    trials: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        component,
        trials,
        coordinates: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for trial in 0..trials {
        let mut rng = rng::stream(seed, &[purpose::GRAD_CHECK, component as u64, trial as u64]);
        let case = build_case(component, &mut rng)?;
        let analytic = (case.grad)(&case.params)?;
        let mut params = case.params.clone();
        for (g, tensor) in params.clone().iter().enumerate() {
            for i in 0..tensor.len() {
                let x = params[g][i];
                params[g][i] = x + STEP;
                let up = (case.value)(&params)?;
                params[g][i] = x - STEP;
                let down = (case.value)(&params)?;
                params[g][i] = x;
                let numeric = (up - down) / (2.0 * STEP);
                let a = analytic[g][i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                report.coordinates += 1;
                if err.is_nan() || err >= report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some(format!(
                        "trial {trial}/{}[{i}] analytic {a:.6e} numeric {numeric:.6e}",
                        case.names[g]
                    ));
                }
            }
        }
    }
    Ok(report)
}

type Eval<T> = Box<dyn Fn(&[Vec<f64>]) -> Result<T>>;

struct Case {
    names: Vec<&'static str>,
    params: Vec<Vec<f64>>,
    value: Eval<f64>,
    grad: Eval<Vec<Vec<f64>>>,
}

fn random_table(rows: usize, dim: usize, rng: &mut StreamRng) -> EmbeddingTable<f64> {
    let data = (0..rows * dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    EmbeddingTable::from_vec(rows, dim, data).expect("sized")
}

fn table(rows: usize, dim: usize, data: &[f64]) -> Result<EmbeddingTable<f64>> {
    EmbeddingTable::from_vec(rows, dim, data.to_vec())
}

fn tokens(data: &[f64], count: usize, dim: usize, scope: Scope) -> Result<TokenSet<f64>> {
    Ok(TokenSet {
        z: table(count, dim, data)?,
        scope,
    })
}

struct Sizes {
    ne: usize,
    nr: usize,
    dim: usize,
    t: usize,
    batch: usize,
    k: usize,
}

fn sizes(rng: &mut StreamRng, min_tokens: usize) -> Sizes {
    Sizes {
        ne: rng.random_range(3..=8),
        nr: rng.random_range(1..=3),
        dim: rng.random_range(2..=6),
        t: rng.random_range(min_tokens..=3),
        batch: rng.random_range(1..=4),
        k: rng.random_range(1..=3),
    }
}

fn random_batch(s: &Sizes, rng: &mut StreamRng) -> Result<(Vec<Triple>, Vec<Triple>)> {
    let pos: Vec<Triple> = (0..s.batch)
        .map(|_| {
            Triple::new(
                rng.random_range(0..s.ne as u32),
                rng.random_range(0..s.nr as u32),
                rng.random_range(0..s.ne as u32),
            )
        })
        .collect();
    let mut neg = Vec::new();
    for &p in &pos {
        neg.extend(sample_negatives(p, s.ne, s.k, rng)?);
    }
    Ok((pos, neg))
}

/// True when no hinge sits within the clearance of its kink.
fn hinges_clear(
    ent: &EmbeddingTable<f64>,
    rel: &EmbeddingTable<f64>,
    pos: &[Triple],
    neg: &[Triple],
    margin: f64,
) -> bool {
    let k = neg.len() / pos.len();
    let score = |t: &Triple| {
        score_unchecked(
            ent.row(t.head as usize),
            rel.row(t.relation as usize),
            ent.row(t.tail as usize),
        )
    };
    pos.iter().zip(neg.chunks(k)).all(|(p, ns)| {
        ns.iter()
            .all(|n| (margin + score(p) - score(n)).abs() > KINK_CLEARANCE)
    })
}

fn build_case(component: GradComponent, rng: &mut StreamRng) -> Result<Case> {
    for _ in 0..1000 {
        if let Some(case) = try_case(component, rng)? {
            return Ok(case);
        }
    }
    Err(Error::Numeric(
        "could not draw an instance away from hinge kinks".into(),
    ))
}

fn try_case(component: GradComponent, rng: &mut StreamRng) -> Result<Option<Case>> {
    let min_tokens = if component == GradComponent::Diversity {
        2
    } else {
        1
    };
    let s = sizes(rng, min_tokens);
    let (ne, nr, d, t) = (s.ne, s.nr, s.dim, s.t);
    let margin = rng.random_range(0.5..3.0);
    let scale = 1.0 / s.batch as f64;
    let ent = random_table(ne, d, rng);
    let rel = random_table(nr, d, rng);
    let (pos, neg) = random_batch(&s, rng)?;

    let case = match component {
        GradComponent::Margin => {
            if !hinges_clear(&ent, &rel, &pos, &neg, margin) {
                return Ok(None);
            }
            let (p1, n1) = (pos.clone(), neg.clone());
            Case {
                names: vec!["entities", "relations"],
                params: vec![ent.as_slice().to_vec(), rel.as_slice().to_vec()],
                value: Box::new(move |x| {
                    let g = margin_loss_grad(
                        &table(ne, d, &x[0])?,
                        &table(nr, d, &x[1])?,
                        &p1,
                        &n1,
                        margin,
                        scale,
                    )?;
                    Ok(g.loss * scale)
                }),
                grad: Box::new(move |x| {
                    let g = margin_loss_grad(
                        &table(ne, d, &x[0])?,
                        &table(nr, d, &x[1])?,
                        &pos,
                        &neg,
                        margin,
                        scale,
                    )?;
                    let (mut de, mut dr) = (vec![0.0; ne * d], vec![0.0; nr * d]);
                    g.entity.scatter_into(&mut de);
                    g.relation.scatter_into(&mut dr);
                    Ok(vec![de, dr])
                }),
            }
        }
        GradComponent::Diversity => {
            let m: Vec<f64> = (0..t * ne).map(|_| rng.random_range(0.05..0.95)).collect();
            Case {
                names: vec!["mask"],
                params: vec![m],
                value: Box::new(move |x| {
                    Ok(diversity_loss(&MaskMatrix::from_vec(t, ne, x[0].clone())?))
                }),
                grad: Box::new(move |x| {
                    Ok(vec![
                        diversity_loss_grad(&MaskMatrix::from_vec(t, ne, x[0].clone())?).1,
                    ])
                }),
            }
        }
        GradComponent::Distill => {
            let ov = rng.random_range(1..=ne);
            let prev = random_table(ov, d, rng);
            let z = random_table(t, d, rng);
            let (p1, z1) = (prev.clone(), z.clone());
            Case {
                names: vec!["current"],
                params: vec![ent.as_slice().to_vec()],
                value: Box::new(move |x| {
                    let tk = TokenSet {
                        z: z1.clone(),
                        scope: Scope::Entity,
                    };
                    TableDistiller::new(&p1, &tk, ov, false)?.loss(&table(ne, d, &x[0])?)
                }),
                grad: Box::new(move |x| {
                    let tk = TokenSet {
                        z: z.clone(),
                        scope: Scope::Entity,
                    };
                    let mut g = vec![0.0; ne * d];
                    TableDistiller::new(&prev, &tk, ov, false)?.loss_grad_into(
                        &table(ne, d, &x[0])?,
                        1.0,
                        &mut g,
                    )?;
                    Ok(vec![g])
                }),
            }
        }
        GradComponent::TokenObjective => {
            let ze = random_table(t, d, rng);
            let zr = random_table(t, d, rng);
            let lambda = rng.random_range(0.0..1.0);
            let me = compute_mask(&tokens(ze.as_slice(), t, d, Scope::Entity)?, &ent)?;
            let mr = compute_mask(&tokens(zr.as_slice(), t, d, Scope::Relation)?, &rel)?;
            if !hinges_clear(
                &masked_embeddings(&me, &ent)?,
                &masked_embeddings(&mr, &rel)?,
                &pos,
                &neg,
                margin,
            ) {
                return Ok(None);
            }
            let eval = move |x: &[Vec<f64>]| {
                let batch = TokenBatch {
                    entities: &ent,
                    relations: &rel,
                    positives: &pos,
                    negatives: &neg,
                    margin,
                    trans_scale: scale,
                    lambda,
                };
                token_objective(
                    &batch,
                    &tokens(&x[0], t, d, Scope::Entity)?,
                    &tokens(&x[1], t, d, Scope::Relation)?,
                )
            };
            let eval = std::rc::Rc::new(eval);
            let e2 = eval.clone();
            Case {
                names: vec!["entity_tokens", "relation_tokens"],
                params: vec![ze.as_slice().to_vec(), zr.as_slice().to_vec()],
                value: Box::new(move |x| Ok(eval(x)?.value)),
                grad: Box::new(move |x| {
                    let o = e2(x)?;
                    Ok(vec![o.entity_grad, o.relation_grad])
                }),
            }
        }
        GradComponent::Total => {
            if !hinges_clear(&ent, &rel, &pos, &neg, margin) {
                return Ok(None);
            }
            let ov_e = rng.random_range(1..=ne);
            let ov_r = rng.random_range(1..=nr);
            let prev_e = random_table(ov_e, d, rng);
            let prev_r = random_table(ov_r, d, rng);
            let ze = random_table(t, d, rng);
            let zr = random_table(t, d, rng);
            let alpha = rng.random_range(0.5..5.0);
            let eval = move |x: &[Vec<f64>]| {
                let te = tokens(ze.as_slice(), t, d, Scope::Entity)?;
                let tr = tokens(zr.as_slice(), t, d, Scope::Relation)?;
                let ctx = DistillContext {
                    entity: TableDistiller::new(&prev_e, &te, ov_e, false)?,
                    relation: TableDistiller::new(&prev_r, &tr, ov_r, false)?,
                    alpha,
                };
                total_loss(
                    &table(ne, d, &x[0])?,
                    &table(nr, d, &x[1])?,
                    &pos,
                    &neg,
                    margin,
                    scale,
                    &ctx,
                )
            };
            let eval = std::rc::Rc::new(eval);
            let e2 = eval.clone();
            Case {
                names: vec!["entities", "relations"],
                params: vec![ent.as_slice().to_vec(), rel.as_slice().to_vec()],
                value: Box::new(move |x| Ok(eval(x)?.value)),
                grad: Box::new(move |x| {
                    let o = e2(x)?;
                    Ok(vec![o.entity_grad, o.relation_grad])
                }),
            }
        }
    };
    Ok(Some(case))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes() {
        for c in GradComponent::ALL {
            let r = grad_check(c, 10, 7).unwrap();
            assert!(r.coordinates > 0, "{c}");
        }
    }

    #[test]
    fn names_round_trip() {
        for c in GradComponent::ALL {
            assert_eq!(c.name().parse::<GradComponent>().unwrap(), c);
        }
        assert!("bogus".parse::<GradComponent>().is_err());
    }
}
