//! Synthetic growing graphs with a planted translational structure.
//!
//! Every entity gets a latent point and every relation a latent translation.
//! A fact `(h, r, t)` picks `t` among the few entities nearest to
//! `x_h + v_r`, so the generated graphs are learnable by TransE-style
//! models. Snapshots grow entities, relations, facts, or all three.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loader::DatasetLayout;
use crate::error::{Error, Result};
use crate::kg::Split;
use crate::rng::{self, purpose, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthMode {
    Entity,
    Relation,
    Fact,
    Hybrid,
}

impl std::str::FromStr for GrowthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity" => Ok(GrowthMode::Entity),
            "relation" => Ok(GrowthMode::Relation),
            "fact" => Ok(GrowthMode::Fact),
            "hybrid" => Ok(GrowthMode::Hybrid),
            _ => Err(Error::Config(format!("unknown growth mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthSpec {
    pub base_entities: usize,
    pub base_relations: usize,
    pub base_facts: usize,
    pub snapshots: usize,
    /// Fractional growth per snapshot, compounded from the base.
    pub entity_growth: f64,
    pub relation_growth: f64,
    pub fact_growth: f64,
    pub mode: GrowthMode,
    pub seed: u64,
    pub latent_dim: usize,
    /// Tails are drawn among this many nearest entities.
    pub fanout: usize,
    /// Std of relation translations; entity points have unit variance.
    pub translation_scale: f64,
}

impl Default for GrowthSpec {
    fn default() -> Self {
        GrowthSpec {
            base_entities: 500,
            base_relations: 20,
            base_facts: 5000,
            snapshots: 5,
            entity_growth: 0.2,
            relation_growth: 0.2,
            fact_growth: 0.2,
            mode: GrowthMode::Entity,
            seed: 0,
            latent_dim: 3,
            fanout: 1,
            translation_scale: 1.0,
        }
    }
}

/// Cumulative size after `i` steps of compound growth, floored.
fn compound(base: usize, rate: f64, i: usize) -> usize {
    (base as f64 * (1.0 + rate).powi(i as i32) + 1e-9).floor() as usize
}

impl GrowthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_entities < 2 || self.base_relations == 0 || self.base_facts == 0 {
            return Err(Error::Config(
                "base entities (>= 2), relations and facts must be positive".into(),
            ));
        }
        if self.snapshots == 0 || self.latent_dim == 0 || self.fanout == 0 {
            return Err(Error::Config(
                "snapshots, latent_dim and fanout must be positive".into(),
            ));
        }
        if !(self.translation_scale > 0.0 && self.translation_scale.is_finite()) {
            return Err(Error::Config("translation_scale must be positive".into()));
        }
        for g in [self.entity_growth, self.relation_growth, self.fact_growth] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("growth rate {g} must be >= 0")));
            }
        }
        let last = self.snapshots - 1;
        let (ne, nr, nf) = (
            self.entity_count(last),
            self.relation_count(last),
            self.cumulative_facts(last),
        );
        if nf as f64 > (ne as f64).powi(2) * nr as f64 {
            return Err(Error::Config(format!(
                "{nf} facts cannot be distinct over {ne} entities and {nr} relations"
            )));
        }
        Ok(())
    }

    pub fn entity_count(&self, i: usize) -> usize {
        match self.mode {
            GrowthMode::Entity | GrowthMode::Hybrid => {
                compound(self.base_entities, self.entity_growth, i)
            }
            _ => self.base_entities,
        }
    }

    pub fn relation_count(&self, i: usize) -> usize {
        match self.mode {
            GrowthMode::Relation | GrowthMode::Hybrid => {
                compound(self.base_relations, self.relation_growth, i)
            }
            _ => self.base_relations,
        }
    }

    /// Facts in snapshots `0..=i` together. They grow at the rate of the
    /// growth mode, so entity and relation modes keep fact density fixed.
    pub fn cumulative_facts(&self, i: usize) -> usize {
        let rate = match self.mode {
            GrowthMode::Entity => self.entity_growth,
            GrowthMode::Relation => self.relation_growth,
            GrowthMode::Fact | GrowthMode::Hybrid => self.fact_growth,
        };
        compound(self.base_facts, rate, i)
    }

    pub fn new_facts(&self, i: usize) -> usize {
        if i == 0 {
            self.cumulative_facts(0)
        } else {
            self.cumulative_facts(i) - self.cumulative_facts(i - 1)
        }
    }
}

/// Train/valid/test sizes for `n` facts in the ratio 3:1:1.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 3 / 5;
    let valid = n / 5;
    (train, valid, n - train - valid)
}

/// One generated snapshot, as generator-side ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSnapshot {
    pub splits: [Vec<(u32, u32, u32)>; 3],
    pub entities: usize,
    pub relations: usize,
}

pub fn synthesize(spec: &GrowthSpec) -> Result<Vec<SyntheticSnapshot>> {
    spec.validate()?;
    let mut g = Generator::new(spec);
    let mut out = Vec::with_capacity(spec.snapshots);
    for i in 0..spec.snapshots {
        out.push(g.snapshot(i)?);
    }
    check_growth(spec, &out)?;
    Ok(out)
}

/// Generates a dataset and writes it in the standard layout under `root`.
pub fn generate_synthetic(spec: &GrowthSpec, root: &Path) -> Result<DatasetLayout> {
    let snaps = synthesize(spec)?;
    for (i, s) in snaps.iter().enumerate() {
        let dir = root.join(i.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (split, facts) in Split::ALL.iter().zip(&s.splits) {
            let path = dir.join(split.file_name());
            let mut buf = Vec::with_capacity(facts.len() * 16);
            for &(h, r, t) in facts {
                writeln!(buf, "e{h}\tr{r}\te{t}").expect("write to Vec");
            }
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
    }
    let meta = root.join("synthetic.json");
    fs::write(&meta, serde_json::to_vec_pretty(spec)?).map_err(|e| Error::io(&meta, e))?;
    Ok(DatasetLayout {
        root: root.to_path_buf(),
        snapshots: snaps.len(),
    })
}

struct Generator<'a> {
    spec: &'a GrowthSpec,
    rng: StreamRng,
    points: Vec<Vec<f64>>,
    moves: Vec<Vec<f64>>,
    seen: HashSet<(u32, u32, u32)>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a GrowthSpec) -> Self {
        Generator {
            spec,
            rng: rng::stream(spec.seed, &[purpose::SYNTHETIC]),
            points: Vec::new(),
            moves: Vec::new(),
            seen: HashSet::new(),
        }
    }

    fn gaussian(&mut self, scale: f64) -> Vec<f64> {
        (0..self.spec.latent_dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut self.rng);
                x * scale
            })
            .collect()
    }

    fn snapshot(&mut self, i: usize) -> Result<SyntheticSnapshot> {
        let (old_e, old_r) = (self.points.len(), self.moves.len());
        let (ne, nr) = (self.spec.entity_count(i), self.spec.relation_count(i));
        while self.points.len() < ne {
            let p = self.gaussian(1.0);
            self.points.push(p);
        }
        while self.moves.len() < nr {
            let m = self.gaussian(self.spec.translation_scale);
            self.moves.push(m);
        }
        let n_facts = self.spec.new_facts(i);
        let (n_train, n_valid, _) = split_sizes(n_facts);
        let coverage_needed = (ne - old_e) + (nr - old_r);
        if coverage_needed > n_train {
            return Err(Error::Config(format!(
                "snapshot {i}: {n_train} training facts cannot cover {coverage_needed} new entities/relations"
            )));
        }

        // Every new entity heads one training fact; every new relation
        // appears in one. This keeps all ids trainable.
        let mut coverage = Vec::with_capacity(coverage_needed);
        for e in old_e..ne {
            let r = self.rng.random_range(0..nr) as u32;
            coverage.push(self.fact_from(e as u32, r, ne)?);
        }
        for r in old_r..nr {
            let h = self.rng.random_range(0..ne) as u32;
            coverage.push(self.fact_from(h, r as u32, ne)?);
        }
        let mut rest = Vec::with_capacity(n_facts - coverage.len());
        while coverage.len() + rest.len() < n_facts {
            // Half the facts of a growth snapshot involve a fresh id.
            let h = if old_e < ne && self.rng.random_bool(0.5) {
                self.rng.random_range(old_e..ne)
            } else {
                self.rng.random_range(0..ne)
            } as u32;
            let r = if old_r < nr && self.rng.random_bool(0.5) {
                self.rng.random_range(old_r..nr)
            } else {
                self.rng.random_range(0..nr)
            } as u32;
            rest.push(self.fact_from(h, r, ne)?);
        }
        rest.shuffle(&mut self.rng);
        let mut train = coverage;
        let fill = n_train - train.len();
        train.extend_from_slice(&rest[..fill]);
        let valid = rest[fill..fill + n_valid].to_vec();
        let test = rest[fill + n_valid..].to_vec();
        Ok(SyntheticSnapshot {
            splits: [train, valid, test],
            entities: ne,
            relations: nr,
        })
    }

    /// A fresh fact with the given head and relation if possible, otherwise
    /// with a random head/relation, otherwise any unused triple.
    fn fact_from(&mut self, head: u32, relation: u32, ne: usize) -> Result<(u32, u32, u32)> {
        if let Some(f) = self.try_planted(head, relation, ne) {
            return Ok(f);
        }
        let nr = self.moves.len();
        for _ in 0..64 {
            let h = self.rng.random_range(0..ne) as u32;
            let r = self.rng.random_range(0..nr) as u32;
            if let Some(f) = self.try_planted(h, r, ne) {
                return Ok(f);
            }
        }
        for _ in 0..100_000 {
            let f = (
                self.rng.random_range(0..ne) as u32,
                self.rng.random_range(0..nr) as u32,
                self.rng.random_range(0..ne) as u32,
            );
            if self.seen.insert(f) {
                return Ok(f);
            }
        }
        Err(Error::Config("fact space saturated".into()))
    }

    fn try_planted(&mut self, head: u32, relation: u32, ne: usize) -> Option<(u32, u32, u32)> {
        let target: Vec<f64> = self.points[head as usize]
            .iter()
            .zip(&self.moves[relation as usize])
            .map(|(a, b)| a + b)
            .collect();
        let mut nearest: Vec<(f64, u32)> = (0..ne as u32)
            .filter(|&e| e != head)
            .map(|e| {
                let d = self.points[e as usize]
                    .iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (d, e)
            })
            .collect();
        let k = self.spec.fanout.min(nearest.len());
        if k == 0 {
            return None;
        }
        nearest.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        nearest.truncate(k);
        nearest.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let start = self.rng.random_range(0..k);
        (0..k)
            .map(|j| (head, relation, nearest[(start + j) % k].1))
            .find(|f| !self.seen.contains(f))
            .inspect(|f| {
                self.seen.insert(*f);
            })
    }
}

/// Checks the per-mode growth invariants on generated output.
fn check_growth(spec: &GrowthSpec, snaps: &[SyntheticSnapshot]) -> Result<()> {
    for (i, s) in snaps.iter().enumerate() {
        let n: usize = s.splits.iter().map(Vec::len).sum();
        if n != spec.new_facts(i)
            || s.entities != spec.entity_count(i)
            || s.relations != spec.relation_count(i)
        {
            return Err(Error::Structure(format!(
                "snapshot {i} does not match its growth plan"
            )));
        }
        if i > 0 {
            let p = &snaps[i - 1];
            let fixed_e = matches!(spec.mode, GrowthMode::Fact | GrowthMode::Relation);
            let fixed_r = matches!(spec.mode, GrowthMode::Fact | GrowthMode::Entity);
            if (fixed_e && s.entities != p.entities) || (fixed_r && s.relations != p.relations) {
                return Err(Error::Structure(format!(
                    "{:?} growth changed a fixed count at snapshot {i}",
                    spec.mode
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_sequence;

    fn small(mode: GrowthMode) -> GrowthSpec {
        GrowthSpec {
            base_entities: 40,
            base_relations: 4,
            base_facts: 200,
            mode,
            seed: 3,
            ..GrowthSpec::default()
        }
    }

    #[test]
    fn compound_entity_growth() {
        let spec = GrowthSpec {
            base_entities: 100,
            ..GrowthSpec::default()
        };
        let counts: Vec<usize> = (0..5).map(|i| spec.entity_count(i)).collect();
        assert_eq!(counts, vec![100, 120, 144, 172, 207]);
    }

    #[test]
    fn three_one_one_split() {
        assert_eq!(split_sizes(50), (30, 10, 10));
        let (a, b, c) = split_sizes(7);
        assert_eq!(a + b + c, 7);
        assert!((a as f64 - 4.2).abs() <= 1.0 && (b as f64 - 1.4).abs() <= 1.0);
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = small(GrowthMode::Hybrid);
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        for i in 0..spec.snapshots {
            for split in Split::ALL {
                let p = format!("{i}/{}", split.file_name());
                assert_eq!(
                    fs::read(a.path().join(&p)).unwrap(),
                    fs::read(b.path().join(&p)).unwrap(),
                    "{p}"
                );
            }
        }
    }

    #[test]
    fn saturation_is_rejected() {
        let spec = GrowthSpec {
            base_entities: 3,
            base_relations: 1,
            base_facts: 10,
            ..GrowthSpec::default()
        };
        assert!(matches!(synthesize(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn modes_hold_their_fixed_counts_after_loading() {
        for mode in [
            GrowthMode::Entity,
            GrowthMode::Relation,
            GrowthMode::Fact,
            GrowthMode::Hybrid,
        ] {
            let spec = small(mode);
            let tmp = tempfile::tempdir().unwrap();
            generate_synthetic(&spec, tmp.path()).unwrap();
            let seq = load_sequence(tmp.path()).unwrap();
            assert_eq!(seq.len(), 5);
            for (i, s) in seq.snapshots.iter().enumerate() {
                assert_eq!(s.num_entities, spec.entity_count(i), "{mode:?} {i}");
                assert_eq!(s.num_relations, spec.relation_count(i), "{mode:?} {i}");
                let n = s.train.len() + s.valid.len() + s.test.len();
                assert_eq!(n, spec.new_facts(i));
                let (tr, va, _) = split_sizes(n);
                assert_eq!((s.train.len(), s.valid.len()), (tr, va));
                // Coverage keeps every evaluation triple rankable.
                assert_eq!(seq.eval_triples(i, Split::Test).len(), s.test.len());
            }
            match mode {
                GrowthMode::Fact => assert_eq!(seq.snapshot(4).num_entities, 40),
                GrowthMode::Entity => assert_eq!(seq.snapshot(4).num_relations, 4),
                _ => {}
            }
        }
    }
}
