use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{SnapshotGraph, SnapshotSequence, Split, Triple, Vocabulary};

/// Optional id-map files at the dataset root, one `name<TAB>id` per line.
pub const ENTITY_MAP: &str = "entity2id.txt";
pub const RELATION_MAP: &str = "relation2id.txt";

/// A dataset directory: `root/0 .. root/{I-1}`, each holding `train.txt`,
/// `valid.txt` and `test.txt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub snapshots: usize,
}

impl DatasetLayout {
    /// Finds the numbered snapshot directories under `root`. Entries whose
    /// names are not integers are ignored.
    pub fn discover(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let entries = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
        let mut indices = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&root, e))?;
            if !entry.path().is_dir() {
                continue;
            }
            if let Some(i) = entry
                .file_name()
                .to_str()
                .and_then(|s| s.parse::<usize>().ok())
            {
                indices.push(i);
            }
        }
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::Structure(format!(
                "no snapshot directories under {}",
                root.display()
            )));
        }
        if let Some((pos, &i)) = indices.iter().enumerate().find(|&(pos, &i)| pos != i) {
            return Err(Error::Structure(format!(
                "snapshot directories must be 0..{}; found {i} at position {pos}",
                indices.len()
            )));
        }
        Ok(DatasetLayout {
            snapshots: indices.len(),
            root,
        })
    }

    pub fn split_path(&self, snapshot: usize, split: Split) -> PathBuf {
        self.root.join(snapshot.to_string()).join(split.file_name())
    }
}

/// Per-snapshot sizes, logged at load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotStats {
    pub index: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub entities: usize,
    pub relations: usize,
}

pub fn snapshot_stats(seq: &SnapshotSequence) -> Vec<SnapshotStats> {
    seq.snapshots
        .iter()
        .map(|s| SnapshotStats {
            index: s.index,
            train: s.train.len(),
            valid: s.valid.len(),
            test: s.test.len(),
            entities: s.num_entities,
            relations: s.num_relations,
        })
        .collect()
}

/// Loads a dataset directory.
pub fn load_sequence(root: impl AsRef<Path>) -> Result<SnapshotSequence> {
    load_layout(&DatasetLayout::discover(root.as_ref())?)
}

pub fn load_layout(layout: &DatasetLayout) -> Result<SnapshotSequence> {
    let maps = IdMaps::read(&layout.root)?;
    let mut vocab = Vocabulary::new();
    let mut snapshots = Vec::with_capacity(layout.snapshots);
    let mut trained: HashSet<u32> = HashSet::new();
    for i in 0..layout.snapshots {
        let mut splits: [Vec<Triple>; 3] = Default::default();
        for (slot, split) in splits.iter_mut().zip(Split::ALL) {
            let path = layout.split_path(i, split);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            *slot = parse_triples(&text, &path, &mut vocab, maps.as_ref())?;
        }
        vocab.close_snapshot();
        let [train, valid, test] = splits;
        if train.is_empty() {
            return Err(Error::Structure(format!(
                "snapshot {i} has no training triples"
            )));
        }
        let train = dedup(train, i, Split::Train);
        let train_set: HashSet<Triple> = train.iter().copied().collect();
        let eval_split = |v: Vec<Triple>, split: Split| {
            let v = dedup(v, i, split);
            let before = v.len();
            let v: Vec<Triple> = v.into_iter().filter(|t| !train_set.contains(t)).collect();
            if v.len() < before {
                log::warn!(
                    "snapshot {i} {split:?}: dropped {} triples also in train",
                    before - v.len()
                );
            }
            v
        };
        let valid = eval_split(valid, Split::Valid);
        let test = eval_split(test, Split::Test);

        trained.extend(train.iter().flat_map(|t| [t.head, t.tail]));
        let unseen = valid
            .iter()
            .chain(&test)
            .filter(|t| !trained.contains(&t.head) || !trained.contains(&t.tail))
            .count();
        if unseen > 0 {
            log::warn!(
                "snapshot {i}: {unseen} evaluation triples mention entities absent from every train split so far; they are skipped at evaluation"
            );
        }
        snapshots.push(SnapshotGraph {
            index: i,
            train,
            valid,
            test,
            num_entities: vocab.entity_count(i),
            num_relations: vocab.relation_count(i),
        });
    }
    let seq = SnapshotSequence::new(vocab, snapshots)?;
    for s in snapshot_stats(&seq) {
        log::info!(
            "snapshot {}: train={} valid={} test={} entities={} relations={}",
            s.index,
            s.train,
            s.valid,
            s.test,
            s.entities,
            s.relations
        );
    }
    Ok(seq)
}

fn dedup(v: Vec<Triple>, snapshot: usize, split: Split) -> Vec<Triple> {
    let mut seen = HashSet::with_capacity(v.len());
    let before = v.len();
    let out: Vec<Triple> = v.into_iter().filter(|t| seen.insert(*t)).collect();
    if out.len() < before {
        log::warn!(
            "snapshot {snapshot} {split:?}: dropped {} duplicate triples",
            before - out.len()
        );
    }
    out
}

/// Parses tab-separated triples, interning names into `vocab`.
/// Blank lines are skipped.
pub fn parse_triples(
    text: &str,
    path: &Path,
    vocab: &mut Vocabulary,
    maps: Option<&IdMaps>,
) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (h, r, t) = match maps {
            Some(m) => (
                m.entity(fields[0]),
                m.relation(fields[1]),
                m.entity(fields[2]),
            ),
            None => (fields[0], fields[1], fields[2]),
        };
        let head = vocab.intern_entity(h);
        let relation = vocab.intern_relation(r);
        let tail = vocab.intern_entity(t);
        out.push(Triple::new(head, relation, tail));
    }
    Ok(out)
}

/// Integer id to name maps, used when a dataset ships numeric fields.
#[derive(Debug, Clone, Default)]
pub struct IdMaps {
    entities: HashMap<u64, String>,
    relations: HashMap<u64, String>,
}

impl IdMaps {
    /// Reads both map files if both exist under `root`.
    pub fn read(root: &Path) -> Result<Option<Self>> {
        let (ep, rp) = (root.join(ENTITY_MAP), root.join(RELATION_MAP));
        if !ep.is_file() || !rp.is_file() {
            return Ok(None);
        }
        Ok(Some(IdMaps {
            entities: read_map(&ep)?,
            relations: read_map(&rp)?,
        }))
    }

    fn entity<'a>(&'a self, field: &'a str) -> &'a str {
        resolve(&self.entities, field)
    }

    fn relation<'a>(&'a self, field: &'a str) -> &'a str {
        resolve(&self.relations, field)
    }
}

fn resolve<'a>(map: &'a HashMap<u64, String>, field: &'a str) -> &'a str {
    field
        .parse::<u64>()
        .ok()
        .and_then(|id| map.get(&id))
        .map_or(field, String::as_str)
}

fn read_map(path: &Path) -> Result<HashMap<u64, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line.split_once('\t').and_then(|(name, id)| {
            id.trim()
                .parse::<u64>()
                .ok()
                .map(|id| (id, name.to_owned()))
        });
        match parsed {
            Some((id, name)) => {
                map.insert(id, name);
            }
            None => {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    line: lineno + 1,
                    msg: "expected `name<TAB>id`".into(),
                })
            }
        }
    }
    Ok(map)
}
