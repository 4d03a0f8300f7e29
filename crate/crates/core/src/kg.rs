//! Triple files, vocabularies and multi-label pair targets.

use std::collections::hash_map::Entry;
use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl RawTriple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        RawTriple {
            subject: subject.to_owned(),
            relation: relation.to_owned(),
            object: object.to_owned(),
        }
    }
}

/// An indexed fact `(s, p, o)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub s: usize,
    pub p: usize,
    pub o: usize,
}

impl Triple {
    pub fn new(s: usize, p: usize, o: usize) -> Self {
        Triple { s, p, o }
    }
}

/// Reads tab-separated `subject<TAB>relation<TAB>object` lines. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn parse_triples<R: BufRead>(source: R) -> Result<Vec<RawTriple>> {
    let mut triples = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("field {} is empty", pos + 1),
            });
        }
        triples.push(RawTriple::new(fields[0], fields[1], fields[2]));
    }
    Ok(triples)
}

pub fn read_triples_file(path: &Path) -> Result<Vec<RawTriple>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_triples(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Bidirectional label/index maps for entities and relations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entity_to_id: HashMap<String, usize>,
    id_to_entity: Vec<String>,
    relation_to_id: HashMap<String, usize>,
    id_to_relation: Vec<String>,
}

fn intern(map: &mut HashMap<String, usize>, list: &mut Vec<String>, label: &str) -> usize {
    match map.entry(label.to_owned()) {
        Entry::Occupied(e) => *e.get(),
        Entry::Vacant(e) => {
            let id = list.len();
            list.push(label.to_owned());
            e.insert(id);
            id
        }
    }
}

impl Vocabulary {
    /// Assigns indices in first-appearance order (subject, then relation, then
    /// object of each triple in turn).
    pub fn build(train: &[RawTriple]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let mut vocab = Vocabulary::default();
        for t in train {
            intern(&mut vocab.entity_to_id, &mut vocab.id_to_entity, &t.subject);
            intern(&mut vocab.relation_to_id, &mut vocab.id_to_relation, &t.relation);
            intern(&mut vocab.entity_to_id, &mut vocab.id_to_entity, &t.object);
        }
        Ok(vocab)
    }

    /// Rebuilds a vocabulary from index-ordered label lists.
    pub fn from_labels(entities: Vec<String>, relations: Vec<String>) -> Result<Self> {
        fn index(labels: &[String], what: &str) -> Result<HashMap<String, usize>> {
            let mut map = HashMap::with_capacity(labels.len());
            for (i, label) in labels.iter().enumerate() {
                if label.trim().is_empty() {
                    return Err(Error::Config(format!("empty {what} label at index {i}")));
                }
                if map.insert(label.clone(), i).is_some() {
                    return Err(Error::Config(format!("duplicate {what} label {label:?}")));
                }
            }
            Ok(map)
        }
        if entities.is_empty() || relations.is_empty() {
            return Err(Error::Empty("vocabulary"));
        }
        Ok(Vocabulary {
            entity_to_id: index(&entities, "entity")?,
            relation_to_id: index(&relations, "relation")?,
            id_to_entity: entities,
            id_to_relation: relations,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.id_to_entity.len()
    }

    pub fn num_relations(&self) -> usize {
        self.id_to_relation.len()
    }

    pub fn entity_id(&self, label: &str) -> Option<usize> {
        self.entity_to_id.get(label).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<usize> {
        self.relation_to_id.get(label).copied()
    }

    pub fn entity_label(&self, id: usize) -> Option<&str> {
        self.id_to_entity.get(id).map(String::as_str)
    }

    pub fn relation_label(&self, id: usize) -> Option<&str> {
        self.id_to_relation.get(id).map(String::as_str)
    }

    pub fn entities(&self) -> &[String] {
        &self.id_to_entity
    }

    pub fn relations(&self) -> &[String] {
        &self.id_to_relation
    }

    /// SHA-256 over both label lists; stored in checkpoints to detect a
    /// checkpoint being paired with the wrong dataset.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (tag, labels) in [(b'E', &self.id_to_entity), (b'R', &self.id_to_relation)] {
            hasher.update([tag]);
            hasher.update((labels.len() as u64).to_le_bytes());
            for label in labels {
                hasher.update((label.len() as u64).to_le_bytes());
                hasher.update(label.as_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Writes `entities.txt` and `relations.txt`: one label per line, line number = index.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        write_lines(&dir.join("entities.txt"), &self.id_to_entity)?;
        write_lines(&dir.join("relations.txt"), &self.id_to_relation)
    }

    pub fn read_from_dir(dir: &Path) -> Result<Self> {
        let entities = read_lines(&dir.join("entities.txt"))?;
        let relations = read_lines(&dir.join("relations.txt"))?;
        Self::from_labels(entities, relations)
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for line in lines {
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

/// What to do with valid/test triples mentioning labels never seen in training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    Error,
    #[default]
    Skip,
}

/// Maps labels to indices. Returns the indexed triples and how many were
/// dropped under [`OovPolicy::Skip`].
pub fn index_triples(
    raw: &[RawTriple],
    vocab: &Vocabulary,
    policy: OovPolicy,
    split: &str,
) -> Result<(Vec<Triple>, usize)> {
    let mut out = Vec::with_capacity(raw.len());
    let mut skipped = 0;
    for t in raw {
        let s = vocab.entity_id(&t.subject);
        let p = vocab.relation_id(&t.relation);
        let o = vocab.entity_id(&t.object);
        match (s, p, o) {
            (Some(s), Some(p), Some(o)) => out.push(Triple { s, p, o }),
            _ => match policy {
                OovPolicy::Skip => skipped += 1,
                OovPolicy::Error => {
                    let label = if s.is_none() {
                        &t.subject
                    } else if p.is_none() {
                        &t.relation
                    } else {
                        &t.object
                    };
                    return Err(Error::OutOfVocabulary {
                        label: label.clone(),
                        split: split.to_owned(),
                    });
                }
            },
        }
    }
    Ok((out, skipped))
}

/// Train/valid/test triples indexed against a train-only vocabulary.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub vocab: Vocabulary,
    pub valid_skipped: usize,
    pub test_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl DatasetSplits {
    pub fn from_raw(
        train: &[RawTriple],
        valid: &[RawTriple],
        test: &[RawTriple],
        policy: OovPolicy,
    ) -> Result<Self> {
        let vocab = Vocabulary::build(train)?;
        let (train, _) = index_triples(train, &vocab, OovPolicy::Error, "train")?;
        let (valid, valid_skipped) = index_triples(valid, &vocab, policy, "valid")?;
        let (test, test_skipped) = index_triples(test, &vocab, policy, "test")?;
        for (name, skipped) in [("valid", valid_skipped), ("test", test_skipped)] {
            if skipped > 0 {
                log::warn!("skipped {skipped} {name} triples with labels unseen in training");
            }
        }
        Ok(DatasetSplits {
            train,
            valid,
            test,
            vocab,
            valid_skipped,
            test_skipped,
        })
    }

    /// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`.
    pub fn load_dir(dir: &Path, policy: OovPolicy) -> Result<Self> {
        let train = read_triples_file(&dir.join("train.txt"))?;
        let valid = read_triples_file(&dir.join("valid.txt"))?;
        let test = read_triples_file(&dir.join("test.txt"))?;
        Self::from_raw(&train, &valid, &test, policy)
    }

    /// The evaluation triples of a split plus the count dropped as out-of-vocabulary.
    pub fn split(&self, which: Split) -> (&[Triple], usize) {
        match which {
            Split::Valid => (&self.valid, self.valid_skipped),
            Split::Test => (&self.test, self.test_skipped),
        }
    }

    pub fn stats(&self) -> DatasetStats {
        let pairs = PairLabelIndex::build(&self.train, self.vocab.num_relations())
            .expect("train triples are indexed against their own vocabulary");
        DatasetStats {
            num_entities: self.vocab.num_entities(),
            num_relations: self.vocab.num_relations(),
            train_triples: self.train.len(),
            valid_triples: self.valid.len(),
            test_triples: self.test.len(),
            valid_skipped_oov: self.valid_skipped,
            test_skipped_oov: self.test_skipped,
            train_pairs: pairs.len(),
            multi_relation_pairs: pairs.count_multilabel_pairs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub num_entities: usize,
    pub num_relations: usize,
    pub train_triples: usize,
    pub valid_triples: usize,
    pub test_triples: usize,
    pub valid_skipped_oov: usize,
    pub test_skipped_oov: usize,
    pub train_pairs: usize,
    pub multi_relation_pairs: usize,
}

/// Distinct `(s, o)` pairs of the training graph with the set of relations
/// linking each; these are the multi-label targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairLabelIndex {
    pairs: Vec<(usize, usize)>,
    labels: Vec<Vec<usize>>,
    num_relations: usize,
}

impl PairLabelIndex {
    /// Pairs are kept in first-appearance order; label sets are sorted and
    /// deduplicated.
    pub fn build(train: &[Triple], num_relations: usize) -> Result<Self> {
        let mut position: HashMap<(usize, usize), usize> = HashMap::new();
        let mut pairs = Vec::new();
        let mut sets: Vec<BTreeSet<usize>> = Vec::new();
        for t in train {
            if t.p >= num_relations {
                return Err(Error::IndexOutOfRange {
                    what: "relation",
                    index: t.p,
                    size: num_relations,
                });
            }
            let slot = *position.entry((t.s, t.o)).or_insert_with(|| {
                pairs.push((t.s, t.o));
                sets.push(BTreeSet::new());
                pairs.len() - 1
            });
            sets[slot].insert(t.p);
        }
        Ok(PairLabelIndex {
            pairs,
            labels: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            num_relations,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn pair(&self, i: usize) -> (usize, usize) {
        self.pairs[i]
    }

    pub fn labels(&self, i: usize) -> &[usize] {
        &self.labels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &[usize])> + '_ {
        self.pairs
            .iter()
            .copied()
            .zip(self.labels.iter().map(Vec::as_slice))
    }

    pub fn count_multilabel_pairs(&self) -> usize {
        self.labels.iter().filter(|l| l.len() >= 2).count()
    }

    /// Expands back into one triple per (pair, label).
    pub fn triples(&self) -> Vec<Triple> {
        self.iter()
            .flat_map(|((s, o), labels)| labels.iter().map(move |&p| Triple { s, p, o }))
            .collect()
    }
}

pub fn build_pair_labels(train: &[Triple], num_relations: usize) -> Result<PairLabelIndex> {
    PairLabelIndex::build(train, num_relations)
}

pub fn count_multilabel_pairs(index: &PairLabelIndex) -> usize {
    index.count_multilabel_pairs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn raw(list: &[(&str, &str, &str)]) -> Vec<RawTriple> {
        list.iter().map(|(s, p, o)| RawTriple::new(s, p, o)).collect()
    }

    #[test]
    fn parses_single_line() {
        let got = parse_triples("a\tr1\tb\n".as_bytes()).unwrap();
        assert_eq!(got, raw(&[("a", "r1", "b")]));
    }

    #[test]
    fn empty_stream_is_empty() {
        assert!(parse_triples("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn blank_lines_and_crlf() {
        let got = parse_triples("\na\tr\tb\r\n   \nc\tr\td\n".as_bytes()).unwrap();
        assert_eq!(got, raw(&[("a", "r", "b"), ("c", "r", "d")]));
    }

    #[test]
    fn field_count_error_carries_line() {
        match parse_triples("a\tr1\n".as_bytes()) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_triples("a\tr\tb\nx\ty\tz\tw\n".as_bytes()) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_field_is_error() {
        assert!(matches!(
            parse_triples("a\t \tb\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn vocabulary_dedups() {
        let v = Vocabulary::build(&raw(&[("a", "r", "b"), ("b", "r", "a")])).unwrap();
        assert_eq!(v.num_entities(), 2);
        assert_eq!(v.num_relations(), 1);
        assert_eq!(v.entity_id("a"), Some(0));
        assert_eq!(v.entity_id("b"), Some(1));
        assert_eq!(v.entity_label(1), Some("b"));
    }

    #[test]
    fn empty_train_rejected() {
        assert!(matches!(Vocabulary::build(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn index_examples() {
        let train = raw(&[("a", "r", "b")]);
        let v = Vocabulary::build(&train).unwrap();
        let (t, skipped) = index_triples(&train, &v, OovPolicy::Error, "train").unwrap();
        assert_eq!(t, vec![Triple::new(0, 0, 1)]);
        assert_eq!(skipped, 0);

        let oov = raw(&[("a", "r", "z")]);
        let (t, skipped) = index_triples(&oov, &v, OovPolicy::Skip, "test").unwrap();
        assert!(t.is_empty());
        assert_eq!(skipped, 1);

        match index_triples(&oov, &v, OovPolicy::Error, "test") {
            Err(Error::OutOfVocabulary { label, split }) => {
                assert_eq!(label, "z");
                assert_eq!(split, "test");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pair_labels_examples() {
        let idx = build_pair_labels(&[Triple::new(0, 0, 1), Triple::new(0, 1, 1)], 2).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.pair(0), (0, 1));
        assert_eq!(idx.labels(0), &[0, 1]);
        assert_eq!(count_multilabel_pairs(&idx), 1);

        let idx = build_pair_labels(&[Triple::new(0, 0, 1), Triple::new(0, 0, 1)], 1).unwrap();
        assert_eq!(idx.labels(0), &[0]);
        assert_eq!(count_multilabel_pairs(&idx), 0);
    }

    #[test]
    fn pair_direction_matters() {
        let idx = build_pair_labels(&[Triple::new(0, 0, 1), Triple::new(1, 0, 0)], 1).unwrap();
        assert_eq!(idx.len(), 2);
    }

    #[test]
    fn vocab_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(&raw(&[("a", "r", "b"), ("c", "q", "a")])).unwrap();
        v.write_to_dir(dir.path()).unwrap();
        let back = Vocabulary::read_from_dir(dir.path()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
    }

    fn triple_list() -> impl Strategy<Value = Vec<Triple>> {
        prop::collection::vec((0usize..6, 0usize..4, 0usize..6), 0..60)
            .prop_map(|v| v.into_iter().map(|(s, p, o)| Triple::new(s, p, o)).collect())
    }

    proptest! {
        #[test]
        fn pair_labels_round_trip(train in triple_list()) {
            let idx = PairLabelIndex::build(&train, 4).unwrap();
            let expanded: HashSet<Triple> = idx.triples().into_iter().collect();
            let deduped: HashSet<Triple> = train.iter().copied().collect();
            prop_assert_eq!(expanded.len(), idx.triples().len());
            prop_assert_eq!(expanded, deduped);
            let distinct: HashSet<(usize, usize)> = idx.iter().map(|(p, _)| p).collect();
            prop_assert_eq!(distinct.len(), idx.len());
            prop_assert!(idx.iter().all(|(_, l)| !l.is_empty()));
        }

        #[test]
        fn vocabulary_is_deterministic(
            labels in prop::collection::vec(("[a-e]", "[pq]", "[a-e]"), 1..30)
        ) {
            let train: Vec<RawTriple> =
                labels.iter().map(|(s, p, o)| RawTriple::new(s, p, o)).collect();
            let a = Vocabulary::build(&train).unwrap();
            let b = Vocabulary::build(&train).unwrap();
            prop_assert_eq!(&a, &b);
            for (i, e) in a.entities().iter().enumerate() {
                prop_assert_eq!(a.entity_id(e), Some(i));
            }
            for (i, r) in a.relations().iter().enumerate() {
                prop_assert_eq!(a.relation_id(r), Some(i));
            }
        }

        #[test]
        fn skip_policy_accounting(
            train in prop::collection::vec(("[a-c]", "[pq]", "[a-c]"), 1..10),
            other in prop::collection::vec(("[a-f]", "[p-s]", "[a-f]"), 0..30),
        ) {
            let train: Vec<RawTriple> =
                train.iter().map(|(s, p, o)| RawTriple::new(s, p, o)).collect();
            let other: Vec<RawTriple> =
                other.iter().map(|(s, p, o)| RawTriple::new(s, p, o)).collect();
            let vocab = Vocabulary::build(&train).unwrap();
            let (kept, skipped) = index_triples(&other, &vocab, OovPolicy::Skip, "test").unwrap();
            prop_assert_eq!(skipped, other.len() - kept.len());
        }
    }
}
