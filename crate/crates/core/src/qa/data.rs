//! Cloze datasets: the synthetic fact-retrieval task and TSV ingestion.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::TrainConfig;

pub const PLACEHOLDER: &str = "@blank";
pub const UNKNOWN: &str = "<unk>";

/// Token strings and ids. Ids 0 and 1 are always the placeholder and the
/// unknown token; the entity subset indexes the answer head's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    entities: Vec<usize>,
    #[serde(skip)]
    entity_slot: HashMap<usize, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from `words` (deduplicated, order kept) and
    /// marks `entities` as answer candidates. Entities are added if absent.
    pub fn new<I, J, S, T>(words: I, entities: J) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            entities: Vec::new(),
            entity_slot: HashMap::new(),
        };
        v.intern(PLACEHOLDER);
        v.intern(UNKNOWN);
        for e in entities {
            let e = e.as_ref();
            if e == PLACEHOLDER || e == UNKNOWN {
                return Err(Error::Contract(format!("{e:?} cannot be an entity")));
            }
            let id = v.intern(e);
            if !v.entity_slot.contains_key(&id) {
                v.entity_slot.insert(id, v.entities.len());
                v.entities.push(id);
            }
        }
        for w in words {
            v.intern(w.as_ref());
        }
        Ok(v)
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Restores lookup tables after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.entity_slot = self
            .entities
            .iter()
            .enumerate()
            .map(|(slot, &id)| (id, slot))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn placeholder(&self) -> usize {
        0
    }

    pub fn unknown(&self) -> usize {
        1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the unknown id.
    pub fn id_or_unknown(&self, token: &str) -> usize {
        self.id(token).unwrap_or(1)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn entities(&self) -> &[usize] {
        &self.entities
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Position of an entity id among the answer head's outputs.
    pub fn entity_slot(&self, id: usize) -> Option<usize> {
        self.entity_slot.get(&id).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id_or_unknown(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNKNOWN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One (document, query, answer) triple. Queries of the same document share
/// `doc_id`, which lets training encode each document once.
#[derive(Clone, Debug, PartialEq)]
pub struct ClozeExample {
    pub doc_id: usize,
    pub doc_tokens: Vec<usize>,
    pub query_tokens: Vec<usize>,
    pub answer: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<ClozeExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Consecutive runs of examples sharing a document.
    pub fn documents(&self) -> Vec<&[ClozeExample]> {
        self.examples
            .chunk_by(|a, b| a.doc_id == b.doc_id)
            .collect()
    }

    pub fn doc_ids(&self) -> BTreeSet<usize> {
        self.examples.iter().map(|e| e.doc_id).collect()
    }

    /// Writes the ingestion TSV format.
    pub fn write_tsv(&self, vocab: &Vocabulary, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&vocab.decode(&e.doc_tokens));
            out.push('\t');
            out.push_str(&vocab.decode(&e.query_tokens));
            out.push('\t');
            out.push_str(vocab.token(e.answer).unwrap_or(UNKNOWN));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Synthetic cloze task: each document is a shuffled list of facts
/// `subject relation object` separated by distractor words; each query is
/// one fact with its object replaced by the placeholder. Entities may recur
/// across facts but a `(subject, relation)` pair occurs at most once per
/// document, so a query is answered by matching both. A `mention_rate`
/// fraction of the filler positions holds a stray entity instead of a word.
pub fn generate_synthetic_cloze(cfg: &TrainConfig, seed: u64) -> Result<(Dataset, Dataset, Vocabulary)> {
    if cfg.entities < 4 {
        return Err(Error::InfeasibleConfig(format!(
            "need at least 4 entities, got {}",
            cfg.entities
        )));
    }
    if cfg.facts_per_doc == 0 || cfg.facts_per_doc > cfg.entities * cfg.relations.max(1) {
        return Err(Error::InfeasibleConfig(format!(
            "{} facts need as many distinct (subject, relation) pairs, have {} entities x {} relations",
            cfg.facts_per_doc, cfg.entities, cfg.relations
        )));
    }
    if cfg.doc_len < 3 * cfg.facts_per_doc {
        return Err(Error::InfeasibleConfig(format!(
            "doc_len {} cannot hold {} facts",
            cfg.doc_len, cfg.facts_per_doc
        )));
    }
    if cfg.queries_per_doc == 0 || cfg.queries_per_doc > cfg.facts_per_doc {
        return Err(Error::InfeasibleConfig(format!(
            "{} queries per document need as many facts, have {}",
            cfg.queries_per_doc, cfg.facts_per_doc
        )));
    }
    if cfg.relations == 0 || (cfg.doc_len > 3 * cfg.facts_per_doc && cfg.distractors == 0) {
        return Err(Error::InfeasibleConfig(
            "need at least one relation, and distractor words to pad documents".into(),
        ));
    }

    let entity_names: Vec<String> = (0..cfg.entities).map(|i| format!("ent{i}")).collect();
    let relation_names = (0..cfg.relations).map(|i| format!("rel{i}"));
    let word_names = (0..cfg.distractors).map(|i| format!("w{i}"));
    let vocab = Vocabulary::new(relation_names.chain(word_names), &entity_names)?;
    let entity_ids: Vec<usize> = vocab.entities().to_vec();
    let relation_ids: Vec<usize> = (0..cfg.relations)
        .map(|i| vocab.id(&format!("rel{i}")).expect("interned"))
        .collect();
    let word_ids: Vec<usize> = (0..cfg.distractors)
        .map(|i| vocab.id(&format!("w{i}")).expect("interned"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make_docs = |first_id: usize, count: usize| {
        let mut ds = Dataset::default();
        for doc_id in first_id..first_id + count {
            // (subject, relation) pairs are unique so every query has one answer
            let mut keys: Vec<(usize, usize)> = entity_ids
                .iter()
                .flat_map(|&e| relation_ids.iter().map(move |&r| (e, r)))
                .collect();
            let (picked, _) = keys.partial_shuffle(&mut rng, cfg.facts_per_doc);
            let facts: Vec<[usize; 3]> = picked
                .iter()
                .map(|&(subject, rel)| {
                    let mut object = entity_ids[rng.gen_range(0..entity_ids.len())];
                    while object == subject {
                        object = entity_ids[rng.gen_range(0..entity_ids.len())];
                    }
                    [subject, rel, object]
                })
                .collect();

            // distractor counts in the gaps around the facts
            let fillers = cfg.doc_len - 3 * facts.len();
            let slots = facts.len() + 1;
            let mut gaps = vec![0usize; slots];
            for _ in 0..fillers {
                gaps[rng.gen_range(0..slots)] += 1;
            }
            let mut order: Vec<usize> = (0..facts.len()).collect();
            order.shuffle(&mut rng);
            let mut doc = Vec::with_capacity(cfg.doc_len);
            for (slot, gap) in gaps.iter().enumerate() {
                for _ in 0..*gap {
                    let filler = if rng.gen_bool(cfg.mention_rate) {
                        entity_ids[rng.gen_range(0..entity_ids.len())]
                    } else {
                        word_ids[rng.gen_range(0..word_ids.len())]
                    };
                    doc.push(filler);
                }
                if let Some(&f) = order.get(slot) {
                    doc.extend_from_slice(&facts[f]);
                }
            }

            let mut asked: Vec<usize> = (0..facts.len()).collect();
            asked.shuffle(&mut rng);
            for &f in asked.iter().take(cfg.queries_per_doc) {
                let [subject, relation, object] = facts[f];
                ds.examples.push(ClozeExample {
                    doc_id,
                    doc_tokens: doc.clone(),
                    query_tokens: vec![subject, relation, vocab.placeholder()],
                    answer: object,
                });
            }
        }
        ds
    };
    let train = make_docs(0, cfg.n_docs);
    let valid = make_docs(cfg.n_docs, cfg.valid_docs);
    Ok((train, valid, vocab))
}

struct RawRecord<'a> {
    line: usize,
    doc: &'a str,
    query: &'a str,
    answer: &'a str,
}

fn parse_records<'a>(path: &Path, text: &'a str) -> Result<Vec<RawRecord<'a>>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let answer = fields[2].trim();
        if answer.is_empty() || answer.split_whitespace().count() != 1 {
            return Err(parse_err("answer must be a single token".into()));
        }
        let blanks = fields[1]
            .split_whitespace()
            .filter(|t| *t == PLACEHOLDER)
            .count();
        if blanks != 1 {
            return Err(parse_err(format!(
                "query must contain exactly one {PLACEHOLDER}, found {blanks}"
            )));
        }
        if answer == PLACEHOLDER || answer == UNKNOWN {
            return Err(parse_err(format!("{answer:?} cannot be an answer")));
        }
        records.push(RawRecord {
            line: line_no,
            doc: fields[0],
            query: fields[1],
            answer,
        });
    }
    Ok(records)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Reads `document \t query \t answer` lines and builds a vocabulary from
/// the corpus; every distinct answer token becomes an entity. Consecutive
/// records with identical document text share a `doc_id`.
pub fn ingest_examples(path: &Path) -> Result<(Dataset, Vocabulary)> {
    let text = read_text(path)?;
    let records = parse_records(path, &text)?;
    let entities: BTreeSet<&str> = records.iter().map(|r| r.answer).collect();
    let words = records
        .iter()
        .flat_map(|r| r.doc.split_whitespace().chain(r.query.split_whitespace()));
    let vocab = Vocabulary::new(words, entities)?;
    let ds = tokenize(path, &records, &vocab)?;
    Ok((ds, vocab))
}

/// Like [`ingest_examples`] but against a fixed vocabulary. Unknown words map
/// to the unknown token; records whose answer is not a known entity are
/// skipped with a warning.
pub fn ingest_examples_with_vocab(path: &Path, vocab: &Vocabulary) -> Result<Dataset> {
    let text = read_text(path)?;
    let records = parse_records(path, &text)?;
    tokenize(path, &records, vocab)
}

fn tokenize(path: &Path, records: &[RawRecord<'_>], vocab: &Vocabulary) -> Result<Dataset> {
    let mut ds = Dataset::default();
    let mut doc_id = 0usize;
    let mut prev_doc: Option<&str> = None;
    for r in records {
        let Some(answer) = vocab.id(r.answer).filter(|&id| vocab.entity_slot(id).is_some()) else {
            warn!("{}:{}: answer {:?} is not a known entity, skipped", path.display(), r.line, r.answer);
            continue;
        };
        if prev_doc.is_some_and(|d| d != r.doc) {
            doc_id += 1;
        }
        prev_doc = Some(r.doc);
        let doc_tokens = vocab.encode(r.doc);
        if !doc_tokens.contains(&answer) {
            warn!("{}:{}: answer {:?} does not occur in the document", path.display(), r.line, r.answer);
        }
        ds.examples.push(ClozeExample {
            doc_id,
            doc_tokens,
            query_tokens: vocab.encode(r.query),
            answer,
        });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            n_docs: 1,
            valid_docs: 0,
            entities: 4,
            facts_per_doc: 1,
            queries_per_doc: 1,
            doc_len: 3,
            distractors: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_fact_document() {
        let (train, valid, vocab) = generate_synthetic_cloze(&tiny_cfg(), 1).unwrap();
        assert!(valid.is_empty());
        assert_eq!(train.len(), 1);
        let ex = &train.examples[0];
        assert_eq!(ex.doc_tokens.len(), 3);
        // query is the fact with its object masked
        assert_eq!(&ex.query_tokens[..2], &ex.doc_tokens[..2]);
        assert_eq!(ex.query_tokens[2], vocab.placeholder());
        assert_eq!(ex.answer, ex.doc_tokens[2]);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = TrainConfig::default();
        let a = generate_synthetic_cloze(&cfg, 7).unwrap();
        let b = generate_synthetic_cloze(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_cloze(&cfg, 8).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn answer_always_in_document_and_unique() {
        let cfg = TrainConfig {
            n_docs: 2500,
            valid_docs: 0,
            ..TrainConfig::default()
        };
        let (train, _, vocab) = generate_synthetic_cloze(&cfg, 3).unwrap();
        assert!(train.len() >= 10_000);
        for ex in &train.examples {
            assert!(ex.doc_tokens.contains(&ex.answer));
            assert!(vocab.entity_slot(ex.answer).is_some());
            assert_eq!(ex.doc_tokens.len(), cfg.doc_len);
            let blanks = ex.query_tokens.iter().filter(|&&t| t == vocab.placeholder()).count();
            assert_eq!(blanks, 1);
            // exactly one occurrence of "subject relation" in the document
            let key = &ex.query_tokens[..2];
            let hits: Vec<usize> = (0..ex.doc_tokens.len() - 2)
                .filter(|&i| &ex.doc_tokens[i..i + 2] == key)
                .collect();
            assert_eq!(hits.len(), 1);
            assert_eq!(ex.doc_tokens[hits[0] + 2], ex.answer);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let (train, valid, _) = generate_synthetic_cloze(&TrainConfig::default(), 2).unwrap();
        assert!(train.doc_ids().is_disjoint(&valid.doc_ids()));
        assert_eq!(train.documents().len(), TrainConfig::default().n_docs);
    }

    #[test]
    fn infeasible_configs() {
        let bad = [
            TrainConfig { entities: 3, ..TrainConfig::default() },
            TrainConfig { entities: 4, relations: 1, facts_per_doc: 5, queries_per_doc: 4, ..TrainConfig::default() },
            TrainConfig { doc_len: 5, facts_per_doc: 2, queries_per_doc: 2, ..TrainConfig::default() },
            TrainConfig { queries_per_doc: 9, facts_per_doc: 2, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(generate_synthetic_cloze(&cfg, 0), Err(Error::InfeasibleConfig(_))));
        }
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_empty_file() {
        let f = write("");
        let (ds, vocab) = ingest_examples(f.path()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(vocab.entity_count(), 0);
    }

    #[test]
    fn ingest_one_record() {
        let f = write("alice met bob in paris\talice met @blank\tbob\n");
        let (ds, vocab) = ingest_examples(f.path()).unwrap();
        assert_eq!(ds.len(), 1);
        let ex = &ds.examples[0];
        assert_eq!(vocab.decode(&ex.doc_tokens), "alice met bob in paris");
        assert_eq!(vocab.decode(&ex.query_tokens), "alice met @blank");
        assert_eq!(vocab.token(ex.answer), Some("bob"));
        assert_eq!(vocab.entity_count(), 1);
    }

    #[test]
    fn ingest_rejects_bad_records_with_line_numbers() {
        let f = write("a b\ta @blank\tb\nx y\t@blank @blank\ty\n");
        match ingest_examples(f.path()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("exactly one"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let f = write("a b\tno blank here\tb\n");
        assert!(matches!(ingest_examples(f.path()), Err(Error::Parse { line: 1, .. })));
        let f = write("a b\ta @blank\n");
        assert!(matches!(ingest_examples(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ingest_keeps_answers_missing_from_document() {
        let f = write("a b c\ta @blank\tz\na b c\tb @blank\tc\nd e\td @blank\te\n");
        let (ds, _) = ingest_examples(f.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.documents().len(), 2);
    }

    #[test]
    fn tsv_round_trip() {
        let cfg = TrainConfig { n_docs: 5, valid_docs: 0, ..TrainConfig::default() };
        let (train, _, vocab) = generate_synthetic_cloze(&cfg, 4).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        train.write_tsv(&vocab, f.path()).unwrap();
        let back = ingest_examples_with_vocab(f.path(), &vocab).unwrap();
        assert_eq!(back, train);
    }
}
