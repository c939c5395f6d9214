//! On-disk store of document sketches with constant-cost lookups.
//!
//! Each document becomes one `LATC` file:
//!
//! ```text
//! offset  size     field
//! 0       4        magic "LATC"
//! 4       4        format version (u32 LE)
//! 8       4        k (u32 LE)
//! 12      4        n, source length (u32 LE, informational)
//! 16      1        flags (bit 0: k > n)
//! 17      8k²      C, row-major f64 LE
//! 17+8k²  4        CRC32 of everything before it (u32 LE)
//! ```
//!
//! The store directory also holds `index.tsv` (`doc_id`, relative path, `n`,
//! `k` per line) and `encoder.json` with the vocabulary and both encoders.

use std::collections::BTreeMap;
use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use lru::LruCache;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{linear_attention, Sketch, SketchBuilder};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::qa::{Checkpoint, Vocabulary};
use crate::rnn::Encoder;

pub const MAGIC: [u8; 4] = *b"LATC";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 17;
pub const CRC_BYTES: usize = 4;
/// Set when the sketch is larger than the hidden states it summarizes.
pub const FLAG_K_EXCEEDS_N: u8 = 1;
pub const INDEX_FILE: &str = "index.tsv";
pub const ENCODER_FILE: &str = "encoder.json";
pub const SKETCH_EXTENSION: &str = "latc";
pub const DEFAULT_CACHE_CAPACITY: usize = 1024;

/// Size in bytes of one sketch file.
pub fn sketch_file_bytes(k: usize) -> u64 {
    (HEADER_BYTES + 8 * k * k + CRC_BYTES) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SketchHeader {
    pub version: u32,
    pub k: u32,
    pub n: u32,
    pub flags: u8,
}

fn to_u32(what: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(format!("{what} = {v} does not fit the file format")))
}

/// Serializes a sketch summarizing `n` states.
pub fn encode_sketch(c: &Sketch, n: usize) -> Result<Vec<u8>> {
    let k = c.k();
    if k == 0 {
        return Err(Error::Contract("sketch files need k >= 1".into()));
    }
    let mut out = Vec::with_capacity(sketch_file_bytes(k) as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32("k", k)?.to_le_bytes());
    out.extend_from_slice(&to_u32("n", n)?.to_le_bytes());
    out.push(if k > n { FLAG_K_EXCEEDS_N } else { 0 });
    for v in c.matrix().as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses a sketch file image. The CRC is checked before anything else, so
/// any corrupted byte, header included, reports [`Error::CrcMismatch`].
pub fn decode_sketch(bytes: &[u8], path: &Path) -> Result<(SketchHeader, Sketch)> {
    let truncated = |msg: String| Error::Truncated {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER_BYTES + CRC_BYTES {
        return Err(truncated(format!("{} bytes is shorter than header and checksum", bytes.len())));
    }
    let body = bytes.len() - CRC_BYTES;
    let stored = le_u32(bytes, body);
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(Error::CrcMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
        });
    }
    let header = SketchHeader {
        version: le_u32(bytes, 4),
        k: le_u32(bytes, 8),
        n: le_u32(bytes, 12),
        flags: bytes[16],
    };
    if header.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version: header.version,
        });
    }
    let k = header.k as usize;
    if k == 0 {
        return Err(truncated("k is zero".into()));
    }
    if bytes.len() as u64 != sketch_file_bytes(k) {
        return Err(truncated(format!(
            "expected {} bytes for k = {k}, found {}",
            sketch_file_bytes(k),
            bytes.len()
        )));
    }
    let data = bytes[HEADER_BYTES..body]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let c = Matrix::from_vec(k, k, data)?;
    Ok((header, Sketch::from_matrix(c, header.n as usize)?))
}

/// File name for a document id: ASCII letters, digits, `-` and `_` are kept,
/// every other byte becomes `%XX`, so distinct ids never collide.
pub fn sketch_file_name(doc_id: &str) -> String {
    let mut name = String::with_capacity(doc_id.len() + 5);
    for b in doc_id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' {
            name.push(b as char);
        } else {
            name.push_str(&format!("%{b:02X}"));
        }
    }
    name.push('.');
    name.push_str(SKETCH_EXTENSION);
    name
}

/// Writes `c` for `doc_id` into `dir` and returns the file path.
pub fn save_sketch(c: &Sketch, n: usize, doc_id: &str, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(sketch_file_name(doc_id));
    let bytes = encode_sketch(c, n)?;
    fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

pub fn load_sketch(path: &Path) -> Result<Sketch> {
    Ok(load_sketch_with_header(path)?.1)
}

pub fn load_sketch_with_header(path: &Path) -> Result<(SketchHeader, Sketch)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_sketch(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    /// Relative to the store directory.
    pub path: PathBuf,
    pub n: usize,
    pub k: usize,
}

/// Document id to sketch file mapping, persisted as `index.tsv`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreIndex {
    root: PathBuf,
    entries: BTreeMap<String, IndexEntry>,
}

impl StoreIndex {
    pub fn new(root: &Path) -> Self {
        StoreIndex {
            root: root.to_path_buf(),
            entries: BTreeMap::new(),
        }
    }

    /// Reads `index.tsv` under `root` and checks every referenced file exists.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut index = StoreIndex::new(root);
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [doc_id, rel, n, k] = fields[..] else {
                return Err(err(format!("expected 4 tab-separated fields, got {}", fields.len())));
            };
            let n = n.parse().map_err(|e| err(format!("bad n: {e}")))?;
            let k = k.parse().map_err(|e| err(format!("bad k: {e}")))?;
            let entry = IndexEntry {
                path: PathBuf::from(rel),
                n,
                k,
            };
            if !root.join(&entry.path).is_file() {
                return Err(err(format!("sketch file {rel} is missing")));
            }
            index.insert(doc_id, entry).map_err(|e| err(e.to_string()))?;
        }
        Ok(index)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn insert(&mut self, doc_id: &str, entry: IndexEntry) -> Result<()> {
        if self.entries.contains_key(doc_id) {
            return Err(Error::Contract(format!("duplicate document id {doc_id:?}")));
        }
        if doc_id.contains(['\t', '\n', '\r']) {
            return Err(Error::Contract(format!("document id {doc_id:?} contains a tab or newline")));
        }
        self.entries.insert(doc_id.to_string(), entry);
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<&IndexEntry> {
        self.entries.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &IndexEntry)> {
        self.entries.iter().map(|(id, e)| (id.as_str(), e))
    }

    pub fn sketch_path(&self, doc_id: &str) -> Result<PathBuf> {
        let entry = self.get(doc_id).ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))?;
        Ok(self.root.join(&entry.path))
    }

    pub fn write(&self) -> Result<()> {
        let mut out = String::new();
        for (id, e) in &self.entries {
            out.push_str(&format!("{id}\t{}\t{}\t{}\n", e.path.display(), e.n, e.k));
        }
        let path = self.root.join(INDEX_FILE);
        fs::write(&path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Total bytes of all sketch files.
    pub fn sketch_bytes(&self) -> Result<u64> {
        self.entries
            .values()
            .map(|e| {
                let path = self.root.join(&e.path);
                fs::metadata(&path)
                    .map(|m| m.len())
                    .map_err(|err| Error::io(format!("inspecting {}", path.display()), err))
            })
            .sum()
    }
}

/// Vocabulary plus document and query encoders used to build and query a store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreEncoder {
    pub vocab: Vocabulary,
    pub document: Encoder,
    pub query: Encoder,
}

impl StoreEncoder {
    pub fn random(vocab: Vocabulary, d: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let document = Encoder::random(vocab.len(), d, k, &mut rng);
        let query = Encoder::random(vocab.len(), d, k, &mut rng);
        StoreEncoder { vocab, document, query }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        StoreEncoder {
            vocab: ck.vocab,
            document: ck.params.doc,
            query: ck.params.query,
        }
    }

    pub fn k(&self) -> usize {
        self.document.hidden_dim()
    }

    /// Streams the document through the encoder into a sketch; hidden
    /// states are never collected.
    pub fn sketch_document(&self, tokens: &[&str]) -> Result<Sketch> {
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id_or_unknown(t)).collect();
        let mut builder = SketchBuilder::new(self.k());
        self.document.for_each_state(&ids, |h| builder.push(h))?;
        Ok(builder.finish())
    }

    pub fn encode_query(&self, tokens: &[&str]) -> Result<Vector> {
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id_or_unknown(t)).collect();
        Ok(self.query.encode_query(&ids)?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut enc: StoreEncoder = serde_json::from_str(&text)?;
        enc.vocab.rebuild_index();
        Ok(enc)
    }
}

/// Regular files directly under `dir`, sorted by name.
fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let listing = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut files = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let path = entry.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Builds a vocabulary of every whitespace token in the corpus files.
pub fn corpus_vocabulary(dir: &Path) -> Result<Vocabulary> {
    let mut words = Vec::new();
    for path in corpus_files(dir)? {
        if let Ok(text) = fs::read_to_string(&path) {
            words.extend(text.split_whitespace().map(str::to_string));
        }
    }
    Vocabulary::new(words, std::iter::empty::<&str>())
}

/// Sketches every file in `corpus` (document id = file stem) into `store`,
/// writing the index and the encoder alongside.
pub fn encode_corpus(corpus: &Path, encoder: &StoreEncoder, store: &Path) -> Result<StoreIndex> {
    fs::create_dir_all(store).map_err(|e| Error::io(format!("creating {}", store.display()), e))?;
    let mut index = StoreIndex::new(store);
    let k = encoder.k();
    for path in corpus_files(corpus)? {
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping unreadable {}: {e}", path.display());
                continue;
            }
        };
        let doc_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let n = tokens.len();
        if n == 0 {
            log::warn!("{}: empty document, storing the zero sketch", path.display());
        }
        if k > n {
            log::warn!("{}: k = {k} exceeds n = {n}; the hidden states would be smaller than the sketch", path.display());
        }
        let c = encoder.sketch_document(&tokens)?;
        let file = save_sketch(&c, n, &doc_id, store)?;
        let rel = file.strip_prefix(store).unwrap_or(&file).to_path_buf();
        index.insert(&doc_id, IndexEntry { path: rel, n, k })?;
    }
    index.write()?;
    encoder.save(&store.join(ENCODER_FILE))?;
    Ok(index)
}

/// `R = C q` for a stored document, loading its sketch from disk.
pub fn query_store(index: &StoreIndex, doc_id: &str, query: &[&str], encoder: &StoreEncoder) -> Result<Vector> {
    let q = encoder.encode_query(query)?;
    let c = load_sketch(&index.sketch_path(doc_id)?)?;
    linear_attention(&c, &q)
}

/// An opened store with a least-recently-used cache of loaded sketches.
pub struct SketchStore {
    index: StoreIndex,
    encoder: StoreEncoder,
    cache: LruCache<String, Sketch>,
}

impl SketchStore {
    pub fn open(dir: &Path) -> Result<Self> {
        Self::open_with_capacity(dir, DEFAULT_CACHE_CAPACITY)
    }

    pub fn open_with_capacity(dir: &Path, capacity: usize) -> Result<Self> {
        let capacity = NonZeroUsize::new(capacity)
            .ok_or_else(|| Error::Contract("cache capacity must be positive".into()))?;
        Ok(SketchStore {
            index: StoreIndex::open(dir)?,
            encoder: StoreEncoder::load(&dir.join(ENCODER_FILE))?,
            cache: LruCache::new(capacity),
        })
    }

    pub fn index(&self) -> &StoreIndex {
        &self.index
    }

    pub fn encoder(&self) -> &StoreEncoder {
        &self.encoder
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    pub fn sketch(&mut self, doc_id: &str) -> Result<&Sketch> {
        if !self.cache.contains(doc_id) {
            let c = load_sketch(&self.index.sketch_path(doc_id)?)?;
            self.cache.put(doc_id.to_string(), c);
        }
        Ok(self.cache.get(doc_id).expect("just inserted"))
    }

    /// Lookup with an already encoded query.
    pub fn lookup(&mut self, doc_id: &str, q: &Vector) -> Result<Vector> {
        linear_attention(self.sketch(doc_id)?, q)
    }

    pub fn query(&mut self, doc_id: &str, query: &[&str]) -> Result<Vector> {
        if self.index.get(doc_id).is_none() {
            return Err(Error::UnknownDocument(doc_id.to_string()));
        }
        let q = self.encoder.encode_query(query)?;
        self.lookup(doc_id, &q)
    }
}
