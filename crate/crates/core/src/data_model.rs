//! Datasets of query/item embeddings with graded labels, their binary file
//! formats, and seeded mini-batching.
//!
//! Embedding file (little-endian):
//! `"MMRE" | version u32 = 1 | dim u32 | query count u64 | item count u64`,
//! then per query `id | dim × f32`, then per item
//! `id | dim × f32 (text) | dim × f32 (image) | category tag`.
//! Strings are u16-length-prefixed UTF-8.
//!
//! Pairs file: `"MMPR" | version u32 = 1 | pair count u64`, then per pair
//! `query id | item id | y_eng u8 | y_rel u8`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config, format, Error, Result};
use crate::numerics::EmbeddingVector;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MMRE";
pub const PAIRS_MAGIC: &[u8; 4] = b"MMPR";
pub const FORMAT_VERSION: u32 = 1;

/// Three-level graded label. The discriminant doubles as the nDCG gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    None = 0,
    Low = 1,
    High = 2,
}

impl Label {
    pub fn gain(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Option<Label> {
        match b {
            0 => Some(Label::None),
            1 => Some(Label::Low),
            2 => Some(Label::High),
            _ => None,
        }
    }

    pub const ALL: [Label; 3] = [Label::None, Label::Low, Label::High];
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item_id: String,
    pub text_embedding: EmbeddingVector,
    pub image_embedding: EmbeddingVector,
    pub category_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub query_id: String,
    pub item_id: String,
    pub y_eng: Label,
    pub y_rel: Label,
}

/// Validated, immutable dataset. Pair ids are resolved to record indices at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    queries: Vec<QueryRecord>,
    items: Vec<ItemRecord>,
    pairs: Vec<LabeledPair>,
    resolved: Vec<(usize, usize)>,
    labeled: HashSet<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        dim: usize,
        queries: Vec<QueryRecord>,
        items: Vec<ItemRecord>,
        pairs: Vec<LabeledPair>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Integrity("dataset dimension must be positive".into()));
        }
        let mut query_index = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if q.embedding.dim() != dim {
                return Err(Error::Integrity(format!(
                    "query {} has dim {} (dataset dim {dim})",
                    q.query_id,
                    q.embedding.dim()
                )));
            }
            if query_index.insert(q.query_id.as_str(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate query id {}", q.query_id)));
            }
        }
        let mut item_index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if it.text_embedding.dim() != dim || it.image_embedding.dim() != dim {
                return Err(Error::Integrity(format!("item {} has mismatched dim", it.item_id)));
            }
            if item_index.insert(it.item_id.as_str(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate item id {}", it.item_id)));
            }
        }
        let mut resolved = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let qi = *query_index
                .get(p.query_id.as_str())
                .ok_or_else(|| Error::Integrity(format!("pair references unknown query {}", p.query_id)))?;
            let xi = *item_index
                .get(p.item_id.as_str())
                .ok_or_else(|| Error::Integrity(format!("pair references unknown item {}", p.item_id)))?;
            resolved.push((qi, xi));
        }
        let labeled = resolved.iter().copied().collect();
        Ok(Dataset { dim, queries, items, pairs, resolved, labeled })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn pairs(&self) -> &[LabeledPair] {
        &self.pairs
    }

    /// `(query index, item index)` for pair `i`.
    pub fn pair_indices(&self, i: usize) -> (usize, usize) {
        self.resolved[i]
    }

    /// Whether `(query index, item index)` carries a label.
    pub fn is_labeled(&self, query: usize, item: usize) -> bool {
        self.labeled.contains(&(query, item))
    }

    /// Same dataset with its query, item and pair lists permuted; used to
    /// check order invariance of downstream computations.
    pub fn reordered(&self, query_order: &[usize], item_order: &[usize], pair_order: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.dim,
            query_order.iter().map(|&i| self.queries[i].clone()).collect(),
            item_order.iter().map(|&i| self.items[i].clone()).collect(),
            pair_order.iter().map(|&i| self.pairs[i].clone()).collect(),
        )
    }

    /// Splits by query: every `test_every`-th query (by position, starting
    /// with the first) goes to the second dataset together with its pairs.
    /// Each side keeps the items its own pairs reference.
    pub fn split_queries(&self, test_every: usize) -> Result<(Dataset, Dataset)> {
        if test_every < 2 {
            return Err(config(format!("test_every must be at least 2 (got {test_every})")));
        }
        let is_test = |q: usize| q.is_multiple_of(test_every);
        let side = |test: bool| -> Result<Dataset> {
            let queries: Vec<usize> = (0..self.queries.len()).filter(|&q| is_test(q) == test).collect();
            let pairs: Vec<usize> = (0..self.pairs.len()).filter(|&p| is_test(self.resolved[p].0) == test).collect();
            let used: HashSet<usize> = pairs.iter().map(|&p| self.resolved[p].1).collect();
            let items: Vec<usize> = (0..self.items.len()).filter(|x| used.contains(x)).collect();
            self.reordered(&queries, &items, &pairs)
        };
        Ok((side(false)?, side(true)?))
    }
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn string(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| format(format!("string longer than 65535 bytes: {s:.32}...")))?;
        self.u16(len)?;
        self.bytes(s.as_bytes())
    }

    fn vector(&mut self, v: &EmbeddingVector) -> Result<()> {
        for &x in v.values() {
            self.bytes(&(x as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| format(format!("unexpected end of file while reading {what}")))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.exact::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.exact(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.exact(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| format(format!("unexpected end of file while reading {what}")))?;
        String::from_utf8(buf).map_err(|_| format(format!("{what} is not valid UTF-8")))
    }

    fn vector(&mut self, dim: usize, what: &str) -> Result<EmbeddingVector> {
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(f32::from_le_bytes(self.exact(what)?) as f64);
        }
        EmbeddingVector::new(values).map_err(|_| format(format!("{what} contains non-finite values")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.exact::<4>("magic")?;
        if &found != magic {
            return Err(format(format!(
                "bad magic {:?} (expected {:?})",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(format(format!("unsupported format version {version}")));
        }
        Ok(())
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(format("trailing bytes after the last record")),
        }
    }
}

pub fn write_dataset(ds: &Dataset, embeddings_path: &Path, pairs_path: &Path) -> Result<()> {
    if ds.dim == 0 {
        return Err(Error::Integrity("refusing to write a dataset with dim 0".into()));
    }
    let dim = u32::try_from(ds.dim).map_err(|_| format("dimension exceeds u32"))?;
    let mut w = Writer { inner: BufWriter::new(File::create(embeddings_path)?) };
    w.bytes(EMBEDDING_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(dim)?;
    w.u64(ds.queries.len() as u64)?;
    w.u64(ds.items.len() as u64)?;
    for q in &ds.queries {
        w.string(&q.query_id)?;
        w.vector(&q.embedding)?;
    }
    for it in &ds.items {
        w.string(&it.item_id)?;
        w.vector(&it.text_embedding)?;
        w.vector(&it.image_embedding)?;
        w.string(it.category_tag.as_deref().unwrap_or(""))?;
    }
    w.inner.flush()?;

    let mut w = Writer { inner: BufWriter::new(File::create(pairs_path)?) };
    w.bytes(PAIRS_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u64(ds.pairs.len() as u64)?;
    for p in &ds.pairs {
        w.string(&p.query_id)?;
        w.string(&p.item_id)?;
        w.u8(p.y_eng.gain())?;
        w.u8(p.y_rel.gain())?;
    }
    w.inner.flush()?;
    Ok(())
}

pub fn load_dataset(embeddings_path: &Path, pairs_path: &Path) -> Result<Dataset> {
    let mut r = Reader { inner: BufReader::new(File::open(embeddings_path)?) };
    r.header(EMBEDDING_MAGIC)?;
    let dim = r.u32("dim")? as usize;
    let n_queries = r.u64("query count")?;
    let n_items = r.u64("item count")?;
    if dim == 0 {
        return Err(Error::Integrity("embedding file declares dim 0".into()));
    }
    let mut queries = Vec::new();
    for _ in 0..n_queries {
        let query_id = r.string("query id")?;
        let embedding = r.vector(dim, "query embedding")?;
        queries.push(QueryRecord { query_id, embedding });
    }
    let mut items = Vec::new();
    for _ in 0..n_items {
        let item_id = r.string("item id")?;
        let text_embedding = r.vector(dim, "text embedding")?;
        let image_embedding = r.vector(dim, "image embedding")?;
        let tag = r.string("category tag")?;
        items.push(ItemRecord {
            item_id,
            text_embedding,
            image_embedding,
            category_tag: if tag.is_empty() { None } else { Some(tag) },
        });
    }
    r.expect_eof()?;

    let mut r = Reader { inner: BufReader::new(File::open(pairs_path)?) };
    r.header(PAIRS_MAGIC)?;
    let n_pairs = r.u64("pair count")?;
    let mut pairs = Vec::new();
    for _ in 0..n_pairs {
        let query_id = r.string("pair query id")?;
        let item_id = r.string("pair item id")?;
        let eng = r.u8("y_eng")?;
        let rel = r.u8("y_rel")?;
        let y_eng = Label::from_byte(eng).ok_or_else(|| format(format!("invalid y_eng byte {eng}")))?;
        let y_rel = Label::from_byte(rel).ok_or_else(|| format(format!("invalid y_rel byte {rel}")))?;
        pairs.push(LabeledPair { query_id, item_id, y_eng, y_rel });
    }
    r.expect_eof()?;
    Dataset::new(dim, queries, items, pairs)
}

/// Seeded shuffle of all pair indices cut into batches of `batch_size`. A
/// trailing batch of fewer than two pairs is dropped.
pub fn make_batches(ds: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    shuffled_batches(ds.pairs.len(), batch_size, seed)
}

pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(config(format!("batch_size must be at least 2 (got {batch_size})")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect())
}
