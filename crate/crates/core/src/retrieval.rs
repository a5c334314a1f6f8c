//! Bag-of-binary-words place recognition.
//!
//! A vocabulary tree is grown by hierarchical k-medians in Hamming space with
//! bitwise-majority centroids. Keyframes become sparse, L1-normalized TF-IDF vectors
//! and an inverted index returns the frames that share at least one word with a query.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::binio::{ByteReader, Truncated};
use crate::imgproc::{hamming, BriefDescriptor};

const VOCAB_MAGIC: &[u8; 4] = b"VBW1";
const NONE_ID: u32 = u32::MAX;
const MAX_KMEDIANS_ITERATIONS: usize = 25;

pub type WordId = u32;
pub type FrameId = u64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("level {level}: {distinct} distinct descriptors, at least {required} needed")]
    InsufficientDescriptors {
        level: u32,
        distinct: usize,
        required: usize,
    },
    #[error("invalid vocabulary parameters: branching {k}, depth {depth}")]
    InvalidParameters { k: u32, depth: u32 },
    #[error("frame {0} is already in the database")]
    DuplicateFrame(FrameId),
    #[error("not a vocabulary file (bad magic)")]
    BadMagic,
    #[error("vocabulary file is truncated")]
    Truncated,
    #[error("vocabulary file is inconsistent: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<Truncated> for RetrievalError {
    fn from(_: Truncated) -> Self {
        RetrievalError::Truncated
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocabNode {
    pub parent: Option<u32>,
    pub centroid: BriefDescriptor,
    pub children: Vec<u32>,
    pub word: Option<WordId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    k: u32,
    depth: u32,
    nodes: Vec<VocabNode>,
    /// Node index of every word.
    words: Vec<u32>,
    idf: Vec<f64>,
}

impl Vocabulary {
    pub fn branching(&self) -> u32 {
        self.k
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn nodes(&self) -> &[VocabNode] {
        &self.nodes
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn idf(&self, word: WordId) -> f64 {
        self.idf[word as usize]
    }

    pub fn word_centroid(&self, word: WordId) -> BriefDescriptor {
        self.nodes[self.words[word as usize] as usize].centroid
    }

    /// Greedy descent: at each level move to the child with the smallest Hamming
    /// distance, ties going to the lowest child index.
    pub fn word_of(&self, d: &BriefDescriptor) -> WordId {
        let mut node = 0usize;
        loop {
            let n = &self.nodes[node];
            if let Some(w) = n.word {
                return w;
            }
            let mut best = n.children[0];
            let mut best_d = hamming(d, &self.nodes[best as usize].centroid);
            for &c in &n.children[1..] {
                let dist = hamming(d, &self.nodes[c as usize].centroid);
                if dist < best_d {
                    best = c;
                    best_d = dist;
                }
            }
            node = best as usize;
        }
    }

    pub fn transform(&self, descs: &[BriefDescriptor]) -> BowVector {
        transform(descs, self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.nodes.len() * 49);
        out.extend_from_slice(VOCAB_MAGIC);
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.depth.to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.words.len() as u32).to_le_bytes());
        for n in &self.nodes {
            out.extend_from_slice(&n.parent.unwrap_or(NONE_ID).to_le_bytes());
            out.extend_from_slice(&n.centroid.0);
            out.push(n.word.is_some() as u8);
            out.extend_from_slice(&n.word.unwrap_or(NONE_ID).to_le_bytes());
            let idf = n.word.map(|w| self.idf[w as usize]).unwrap_or(0.0);
            out.extend_from_slice(&idf.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let mut r = ByteReader::new(bytes);
        if &r.array::<4>()? != VOCAB_MAGIC {
            return Err(RetrievalError::BadMagic);
        }
        let k = r.u32()?;
        let depth = r.u32()?;
        let node_count = r.u32()? as usize;
        let word_count = r.u32()? as usize;
        if node_count == 0 {
            return Err(RetrievalError::Corrupt("no root node".into()));
        }
        let mut nodes: Vec<VocabNode> = Vec::with_capacity(node_count);
        let mut words = vec![NONE_ID; word_count];
        let mut idf = vec![0.0; word_count];
        for i in 0..node_count {
            let parent = r.u32()?;
            let centroid = BriefDescriptor(r.array()?);
            let leaf = r.u8()? != 0;
            let word = r.u32()?;
            let weight = r.f64()?;
            let parent = if parent == NONE_ID {
                if i != 0 {
                    return Err(RetrievalError::Corrupt(format!("node {i} has no parent")));
                }
                None
            } else {
                if parent as usize >= i {
                    return Err(RetrievalError::Corrupt(format!("node {i} precedes its parent")));
                }
                nodes[parent as usize].children.push(i as u32);
                Some(parent)
            };
            let word = if leaf {
                if word as usize >= word_count || words[word as usize] != NONE_ID {
                    return Err(RetrievalError::Corrupt(format!("bad word id {word}")));
                }
                words[word as usize] = i as u32;
                idf[word as usize] = weight;
                Some(word)
            } else {
                None
            };
            nodes.push(VocabNode {
                parent,
                centroid,
                children: Vec::new(),
                word,
            });
        }
        if r.remaining() != 0 || words.contains(&NONE_ID) {
            return Err(RetrievalError::Corrupt("word table mismatch".into()));
        }
        if nodes.iter().any(|n| n.word.is_none() && n.children.is_empty()) {
            return Err(RetrievalError::Corrupt("internal node without children".into()));
        }
        Ok(Self {
            k,
            depth,
            nodes,
            words,
            idf,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn distinct(descs: &[BriefDescriptor], idx: &[usize]) -> Vec<BriefDescriptor> {
    idx.iter().map(|&i| descs[i]).collect::<BTreeSet<_>>().into_iter().collect()
}

fn nearest(d: &BriefDescriptor, centers: &[BriefDescriptor]) -> usize {
    let mut best = 0;
    let mut best_d = u32::MAX;
    for (c, center) in centers.iter().enumerate() {
        let dist = hamming(d, center);
        if dist < best_d {
            best = c;
            best_d = dist;
        }
    }
    best
}

fn majority(descs: &[BriefDescriptor], members: &[usize]) -> BriefDescriptor {
    let mut counts = [0usize; 256];
    for &m in members {
        for (b, c) in counts.iter_mut().enumerate() {
            *c += descs[m].bit(b) as usize;
        }
    }
    let mut out = BriefDescriptor::ZERO;
    for (b, &c) in counts.iter().enumerate() {
        out.set_bit(b, 2 * c > members.len());
    }
    out
}

/// k-medians with k-means++ style seeding. Returns `(centroid, members)` per non-empty cluster.
fn kmedians(
    descs: &[BriefDescriptor],
    idx: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(BriefDescriptor, Vec<usize>)> {
    let uniq = distinct(descs, idx);
    if uniq.len() <= k {
        return uniq
            .iter()
            .map(|u| (*u, idx.iter().copied().filter(|&i| descs[i] == *u).collect()))
            .collect();
    }
    let mut centers = vec![descs[idx[rng.random_range(0..idx.len())]]];
    while centers.len() < k {
        let weights: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let d = centers.iter().map(|c| hamming(&descs[i], c)).min().unwrap() as f64;
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = idx.len() - 1;
        for (j, w) in weights.iter().enumerate() {
            if *w > 0.0 && target < *w {
                pick = j;
                break;
            }
            target -= w;
        }
        if weights[pick] == 0.0 {
            // Fall back to the farthest point.
            pick = weights
                .iter()
                .enumerate()
                .fold(0, |best, (j, w)| if *w > weights[best] { j } else { best });
        }
        centers.push(descs[idx[pick]]);
    }
    let mut assign: Vec<usize> = vec![usize::MAX; idx.len()];
    for _ in 0..MAX_KMEDIANS_ITERATIONS {
        let next: Vec<usize> = idx.iter().map(|&i| nearest(&descs[i], &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = idx
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(&i, _)| i)
                .collect();
            if !members.is_empty() {
                *center = majority(descs, &members);
            }
        }
    }
    let mut clusters: Vec<(BriefDescriptor, Vec<usize>)> = centers.into_iter().map(|c| (c, Vec::new())).collect();
    for (&i, &a) in idx.iter().zip(&assign) {
        clusters[a].1.push(i);
    }
    clusters.retain(|(_, m)| !m.is_empty());
    clusters
}

/// Grows a vocabulary tree with branching `k` and at most `depth` levels below the root.
pub fn build_vocabulary(
    training: &[Vec<BriefDescriptor>],
    k: u32,
    depth: u32,
    seed: u64,
) -> Result<Vocabulary, RetrievalError> {
    if k < 2 || depth < 1 {
        return Err(RetrievalError::InvalidParameters { k, depth });
    }
    let descs: Vec<BriefDescriptor> = training.iter().flatten().copied().collect();
    let all: Vec<usize> = (0..descs.len()).collect();
    let root_distinct = distinct(&descs, &all).len();
    if root_distinct < k as usize {
        return Err(RetrievalError::InsufficientDescriptors {
            level: 0,
            distinct: root_distinct,
            required: k as usize,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![VocabNode {
        parent: None,
        centroid: BriefDescriptor::ZERO,
        children: Vec::new(),
        word: None,
    }];
    let mut words = Vec::new();
    let mut queue = std::collections::VecDeque::from([(0usize, 0u32, all)]);
    while let Some((node, level, members)) = queue.pop_front() {
        if level == depth || distinct(&descs, &members).len() <= 1 {
            nodes[node].word = Some(words.len() as WordId);
            words.push(node as u32);
            continue;
        }
        for (centroid, cluster) in kmedians(&descs, &members, k as usize, &mut rng) {
            let child = nodes.len();
            nodes.push(VocabNode {
                parent: Some(node as u32),
                centroid,
                children: Vec::new(),
                word: None,
            });
            nodes[node].children.push(child as u32);
            queue.push_back((child, level + 1, cluster));
        }
    }
    let mut vocab = Vocabulary {
        k,
        depth,
        nodes,
        words,
        idf: Vec::new(),
    };
    let n_images = training.len() as f64;
    let mut doc_freq = vec![0usize; vocab.words.len()];
    for image in training {
        let seen: BTreeSet<WordId> = image.iter().map(|d| vocab.word_of(d)).collect();
        for w in seen {
            doc_freq[w as usize] += 1;
        }
    }
    vocab.idf = doc_freq
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { (n_images / n as f64).ln() })
        .collect();
    Ok(vocab)
}

/// Sparse TF-IDF vector, L1-normalized, with strictly positive weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BowVector(BTreeMap<WordId, f64>);

impl BowVector {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, w: WordId) -> Option<f64> {
        self.0.get(&w).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (WordId, f64)> + '_ {
        self.0.iter().map(|(&w, &v)| (w, v))
    }

    /// Builds a vector from raw positive weights and L1-normalizes it.
    pub fn from_weights(weights: impl IntoIterator<Item = (WordId, f64)>) -> Self {
        let mut m = BTreeMap::new();
        for (w, v) in weights {
            if v > 0.0 {
                *m.entry(w).or_insert(0.0) += v;
            }
        }
        let total: f64 = m.values().sum();
        if total > 0.0 {
            for v in m.values_mut() {
                *v /= total;
            }
        }
        BowVector(m)
    }
}

pub fn transform(descs: &[BriefDescriptor], vocab: &Vocabulary) -> BowVector {
    let mut counts: BTreeMap<WordId, usize> = BTreeMap::new();
    for d in descs {
        *counts.entry(vocab.word_of(d)).or_insert(0) += 1;
    }
    BowVector::from_weights(counts.into_iter().map(|(w, c)| (w, c as f64 * vocab.idf(w))))
}

/// L1 similarity `1 - |a - b|_1 / 2`, in `[0, 1]`.
///
/// For L1-normalized vectors this equals the sum of `min(a_i, b_i)` over shared
/// words, which is what is evaluated: disjoint vectors score exactly zero and the
/// inverted index reproduces the value bit for bit.
pub fn bow_score(a: &BowVector, b: &BowVector) -> f64 {
    let mut score = 0.0;
    let (mut ia, mut ib) = (a.0.iter().peekable(), b.0.iter().peekable());
    while let (Some((wa, va)), Some((wb, vb))) = (ia.peek(), ib.peek()) {
        match wa.cmp(wb) {
            std::cmp::Ordering::Less => {
                ia.next();
            }
            std::cmp::Ordering::Greater => {
                ib.next();
            }
            std::cmp::Ordering::Equal => {
                score += va.min(**vb);
                ia.next();
                ib.next();
            }
        }
    }
    score
}

fn rank(scores: &mut [(FrameId, f64)]) {
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Inverted-index keyframe database.
///
/// Single writer: `add` and `query` must not interleave across threads without
/// external synchronization.
#[derive(Clone, Debug, Default)]
pub struct BowDatabase {
    frames: Vec<(FrameId, BowVector)>,
    slots: HashMap<FrameId, usize>,
    index: HashMap<WordId, Vec<(usize, f64)>>,
}

impl BowDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn vector(&self, frame: FrameId) -> Option<&BowVector> {
        self.slots.get(&frame).map(|&s| &self.frames[s].1)
    }

    /// Frames in insertion order.
    pub fn frames(&self) -> impl Iterator<Item = (FrameId, &BowVector)> {
        self.frames.iter().map(|(f, v)| (*f, v))
    }

    pub fn add(&mut self, frame: FrameId, vec: BowVector) -> Result<(), RetrievalError> {
        if self.slots.contains_key(&frame) {
            return Err(RetrievalError::DuplicateFrame(frame));
        }
        let slot = self.frames.len();
        for (w, v) in vec.iter() {
            self.index.entry(w).or_default().push((slot, v));
        }
        self.slots.insert(frame, slot);
        self.frames.push((frame, vec));
        Ok(())
    }

    /// Scores every frame sharing a word with `vec`, skipping the `exclude_last`
    /// most recently added ones, and returns the best `top_n` (score descending,
    /// ties by lower frame id).
    pub fn query(&self, vec: &BowVector, exclude_last: usize, top_n: usize) -> Vec<(FrameId, f64)> {
        let limit = self.frames.len().saturating_sub(exclude_last);
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for (w, qv) in vec.iter() {
            if let Some(postings) = self.index.get(&w) {
                for &(slot, fv) in postings {
                    if slot < limit {
                        *acc.entry(slot).or_insert(0.0) += qv.min(fv);
                    }
                }
            }
        }
        let mut scores: Vec<(FrameId, f64)> = acc.into_iter().map(|(s, v)| (self.frames[s].0, v)).collect();
        rank(&mut scores);
        scores.truncate(top_n);
        scores
    }

    /// Highest score among the `last` most recently added frames.
    pub fn best_recent_score(&self, vec: &BowVector, last: usize) -> f64 {
        let start = self.frames.len().saturating_sub(last);
        self.frames[start..]
            .iter()
            .map(|(_, v)| bow_score(vec, v))
            .fold(0.0, f64::max)
    }
}

/// Loop-candidate acceptance thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionConfig {
    pub min_score: f64,
    /// Candidates must reach this fraction of the best score among the excluded recent frames.
    pub neighbor_ratio: f64,
    pub exclude_last: usize,
    pub top_n: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            min_score: 0.015,
            neighbor_ratio: 0.5,
            exclude_last: 30,
            top_n: 3,
        }
    }
}

/// Database query filtered by the absolute and neighbor-relative score thresholds.
pub fn detect_candidates(db: &BowDatabase, vec: &BowVector, cfg: &DetectionConfig) -> Vec<(FrameId, f64)> {
    if vec.is_empty() {
        return Vec::new();
    }
    let reference = db.best_recent_score(vec, cfg.exclude_last);
    db.query(vec, cfg.exclude_last, cfg.top_n)
        .into_iter()
        .filter(|&(_, s)| s >= cfg.min_score && s >= cfg.neighbor_ratio * reference)
        .collect()
}
