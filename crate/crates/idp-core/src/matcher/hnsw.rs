//! Layered navigable small-world index for approximate top-m retrieval.
//!
//! Single-threaded, deterministic construction: node levels come from a
//! seeded geometric draw, and all heap orderings break similarity ties
//! by node id. The index must be frozen before querying; queries are
//! then safe for concurrent readers.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{IdpError, Result};
use crate::linalg::{Matrix, Similarity};
use crate::rng::derive_rng;

use super::Neighbor;

const ANN_MAGIC: &[u8; 8] = b"IDPANN1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HnswParams {
    /// Max links per node per layer (level 0 allows twice as many).
    pub max_degree: usize,
    /// Beam width while inserting.
    pub ef_construction: usize,
    /// Default beam width while querying.
    pub ef_search: usize,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            max_degree: 16,
            ef_construction: 200,
            ef_search: 100,
        }
    }
}

/// (similarity, id) with a total order: higher similarity first, lower
/// id on ties.
#[derive(Clone, Copy, PartialEq)]
struct Scored {
    sim: f64,
    id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .partial_cmp(&other.sim)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct AnnIndex {
    params: HnswParams,
    similarity: Similarity,
    dim: usize,
    vectors: Vec<f64>,
    /// Per node: links per level (level 0 at index 0).
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
    frozen: bool,
    rng: ChaCha20Rng,
}

impl AnnIndex {
    pub fn new(dim: usize, params: HnswParams, similarity: Similarity, seed: u64) -> Self {
        AnnIndex {
            params,
            similarity,
            dim,
            vectors: Vec::new(),
            links: Vec::new(),
            entry: None,
            max_level: 0,
            frozen: false,
            rng: derive_rng(seed, "hnsw"),
        }
    }

    /// Insert all source rows and freeze.
    pub fn build(
        sources: &Matrix,
        params: HnswParams,
        similarity: Similarity,
        seed: u64,
    ) -> Result<Self> {
        if sources.rows() == 0 {
            return Err(IdpError::EmptyInput("cannot index zero sources".into()));
        }
        let mut index = AnnIndex::new(sources.cols(), params, similarity, seed);
        for i in 0..sources.rows() {
            index.insert(sources.row(i))?;
        }
        index.freeze();
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn vector(&self, id: u32) -> &[f64] {
        let i = id as usize * self.dim;
        &self.vectors[i..i + self.dim]
    }

    fn sim_to(&self, query: &[f64], id: u32) -> f64 {
        self.similarity.eval(query, self.vector(id))
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            self.params.max_degree * 2
        } else {
            self.params.max_degree
        }
    }

    fn sample_level(&mut self) -> usize {
        let ml = 1.0 / (self.params.max_degree as f64).ln();
        let u: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        (-u.ln() * ml).floor() as usize
    }

    /// Beam search on one layer; returns up to `ef` results, best first.
    fn search_layer(&self, query: &[f64], entries: &[u32], ef: usize, level: usize) -> Vec<Scored> {
        let mut visited = vec![false; self.links.len()];
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::new();
        for &ep in entries {
            if visited[ep as usize] {
                continue;
            }
            visited[ep as usize] = true;
            let s = Scored {
                sim: self.sim_to(query, ep),
                id: ep,
            };
            candidates.push(s);
            results.push(std::cmp::Reverse(s));
            if results.len() > ef {
                results.pop();
            }
        }
        while let Some(cand) = candidates.pop() {
            let worst = results.peek().map(|r| r.0).unwrap();
            if results.len() >= ef && cand < worst {
                break;
            }
            for &nb in &self.links[cand.id as usize][level] {
                if visited[nb as usize] {
                    continue;
                }
                visited[nb as usize] = true;
                let s = Scored {
                    sim: self.sim_to(query, nb),
                    id: nb,
                };
                if results.len() < ef || s > results.peek().unwrap().0 {
                    candidates.push(s);
                    results.push(std::cmp::Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    pub fn insert(&mut self, vector: &[f64]) -> Result<u32> {
        if self.frozen {
            return Err(IdpError::InvalidArgument(
                "cannot insert into a frozen index".into(),
            ));
        }
        if vector.len() != self.dim {
            return Err(IdpError::DimMismatch {
                what: "ann vector".into(),
                expected: self.dim,
                got: vector.len(),
            });
        }
        let id = self.links.len() as u32;
        let level = self.sample_level();
        self.vectors.extend_from_slice(vector);
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(entry) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return Ok(id);
        };

        // greedy descent through the upper layers
        let query = vector.to_vec();
        let mut ep = entry;
        let mut lc = self.max_level;
        while lc > level {
            let best = self.search_layer(&query, &[ep], 1, lc);
            if let Some(b) = best.first() {
                ep = b.id;
            }
            if lc == 0 {
                break;
            }
            lc -= 1;
        }

        // connect on each layer from min(level, max_level) down to 0
        let mut entries = vec![ep];
        let top = level.min(self.max_level);
        for l in (0..=top).rev() {
            let nearest = self.search_layer(&query, &entries, self.params.ef_construction, l);
            let selected: Vec<u32> = nearest
                .iter()
                .take(self.params.max_degree)
                .map(|s| s.id)
                .collect();
            self.links[id as usize][l] = selected.clone();
            for &nb in &selected {
                self.links[nb as usize][l].push(id);
                let cap = self.max_links(l);
                if self.links[nb as usize][l].len() > cap {
                    self.prune(nb, l, cap);
                }
            }
            entries = nearest.iter().map(|s| s.id).collect();
            if entries.is_empty() {
                entries = vec![ep];
            }
        }

        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(id);
        }
        Ok(id)
    }

    /// Keep the `cap` most similar links of a node.
    fn prune(&mut self, node: u32, level: usize, cap: usize) {
        let base = self.vector(node).to_vec();
        let mut scored: Vec<Scored> = self.links[node as usize][level]
            .iter()
            .map(|&nb| Scored {
                sim: self.similarity.eval(&base, self.vector(nb)),
                id: nb,
            })
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        scored.truncate(cap);
        self.links[node as usize][level] = scored.into_iter().map(|s| s.id).collect();
    }

    /// Approximate top-m with the default query beam width.
    pub fn search(&self, query: &[f64], m: usize) -> Result<Vec<Neighbor>> {
        self.search_with_ef(query, m, self.params.ef_search)
    }

    /// Approximate top-m with an explicit beam width.
    pub fn search_with_ef(&self, query: &[f64], m: usize, ef: usize) -> Result<Vec<Neighbor>> {
        if !self.frozen {
            return Err(IdpError::IndexNotFrozen);
        }
        if m == 0 {
            return Err(IdpError::InvalidArgument("m must be >= 1".into()));
        }
        let Some(entry) = self.entry else {
            return Err(IdpError::EmptyInput("index holds no vectors".into()));
        };
        if query.len() != self.dim {
            return Err(IdpError::DimMismatch {
                what: "ann query".into(),
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut ep = entry;
        for lc in (1..=self.max_level).rev() {
            if let Some(b) = self.search_layer(query, &[ep], 1, lc).first() {
                ep = b.id;
            }
        }
        let ef = ef.max(m);
        let found = self.search_layer(query, &[ep], ef, 0);
        Ok(found
            .into_iter()
            .take(m)
            .map(|s| Neighbor {
                source: s.id,
                similarity: s.sim,
            })
            .collect())
    }

    /// BFS reachability over level-0 links from the entry point.
    pub fn is_connected_layer0(&self) -> bool {
        let Some(entry) = self.entry else {
            return true;
        };
        let n = self.links.len();
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        seen[entry as usize] = true;
        queue.push_back(entry);
        let mut count = 1usize;
        while let Some(node) = queue.pop_front() {
            for &nb in &self.links[node as usize][0] {
                if !seen[nb as usize] {
                    seen[nb as usize] = true;
                    count += 1;
                    queue.push_back(nb);
                }
            }
        }
        count == n
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        out.extend_from_slice(ANN_MAGIC);
        let push_u32 = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        push_u32(&mut out, match self.similarity {
            Similarity::Cosine => 0,
            Similarity::Dot => 1,
        });
        push_u32(&mut out, self.params.max_degree as u32);
        push_u32(&mut out, self.params.ef_construction as u32);
        push_u32(&mut out, self.params.ef_search as u32);
        push_u32(&mut out, self.dim as u32);
        push_u32(&mut out, self.links.len() as u32);
        push_u32(&mut out, self.max_level as u32);
        push_u32(&mut out, self.entry.map_or(0, |e| e + 1));
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for node in &self.links {
            push_u32(&mut out, node.len() as u32);
            for level in node {
                push_u32(&mut out, level.len() as u32);
                for &nb in level {
                    push_u32(&mut out, nb);
                }
            }
        }
        fs::write(path, out).map_err(|e| IdpError::io(path, e))
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| IdpError::io(path, e))?;
        let bad = |msg: &str| IdpError::Checkpoint {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 8 || &bytes[..8] != ANN_MAGIC {
            return Err(bad("magic mismatch (expected IDPANN1)"));
        }
        let mut off = 8usize;
        let next_u32 = |off: &mut usize| -> Result<u32> {
            if bytes.len() < *off + 4 {
                return Err(bad("truncated index file"));
            }
            let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
            *off += 4;
            Ok(v)
        };
        let sim = if next_u32(&mut off)? == 0 {
            Similarity::Cosine
        } else {
            Similarity::Dot
        };
        let params = HnswParams {
            max_degree: next_u32(&mut off)? as usize,
            ef_construction: next_u32(&mut off)? as usize,
            ef_search: next_u32(&mut off)? as usize,
        };
        let dim = next_u32(&mut off)? as usize;
        let count = next_u32(&mut off)? as usize;
        let max_level = next_u32(&mut off)? as usize;
        let entry_raw = next_u32(&mut off)?;
        let mut vectors = Vec::with_capacity(count * dim);
        if bytes.len() < off + count * dim * 8 {
            return Err(bad("truncated vector payload"));
        }
        for chunk in bytes[off..off + count * dim * 8].chunks_exact(8) {
            vectors.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        off += count * dim * 8;
        let mut links = Vec::with_capacity(count);
        for _ in 0..count {
            let n_levels = next_u32(&mut off)? as usize;
            let mut node = Vec::with_capacity(n_levels);
            for _ in 0..n_levels {
                let n_links = next_u32(&mut off)? as usize;
                let mut level = Vec::with_capacity(n_links);
                for _ in 0..n_links {
                    level.push(next_u32(&mut off)?);
                }
                node.push(level);
            }
            links.push(node);
        }
        Ok(AnnIndex {
            params,
            similarity: sim,
            dim,
            vectors,
            links,
            entry: if entry_raw == 0 { None } else { Some(entry_raw - 1) },
            max_level,
            frozen: true,
            rng: derive_rng(0, "hnsw.loaded"),
        })
    }
}
