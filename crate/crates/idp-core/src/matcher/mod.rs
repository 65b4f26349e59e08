//! Top-m retrieval over adapted vectors and similarity-weighted
//! embedding synthesis for new-domain items.

mod hnsw;

pub use hnsw::{AnnIndex, HnswParams};

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path;

use crate::cdim::{encode_all, AdapterParams, TextVectorStore};
use crate::dataset::InteractionStore;
use crate::error::{IdpError, Result};
use crate::linalg::{Matrix, Similarity};
use crate::seqmodel::SeqModelParams;

/// One retrieved source with its similarity to the query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub source: u32,
    pub similarity: f64,
}

/// Heap entry ordered so the *worst* candidate (lowest similarity, then
/// highest index) surfaces first; ties on similarity prefer the lower
/// source index.
#[derive(PartialEq)]
struct WorstFirst(Neighbor);

impl Eq for WorstFirst {}

impl Ord for WorstFirst {
    fn cmp(&self, other: &Self) -> Ordering {
        // worst = smaller similarity, or equal similarity with larger index
        other
            .0
            .similarity
            .partial_cmp(&self.0.similarity)
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.0.source.cmp(&other.0.source))
    }
}

impl PartialOrd for WorstFirst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact top-m via a bounded heap; ties broken by lower source index.
/// `exclude` drops one source (self-retrieval when mining).
pub(crate) fn top_m_excluding(
    query: &[f64],
    sources: &Matrix,
    m: usize,
    similarity: Similarity,
    exclude: Option<usize>,
) -> Vec<Neighbor> {
    let mut heap: BinaryHeap<WorstFirst> = BinaryHeap::with_capacity(m + 1);
    for i in 0..sources.rows() {
        if exclude == Some(i) {
            continue;
        }
        let cand = Neighbor {
            source: i as u32,
            similarity: similarity.eval(query, sources.row(i)),
        };
        if heap.len() < m {
            heap.push(WorstFirst(cand));
        } else if let Some(worst) = heap.peek() {
            let w = &worst.0;
            let better = cand.similarity > w.similarity
                || (cand.similarity == w.similarity && cand.source < w.source);
            if better {
                heap.pop();
                heap.push(WorstFirst(cand));
            }
        }
    }
    let mut out: Vec<Neighbor> = heap.into_iter().map(|e| e.0).collect();
    out.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.source.cmp(&b.source))
    });
    out
}

/// Exact top-m most similar sources for one query vector.
pub fn retrieve_exact(
    query: &[f64],
    sources: &Matrix,
    m: usize,
    similarity: Similarity,
) -> Result<Vec<Neighbor>> {
    if m == 0 {
        return Err(IdpError::InvalidArgument("m must be >= 1".into()));
    }
    if sources.rows() == 0 {
        return Err(IdpError::EmptyInput("no sources to retrieve from".into()));
    }
    Ok(top_m_excluding(query, sources, m, similarity, None))
}

/// Per-target retrieved neighbors, similarities nonincreasing.
#[derive(Clone, Debug, Default)]
pub struct NeighborAssignment {
    pub rows: Vec<(u32, Vec<Neighbor>)>,
}

impl NeighborAssignment {
    /// Export as TSV `target<TAB>source:sim,source:sim,...` with
    /// 6-decimal similarities.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (target, neighbors) in &self.rows {
            let joined: Vec<String> = neighbors
                .iter()
                .map(|n| format!("{}:{:.6}", n.source, n.similarity))
                .collect();
            let _ = writeln!(out, "{target}\t{}", joined.join(","));
        }
        std::fs::write(path, out).map_err(|e| IdpError::io(path, e))
    }
}

/// Retrieve top-m sources for every target row (exact path).
pub fn assign_neighbors(
    targets: &Matrix,
    target_ids: &[u32],
    sources: &Matrix,
    m: usize,
    similarity: Similarity,
) -> Result<NeighborAssignment> {
    if m == 0 {
        return Err(IdpError::InvalidArgument("m must be >= 1".into()));
    }
    if sources.rows() == 0 {
        return Err(IdpError::EmptyInput("no sources to retrieve from".into()));
    }
    assert_eq!(targets.rows(), target_ids.len());
    let mut rows = Vec::with_capacity(target_ids.len());
    for (ti, &target) in target_ids.iter().enumerate() {
        rows.push((
            target,
            top_m_excluding(targets.row(ti), sources, m, similarity, None),
        ));
    }
    Ok(NeighborAssignment { rows })
}

/// Why a generated row fell back to uniform or zero weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fallback {
    None,
    /// All clamped similarities were <= epsilon; uniform weights used.
    UniformNonpositive,
    /// The target had no modality vector; the row is zero.
    MissingVector,
}

#[derive(Clone, Debug)]
pub struct RowProvenance {
    pub target: u32,
    pub neighbors: Vec<Neighbor>,
    pub weights: Vec<f64>,
    pub fallback: Fallback,
}

/// Synthesized embedding table E^T plus per-row provenance.
#[derive(Clone, Debug)]
pub struct GeneratedEmbeddings {
    /// Target ids, aligned with embedding rows.
    pub targets: Vec<u32>,
    pub embeddings: Matrix,
    pub provenance: Vec<RowProvenance>,
}

const WEIGHT_EPS: f64 = 1e-8;

/// Normalized-similarity attention weights: clamp at 0 and divide by the
/// sum; if everything clamps to <= epsilon, fall back to uniform weights
/// over the retrieved neighbors (logged).
pub fn aggregation_weights(neighbors: &[Neighbor]) -> (Vec<f64>, Fallback) {
    let clamped: Vec<f64> = neighbors.iter().map(|n| n.similarity.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum <= WEIGHT_EPS {
        let w = 1.0 / neighbors.len() as f64;
        (vec![w; neighbors.len()], Fallback::UniformNonpositive)
    } else {
        (clamped.iter().map(|c| c / sum).collect(), Fallback::None)
    }
}

/// Aggregate source embeddings into target rows (convex combinations).
pub fn generate_embeddings(
    assignment: &NeighborAssignment,
    source_embeddings: &Matrix,
) -> Result<GeneratedEmbeddings> {
    let d = source_embeddings.cols();
    let mut targets = Vec::with_capacity(assignment.rows.len());
    let mut embeddings = Matrix::zeros(assignment.rows.len(), d);
    let mut provenance = Vec::with_capacity(assignment.rows.len());
    let mut fallbacks = 0usize;
    for (ri, (target, neighbors)) in assignment.rows.iter().enumerate() {
        if neighbors.is_empty() {
            return Err(IdpError::InvalidArgument(format!(
                "target {target} has no retrieved neighbors"
            )));
        }
        for n in neighbors {
            if (n.source as usize) >= source_embeddings.rows() {
                return Err(IdpError::ItemOutOfRange {
                    index: n.source,
                    size: source_embeddings.rows(),
                });
            }
        }
        let (weights, fallback) = aggregation_weights(neighbors);
        if fallback != Fallback::None {
            fallbacks += 1;
        }
        let row = embeddings.row_mut(ri);
        for (n, &w) in neighbors.iter().zip(&weights) {
            let src = source_embeddings.row(n.source as usize);
            for (r, &s) in row.iter_mut().zip(src) {
                *r += w * s;
            }
        }
        targets.push(*target);
        provenance.push(RowProvenance {
            target: *target,
            neighbors: neighbors.clone(),
            weights,
            fallback,
        });
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} generated rows used the uniform fallback (non-positive similarities)");
    }
    Ok(GeneratedEmbeddings {
        targets,
        embeddings,
        provenance,
    })
}

impl GeneratedEmbeddings {
    /// Provenance TSV: `target<TAB>fallback<TAB>source:weight,...`.
    pub fn write_provenance_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for row in &self.provenance {
            let tag = match row.fallback {
                Fallback::None => "ok",
                Fallback::UniformNonpositive => "uniform_fallback",
                Fallback::MissingVector => "missing_vector",
            };
            let joined: Vec<String> = row
                .neighbors
                .iter()
                .zip(&row.weights)
                .map(|(n, w)| format!("{}:{:.6}", n.source, w))
                .collect();
            let _ = writeln!(out, "{}\t{tag}\t{}", row.target, joined.join(","));
        }
        std::fs::write(path, out).map_err(|e| IdpError::io(path, e))
    }
}

/// Cross-domain generation: retrieve pre-training neighbors for every
/// target item by adapted-vector similarity and aggregate their source
/// embeddings. Targets without a vector get a zero fallback row plus a
/// warning, so downstream training stays runnable.
pub fn generate_cross_domain(
    source_vectors: &TextVectorStore,
    source_embeddings: &Matrix,
    target_vectors: &TextVectorStore,
    adapter: &AdapterParams,
    m: usize,
    similarity: Similarity,
) -> Result<GeneratedEmbeddings> {
    let (adapted_sources, src_present) = encode_all(adapter, source_vectors)?;
    if src_present.iter().any(|p| !p) {
        return Err(IdpError::InvalidArgument(
            "every pre-training item needs a vector for cross-domain generation".into(),
        ));
    }
    let d = source_embeddings.cols();
    let n_targets = target_vectors.num_items();
    let mut targets = Vec::with_capacity(n_targets);
    let mut embeddings = Matrix::zeros(n_targets, d);
    let mut provenance = Vec::with_capacity(n_targets);
    let mut missing = 0usize;
    for v in 0..n_targets as u32 {
        targets.push(v);
        match target_vectors.get(v) {
            Some(raw) => {
                let adapted = crate::cdim::encode(adapter, raw, crate::cdim::EncodeMode::Infer, None)?;
                let neighbors = top_m_excluding(&adapted, &adapted_sources, m, similarity, None);
                let (weights, fallback) = aggregation_weights(&neighbors);
                let row = embeddings.row_mut(v as usize);
                for (n, &w) in neighbors.iter().zip(&weights) {
                    let src = source_embeddings.row(n.source as usize);
                    for (r, &s) in row.iter_mut().zip(src) {
                        *r += w * s;
                    }
                }
                provenance.push(RowProvenance {
                    target: v,
                    neighbors,
                    weights,
                    fallback,
                });
            }
            None => {
                missing += 1;
                provenance.push(RowProvenance {
                    target: v,
                    neighbors: Vec::new(),
                    weights: Vec::new(),
                    fallback: Fallback::MissingVector,
                });
            }
        }
    }
    if missing > 0 {
        log::warn!("{missing} target items lack vectors; their generated rows are zero");
    }
    Ok(GeneratedEmbeddings {
        targets,
        embeddings,
        provenance,
    })
}

/// Same retrieval-and-aggregation pipeline restricted to one domain:
/// sources are the warm items of the cold item's own domain, and the
/// aggregated embeddings come from the trained model. Warm embeddings
/// are untouched; the result holds rows for the cold items only.
pub fn generate_inner_domain(
    store: &InteractionStore,
    cold_items: &[u32],
    model: &SeqModelParams,
    adapter: &AdapterParams,
    vectors: &TextVectorStore,
    m: usize,
    similarity: Similarity,
) -> Result<GeneratedEmbeddings> {
    use std::collections::HashSet;
    let cold: HashSet<u32> = cold_items.iter().copied().collect();
    let d = model.shape.dim;
    let mut targets = Vec::with_capacity(cold_items.len());
    let mut embeddings = Matrix::zeros(cold_items.len(), d);
    let mut provenance = Vec::with_capacity(cold_items.len());

    // per-domain warm source caches
    let mut per_domain: std::collections::HashMap<u32, (Vec<u32>, Matrix)> =
        std::collections::HashMap::new();
    let mut missing = 0usize;

    for (ri, &c) in cold_items.iter().enumerate() {
        targets.push(c);
        let domain = store.item_domain(c);
        if !per_domain.contains_key(&domain) {
            let warm: Vec<u32> = store
                .items_of_domain(domain)
                .into_iter()
                .filter(|v| !cold.contains(v) && vectors.get(*v).is_some())
                .collect();
            let mut adapted = Matrix::zeros(warm.len(), adapter.adapter_dim());
            for (i, &w) in warm.iter().enumerate() {
                let y = crate::cdim::encode(
                    adapter,
                    vectors.require(w)?,
                    crate::cdim::EncodeMode::Infer,
                    None,
                )?;
                adapted.row_mut(i).copy_from_slice(&y);
            }
            per_domain.insert(domain, (warm, adapted));
        }
        let (warm_ids, adapted_sources) = &per_domain[&domain];
        if warm_ids.is_empty() {
            return Err(IdpError::EmptyInput(format!(
                "domain of cold item {c} has no warm items with vectors"
            )));
        }
        match vectors.get(c) {
            Some(raw) => {
                let adapted = crate::cdim::encode(adapter, raw, crate::cdim::EncodeMode::Infer, None)?;
                let local = top_m_excluding(&adapted, adapted_sources, m, similarity, None);
                // map local source rows back to global item ids
                let neighbors: Vec<Neighbor> = local
                    .into_iter()
                    .map(|n| Neighbor {
                        source: warm_ids[n.source as usize],
                        similarity: n.similarity,
                    })
                    .collect();
                let (weights, fallback) = aggregation_weights(&neighbors);
                let row = embeddings.row_mut(ri);
                for (n, &w) in neighbors.iter().zip(&weights) {
                    let src = model.item_embeddings.row(n.source as usize);
                    for (r, &s) in row.iter_mut().zip(src) {
                        *r += w * s;
                    }
                }
                provenance.push(RowProvenance {
                    target: c,
                    neighbors,
                    weights,
                    fallback,
                });
            }
            None => {
                missing += 1;
                provenance.push(RowProvenance {
                    target: c,
                    neighbors: Vec::new(),
                    weights: Vec::new(),
                    fallback: Fallback::MissingVector,
                });
            }
        }
    }
    if missing > 0 {
        log::warn!("{missing} cold items lack vectors; their generated rows are zero");
    }
    Ok(GeneratedEmbeddings {
        targets,
        embeddings,
        provenance,
    })
}

/// Splice generated rows into a copy of a full embedding table.
pub fn splice_rows(base: &Matrix, generated: &GeneratedEmbeddings) -> Result<Matrix> {
    let mut out = base.clone();
    for (ri, &target) in generated.targets.iter().enumerate() {
        if (target as usize) >= out.rows() {
            return Err(IdpError::ItemOutOfRange {
                index: target,
                size: out.rows(),
            });
        }
        out.row_mut(target as usize)
            .copy_from_slice(generated.embeddings.row(ri));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
