//! Frozen per-item modality vectors.
//!
//! The external encoder (a sentence or vision model) is outside this
//! artifact; its outputs arrive as TSV files `item<TAB>v1,v2,...,vD`,
//! one file per domain, and are stored here keyed by global item index.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::InteractionStore;
use crate::error::{IdpError, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
    Fused,
}

impl Modality {
    pub fn name(&self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Fused => "fused",
        }
    }
}

/// Per-load bookkeeping: rows consumed and rows whose item id is not in
/// the store (they are skipped with a logged count, e.g. items dropped
/// by filtering).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub loaded: usize,
    pub unknown_items: usize,
}

/// One vector per item in scope, all the same dimension, frozen.
#[derive(Clone, Debug)]
pub struct TextVectorStore {
    dim: usize,
    modality: Modality,
    vectors: Vec<Option<Vec<f64>>>,
}

impl TextVectorStore {
    pub fn new(num_items: usize, dim: usize, modality: Modality) -> Self {
        TextVectorStore {
            dim,
            modality,
            vectors: vec![None; num_items],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn num_items(&self) -> usize {
        self.vectors.len()
    }

    pub fn coverage(&self) -> usize {
        self.vectors.iter().filter(|v| v.is_some()).count()
    }

    pub fn insert(&mut self, item: u32, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(IdpError::DimMismatch {
                what: format!("vector for item {item}"),
                expected: self.dim,
                got: vector.len(),
            });
        }
        if !vector.iter().all(|x| x.is_finite()) {
            return Err(IdpError::InvalidArgument(format!(
                "non-finite vector for item {item}"
            )));
        }
        let slot = self
            .vectors
            .get_mut(item as usize)
            .ok_or(IdpError::ItemOutOfRange {
                index: item,
                size: 0,
            })?;
        *slot = Some(vector);
        Ok(())
    }

    pub fn get(&self, item: u32) -> Option<&[f64]> {
        self.vectors
            .get(item as usize)
            .and_then(|v| v.as_deref())
    }

    pub fn require(&self, item: u32) -> Result<&[f64]> {
        self.get(item).ok_or(IdpError::MissingVector { item })
    }

    /// Load one domain's TSV; item ids resolve against `(domain, item)`.
    pub fn load_domain_tsv(
        &mut self,
        path: impl AsRef<Path>,
        store: &InteractionStore,
        domain: &str,
    ) -> Result<LoadStats> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| IdpError::io(path, e))?;
        let mut stats = LoadStats::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let (item, rest) = line.split_once('\t').ok_or_else(|| IdpError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "expected item<TAB>v1,v2,...".into(),
            })?;
            let vector: Vec<f64> = rest
                .split(',')
                .map(|x| {
                    x.parse::<f64>().map_err(|_| IdpError::Parse {
                        path: path.to_path_buf(),
                        line: lineno,
                        msg: format!("bad float {x:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            if vector.len() != self.dim {
                return Err(IdpError::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("expected {} dims, got {}", self.dim, vector.len()),
                });
            }
            match store.lookup_item(domain, item) {
                Some(v) => {
                    self.insert(v, vector)?;
                    stats.loaded += 1;
                }
                None => stats.unknown_items += 1,
            }
        }
        if stats.unknown_items > 0 {
            log::info!(
                "{}: skipped {} vector rows for items not in the store",
                path.display(),
                stats.unknown_items
            );
        }
        if stats.loaded == 0 {
            return Err(IdpError::EmptyInput(format!(
                "{}: no vectors matched items of domain {domain:?}",
                path.display()
            )));
        }
        Ok(stats)
    }

    /// Build a store from per-domain TSV files; the dimension comes from
    /// the first data row.
    pub fn from_files(
        store: &InteractionStore,
        files: &[(String, std::path::PathBuf)],
        modality: Modality,
    ) -> Result<(Self, LoadStats)> {
        let first = files
            .first()
            .ok_or_else(|| IdpError::EmptyInput("no vector files".into()))?;
        let dim = sniff_dim(&first.1)?;
        let mut vs = TextVectorStore::new(store.num_items(), dim, modality);
        let mut total = LoadStats::default();
        for (domain, path) in files {
            let stats = vs.load_domain_tsv(path, store, domain)?;
            total.loaded += stats.loaded;
            total.unknown_items += stats.unknown_items;
        }
        Ok((vs, total))
    }

    /// Export one domain's vectors in the same TSV format (shortest
    /// round-trip float formatting).
    pub fn export_domain_tsv(
        &self,
        path: impl AsRef<Path>,
        store: &InteractionStore,
        domain: &str,
    ) -> Result<usize> {
        let path = path.as_ref();
        let d = store
            .domain_index(domain)
            .ok_or_else(|| IdpError::InvalidArgument(format!("unknown domain {domain:?}")))?;
        let mut out = String::new();
        let mut rows = 0;
        for v in store.items_of_domain(d) {
            if let Some(vec) = self.get(v) {
                let joined: Vec<String> = vec.iter().map(|x| format!("{x}")).collect();
                let _ = writeln!(out, "{}\t{}", store.item_key(v).1, joined.join(","));
                rows += 1;
            }
        }
        fs::write(path, out).map_err(|e| IdpError::io(path, e))?;
        Ok(rows)
    }

    /// Dense matrix view (zero rows for missing vectors) plus a presence
    /// mask; the layout training code consumes.
    pub fn dense(&self) -> (Matrix, Vec<bool>) {
        let mut m = Matrix::zeros(self.vectors.len(), self.dim);
        let mut present = vec![false; self.vectors.len()];
        for (i, v) in self.vectors.iter().enumerate() {
            if let Some(vec) = v {
                m.row_mut(i).copy_from_slice(vec);
                present[i] = true;
            }
        }
        (m, present)
    }

    /// Items that have vectors, in index order.
    pub fn items_with_vectors(&self) -> Vec<u32> {
        (0..self.vectors.len() as u32)
            .filter(|&v| self.vectors[v as usize].is_some())
            .collect()
    }

    /// Concatenate text and image stores into a fused store. Items
    /// lacking an image vector fall back to a zero-filled image slot
    /// (text-only information) with a logged count; items lacking a
    /// text vector stay missing.
    pub fn fused(text: &TextVectorStore, image: &TextVectorStore) -> Result<(TextVectorStore, usize)> {
        if text.num_items() != image.num_items() {
            return Err(IdpError::DimMismatch {
                what: "fused store item counts".into(),
                expected: text.num_items(),
                got: image.num_items(),
            });
        }
        let dim = text.dim + image.dim;
        let mut out = TextVectorStore::new(text.num_items(), dim, Modality::Fused);
        let mut missing_images = 0usize;
        for v in 0..text.num_items() as u32 {
            let Some(t) = text.get(v) else { continue };
            let mut fused = Vec::with_capacity(dim);
            fused.extend_from_slice(t);
            match image.get(v) {
                Some(im) => fused.extend_from_slice(im),
                None => {
                    fused.resize(dim, 0.0);
                    missing_images += 1;
                }
            }
            out.insert(v, fused)?;
        }
        if missing_images > 0 {
            log::warn!("fused store: {missing_images} items lack an image vector, using text only");
        }
        Ok((out, missing_images))
    }
}

fn sniff_dim(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| IdpError::io(path, e))?;
    let first = text.lines().next().ok_or_else(|| {
        IdpError::EmptyInput(format!("{}: empty vector file", path.display()))
    })?;
    let (_, rest) = first.split_once('\t').ok_or_else(|| IdpError::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "expected item<TAB>v1,v2,...".into(),
    })?;
    Ok(rest.split(',').count())
}
