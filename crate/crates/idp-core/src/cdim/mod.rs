//! Cross-Domain ID Matcher (CDIM).
//!
//! Frozen externally produced item vectors pass through a small
//! trainable adapter (two affine layers with GELU and dropout); the
//! adapter is tuned with two InfoNCE-style losses: a textual loss whose
//! positive pair is two dropout views of the same item, and a
//! behavior-involved loss whose positives are the item's nearest
//! neighbors in pre-trained ID-embedding space. The temperature tau and
//! the similarity (cosine by default) are fixed hyperparameters.

mod loss;
mod tune;
mod vectors;

pub use loss::{behavior_contrastive_loss, text_contrastive_loss};
pub use tune::{tune_cdim, CdimHyper, TuneReport};
pub use vectors::{LoadStats, Modality, TextVectorStore};

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::ckpt::{digest_bytes, Checkpoint};
use crate::error::{IdpError, Result};
use crate::linalg::{gelu, gelu_grad, Matrix, Similarity};
use crate::matcher;

/// Trainable adapter over frozen modality vectors, plus the contrastive
/// hyperparameters bound to it.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// D x d_a.
    pub w1: Matrix,
    /// 1 x d_a.
    pub b1: Matrix,
    /// d_a x d_a.
    pub w2: Matrix,
    /// 1 x d_a.
    pub b2: Matrix,
    /// Dropout rate rho; realizes the twin-view trick in train mode.
    pub dropout: f64,
    /// Temperature tau > 0.
    pub temperature: f64,
    pub similarity: Similarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Train,
    Infer,
}

impl AdapterParams {
    pub fn init(
        input_dim: usize,
        adapter_dim: usize,
        dropout: f64,
        temperature: f64,
        similarity: Similarity,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(IdpError::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(IdpError::InvalidArgument(format!(
                "dropout {dropout} outside [0,1)"
            )));
        }
        if input_dim == 0 || adapter_dim == 0 {
            return Err(IdpError::InvalidArgument("zero adapter dimensions".into()));
        }
        Ok(AdapterParams {
            w1: Matrix::randn(input_dim, adapter_dim, 1.0 / (input_dim as f64).sqrt(), rng),
            b1: Matrix::zeros(1, adapter_dim),
            w2: Matrix::randn(adapter_dim, adapter_dim, 1.0 / (adapter_dim as f64).sqrt(), rng),
            b2: Matrix::zeros(1, adapter_dim),
            dropout,
            temperature,
            similarity,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn adapter_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub const FIELDS: [&'static str; 4] = ["w1", "b1", "w2", "b2"];

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_vector(
            "meta",
            &[
                self.input_dim() as f64,
                self.adapter_dim() as f64,
                self.dropout,
                self.temperature,
                match self.similarity {
                    Similarity::Cosine => 0.0,
                    Similarity::Dot => 1.0,
                },
            ],
        );
        for (name, t) in Self::FIELDS.iter().zip(self.tensors()) {
            ck.push_matrix(&format!("adapter.{name}"), t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.require("meta")?;
        if meta.data.len() < 5 {
            return Err(IdpError::MissingTensor("meta (5 fields)".into()));
        }
        let (din, da) = (meta.data[0] as usize, meta.data[1] as usize);
        Ok(AdapterParams {
            w1: ck.require_matrix("adapter.w1", din, da)?,
            b1: ck.require_matrix("adapter.b1", 1, da)?,
            w2: ck.require_matrix("adapter.w2", da, da)?,
            b2: ck.require_matrix("adapter.b2", 1, da)?,
            dropout: meta.data[2],
            temperature: meta.data[3],
            similarity: if meta.data[4] == 0.0 {
                Similarity::Cosine
            } else {
                Similarity::Dot
            },
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().write_to(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read_from(path)?)
    }

    pub fn checksum(&self) -> String {
        digest_bytes(&self.to_checkpoint().to_bytes())
    }
}

pub(crate) struct EncodeCache {
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub mask: Option<Vec<f64>>,
    pub dropped: Vec<f64>,
    pub y: Vec<f64>,
}

/// Two-layer map y = dropout(gelu(x W1 + b1)) W2 + b2. In train mode an
/// independent inverted-dropout mask is sampled from `rng`; in infer
/// mode the output is a pure function of (adapter, x).
pub(crate) fn encode_cached(
    adapter: &AdapterParams,
    raw: &[f64],
    mode: EncodeMode,
    rng: Option<&mut ChaCha20Rng>,
) -> Result<EncodeCache> {
    if raw.len() != adapter.input_dim() {
        return Err(IdpError::DimMismatch {
            what: "adapter input".into(),
            expected: adapter.input_dim(),
            got: raw.len(),
        });
    }
    let da = adapter.adapter_dim();
    let mut pre = vec![0.0; da];
    for (r, &x) in raw.iter().enumerate() {
        if x != 0.0 {
            let wrow = adapter.w1.row(r);
            for j in 0..da {
                pre[j] += x * wrow[j];
            }
        }
    }
    for j in 0..da {
        pre[j] += adapter.b1.get(0, j);
    }
    let act: Vec<f64> = pre.iter().map(|&p| gelu(p)).collect();
    let mask = match (mode, rng) {
        (EncodeMode::Train, Some(r)) if adapter.dropout > 0.0 => {
            let keep = 1.0 / (1.0 - adapter.dropout);
            Some(
                (0..da)
                    .map(|_| if r.gen::<f64>() < adapter.dropout { 0.0 } else { keep })
                    .collect::<Vec<f64>>(),
            )
        }
        _ => None,
    };
    let dropped: Vec<f64> = match &mask {
        Some(m) => act.iter().zip(m).map(|(a, k)| a * k).collect(),
        None => act,
    };
    let mut y = vec![0.0; da];
    for (r, &a) in dropped.iter().enumerate() {
        if a != 0.0 {
            let wrow = adapter.w2.row(r);
            for j in 0..da {
                y[j] += a * wrow[j];
            }
        }
    }
    for j in 0..da {
        y[j] += adapter.b2.get(0, j);
    }
    Ok(EncodeCache {
        x: raw.to_vec(),
        pre,
        mask,
        dropped,
        y,
    })
}

/// Adapter forward; see [`encode_cached`].
pub fn encode(
    adapter: &AdapterParams,
    raw: &[f64],
    mode: EncodeMode,
    rng: Option<&mut ChaCha20Rng>,
) -> Result<Vec<f64>> {
    Ok(encode_cached(adapter, raw, mode, rng)?.y)
}

/// dLoss/dy -> adapter gradients (the input is frozen, so no dx).
pub(crate) fn encode_backward(
    adapter: &AdapterParams,
    cache: &EncodeCache,
    dy: &[f64],
    grads: &mut AdapterParams,
) {
    let da = adapter.adapter_dim();
    // y = dropped W2 + b2
    for (r, &a) in cache.dropped.iter().enumerate() {
        if a != 0.0 {
            let grow = grads.w2.row_mut(r);
            for j in 0..da {
                grow[j] += a * dy[j];
            }
        }
    }
    for j in 0..da {
        grads.b2.row_mut(0)[j] += dy[j];
    }
    let mut d_dropped = vec![0.0; da];
    for (r, dd) in d_dropped.iter_mut().enumerate() {
        *dd = crate::linalg::dot(dy, adapter.w2.row(r));
    }
    if let Some(m) = &cache.mask {
        for (dd, &k) in d_dropped.iter_mut().zip(m) {
            *dd *= k;
        }
    }
    // through gelu
    let mut d_pre = d_dropped;
    for (dp, &p) in d_pre.iter_mut().zip(&cache.pre) {
        *dp *= gelu_grad(p);
    }
    // pre = x W1 + b1
    for (r, &x) in cache.x.iter().enumerate() {
        if x != 0.0 {
            let grow = grads.w1.row_mut(r);
            for j in 0..da {
                grow[j] += x * d_pre[j];
            }
        }
    }
    for j in 0..da {
        grads.b1.row_mut(0)[j] += d_pre[j];
    }
}

/// Encode every item that has a vector, in infer mode; rows align with
/// global item indices (zero rows for missing vectors).
pub fn encode_all(adapter: &AdapterParams, store: &TextVectorStore) -> Result<(Matrix, Vec<bool>)> {
    let mut out = Matrix::zeros(store.num_items(), adapter.adapter_dim());
    let mut present = vec![false; store.num_items()];
    for v in 0..store.num_items() as u32 {
        if let Some(raw) = store.get(v) {
            let y = encode(adapter, raw, EncodeMode::Infer, None)?;
            out.row_mut(v as usize).copy_from_slice(&y);
            present[v as usize] = true;
        }
    }
    Ok((out, present))
}

/// Fuse one item's modality vectors and encode them with the fusion map
/// (an adapter over the concatenated input). A missing image vector
/// falls back to a zero-filled image slot, i.e. text-only information;
/// the caller counts and logs such items.
pub fn fuse_multimodal(
    fusion: &AdapterParams,
    text: &[f64],
    image: Option<&[f64]>,
    mode: EncodeMode,
    rng: Option<&mut ChaCha20Rng>,
) -> Result<Vec<f64>> {
    let image_dim = fusion.input_dim() - text.len();
    let mut concat = Vec::with_capacity(fusion.input_dim());
    concat.extend_from_slice(text);
    match image {
        Some(im) => {
            if im.len() != image_dim {
                return Err(IdpError::DimMismatch {
                    what: "fusion image slot".into(),
                    expected: image_dim,
                    got: im.len(),
                });
            }
            concat.extend_from_slice(im);
        }
        None => concat.resize(fusion.input_dim(), 0.0),
    }
    encode(fusion, &concat, mode, rng)
}

/// Per-item behavior positives V_s^{v_i}: the k most similar *other*
/// items by pre-trained ID-embedding similarity, ties broken toward the
/// lower item index.
#[derive(Clone, Debug)]
pub struct BehaviorPositives {
    pub k: usize,
    /// Indexed by item; each list has exactly k entries.
    pub lists: Vec<Vec<u32>>,
}

impl BehaviorPositives {
    pub fn get(&self, item: u32) -> &[u32] {
        &self.lists[item as usize]
    }
}

/// Mine positives from a frozen pre-trained embedding table.
pub fn mine_behavior_positives(
    embeddings: &Matrix,
    k: usize,
    similarity: Similarity,
) -> Result<BehaviorPositives> {
    let n = embeddings.rows();
    if k == 0 || k >= n {
        return Err(IdpError::InvalidArgument(format!(
            "positives k = {k} must satisfy 1 <= k < |V| = {n}"
        )));
    }
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        let neighbors =
            matcher::top_m_excluding(embeddings.row(i), embeddings, k, similarity, Some(i));
        lists.push(neighbors.into_iter().map(|nb| nb.source).collect());
    }
    Ok(BehaviorPositives { k, lists })
}

#[cfg(test)]
mod tests;
