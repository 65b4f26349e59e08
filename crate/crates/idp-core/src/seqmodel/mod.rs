//! The ID-based sequential recommender.
//!
//! An embedding layer (item table E plus position table P) feeds a
//! pluggable encoder: stacked causal self-attention blocks (the default)
//! or a gated-recurrent network. Either maps an item-index sequence to a
//! d-vector, the user representation at the last step. Training uses BPR
//! with one sampled negative per positive; all math is f64 and manual
//! (forward and backward), so gradients can be checked against finite
//! differences.

mod attention;
mod gru;
mod train;

pub use attention::AttnLayer;
pub use gru::GruParams;
pub use train::{
    example_loss, learned_text_table, pretrain, train, Adam, BprExample, TextTrainInputs,
    TrainOptions, TrainReport,
};

use rand_chacha::ChaCha20Rng;

use crate::ckpt::{digest_bytes, Checkpoint};
use crate::error::{IdpError, Result};
use crate::linalg::{dot, sigmoid, softplus, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Encoder backend kind. Both map a length-n index sequence to a
/// d-vector and share the embedding layer (h0 = e_v + p_i).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    CausalAttention,
    GatedRecurrent,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "causal-attention" => Ok(EncoderKind::CausalAttention),
            "gated-recurrent" => Ok(EncoderKind::GatedRecurrent),
            other => Err(IdpError::InvalidArgument(format!(
                "unknown encoder backend {other:?} (expected \"causal-attention\" or \"gated-recurrent\")"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::CausalAttention => "causal-attention",
            EncoderKind::GatedRecurrent => "gated-recurrent",
        }
    }

    fn code(&self) -> f64 {
        match self {
            EncoderKind::CausalAttention => 0.0,
            EncoderKind::GatedRecurrent => 1.0,
        }
    }
}

/// Architecture of a sequential model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelShape {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub kind: EncoderKind,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            dim: 64,
            layers: 2,
            heads: 2,
            max_len: 50,
            dropout: 0.2,
            kind: EncoderKind::CausalAttention,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(IdpError::InvalidArgument(
                "model shape fields must be positive".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(IdpError::InvalidArgument(format!(
                "embedding size {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(IdpError::InvalidArgument(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Encoder parameters Theta.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderParams {
    Attention(Vec<AttnLayer>),
    Gru(GruParams),
}

/// Learned affine projection of raw text vectors into the ID space,
/// trained jointly in the fine-tuning modes.
#[derive(Clone, Debug, PartialEq)]
pub struct TextProjection {
    /// D x d.
    pub weight: Matrix,
    /// 1 x d.
    pub bias: Matrix,
}

/// Trainable recommender state: embedding tables plus encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqModelParams {
    pub shape: ModelShape,
    /// |V| x d.
    pub item_embeddings: Matrix,
    /// max_len x d.
    pub position_embeddings: Matrix,
    pub encoder: EncoderParams,
    pub text_proj: Option<TextProjection>,
}

impl SeqModelParams {
    pub fn init(
        num_items: usize,
        shape: ModelShape,
        text_dim: Option<usize>,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        shape.validate()?;
        if num_items == 0 {
            return Err(IdpError::EmptyInput("cannot build a model over 0 items".into()));
        }
        let d = shape.dim;
        let std = 1.0 / (d as f64).sqrt();
        let item_embeddings = Matrix::randn(num_items, d, std, rng);
        let position_embeddings = Matrix::randn(shape.max_len, d, std, rng);
        let encoder = match shape.kind {
            EncoderKind::CausalAttention => EncoderParams::Attention(
                (0..shape.layers).map(|_| AttnLayer::init(d, std, rng)).collect(),
            ),
            EncoderKind::GatedRecurrent => EncoderParams::Gru(GruParams::init(d, std, rng)),
        };
        let text_proj = text_dim.map(|td| TextProjection {
            weight: Matrix::randn(td, d, 1.0 / (td as f64).sqrt(), rng),
            bias: Matrix::zeros(1, d),
        });
        Ok(SeqModelParams {
            shape,
            item_embeddings,
            position_embeddings,
            encoder,
            text_proj,
        })
    }

    pub fn num_items(&self) -> usize {
        self.item_embeddings.rows()
    }

    /// Same structure with every tensor zeroed; the gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.zero();
        out
    }

    pub fn zero(&mut self) {
        for t in self.tensors_flat_mut() {
            t.fill(0.0);
        }
    }

    /// Named tensors in a stable order (checkpoints, gradient checks).
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["item_embeddings".to_string(), "position_embeddings".to_string()];
        match &self.encoder {
            EncoderParams::Attention(layers) => {
                for l in 0..layers.len() {
                    for field in AttnLayer::FIELDS {
                        names.push(format!("encoder.l{l}.{field}"));
                    }
                }
            }
            EncoderParams::Gru(_) => {
                for field in GruParams::FIELDS {
                    names.push(format!("encoder.gru.{field}"));
                }
            }
        }
        if self.text_proj.is_some() {
            names.push("text_proj.weight".to_string());
            names.push("text_proj.bias".to_string());
        }
        names
    }

    /// Tensors in the same stable order as [`Self::tensor_names`].
    pub fn tensors_flat(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.item_embeddings, &self.position_embeddings];
        match &self.encoder {
            EncoderParams::Attention(layers) => {
                for l in layers {
                    out.extend(l.tensors());
                }
            }
            EncoderParams::Gru(g) => out.extend(g.tensors()),
        }
        if let Some(tp) = &self.text_proj {
            out.push(&tp.weight);
            out.push(&tp.bias);
        }
        out
    }

    pub fn tensors_flat_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> =
            vec![&mut self.item_embeddings, &mut self.position_embeddings];
        match &mut self.encoder {
            EncoderParams::Attention(layers) => {
                for l in layers {
                    out.extend(l.tensors_mut());
                }
            }
            EncoderParams::Gru(g) => out.extend(g.tensors_mut()),
        }
        if let Some(tp) = &mut self.text_proj {
            out.push(&mut tp.weight);
            out.push(&mut tp.bias);
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_vector(
            "meta",
            &[
                self.shape.dim as f64,
                self.shape.layers as f64,
                self.shape.heads as f64,
                self.shape.max_len as f64,
                self.shape.dropout,
                self.shape.kind.code(),
                if self.text_proj.is_some() { 1.0 } else { 0.0 },
                self.text_proj.as_ref().map_or(0.0, |tp| tp.weight.rows() as f64),
            ],
        );
        for (name, tensor) in self.tensor_names().iter().zip(self.tensors_flat()) {
            ck.push_matrix(name, tensor);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.require("meta")?;
        if meta.data.len() < 8 {
            return Err(IdpError::MissingTensor("meta (8 fields)".into()));
        }
        let kind = if meta.data[5] == 0.0 {
            EncoderKind::CausalAttention
        } else {
            EncoderKind::GatedRecurrent
        };
        let shape = ModelShape {
            dim: meta.data[0] as usize,
            layers: meta.data[1] as usize,
            heads: meta.data[2] as usize,
            max_len: meta.data[3] as usize,
            dropout: meta.data[4],
            kind,
        };
        shape.validate()?;
        let d = shape.dim;
        let e_entry = ck.require("item_embeddings")?;
        if e_entry.shape.len() != 2 || e_entry.shape[1] != d {
            return Err(IdpError::TensorShape {
                name: "item_embeddings".into(),
                expected: vec![0, d],
                got: e_entry.shape.clone(),
            });
        }
        let num_items = e_entry.shape[0];
        let item_embeddings = e_entry.to_matrix(Some((num_items, d)))?;
        let position_embeddings = ck.require_matrix("position_embeddings", shape.max_len, d)?;
        let encoder = match kind {
            EncoderKind::CausalAttention => {
                let mut layers = Vec::with_capacity(shape.layers);
                for l in 0..shape.layers {
                    layers.push(AttnLayer::from_checkpoint(ck, l, d)?);
                }
                EncoderParams::Attention(layers)
            }
            EncoderKind::GatedRecurrent => EncoderParams::Gru(GruParams::from_checkpoint(ck, d)?),
        };
        let text_proj = if meta.data[6] != 0.0 {
            let td = meta.data[7] as usize;
            Some(TextProjection {
                weight: ck.require_matrix("text_proj.weight", td, d)?,
                bias: ck.require_matrix("text_proj.bias", 1, d)?,
            })
        } else {
            None
        };
        Ok(SeqModelParams {
            shape,
            item_embeddings,
            position_embeddings,
            encoder,
            text_proj,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().write_to(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read_from(path)?)
    }

    /// Replace the embedding layer (E and P) from another checkpoint.
    /// Shapes must match; errors name the offending tensor.
    pub fn load_embeddings(&mut self, ck: &Checkpoint) -> Result<()> {
        let d = self.shape.dim;
        let e = ck.require("item_embeddings")?;
        if e.shape.len() != 2 || e.shape[1] != d {
            return Err(IdpError::TensorShape {
                name: "item_embeddings".into(),
                expected: vec![self.item_embeddings.rows(), d],
                got: e.shape.clone(),
            });
        }
        let item_embeddings = e.to_matrix(None)?;
        let position_embeddings = ck.require_matrix("position_embeddings", self.shape.max_len, d)?;
        self.item_embeddings = item_embeddings;
        self.position_embeddings = position_embeddings;
        Ok(())
    }

    /// Replace the encoder stack (Theta only) from another checkpoint of
    /// the same backend kind and width.
    pub fn load_encoder(&mut self, ck: &Checkpoint) -> Result<()> {
        let other = Self::from_checkpoint(ck)?;
        if other.shape.kind != self.shape.kind
            || other.shape.dim != self.shape.dim
            || other.shape.layers != self.shape.layers
            || other.shape.heads != self.shape.heads
        {
            return Err(IdpError::InvalidArgument(format!(
                "encoder exchange needs a matching architecture: have {:?}, checkpoint has {:?}",
                self.shape, other.shape
            )));
        }
        self.encoder = other.encoder;
        Ok(())
    }

    /// Hex digest of the serialized parameters; equal digests mean
    /// bit-identical tensors.
    pub fn checksum(&self) -> String {
        digest_bytes(&self.to_checkpoint().to_bytes())
    }

    /// User representation: encode an item-index sequence and return the
    /// final-layer vector at the last position (inference mode, dropout
    /// off). Sequences longer than max_len are truncated to the most
    /// recent max_len items with a logged count; an empty sequence is an
    /// error.
    pub fn forward(&self, seq: &[u32], text_add: Option<&Matrix>) -> Result<Vec<f64>> {
        let outputs = self.forward_all(seq, text_add)?;
        Ok(outputs.row(outputs.rows() - 1).to_vec())
    }

    /// Encoder outputs at every kept position (inference mode).
    pub fn forward_all(&self, seq: &[u32], text_add: Option<&Matrix>) -> Result<Matrix> {
        let seq = self.truncate(seq)?;
        let h0 = self.build_h0(seq, text_add)?;
        Ok(match &self.encoder {
            EncoderParams::Attention(layers) => {
                attention::forward_infer(layers, &h0, self.shape.heads)
            }
            EncoderParams::Gru(g) => gru::forward_infer(g, &h0),
        })
    }

    pub(crate) fn truncate<'s>(&self, seq: &'s [u32]) -> Result<&'s [u32]> {
        if seq.is_empty() {
            return Err(IdpError::EmptyInput("cannot encode an empty sequence".into()));
        }
        if seq.len() > self.shape.max_len {
            let dropped = seq.len() - self.shape.max_len;
            log::debug!(
                "truncating sequence of {} to most recent {} ({} dropped)",
                seq.len(),
                self.shape.max_len,
                dropped
            );
            Ok(&seq[dropped..])
        } else {
            Ok(seq)
        }
    }

    /// h0 rows: composed item representation plus position embedding.
    pub(crate) fn build_h0(&self, seq: &[u32], text_add: Option<&Matrix>) -> Result<Matrix> {
        let d = self.shape.dim;
        let mut h0 = Matrix::zeros(seq.len(), d);
        for (i, &v) in seq.iter().enumerate() {
            if (v as usize) >= self.num_items() {
                return Err(IdpError::ItemOutOfRange {
                    index: v,
                    size: self.num_items(),
                });
            }
            let e = self.item_embeddings.row(v as usize);
            let p = self.position_embeddings.row(i);
            let row = h0.row_mut(i);
            for j in 0..d {
                row[j] = e[j] + p[j];
            }
            if let Some(add) = text_add {
                let a = add.row(v as usize);
                for j in 0..d {
                    row[j] += a[j];
                }
            }
        }
        Ok(h0)
    }
}

/// Inner-product relevance of an item representation to a user
/// representation.
pub fn score(user_rep: &[f64], item_rep: &[f64]) -> f64 {
    dot(user_rep, item_rep)
}

/// BPR loss of one (positive, negative) score pair:
/// -log sigma(s_pos - s_neg), evaluated in log1p form.
pub fn bpr_loss(score_pos: f64, score_neg: f64) -> f64 {
    softplus(score_neg - score_pos)
}

/// d(bpr_loss)/d(score_pos); the negative score gets the opposite sign.
pub fn bpr_grad(score_pos: f64, score_neg: f64) -> f64 {
    sigmoid(score_pos - score_neg) - 1.0
}

/// A frozen model plus an optional additive text table (|V| x d): the
/// composed view used for scoring and ranking.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub params: &'a SeqModelParams,
    pub text_add: Option<&'a Matrix>,
}

impl<'a> Scorer<'a> {
    pub fn id_only(params: &'a SeqModelParams) -> Self {
        Scorer {
            params,
            text_add: None,
        }
    }

    pub fn item_rep(&self, v: u32) -> Result<Vec<f64>> {
        if (v as usize) >= self.params.num_items() {
            return Err(IdpError::ItemOutOfRange {
                index: v,
                size: self.params.num_items(),
            });
        }
        let mut rep = self.params.item_embeddings.row(v as usize).to_vec();
        if let Some(add) = self.text_add {
            for (r, a) in rep.iter_mut().zip(add.row(v as usize)) {
                *r += a;
            }
        }
        Ok(rep)
    }

    pub fn score_item(&self, user_rep: &[f64], v: u32) -> Result<f64> {
        Ok(score(user_rep, &self.item_rep(v)?))
    }

    pub fn user_representation(&self, seq: &[u32]) -> Result<Vec<f64>> {
        self.params.forward(seq, self.text_add)
    }

    /// BPR loss of a (user, positive, negative) triple under this view.
    pub fn bpr(&self, user_rep: &[f64], v_pos: u32, v_neg: u32) -> Result<f64> {
        Ok(bpr_loss(
            self.score_item(user_rep, v_pos)?,
            self.score_item(user_rep, v_neg)?,
        ))
    }
}
