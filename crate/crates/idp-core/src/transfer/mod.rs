//! Downstream deployment of generated embeddings.
//!
//! Three modes: zero-shot keeps the transferred parameters {E^T, P,
//! Theta} verbatim with no updates; finetune-all optimizes all of them
//! on the downstream split; retrain-encoder draws a fresh encoder (any
//! backend) and fresh position table while keeping E^T as the trainable
//! initialization. ID+text composition adds a projected text vector to
//! the ID embedding: a PCA projection fit on pre-training vectors in
//! zero-shot, a jointly learned affine map in the training modes.

mod pca;

pub use pca::{fit_pca, PcaModel};

use rand_chacha::ChaCha20Rng;

use crate::cdim::TextVectorStore;
use crate::dataset::LeaveOneOutSplit;
use crate::error::{IdpError, Result};
use crate::linalg::Matrix;
use crate::matcher::GeneratedEmbeddings;
use crate::rng::derive_rng;
use crate::seqmodel::{
    train, EncoderKind, ModelShape, SeqModelParams, TextProjection, TextTrainInputs, TrainOptions,
    TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeploymentMode {
    ZeroShot,
    FinetuneAll,
    RetrainEncoder,
}

impl DeploymentMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero-shot" => Ok(DeploymentMode::ZeroShot),
            "finetune-all" => Ok(DeploymentMode::FinetuneAll),
            "retrain-encoder" => Ok(DeploymentMode::RetrainEncoder),
            other => Err(IdpError::InvalidArgument(format!(
                "unknown deployment mode {other:?} (expected zero-shot | finetune-all | retrain-encoder)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DeploymentMode::ZeroShot => "zero-shot",
            DeploymentMode::FinetuneAll => "finetune-all",
            DeploymentMode::RetrainEncoder => "retrain-encoder",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextProjectionKind {
    Pca,
    Learned,
}

impl TextProjectionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(TextProjectionKind::Pca),
            "learned" => Ok(TextProjectionKind::Learned),
            other => Err(IdpError::InvalidArgument(format!(
                "unknown text projection {other:?} (expected pca | learned)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeployOptions {
    pub mode: DeploymentMode,
    pub use_text: bool,
    pub text_projection: TextProjectionKind,
    /// Backend for the fresh encoder in retrain-encoder mode.
    pub retrain_kind: EncoderKind,
    pub train: TrainOptions,
}

/// Assemble the E^T table for a downstream catalog of `num_items`; every
/// row must be covered by the generated embeddings.
pub fn generated_table(generated: &GeneratedEmbeddings, num_items: usize, dim: usize) -> Result<Matrix> {
    if generated.embeddings.cols() != dim {
        return Err(IdpError::DimMismatch {
            what: "generated embedding width".into(),
            expected: dim,
            got: generated.embeddings.cols(),
        });
    }
    let mut table = Matrix::zeros(num_items, dim);
    let mut covered = vec![false; num_items];
    for (ri, &target) in generated.targets.iter().enumerate() {
        if (target as usize) >= num_items {
            return Err(IdpError::ItemOutOfRange {
                index: target,
                size: num_items,
            });
        }
        table.row_mut(target as usize).copy_from_slice(generated.embeddings.row(ri));
        covered[target as usize] = true;
    }
    if let Some(missing) = covered.iter().position(|&c| !c) {
        return Err(IdpError::MissingVector {
            item: missing as u32,
        });
    }
    Ok(table)
}

/// Deploy a pre-trained model with generated embeddings on a downstream
/// split. Zero-shot performs no updates and returns the transferred
/// tensors verbatim; the training modes return the trained model plus a
/// report.
pub fn deploy(
    pretrained: &SeqModelParams,
    generated_items: &Matrix,
    split: &LeaveOneOutSplit,
    text: Option<&TextVectorStore>,
    opts: &DeployOptions,
) -> Result<(SeqModelParams, Option<TrainReport>)> {
    let d = pretrained.shape.dim;
    if generated_items.cols() != d {
        return Err(IdpError::DimMismatch {
            what: "generated embeddings width".into(),
            expected: d,
            got: generated_items.cols(),
        });
    }
    if generated_items.rows() != split.num_items {
        return Err(IdpError::DimMismatch {
            what: "generated embeddings rows vs downstream catalog".into(),
            expected: split.num_items,
            got: generated_items.rows(),
        });
    }

    let learned_text = opts.use_text && opts.text_projection == TextProjectionKind::Learned;
    if opts.use_text && text.is_none() {
        return Err(IdpError::InvalidArgument(
            "text composition requested but no vector store provided".into(),
        ));
    }
    if learned_text && opts.mode == DeploymentMode::ZeroShot {
        return Err(IdpError::InvalidArgument(
            "zero-shot forbids parameter updates; use the pca text projection".into(),
        ));
    }

    let mut init = match opts.mode {
        DeploymentMode::ZeroShot | DeploymentMode::FinetuneAll => SeqModelParams {
            shape: pretrained.shape,
            item_embeddings: generated_items.clone(),
            position_embeddings: pretrained.position_embeddings.clone(),
            encoder: pretrained.encoder.clone(),
            text_proj: None,
        },
        DeploymentMode::RetrainEncoder => {
            let shape = ModelShape {
                kind: opts.retrain_kind,
                ..pretrained.shape
            };
            let mut rng: ChaCha20Rng = derive_rng(opts.train.seed, "transfer.retrain_init");
            let fresh = SeqModelParams::init(split.num_items, shape, None, &mut rng)?;
            SeqModelParams {
                shape,
                item_embeddings: generated_items.clone(),
                position_embeddings: fresh.position_embeddings,
                encoder: fresh.encoder,
                text_proj: None,
            }
        }
    };

    match opts.mode {
        DeploymentMode::ZeroShot => Ok((init, None)),
        DeploymentMode::FinetuneAll | DeploymentMode::RetrainEncoder => {
            let dense;
            let text_inputs = if learned_text {
                let store = text.unwrap();
                let mut rng: ChaCha20Rng = derive_rng(opts.train.seed, "transfer.text_proj_init");
                init.text_proj = Some(TextProjection {
                    weight: Matrix::randn(store.dim(), d, 1.0 / (store.dim() as f64).sqrt(), &mut rng),
                    bias: Matrix::zeros(1, d),
                });
                dense = store.dense();
                Some(TextTrainInputs {
                    raw: &dense.0,
                    present: &dense.1,
                })
            } else {
                None
            };
            let (params, report) = train(init, split, &opts.train, text_inputs)?;
            Ok((params, Some(report)))
        }
    }
}

/// Additive table proj(t_v) for zero-shot ID+text scoring: PCA fit on
/// pre-training vectors, applied to the downstream store. Items without
/// vectors contribute zero rows; their count is returned and logged.
pub fn pca_text_table(
    pca: &PcaModel,
    vectors: &TextVectorStore,
    dim: usize,
) -> Result<(Matrix, usize)> {
    if pca.output_dim() != dim {
        return Err(IdpError::DimMismatch {
            what: "pca projection width".into(),
            expected: dim,
            got: pca.output_dim(),
        });
    }
    let mut table = Matrix::zeros(vectors.num_items(), dim);
    let mut missing = 0usize;
    for v in 0..vectors.num_items() as u32 {
        match vectors.get(v) {
            Some(raw) => {
                let proj = pca.project(raw)?;
                table.row_mut(v as usize).copy_from_slice(&proj);
            }
            None => missing += 1,
        }
    }
    if missing > 0 {
        log::info!("{missing} items lack text vectors; composed input falls back to the ID embedding");
    }
    Ok((table, missing))
}

/// A text projection for input composition.
pub enum Projection<'a> {
    Pca(&'a PcaModel),
    Learned(&'a TextProjection),
}

impl Projection<'_> {
    pub fn project(&self, t: &[f64]) -> Result<Vec<f64>> {
        match self {
            Projection::Pca(p) => p.project(t),
            Projection::Learned(tp) => {
                if t.len() != tp.weight.rows() {
                    return Err(IdpError::DimMismatch {
                        what: "learned projection input".into(),
                        expected: tp.weight.rows(),
                        got: t.len(),
                    });
                }
                let d = tp.weight.cols();
                let mut out = vec![0.0; d];
                for (r, &x) in t.iter().enumerate() {
                    if x != 0.0 {
                        let wrow = tp.weight.row(r);
                        for j in 0..d {
                            out[j] += x * wrow[j];
                        }
                    }
                }
                for (j, o) in out.iter_mut().enumerate() {
                    *o += tp.bias.get(0, j);
                }
                Ok(out)
            }
        }
    }
}

/// Composed model input e_id + proj(t); a missing text vector returns
/// the ID embedding unchanged (the caller counts such items).
pub fn compose_input(e_id: &[f64], t: Option<&[f64]>, proj: &Projection) -> Result<Vec<f64>> {
    match t {
        None => Ok(e_id.to_vec()),
        Some(t) => {
            let p = proj.project(t)?;
            if p.len() != e_id.len() {
                return Err(IdpError::DimMismatch {
                    what: "projected text vector".into(),
                    expected: e_id.len(),
                    got: p.len(),
                });
            }
            Ok(e_id.iter().zip(&p).map(|(a, b)| a + b).collect())
        }
    }
}
