//! ID-centric pre-training for recommendation (IDP).
//!
//! The crate covers the full pipeline:
//!
//! * [`dataset`] — interaction logs, filtering, multi-domain merging,
//!   leave-one-out splits, and a synthetic cross-domain corpus generator.
//! * [`seqmodel`] — the ID-based sequential recommender (causal
//!   self-attention or gated-recurrent encoder) trained with BPR, plus
//!   binary checkpoints.
//! * [`cdim`] — the cross-domain ID matcher: frozen item text/image
//!   vectors, a trainable adapter, and the textual / behavior-involved
//!   contrastive losses.
//! * [`matcher`] — exact and approximate (HNSW) top-m retrieval in
//!   adapted vector space and similarity-weighted embedding synthesis.
//! * [`transfer`] — zero-shot / fine-tune / re-train deployment of
//!   generated embeddings, ID+text input composition, and PCA.
//! * [`eval`] — leave-one-out ranking with 99 sampled negatives and
//!   HR@K / NDCG@K / MRR reports.
//!
//! Everything is f64, single-threaded, and deterministic given a seed.

pub mod cdim;
pub mod ckpt;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod matcher;
pub mod rng;
pub mod seqmodel;
pub mod transfer;

pub use error::{IdpError, Result};
pub use linalg::{Matrix, Similarity};
