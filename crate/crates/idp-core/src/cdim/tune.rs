//! Adapter tuning: multi-task sum of the textual and behavior losses
//! with unit weights, Adam, and early stopping on a held-out 10% item
//! split's combined loss.

use rand::seq::SliceRandom;

use crate::error::{IdpError, Result};
use crate::linalg::Similarity;
use crate::rng::{derive_rng, derive_rng_indexed};
use crate::seqmodel::Adam;

use super::{
    loss::{behavior_contrastive_impl, text_contrastive_impl},
    AdapterParams, BehaviorPositives, TextVectorStore,
};

#[derive(Clone, Debug)]
pub struct CdimHyper {
    pub adapter_dim: usize,
    /// Dropout rate rho.
    pub dropout: f64,
    /// Temperature tau.
    pub temperature: f64,
    /// Behavior positives per item (k).
    pub positives: usize,
    pub similarity: Similarity,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
}

impl Default for CdimHyper {
    fn default() -> Self {
        CdimHyper {
            adapter_dim: 64,
            dropout: 0.1,
            temperature: 0.05,
            positives: 10,
            similarity: Similarity::Cosine,
            batch_size: 128,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 20,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TuneReport {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_holdout_loss: f64,
    pub train_losses: Vec<f64>,
    pub holdout_losses: Vec<f64>,
    pub diverged: bool,
}

/// Train the adapter on all items of the vector store. Every item must
/// have a vector and mined positives. Returns the best-holdout snapshot.
pub fn tune_cdim(
    store: &TextVectorStore,
    positives: &BehaviorPositives,
    hyper: &CdimHyper,
    seed: u64,
) -> Result<(AdapterParams, TuneReport)> {
    let n = store.num_items();
    for v in 0..n as u32 {
        store.require(v)?;
    }
    if positives.lists.len() != n {
        return Err(IdpError::DimMismatch {
            what: "positives lists vs store items".into(),
            expected: n,
            got: positives.lists.len(),
        });
    }
    if n < 4 {
        return Err(IdpError::InvalidArgument(format!(
            "cdim tuning needs >= 4 items, got {n}"
        )));
    }

    let mut items: Vec<u32> = (0..n as u32).collect();
    items.shuffle(&mut derive_rng(seed, "cdim.holdout"));
    let n_hold = ((n as f64 * hyper.holdout_fraction).round() as usize).clamp(2, n - 2);
    let holdout: Vec<u32> = items[n - n_hold..].to_vec();
    let train_items: Vec<u32> = items[..n - n_hold].to_vec();

    let mut adapter = AdapterParams::init(
        store.dim(),
        hyper.adapter_dim,
        hyper.dropout,
        hyper.temperature,
        hyper.similarity,
        &mut derive_rng(seed, "cdim.init"),
    )?;
    let mut report = TuneReport::default();
    if hyper.max_epochs == 0 {
        return Ok((adapter, report));
    }

    let mut adam = Adam::new(hyper.learning_rate, &adapter.tensors());
    let mut grads = adapter.zeros_like();
    let mut best: Option<(f64, usize, AdapterParams)> = None;
    let mut last_finite = adapter.clone();
    let mut since_best = 0usize;

    let holdout_loss = |adapter: &AdapterParams| -> Result<f64> {
        // fixed masks per evaluation: the stream restarts every call
        let mut rng = derive_rng(seed, "cdim.eval");
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in holdout.chunks(hyper.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let lt = text_contrastive_impl(adapter, store, chunk, &mut rng, None)?;
            let lb = behavior_contrastive_impl(adapter, store, chunk, positives, &mut rng, None)?;
            total += (lt + lb) * chunk.len() as f64;
            count += chunk.len();
        }
        if count == 0 {
            return Err(IdpError::InvalidArgument("holdout produced no batches".into()));
        }
        Ok(total / count as f64)
    };

    for epoch in 0..hyper.max_epochs {
        let mut rng = derive_rng_indexed(seed, "cdim.epoch", epoch as u64);
        let mut order = train_items.clone();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_items = 0usize;
        let mut finite = true;
        for chunk in order.chunks(hyper.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            grads.zero();
            let lt = text_contrastive_impl(&adapter, store, chunk, &mut rng, Some(&mut grads))?;
            let lb = behavior_contrastive_impl(
                &adapter,
                store,
                chunk,
                positives,
                &mut rng,
                Some(&mut grads),
            )?;
            let loss = lt + lb;
            if !loss.is_finite() {
                finite = false;
                break;
            }
            adam.step(&mut adapter.tensors_mut(), &grads.tensors());
            epoch_loss += loss * chunk.len() as f64;
            epoch_items += chunk.len();
        }

        if !finite {
            log::error!("cdim tuning diverged at epoch {epoch}; returning last finite adapter");
            report.diverged = true;
            report.epochs_run = epoch;
            return Ok((last_finite, report));
        }
        report.train_losses.push(epoch_loss / epoch_items.max(1) as f64);
        report.epochs_run = epoch + 1;

        let hl = holdout_loss(&adapter)?;
        report.holdout_losses.push(hl);
        last_finite = adapter.clone();
        let improved = best.as_ref().map_or(true, |(b, _, _)| hl < *b);
        if improved {
            best = Some((hl, epoch, adapter.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > hyper.patience {
                log::info!(
                    "cdim early stop at epoch {epoch}: no holdout improvement in {} epochs",
                    hyper.patience
                );
                break;
            }
        }
    }

    let (best_loss, best_epoch, best_adapter) = best.expect("at least one epoch ran");
    report.best_epoch = Some(best_epoch);
    report.best_holdout_loss = best_loss;
    Ok((best_adapter, report))
}
