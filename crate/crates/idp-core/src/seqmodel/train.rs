//! BPR training with adaptive moment estimation.
//!
//! Every prefix position of a user's train sequence is a positive paired
//! with one uniformly sampled negative (resampled per epoch). Batches
//! are user chunks; the loss is averaged over the pairs in the batch.
//! Early stopping tracks validation NDCG@5; the best snapshot is
//! returned. Single-threaded and bit-deterministic given the seed.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::dataset::LeaveOneOutSplit;
use crate::error::{IdpError, Result};
use crate::eval;
use crate::linalg::Matrix;
use crate::rng::{derive_rng, derive_rng_indexed};

use super::{attention, bpr_grad, bpr_loss, gru, EncoderParams, ModelShape, Scorer, SeqModelParams};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 20,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_valid_ndcg: f64,
    pub train_losses: Vec<f64>,
    pub valid_ndcgs: Vec<f64>,
    pub diverged: bool,
}

/// Raw per-item text vectors for joint training of the learned text
/// projection. Rows align with global item indices; `present[v]` is
/// false for items without a vector (those fall back to the ID path).
#[derive(Clone, Copy)]
pub struct TextTrainInputs<'a> {
    pub raw: &'a Matrix,
    pub present: &'a [bool],
}

/// Adam optimizer over an aligned tensor list.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, tensors: &[&Matrix]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: tensors.iter().map(|t| t.zeros_like()).collect(),
            v: tensors.iter().map(|t| t.zeros_like()).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pm = p.as_mut_slice();
            let gm = g.as_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for i in 0..pm.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gm[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gm[i] * gm[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                pm[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub(crate) enum EncoderCache {
    Attention(attention::AttnCache),
    Gru(gru::GruCache),
}

pub(crate) fn encoder_forward_train(
    params: &SeqModelParams,
    h0: &Matrix,
    rng: Option<&mut ChaCha20Rng>,
) -> (Matrix, EncoderCache) {
    match &params.encoder {
        EncoderParams::Attention(layers) => {
            let (out, cache) =
                attention::forward_train(layers, h0, params.shape.heads, params.shape.dropout, rng);
            (out, EncoderCache::Attention(cache))
        }
        EncoderParams::Gru(g) => {
            let (out, cache) = gru::forward_train(g, h0, params.shape.dropout, rng);
            (out, EncoderCache::Gru(cache))
        }
    }
}

pub(crate) fn encoder_backward(
    params: &SeqModelParams,
    cache: &EncoderCache,
    d_out: &Matrix,
    grads: &mut SeqModelParams,
) -> Matrix {
    match (&params.encoder, cache, &mut grads.encoder) {
        (
            EncoderParams::Attention(layers),
            EncoderCache::Attention(c),
            EncoderParams::Attention(g),
        ) => attention::backward(layers, c, d_out, g),
        (EncoderParams::Gru(p), EncoderCache::Gru(c), EncoderParams::Gru(g)) => {
            gru::backward(p, c, d_out, g)
        }
        _ => unreachable!("encoder/cache/grads kind mismatch"),
    }
}

/// Composed item representation at training time.
fn train_item_rep(params: &SeqModelParams, text: Option<&TextTrainInputs>, v: u32) -> Vec<f64> {
    let mut rep = params.item_embeddings.row(v as usize).to_vec();
    if let (Some(t), Some(proj)) = (text, &params.text_proj) {
        if t.present[v as usize] {
            let raw = t.raw.row(v as usize);
            for (j, r) in rep.iter_mut().enumerate() {
                let mut add = proj.bias.get(0, j);
                for (r_in, &x) in raw.iter().enumerate() {
                    add += x * proj.weight.get(r_in, j);
                }
                *r += add;
            }
        }
    }
    rep
}

/// dLoss/d(rep of item v) -> item-embedding grads plus (if the item has
/// a text vector) projection grads.
fn accumulate_rep_grad(
    grads: &mut SeqModelParams,
    text: Option<&TextTrainInputs>,
    v: u32,
    d_rep: &[f64],
) {
    let row = grads.item_embeddings.row_mut(v as usize);
    for (g, &dv) in row.iter_mut().zip(d_rep) {
        *g += dv;
    }
    if let (Some(t), Some(proj)) = (text, &mut grads.text_proj) {
        if t.present[v as usize] {
            let raw = t.raw.row(v as usize);
            for (r_in, &x) in raw.iter().enumerate() {
                if x != 0.0 {
                    let wrow = proj.weight.row_mut(r_in);
                    for (c, &dv) in d_rep.iter().enumerate() {
                        wrow[c] += x * dv;
                    }
                }
            }
            let brow = proj.bias.row_mut(0);
            for (c, &dv) in d_rep.iter().enumerate() {
                brow[c] += dv;
            }
        }
    }
}

/// Additive text table for evaluation-time scoring with the learned
/// projection (zero rows for absent vectors).
pub fn learned_text_table(params: &SeqModelParams, text: &TextTrainInputs) -> Matrix {
    let d = params.shape.dim;
    let proj = params.text_proj.as_ref().expect("text projection missing");
    let mut table = Matrix::zeros(text.raw.rows(), d);
    for v in 0..text.raw.rows() {
        if !text.present[v] {
            continue;
        }
        let raw = text.raw.row(v);
        let row = table.row_mut(v);
        for (j, cell) in row.iter_mut().enumerate() {
            let mut add = proj.bias.get(0, j);
            for (r_in, &x) in raw.iter().enumerate() {
                add += x * proj.weight.get(r_in, j);
            }
            *cell = add;
        }
    }
    table
}

/// One training example: input positions, their next-item targets, and
/// one sampled negative per position.
#[derive(Clone, Debug)]
pub struct BprExample {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub negatives: Vec<u32>,
}

/// Build h0 for training (the composed rep plus position rows).
fn build_train_h0(params: &SeqModelParams, text: Option<&TextTrainInputs>, seq: &[u32]) -> Matrix {
    let d = params.shape.dim;
    let mut h0 = Matrix::zeros(seq.len(), d);
    for (i, &v) in seq.iter().enumerate() {
        let rep = train_item_rep(params, text, v);
        let p = params.position_embeddings.row(i);
        let row = h0.row_mut(i);
        for j in 0..d {
            row[j] = rep[j] + p[j];
        }
    }
    h0
}

/// Summed BPR loss of one example; optionally accumulates gradients.
/// With `rng = None`, dropout is off and this is the exact function the
/// gradient checks differentiate.
pub fn example_loss(
    params: &SeqModelParams,
    text: Option<&TextTrainInputs>,
    example: &BprExample,
    rng: Option<&mut ChaCha20Rng>,
    mut grads: Option<&mut SeqModelParams>,
) -> f64 {
    assert_eq!(example.inputs.len(), example.targets.len());
    assert_eq!(example.inputs.len(), example.negatives.len());
    let h0 = build_train_h0(params, text, &example.inputs);
    let (outputs, cache) = encoder_forward_train(params, &h0, rng);
    let n = example.inputs.len();
    let d = params.shape.dim;
    let mut d_out = Matrix::zeros(n, d);
    let mut loss = 0.0;

    for t in 0..n {
        let pos = example.targets[t];
        let neg = example.negatives[t];
        let rep_pos = train_item_rep(params, text, pos);
        let rep_neg = train_item_rep(params, text, neg);
        let e_t = outputs.row(t);
        let s_pos = super::score(e_t, &rep_pos);
        let s_neg = super::score(e_t, &rep_neg);
        loss += bpr_loss(s_pos, s_neg);
        if let Some(g) = grads.as_deref_mut() {
            let gl = bpr_grad(s_pos, s_neg);
            {
                let row = d_out.row_mut(t);
                for j in 0..d {
                    row[j] += gl * (rep_pos[j] - rep_neg[j]);
                }
            }
            let d_rep_pos: Vec<f64> = e_t.iter().map(|&x| gl * x).collect();
            let d_rep_neg: Vec<f64> = e_t.iter().map(|&x| -gl * x).collect();
            accumulate_rep_grad(g, text, pos, &d_rep_pos);
            accumulate_rep_grad(g, text, neg, &d_rep_neg);
        }
    }

    if let Some(g) = grads {
        let d_h0 = encoder_backward(params, &cache, &d_out, g);
        for (i, &v) in example.inputs.iter().enumerate() {
            let drow = d_h0.row(i).to_vec();
            accumulate_rep_grad(g, text, v, &drow);
            let prow = g.position_embeddings.row_mut(i);
            for (p, &dv) in prow.iter_mut().zip(&drow) {
                *p += dv;
            }
        }
    }
    loss
}

/// Initialize a fresh model and train on the split (the pre-training
/// entry point).
pub fn pretrain(
    num_items: usize,
    split: &LeaveOneOutSplit,
    shape: ModelShape,
    opts: &TrainOptions,
) -> Result<(SeqModelParams, TrainReport)> {
    let mut rng = derive_rng(opts.seed, "seqmodel.init");
    let params = SeqModelParams::init(num_items, shape, None, &mut rng)?;
    train(params, split, opts, None)
}

/// Train (or fine-tune) a model on a split, starting from `init`.
/// Returns the best-validation snapshot (with `max_epochs = 0`, the
/// initial parameters unchanged). A non-finite loss aborts with the
/// last finite parameters and `diverged = true`.
pub fn train(
    init: SeqModelParams,
    split: &LeaveOneOutSplit,
    opts: &TrainOptions,
    text: Option<TextTrainInputs>,
) -> Result<(SeqModelParams, TrainReport)> {
    if split.users.is_empty() {
        return Err(IdpError::EmptyInput("split has no users".into()));
    }
    let catalog = split.num_items;
    if init.num_items() != catalog {
        return Err(IdpError::DimMismatch {
            what: "item embedding rows vs catalog".into(),
            expected: catalog,
            got: init.num_items(),
        });
    }
    let mut params = init;
    let mut report = TrainReport::default();
    if opts.max_epochs == 0 {
        return Ok((params, report));
    }

    let mut adam = Adam::new(opts.learning_rate, &params.tensors_flat());
    let mut grads = params.zeros_like();
    let max_window = params.shape.max_len + 1;

    let mut best: Option<(f64, usize, SeqModelParams)> = None;
    let mut last_finite = params.clone();
    let mut since_best = 0usize;

    for epoch in 0..opts.max_epochs {
        let mut rng = derive_rng_indexed(opts.seed, "seqmodel.epoch", epoch as u64);
        let mut order: Vec<usize> = (0..split.users.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_pairs = 0usize;
        let mut finite = true;

        for chunk in order.chunks(opts.batch_size.max(1)) {
            grads.zero();
            let mut batch_loss = 0.0;
            let mut batch_pairs = 0usize;

            for &ui in chunk {
                let su = &split.users[ui];
                if su.train.len() < 2 {
                    continue;
                }
                let window = if su.train.len() > max_window {
                    &su.train[su.train.len() - max_window..]
                } else {
                    &su.train[..]
                };
                let inputs = window[..window.len() - 1].to_vec();
                let targets = window[1..].to_vec();
                let negatives: Vec<u32> = targets
                    .iter()
                    .map(|&pos| loop {
                        let cand = rng.gen_range(0..catalog as u32);
                        if cand != pos {
                            break cand;
                        }
                    })
                    .collect();
                let example = BprExample {
                    inputs,
                    targets,
                    negatives,
                };
                batch_pairs += example.targets.len();
                batch_loss +=
                    example_loss(&params, text.as_ref(), &example, Some(&mut rng), Some(&mut grads));
            }

            if batch_pairs == 0 {
                continue;
            }
            let scale = 1.0 / batch_pairs as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                finite = false;
                break;
            }
            for t in grads.tensors_flat_mut() {
                for g in t.as_mut_slice() {
                    *g *= scale;
                }
            }
            adam.step(&mut params.tensors_flat_mut(), &grads.tensors_flat());
            epoch_loss += batch_loss * batch_pairs as f64;
            epoch_pairs += batch_pairs;
        }

        if !finite {
            log::error!("training diverged at epoch {epoch}; returning last finite parameters");
            report.diverged = true;
            report.epochs_run = epoch;
            return Ok((last_finite, report));
        }
        if epoch_pairs == 0 {
            return Err(IdpError::EmptyInput(
                "no trainable pairs (all train prefixes shorter than 2)".into(),
            ));
        }

        report.train_losses.push(epoch_loss / epoch_pairs as f64);
        report.epochs_run = epoch + 1;

        // validation NDCG@5 (dropout off)
        let text_table = match (&text, &params.text_proj) {
            (Some(t), Some(_)) => Some(learned_text_table(&params, t)),
            _ => None,
        };
        let scorer = Scorer {
            params: &params,
            text_add: text_table.as_ref(),
        };
        let ranked = eval::rank_users(&scorer, split, eval::EvalTarget::Valid)?;
        let ndcg = eval::ndcg(&ranked.ranks(), 5);
        report.valid_ndcgs.push(ndcg);

        last_finite = params.clone();
        let improved = best.as_ref().map_or(true, |(b, _, _)| ndcg > *b);
        if improved {
            best = Some((ndcg, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > opts.patience {
                log::info!(
                    "early stop at epoch {epoch}: no valid NDCG@5 improvement in {} epochs",
                    opts.patience
                );
                break;
            }
        }
    }

    let (best_ndcg, best_epoch, best_params) = best.expect("at least one epoch ran");
    report.best_epoch = Some(best_epoch);
    report.best_valid_ndcg = best_ndcg;
    Ok((best_params, report))
}
