//! Textual and behavior-involved contrastive losses.
//!
//! Both are InfoNCE with in-batch negatives at temperature tau. For a
//! batch of N items, the denominator holds the positive term plus the
//! N-1 other anchors' encodings, so a batch with all-equal similarities
//! yields exactly ln N. The printed ratios are minimized as -log(ratio).

use rand_chacha::ChaCha20Rng;

use crate::error::{IdpError, Result};
use crate::linalg::{dot, log_sum_exp, norm, Similarity};
use crate::rng::derive_rng;

use super::{
    encode_backward, encode_cached, AdapterParams, BehaviorPositives, EncodeCache, EncodeMode,
    TextVectorStore,
};

/// d sim(a,b) contributions: returns (d/da, d/db) scaled by `w`.
fn sim_backward(sim: Similarity, a: &[f64], b: &[f64], w: f64, da: &mut [f64], db: &mut [f64]) {
    match sim {
        Similarity::Dot => {
            for i in 0..a.len() {
                da[i] += w * b[i];
                db[i] += w * a[i];
            }
        }
        Similarity::Cosine => {
            let na = norm(a);
            let nb = norm(b);
            if na == 0.0 || nb == 0.0 {
                return;
            }
            let s = dot(a, b) / (na * nb);
            for i in 0..a.len() {
                da[i] += w * (b[i] / (na * nb) - s * a[i] / (na * na));
                db[i] += w * (a[i] / (na * nb) - s * b[i] / (nb * nb));
            }
        }
    }
}

struct Views {
    caches: Vec<EncodeCache>,
    grads: Vec<Vec<f64>>,
}

impl Views {
    fn new(caches: Vec<EncodeCache>, da: usize) -> Self {
        let grads = vec![vec![0.0; da]; caches.len()];
        Views { caches, grads }
    }
}

/// Textual contrastive loss over a batch: twin views of each item from
/// two independent dropout passes are the positive pair; the other
/// items' first-view encodings are the negatives. Mean over the batch.
pub fn text_contrastive_loss(
    adapter: &AdapterParams,
    store: &TextVectorStore,
    batch: &[u32],
    rng_seed: u64,
) -> Result<f64> {
    let mut rng = derive_rng(rng_seed, "cdim.text");
    text_contrastive_impl(adapter, store, batch, &mut rng, None)
}

pub(crate) fn text_contrastive_impl(
    adapter: &AdapterParams,
    store: &TextVectorStore,
    batch: &[u32],
    rng: &mut ChaCha20Rng,
    mut grads: Option<&mut AdapterParams>,
) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(IdpError::InvalidArgument(format!(
            "textual contrastive loss needs a batch of >= 2 items, got {n}"
        )));
    }
    let da = adapter.adapter_dim();
    let tau = adapter.temperature;
    let sim = adapter.similarity;

    // two dropout views per item, sampled in batch order
    let mut view1 = Vec::with_capacity(n);
    let mut view2 = Vec::with_capacity(n);
    for &item in batch {
        let raw = store.require(item)?;
        view1.push(encode_cached(adapter, raw, EncodeMode::Train, Some(rng))?);
        view2.push(encode_cached(adapter, raw, EncodeMode::Train, Some(rng))?);
    }
    let mut v1 = Views::new(view1, da);
    let mut v2 = Views::new(view2, da);

    let mut total = 0.0;
    let weight = 1.0 / n as f64;
    for i in 0..n {
        let anchor = &v1.caches[i].y;
        // logits: positive (twin view) first, then in-batch negatives
        let mut logits = Vec::with_capacity(n);
        logits.push(sim.eval(anchor, &v2.caches[i].y) / tau);
        for k in 0..n {
            if k != i {
                logits.push(sim.eval(anchor, &v1.caches[k].y) / tau);
            }
        }
        let lse = log_sum_exp(&logits);
        total += lse - logits[0];

        if grads.is_some() {
            // softmax over logits; dl/dlogit = p - onehot(positive)
            let mut p: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
            p[0] -= 1.0;
            // positive pair
            let w = weight * p[0] / tau;
            // split borrows: anchor grad in v1, twin grad in v2
            sim_backward(
                sim,
                &v1.caches[i].y,
                &v2.caches[i].y,
                w,
                &mut v1.grads[i],
                &mut v2.grads[i],
            );
            let mut slot = 1;
            for k in 0..n {
                if k == i {
                    continue;
                }
                let w = weight * p[slot] / tau;
                let (gi, gk) = two_mut(&mut v1.grads, i, k);
                sim_backward(sim, &v1.caches[i].y, &v1.caches[k].y, w, gi, gk);
                slot += 1;
            }
        }
    }

    if let Some(g) = grads.as_deref_mut() {
        for (cache, dy) in v1.caches.iter().zip(&v1.grads) {
            encode_backward(adapter, cache, dy, g);
        }
        for (cache, dy) in v2.caches.iter().zip(&v2.grads) {
            encode_backward(adapter, cache, dy, g);
        }
    }
    Ok(total * weight)
}

/// Behavior-involved contrastive loss: for each batch item and each of
/// its mined positives, an InfoNCE term whose negatives are the other
/// batch anchors; terms averaged over positives and batch.
pub fn behavior_contrastive_loss(
    adapter: &AdapterParams,
    store: &TextVectorStore,
    batch: &[u32],
    positives: &BehaviorPositives,
    rng_seed: u64,
) -> Result<f64> {
    let mut rng = derive_rng(rng_seed, "cdim.behavior");
    behavior_contrastive_impl(adapter, store, batch, positives, &mut rng, None)
}

pub(crate) fn behavior_contrastive_impl(
    adapter: &AdapterParams,
    store: &TextVectorStore,
    batch: &[u32],
    positives: &BehaviorPositives,
    rng: &mut ChaCha20Rng,
    mut grads: Option<&mut AdapterParams>,
) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(IdpError::InvalidArgument(format!(
            "behavior contrastive loss needs a batch of >= 2 items, got {n}"
        )));
    }
    let da = adapter.adapter_dim();
    let tau = adapter.temperature;
    let sim = adapter.similarity;

    // anchors in batch order, then positives grouped per anchor
    let mut anchors = Vec::with_capacity(n);
    for &item in batch {
        let raw = store.require(item)?;
        anchors.push(encode_cached(adapter, raw, EncodeMode::Train, Some(rng))?);
    }
    let mut pos_caches: Vec<Vec<EncodeCache>> = Vec::with_capacity(n);
    for &item in batch {
        let list = positives
            .lists
            .get(item as usize)
            .filter(|l| !l.is_empty())
            .ok_or_else(|| {
                IdpError::InvalidArgument(format!("item {item} has no mined behavior positives"))
            })?;
        let mut encoded = Vec::with_capacity(list.len());
        for &p in list {
            let raw = store.require(p)?;
            encoded.push(encode_cached(adapter, raw, EncodeMode::Train, Some(rng))?);
        }
        pos_caches.push(encoded);
    }

    let mut anchor_views = Views::new(anchors, da);
    let mut pos_grads: Vec<Vec<Vec<f64>>> = pos_caches
        .iter()
        .map(|ps| vec![vec![0.0; da]; ps.len()])
        .collect();

    let mut total = 0.0;
    for i in 0..n {
        let k_i = pos_caches[i].len();
        let term_weight = 1.0 / (n as f64 * k_i as f64);
        for (j, pos) in pos_caches[i].iter().enumerate() {
            let anchor = &anchor_views.caches[i].y;
            let mut logits = Vec::with_capacity(n);
            logits.push(sim.eval(anchor, &pos.y) / tau);
            for k in 0..n {
                if k != i {
                    logits.push(sim.eval(anchor, &anchor_views.caches[k].y) / tau);
                }
            }
            let lse = log_sum_exp(&logits);
            total += term_weight * (lse - logits[0]);

            if grads.is_some() {
                let mut p: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
                p[0] -= 1.0;
                let w = term_weight * p[0] / tau;
                sim_backward(
                    sim,
                    &anchor_views.caches[i].y,
                    &pos.y,
                    w,
                    &mut anchor_views.grads[i],
                    &mut pos_grads[i][j],
                );
                let mut slot = 1;
                for k in 0..n {
                    if k == i {
                        continue;
                    }
                    let w = term_weight * p[slot] / tau;
                    let (gi, gk) = two_mut(&mut anchor_views.grads, i, k);
                    sim_backward(
                        sim,
                        &anchor_views.caches[i].y,
                        &anchor_views.caches[k].y,
                        w,
                        gi,
                        gk,
                    );
                    slot += 1;
                }
            }
        }
    }

    if let Some(g) = grads.as_deref_mut() {
        for (cache, dy) in anchor_views.caches.iter().zip(&anchor_views.grads) {
            encode_backward(adapter, cache, dy, g);
        }
        for (caches, dys) in pos_caches.iter().zip(&pos_grads) {
            for (cache, dy) in caches.iter().zip(dys) {
                encode_backward(adapter, cache, dy, g);
            }
        }
    }
    Ok(total)
}

/// Two distinct mutable rows of a Vec<Vec<f64>>.
fn two_mut(v: &mut [Vec<f64>], i: usize, k: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(i, k);
    if i < k {
        let (lo, hi) = v.split_at_mut(k);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(i);
        (&mut hi[0], &mut lo[k])
    }
}
