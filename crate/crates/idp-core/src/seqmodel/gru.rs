//! Gated-recurrent encoder backend.
//!
//! Standard update/reset-gate recurrence over the embedding-layer
//! outputs h0 (single recurrent layer; the `layers` shape field applies
//! to the attention backend only):
//!
//!   z_t = sigma(x_t Wz + h_{t-1} Uz + bz)
//!   r_t = sigma(x_t Wr + h_{t-1} Ur + br)
//!   c_t = tanh(x_t Wh + (r_t . h_{t-1}) Uh + bh)
//!   h_t = (1 - z_t) . h_{t-1} + z_t . c_t
//!
//! Output row t is h_{t+1}; the last row is the user representation.
//! Train-mode dropout is applied to the inputs x_t.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::ckpt::Checkpoint;
use crate::error::Result;
use crate::linalg::{dot, sigmoid, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub wz: Matrix,
    pub wr: Matrix,
    pub wh: Matrix,
    pub uz: Matrix,
    pub ur: Matrix,
    pub uh: Matrix,
    pub bz: Matrix,
    pub br: Matrix,
    pub bh: Matrix,
}

impl GruParams {
    pub const FIELDS: [&'static str; 9] = ["wz", "wr", "wh", "uz", "ur", "uh", "bz", "br", "bh"];

    pub fn init(d: usize, std: f64, rng: &mut ChaCha20Rng) -> Self {
        GruParams {
            wz: Matrix::randn(d, d, std, rng),
            wr: Matrix::randn(d, d, std, rng),
            wh: Matrix::randn(d, d, std, rng),
            uz: Matrix::randn(d, d, std, rng),
            ur: Matrix::randn(d, d, std, rng),
            uh: Matrix::randn(d, d, std, rng),
            bz: Matrix::zeros(1, d),
            br: Matrix::zeros(1, d),
            bh: Matrix::zeros(1, d),
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.wz, &self.wr, &self.wh, &self.uz, &self.ur, &self.uh, &self.bz, &self.br,
            &self.bh,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.wz,
            &mut self.wr,
            &mut self.wh,
            &mut self.uz,
            &mut self.ur,
            &mut self.uh,
            &mut self.bz,
            &mut self.br,
            &mut self.bh,
        ]
    }

    pub fn from_checkpoint(ck: &Checkpoint, d: usize) -> Result<Self> {
        let get = |field: &str, rows: usize| ck.require_matrix(&format!("encoder.gru.{field}"), rows, d);
        Ok(GruParams {
            wz: get("wz", d)?,
            wr: get("wr", d)?,
            wh: get("wh", d)?,
            uz: get("uz", d)?,
            ur: get("ur", d)?,
            uh: get("uh", d)?,
            bz: get("bz", 1)?,
            br: get("br", 1)?,
            bh: get("bh", 1)?,
        })
    }
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
}

pub(crate) struct GruCache {
    steps: Vec<StepCache>,
    input_mask: Option<Matrix>,
}

/// y[j] = x . W[:,j] + h . U[:,j] + b[j], then `f`.
fn gate(x: &[f64], h: &[f64], w: &Matrix, u: &Matrix, b: &Matrix, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let d = b.cols();
    let mut out = vec![0.0; d];
    for (r, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            let wrow = w.row(r);
            for j in 0..d {
                out[j] += xv * wrow[j];
            }
        }
    }
    for (r, &hv) in h.iter().enumerate() {
        if hv != 0.0 {
            let urow = u.row(r);
            for j in 0..d {
                out[j] += hv * urow[j];
            }
        }
    }
    for j in 0..d {
        out[j] = f(out[j] + b.get(0, j));
    }
    out
}

fn run_forward(params: &GruParams, h0: &Matrix, mask: Option<&Matrix>) -> (Matrix, Vec<StepCache>) {
    let (n, d) = h0.shape();
    let mut outputs = Matrix::zeros(n, d);
    let mut steps = Vec::with_capacity(n);
    let mut h_prev = vec![0.0; d];
    for t in 0..n {
        let mut x = h0.row(t).to_vec();
        if let Some(m) = mask {
            for (xv, &k) in x.iter_mut().zip(m.row(t)) {
                *xv *= k;
            }
        }
        let z = gate(&x, &h_prev, &params.wz, &params.uz, &params.bz, sigmoid);
        let r = gate(&x, &h_prev, &params.wr, &params.ur, &params.br, sigmoid);
        let rh: Vec<f64> = r.iter().zip(&h_prev).map(|(a, b)| a * b).collect();
        let c = gate(&x, &rh, &params.wh, &params.uh, &params.bh, f64::tanh);
        let h: Vec<f64> = (0..d).map(|j| (1.0 - z[j]) * h_prev[j] + z[j] * c[j]).collect();
        outputs.row_mut(t).copy_from_slice(&h);
        steps.push(StepCache {
            x,
            h_prev: h_prev.clone(),
            z,
            r,
            c,
        });
        h_prev = h;
    }
    (outputs, steps)
}

pub(crate) fn forward_train(
    params: &GruParams,
    h0: &Matrix,
    dropout: f64,
    rng: Option<&mut ChaCha20Rng>,
) -> (Matrix, GruCache) {
    let input_mask = match rng {
        Some(r) if dropout > 0.0 => {
            let keep = 1.0 / (1.0 - dropout);
            let mut m = Matrix::zeros(h0.rows(), h0.cols());
            for v in m.as_mut_slice() {
                *v = if r.gen::<f64>() < dropout { 0.0 } else { keep };
            }
            Some(m)
        }
        _ => None,
    };
    let (outputs, steps) = run_forward(params, h0, input_mask.as_ref());
    (outputs, GruCache { steps, input_mask })
}

pub(crate) fn forward_infer(params: &GruParams, h0: &Matrix) -> Matrix {
    run_forward(params, h0, None).0
}

/// Backward through time. `d_out` row t is dLoss/d(h_{t+1}); gradients
/// accumulate into `grads`. Returns dLoss/d(h0).
pub(crate) fn backward(
    params: &GruParams,
    cache: &GruCache,
    d_out: &Matrix,
    grads: &mut GruParams,
) -> Matrix {
    let n = d_out.rows();
    let d = d_out.cols();
    let mut d_h0 = Matrix::zeros(n, d);
    let mut carry = vec![0.0; d];
    for t in (0..n).rev() {
        let sc = &cache.steps[t];
        let dh: Vec<f64> = d_out.row(t).iter().zip(&carry).map(|(a, b)| a + b).collect();

        // h = (1-z) . h_prev + z . c
        let dz: Vec<f64> = (0..d).map(|j| dh[j] * (sc.c[j] - sc.h_prev[j])).collect();
        let dc: Vec<f64> = (0..d).map(|j| dh[j] * sc.z[j]).collect();
        let mut dh_prev: Vec<f64> = (0..d).map(|j| dh[j] * (1.0 - sc.z[j])).collect();
        let mut dx = vec![0.0; d];

        // c = tanh(x Wh + (r . h_prev) Uh + bh)
        let dc_pre: Vec<f64> = (0..d).map(|j| dc[j] * (1.0 - sc.c[j] * sc.c[j])).collect();
        let rh: Vec<f64> = sc.r.iter().zip(&sc.h_prev).map(|(a, b)| a * b).collect();
        outer_acc(&sc.x, &dc_pre, &mut grads.wh);
        outer_acc(&rh, &dc_pre, &mut grads.uh);
        bias_acc(&dc_pre, &mut grads.bh);
        let d_rh = back_linear(&dc_pre, &params.uh);
        add_back_linear(&dc_pre, &params.wh, &mut dx);
        let dr: Vec<f64> = (0..d).map(|j| d_rh[j] * sc.h_prev[j]).collect();
        for j in 0..d {
            dh_prev[j] += d_rh[j] * sc.r[j];
        }

        // r = sigma(x Wr + h_prev Ur + br)
        let dr_pre: Vec<f64> = (0..d).map(|j| dr[j] * sc.r[j] * (1.0 - sc.r[j])).collect();
        outer_acc(&sc.x, &dr_pre, &mut grads.wr);
        outer_acc(&sc.h_prev, &dr_pre, &mut grads.ur);
        bias_acc(&dr_pre, &mut grads.br);
        add_back_linear(&dr_pre, &params.wr, &mut dx);
        add_back_linear_into(&dr_pre, &params.ur, &mut dh_prev);

        // z = sigma(x Wz + h_prev Uz + bz)
        let dz_pre: Vec<f64> = (0..d).map(|j| dz[j] * sc.z[j] * (1.0 - sc.z[j])).collect();
        outer_acc(&sc.x, &dz_pre, &mut grads.wz);
        outer_acc(&sc.h_prev, &dz_pre, &mut grads.uz);
        bias_acc(&dz_pre, &mut grads.bz);
        add_back_linear(&dz_pre, &params.wz, &mut dx);
        add_back_linear_into(&dz_pre, &params.uz, &mut dh_prev);

        // input dropout
        if let Some(m) = &cache.input_mask {
            for (v, &k) in dx.iter_mut().zip(m.row(t)) {
                *v *= k;
            }
        }
        d_h0.row_mut(t).copy_from_slice(&dx);
        carry = dh_prev;
    }
    d_h0
}

/// dW += outer(x, dy) for y = x W.
fn outer_acc(x: &[f64], dy: &[f64], dw: &mut Matrix) {
    for (r, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            let row = dw.row_mut(r);
            for (c, &dv) in dy.iter().enumerate() {
                row[c] += xv * dv;
            }
        }
    }
}

fn bias_acc(dy: &[f64], db: &mut Matrix) {
    for (c, &dv) in dy.iter().enumerate() {
        db.row_mut(0)[c] += dv;
    }
}

/// Returns dy W^T for y = x W.
fn back_linear(dy: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(dy, w.row(r))).collect()
}

fn add_back_linear(dy: &[f64], w: &Matrix, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(dy, w.row(r));
    }
}

fn add_back_linear_into(dy: &[f64], w: &Matrix, out: &mut [f64]) {
    add_back_linear(dy, w, out);
}
