//! Single-query cross-attention over the active tokens.
//!
//! ```text
//! q = Wq (Q0 + Pq) + bq
//! k_i = Wk (x_i + P_i) + bk        v_i = Wv (x_i + P_i) + bv
//! w = softmax_i(q·k_i / sqrt(C))   over active i only
//! out = Wo (Σ w_i v_i) + bo
//! ```
//!
//! Positional rows `P_i` are indexed by original grid position, so retiring a
//! token never shifts the embeddings of the others.

use ndarray::{Array1, Array2, Axis};

use super::params::AttentionParams;
use super::TokenGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Attended query features, length `C`.
    pub features: Array1<f64>,
    /// Softmax weights over all `L` positions; exactly zero at inactive ones.
    pub weights: Vec<f64>,
    cache: Cache,
}

#[derive(Debug, Clone)]
struct Cache {
    active: Vec<usize>,
    query_in: Array1<f64>,
    q: Array1<f64>,
    /// `x_i + P_i` for active tokens, `S×C`.
    kv_in: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    context: Array1<f64>,
}

fn linear_rows(input: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    input.dot(&w.t()) + b
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn cross_attention(grid: &TokenGrid, params: &AttentionParams) -> Result<AttentionOutput> {
    let c = params.channels();
    if grid.channels() != c || grid.len() != params.tokens() {
        return Err(Error::Shape(format!(
            "token grid {}x{} does not match attention parameters {}x{}",
            grid.len(),
            grid.channels(),
            params.tokens(),
            c
        )));
    }
    let active: Vec<usize> = (0..grid.len()).filter(|&i| grid.mask()[i]).collect();
    if active.is_empty() {
        return Err(Error::InvalidState("cross-attention over zero active tokens".into()));
    }

    let query_in = &params.query + &params.pos_q;
    let q = params.wq.dot(&query_in) + &params.bq;

    let mut kv_in = Array2::<f64>::zeros((active.len(), c));
    for (r, &i) in active.iter().enumerate() {
        let mut row = kv_in.row_mut(r);
        row.assign(&grid.token(i));
        row += &params.pos_kv.row(i);
    }
    let k = linear_rows(&kv_in, &params.wk, &params.bk);
    let v = linear_rows(&kv_in, &params.wv, &params.bv);

    let scale = 1.0 / (c as f64).sqrt();
    let logits: Vec<f64> = k.dot(&q).iter().map(|s| s * scale).collect();
    let w_active = softmax(&logits);

    let context = Array1::from(w_active.clone()).dot(&v);
    let features = params.wo.dot(&context) + &params.bo;

    let mut weights = vec![0.0; grid.len()];
    for (&i, &w) in active.iter().zip(&w_active) {
        weights[i] = w;
    }
    Ok(AttentionOutput {
        features,
        weights,
        cache: Cache {
            active,
            query_in,
            q,
            kv_in,
            k,
            v,
            context,
        },
    })
}

impl AttentionOutput {
    pub fn active_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.cache.active.iter().map(|&i| self.weights[i])
    }

    /// Given `d loss / d features`, accumulate parameter gradients into `grads`
    /// and return `d loss / d tokens` (`L×C`, zero rows at inactive positions).
    pub fn backward(
        &self,
        grad_features: &Array1<f64>,
        params: &AttentionParams,
        grads: &mut AttentionParams,
    ) -> Array2<f64> {
        let cache = &self.cache;
        let c = params.channels();
        let scale = 1.0 / (c as f64).sqrt();

        // out = Wo ctx + bo
        grads.wo += &outer(grad_features, &cache.context);
        grads.bo += grad_features;
        let d_ctx = params.wo.t().dot(grad_features);

        // ctx = Σ w_i v_i
        let w: Array1<f64> = cache.active.iter().map(|&i| self.weights[i]).collect();
        let d_w = cache.v.dot(&d_ctx);
        let d_v = outer(&w, &d_ctx);

        // softmax
        let mean = w.dot(&d_w);
        let d_logits = &w * &(&d_w - mean);
        let d_scores = d_logits * scale;

        // scores_i = q·k_i
        let d_q = cache.k.t().dot(&d_scores);
        let d_k = outer(&d_scores, &cache.q);

        grads.wk += &d_k.t().dot(&cache.kv_in);
        grads.bk += &d_k.sum_axis(Axis(0));
        grads.wv += &d_v.t().dot(&cache.kv_in);
        grads.bv += &d_v.sum_axis(Axis(0));
        let d_kv_in = d_k.dot(&params.wk) + d_v.dot(&params.wv);

        grads.wq += &outer(&d_q, &cache.query_in);
        grads.bq += &d_q;
        let d_query_in = params.wq.t().dot(&d_q);
        grads.query += &d_query_in;
        grads.pos_q += &d_query_in;

        let mut d_tokens = Array2::<f64>::zeros((params.tokens(), c));
        for (r, &i) in cache.active.iter().enumerate() {
            let row = d_kv_in.row(r);
            d_tokens.row_mut(i).assign(&row);
            let mut p = grads.pos_kv.row_mut(i);
            p += &row;
        }
        d_tokens
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}
