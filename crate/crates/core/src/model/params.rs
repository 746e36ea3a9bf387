//! Model configuration and the full set of learnable parameters.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::conv::Conv3x3;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{PATCH_PX, TOKEN_PX};

/// Number of conv/pool blocks; `2^ENCODER_BLOCKS == TOKEN_PX`.
pub const ENCODER_BLOCKS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input patch height and width in pixels.
    #[serde(default = "default_input_px")]
    pub input_px: [usize; 2],
    /// Output channels of each encoder block; the last entry is the token width `C`.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    /// Token drop probability during training.
    #[serde(default = "default_drop_p")]
    pub drop_p: f64,
    /// Std of the normal used for the query and positional embeddings.
    #[serde(default = "default_embed_std")]
    pub embed_std: f64,
}

fn default_input_px() -> [usize; 2] {
    [PATCH_PX, PATCH_PX]
}

fn default_widths() -> Vec<usize> {
    vec![32, 64, 128, 256, 512, 512]
}

fn default_drop_p() -> f64 {
    0.2
}

fn default_embed_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_px: default_input_px(),
            widths: default_widths(),
            drop_p: default_drop_p(),
            embed_std: default_embed_std(),
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_px[0] / TOKEN_PX, self.input_px[1] / TOKEN_PX)
    }

    pub fn tokens(&self) -> usize {
        let (m, n) = self.grid();
        m * n
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_px;
        if h == 0 || w == 0 || h % TOKEN_PX != 0 || w % TOKEN_PX != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a positive multiple of {TOKEN_PX}"
            )));
        }
        if self.widths.len() != ENCODER_BLOCKS || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "encoder needs {ENCODER_BLOCKS} positive block widths, got {:?}",
                self.widths
            )));
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return Err(Error::InvalidArgument(format!(
                "drop probability {} outside [0,1)",
                self.drop_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
}

/// Cross-attention and head parameters. Linear weights are `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Array1<f64>,
    pub pos_q: Array1<f64>,
    pub pos_kv: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub head_w: Array1<f64>,
    pub head_b: Array1<f64>,
}

impl AttentionParams {
    pub fn zeros(tokens: usize, channels: usize) -> Self {
        let c = channels;
        AttentionParams {
            query: Array1::zeros(c),
            pos_q: Array1::zeros(c),
            pos_kv: Array2::zeros((tokens, c)),
            wq: Array2::zeros((c, c)),
            bq: Array1::zeros(c),
            wk: Array2::zeros((c, c)),
            bk: Array1::zeros(c),
            wv: Array2::zeros((c, c)),
            bv: Array1::zeros(c),
            wo: Array2::zeros((c, c)),
            bo: Array1::zeros(c),
            head_w: Array1::zeros(c),
            head_b: Array1::zeros(1),
        }
    }

    /// Query and positional embeddings from `N(0, embed_std)`; linear layers
    /// uniform in `±1/sqrt(fan_in)`.
    pub fn init(tokens: usize, channels: usize, embed_std: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(tokens, channels);
        let bound = 1.0 / (channels as f64).sqrt();
        for t in [&mut p.query, &mut p.pos_q] {
            t.mapv_inplace(|_| rng.normal(0.0, embed_std));
        }
        p.pos_kv.mapv_inplace(|_| rng.normal(0.0, embed_std));
        for t in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
            t.mapv_inplace(|_| rng.uniform_range(-bound, bound));
        }
        for t in [&mut p.bq, &mut p.bk, &mut p.bv, &mut p.bo, &mut p.head_w, &mut p.head_b] {
            t.mapv_inplace(|_| rng.uniform_range(-bound, bound));
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.query.len()
    }

    pub fn tokens(&self) -> usize {
        self.pos_kv.nrows()
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        fn v(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("contiguous")
        }
        fn m(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("contiguous")
        }
        vec![
            ("attn.query", vec![self.query.len()], v(&self.query)),
            ("attn.pos_q", vec![self.pos_q.len()], v(&self.pos_q)),
            ("attn.pos_kv", self.pos_kv.shape().to_vec(), m(&self.pos_kv)),
            ("attn.wq", self.wq.shape().to_vec(), m(&self.wq)),
            ("attn.bq", vec![self.bq.len()], v(&self.bq)),
            ("attn.wk", self.wk.shape().to_vec(), m(&self.wk)),
            ("attn.bk", vec![self.bk.len()], v(&self.bk)),
            ("attn.wv", self.wv.shape().to_vec(), m(&self.wv)),
            ("attn.bv", vec![self.bv.len()], v(&self.bv)),
            ("attn.wo", self.wo.shape().to_vec(), m(&self.wo)),
            ("attn.bo", vec![self.bo.len()], v(&self.bo)),
            ("head.w", vec![self.head_w.len()], v(&self.head_w)),
            ("head.b", vec![1], v(&self.head_b)),
        ]
    }

    /// Flat mutable views in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let AttentionParams {
            query,
            pos_q,
            pos_kv,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            head_w,
            head_b,
        } = self;
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(13);
        out.push(query.as_slice_mut().expect("contiguous"));
        out.push(pos_q.as_slice_mut().expect("contiguous"));
        out.push(pos_kv.as_slice_mut().expect("contiguous"));
        for (w, b) in [(wq, bq), (wk, bk), (wv, bv), (wo, bo)] {
            out.push(w.as_slice_mut().expect("contiguous"));
            out.push(b.as_slice_mut().expect("contiguous"));
        }
        out.push(head_w.as_slice_mut().expect("contiguous"));
        out.push(head_b.as_slice_mut().expect("contiguous"));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub encoder: Vec<EncoderBlock>,
    pub attention: AttentionParams,
}

impl ClassifierParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut in_ch = 3;
        let encoder = config
            .widths
            .iter()
            .map(|&w| {
                let block = EncoderBlock {
                    conv1: Conv3x3::zeros(in_ch, w),
                    conv2: Conv3x3::zeros(w, w),
                };
                in_ch = w;
                block
            })
            .collect();
        ClassifierParams {
            encoder,
            attention: AttentionParams::zeros(config.tokens(), config.channels()),
        }
    }

    /// He-normal conv weights with zero biases; see [`AttentionParams::init`] for the rest.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        for block in &mut p.encoder {
            for conv in [&mut block.conv1, &mut block.conv2] {
                let std = (2.0 / (conv.in_channels() * 9) as f64).sqrt();
                conv.weight.mapv_inplace(|_| rng.normal(0.0, std) as f32);
            }
        }
        p.attention =
            AttentionParams::init(config.tokens(), config.channels(), config.embed_std, rng);
        Ok(p)
    }

    pub fn encoder_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            for (j, c) in [(1, &b.conv1), (2, &b.conv2)] {
                out.push((
                    format!("enc.{i}.conv{j}.weight"),
                    c.weight.shape().to_vec(),
                    c.weight.as_slice().expect("contiguous"),
                ));
                out.push((
                    format!("enc.{i}.conv{j}.bias"),
                    c.bias.shape().to_vec(),
                    c.bias.as_slice().expect("contiguous"),
                ));
            }
        }
        out
    }

    pub fn encoder_tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            for c in [&mut b.conv1, &mut b.conv2] {
                out.push(c.weight.as_slice_mut().expect("contiguous"));
                out.push(c.bias.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.encoder_tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
            && self
                .attention
                .named_tensors()
                .iter()
                .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ClassifierParams, scale: f64) {
        let src32: Vec<&[f32]> = other.encoder_tensors().into_iter().map(|t| t.2).collect();
        for (dst, src) in self.encoder_tensors_mut().into_iter().zip(src32) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale as f32 * s);
        }
        let src64: Vec<&[f64]> = other
            .attention
            .named_tensors()
            .into_iter()
            .map(|t| t.2)
            .collect();
        for (dst, src) in self.attention.tensors_mut().into_iter().zip(src64) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.encoder_tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor as f32);
        }
        for t in self.attention.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}
