//! Six conv-conv-pool blocks mapping an `H×W×3` patch to an `(H/64)×(W/64)×C` token grid.

use ndarray::{Array2, Array3, Axis};

use super::conv::{maxpool2, maxpool2_backward, relu_backward, relu_inplace};
use super::params::{AttentionParams, ClassifierParams, EncoderBlock, ModelConfig};
use super::TokenGrid;
use crate::error::{Error, Result};
use crate::types::{PatchImage, TOKEN_PX};

/// Activations kept from a training forward pass.
pub struct EncoderTrace {
    blocks: Vec<BlockTrace>,
    out_dim: (usize, usize, usize),
}

struct BlockTrace {
    input: Array3<f32>,
    act1: Array3<f32>,
    act2: Array3<f32>,
    argmax: Vec<u32>,
}

fn to_chw(image: &PatchImage) -> Array3<f32> {
    image
        .pixels()
        .view()
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .into_owned()
}

fn check_input(image: &PatchImage, config: &ModelConfig) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    if h % TOKEN_PX != 0 || w % TOKEN_PX != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by {TOKEN_PX}"
        )));
    }
    if [h, w] != config.input_px {
        return Err(Error::Shape(format!(
            "image {h}x{w} does not match configured input {:?}",
            config.input_px
        )));
    }
    Ok(())
}

fn block_forward(block: &EncoderBlock, x: &Array3<f32>) -> (Array3<f32>, Array3<f32>) {
    let mut a1 = block.conv1.forward(x);
    relu_inplace(&mut a1);
    let mut a2 = block.conv2.forward(&a1);
    relu_inplace(&mut a2);
    (a1, a2)
}

/// `(C, M, N)` feature map to an `L×C` token matrix in row-major grid order.
fn to_tokens(features: &Array3<f32>) -> TokenGrid {
    let (c, m, n) = features.dim();
    let tokens = features
        .view()
        .into_shape_with_order((c, m * n))
        .expect("feature shape")
        .t()
        .mapv(f64::from);
    TokenGrid::new(m, n, tokens)
}

/// Inference-only encoder pass.
pub fn encode(image: &PatchImage, params: &ClassifierParams, config: &ModelConfig) -> Result<TokenGrid> {
    check_input(image, config)?;
    let mut x = to_chw(image);
    for block in &params.encoder {
        let (_, a2) = block_forward(block, &x);
        x = maxpool2(&a2).0;
    }
    Ok(to_tokens(&x))
}

/// Encoder pass that records what [`encode_backward`] needs.
pub fn encode_train(
    image: &PatchImage,
    params: &ClassifierParams,
    config: &ModelConfig,
) -> Result<(TokenGrid, EncoderTrace)> {
    check_input(image, config)?;
    let mut x = to_chw(image);
    let mut blocks = Vec::with_capacity(params.encoder.len());
    for block in &params.encoder {
        let (act1, act2) = block_forward(block, &x);
        let (pooled, argmax) = maxpool2(&act2);
        blocks.push(BlockTrace {
            input: std::mem::replace(&mut x, pooled),
            act1,
            act2,
            argmax,
        });
    }
    let out_dim = x.dim();
    Ok((to_tokens(&x), EncoderTrace { blocks, out_dim }))
}

/// Back-propagate an `L×C` token gradient, accumulating into `grads`.
pub fn encode_backward(
    trace: &EncoderTrace,
    token_grad: &Array2<f64>,
    params: &ClassifierParams,
    grads: &mut ClassifierParams,
) {
    let (c, m, n) = trace.out_dim;
    let mut g = token_grad
        .t()
        .mapv(|v| v as f32)
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, m, n))
        .expect("token grad shape");
    for (i, (block, bt)) in params.encoder.iter().zip(&trace.blocks).enumerate().rev() {
        let gblock = &mut grads.encoder[i];
        let mut g2 = maxpool2_backward(bt.act2.dim(), &bt.argmax, &g);
        relu_backward(&bt.act2, &mut g2);
        let mut g1 = block
            .conv2
            .backward(&bt.act1, &g2, &mut gblock.conv2, true)
            .expect("requested");
        relu_backward(&bt.act1, &mut g1);
        // The image itself needs no gradient.
        match block.conv1.backward(&bt.input, &g1, &mut gblock.conv1, i > 0) {
            Some(gx) => g = gx,
            None => break,
        }
    }
}

/// Per-channel mean and standard deviation over a set of `(c, h, w)` maps.
fn channel_stats(maps: &[Array3<f32>]) -> Vec<(f64, f64)> {
    let c = maps[0].dim().0;
    (0..c)
        .map(|ch| {
            let (mut n, mut sum, mut sq) = (0.0f64, 0.0f64, 0.0f64);
            for m in maps {
                for &v in m.index_axis(Axis(0), ch) {
                    let v = f64::from(v);
                    n += 1.0;
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n;
            (mean, (sq / n - mean * mean).max(0.0).sqrt())
        })
        .collect()
}

/// Scale the query projection so the attention logits over every token of
/// the sample have standard deviation `target`.
fn scale_logits(att: &mut AttentionParams, features: &[Array3<f32>], target: f64) {
    let q = att.wq.dot(&(&att.query + &att.pos_q)) + &att.bq;
    let c = q.len();
    let mut logits = Vec::new();
    for x in features {
        let (_, h, w) = x.dim();
        let tokens = x.to_shape((c, h * w)).expect("feature shape").mapv(f64::from);
        let keys = (att.wk.dot(&tokens).t().to_owned() + &att.pos_kv.dot(&att.wk.t())) + &att.bk;
        logits.extend(keys.dot(&q).iter().map(|l| l / (c as f64).sqrt()));
    }
    let n = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / n;
    let std = (logits.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 1e-12 {
        att.wq *= target / std;
        att.bq *= target / std;
    }
}

/// Data-dependent initialisation: rescale each convolution so that its
/// pre-activations over `images` have zero mean and unit variance per
/// channel, then fold the token statistics into the key and value
/// projections. Channels that are constant over the sample are only shifted.
/// A positive `logit_std` then sets the spread of the initial attention logits.
pub fn data_init(
    params: &mut ClassifierParams,
    config: &ModelConfig,
    images: &[&PatchImage],
    logit_std: f64,
) -> Result<()> {
    if images.is_empty() {
        return Ok(());
    }
    for im in images {
        check_input(im, config)?;
    }
    let mut xs: Vec<Array3<f32>> = images.iter().map(|im| to_chw(im)).collect();
    for block in &mut params.encoder {
        for conv in [&mut block.conv1, &mut block.conv2] {
            let mut outs: Vec<Array3<f32>> = xs.iter().map(|x| conv.forward(x)).collect();
            let stats = channel_stats(&outs);
            for (o, &(mean, std)) in stats.iter().enumerate() {
                let s = if std > 1e-6 { 1.0 / std } else { 1.0 };
                conv.weight.row_mut(o).mapv_inplace(|w| (f64::from(w) * s) as f32);
                conv.bias[o] = ((f64::from(conv.bias[o]) - mean) * s) as f32;
                for out in &mut outs {
                    out.index_axis_mut(Axis(0), o)
                        .mapv_inplace(|v| ((f64::from(v) - mean) * s).max(0.0) as f32);
                }
            }
            xs = outs;
        }
        xs = xs.iter().map(|x| maxpool2(x).0).collect();
    }
    let stats = channel_stats(&xs);
    let att = &mut params.attention;
    for w in [&mut att.wk, &mut att.wv] {
        for (j, &(_, std)) in stats.iter().enumerate() {
            if std > 1e-6 {
                w.column_mut(j).mapv_inplace(|v| v / std);
            }
        }
    }
    let mean = ndarray::Array1::from_iter(stats.iter().map(|s| s.0));
    att.bk -= &att.wk.dot(&mean);
    att.bv -= &att.wv.dot(&mean);
    if logit_std > 0.0 {
        scale_logits(att, &xs, logit_std);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::types::{PatchId, SheetId};
    use ndarray::Array3;

    fn small_config(h: usize, w: usize, c: usize) -> ModelConfig {
        ModelConfig {
            input_px: [h, w],
            widths: vec![2, 2, 3, 3, 4, c],
            ..ModelConfig::default()
        }
    }

    fn image(rng: &mut Rng, h: usize, w: usize) -> PatchImage {
        let px = Array3::from_shape_fn((h, w, 3), |_| rng.uniform() as f32);
        PatchImage::new(PatchId::new(SheetId::new("t").unwrap(), 0, 0), px).unwrap()
    }

    #[test]
    fn output_grid_shapes() {
        let mut rng = Rng::new(0);
        for (h, w, m, n) in [(64, 64, 1, 1), (128, 384, 2, 6)] {
            let cfg = small_config(h, w, 5);
            let p = ClassifierParams::init(&cfg, &mut rng).unwrap();
            let grid = encode(&image(&mut rng, h, w), &p, &cfg).unwrap();
            assert_eq!((grid.rows(), grid.cols(), grid.channels()), (m, n, 5));
            assert_eq!(grid.len(), m * n);
        }
    }

    #[test]
    fn rejects_mismatched_input() {
        let mut rng = Rng::new(0);
        let cfg = small_config(128, 128, 4);
        let p = ClassifierParams::init(&cfg, &mut rng).unwrap();
        assert!(matches!(
            encode(&image(&mut rng, 64, 64), &p, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn relu_outputs_are_non_negative() {
        let mut rng = Rng::new(4);
        let cfg = small_config(64, 128, 6);
        let p = ClassifierParams::init(&cfg, &mut rng).unwrap();
        let grid = encode(&image(&mut rng, 64, 128), &p, &cfg).unwrap();
        assert!(grid.tokens().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn train_and_inference_passes_agree() {
        let mut rng = Rng::new(5);
        let cfg = small_config(64, 128, 4);
        let p = ClassifierParams::init(&cfg, &mut rng).unwrap();
        let img = image(&mut rng, 64, 128);
        let a = encode(&img, &p, &cfg).unwrap();
        let (b, _) = encode_train(&img, &p, &cfg).unwrap();
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn data_init_standardises_first_conv_and_keeps_key_bias_mean() {
        let mut rng = Rng::new(5);
        let cfg = small_config(128, 128, 5);
        let mut p = ClassifierParams::init(&cfg, &mut rng).unwrap();
        let imgs: Vec<PatchImage> = (0..3).map(|_| image(&mut rng, 128, 128)).collect();
        let refs: Vec<&PatchImage> = imgs.iter().collect();
        let bk = p.attention.bk.clone();
        data_init(&mut p, &cfg, &refs, 0.0).unwrap();

        let outs: Vec<Array3<f32>> = imgs.iter().map(|im| p.encoder[0].conv1.forward(&to_chw(im))).collect();
        for (mean, std) in channel_stats(&outs) {
            assert!(mean.abs() < 1e-3 && (std - 1.0).abs() < 1e-3, "{mean} {std}");
        }
        let mut acc = ndarray::Array1::<f64>::zeros(5);
        let mut n = 0.0;
        for im in &imgs {
            let g = encode(im, &p, &cfg).unwrap();
            for t in g.tokens().rows() {
                acc += &(p.attention.wk.dot(&t) + &p.attention.bk);
                n += 1.0;
            }
        }
        for (a, b) in (acc / n).iter().zip(&bk) {
            assert!((a - b).abs() < 1e-3, "{a} {b}");
        }
    }

    #[test]
    fn data_init_sets_logit_spread() {
        let mut rng = Rng::new(6);
        let cfg = small_config(128, 192, 6);
        let mut p = ClassifierParams::init(&cfg, &mut rng).unwrap();
        let imgs: Vec<PatchImage> = (0..4).map(|_| image(&mut rng, 128, 192)).collect();
        let refs: Vec<&PatchImage> = imgs.iter().collect();
        data_init(&mut p, &cfg, &refs, 3.0).unwrap();

        let a = &p.attention;
        let q = a.wq.dot(&(&a.query + &a.pos_q)) + &a.bq;
        let mut logits = Vec::new();
        for im in &imgs {
            let g = encode(im, &p, &cfg).unwrap();
            for i in 0..g.len() {
                let k = a.wk.dot(&(&g.token(i) + &a.pos_kv.row(i))) + &a.bk;
                logits.push(q.dot(&k) / 6f64.sqrt());
            }
        }
        let n = logits.len() as f64;
        let mean = logits.iter().sum::<f64>() / n;
        let std = (logits.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 3.0).abs() < 1e-3, "{std}");
    }
}
