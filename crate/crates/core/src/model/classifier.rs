use ndarray::Array2;

use super::attention::{cross_attention, AttentionOutput};
use super::drop::drop_tokens;
use super::encoder::{encode, encode_backward, encode_train};
use super::loss::{sigmoid, FocalLoss};
use super::params::{AttentionParams, ClassifierParams, ModelConfig};
use super::TokenGrid;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::PatchImage;

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Sigmoid probability that the foreground class is present.
    pub probability: f64,
    pub logit: f64,
    /// Attention weights over all `L` grid positions.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ModelConfig,
    pub params: ClassifierParams,
}

/// Loss and prediction for one training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub probability: f64,
}

fn head_logit(params: &AttentionParams, features: &ndarray::Array1<f64>) -> f64 {
    params.head_w.dot(features) + params.head_b[0]
}

/// Head, loss and their gradients on an already-encoded token grid.
/// Accumulates into `grads` and returns `(loss, probability, d loss / d tokens)`.
pub fn head_loss_and_grad(
    grid: &TokenGrid,
    target: bool,
    focal: FocalLoss,
    params: &AttentionParams,
    grads: &mut AttentionParams,
) -> Result<(f64, f64, Array2<f64>)> {
    let out = cross_attention(grid, params)?;
    let probability = sigmoid(head_logit(params, &out.features));
    let loss = focal.loss(probability, target);
    let d_logit = focal.grad_logit(probability, target);
    grads.head_w.scaled_add(d_logit, &out.features);
    grads.head_b[0] += d_logit;
    let d_features = &params.head_w * d_logit;
    let d_tokens = out.backward(&d_features, params, grads);
    Ok((loss, probability, d_tokens))
}

impl Classifier {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = ClassifierParams::init(&config, rng)?;
        Ok(Classifier { config, params })
    }

    pub fn encode(&self, image: &PatchImage) -> Result<TokenGrid> {
        encode(image, &self.params, &self.config)
    }

    /// Cross-attention and head on an encoded grid.
    pub fn classify_tokens(&self, grid: &TokenGrid) -> Result<(Classification, AttentionOutput)> {
        let out = cross_attention(grid, &self.params.attention)?;
        let logit = head_logit(&self.params.attention, &out.features);
        Ok((
            Classification {
                probability: sigmoid(logit),
                logit,
                weights: out.weights.clone(),
            },
            out,
        ))
    }

    /// Encode, drop tokens (training only), attend, and apply the head.
    pub fn classify(
        &self,
        image: &PatchImage,
        drop_p: f64,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Classification> {
        let grid = self.encode(image)?;
        let grid = drop_tokens(&grid, drop_p, rng, training)?;
        Ok(self.classify_tokens(&grid)?.0)
    }

    /// One training example through the full model, gradients accumulated into `grads`.
    pub fn loss_and_grad(
        &self,
        image: &PatchImage,
        target: bool,
        focal: FocalLoss,
        rng: &mut Rng,
        grads: &mut ClassifierParams,
    ) -> Result<StepOutcome> {
        let p = self.config.drop_p;
        let (grid, trace) = encode_train(image, &self.params, &self.config)?;
        let dropped = drop_tokens(&grid, p, rng, true)?;
        let (loss, probability, mut d_tokens) =
            head_loss_and_grad(&dropped, target, focal, &self.params.attention, &mut grads.attention)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss {loss} (probability {probability}) on patch {}",
                image.id
            )));
        }
        let scale = if p > 0.0 { 1.0 / (1.0 - p) } else { 1.0 };
        for (mut row, &m) in d_tokens.rows_mut().into_iter().zip(dropped.mask()) {
            if m {
                row.mapv_inplace(|v| v * scale);
            } else {
                row.fill(0.0);
            }
        }
        encode_backward(&trace, &d_tokens, &self.params, grads);
        Ok(StepOutcome { loss, probability })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PatchId, SheetId};
    use ndarray::Array3;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_px: [64, 128],
            widths: vec![2, 2, 2, 3, 3, 4],
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64) -> PatchImage {
        let mut rng = Rng::new(seed);
        let px = Array3::from_shape_fn((64, 128, 3), |_| rng.uniform() as f32);
        PatchImage::new(PatchId::new(SheetId::new("t").unwrap(), 0, 0), px).unwrap()
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut c = Classifier::new(tiny(), &mut Rng::new(1)).unwrap();
        c.params.attention.head_w.fill(0.0);
        c.params.attention.head_b.fill(0.0);
        let out = c.classify(&image(2), 0.2, &mut Rng::new(3), false).unwrap();
        assert_eq!(out.probability, 0.5);
    }

    #[test]
    fn inference_is_deterministic() {
        let c = Classifier::new(tiny(), &mut Rng::new(1)).unwrap();
        let img = image(5);
        let a = c.classify(&img, 0.2, &mut Rng::new(1), false).unwrap();
        let b = c.classify(&img, 0.2, &mut Rng::new(99), false).unwrap();
        assert_eq!(a, b);
        assert!(a.probability > 0.0 && a.probability < 1.0);
    }

    #[test]
    fn seeded_training_pass_is_reproducible() {
        let c = Classifier::new(tiny(), &mut Rng::new(1)).unwrap();
        let img = image(5);
        let a = c.classify(&img, 0.5, &mut Rng::new(7), true).unwrap();
        let b = c.classify(&img, 0.5, &mut Rng::new(7), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        // Drop disabled so the loss is a deterministic function of the parameters.
        let config = ModelConfig {
            drop_p: 0.0,
            ..tiny()
        };
        let c = Classifier::new(config, &mut Rng::new(21)).unwrap();
        let img = image(8);
        let focal = FocalLoss::default();
        let mut grads = ClassifierParams::zeros(&c.config);
        c.loss_and_grad(&img, true, focal, &mut Rng::new(0), &mut grads).unwrap();

        let loss_at = |params: &ClassifierParams| -> f64 {
            let m = Classifier {
                config: c.config.clone(),
                params: params.clone(),
            };
            let out = m.classify(&img, 0.0, &mut Rng::new(0), false).unwrap();
            focal.loss(out.probability, true)
        };
        // A few encoder weights in the first and last block; f32 encoder, so loose tolerance.
        let mut checked = 0;
        for (block, idx) in [(0usize, (1usize, 4usize)), (5, (2, 7)), (3, (0, 3))] {
            let analytic = f64::from(grads.encoder[block].conv2.weight[idx]);
            let h = 1e-2f32;
            let mut plus = c.params.clone();
            plus.encoder[block].conv2.weight[idx] += h;
            let mut minus = c.params.clone();
            minus.encoder[block].conv2.weight[idx] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * f64::from(h));
            if analytic.abs() < 1e-6 && fd.abs() < 1e-6 {
                continue;
            }
            assert!(
                (fd - analytic).abs() <= 0.05 * fd.abs().max(analytic.abs()) + 1e-5,
                "block {block} {idx:?}: fd {fd} vs analytic {analytic}"
            );
            checked += 1;
        }
        assert!(checked > 0);
    }
}
