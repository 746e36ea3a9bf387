//! Attention-based binary patch classifier: encoder, token drop, single-query
//! cross-attention and a linear head, with hand-written gradients.

pub mod attention;
pub mod checkpoint;
pub mod classifier;
pub mod conv;
pub mod drop;
pub mod encoder;
pub mod loss;
pub mod params;

use ndarray::{Array2, ArrayView1};

pub use attention::{cross_attention, AttentionOutput};
pub use checkpoint::Checkpoint;
pub use classifier::{Classification, Classifier};
pub use drop::drop_tokens;
pub use encoder::{data_init, encode};
pub use loss::{focal_loss, focal_loss_grad, FocalLoss};
pub use params::{AttentionParams, ClassifierParams, ModelConfig};

/// `L = rows·cols` token features in row-major grid order, plus an activity mask.
///
/// Inactive tokens always carry zeroed features.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    rows: usize,
    cols: usize,
    tokens: Array2<f64>,
    mask: Vec<bool>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, tokens: Array2<f64>) -> Self {
        assert_eq!(tokens.nrows(), rows * cols, "token count must equal rows*cols");
        let tokens = tokens.as_standard_layout().into_owned();
        TokenGrid {
            rows,
            cols,
            mask: vec![true; rows * cols],
            tokens,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `L`
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> ArrayView1<'_, f64> {
        self.tokens.row(i)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// `S`, the number of active tokens.
    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Deactivate token `i` and zero its features.
    pub fn retire(&mut self, i: usize) {
        self.mask[i] = false;
        self.tokens.row_mut(i).fill(0.0);
    }

    pub(crate) fn scale_active(&mut self, factor: f64) {
        for (mut row, &m) in self.tokens.rows_mut().into_iter().zip(&self.mask) {
            if m {
                row.mapv_inplace(|v| v * factor);
            }
        }
    }
}
