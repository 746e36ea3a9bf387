//! 3×3 same-padded convolution, ReLU and 2×2 max-pooling on `(channels, height, width)` tensors.
//!
//! Convolutions are lowered to a single GEMM through an im2col buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

/// Expand a `(c, h, w)` input to a `(c*9, h*w)` patch matrix, zero-padded by one pixel.
pub(crate) fn im2col(input: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = input.dim();
    let hw = h * w;
    let src = input.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut cols = vec![0.0f32; c * 9 * hw];
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &plane[sy as usize * w..][..w];
                    let d = &mut row[y * w..][..w];
                    match kx {
                        0 => d[1..].copy_from_slice(&s[..w - 1]),
                        1 => d.copy_from_slice(s),
                        _ => d[..w - 1].copy_from_slice(&s[1..]),
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * 9, hw), cols).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatter-add a `(c*9, h*w)` matrix back to `(c, h, w)`.
pub(crate) fn col2im(cols: ArrayView2<f32>, c: usize, h: usize, w: usize) -> Array3<f32> {
    let hw = h * w;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0f32; c * hw];
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d = &mut plane[sy as usize * w..][..w];
                    let s = &row[y * w..][..w];
                    match kx {
                        0 => d[..w - 1].iter_mut().zip(&s[1..]).for_each(|(a, b)| *a += b),
                        1 => d.iter_mut().zip(s).for_each(|(a, b)| *a += b),
                        _ => d[1..].iter_mut().zip(&s[..w - 1]).for_each(|(a, b)| *a += b),
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("col2im shape")
}

/// Weights are stored `(out, in*9)`, matching the im2col row order `in, ky, kx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Conv3x3 {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Conv3x3 {
            weight: Array2::zeros((out_ch, in_ch * 9)),
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, input: &Array3<f32>) -> Array3<f32> {
        let (_, h, w) = input.dim();
        let cols = im2col(input);
        let mut out = Array2::<f32>::zeros((self.out_channels(), h * w));
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.fill(*b);
        }
        general_mat_mul(1.0, &self.weight, &cols, 1.0, &mut out);
        out.into_shape_with_order((self.out_channels(), h, w))
            .expect("conv output shape")
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient when asked.
    pub fn backward(
        &self,
        input: &Array3<f32>,
        grad_out: &Array3<f32>,
        grad: &mut Conv3x3,
        need_input_grad: bool,
    ) -> Option<Array3<f32>> {
        let (c, h, w) = input.dim();
        let cols = im2col(input);
        let g = grad_out
            .view()
            .into_shape_with_order((self.out_channels(), h * w))
            .expect("grad shape");
        general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut grad.weight);
        grad.bias += &g.sum_axis(Axis(1));
        need_input_grad.then(|| {
            let mut dcols = Array2::<f32>::zeros((c * 9, h * w));
            general_mat_mul(1.0, &self.weight.t(), &g, 0.0, &mut dcols);
            col2im(dcols.view(), c, h, w)
        })
    }
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zero `grad` wherever the post-activation output was not positive.
pub fn relu_backward(activated: &Array3<f32>, grad: &mut Array3<f32>) {
    grad.zip_mut_with(activated, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// 2×2 stride-2 max pooling. Returns the pooled tensor and, per output cell,
/// the flat input offset of the winning element (first maximum in scan order).
pub fn maxpool2(input: &Array3<f32>) -> (Array3<f32>, Vec<u32>) {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    let src = input.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + 2 * y * w + 2 * x;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                arg.push(best as u32);
            }
        }
    }
    (
        Array3::from_shape_vec((c, oh, ow), out).expect("pool shape"),
        arg,
    )
}

pub fn maxpool2_backward(
    input_dim: (usize, usize, usize),
    argmax: &[u32],
    grad_out: &Array3<f32>,
) -> Array3<f32> {
    let (c, h, w) = input_dim;
    let mut out = vec![0.0f32; c * h * w];
    for (&i, &g) in argmax.iter().zip(grad_out.iter()) {
        out[i as usize] += g;
    }
    Array3::from_shape_vec((c, h, w), out).expect("unpool shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random3(rng: &mut Rng, dim: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(dim, |_| rng.normal(0.0, 1.0) as f32)
    }

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(conv: &Conv3x3, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let o = conv.out_channels();
        let mut out = Array3::<f32>::zeros((o, h, w));
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = conv.bias[oc] as f64;
                    for ic in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += conv.weight[[oc, ic * 9 + ky * 3 + kx]] as f64
                                    * x[[ic, sy as usize, sx as usize]] as f64;
                            }
                        }
                    }
                    out[[oc, y, xx]] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = Rng::new(1);
        let mut conv = Conv3x3::zeros(3, 5);
        conv.weight.mapv_inplace(|_| rng.normal(0.0, 0.5) as f32);
        conv.bias.mapv_inplace(|_| rng.normal(0.0, 0.5) as f32);
        let x = random3(&mut rng, (3, 7, 6));
        let fast = conv.forward(&x);
        let slow = naive_conv(&conv, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = Rng::new(2);
        let x = random3(&mut rng, (2, 5, 4));
        let y = Array2::from_shape_fn((18, 20), |_| rng.normal(0.0, 1.0) as f32);
        let lhs: f64 = im2col(&x).iter().zip(y.iter()).map(|(a, b)| (a * b) as f64).sum();
        let back = col2im(y.view(), 2, 5, 4);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let mut conv = Conv3x3::zeros(2, 3);
        conv.weight.mapv_inplace(|_| rng.normal(0.0, 0.5) as f32);
        let x = random3(&mut rng, (2, 4, 4));
        let probe = random3(&mut rng, (3, 4, 4));
        let loss = |c: &Conv3x3, x: &Array3<f32>| -> f64 {
            c.forward(x).iter().zip(probe.iter()).map(|(a, b)| (a * b) as f64).sum()
        };
        let mut grad = Conv3x3::zeros(2, 3);
        let dx = conv.backward(&x, &probe, &mut grad, true).unwrap();
        let eps = 1e-2f32;
        for idx in [(0, 0), (1, 7), (2, 17)] {
            let mut p = conv.clone();
            p.weight[idx] += eps;
            let mut m = conv.clone();
            m.weight[idx] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps as f64);
            assert!((fd - grad.weight[idx] as f64).abs() < 1e-2, "dW{idx:?}");
        }
        for idx in [(0, 0, 0), (1, 2, 3), (0, 3, 1)] {
            let mut p = x.clone();
            p[idx] += eps;
            let mut m = x.clone();
            m[idx] -= eps;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * eps as f64);
            assert!((fd - dx[idx] as f64).abs() < 1e-2, "dx{idx:?}");
        }
        let fd_b: f64 = probe.index_axis(Axis(0), 1).iter().map(|v| *v as f64).sum();
        assert!((fd_b - grad.bias[1] as f64).abs() < 1e-3);
    }

    #[test]
    fn maxpool_round_trip() {
        let x = Array3::from_shape_vec((1, 2, 4), vec![1., 5., 2., 2., 3., 4., 9., 0.]).unwrap();
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.as_slice().unwrap(), &[5.0, 9.0]);
        let g = Array3::from_shape_vec((1, 1, 2), vec![1.0, 2.0]).unwrap();
        let dx = maxpool2_backward(x.dim(), &arg, &g);
        assert_eq!(dx.as_slice().unwrap(), &[0., 1., 0., 0., 0., 0., 2., 0.]);
    }
}
