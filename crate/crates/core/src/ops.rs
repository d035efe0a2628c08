//! Convolution, pooling, and resizing on [`Tensor`]s.
//!
//! Convolution is cross-correlation (no kernel flip): learned kernels absorb
//! the orientation and backprop indexing stays direct. `same` padding uses
//! zeros, which is the neutral value for zero-mean inputs. The inner multiply
//! is an im2col + GEMM; the reduction order for every output element is fixed,
//! so results are reproducible run to run.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, output spatially equal to the input. Requires odd
    /// kernels; the kernel center sits at offset ceil(k/2)-1.
    Same,
    /// No padding, output shrinks to (H-kh+1, W-kw+1).
    Valid,
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub maps: usize,
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    /// Rows of the im2col matrix: one per (channel, kernel tap).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the im2col matrix: one per output pixel.
    pub fn cells(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn conv_geometry(
    input_shape: &[usize],
    kernel_shape: &[usize],
    bias_len: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if input_shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input must be [C,H,W], got {input_shape:?}"
        )));
    }
    if kernel_shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d kernels must be [K,C,kh,kw], got {kernel_shape:?}"
        )));
    }
    let (channels, in_h, in_w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (maps, kc, kh, kw) = (
        kernel_shape[0],
        kernel_shape[1],
        kernel_shape[2],
        kernel_shape[3],
    );
    if kc != channels {
        return Err(Error::ShapeMismatch(format!(
            "kernel channel count {kc} != input channel count {channels}"
        )));
    }
    if bias_len != maps {
        return Err(Error::ShapeMismatch(format!(
            "bias length {bias_len} != kernel count {maps}"
        )));
    }
    let (out_h, out_w, pad_h, pad_w) = match padding {
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "same padding requires odd kernels, got {kh}x{kw}"
                )));
            }
            (in_h, in_w, kh / 2, kw / 2)
        }
        Padding::Valid => {
            if kh > in_h || kw > in_w {
                return Err(Error::ShapeMismatch(format!(
                    "valid conv kernel {kh}x{kw} exceeds input {in_h}x{in_w}"
                )));
            }
            (in_h - kh + 1, in_w - kw + 1, 0, 0)
        }
    };
    Ok(ConvGeom {
        maps,
        channels,
        kh,
        kw,
        in_h,
        in_w,
        out_h,
        out_w,
        pad_h,
        pad_w,
    })
}

/// Fill `cols` with the im2col matrix of `input`: row (c,p,q), column (i,j)
/// holds the zero-padded input value at (c, i+p-pad_h, j+q-pad_w).
pub(crate) fn im2col_into(input: &[f64], g: &ConvGeom, cols: &mut Vec<f64>) {
    let cells = g.cells();
    cols.clear();
    cols.resize(g.patch_len() * cells, 0.0);
    for c in 0..g.channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for p in 0..g.kh {
            for q in 0..g.kw {
                let row = ((c * g.kh + p) * g.kw + q) * cells;
                for oi in 0..g.out_h {
                    let si = oi as isize + p as isize - g.pad_h as isize;
                    if si < 0 || si >= g.in_h as isize {
                        continue; // stays zero
                    }
                    let dst = &mut cols[row + oi * g.out_w..row + (oi + 1) * g.out_w];
                    let dx = q as isize - g.pad_w as isize;
                    let j0 = (-dx).max(0) as usize;
                    let j1 = (g.in_w as isize - dx).clamp(0, g.out_w as isize) as usize;
                    if j0 >= j1 {
                        continue;
                    }
                    let src = &plane[(si as usize) * g.in_w..];
                    let s0 = (j0 as isize + dx) as usize;
                    dst[j0..j1].copy_from_slice(&src[s0..s0 + (j1 - j0)]);
                }
            }
        }
    }
}

/// out[K x cells] = kernels[K x patch_len] * cols[patch_len x cells] + bias.
pub(crate) fn conv_gemm(kernels: &[f64], bias: &[f64], cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (m, k, n) = (g.maps, g.patch_len(), g.cells());
    debug_assert_eq!(kernels.len(), m * k);
    debug_assert_eq!(cols.len(), k * n);
    let mut out = vec![0.0f64; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            kernels.as_ptr(),
            k as isize,
            1,
            cols.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    for map in 0..m {
        let b = bias[map];
        for v in &mut out[map * n..(map + 1) * n] {
            *v += b;
        }
    }
    out
}

/// 2-D convolution (cross-correlation) of `input` [C,H,W] with `kernels`
/// [K,C,kh,kw] plus one bias per output map.
///
/// `out[k] = sum_c corr(input[c], kernels[k,c]) + bias[k]`
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), kernels.shape(), bias.len(), padding)?;
    let mut cols = Vec::new();
    im2col_into(input.data(), &g, &mut cols);
    let out = conv_gemm(kernels.data(), bias.data(), &cols, &g);
    Tensor::new(vec![g.maps, g.out_h, g.out_w], out)
}

/// Copy a [C,h,w] sub-window of a [C,H,W] tensor at top-left (y, x).
pub fn crop(image: &Tensor, y: usize, x: usize, h: usize, w: usize) -> Tensor {
    let (c, ih, iw) = (image.dim(0), image.dim(1), image.dim(2));
    debug_assert!(y + h <= ih && x + w <= iw);
    let data = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            let row = (ch * ih + y + i) * iw + x;
            out.extend_from_slice(&data[row..row + w]);
        }
    }
    Tensor::new(vec![c, h, w], out).expect("crop stays in bounds")
}

/// Block-sum pooling: each output cell is the sum of its m-by-m input block.
/// The trainable pooling scale and bias live in the network layer, so this op
/// stays a plain sum.
pub fn meanpool2d(input: &Tensor, m: usize) -> Result<Tensor> {
    if input.ndim() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "meanpool2d input must be [C,H,W], got {:?}",
            input.shape()
        )));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("pool size must be positive".into()));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if h % m != 0 || w % m != 0 {
        return Err(Error::ShapeMismatch(format!(
            "pool size {m} does not divide input {h}x{w}"
        )));
    }
    let (oh, ow) = (h / m, w / m);
    let mut out = vec![0.0f64; c * oh * ow];
    let data = input.data();
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut sum = 0.0;
                for di in 0..m {
                    let row = &plane[(oi * m + di) * w + oj * m..];
                    for &v in &row[..m] {
                        sum += v;
                    }
                }
                out[(ch * oh + oi) * ow + oj] = sum;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Bilinear resize with corner-aligned sampling.
///
/// Output pixel (i,j) samples the source at (i*(H-1)/(outH-1), j*(W-1)/(outW-1));
/// a single-pixel output axis samples coordinate 0. Same-size calls copy the
/// input bitwise.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if input.ndim() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "resize input must be [C,H,W], got {:?}",
            input.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "resize output size must be positive".into(),
        ));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let src_y = |i: usize| -> f64 {
        if out_h == 1 {
            0.0
        } else {
            i as f64 * (h - 1) as f64 / (out_h - 1) as f64
        }
    };
    let src_x = |j: usize| -> f64 {
        if out_w == 1 {
            0.0
        } else {
            j as f64 * (w - 1) as f64 / (out_w - 1) as f64
        }
    };
    let data = input.data();
    let mut out = vec![0.0f64; c * out_h * out_w];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for i in 0..out_h {
            let y = src_y(i);
            let y0 = (y.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fy = y - y0 as f64;
            for j in 0..out_w {
                let x = src_x(j);
                let x0 = (x.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fx = x - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * out_h + i) * out_w + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_input_yields_bias() {
        let input = Tensor::zeros(vec![2, 5, 5]);
        let mut rng = Rng::new(3);
        let kernels = random_tensor(vec![3, 2, 3, 3], &mut rng);
        let bias = Tensor::new(vec![3], vec![0.25, -1.5, 2.0]).unwrap();
        for padding in [Padding::Same, Padding::Valid] {
            let out = conv2d(&input, &kernels, &bias, padding).unwrap();
            for k in 0..3 {
                for i in 0..out.dim(1) {
                    for j in 0..out.dim(2) {
                        assert_eq!(out.at(&[k, i, j]), bias.data()[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = Rng::new(11);
        let input = random_tensor(vec![1, 6, 7], &mut rng);
        let mut kern = Tensor::zeros(vec![1, 1, 3, 3]);
        kern.data_mut()[4] = 1.0; // center tap
        let bias = Tensor::zeros(vec![1]);
        let out = conv2d(&input, &kern, &bias, Padding::Same).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn paper_c2_shape() {
        let input = Tensor::zeros(vec![10, 84, 28]);
        let kernels = Tensor::zeros(vec![64, 10, 9, 9]);
        let bias = Tensor::zeros(vec![64]);
        let out = conv2d(&input, &kernels, &bias, Padding::Same).unwrap();
        assert_eq!(out.shape(), &[64, 84, 28]);
    }

    #[test]
    fn even_kernel_same_rejected() {
        let input = Tensor::zeros(vec![1, 5, 5]);
        let kernels = Tensor::zeros(vec![1, 1, 2, 2]);
        let bias = Tensor::zeros(vec![1]);
        assert!(conv2d(&input, &kernels, &bias, Padding::Same).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let input = Tensor::zeros(vec![2, 5, 5]);
        let kernels = Tensor::zeros(vec![1, 3, 3, 3]);
        let bias = Tensor::zeros(vec![1]);
        assert!(conv2d(&input, &kernels, &bias, Padding::Same).is_err());
    }

    #[test]
    fn valid_conv_matches_naive() {
        let mut rng = Rng::new(5);
        let input = random_tensor(vec![2, 6, 5], &mut rng);
        let kernels = random_tensor(vec![3, 2, 3, 2], &mut rng);
        let bias = random_tensor(vec![3], &mut rng);
        let out = conv2d(&input, &kernels, &bias, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[3, 4, 4]);
        for k in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = bias.data()[k];
                    for c in 0..2 {
                        for p in 0..3 {
                            for q in 0..2 {
                                acc += input.at(&[c, i + p, j + q]) * kernels.at(&[k, c, p, q]);
                            }
                        }
                    }
                    let got = out.at(&[k, i, j]);
                    assert!((got - acc).abs() < 1e-12, "({k},{i},{j}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = Rng::new(21);
        let x = random_tensor(vec![2, 7, 6], &mut rng);
        let y = random_tensor(vec![2, 7, 6], &mut rng);
        let kernels = random_tensor(vec![2, 2, 3, 3], &mut rng);
        let zero_bias = Tensor::zeros(vec![2]);
        let (a, b) = (0.7, -1.3);
        let mixed = Tensor::new(
            vec![2, 7, 6],
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&xv, &yv)| a * xv + b * yv)
                .collect(),
        )
        .unwrap();
        let out_mixed = conv2d(&mixed, &kernels, &zero_bias, Padding::Same).unwrap();
        let out_x = conv2d(&x, &kernels, &zero_bias, Padding::Same).unwrap();
        let out_y = conv2d(&y, &kernels, &zero_bias, Padding::Same).unwrap();
        for ((&m, &xv), &yv) in out_mixed.iter().zip(out_x.iter()).zip(out_y.iter()) {
            assert!((m - (a * xv + b * yv)).abs() < 1e-10);
        }
    }

    #[test]
    fn meanpool_constant_block() {
        let input = Tensor::full(vec![1, 8, 8], 0.5);
        let out = meanpool2d(&input, 4).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        for &v in out.iter() {
            assert_eq!(v, 8.0); // 16 * 0.5
        }
    }

    #[test]
    fn meanpool_series_sum() {
        let input = Tensor::new(vec![1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let out = meanpool2d(&input, 4).unwrap();
        assert_eq!(out.data(), &[136.0]);
    }

    #[test]
    fn meanpool_paper_shape() {
        let input = Tensor::zeros(vec![64, 84, 28]);
        let out = meanpool2d(&input, 4).unwrap();
        assert_eq!(out.shape(), &[64, 21, 7]);
    }

    #[test]
    fn meanpool_rejects_nondivisible() {
        let input = Tensor::zeros(vec![1, 5, 4]);
        assert!(meanpool2d(&input, 4).is_err());
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let mut rng = Rng::new(2);
        let input = random_tensor(vec![3, 5, 4], &mut rng);
        let out = resize_bilinear(&input, 5, 4).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let input = Tensor::full(vec![2, 3, 5], 0.73);
        let out = resize_bilinear(&input, 7, 2).unwrap();
        for &v in out.iter() {
            assert!((v - 0.73).abs() < 1e-15);
        }
    }

    #[test]
    fn resize_2x2_to_2x3_interpolates_middle() {
        // [[0,1],[0,1]] widened to 3 columns: middle column sits halfway.
        let input = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize_bilinear(&input, 2, 3).unwrap();
        assert_eq!(out.shape(), &[1, 2, 3]);
        for i in 0..2 {
            assert_eq!(out.at(&[0, i, 0]), 0.0);
            assert_eq!(out.at(&[0, i, 1]), 0.5);
            assert_eq!(out.at(&[0, i, 2]), 1.0);
        }
    }

    #[test]
    fn resize_rejects_zero_output() {
        let input = Tensor::zeros(vec![1, 2, 2]);
        assert!(resize_bilinear(&input, 0, 2).is_err());
    }
}
