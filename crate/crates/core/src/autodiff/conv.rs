//! 2-D convolution kernels (im2col + GEMM) with their vector-Jacobian products.
//!
//! Batch items are processed independently and may run on the rayon pool;
//! weight and bias gradients are reduced serially in batch order so results
//! do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Static description of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, bias_len: usize, stride: usize, padding: usize) -> Result<Self> {
        let [_, in_c, in_h, in_w] = input.0;
        let [out_c, w_in, kh, kw] = weight.0;
        if stride == 0 {
            return Err(crate::error::contract("conv2d stride must be positive"));
        }
        if w_in != in_c {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("input channels: input has {in_c}, weight expects {w_in}"),
            });
        }
        if bias_len != out_c {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("bias length: {bias_len} for {out_c} output channels"),
            });
        }
        if in_h + 2 * padding < kh {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("height: padded input {} smaller than kernel {kh}", in_h + 2 * padding),
            });
        }
        if in_w + 2 * padding < kw {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("width: padded input {} smaller than kernel {kw}", in_w + 2 * padding),
            });
        }
        Ok(ConvGeometry {
            in_channels: in_c,
            out_channels: out_c,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            in_h,
            in_w,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Rows of the im2col matrix.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_item(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_item(&self) -> usize {
        self.out_channels * self.out_plane()
    }
}

/// `c = a · b + beta · c` for row-major matrices, `a` is m×k, `b` is k×n.
/// `trans_a`/`trans_b` reinterpret the stored matrix as its transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let p = g.out_plane();
    let pad = g.padding as isize;
    for ic in 0..g.in_channels {
        let plane = &input[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ic * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], grad_in: &mut [f64]) {
    let p = g.out_plane();
    let pad = g.padding as isize;
    for ic in 0..g.in_channels {
        let plane = &mut grad_in[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ic * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward_item(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let p = g.out_plane();
    for (oc, chunk) in out.chunks_mut(p).enumerate() {
        chunk.fill(bias[oc]);
    }
    if g.is_pointwise() {
        gemm(g.out_channels, g.in_channels, p, weight, false, input, false, 1.0, out);
    } else {
        let mut cols = vec![0.0; g.patch_len() * p];
        im2col(g, input, &mut cols);
        gemm(g.out_channels, g.patch_len(), p, weight, false, &cols, false, 1.0, out);
    }
}

/// Forward convolution over a batch. `weight` is (out, in, kh, kw).
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &[f64], stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias.len(), stride, padding)?;
    let batch = input.shape().batch();
    let mut out = Tensor::zeros(Shape::new(batch, g.out_channels, g.out_h, g.out_w));
    let w = weight.data();
    out.data_mut()
        .par_chunks_mut(g.out_item())
        .zip(input.data().par_chunks(g.in_item()))
        .for_each(|(o, i)| forward_item(&g, i, w, bias, o));
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), weight.shape().batch(), stride, padding)?;
    let batch = input.shape().batch();
    if grad_out.len() != batch * g.out_item() {
        return Err(Error::Shape {
            op: "conv2d_backward",
            detail: format!("grad_out has {} values, expected {}", grad_out.len(), batch * g.out_item()),
        });
    }
    let p = g.out_plane();
    let k = g.patch_len();
    let w = weight.data();
    let mut grad_input = vec![0.0; if need_input_grad { input.numel() } else { 0 }];

    let per_item: Vec<(Vec<f64>, Vec<f64>)> = {
        let run = |item: usize, gin: Option<&mut [f64]>| -> (Vec<f64>, Vec<f64>) {
            let x = &input.data()[item * g.in_item()..(item + 1) * g.in_item()];
            let go = &grad_out[item * g.out_item()..(item + 1) * g.out_item()];
            let gb: Vec<f64> = go.chunks(p).map(|c| c.iter().sum()).collect();
            let mut gw = vec![0.0; g.out_channels * k];
            if g.is_pointwise() {
                gemm(g.out_channels, p, k, go, false, x, true, 0.0, &mut gw);
                if let Some(gin) = gin {
                    gemm(k, g.out_channels, p, w, true, go, false, 0.0, gin);
                }
            } else {
                let mut cols = vec![0.0; k * p];
                im2col(&g, x, &mut cols);
                gemm(g.out_channels, p, k, go, false, &cols, true, 0.0, &mut gw);
                if let Some(gin) = gin {
                    gemm(k, g.out_channels, p, w, true, go, false, 0.0, &mut cols);
                    col2im(&g, &cols, gin);
                }
            }
            (gw, gb)
        };
        if need_input_grad {
            grad_input
                .par_chunks_mut(g.in_item())
                .enumerate()
                .map(|(item, gin)| run(item, Some(gin)))
                .collect()
        } else {
            (0..batch).into_par_iter().map(|item| run(item, None)).collect()
        }
    };

    let mut grad_weight = vec![0.0; weight.numel()];
    let mut grad_bias = vec![0.0; g.out_channels];
    for (gw, gb) in &per_item {
        grad_weight.iter_mut().zip(gw).for_each(|(a, b)| *a += b);
        grad_bias.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(input: &Tensor, weight: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
        let g = ConvGeometry::new(input.shape(), weight.shape(), bias.len(), stride, pad).unwrap();
        let n = input.shape().batch();
        let mut out = Tensor::zeros(Shape::new(n, g.out_channels, g.out_h, g.out_w));
        for b in 0..n {
            for oc in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = bias[oc];
                        for ic in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    acc += input.at(b, ic, iy as usize, ix as usize) * weight.at(oc, ic, ky, kx);
                                }
                            }
                        }
                        let idx = ((b * g.out_channels + oc) * g.out_h + oy) * g.out_w + ox;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 3), (3, 2, 5), (1, 0, 2)] {
            let x = Tensor::normal(Shape::new(2, 3, 9, 7), 1.0, &mut rng);
            let w = Tensor::normal(Shape::new(4, 3, k, k), 1.0, &mut rng);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {pad} k {k}");
        }
    }

    #[test]
    fn mismatched_channels_name_the_dimension() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let err = conv2d_forward(&x, &w, &[0.0], 1, 0).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }
}
