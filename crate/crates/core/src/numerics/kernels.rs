//! Forward/backward kernels shared by the tape and the graph-free
//! inference paths, so both produce bit-identical values.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    LogSoftmax,
}

impl Activation {
    /// Applies the activation in place to a `[rows, cols]` buffer.
    pub fn apply(self, data: &mut [f32], cols: usize) {
        match self {
            Activation::Identity => {}
            Activation::Tanh => data.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Relu => data.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Sigmoid => data.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::LogSoftmax => data.chunks_mut(cols).for_each(log_softmax_row),
        }
    }

    /// Given the activation's output `y` and upstream gradient `dy`, writes the
    /// gradient with respect to the pre-activation into `dx` (accumulating).
    pub fn backward(self, y: &[f32], dy: &[f32], dx: &mut [f32], cols: usize) {
        match self {
            Activation::Identity => dx.iter_mut().zip(dy).for_each(|(d, g)| *d += g),
            Activation::Tanh => {
                for ((d, g), y) in dx.iter_mut().zip(dy).zip(y) {
                    *d += g * (1.0 - y * y);
                }
            }
            Activation::Relu => {
                for ((d, g), y) in dx.iter_mut().zip(dy).zip(y) {
                    if *y > 0.0 {
                        *d += g;
                    }
                }
            }
            Activation::Sigmoid => {
                for ((d, g), y) in dx.iter_mut().zip(dy).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }
            Activation::LogSoftmax => {
                for ((drow, grow), yrow) in dx
                    .chunks_mut(cols)
                    .zip(dy.chunks(cols))
                    .zip(y.chunks(cols))
                {
                    let gsum: f32 = grow.iter().sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += g - y.exp() * gsum;
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

/// `x · w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
pub fn linear(x: ArrayView2<f32>, w: ArrayView2<f32>, b: &[f32]) -> Array2<f32> {
    let (m, n) = (x.nrows(), w.ncols());
    let mut out = Array2::<f32>::zeros((m, n));
    for mut row in out.rows_mut() {
        row.as_slice_mut()
            .expect("fresh array is contiguous")
            .copy_from_slice(b);
    }
    general_mat_mul(1.0, &x, &w, 1.0, &mut out);
    out
}

/// `c += a · b`.
pub fn matmul_acc(a: ArrayView2<f32>, b: ArrayView2<f32>, c: &mut ArrayViewMut2<f32>) {
    general_mat_mul(1.0, &a, &b, 1.0, c);
}

/// Geometry of a stride-1, unpadded square convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 1 - self.kernel
    }

    /// Columns of the unfolded patch matrix: `kernel² · in_channels`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Unfolds NHWC input into a `[N·Ho·Wo, k·k·C]` patch matrix. Patch columns
/// are ordered `(ky, kx, c)`.
pub fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (ho, wo, c, k) = (g.out_height(), g.out_width(), g.in_channels, g.kernel);
    let plen = g.patch_len();
    let mut cols = vec![0.0f32; g.out_positions() * plen];
    let mut dst = cols.chunks_exact_mut(plen);
    for n in 0..g.batch {
        let img = &x[n * g.height * g.width * c..(n + 1) * g.height * g.width * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let patch = dst.next().expect("patch count");
                for ky in 0..k {
                    let src = ((oy + ky) * g.width + ox) * c;
                    let run = k * c;
                    patch[ky * run..(ky + 1) * run].copy_from_slice(&img[src..src + run]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto NHWC input positions.
pub fn col2im_acc(dcols: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let (ho, wo, c, k) = (g.out_height(), g.out_width(), g.in_channels, g.kernel);
    let plen = g.patch_len();
    let mut src = dcols.chunks_exact(plen);
    for n in 0..g.batch {
        let img = &mut dx[n * g.height * g.width * c..(n + 1) * g.height * g.width * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let patch = src.next().expect("patch count");
                for ky in 0..k {
                    let dst = ((oy + ky) * g.width + ox) * c;
                    let run = k * c;
                    img[dst..dst + run]
                        .iter_mut()
                        .zip(&patch[ky * run..(ky + 1) * run])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

/// 2×2 stride-2 max pooling over NHWC. Returns the pooled values and the
/// flat input index of every selected maximum.
pub fn max_pool2(x: &[f32], n: usize, h: usize, w: usize, c: usize) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * ho * wo * c];
    let mut arg = vec![0u32; out.len()];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = ((b * ho + oy) * wo + ox) * c;
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out[o + ch] = best;
                    arg[o + ch] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}
