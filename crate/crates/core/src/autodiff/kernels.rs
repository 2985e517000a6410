//! Forward and derivative kernels on flat buffers.
//!
//! Shared by the tape and by the tape-free inference path, so both produce
//! bit-identical activations. Every kernel processes samples independently;
//! a sample's output never depends on the rest of its batch.

/// Geometry of a 2-D convolution in NCHW / OIHW layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// `c = a * b + beta * c` for row-major `c` of shape `[m, n]`.
///
/// `a` is `[m, k]` and `b` is `[k, n]`, each addressed through the given
/// (row, column) strides so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every address the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeometry, sample: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let src = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], sample: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let dst = &mut sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![0.0; g.batch * g.out_channels * plane];
    let mut cols = vec![0.0; patch * plane];
    for s in 0..g.batch {
        im2col(
            g,
            &input[s * g.in_sample()..(s + 1) * g.in_sample()],
            &mut cols,
        );
        let dst = &mut out[s * g.out_channels * plane..(s + 1) * g.out_channels * plane];
        gemm(
            g.out_channels,
            patch,
            plane,
            weight,
            (patch, 1),
            &cols,
            (plane, 1),
            0.0,
            dst,
        );
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_exact_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to whichever operands are requested.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut d_input = want_input.then(|| vec![0.0; g.batch * g.in_sample()]);
    let mut d_weight = want_weight.then(|| vec![0.0; g.out_channels * patch]);
    let mut d_bias = want_bias.then(|| vec![0.0; g.out_channels]);
    let mut cols = vec![0.0; patch * plane];
    for s in 0..g.batch {
        let dy = &grad_out[s * g.out_channels * plane..(s + 1) * g.out_channels * plane];
        if let Some(db) = d_bias.as_mut() {
            for (o, row) in dy.chunks_exact(plane).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            im2col(
                g,
                &input[s * g.in_sample()..(s + 1) * g.in_sample()],
                &mut cols,
            );
            // dW[o, p] += sum_q dY[o, q] * cols[p, q]
            gemm(
                g.out_channels,
                plane,
                patch,
                dy,
                (plane, 1),
                &cols,
                (1, plane),
                1.0,
                dw,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            // dcols[p, q] = sum_o W[o, p] * dY[o, q]
            gemm(
                patch,
                g.out_channels,
                plane,
                weight,
                (1, patch),
                dy,
                (plane, 1),
                0.0,
                &mut cols,
            );
            col2im(
                g,
                &cols,
                &mut dx[s * g.in_sample()..(s + 1) * g.in_sample()],
            );
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// `y[n, out] = x[n, in] · W[out, in]ᵀ + b`.
///
/// Rows go through the product one at a time so each sample's logits are
/// independent of batch composition down to the last bit.
pub fn dense_forward(
    batch: usize,
    in_features: usize,
    out_features: usize,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * out_features];
    for (x, y) in input
        .chunks_exact(in_features)
        .zip(out.chunks_exact_mut(out_features))
    {
        for (o, slot) in y.iter_mut().enumerate() {
            let w = &weight[o * in_features..(o + 1) * in_features];
            let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            *slot = dot + bias.map_or(0.0, |b| b[o]);
        }
    }
    out
}

pub struct DenseGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    batch: usize,
    in_features: usize,
    out_features: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> DenseGrads {
    let d_input = want_input.then(|| {
        let mut dx = vec![0.0; batch * in_features];
        gemm(
            batch,
            out_features,
            in_features,
            grad_out,
            (out_features, 1),
            weight,
            (in_features, 1),
            0.0,
            &mut dx,
        );
        dx
    });
    let d_weight = want_weight.then(|| {
        let mut dw = vec![0.0; out_features * in_features];
        gemm(
            out_features,
            batch,
            in_features,
            grad_out,
            (1, out_features),
            input,
            (in_features, 1),
            0.0,
            &mut dw,
        );
        dw
    });
    let d_bias = want_bias.then(|| {
        let mut db = vec![0.0; out_features];
        for row in grad_out.chunks_exact(out_features) {
            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
        }
        db
    });
    DenseGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// Max pooling over non-overlapping or strided windows without padding.
///
/// Returns the pooled values and, per output, the flat input index of the
/// selected maximum (first occurrence wins on ties).
pub fn max_pool2d_forward(
    planes: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let oh = (height - kernel) / stride + 1;
    let ow = (width - kernel) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * stride * width + ox * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let idx = base + (oy * stride + ki) * width + ox * stride + kj;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn log_softmax_rows(input: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(input.len());
    for row in input.chunks_exact(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_channels {
                            for ki in 0..g.kernel_h {
                                for kj in 0..g.kernel_w {
                                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.height as isize
                                        || ix >= g.width as isize
                                    {
                                        continue;
                                    }
                                    let xv = x[((n * g.in_channels + c) * g.height + iy as usize)
                                        * g.width
                                        + ix as usize];
                                    let wv = w[((o * g.in_channels + c) * g.kernel_h + ki)
                                        * g.kernel_w
                                        + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * g.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 3,
            height: 7,
            width: 6,
            out_channels: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..g.batch * g.in_sample())
            .map(|i| ((i * 37 % 11) as f64) - 5.0)
            .collect();
        let w: Vec<f64> = (0..g.out_channels * g.patch_len())
            .map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.75)
            .collect();
        let fast = conv2d_forward(&g, &x, &w, None);
        let slow = naive_conv(&g, &x, &w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_picks_window_max() {
        let x = [
            1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0, -1.0, -2.0, 0.5, 0.25, 7.0, 6.0, 1.0, 1.5,
        ];
        let (y, arg) = max_pool2d_forward(1, 4, 4, 2, 2, &x);
        assert_eq!(y, vec![5.0, 9.0, 7.0, 1.5]);
        assert_eq!(arg, vec![1, 6, 12, 15]);
    }
}
